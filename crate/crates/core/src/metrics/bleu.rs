use indexmap::IndexMap;

use super::ngrams;

/// Pooled corpus counts from which BLEU-1..n follow.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    /// BLEU-1..=n_max with a single pooled brevity penalty and no smoothing.
    pub fn scores(&self, n_max: usize) -> Vec<f64> {
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        if self.candidate_len == 0 {
            return vec![0.0; n_max];
        }
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        let mut log_sum = 0.0;
        let mut dead = false;
        (0..n_max)
            .map(|k| {
                let (m, t) = (self.matches[k], self.totals[k]);
                if m == 0 || t == 0 {
                    dead = true;
                }
                if dead {
                    return 0.0;
                }
                log_sum += (m as f64 / t as f64).ln();
                bp * (log_sum / (k + 1) as f64).exp()
            })
            .collect()
    }
}

/// Corpus BLEU statistics for aligned candidates and reference sets.
pub fn bleu<C, R, S>(candidates: &[C], references: &[R], n_max: usize) -> BleuStats
where
    C: AsRef<[S]>,
    R: AsRef<[Vec<String>]>,
    S: AsRef<str>,
{
    assert_eq!(candidates.len(), references.len(), "candidates and references must align");
    let mut st = BleuStats {
        matches: vec![0; n_max],
        totals: vec![0; n_max],
        ..Default::default()
    };
    for (cand, refs) in candidates.iter().zip(references) {
        let cand = cand.as_ref();
        let refs = refs.as_ref();
        st.candidate_len += cand.len();
        // closest reference length; the shorter one wins a tie
        st.reference_len += refs
            .iter()
            .map(|r| (r.len().abs_diff(cand.len()), r.len()))
            .min()
            .map(|(_, l)| l)
            .unwrap_or(0);
        for n in 1..=n_max {
            let mut max_ref: IndexMap<String, usize> = IndexMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.matches[n - 1] += ngrams(cand, n)
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            st.totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn clipped_unigram_precision() {
        let b = bleu(&[t("the the the")], &[vec![t("the cat")]], 4).scores(4);
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn identity_is_one() {
        let b = bleu(&[t("a b c d e")], &[vec![t("a b c d e")]], 4).scores(4);
        assert!(b.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_candidate_counts_toward_brevity() {
        let st = bleu(&[t(""), t("x y z w")], &[vec![t("a b")], vec![t("x y z w")]], 4);
        assert_eq!(st.candidate_len, 4);
        assert_eq!(st.reference_len, 6);
        let b = st.scores(4);
        assert!((b[3] - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }
}
