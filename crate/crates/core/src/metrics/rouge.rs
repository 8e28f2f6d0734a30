pub const ROUGE_BETA: f64 = 1.2;

/// Length of the longest common subsequence.
pub fn lcs_len<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (beta 1.2), best over the references.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn swapped_pair_is_half() {
        assert_eq!(lcs_len(&t("a b"), &t("b a")), 1);
        assert!((rouge_l(&t("a b"), &[t("b a")]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_disjoint_and_empty() {
        assert!((rouge_l(&t("x y z"), &[t("x y z")]) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t("x y"), &[t("p q")]), 0.0);
        assert_eq!(rouge_l(&t(""), &[t("p q")]), 0.0);
    }
}
