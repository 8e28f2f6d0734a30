use super::corpus::ReferenceCorpus;
use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D of a candidate against the references of `image_id`, with idf
/// taken from `corpus`. Range [0, 10].
pub fn cider_d<S: AsRef<str>>(candidate: &[S], image_id: &str, corpus: &ReferenceCorpus) -> Result<f64> {
    let refs = corpus
        .reference_vectors(image_id)
        .ok_or_else(|| Error::Evaluation(format!("image {image_id} is not in the reference corpus")))?;
    let h = corpus.vectorize(candidate);
    let mut total = 0.0;
    for r in refs {
        let delta = h.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut sum_n = 0.0;
        for n in 0..4 {
            if h.norms[n] == 0.0 || r.norms[n] == 0.0 {
                continue;
            }
            let dot: f64 = h.vecs[n]
                .iter()
                .filter_map(|(g, &wh)| r.vecs[n].get(g).map(|&wr| wh.min(wr) * wr))
                .sum();
            sum_n += penalty * dot / (h.norms[n] * r.norms[n]);
        }
        total += sum_n / 4.0;
    }
    Ok(10.0 * total / refs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn corpus() -> ReferenceCorpus {
        let mut m = IndexMap::new();
        m.insert("a".to_string(), vec![t("my lovely little dog sleeps")]);
        m.insert("b".to_string(), vec![t("what a grim grey day")]);
        m.insert("c".to_string(), vec![t("the old man walks slowly")]);
        ReferenceCorpus::new(m).unwrap()
    }

    #[test]
    fn identity_scores_ten() {
        let c = corpus();
        let s = cider_d(&t("my lovely little dog sleeps"), "a", &c).unwrap();
        assert!((s - 10.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn no_shared_ngrams_scores_zero() {
        let c = corpus();
        assert_eq!(cider_d(&t("purple elephants dance"), "a", &c).unwrap(), 0.0);
        assert!(cider_d(&t("x"), "zzz", &c).is_err());
    }
}
