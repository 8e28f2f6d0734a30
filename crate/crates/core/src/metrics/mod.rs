//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

mod bleu;
mod cider;
mod corpus;
mod rouge;

use std::collections::HashMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bleu::{bleu, BleuStats};
pub use cider::{cider_d, CIDER_SIGMA};
pub use corpus::ReferenceCorpus;
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};

use crate::error::{Error, Result};

/// Counts of the n-grams of one order, keyed by space-joined tokens.
pub(crate) fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> IndexMap<String, usize> {
    let mut out = IndexMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        let key = w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    /// Sentence-level BLEU of this caption alone (same formula, one candidate).
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_images: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub per_image: Vec<ImageScores>,
}

/// Scores one caption per corpus image. Predictions for unknown images, duplicate
/// predictions and images without a prediction are all reported and abort.
pub fn evaluate_captions<S: AsRef<str> + Sync>(
    predictions: &[(String, Vec<S>)],
    corpus: &ReferenceCorpus,
) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, &[S]> = HashMap::with_capacity(predictions.len());
    let mut problems = Vec::new();
    for (id, toks) in predictions {
        if !corpus.contains(id) {
            problems.push(format!("prediction for unknown image {id}"));
        } else if by_id.insert(id.as_str(), toks.as_slice()).is_some() {
            problems.push(format!("duplicate prediction for image {id}"));
        }
    }
    let missing: Vec<&str> = corpus.ids().filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        problems.push(format!("{} images have no prediction: {}", missing.len(), missing.join(", ")));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let ids: Vec<&str> = corpus.ids().collect();
    let cands: Vec<Vec<&str>> = ids
        .iter()
        .map(|id| by_id[id].iter().map(AsRef::as_ref).collect())
        .collect();
    let refs: Vec<&[Vec<String>]> = ids.iter().map(|id| corpus.references(id).expect("known id")).collect();

    let per_image: Vec<ImageScores> = ids
        .par_iter()
        .zip(cands.par_iter())
        .zip(refs.par_iter())
        .map(|((id, cand), rs)| {
            let b = bleu(std::slice::from_ref(cand), std::slice::from_ref(rs), 4).scores(4);
            ImageScores {
                image_id: id.to_string(),
                bleu1: b[0],
                bleu4: b[3],
                rouge_l: rouge_l(cand, rs),
                cider: cider_d(cand, id, corpus).expect("known id"),
            }
        })
        .collect();
    let b = bleu(&cands, &refs, 4).scores(4);
    let n = per_image.len() as f64;
    Ok(MetricReport {
        num_images: per_image.len(),
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: per_image.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        cider: per_image.iter().map(|s| s.cider).sum::<f64>() / n,
        per_image,
    })
}
