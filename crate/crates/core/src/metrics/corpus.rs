use std::collections::HashMap;

use indexmap::IndexMap;

use super::ngrams;
use crate::data::{CaptionRecord, Split};
use crate::error::{Error, Result};

/// Tf-idf vectors of one reference, per n-gram order.
#[derive(Debug, Clone)]
pub(crate) struct RefVector {
    pub vecs: [IndexMap<String, f64>; 4],
    pub norms: [f64; 4],
    pub len: usize,
}

/// Multi-reference test set with document frequencies over its images.
#[derive(Debug, Clone)]
pub struct ReferenceCorpus {
    refs: IndexMap<String, Vec<Vec<String>>>,
    df: [HashMap<String, usize>; 4],
    log_images: f64,
    ref_vecs: Vec<Vec<RefVector>>,
}

impl ReferenceCorpus {
    pub fn new(refs: IndexMap<String, Vec<Vec<String>>>) -> Result<Self> {
        let empty: Vec<String> = refs
            .iter()
            .filter(|(_, r)| r.is_empty())
            .map(|(id, _)| format!("image {id} has no references"))
            .collect();
        if !empty.is_empty() {
            return Err(Error::Validation(empty));
        }
        if refs.is_empty() {
            return Err(Error::Validation(vec!["reference corpus is empty".into()]));
        }
        let mut df: [HashMap<String, usize>; 4] = Default::default();
        for rs in refs.values() {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: IndexMap<String, ()> = IndexMap::new();
                for r in rs {
                    for g in ngrams(r, n + 1).into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        let mut c = ReferenceCorpus {
            log_images: (refs.len() as f64).ln(),
            refs,
            df,
            ref_vecs: Vec::new(),
        };
        c.ref_vecs = c.refs.values().map(|rs| rs.iter().map(|r| c.vectorize(r)).collect()).collect();
        Ok(c)
    }

    /// Groups tokenized captions of `split` by image.
    pub fn from_records(records: &[CaptionRecord], split: Split) -> Result<Self> {
        let mut refs: IndexMap<String, Vec<Vec<String>>> = IndexMap::new();
        for r in records.iter().filter(|r| r.split == split) {
            refs.entry(r.image_id.clone()).or_default().push(r.tokens());
        }
        Self::new(refs)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.refs.contains_key(image_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.refs.keys().map(String::as_str)
    }

    pub fn references(&self, image_id: &str) -> Option<&[Vec<String>]> {
        self.refs.get(image_id).map(Vec::as_slice)
    }

    /// Number of images whose references contain the n-gram (tokens joined by spaces).
    pub fn document_frequency(&self, ngram: &str) -> usize {
        let n = ngram.split(' ').count();
        if n == 0 || n > 4 {
            return 0;
        }
        self.df[n - 1].get(ngram).copied().unwrap_or(0)
    }

    /// Term weight: count times idf; n-grams absent from every reference weigh 0.
    pub(crate) fn vectorize<S: AsRef<str>>(&self, tokens: &[S]) -> RefVector {
        let mut vecs: [IndexMap<String, f64>; 4] = Default::default();
        let mut norms = [0.0; 4];
        for n in 0..4 {
            for (g, c) in ngrams(tokens, n + 1) {
                let w = match self.df[n].get(&g) {
                    Some(&d) => c as f64 * (self.log_images - (d as f64).ln()),
                    None => 0.0,
                };
                norms[n] += w * w;
                vecs[n].insert(g, w);
            }
            norms[n] = norms[n].sqrt();
        }
        RefVector {
            vecs,
            norms,
            len: tokens.len(),
        }
    }

    pub(crate) fn reference_vectors(&self, image_id: &str) -> Option<&[RefVector]> {
        self.refs.get_index_of(image_id).map(|i| self.ref_vecs[i].as_slice())
    }
}
