use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureStore;
use crate::error::{Error, Result};
use crate::text::{tokenize, Vocabulary};
use crate::traits::TraitTable;

pub const MIN_CAPTION_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One (image, personality, caption) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: String,
    pub personality: String,
    pub caption: String,
    pub split: Split,
}

impl CaptionRecord {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.caption)
    }
}

/// Checks every record against the structural rules; all offenses are
/// reported together. `features` is optional so captions can be checked
/// before a feature store exists.
pub fn validate_records(records: &[CaptionRecord], traits: &TraitTable, features: Option<&FeatureStore>) -> Result<()> {
    let problems: Vec<String> = records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| record_problems(r, traits, features).into_iter().map(move |p| format!("record {}: {p}", i + 1)))
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

fn record_problems(r: &CaptionRecord, traits: &TraitTable, features: Option<&FeatureStore>) -> Vec<String> {
    let mut out = Vec::new();
    let n = tokenize(&r.caption).len();
    if n < MIN_CAPTION_TOKENS {
        out.push(format!("caption {:?} has {n} token(s), need at least {MIN_CAPTION_TOKENS}", r.caption));
    }
    if traits.id(&r.personality).is_none() {
        out.push(format!("unknown personality {:?}", r.personality));
    }
    if let Some(f) = features {
        if !f.contains(&r.image_id) {
            out.push(format!("image {:?} has no features", r.image_id));
        }
    }
    out
}

pub fn read_captions(path: &Path, traits: &TraitTable) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        match serde_json::from_str::<CaptionRecord>(line) {
            Ok(r) => {
                for p in record_problems(&r, traits, None) {
                    problems.push(format!("{}:{lineno}: {p}", path.display()));
                }
                records.push(r);
            }
            Err(e) => problems.push(format!("{}:{lineno}: {e}", path.display())),
        }
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Frequency-sorted vocabulary (descending count, then lexicographic) over
/// the given texts.
pub fn build_vocab_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for t in texts {
        any = true;
        for tok in tokenize(t) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t).filter(|t| !crate::text::RESERVED.contains(&t.as_str())))
}

/// Vocabulary over the training split only.
pub fn build_vocab(records: &[CaptionRecord], min_freq: usize) -> Result<Vocabulary> {
    build_vocab_from_texts(
        records.iter().filter(|r| r.split == Split::Train).map(|r| r.caption.as_str()),
        min_freq,
    )
}
