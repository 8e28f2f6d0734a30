use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::classifier::TraitClassifier;
use super::table::{Polarity, TraitTable};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    pub polarity: Polarity,
    /// Distinct traits of this class predicted at least once.
    pub covered: usize,
    pub total: usize,
    /// `covered / total`, 0 for an empty class.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub num_captions: usize,
    pub classes: Vec<ClassCoverage>,
}

impl CoverageReport {
    pub fn class(&self, p: Polarity) -> &ClassCoverage {
        self.classes.iter().find(|c| c.polarity == p).expect("every class reported")
    }
}

/// Coverage of a set of predicted trait ids (duplicates are irrelevant).
pub fn coverage_of_predictions(predicted: &[usize], table: &TraitTable) -> Result<CoverageReport> {
    let distinct: BTreeSet<usize> = predicted.iter().copied().collect();
    if let Some(&bad) = distinct.iter().find(|&&t| t >= table.len()) {
        return Err(Error::Index {
            what: "predicted trait",
            index: bad,
            bound: table.len(),
        });
    }
    let classes = Polarity::ALL
        .iter()
        .map(|&p| {
            let covered = distinct.iter().filter(|&&t| table.polarity(t) == p).count();
            let total = table.class_size(p);
            ClassCoverage {
                polarity: p,
                covered,
                total,
                fraction: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
            }
        })
        .collect();
    Ok(CoverageReport {
        num_captions: predicted.len(),
        classes,
    })
}

/// Classifies every caption and reports per-polarity trait coverage.
pub fn trait_coverage(captions: &[&str], classifier: &TraitClassifier, vocab: &Vocabulary, table: &TraitTable) -> Result<CoverageReport> {
    if captions.is_empty() {
        return Err(Error::Contract("trait coverage needs at least one caption".into()));
    }
    if classifier.config.num_traits != table.len() {
        return Err(Error::Config(format!(
            "classifier has {} traits but the table has {}",
            classifier.config.num_traits,
            table.len()
        )));
    }
    let predicted = classifier.classify_all(vocab, captions)?;
    coverage_of_predictions(&predicted, table)
}
