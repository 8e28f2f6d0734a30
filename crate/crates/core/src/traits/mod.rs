//! Trait taxonomy, the caption-to-trait classifier and trait coverage.

mod classifier;
mod coverage;
mod table;

pub use classifier::{
    accuracy, build_classifier_examples, train_trait_classifier, ClassifierConfig, ClassifierExample, ClassifierLog,
    ClassifierTrainConfig, TraitClassifier, CLASSIFIER_TEXT_PREFIX,
};
pub use coverage::{coverage_of_predictions, trait_coverage, ClassCoverage, CoverageReport};
pub use table::{Polarity, Trait, TraitTable};
