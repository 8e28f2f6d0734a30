//! Corpus formats, feature store, checkpoints and synthetic data.

pub mod checkpoint;
mod features;
mod records;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use features::{FeatureStore, FEATURE_MAGIC};
pub use records::{
    build_vocab, build_vocab_from_texts, read_captions, validate_records, write_captions, CaptionRecord, Split,
    MIN_CAPTION_TOKENS,
};
pub use synthetic::{generate_synthetic, ImageInfo, SyntheticCorpus, SyntheticSpec, SyntheticWorld};
