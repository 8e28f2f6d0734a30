//! Tokenization, vocabularies and the caption encoder.

mod embeddings;
mod encoder;
pub mod pretrain;
mod tokenize;
mod vocab;

pub use embeddings::{load_word_embeddings, WordVectors};
pub use encoder::{AttentionTrace, EncoderKind, Pretraining, TextEncoder, TextEncoderConfig};
pub use pretrain::{next_utterance_loss, pretrain_next_utterance, DialoguePair, DualEncoder, PretrainConfig, PretrainReport};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
