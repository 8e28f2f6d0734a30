//! Personality-conditioned caption generators (ShowTell, ShowAttTell,
//! UpDown), their two-stage training and decoding.

mod decode;
mod model;
mod train;

pub use decode::{beam_search, generate, greedy, sample, sample_many, DecodeConfig, Decoded, DecoderSession, RowState, StepModel, Strategy};
pub use model::{image_tensor, Decoder, DecoderConfig, DecoderKind, ImageMemory, LstmState, Stage};
pub use train::{
    build_gen_examples, greedy_cider, teacher_forced_loss, train_scst, train_xe, write_predictions, GenExample, Prediction,
    ScstConfig, ScstLog, XeConfig, XeLog,
};
