//! TransResNet retrieval: joint-space encoders, in-batch-negative training
//! and recall evaluation.

mod eval;
mod model;
mod train;

pub use eval::{eval_recall, predict_top1, rank_candidates, EvalConfig, QueryRank, RankingResult};
pub use model::{in_batch_nll, score, stack_features, RetrievalConfig, TransResNet, TEXT_PREFIX};
pub use train::{build_examples, example_loss, train_retrieval, RetrievalExample, RetrievalTrainConfig, TrainLog};
