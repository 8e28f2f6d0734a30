use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{stack_features, TransResNet, TEXT_PREFIX};
use crate::data::{CaptionRecord, FeatureStore, Split};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Optimizer, OptimizerConfig};
use crate::text::{Pretraining, Vocabulary};
use crate::traits::TraitTable;

/// One (image, trait, encoded caption) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalExample {
    pub image_id: String,
    pub trait_id: usize,
    pub caption: Vec<usize>,
}

pub fn build_examples(
    records: &[CaptionRecord],
    split: Split,
    traits: &TraitTable,
    vocab: &Vocabulary,
    model: &TransResNet,
) -> Result<Vec<RetrievalExample>> {
    let mut problems = Vec::new();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        let Some(trait_id) = traits.id(&r.personality) else {
            problems.push(format!("{}: unknown personality {:?}", r.image_id, r.personality));
            continue;
        };
        if trait_id >= model.config.num_traits {
            problems.push(format!("{}: trait id {trait_id} beyond the model's table", r.image_id));
            continue;
        }
        out.push(RetrievalExample {
            image_id: r.image_id.clone(),
            trait_id,
            caption: model.encoder.prepare(vocab, &r.tokens())?,
        });
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// With full pretraining, epochs trained with the text encoder frozen.
    pub frozen_epochs: usize,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        RetrievalTrainConfig {
            batch_size: 500,
            epochs: 10,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            frozen_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Loss of one batch of examples (features looked up by image id).
pub fn example_loss(g: &mut Graph, model: &TransResNet, features: &FeatureStore, batch: &[&RetrievalExample]) -> Result<crate::tensor::Var> {
    let ids: Vec<&str> = batch.iter().map(|e| e.image_id.as_str()).collect();
    let feats = stack_features(features, &ids)?;
    let traits: Vec<usize> = batch.iter().map(|e| e.trait_id).collect();
    let caps: Vec<Vec<usize>> = batch.iter().map(|e| e.caption.clone()).collect();
    model.batch_loss(g, feats, &traits, &caps)
}

pub fn train_retrieval(
    model: &mut TransResNet,
    examples: &[RetrievalExample],
    features: &FeatureStore,
    config: &RetrievalTrainConfig,
) -> Result<TrainLog> {
    if config.batch_size < 2 {
        return Err(Error::Config("retrieval batches need at least 2 examples".into()));
    }
    if examples.len() < 2 {
        return Err(Error::Config(format!("{} training examples, need at least 2", examples.len())));
    }
    let batch_size = if config.batch_size > examples.len() {
        log::warn!("batch size {} exceeds corpus of {}; using {}", config.batch_size, examples.len(), examples.len());
        examples.len()
    } else {
        config.batch_size
    };
    let staged = model.config.encoder.pretraining == Pretraining::Full && config.frozen_epochs > 0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let frozen = staged && epoch < config.frozen_epochs;
        model.params.set_frozen_prefix(TEXT_PREFIX, frozen);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&RetrievalExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let distinct: HashSet<&Vec<usize>> = batch.iter().map(|e| &e.caption).collect();
            if distinct.len() < batch.len() {
                log::debug!("batch holds {} duplicate caption(s)", batch.len() - distinct.len());
            }
            let mut g = Graph::new();
            let loss = example_loss(&mut g, model, features, &batch)?;
            let v = g.value(loss).item();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params);
            opt.step(&mut model.params)?;
            log.batch_losses.push(v);
            total += v;
            n += 1;
        }
        let mean = total / n.max(1) as f64;
        log::info!("retrieval epoch {epoch}: loss {mean:.4}{}", if frozen { " (encoder frozen)" } else { "" });
        log.epoch_losses.push(mean);
    }
    model.params.set_frozen_prefix(TEXT_PREFIX, false);
    Ok(log)
}
