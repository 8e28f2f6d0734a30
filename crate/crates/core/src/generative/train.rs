use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decode::{greedy, sample_many, DecoderSession};
use super::model::{image_tensor, Decoder, Stage};
use crate::data::{CaptionRecord, FeatureStore, Split};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, ReferenceCorpus};
use crate::tensor::{Graph, Optimizer, OptimizerConfig};
use crate::text::{Vocabulary, EOS, PAD};
use crate::traits::TraitTable;

/// One (image, trait, target) triple; the target ends in EOS unless the
/// caption was cut at `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenExample {
    pub image_id: String,
    pub trait_id: usize,
    pub target: Vec<usize>,
}

pub fn build_gen_examples(
    records: &[CaptionRecord],
    split: Split,
    traits: &TraitTable,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<GenExample>> {
    let mut problems = Vec::new();
    let mut out = Vec::new();
    let mut truncated = 0;
    for r in records.iter().filter(|r| r.split == split) {
        let Some(trait_id) = traits.id(&r.personality) else {
            problems.push(format!("{}: unknown personality {:?}", r.image_id, r.personality));
            continue;
        };
        let mut target = vocab.encode(&r.tokens());
        if target.len() >= max_len {
            truncated += 1;
            target.truncate(max_len);
        } else {
            target.push(EOS);
        }
        out.push(GenExample {
            image_id: r.image_id.clone(),
            trait_id,
            target,
        });
    }
    if truncated > 0 {
        log::warn!("{truncated} captions truncated to {max_len} tokens");
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XeConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for XeConfig {
    fn default() -> Self {
        XeConfig {
            batch_size: 50,
            epochs: 10,
            optimizer: OptimizerConfig::adam(5e-4),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct XeLog {
    /// Mean per-token loss of each batch.
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

fn batch_inputs<'a>(decoder: &Decoder, features: &FeatureStore, batch: &[&'a GenExample]) -> Result<(crate::tensor::Tensor, Vec<usize>, Vec<Vec<usize>>)> {
    let ids: Vec<&str> = batch.iter().map(|e| e.image_id.as_str()).collect();
    let x = image_tensor(features, &ids, decoder.config.kind)?;
    let traits = batch.iter().map(|e| e.trait_id).collect();
    let targets = batch.iter().map(|e| e.target.clone()).collect();
    Ok((x, traits, targets))
}

/// Cross-entropy training with teacher forcing.
pub fn train_xe(decoder: &mut Decoder, examples: &[GenExample], features: &FeatureStore, config: &XeConfig) -> Result<XeLog> {
    if config.batch_size == 0 || examples.is_empty() {
        return Err(Error::Config("cross-entropy training needs a positive batch size and examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = XeLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&GenExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (x, traits, targets) = batch_inputs(decoder, features, &batch)?;
            let mut g = Graph::new();
            let loss = decoder.xe_loss(&mut g, x, &traits, &targets)?;
            let v = g.value(loss).item();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut decoder.params);
            opt.step(&mut decoder.params)?;
            log.batch_losses.push(v);
            total += v;
            n += 1;
        }
        let mean = total / n.max(1) as f64;
        log::info!("xe epoch {epoch}: per-token loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    decoder.stage = Stage::Xe;
    Ok(log)
}

/// Mean per-token teacher-forced NLL over `examples` (no parameter update).
pub fn teacher_forced_loss(decoder: &Decoder, examples: &[GenExample], features: &FeatureStore) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_chunks(64)
        .map(|chunk| {
            let batch: Vec<&GenExample> = chunk.iter().collect();
            let (x, traits, targets) = batch_inputs(decoder, features, &batch)?;
            let mut g = Graph::new();
            let lp = decoder.sequence_logprobs(&mut g, x, &traits, &targets)?;
            let tokens = targets.iter().flatten().filter(|&&w| w != PAD).count();
            Ok((-g.value(lp).sum(), tokens))
        })
        .collect::<Result<_>>()?;
    let (nll, tokens) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if tokens == 0 {
        return Err(Error::Evaluation("no target tokens to score".into()));
    }
    Ok(nll / tokens as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScstConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub samples_per_image: usize,
    pub max_len: usize,
}

impl Default for ScstConfig {
    fn default() -> Self {
        ScstConfig {
            batch_size: 50,
            epochs: 5,
            optimizer: OptimizerConfig::adam(5e-5),
            seed: 0,
            samples_per_image: 1,
            max_len: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScstLog {
    /// Mean CIDEr-D of the sampled captions in each batch.
    pub batch_sample_reward: Vec<f64>,
    /// Mean CIDEr-D of the greedy baseline in each batch.
    pub batch_greedy_reward: Vec<f64>,
    /// Mean sampled reward over the trailing epoch's worth of batches.
    pub running_reward: Vec<f64>,
    pub epoch_sample_reward: Vec<f64>,
    pub epoch_greedy_reward: Vec<f64>,
}

fn words(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).unwrap_or("UNK").to_string()).collect()
}

struct Rollout {
    samples: Vec<Vec<usize>>,
    rewards: Vec<f64>,
    baseline: f64,
}

/// Self-critical policy gradient on CIDEr-D, starting from an XE-trained
/// decoder. `references` supplies both the reward references and the idf.
pub fn train_scst(
    decoder: &mut Decoder,
    examples: &[GenExample],
    features: &FeatureStore,
    vocab: &Vocabulary,
    references: &ReferenceCorpus,
    config: &ScstConfig,
) -> Result<ScstLog> {
    if decoder.stage == Stage::Init {
        return Err(Error::Config(
            "self-critical training must start from a cross-entropy checkpoint; run the xe stage first".into(),
        ));
    }
    if config.batch_size == 0 || config.samples_per_image == 0 || examples.is_empty() {
        return Err(Error::Config("SCST needs examples, a positive batch size and samples_per_image".into()));
    }
    if config.max_len < 3 {
        return Err(Error::Config(format!("max_len {} must allow at least 3 tokens", config.max_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = ScstLog::default();
    let window = examples.len().div_ceil(config.batch_size);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut es, mut eg, mut nb) = (0.0, 0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let model = &*decoder;
            let rollouts: Vec<Rollout> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let x = image_tensor(features, &[ex.image_id.as_str()], model.config.kind)?;
                    let session = DecoderSession::new(model, x, ex.trait_id)?;
                    let reward = |ids: &[usize]| cider_d(&words(vocab, ids), &ex.image_id, references);
                    let base = greedy(&session, config.max_len)?;
                    let baseline = reward(&base.tokens)?;
                    let mut r = ChaCha8Rng::seed_from_u64(config.seed ^ (step << 32) ^ i as u64);
                    let drawn = sample_many(&session, config.samples_per_image, config.max_len, &mut r)?;
                    let rewards = drawn.iter().map(|s| reward(&s.tokens)).collect::<Result<Vec<_>>>()?;
                    let samples = drawn.iter().map(|s| s.target()).collect();
                    Ok(Rollout {
                        samples,
                        rewards,
                        baseline,
                    })
                })
                .collect::<Result<_>>()?;
            step += 1;

            let mut ids = Vec::new();
            let mut traits = Vec::new();
            let mut targets = Vec::new();
            let mut adv = Vec::new();
            let (mut sr, mut gr, mut ns) = (0.0, 0.0, 0);
            for (&i, ro) in chunk.iter().zip(&rollouts) {
                gr += ro.baseline;
                for (s, &r) in ro.samples.iter().zip(&ro.rewards) {
                    sr += r;
                    ns += 1;
                    if s.is_empty() {
                        continue;
                    }
                    ids.push(examples[i].image_id.as_str());
                    traits.push(examples[i].trait_id);
                    targets.push(s.clone());
                    adv.push(r - ro.baseline);
                }
            }
            let mean_s = sr / ns as f64;
            let mean_g = gr / chunk.len() as f64;
            if adv.iter().any(|&a| a != 0.0) {
                let x = image_tensor(features, &ids, decoder.config.kind)?;
                let mut g = Graph::new();
                let loss = decoder.scst_loss(&mut g, x, &traits, &targets, &adv)?;
                g.backward(loss)?;
                g.accumulate_param_grads(&mut decoder.params);
                opt.step(&mut decoder.params)?;
            }
            log.batch_sample_reward.push(mean_s);
            let recent = &log.batch_sample_reward[log.batch_sample_reward.len().saturating_sub(window)..];
            let run = recent.iter().sum::<f64>() / recent.len() as f64;
            log.batch_greedy_reward.push(mean_g);
            log.running_reward.push(run);
            es += mean_s;
            eg += mean_g;
            nb += 1;
        }
        let (es, eg) = (es / nb as f64, eg / nb as f64);
        log::info!("scst epoch {epoch}: sample reward {es:.4}, greedy reward {eg:.4}");
        log.epoch_sample_reward.push(es);
        log.epoch_greedy_reward.push(eg);
    }
    decoder.stage = Stage::Scst;
    Ok(log)
}

/// Mean CIDEr-D of greedy decodes for `(image, trait)` queries.
pub fn greedy_cider(
    decoder: &Decoder,
    features: &FeatureStore,
    queries: &[(String, usize)],
    vocab: &Vocabulary,
    references: &ReferenceCorpus,
    max_len: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Evaluation("no queries to decode".into()));
    }
    let scores: Vec<f64> = queries
        .par_iter()
        .map(|(id, t)| {
            let x = image_tensor(features, &[id.as_str()], decoder.config.kind)?;
            let s = DecoderSession::new(decoder, x, *t)?;
            let d = greedy(&s, max_len)?;
            cider_d(&words(vocab, &d.tokens), id, references)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One decoded caption as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    pub personality: String,
    pub caption: String,
    /// Decoder log-probability, or the retrieval dot-product score.
    pub score: f64,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut buf = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut buf, p)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
