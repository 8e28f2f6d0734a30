use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::table::TraitTable;
use crate::data::{CaptionRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, Optimizer, OptimizerConfig, ParamId, ParamStore, Var};
use crate::text::{tokenize, TextEncoder, TextEncoderConfig, Vocabulary, WordVectors};

pub const CLASSIFIER_TEXT_PREFIX: &str = "text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub encoder: TextEncoderConfig,
    pub num_traits: usize,
}

/// Transformer (or bag-of-words) caption encoder with a T-way softmax head.
#[derive(Debug, Clone)]
pub struct TraitClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    pub encoder: TextEncoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl TraitClassifier {
    pub fn new(config: ClassifierConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.num_traits == 0 {
            return Err(Error::Config("classifier needs at least one trait".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = TextEncoder::new(&mut params, CLASSIFIER_TEXT_PREFIX, vocab_size, config.encoder.clone(), &mut rng)?;
        let d = encoder.output_dim();
        let head_w = params.init("head.w", &[d, config.num_traits], Init::FanIn, &mut rng)?;
        let head_b = params.init("head.b", &[config.num_traits], Init::Zeros, &mut rng)?;
        Ok(TraitClassifier {
            config,
            params,
            encoder,
            head_w,
            head_b,
        })
    }

    /// Weights in the softmax head: `T·d + T`.
    pub fn head_param_count(&self) -> usize {
        self.params.value(self.head_w).numel() + self.params.value(self.head_b).numel()
    }

    pub fn apply_pretraining(&mut self, vocab: &Vocabulary, word_vectors: Option<&WordVectors>, encoder: Option<&ParamStore>) -> Result<()> {
        self.encoder.apply_pretraining(&mut self.params, vocab, word_vectors, encoder)
    }

    /// `[B, T]` logits for prepared token sequences.
    pub fn logits(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Var> {
        let h = self.encoder.encode(g, &self.params, batch)?;
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        g.linear(h, w, b)
    }

    /// Mean cross-entropy against gold trait ids.
    pub fn loss(&self, g: &mut Graph, batch: &[Vec<usize>], labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_traits) {
            return Err(Error::Index {
                what: "trait label",
                index: bad,
                bound: self.config.num_traits,
            });
        }
        let z = self.logits(g, batch)?;
        let lp = g.log_softmax(z, 1)?;
        let picked = g.pick(lp, labels)?;
        let m = g.mean(picked);
        Ok(g.scale(m, -1.0))
    }

    /// Softmax distributions for prepared sequences, in parallel chunks.
    pub fn predict_prepared(&self, batch: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let parts: Vec<Vec<Vec<f64>>> = batch
            .par_chunks(64)
            .map(|chunk| {
                let mut g = Graph::new();
                let z = self.logits(&mut g, chunk)?;
                let p = g.softmax(z, 1)?;
                let p = g.value(p);
                Ok((0..chunk.len()).map(|i| p.row(i).to_vec()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Most probable trait (lowest id on ties) and the full distribution.
    pub fn classify(&self, vocab: &Vocabulary, caption: &str) -> Result<(usize, Vec<f64>)> {
        let toks = tokenize(caption);
        if toks.is_empty() {
            return Err(Error::Contract("cannot classify an empty caption".into()));
        }
        let ids = self.encoder.prepare(vocab, &toks)?;
        let probs = self.predict_prepared(&[ids])?.swap_remove(0);
        Ok((argmax(&probs), probs))
    }

    pub fn classify_all(&self, vocab: &Vocabulary, captions: &[&str]) -> Result<Vec<usize>> {
        let prepared = captions
            .iter()
            .map(|c| {
                let toks = tokenize(c);
                if toks.is_empty() {
                    return Err(Error::Contract(format!("cannot classify an empty caption: {c:?}")));
                }
                self.encoder.prepare(vocab, &toks)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict_prepared(&prepared)?.iter().map(|p| argmax(p)).collect())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierExample {
    pub tokens: Vec<usize>,
    pub trait_id: usize,
}

pub fn build_classifier_examples(
    records: &[CaptionRecord],
    split: Split,
    traits: &TraitTable,
    vocab: &Vocabulary,
    classifier: &TraitClassifier,
) -> Result<Vec<ClassifierExample>> {
    let mut problems = Vec::new();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        match traits.id(&r.personality) {
            Some(t) if t < classifier.config.num_traits => out.push(ClassifierExample {
                tokens: classifier.encoder.prepare(vocab, &r.tokens())?,
                trait_id: t,
            }),
            Some(t) => problems.push(format!("{}: trait id {t} outside the classifier's {} traits", r.image_id, classifier.config.num_traits)),
            None => problems.push(format!("{}: unknown personality {:?}", r.image_id, r.personality)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn accuracy(classifier: &TraitClassifier, examples: &[ClassifierExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Evaluation("no examples to score".into()));
    }
    let batch: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let probs = classifier.predict_prepared(&batch)?;
    let hits = probs.iter().zip(examples).filter(|(p, e)| argmax(p) == e.trait_id).count();
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            batch_size: 64,
            epochs: 10,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Dev accuracy after each epoch (empty without a dev set).
    pub dev_accuracy: Vec<f64>,
}

pub fn train_trait_classifier(
    classifier: &mut TraitClassifier,
    train: &[ClassifierExample],
    dev: &[ClassifierExample],
    config: &ClassifierTrainConfig,
) -> Result<ClassifierLog> {
    if config.batch_size == 0 || train.is_empty() {
        return Err(Error::Config("classifier training needs examples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = ClassifierLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| train[i].tokens.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].trait_id).collect();
            let mut g = Graph::new();
            let loss = classifier.loss(&mut g, &batch, &labels)?;
            let v = g.value(loss).item();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut classifier.params);
            opt.step(&mut classifier.params)?;
            log.batch_losses.push(v);
            total += v;
            n += 1;
        }
        log.epoch_losses.push(total / n as f64);
        if !dev.is_empty() {
            let acc = accuracy(classifier, dev)?;
            log::info!("classifier epoch {epoch}: loss {:.4}, dev accuracy {acc:.3}", total / n as f64);
            log.dev_accuracy.push(acc);
        }
    }
    Ok(log)
}
