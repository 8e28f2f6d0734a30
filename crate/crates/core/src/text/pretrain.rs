//! Next-utterance retrieval pretraining for the caption encoder.
//!
//! Two encoders (context and candidate) are trained so that the dot product
//! of a context with its true next utterance beats `k` negatives sampled from
//! the other pairs in the batch. Only the candidate encoder is kept.

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embeddings::WordVectors;
use super::encoder::{TextEncoder, TextEncoderConfig};
use super::tokenize::tokenize;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Optimizer, OptimizerConfig, ParamStore, Tensor, Var};

pub const CONTEXT_PREFIX: &str = "ctx.";
pub const CANDIDATE_PREFIX: &str = "cand.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub context: String,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per positive, drawn from the other pairs of the batch.
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
    /// Candidates per held-out query (true response included).
    pub eval_pool: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            negatives: 7,
            lr: 2e-3,
            seed: 0,
            eval_pool: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_top1: Option<f64>,
}

/// The trained context/candidate pair.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub store: ParamStore,
    pub context: TextEncoder,
    pub candidate: TextEncoder,
}

impl DualEncoder {
    pub fn new(vocab: &Vocabulary, config: TextEncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let context = TextEncoder::new(&mut store, CONTEXT_PREFIX, vocab.len(), config.clone(), &mut rng)?;
        let candidate = TextEncoder::new(&mut store, CANDIDATE_PREFIX, vocab.len(), config, &mut rng)?;
        Ok(DualEncoder {
            store,
            context,
            candidate,
        })
    }

    /// Initializes both encoders' word tables from pretrained vectors.
    pub fn apply_word_vectors(&mut self, vocab: &Vocabulary, wv: &WordVectors) -> Result<usize> {
        let mut matched = 0;
        for id in [self.context.word_embedding(), self.candidate.word_embedding()] {
            let mut t = self.store.value(id).clone();
            matched = wv.apply(vocab, &mut t)?;
            self.store.set(id, t)?;
        }
        Ok(matched)
    }

    /// Candidate-encoder weights renamed under `prefix`.
    pub fn candidate_weights(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, value) in self.store.named_values() {
            if let Some(rest) = name.strip_prefix(CANDIDATE_PREFIX) {
                out.add(format!("{prefix}{rest}"), value.clone())?;
            }
        }
        Ok(out)
    }
}

/// Mean negative log-likelihood of the true candidate for each context,
/// scored against the candidates listed in `negatives[i]` (batch indices).
pub fn next_utterance_loss(
    g: &mut Graph,
    dual: &DualEncoder,
    contexts: &[Vec<usize>],
    candidates: &[Vec<usize>],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let bs = contexts.len();
    if candidates.len() != bs || negatives.len() != bs {
        return Err(Error::Contract("context, candidate and negative lists differ in length".into()));
    }
    let k = negatives.first().map(Vec::len).unwrap_or(0);
    if k == 0 || negatives.iter().any(|n| n.len() != k) {
        return Err(Error::Config("every example needs the same k >= 1 negatives".into()));
    }
    let ctx = dual.context.encode(g, &dual.store, contexts)?;
    let cand = dual.candidate.encode(g, &dual.store, candidates)?;
    let ct = g.transpose(cand)?;
    let scores = g.matmul(ctx, ct)?;
    let flat = g.reshape(scores, &[bs * bs, 1])?;
    let mut picks = Vec::with_capacity(bs * (k + 1));
    for (i, negs) in negatives.iter().enumerate() {
        picks.push(i * bs + i);
        for &j in negs {
            if j >= bs {
                return Err(Error::Index {
                    what: "negative index",
                    index: j,
                    bound: bs,
                });
            }
            picks.push(i * bs + j);
        }
    }
    let gathered = g.embedding(flat, &picks)?;
    let logits = g.reshape(gathered, &[bs, k + 1])?;
    let lp = g.log_softmax(logits, 1)?;
    let pos = g.pick(lp, &vec![0; bs])?;
    let m = g.mean(pos);
    Ok(g.scale(m, -1.0))
}

fn encode_pairs(vocab: &Vocabulary, enc: &TextEncoder, pairs: &[DialoguePair]) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let mut ctx = Vec::with_capacity(pairs.len());
    let mut cand = Vec::with_capacity(pairs.len());
    for p in pairs {
        let c = enc.prepare(vocab, &tokenize(&p.context))?;
        let r = enc.prepare(vocab, &tokenize(&p.response))?;
        if c.is_empty() || r.is_empty() {
            return Err(Error::Validation(vec![format!("empty dialogue turn in pair {p:?}")]));
        }
        ctx.push(c);
        cand.push(r);
    }
    Ok((ctx, cand))
}

pub fn pretrain_next_utterance(
    train: &[DialoguePair],
    heldout: &[DialoguePair],
    vocab: &Vocabulary,
    encoder: TextEncoderConfig,
    config: &PretrainConfig,
    word_vectors: Option<&WordVectors>,
) -> Result<(DualEncoder, PretrainReport)> {
    if config.negatives == 0 || config.negatives >= config.batch_size {
        return Err(Error::Config(format!(
            "negatives ({}) must be in 1..batch_size ({})",
            config.negatives, config.batch_size
        )));
    }
    if train.len() <= config.negatives {
        return Err(Error::Config(format!(
            "{} training pairs cannot supply {} negatives",
            train.len(),
            config.negatives
        )));
    }
    let mut dual = DualEncoder::new(vocab, encoder, config.seed)?;
    if let Some(wv) = word_vectors {
        let n = dual.apply_word_vectors(vocab, wv)?;
        log::info!("pretraining: initialized {n} word vectors");
    }
    let (ctx, cand) = encode_pairs(vocab, &dual.candidate, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() <= config.negatives {
                continue;
            }
            let bc: Vec<_> = chunk.iter().map(|&i| ctx[i].clone()).collect();
            let br: Vec<_> = chunk.iter().map(|&i| cand[i].clone()).collect();
            let negs: Vec<Vec<usize>> = (0..chunk.len())
                .map(|i| {
                    sample(&mut rng, chunk.len() - 1, config.negatives)
                        .into_iter()
                        .map(|j| if j >= i { j + 1 } else { j })
                        .collect()
                })
                .collect();
            let mut g = Graph::new();
            let loss = next_utterance_loss(&mut g, &dual, &bc, &br, &negs)?;
            total += g.value(loss).item();
            batches += 1;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut dual.store);
            opt.step(&mut dual.store)?;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let heldout_top1 = if heldout.len() >= 2 {
        Some(heldout_top1(&dual, vocab, heldout, config.eval_pool, config.seed)?)
    } else {
        None
    };
    Ok((
        dual,
        PretrainReport {
            epoch_losses,
            heldout_top1,
        },
    ))
}

/// Fraction of held-out contexts whose true response scores highest among
/// `pool` candidates (the truth plus distinct distractor responses).
pub fn heldout_top1(dual: &DualEncoder, vocab: &Vocabulary, pairs: &[DialoguePair], pool: usize, seed: u64) -> Result<f64> {
    let (ctx, cand) = encode_pairs(vocab, &dual.candidate, pairs)?;
    let mut g = Graph::new();
    let c = dual.context.encode(&mut g, &dual.store, &ctx)?;
    let r = dual.candidate.encode(&mut g, &dual.store, &cand)?;
    let (c, r): (Tensor, Tensor) = (g.value(c).clone(), g.value(r).clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut hits = 0;
    for i in 0..pairs.len() {
        let others: Vec<usize> = (0..pairs.len())
            .filter(|&j| j != i && pairs[j].response != pairs[i].response)
            .collect();
        let take = (pool.saturating_sub(1)).min(others.len());
        let chosen: Vec<usize> = sample(&mut rng, others.len(), take).into_iter().map(|j| others[j]).collect();
        let score = |j: usize| c.row(i).iter().zip(r.row(j)).map(|(a, b)| a * b).sum::<f64>();
        let truth = score(i);
        if chosen.iter().all(|&j| score(j) < truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["hello", "there", "world", "again"]).unwrap()
    }

    #[test]
    fn identical_candidates_give_ln2() {
        let v = vocab();
        let dual = DualEncoder::new(&v, TextEncoderConfig::small(8), 1).unwrap();
        let mut g = Graph::with_precision(Precision::F64);
        let ctx = vec![vec![4, 5], vec![6, 7]];
        let cand = vec![vec![6, 4], vec![6, 4]];
        let loss = next_utterance_loss(&mut g, &dual, &ctx, &cand, &[vec![1], vec![0]]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_must_fit_batch() {
        let v = vocab();
        let pairs: Vec<_> = (0..10)
            .map(|_| DialoguePair {
                context: "hello there".into(),
                response: "world again".into(),
            })
            .collect();
        let cfg = PretrainConfig {
            batch_size: 4,
            negatives: 4,
            ..Default::default()
        };
        let err = pretrain_next_utterance(&pairs, &[], &v, TextEncoderConfig::small(8), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn candidate_weights_are_renamed() {
        let v = vocab();
        let dual = DualEncoder::new(&v, TextEncoderConfig::small(8), 1).unwrap();
        let w = dual.candidate_weights("text.").unwrap();
        assert!(w.id("text.word_emb").is_some());
        assert!(w.named_values().all(|(n, _)| n.starts_with("text.")));
        assert_eq!(w.num_weights() * 2, dual.store.num_weights());
    }
}
