use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Bow,
}

/// How the caption encoder is initialized before task training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pretraining {
    #[default]
    None,
    Word,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Maximum caption tokens, excluding BOS/EOS.
    pub max_len: usize,
    pub pretraining: Pretraining,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            kind: EncoderKind::Transformer,
            layers: 4,
            d_model: 300,
            heads: 6,
            ff_dim: 1200,
            max_len: 32,
            pretraining: Pretraining::None,
        }
    }
}

impl TextEncoderConfig {
    /// A small transformer for desk-scale experiments.
    pub fn small(d_model: usize) -> Self {
        TextEncoderConfig {
            layers: 1,
            d_model,
            heads: 2,
            ff_dim: 2 * d_model,
            max_len: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len {} must allow at least three tokens",
                self.max_len
            )));
        }
        if self.kind == EncoderKind::Transformer && (self.layers == 0 || self.ff_dim == 0) {
            return Err(Error::Config("transformer needs layers and ff_dim > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Caption encoder producing one vector per token sequence.
///
/// The transformer variant wraps each sequence in BOS/EOS, adds learned
/// positional embeddings, runs pre-norm self-attention blocks and mean-pools
/// the non-PAD outputs. The bag-of-words variant sums word embeddings.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab_size: usize,
    prefix: String,
    word_emb: ParamId,
    pos_emb: Option<ParamId>,
    blocks: Vec<Block>,
}

/// Attention probabilities of one head, `[batch, len, len]`.
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub probs: Var,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        config: TextEncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = |s: &str| format!("{prefix}{s}");
        let word_emb = store.init(p("word_emb"), &[vocab_size, d], Init::Normal(0.02), rng)?;
        let mut pos_emb = None;
        let mut blocks = Vec::new();
        if config.kind == EncoderKind::Transformer {
            pos_emb = Some(store.init(p("pos_emb"), &[config.max_len + 2, d], Init::Normal(0.02), rng)?);
            for l in 0..config.layers {
                let q = |s: &str| p(&format!("layer{l}.{s}"));
                let mut dense = |name: &str, i: usize, o: usize, rng: &mut _| -> Result<(ParamId, ParamId)> {
                    Ok((
                        store.init(q(&format!("{name}.w")), &[i, o], Init::FanIn, rng)?,
                        store.init(q(&format!("{name}.b")), &[o], Init::Zeros, rng)?,
                    ))
                };
                let (wq, bq) = dense("q", d, d, rng)?;
                let (wk, bk) = dense("k", d, d, rng)?;
                let (wv, bv) = dense("v", d, d, rng)?;
                let (wo, bo) = dense("o", d, d, rng)?;
                let (w1, b1) = dense("ff1", d, config.ff_dim, rng)?;
                let (w2, b2) = dense("ff2", config.ff_dim, d, rng)?;
                blocks.push(Block {
                    ln1_g: store.init(q("ln1.g"), &[d], Init::Ones, rng)?,
                    ln1_b: store.init(q("ln1.b"), &[d], Init::Zeros, rng)?,
                    ln2_g: store.init(q("ln2.g"), &[d], Init::Ones, rng)?,
                    ln2_b: store.init(q("ln2.b"), &[d], Init::Zeros, rng)?,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    w1,
                    b1,
                    w2,
                    b2,
                });
            }
        }
        Ok(TextEncoder {
            config,
            vocab_size,
            prefix: prefix.to_string(),
            word_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Initializes this encoder's weights in `store` per its pretraining
    /// mode: word vectors for `Word`; for `Full`, every tensor of a pretrained
    /// encoder whose names already carry this encoder's prefix.
    pub fn apply_pretraining(
        &self,
        store: &mut ParamStore,
        vocab: &Vocabulary,
        word_vectors: Option<&super::WordVectors>,
        pretrained: Option<&ParamStore>,
    ) -> Result<()> {
        match self.config.pretraining {
            Pretraining::None => Ok(()),
            Pretraining::Word => {
                let wv = word_vectors.ok_or_else(|| Error::Config("pretraining=word needs a word-vector file".into()))?;
                let mut table = store.value(self.word_emb).clone();
                let n = wv.apply(vocab, &mut table)?;
                log::info!("initialized {n} word embeddings from vectors");
                store.set(self.word_emb, table)
            }
            Pretraining::Full => {
                let enc = pretrained.ok_or_else(|| Error::Config("pretraining=full needs a pretrained text encoder".into()))?;
                let n = store.copy_matching(enc, &self.prefix, &self.prefix)?;
                let expected = store.named_values().filter(|(name, _)| name.starts_with(&self.prefix)).count();
                if n != expected {
                    return Err(Error::Config(format!("pretrained encoder supplied {n} of {expected} text tensors")));
                }
                Ok(())
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_model
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word_emb
    }

    /// Maps tokens to ids, truncating to `max_len` with a warning.
    pub fn prepare<S: AsRef<str>>(&self, vocab: &Vocabulary, tokens: &[S]) -> Result<Vec<usize>> {
        if vocab.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the encoder was built for {}",
                vocab.len(),
                self.vocab_size
            )));
        }
        let mut ids = vocab.encode(tokens);
        if ids.len() > self.config.max_len {
            log::warn!(
                "truncating caption of {} tokens to {}",
                ids.len(),
                self.config.max_len
            );
            ids.truncate(self.config.max_len);
        }
        Ok(ids)
    }

    /// Encodes a batch of id sequences to `[batch, d_model]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        Ok(self.encode_traced(g, store, batch, false)?.0)
    }

    pub fn encode_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[Vec<usize>],
        trace: bool,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        if batch.is_empty() {
            return Err(Error::Contract("cannot encode an empty batch".into()));
        }
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::Contract("cannot encode an empty token sequence".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::Index {
                    what: "token id",
                    index: bad,
                    bound: self.vocab_size,
                });
            }
        }
        match self.config.kind {
            EncoderKind::Bow => Ok((self.encode_bow(g, store, batch)?, Vec::new())),
            EncoderKind::Transformer => self.encode_transformer(g, store, batch, trace),
        }
    }

    fn encode_bow(&self, g: &mut Graph, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        // Each sequence is summed in sorted id order so that the result is
        // bitwise independent of token order.
        let mut ids = Vec::new();
        let mut pool = vec![0.0; 0];
        let total: usize = batch.iter().map(Vec::len).sum();
        let mut offset = 0;
        for seq in batch {
            let mut sorted = seq.clone();
            sorted.sort_unstable();
            let mut row = vec![0.0; total];
            row[offset..offset + sorted.len()].iter_mut().for_each(|v| *v = 1.0);
            offset += sorted.len();
            ids.extend(sorted);
            pool.extend(row);
        }
        let table = g.param(store, self.word_emb);
        let rows = g.embedding(table, &ids)?;
        let pool = g.constant(Tensor::new(&[batch.len(), total], pool)?);
        g.matmul(pool, rows)
    }

    fn encode_transformer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[Vec<usize>],
        trace: bool,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        let c = &self.config;
        let (d, heads) = (c.d_model, c.heads);
        let hd = d / heads;
        let wrapped: Vec<Vec<usize>> = batch
            .iter()
            .map(|s| {
                let mut w = Vec::with_capacity(s.len().min(c.max_len) + 2);
                w.push(BOS);
                w.extend(s.iter().take(c.max_len));
                w.push(EOS);
                w
            })
            .collect();
        let bs = wrapped.len();
        let len = wrapped.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(bs * len);
        let mut positions = Vec::with_capacity(bs * len);
        let mut mask = vec![0.0; bs * len * len];
        let mut pool = vec![0.0; bs * len];
        for (b, seq) in wrapped.iter().enumerate() {
            for p in 0..len {
                ids.push(seq.get(p).copied().unwrap_or(PAD));
                positions.push(p);
                if p >= seq.len() {
                    for q in 0..len {
                        mask[(b * len + q) * len + p] = MASKED;
                    }
                } else {
                    pool[b * len + p] = 1.0 / seq.len() as f64;
                }
            }
        }
        let word = g.param(store, self.word_emb);
        let pos = g.param(store, self.pos_emb.expect("transformer has positions"));
        let we = g.embedding(word, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(we, pe)?;
        let mask = g.constant(Tensor::new(&[bs, len, len], mask)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut traces = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let prm = |g: &mut Graph, id| g.param(store, id);
            let (g1, b1) = (prm(g, blk.ln1_g), prm(g, blk.ln1_b));
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let (wq, bq, wk, bk, wv, bv) = (
                prm(g, blk.wq),
                prm(g, blk.bq),
                prm(g, blk.wk),
                prm(g, blk.bk),
                prm(g, blk.wv),
                prm(g, blk.bv),
            );
            let q = g.linear(h, wq, bq)?;
            let k = g.linear(h, wk, bk)?;
            let v = g.linear(h, wv, bv)?;
            let mut head_out = Vec::with_capacity(heads);
            for hh in 0..heads {
                let split = |g: &mut Graph, t: Var| -> Result<Var> {
                    let s = g.slice(t, 1, hh * hd, hd)?;
                    g.reshape(s, &[bs, len, hd])
                };
                let qh = split(g, q)?;
                let kh = split(g, k)?;
                let vh = split(g, v)?;
                let kt = g.transpose(kh)?;
                let scores = g.bmm(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask)?;
                let probs = g.softmax(scores, 2)?;
                if trace {
                    traces.push(AttentionTrace {
                        layer: l,
                        head: hh,
                        probs,
                    });
                }
                let o = g.bmm(probs, vh)?;
                head_out.push(g.reshape(o, &[bs * len, hd])?);
            }
            let cat = if heads == 1 {
                head_out[0]
            } else {
                g.concat(&head_out, 1)?
            };
            let (wo, bo) = (prm(g, blk.wo), prm(g, blk.bo));
            let att = g.linear(cat, wo, bo)?;
            x = g.add(x, att)?;

            let (g2, b2) = (prm(g, blk.ln2_g), prm(g, blk.ln2_b));
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1, w2, bb2) = (prm(g, blk.w1), prm(g, blk.b1), prm(g, blk.w2), prm(g, blk.b2));
            let f = g.linear(h, w1, bb1)?;
            let f = g.relu(f);
            let f = g.linear(f, w2, bb2)?;
            x = g.add(x, f)?;
        }
        let x3 = g.reshape(x, &[bs, len, d])?;
        let pool = g.constant(Tensor::new(&[bs, 1, len], pool)?);
        let pooled = g.bmm(pool, x3)?;
        Ok((g.reshape(pooled, &[bs, d])?, traces))
    }
}
