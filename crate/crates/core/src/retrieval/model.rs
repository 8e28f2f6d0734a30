use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::text::{TextEncoder, TextEncoderConfig, WordVectors, Vocabulary};

pub const TEXT_PREFIX: &str = "text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub feature_dim: usize,
    pub joint_dim: usize,
    /// Hidden ReLU layers of the image MLP (each joint_dim wide).
    pub image_layers: usize,
    pub num_traits: usize,
    pub personality: bool,
    pub encoder: TextEncoderConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            feature_dim: 2048,
            joint_dim: 500,
            image_layers: 2,
            num_traits: 215,
            personality: true,
            encoder: TextEncoderConfig::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.joint_dim == 0 || self.num_traits == 0 {
            return Err(Error::Config("feature_dim, joint_dim and num_traits must be positive".into()));
        }
        self.encoder.validate()
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Dense {
            w: store.init(format!("{name}.w"), &[i, o], Init::FanIn, rng)?,
            b: store.init(format!("{name}.b"), &[o], Init::Zeros, rng)?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Image MLP, trait table, text encoder and caption projection scoring
/// `(r_I + r_P) · r_C`.
#[derive(Debug, Clone)]
pub struct TransResNet {
    pub config: RetrievalConfig,
    pub params: ParamStore,
    pub encoder: TextEncoder,
    image: Vec<Dense>,
    traits: ParamId,
    proj: [Dense; 2],
}

impl TransResNet {
    pub fn new(config: RetrievalConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let j = config.joint_dim;
        let mut image = Vec::new();
        let mut width = config.feature_dim;
        for l in 0..=config.image_layers {
            image.push(Dense::new(&mut params, &format!("image.l{l}"), width, j, &mut rng)?);
            width = j;
        }
        let traits = params.init("personality.table", &[config.num_traits, j], Init::Normal(0.02), &mut rng)?;
        let encoder = TextEncoder::new(&mut params, TEXT_PREFIX, vocab_size, config.encoder.clone(), &mut rng)?;
        let e = encoder.output_dim();
        let proj = [
            Dense::new(&mut params, "caption.l0", e, j, &mut rng)?,
            Dense::new(&mut params, "caption.l1", j, j, &mut rng)?,
        ];
        Ok(TransResNet {
            config,
            params,
            encoder,
            image,
            traits,
            proj,
        })
    }

    pub fn trait_table(&self) -> ParamId {
        self.traits
    }

    /// `[B, feature_dim]` → `[B, joint]`; ReLU on every layer but the last.
    pub fn encode_images(&self, g: &mut Graph, features: Tensor) -> Result<Var> {
        if features.rank() != 2 || features.cols() != self.config.feature_dim {
            return Err(Error::Config(format!(
                "image features {:?} do not match feature_dim {}",
                features.shape(),
                self.config.feature_dim
            )));
        }
        let mut x = g.constant(features);
        let last = self.image.len() - 1;
        for (l, layer) in self.image.iter().enumerate() {
            x = layer.apply(g, &self.params, x)?;
            if l < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Trait rows, or zeros when personality conditioning is off.
    pub fn encode_personality(&self, g: &mut Graph, trait_ids: &[usize]) -> Result<Var> {
        if !self.config.personality {
            return Ok(g.constant(Tensor::zeros(&[trait_ids.len(), self.config.joint_dim])));
        }
        let table = g.param(&self.params, self.traits);
        g.embedding(table, trait_ids)
    }

    pub fn encode_captions(&self, g: &mut Graph, captions: &[Vec<usize>]) -> Result<Var> {
        let h = self.encoder.encode(g, &self.params, captions)?;
        let h = self.proj[0].apply(g, &self.params, h)?;
        let h = g.relu(h);
        self.proj[1].apply(g, &self.params, h)
    }

    /// `S[i][j] = (r_I[i] + r_P[i]) · r_C[j]`.
    pub fn score_matrix(&self, g: &mut Graph, features: Tensor, trait_ids: &[usize], captions: &[Vec<usize>]) -> Result<Var> {
        let ri = self.encode_images(g, features)?;
        let rp = self.encode_personality(g, trait_ids)?;
        let q = g.add(ri, rp)?;
        let rc = self.encode_captions(g, captions)?;
        let rct = g.transpose(rc)?;
        g.matmul(q, rct)
    }

    /// Mean over the batch of `-log softmax(S[i])[i]`: each example's
    /// negatives are the other captions of the batch.
    pub fn batch_loss(&self, g: &mut Graph, features: Tensor, trait_ids: &[usize], captions: &[Vec<usize>]) -> Result<Var> {
        let s = self.score_matrix(g, features, trait_ids, captions)?;
        in_batch_nll(g, s)
    }

    /// Query vectors `r_I + r_P` for a set of (features, trait) pairs.
    pub fn embed_queries(&self, features: Tensor, trait_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let ri = self.encode_images(&mut g, features)?;
        let rp = self.encode_personality(&mut g, trait_ids)?;
        let q = g.add(ri, rp)?;
        Ok(g.value(q).clone())
    }

    /// Caption vectors, encoded in independent chunks in parallel.
    pub fn embed_captions(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let parts: Vec<Tensor> = captions
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let v = self.encode_captions(&mut g, chunk)?;
                Ok(g.value(v).clone())
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(captions.len() * self.config.joint_dim);
        for p in parts {
            data.extend(p.into_data());
        }
        Tensor::new(&[captions.len(), self.config.joint_dim], data)
    }

    /// Initializes the text encoder per the pretraining mode: word vectors
    /// for `Word`, a pretrained candidate encoder (already renamed under
    /// the `text.` prefix) for `Full`.
    pub fn apply_pretraining(&mut self, vocab: &Vocabulary, word_vectors: Option<&WordVectors>, encoder: Option<&ParamStore>) -> Result<()> {
        self.encoder.apply_pretraining(&mut self.params, vocab, word_vectors, encoder)
    }
}

/// `-mean_i log softmax(S[i])[i]` for a square score matrix.
pub fn in_batch_nll(g: &mut Graph, scores: Var) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("in_batch_nll", &shape, &shape));
    }
    let lp = g.log_softmax(scores, 1)?;
    let diag: Vec<usize> = (0..shape[0]).collect();
    let d = g.pick(lp, &diag)?;
    let m = g.mean(d);
    Ok(g.scale(m, -1.0))
}

/// `(r_I + r_P) · r_C`.
pub fn score(ri: &[f64], rp: &[f64], rc: &[f64]) -> Result<f64> {
    if ri.len() != rp.len() || ri.len() != rc.len() {
        return Err(Error::Contract(format!(
            "score vectors differ in length: {}, {}, {}",
            ri.len(),
            rp.len(),
            rc.len()
        )));
    }
    Ok(ri.iter().zip(rp).zip(rc).map(|((a, b), c)| (a + b) * c).sum())
}

/// Features of `ids` stacked into `[n, dim]`; grid features are averaged
/// over their spatial cells.
pub fn stack_features(store: &FeatureStore, ids: &[&str]) -> Result<Tensor> {
    let (cells, d) = (store.positions(), store.dim());
    let mut data = Vec::with_capacity(ids.len() * d);
    for id in ids {
        let raw = store
            .raw(id)
            .ok_or_else(|| Error::Evaluation(format!("no features for image {id:?}")))?;
        for j in 0..d {
            data.push((0..cells).map(|c| raw[c * d + j] as f64).sum::<f64>() / cells as f64);
        }
    }
    Tensor::new(&[ids.len(), d], data)
}
