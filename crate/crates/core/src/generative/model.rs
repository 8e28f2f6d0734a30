use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::text::{BOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    ShowTell,
    ShowAttTell,
    UpDown,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::ShowTell, DecoderKind::ShowAttTell, DecoderKind::UpDown];

    /// Whether the model consumes a spatial grid (and attends over it).
    pub fn attends(self) -> bool {
        !matches!(self, DecoderKind::ShowTell)
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::ShowTell => "showtell",
            DecoderKind::ShowAttTell => "showatttell",
            DecoderKind::UpDown => "updown",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown decoder kind {s:?} (showtell, showatttell, updown)")))
    }
}

/// How far a decoder has been trained; SCST only starts from `Xe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Init,
    Xe,
    Scst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub feature_dim: usize,
    /// Width of word, trait and reduced image vectors.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub att_dim: usize,
    pub vocab_size: usize,
    pub num_traits: usize,
    pub personality: bool,
    /// Maximum decoded tokens, EOS included.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::UpDown,
            feature_dim: 2048,
            embed_dim: 512,
            hidden_dim: 512,
            att_dim: 512,
            vocab_size: 0,
            num_traits: 215,
            personality: true,
            max_len: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.feature_dim, self.embed_dim, self.hidden_dim, self.att_dim, self.num_traits]
            .contains(&0)
        {
            return Err(Error::Config("decoder dimensions and num_traits must be positive".into()));
        }
        if self.vocab_size <= crate::text::RESERVED.len() {
            return Err(Error::Config(format!("vocab_size {} has no ordinary tokens", self.vocab_size)));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} must allow at least 3 tokens", self.max_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
    /// Attention context added to the cell-candidate pre-activation.
    w_ctx: Option<ParamId>,
}

impl Lstm {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, ctx: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w_ih = store.init(format!("{name}.w_ih"), &[input, 4 * hidden], Init::FanIn, rng)?;
        let w_hh = store.init(format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::FanIn, rng)?;
        // gates [i, f, g, o]; forget bias starts at 1
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), bias)?;
        let w_ctx = match ctx {
            Some(e) => Some(store.init(format!("{name}.w_ctx"), &[e, hidden], Init::FanIn, rng)?),
            None => None,
        };
        Ok(Lstm { w_ih, w_hh, b, w_ctx })
    }

    fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var, ctx: Option<Var>) -> Result<(Var, Var)> {
        let hidden = g.shape(h)[1];
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.b);
        let xi = g.linear(x, w_ih, b)?;
        let hh = g.matmul(h, w_hh)?;
        let z = g.add(xi, hh)?;
        let i = g.slice(z, 1, 0, hidden)?;
        let f = g.slice(z, 1, hidden, hidden)?;
        let mut cand = g.slice(z, 1, 2 * hidden, hidden)?;
        let o = g.slice(z, 1, 3 * hidden, hidden)?;
        if let (Some(w), Some(ctx)) = (self.w_ctx, ctx) {
            let w = g.param(store, w);
            let cc = g.matmul(ctx, w)?;
            cand = g.add(cand, cc)?;
        }
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Debug, Clone)]
struct Attention {
    w_q: ParamId,
    w_p: ParamId,
    v: ParamId,
}

/// Reduced image features for a batch, in graph form.
#[derive(Debug, Clone, Copy)]
pub struct ImageMemory {
    pub batch: usize,
    pub positions: usize,
    /// `[B, E]`: the reduced vector (ShowTell) or the mean over positions (UpDown).
    pub pooled: Option<Var>,
    /// `[B·P, E]` reduced grid cells, image-major.
    pub grid: Option<Var>,
    /// `[B·P, A]` grid cells projected for attention.
    pub keys: Option<Var>,
}

/// Per-layer recurrent state for a batch.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

/// Personality-conditioned LSTM caption decoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    pub stage: Stage,
    word_emb: ParamId,
    traits: ParamId,
    reduce: (ParamId, ParamId),
    out: (ParamId, ParamId),
    lstms: Vec<Lstm>,
    att: Option<Attention>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (e, h, a) = (config.embed_dim, config.hidden_dim, config.att_dim);
        let t = if config.personality { e } else { 0 };
        let word_emb = p.init("word_emb", &[config.vocab_size, e], Init::Normal(0.1), &mut rng)?;
        let traits = p.init("personality.table", &[config.num_traits, e], Init::Normal(0.1), &mut rng)?;
        let reduce = (
            p.init("image.reduce.w", &[config.feature_dim, e], Init::FanIn, &mut rng)?,
            p.init("image.reduce.b", &[e], Init::Zeros, &mut rng)?,
        );
        let lstms = match config.kind {
            DecoderKind::ShowTell => vec![Lstm::new(&mut p, "lstm", e + t, h, None, &mut rng)?],
            DecoderKind::ShowAttTell => vec![Lstm::new(&mut p, "lstm", e + t, h, Some(e), &mut rng)?],
            DecoderKind::UpDown => vec![
                // attention LSTM: [h2 ∥ mean image ∥ word ∥ trait]
                Lstm::new(&mut p, "lstm1", h + e + e + t, h, None, &mut rng)?,
                // language LSTM: [context ∥ h1 ∥ trait]
                Lstm::new(&mut p, "lstm2", e + h + t, h, None, &mut rng)?,
            ],
        };
        let att = if config.kind.attends() {
            Some(Attention {
                w_q: p.init("att.w_q", &[h, a], Init::FanIn, &mut rng)?,
                w_p: p.init("att.w_p", &[e, a], Init::FanIn, &mut rng)?,
                v: p.init("att.v", &[a, 1], Init::FanIn, &mut rng)?,
            })
        } else {
            None
        };
        let out = (
            p.init("out.w", &[h, config.vocab_size], Init::FanIn, &mut rng)?,
            p.init("out.b", &[config.vocab_size], Init::Zeros, &mut rng)?,
        );
        Ok(Decoder {
            config,
            params: p,
            stage: Stage::Init,
            word_emb,
            traits,
            reduce,
            out,
            lstms,
            att,
        })
    }

    pub fn trait_table(&self) -> ParamId {
        self.traits
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word_emb
    }

    /// Checks that `features` is `[B, F]` for ShowTell or `[B, P, F]` otherwise.
    fn check_features(&self, features: &Tensor) -> Result<()> {
        let want = if self.config.kind.attends() { 3 } else { 2 };
        let s = features.shape();
        if s.len() != want || s[want - 1] != self.config.feature_dim {
            return Err(Error::Config(format!(
                "{} expects {} features of width {}, got shape {s:?}",
                self.config.kind,
                if want == 2 { "vector" } else { "grid" },
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    /// Shared linear map to `embed_dim`, applied per position for grids:
    /// `[B, F]` → `[B, E]`, `[B, P, F]` → `[B, P, E]`.
    pub fn reduce_image(&self, g: &mut Graph, features: Tensor) -> Result<Var> {
        self.check_features(&features)?;
        let s = features.shape().to_vec();
        let w = g.param(&self.params, self.reduce.0);
        let b = g.param(&self.params, self.reduce.1);
        if s.len() == 2 {
            let x = g.constant(features);
            return g.linear(x, w, b);
        }
        let x = g.constant(features.reshape(&[s[0] * s[1], s[2]])?);
        let r = g.linear(x, w, b)?;
        g.reshape(r, &[s[0], s[1], self.config.embed_dim])
    }

    pub fn encode_images(&self, g: &mut Graph, features: Tensor) -> Result<ImageMemory> {
        let batch = features.shape().first().copied().unwrap_or(0);
        let r = self.reduce_image(g, features)?;
        if !self.config.kind.attends() {
            return Ok(ImageMemory {
                batch,
                positions: 1,
                pooled: Some(r),
                grid: None,
                keys: None,
            });
        }
        let p = g.shape(r)[1];
        let e = self.config.embed_dim;
        let pooled = if self.config.kind == DecoderKind::UpDown {
            let s = g.sum_axis(r, 1)?;
            Some(g.scale(s, 1.0 / p as f64))
        } else {
            None
        };
        let grid = g.reshape(r, &[batch * p, e])?;
        self.memory_from_grid(g, batch, p, grid, pooled)
    }

    fn memory_from_grid(&self, g: &mut Graph, batch: usize, p: usize, grid: Var, pooled: Option<Var>) -> Result<ImageMemory> {
        let att = self.att.as_ref().expect("attention model");
        let w_p = g.param(&self.params, att.w_p);
        let keys = g.matmul(grid, w_p)?;
        Ok(ImageMemory {
            batch,
            positions: p,
            pooled,
            grid: Some(grid),
            keys: Some(keys),
        })
    }

    /// Additive attention: `softmax_j(vᵀ tanh(W_q q + W_p p_j))`; returns the
    /// weighted context `[B, E]` and the weights `[B, P]`.
    pub fn attend(&self, g: &mut Graph, mem: &ImageMemory, query: Var) -> Result<(Var, Var)> {
        let att = self
            .att
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no attention", self.config.kind)))?;
        let (grid, keys) = (mem.grid.expect("grid memory"), mem.keys.expect("grid memory"));
        let (b, p, e) = (mem.batch, mem.positions, self.config.embed_dim);
        let w_q = g.param(&self.params, att.w_q);
        let v = g.param(&self.params, att.v);
        let q = g.matmul(query, w_q)?;
        let q = g.repeat_rows(q, p)?;
        let s = g.add(q, keys)?;
        let s = g.tanh(s);
        let s = g.matmul(s, v)?;
        let s = g.reshape(s, &[b, p])?;
        let w = g.softmax(s, 1)?;
        let w3 = g.reshape(w, &[b, 1, p])?;
        let cells = g.reshape(grid, &[b, p, e])?;
        let ctx = g.bmm(w3, cells)?;
        let ctx = g.reshape(ctx, &[b, e])?;
        Ok((ctx, w))
    }

    fn trait_input(&self, g: &mut Graph, trait_ids: &[usize]) -> Result<Option<Var>> {
        if !self.config.personality {
            return Ok(None);
        }
        if let Some(&bad) = trait_ids.iter().find(|&&t| t >= self.config.num_traits) {
            return Err(Error::Index {
                what: "trait id",
                index: bad,
                bound: self.config.num_traits,
            });
        }
        let table = g.param(&self.params, self.traits);
        Ok(Some(g.embedding(table, trait_ids)?))
    }

    fn join(g: &mut Graph, parts: &[Option<Var>]) -> Result<Var> {
        let xs: Vec<Var> = parts.iter().flatten().copied().collect();
        if xs.len() == 1 {
            Ok(xs[0])
        } else {
            g.concat(&xs, 1)
        }
    }

    /// Zero state; ShowTell then consumes the reduced image as its first input.
    pub fn initial_state(&self, g: &mut Graph, mem: &ImageMemory, trait_ids: &[usize]) -> Result<LstmState> {
        let n = self.lstms.len();
        let h = self.config.hidden_dim;
        let zeros = g.constant(Tensor::zeros(&[mem.batch, h]));
        let mut st = LstmState {
            h: vec![zeros; n],
            c: vec![zeros; n],
        };
        if self.config.kind == DecoderKind::ShowTell {
            let t = self.trait_input(g, trait_ids)?;
            let x = Self::join(g, &[mem.pooled, t])?;
            let (h1, c1) = self.lstms[0].cell(g, &self.params, x, st.h[0], st.c[0], None)?;
            st = LstmState { h: vec![h1], c: vec![c1] };
        }
        Ok(st)
    }

    /// One decoding step from the previous tokens; returns logits `[B, V]`.
    pub fn step(&self, g: &mut Graph, mem: &ImageMemory, state: &LstmState, prev: &[usize], trait_ids: &[usize]) -> Result<(Var, LstmState)> {
        let table = g.param(&self.params, self.word_emb);
        let word = g.embedding(table, prev)?;
        let t = self.trait_input(g, trait_ids)?;
        let next = match self.config.kind {
            DecoderKind::ShowTell | DecoderKind::ShowAttTell => {
                let x = Self::join(g, &[Some(word), t])?;
                let ctx = if self.config.kind == DecoderKind::ShowAttTell {
                    Some(self.attend(g, mem, state.h[0])?.0)
                } else {
                    None
                };
                let (h, c) = self.lstms[0].cell(g, &self.params, x, state.h[0], state.c[0], ctx)?;
                LstmState { h: vec![h], c: vec![c] }
            }
            DecoderKind::UpDown => {
                let x1 = Self::join(g, &[Some(state.h[1]), mem.pooled, Some(word), t])?;
                let (h1, c1) = self.lstms[0].cell(g, &self.params, x1, state.h[0], state.c[0], None)?;
                let (ctx, _) = self.attend(g, mem, h1)?;
                let x2 = Self::join(g, &[Some(ctx), Some(h1), t])?;
                let (h2, c2) = self.lstms[1].cell(g, &self.params, x2, state.h[1], state.c[1], None)?;
                LstmState {
                    h: vec![h1, h2],
                    c: vec![c1, c2],
                }
            }
        };
        let top = *next.h.last().expect("one layer");
        let w = g.param(&self.params, self.out.0);
        let b = g.param(&self.params, self.out.1);
        let logits = g.linear(top, w, b)?;
        Ok((logits, next))
    }

    /// Teacher-forced log-probability of each target sequence, `[B]`.
    /// Targets end in EOS (unless truncated); PAD entries are masked out.
    pub fn sequence_logprobs(&self, g: &mut Graph, features: Tensor, trait_ids: &[usize], targets: &[Vec<usize>]) -> Result<Var> {
        let b = targets.len();
        if features.shape().first() != Some(&b) || trait_ids.len() != b {
            return Err(Error::Contract(format!(
                "{} targets, {} trait ids, features {:?}",
                b,
                trait_ids.len(),
                features.shape()
            )));
        }
        let mem = self.encode_images(g, features)?;
        let mut state = self.initial_state(g, &mem, trait_ids)?;
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut total = g.constant(Tensor::zeros(&[b]));
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|s| if t == 0 { BOS } else { s.get(t - 1).copied().unwrap_or(PAD) })
                .collect();
            let gold: Vec<usize> = targets.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let (logits, next) = self.step(g, &mem, &state, &prev, trait_ids)?;
            state = next;
            let lp = g.log_softmax(logits, 1)?;
            let picked = g.pick(lp, &gold)?;
            let mask = g.constant(Tensor::vector(gold.iter().map(|&w| if w == PAD { 0.0 } else { 1.0 }).collect()));
            let masked = g.mul(picked, mask)?;
            total = g.add(total, masked)?;
        }
        Ok(total)
    }

    /// Mean per-token negative log-likelihood over the non-PAD targets.
    pub fn xe_loss(&self, g: &mut Graph, features: Tensor, trait_ids: &[usize], targets: &[Vec<usize>]) -> Result<Var> {
        let tokens = targets.iter().flatten().filter(|&&w| w != PAD).count();
        if tokens == 0 {
            return Err(Error::Contract("xe_loss over empty targets".into()));
        }
        let lp = self.sequence_logprobs(g, features, trait_ids, targets)?;
        let s = g.sum(lp);
        Ok(g.scale(s, -1.0 / tokens as f64))
    }

    /// Self-critical surrogate `-mean_i A_i · log p(sample_i)`.
    pub fn scst_loss(&self, g: &mut Graph, features: Tensor, trait_ids: &[usize], samples: &[Vec<usize>], advantages: &[f64]) -> Result<Var> {
        if advantages.len() != samples.len() {
            return Err(Error::Contract("one advantage per sample".into()));
        }
        let lp = self.sequence_logprobs(g, features, trait_ids, samples)?;
        let a = g.constant(Tensor::vector(advantages.to_vec()));
        let weighted = g.mul(lp, a)?;
        let m = g.mean(weighted);
        Ok(g.scale(m, -1.0))
    }
}

/// Features of `ids` as `[B, F]` (vector stores) or `[B, P, F]` (grids),
/// matching what `kind` consumes.
pub fn image_tensor(store: &FeatureStore, ids: &[&str], kind: DecoderKind) -> Result<Tensor> {
    if kind.attends() != store.is_grid() {
        return Err(Error::Config(format!(
            "{kind} needs {} features but the feature store holds shape {:?}",
            if kind.attends() { "grid" } else { "vector" },
            store.shape()
        )));
    }
    let (p, d) = (store.positions(), store.dim());
    let mut data = Vec::with_capacity(ids.len() * p * d);
    for id in ids {
        let raw = store
            .raw(id)
            .ok_or_else(|| Error::Evaluation(format!("no features for image {id:?}")))?;
        data.extend(raw.iter().map(|&v| v as f64));
    }
    if kind.attends() {
        Tensor::new(&[ids.len(), p, d], data)
    } else {
        Tensor::new(&[ids.len(), d], data)
    }
}
