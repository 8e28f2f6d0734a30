//! Greedy, sampled and beam-search decoding over any [`StepModel`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{image_tensor, Decoder, ImageMemory, LstmState};
use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use crate::text::{BOS, EOS, PAD};

/// A left-to-right token model: log-probabilities of the next token for a
/// batch of independent rows.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial(&self) -> Result<Self::State>;
    fn step(&self, states: &[Self::State], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

/// Tokens a decoder may emit: everything but PAD and BOS.
fn emittable(id: usize) -> bool {
    id != PAD && id != BOS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Emitted tokens without the closing EOS.
    pub tokens: Vec<usize>,
    /// Total log-probability, EOS included when finished.
    pub log_prob: f64,
    pub finished: bool,
}

impl Decoded {
    /// Target sequence for teacher forcing: tokens plus EOS when finished.
    pub fn target(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.finished {
            t.push(EOS);
        }
        t
    }

    /// Finished hypotheses first, then higher log-probability.
    fn better_than(&self, other: &Decoded) -> bool {
        (self.finished, self.log_prob) > (other.finished, other.log_prob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum tokens, EOS included.
    pub max_len: usize,
    /// Return the best result over beam widths 1..=beam, so widening the
    /// beam never lowers the returned score.
    pub monotone: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 2,
            max_len: 16,
            monotone: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} must allow at least 3 tokens", self.max_len)));
        }
        Ok(())
    }
}

pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Decoded> {
    let mut state = model.initial()?;
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut prev = BOS;
    for _ in 0..max_len {
        let (lp, mut next) = model.step(std::slice::from_ref(&state), &[prev])?;
        let lp = &lp[0];
        let mut best = EOS;
        for w in 0..lp.len() {
            if emittable(w) && lp[w] > lp[best] {
                best = w;
            }
        }
        out.log_prob += lp[best];
        if best == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(best);
        state = next.swap_remove(0);
        prev = best;
    }
    Ok(out)
}

fn draw<R: Rng>(lp: &[f64], rng: &mut R) -> usize {
    let weights: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(w, &l)| if emittable(w) { l.exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut pick = EOS;
    for (w, &p) in weights.iter().enumerate() {
        if p > 0.0 {
            pick = w;
            if u < p {
                break;
            }
            u -= p;
        }
    }
    pick
}

/// Draws each token from the model distribution restricted to emittable
/// tokens. The reported log-probability is the model's own.
pub fn sample<M: StepModel, R: Rng>(model: &M, max_len: usize, rng: &mut R) -> Result<Decoded> {
    Ok(sample_many(model, 1, max_len, rng)?.swap_remove(0))
}

/// `n` independent samples decoded side by side. Row `i` consumes the
/// random stream before row `i + 1` at every step.
pub fn sample_many<M: StepModel, R: Rng>(model: &M, n: usize, max_len: usize, rng: &mut R) -> Result<Vec<Decoded>> {
    let init = model.initial()?;
    let mut out: Vec<Decoded> = (0..n)
        .map(|_| Decoded {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let mut live: Vec<usize> = (0..n).collect();
    let mut states = vec![init; n];
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prev: Vec<usize> = live.iter().map(|&i| out[i].tokens.last().copied().unwrap_or(BOS)).collect();
        let (lps, next) = model.step(&states, &prev)?;
        let mut keep_live = Vec::with_capacity(live.len());
        let mut keep_states = Vec::with_capacity(live.len());
        for ((&i, lp), st) in live.iter().zip(&lps).zip(next) {
            let pick = draw(lp, rng);
            out[i].log_prob += lp[pick];
            if pick == EOS {
                out[i].finished = true;
            } else {
                out[i].tokens.push(pick);
                keep_live.push(i);
                keep_states.push(st);
            }
        }
        live = keep_live;
        states = keep_states;
    }
    Ok(out)
}

struct Hyp<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    /// None once the hypothesis has emitted EOS.
    state: Option<S>,
}

/// Length-synchronous beam search of one width. Finished beams keep their
/// slot and compete with the extensions of the live ones.
fn beam_once<M: StepModel>(model: &M, width: usize, max_len: usize) -> Result<Decoded> {
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: Some(model.initial()?),
    }];
    for _ in 0..max_len {
        let live: Vec<usize> = (0..beams.len()).filter(|&i| beams[i].state.is_some()).collect();
        if live.is_empty() {
            break;
        }
        let states: Vec<M::State> = live.iter().map(|&i| beams[i].state.clone().expect("live")).collect();
        let prev: Vec<usize> = live.iter().map(|&i| beams[i].tokens.last().copied().unwrap_or(BOS)).collect();
        let (lps, next) = model.step(&states, &prev)?;
        // (score, beam, token); token None carries a finished beam over
        let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
        for (i, b) in beams.iter().enumerate() {
            if b.state.is_none() {
                cands.push((b.log_prob, i, None));
            }
        }
        for (k, &i) in live.iter().enumerate() {
            for (w, &l) in lps[k].iter().enumerate() {
                if emittable(w) {
                    cands.push((beams[i].log_prob + l, i, Some(w)));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.map_or(0, |w| w + 1).cmp(&b.2.map_or(0, |w| w + 1)))
        });
        let mut grown = Vec::with_capacity(width);
        for &(score, i, w) in cands.iter().take(width) {
            let src = &beams[i];
            let hyp = match w {
                None => Hyp {
                    tokens: src.tokens.clone(),
                    log_prob: src.log_prob,
                    state: None,
                },
                Some(EOS) => Hyp {
                    tokens: src.tokens.clone(),
                    log_prob: score,
                    state: None,
                },
                Some(w) => {
                    let k = live.iter().position(|&j| j == i).expect("live beam");
                    let mut tokens = src.tokens.clone();
                    tokens.push(w);
                    Hyp {
                        tokens,
                        log_prob: score,
                        state: Some(next[k].clone()),
                    }
                }
            };
            grown.push(hyp);
        }
        beams = grown;
    }
    let mut best: Option<Decoded> = None;
    for b in beams {
        let d = Decoded {
            tokens: b.tokens,
            log_prob: b.log_prob,
            finished: b.state.is_none(),
        };
        if best.as_ref().is_none_or(|cur| d.better_than(cur)) {
            best = Some(d);
        }
    }
    Ok(best.expect("at least one beam"))
}

pub fn beam_search<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    config.validate()?;
    if !config.monotone {
        return beam_once(model, config.beam, config.max_len);
    }
    let mut best = beam_once(model, 1, config.max_len)?;
    for width in 2..=config.beam {
        let d = beam_once(model, width, config.max_len)?;
        if d.better_than(&best) {
            best = d;
        }
    }
    Ok(best)
}

/// Recurrent state of one decoding row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

/// A [`Decoder`] bound to one image and trait, decoding row by row.
pub struct DecoderSession<'a> {
    decoder: &'a Decoder,
    trait_id: usize,
    positions: usize,
    pooled: Option<Tensor>,
    grid: Option<Tensor>,
    keys: Option<Tensor>,
}

fn tile(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    let mut shape = t.shape().to_vec();
    shape[0] *= times;
    Tensor::new(&shape, data).expect("tile shape")
}

fn stack(rows: &[&[f64]]) -> Tensor {
    let width = rows.first().map_or(0, |r| r.len());
    Tensor::new(&[rows.len(), width], rows.iter().flat_map(|r| r.iter().copied()).collect()).expect("stack shape")
}

impl<'a> DecoderSession<'a> {
    /// `features` holds one image: `[1, F]` or `[1, P, F]`.
    pub fn new(decoder: &'a Decoder, features: Tensor, trait_id: usize) -> Result<Self> {
        let mut g = Graph::new();
        let mem = decoder.encode_images(&mut g, features)?;
        if mem.batch != 1 {
            return Err(Error::Contract(format!("a session decodes one image, got {}", mem.batch)));
        }
        let take = |v: Option<crate::tensor::Var>| v.map(|v| g.value(v).clone());
        Ok(DecoderSession {
            decoder,
            trait_id,
            positions: mem.positions,
            pooled: take(mem.pooled),
            grid: take(mem.grid),
            keys: take(mem.keys),
        })
    }

    fn memory(&self, g: &mut Graph, rows: usize) -> ImageMemory {
        let mut c = |t: &Option<Tensor>| t.as_ref().map(|t| g.constant(tile(t, rows)));
        ImageMemory {
            batch: rows,
            positions: self.positions,
            pooled: c(&self.pooled),
            grid: c(&self.grid),
            keys: c(&self.keys),
        }
    }

    fn extract(g: &Graph, st: &LstmState, rows: usize) -> Vec<RowState> {
        (0..rows)
            .map(|r| RowState {
                h: st.h.iter().map(|&v| g.value(v).row(r).to_vec()).collect(),
                c: st.c.iter().map(|&v| g.value(v).row(r).to_vec()).collect(),
            })
            .collect()
    }
}

impl StepModel for DecoderSession<'_> {
    type State = RowState;

    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn initial(&self) -> Result<RowState> {
        let mut g = Graph::new();
        let mem = self.memory(&mut g, 1);
        let st = self.decoder.initial_state(&mut g, &mem, &[self.trait_id])?;
        Ok(Self::extract(&g, &st, 1).swap_remove(0))
    }

    fn step(&self, states: &[RowState], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<RowState>)> {
        let rows = states.len();
        let mut g = Graph::new();
        let mem = self.memory(&mut g, rows);
        let layers = states.first().map_or(0, |s| s.h.len());
        let mut st = LstmState {
            h: Vec::with_capacity(layers),
            c: Vec::with_capacity(layers),
        };
        for l in 0..layers {
            let h: Vec<&[f64]> = states.iter().map(|s| s.h[l].as_slice()).collect();
            let c: Vec<&[f64]> = states.iter().map(|s| s.c[l].as_slice()).collect();
            st.h.push(g.constant(stack(&h)));
            st.c.push(g.constant(stack(&c)));
        }
        let traits = vec![self.trait_id; rows];
        let (logits, next) = self.decoder.step(&mut g, &mem, &st, prev, &traits)?;
        let lp = g.log_softmax(logits, 1)?;
        let out = (0..rows).map(|r| g.value(lp).row(r).to_vec()).collect();
        Ok((out, Self::extract(&g, &next, rows)))
    }
}

/// How to decode each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam,
}

/// Decodes every (image, trait) query, in parallel across queries.
pub fn generate(
    decoder: &Decoder,
    features: &FeatureStore,
    queries: &[(String, usize)],
    config: &DecodeConfig,
    strategy: Strategy,
) -> Result<Vec<Decoded>> {
    config.validate()?;
    queries
        .par_iter()
        .map(|(id, t)| {
            let x = image_tensor(features, &[id.as_str()], decoder.config.kind)?;
            let s = DecoderSession::new(decoder, x, *t)?;
            match strategy {
                Strategy::Greedy => greedy(&s, config.max_len),
                Strategy::Beam => beam_search(&s, config),
            }
        })
        .collect()
}
