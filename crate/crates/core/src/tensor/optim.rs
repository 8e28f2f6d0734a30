use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Precision;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before the update.
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            clip: None,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient actually used for the update.
    pub applied_norm: f64,
}

/// SGD or Adam over every unfrozen tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    precision: Precision,
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns (norm before, norm after).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(store);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
        (norm, max_norm)
    } else {
        (norm, norm)
    }
}

fn global_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .filter(|&id| !store.is_frozen(id))
        .flat_map(|id| store.grad(id).iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            precision: Precision::current(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients held in `store`, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepStats> {
        for id in store.ids() {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        let (grad_norm, applied_norm) = match self.config.clip {
            Some(c) => clip_global_norm(store, c),
            None => {
                let n = global_norm(store);
                (n, n)
            }
        };
        if self.m.len() < store.len() {
            for id in store.ids().skip(self.m.len()) {
                let n = store.value(id).numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.t += 1;
        let c = self.config.clone();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = store.value_mut(id).data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in value.iter_mut().zip(&grad) {
                        *w -= c.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    for j in 0..value.len() {
                        let g = grad[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        value[j] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
            self.precision.round_slice(value);
        }
        store.zero_grad();
        Ok(StepStats {
            grad_norm,
            applied_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{with_precision, Tensor};

    fn quadratic_grad(store: &mut ParamStore) {
        let id = store.ids().next().unwrap();
        let w = store.value(id).data()[0];
        store.grad_mut(id)[0] = 2.0 * w;
    }

    #[test]
    fn sgd_closed_form_step() {
        with_precision(Precision::F64, || {
            let mut s = ParamStore::new();
            s.add("w", Tensor::scalar(1.0)).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
            quadratic_grad(&mut s);
            opt.step(&mut s).unwrap();
            let w = s.value(s.id("w").unwrap()).item();
            assert!((w - 0.8).abs() < 1e-12);
        });
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        with_precision(Precision::F64, || {
            let mut s = ParamStore::new();
            s.add("w", Tensor::scalar(1.0)).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig {
                clip: None,
                ..OptimizerConfig::adam(0.05)
            });
            let mut reached = None;
            for step in 0..500 {
                quadratic_grad(&mut s);
                opt.step(&mut s).unwrap();
                if s.value(s.id("w").unwrap()).item().abs() < 1e-3 {
                    reached = Some(step);
                    break;
                }
            }
            assert!(reached.is_some(), "adam failed to reach |w| < 1e-3");
        });
    }

    #[test]
    fn clipping_rescales_to_ceiling() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        s.grad_mut(a).copy_from_slice(&[6.0, 8.0]);
        let mut opt = Optimizer::new(OptimizerConfig {
            clip: Some(1.0),
            ..OptimizerConfig::sgd(1.0)
        });
        let stats = opt.step(&mut s).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.applied_norm - 1.0).abs() < 1e-12);
        let w = s.value(a).data();
        assert!(((w[0] * w[0] + w[1] * w[1]).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[1])).unwrap();
        s.grad_mut(a)[0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        assert!(matches!(opt.step(&mut s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", Tensor::ones(&[3])).unwrap();
        s.set_frozen_prefix("enc.", true);
        s.grad_mut(a).copy_from_slice(&[1.0, 1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5));
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(a).data(), &[1.0, 1.0, 1.0]);
    }
}
