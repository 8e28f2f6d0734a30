use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::{Precision, Tensor};
use crate::error::Result;

/// Coordinates whose gradients are both below this magnitude are compared
/// by absolute error scaled by the floor instead of a pure ratio.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name (empty for single-input checks) and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (String::new(), 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            passed: true,
        }
    }

    fn observe(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = rel;
            self.worst = (name.to_string(), index);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    fn finish(mut self, tol: f64) -> Self {
        self.passed = self.max_rel_error <= tol;
        self
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, evaluated in f64.
pub fn grad_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::with_precision(Precision::F64);
    let xv = g.input(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::with_precision(Precision::F64);
        let v = g.input(t, true);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };

    let mut report = GradCheckReport::empty();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.observe("", i, analytic.data()[i], numeric);
    }
    Ok(report.finish(tol))
}

/// Gradient check of a scalar loss against every unfrozen parameter of
/// `store`. At most `max_coords` coordinates per tensor are sampled
/// (deterministically from `seed`).
pub fn grad_check_params(
    store: &ParamStore,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::with_precision(Precision::F64);
    let y = f(&mut g, &analytic_store)?;
    g.backward(y)?;
    g.accumulate_param_grads(&mut analytic_store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::empty();
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let fp = {
                let mut g = Graph::with_precision(Precision::F64);
                let y = f(&mut g, &probe)?;
                g.value(y).item()
            };
            probe.value_mut(id).data_mut()[i] = orig - h;
            let fm = {
                let mut g = Graph::with_precision(Precision::F64);
                let y = f(&mut g, &probe)?;
                g.value(y).item()
            };
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            report.observe(store.name(id), i, analytic_store.grad(id)[i], numeric);
        }
    }
    Ok(report.finish(tol))
}
