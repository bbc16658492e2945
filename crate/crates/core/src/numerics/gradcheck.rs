//! Central-difference verification of analytic gradients.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many entries per parameter buffer (sampled
    /// deterministically); `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries: None,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// Largest `max(|analytic|, |numeric|)` over checked entries.
    pub scale: f64,
    /// `max_abs_err / max(scale, abs_floor)`.
    pub rel_err: f64,
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// False when `f` or any gradient was non-finite.
    pub valid: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.valid && self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Checks `f` against central differences over free tensors `theta`.
///
/// `f` receives one leaf per tensor, in order, and must return a scalar.
pub fn grad_check<F>(f: F, theta: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = theta
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("theta{i}"), t.clone(), false))
        .collect();
    grad_check_store(
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        },
        &store,
        opts,
    )
}

/// Checks `f` against central differences over every buffer of `store`.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let mut valid = g.value(loss).is_finite();
    let analytic = g.backward(loss)?.params(store.len());

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let rng = Rng::new(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let entry = store.entry(id);
        let n = entry.value.len();
        let grad = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
        valid &= grad.is_finite();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut p = rng.fork(id.index() as u64).permutation(n);
                p.truncate(m);
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: entry.name.clone(),
            checked: entries.len(),
            max_abs_err: 0.0,
            scale: 0.0,
            rel_err: 0.0,
            worst_entry: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in &entries {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad.data()[i];
            if !numeric.is_finite() {
                valid = false;
            }
            let err = (a - numeric).abs();
            check.scale = check.scale.max(a.abs()).max(numeric.abs());
            if err > check.max_abs_err || !err.is_finite() {
                check.max_abs_err = err;
                check.worst_entry = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        check.rel_err = check.max_abs_err / check.scale.max(opts.abs_floor);
        params.push(check);
    }
    Ok(GradCheckReport { params, valid })
}
