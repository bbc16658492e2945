#![allow(dead_code)]

use groupmamba::numerics::{ParamStore, Rng, Tensor};
use groupmamba::ssm::{Discretization, ScanSequence, SsmConfig, SsmParams};

/// SSM unit with every buffer redrawn away from its init, so the oracles see
/// generic values rather than the structured initial ones.
pub fn random_ssm(
    store: &mut ParamStore<f64>,
    seed: u64,
    d: usize,
    n: usize,
    d_skip: bool,
    disc: Discretization,
) -> SsmParams {
    let cfg = SsmConfig {
        d_state: n,
        d_skip,
        discretization: disc,
        ..SsmConfig::default()
    };
    let rng = Rng::new(seed);
    let p = SsmParams::init(store, &format!("ssm{seed}"), d, &cfg, &rng).unwrap();
    let mut r = rng.fork(99);
    for v in store.get_mut(p.a_log).data_mut() {
        *v = r.uniform_range(-1.0, 2.0);
    }
    for id in [p.proj_bc, p.dt_down, p.dt_up] {
        for v in store.get_mut(id).data_mut() {
            *v = r.normal() * 0.5;
        }
    }
    for v in store.get_mut(p.dt_bias).data_mut() {
        *v = r.uniform_range(-4.0, -0.5);
    }
    if let Some(id) = p.d_skip {
        for v in store.get_mut(id).data_mut() {
            *v = r.uniform_range(-1.0, 1.0);
        }
    }
    p
}

pub fn random_seq(rng: &mut Rng, b: usize, l: usize, d: usize) -> ScanSequence<f64> {
    let data = (0..b * l * d).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    ScanSequence::new(b, l, d, data).unwrap()
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

/// Plain-loop S6: projections, softplus and the exact ZOH formula written
/// out directly from the definitions.
pub fn naive_scan(store: &ParamStore<f64>, p: &SsmParams, seq: &ScanSequence<f64>) -> Vec<f64> {
    let (d, n, r) = (p.d_inner, p.d_state, p.dt_rank);
    let a_log = store.get(p.a_log).data();
    let w_bc = store.get(p.proj_bc).data();
    let w_down = store.get(p.dt_down).data();
    let w_up = store.get(p.dt_up).data();
    let bias = store.get(p.dt_bias).data();
    let skip = p.d_skip.map(|id| store.get(id).data());
    let mut out = vec![0.0; seq.data.len()];
    for b in 0..seq.batch {
        let mut h = vec![vec![0.0f64; n]; d];
        for t in 0..seq.len {
            let x: Vec<f64> = (0..d).map(|c| seq.get(b, t, c)).collect();
            let mut bv = vec![0.0; n];
            let mut cv = vec![0.0; n];
            for k in 0..n {
                for c in 0..d {
                    bv[k] += x[c] * w_bc[c * 2 * n + k];
                    cv[k] += x[c] * w_bc[c * 2 * n + n + k];
                }
            }
            let mut low = vec![0.0; r];
            for j in 0..r {
                for c in 0..d {
                    low[j] += x[c] * w_down[c * r + j];
                }
            }
            for c in 0..d {
                let mut pre = bias[c];
                for j in 0..r {
                    pre += low[j] * w_up[j * d + c];
                }
                let delta = (1.0 + pre.exp()).ln();
                let mut y = 0.0;
                for k in 0..n {
                    let a = -a_log[c * n + k].exp();
                    let abar = (delta * a).exp();
                    let bbar = match p.discretization {
                        Discretization::Zoh => (abar - 1.0) / a * bv[k],
                        Discretization::EulerInput => delta * bv[k],
                    };
                    h[c][k] = abar * h[c][k] + bbar * x[c];
                    y += cv[k] * h[c][k];
                }
                if let Some(s) = skip {
                    y += s[c] * x[c];
                }
                out[(b * seq.len + t) * d + c] = y;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
