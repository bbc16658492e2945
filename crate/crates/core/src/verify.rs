//! The oracle suite behind `groupmamba verify`, with optional fault
//! injection to show each check can fail.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{decode_cifar10, encode_cifar10, CIFAR_RECORD};
use crate::error::Result;
use crate::layers::{scan_permutation, GroupMambaLayer, LayerConfig, ScanDirection};
use crate::model::{count_flops, count_params, read_checkpoint, write_checkpoint, GroupMambaModel, ModelConfig};
use crate::numerics::{grad_check_store, GradCheckOptions, GradCheckReport, Graph, ParamStore, Rng, Tensor, Var};
use crate::ssm::{
    materialize_inputs, ode_oracle, s6_forward, selective_scan, zoh_discretize, Discretization, ScanSequence,
    SsmConfig, SsmParams,
};
use crate::training::{argmax_rows, cross_entropy, distilled_loss, distilled_loss_node, DistillLossInput, TeacherLogits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Scan under test uses the Euler input rule instead of ZOH.
    Zoh,
    /// Every scan order's inverse has two entries swapped.
    Perm,
    /// The finite-difference side sees an extra term the analytic side does not.
    Grad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    /// Randomized cases for each scan oracle.
    pub scan_cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            fault: None,
            scan_cases: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

pub const CHECKS: &[(&str, Check)] = &[
    ("zoh_scalar", zoh_scalar),
    ("scan_vs_naive", scan_vs_naive),
    ("scan_vs_ode", scan_vs_ode),
    ("scan_permutations", permutations),
    ("grad_ssm", grad_ssm),
    ("grad_layer", grad_layer),
    ("grad_model", grad_model),
    ("grad_distill_loss", grad_loss),
    ("loss_identities", loss_identities),
    ("params_closed_form", params_closed_form),
    ("macs_instrumented", macs_instrumented),
    ("persistence", persistence),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_suite(opts: &VerifyOptions, mut on_check: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = check(opts).unwrap_or_else(|e| (false, format!("error: {e}")));
            let r = CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_check(&r);
            r
        })
        .collect()
}

/// First index where `|a − b| > tol`, with both values.
pub fn first_mismatch(a: &[f64], b: &[f64], tol: f64) -> Option<(usize, f64, f64)> {
    a.iter()
        .zip(b)
        .enumerate()
        .find(|(_, (x, y))| !((*x - *y).abs() <= tol))
        .map(|(i, (x, y))| (i, *x, *y))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn compare(what: &str, got: &[f64], want: &[f64], tol: f64) -> (bool, String) {
    if got.len() != want.len() {
        return (false, format!("{what}: {} values vs {}", got.len(), want.len()));
    }
    match first_mismatch(got, want, tol) {
        None => (true, format!("max err {:.2e} (tol {tol:.0e})", max_abs_diff(got, want))),
        Some((i, x, y)) => (false, format!("{what}[{i}]: got {x:e}, want {y:e} (tol {tol:.0e})")),
    }
}

fn zoh_scalar(opts: &VerifyOptions) -> Result<(bool, String)> {
    let cases: [(f64, f64, f64); 4] = [(-1.0, 2.0, 0.5), (-0.3, -1.0, 0.01), (-5.0, 0.7, 1.3), (-1e-3, 1.0, 2.0)];
    let mut got = Vec::new();
    let mut want = Vec::new();
    for (a, b, delta) in cases {
        let (abar, bbar) = if opts.fault == Some(Fault::Zoh) {
            ((delta * a).exp(), delta * b)
        } else {
            zoh_discretize(a, b, delta)?
        };
        got.extend([abar, bbar]);
        want.extend([(delta * a).exp(), (delta * a).exp_m1() / a * b]);
    }
    Ok(compare("(Ā, B̄)", &got, &want, 1e-14))
}

fn random_ssm(store: &mut ParamStore<f64>, rng: &Rng, d: usize, n: usize, skip: bool, fault: Option<Fault>) -> Result<SsmParams> {
    let cfg = SsmConfig {
        d_state: n,
        d_skip: skip,
        discretization: if fault == Some(Fault::Zoh) {
            Discretization::EulerInput
        } else {
            Discretization::Zoh
        },
        ..SsmConfig::default()
    };
    let p = SsmParams::init(store, "ssm", d, &cfg, rng)?;
    let mut r = rng.fork_named("redraw");
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
    Ok(p)
}

fn random_seq(rng: &mut Rng, b: usize, l: usize, d: usize) -> Result<ScanSequence<f64>> {
    let data = (0..b * l * d).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    ScanSequence::new(b, l, d, data)
}

/// Plain-loop ZOH recurrence on materialized per-token inputs.
fn naive_zoh(store: &ParamStore<f64>, p: &SsmParams, seq: &ScanSequence<f64>) -> Result<Vec<f64>> {
    let inp = materialize_inputs(store, p, &seq.to_tensor()?)?;
    let (d, n) = (p.d_inner, p.d_state);
    let mut y = vec![0.0; seq.data.len()];
    for b in 0..seq.batch {
        let mut h = vec![0.0; d * n];
        for t in 0..seq.len {
            let tok = b * seq.len + t;
            for c in 0..d {
                let u = inp.u.data()[tok * d + c];
                let delta = inp.delta.data()[tok * d + c];
                let mut acc = 0.0;
                for k in 0..n {
                    let a = -inp.a_log.data()[c * n + k].exp();
                    let abar = (delta * a).exp();
                    let bbar = (abar - 1.0) / a * inp.b.data()[tok * n + k];
                    h[c * n + k] = abar * h[c * n + k] + bbar * u;
                    acc += inp.c.data()[tok * n + k] * h[c * n + k];
                }
                if let Some(s) = &inp.d_skip {
                    acc += s.data()[c] * u;
                }
                y[tok * d + c] = acc;
            }
        }
    }
    Ok(y)
}

fn scan_cases(
    opts: &VerifyOptions,
    label: &str,
    skip: bool,
    oracle: impl Fn(&ParamStore<f64>, &SsmParams, &ScanSequence<f64>) -> Result<Vec<f64>>,
    tol: f64,
) -> Result<(bool, String)> {
    let root = Rng::new(opts.seed).fork_named(label);
    let mut worst = 0.0f64;
    for case in 0..opts.scan_cases {
        let mut r = root.fork(case as u64);
        let (b, l, d, n) = (1 + r.below(2), 1 + r.below(10), 1 + r.below(5), 1 + r.below(6));
        let mut store = ParamStore::new();
        let p = random_ssm(&mut store, &r.fork(1), d, n, skip, opts.fault)?;
        let seq = random_seq(&mut r, b, l, d)?;
        let got = selective_scan(&store, &p, &seq)?.data;
        let want = oracle(&store, &p, &seq)?;
        let (ok, detail) = compare("y", &got, &want, tol);
        if !ok {
            return Ok((false, format!("case {case} (B={b} L={l} D={d} N={n}): {detail}")));
        }
        worst = worst.max(max_abs_diff(&got, &want));
    }
    Ok((true, format!("{} cases, max err {worst:.2e} (tol {tol:.0e})", opts.scan_cases)))
}

fn scan_vs_naive(opts: &VerifyOptions) -> Result<(bool, String)> {
    scan_cases(opts, "naive", true, naive_zoh, 1e-10)
}

fn scan_vs_ode(opts: &VerifyOptions) -> Result<(bool, String)> {
    scan_cases(opts, "ode", false, |s, p, q| Ok(ode_oracle(s, p, q, 64)?.data), 1e-6)
}

fn permutations(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut checked = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            let seq: Vec<usize> = (0..h * w).collect();
            for dir in ScanDirection::ALL {
                let mut p = scan_permutation(dir, h, w);
                if opts.fault == Some(Fault::Perm) && h * w > 1 {
                    let mut inv = p.inverse.to_vec();
                    inv.swap(0, 1);
                    p.inverse = inv.into();
                }
                let mut seen = vec![false; h * w];
                for &i in p.forward.iter() {
                    if i >= h * w || std::mem::replace(&mut seen[i], true) {
                        return Ok((false, format!("{} {h}×{w}: not a bijection at {i}", dir.name())));
                    }
                }
                let back = p.restore(&p.apply(&seq));
                if let Some(i) = (0..h * w).find(|&i| back[i] != seq[i]) {
                    return Ok((
                        false,
                        format!("{} {h}×{w}: round trip[{i}] = {}, want {i}", dir.name(), back[i]),
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok((true, format!("{checked} (direction, H, W) round trips exact")))
}

/// `f` plus, under the grad fault, a term only the finite differences see.
fn faulted<'a>(
    opts: &VerifyOptions,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a,
) -> impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a {
    let fault = opts.fault == Some(Fault::Grad);
    move |g, s| {
        let y = f(g, s)?;
        if fault && !g.grad_enabled() {
            let p = g.param(s, s.ids().next().expect("non-empty store"));
            let sq = g.mul(p, p)?;
            let sq = g.sum(sq)?;
            let sq = g.scale(sq, 0.1)?;
            return g.add(y, sq);
        }
        Ok(y)
    }
}

fn grad_verdict(r: &GradCheckReport, tol: f64) -> (bool, String) {
    let w = r.worst().expect("at least one buffer");
    let detail = format!(
        "{} buffers, worst {} rel err {:.2e} at [{}]: analytic {:e}, numeric {:e} (tol {tol:.0e})",
        r.params.len(),
        w.name,
        w.rel_err,
        w.worst_entry,
        w.worst_analytic,
        w.worst_numeric
    );
    (r.passes(tol), detail)
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = Rng::new(seed);
    let w = Tensor::from_fn(g.shape(y), |_| r.normal());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn grad_ssm(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let rng = Rng::new(opts.seed).fork_named("grad_ssm");
    let p = random_ssm(&mut store, &rng, 3, 4, true, None)?;
    let mut r = rng.fork(2);
    let x = Tensor::from_fn(&[2, 5, 3], |_| r.uniform_range(-2.0, 2.0));
    let f = faulted(opts, move |g, s| {
        let xv = g.constant(x.clone());
        let y = s6_forward(g, s, &p, xv)?;
        weighted_sum(g, y, 7)
    });
    Ok(grad_verdict(&grad_check_store(f, &store, &GradCheckOptions::default())?, 1e-4))
}

fn grad_layer(opts: &VerifyOptions) -> Result<(bool, String)> {
    let rng = Rng::new(opts.seed).fork_named("grad_layer");
    let mut store = ParamStore::new();
    let cfg = LayerConfig {
        ssm: SsmConfig {
            d_state: 3,
            ..SsmConfig::default()
        },
        ..LayerConfig::default()
    };
    let layer = GroupMambaLayer::init(&mut store, "layer", 8, &cfg, &rng)?;
    let mut r = rng.fork(3);
    // move buffers off their structured init
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v += 0.25 * r.normal();
        }
    }
    let x = Tensor::from_fn(&[1, 3, 4, 8], |_| r.normal());
    let f = faulted(opts, move |g, s| {
        let xv = g.constant(x.clone());
        let y = layer.forward(g, s, xv)?;
        weighted_sum(g, y, 9)
    });
    let gc = GradCheckOptions {
        max_entries: Some(12),
        seed: opts.seed,
        ..GradCheckOptions::default()
    };
    Ok(grad_verdict(&grad_check_store(f, &store, &gc)?, 1e-4))
}

/// Sampled central-difference check of the full micro model in 64-bit.
pub fn micro_model_grad_check(seed: u64, entries_per_buffer: usize, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model: GroupMambaModel<f64> = GroupMambaModel::build(&ModelConfig::micro(), &Rng::new(seed))?;
    let mut r = Rng::new(seed).fork_named("images");
    let x = Tensor::from_fn(&[2, 32, 32, 3], |_| r.normal());
    let labels = [3usize, 8];
    let opts = VerifyOptions {
        fault,
        ..VerifyOptions::default()
    };
    let m = &model;
    let f = faulted(&opts, move |g, s| {
        let xv = g.constant(x.clone());
        let logits = m.forward_with(g, s, xv)?;
        g.cross_entropy(logits, &labels, 0.1, labels.len())
    });
    grad_check_store(
        f,
        &model.store,
        &GradCheckOptions {
            max_entries: Some(entries_per_buffer),
            seed,
            ..GradCheckOptions::default()
        },
    )
}

fn grad_model(opts: &VerifyOptions) -> Result<(bool, String)> {
    Ok(grad_verdict(&micro_model_grad_check(opts.seed, 2, opts.fault)?, 1e-4))
}

fn grad_loss(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = Rng::new(opts.seed).fork_named("grad_loss");
    let zt = Tensor::from_fn(&[4, 6], |_| r.normal() * 2.0);
    let teacher = argmax_rows(&zt)?;
    let mut store = ParamStore::new();
    store.add("student_logits", Tensor::from_fn(&[4, 6], |_| r.normal() * 2.0), false);
    let f = faulted(opts, move |g, s| {
        let z = g.param(s, s.ids().next().expect("one buffer"));
        distilled_loss_node(g, z, &[5, 0, 2, 2], Some(&teacher), 0.3, 0.1, 4)
    });
    Ok(grad_verdict(&grad_check_store(f, &store, &GradCheckOptions::default())?, 1e-6))
}

fn loss_identities(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = Rng::new(opts.seed).fork_named("loss");
    let zs = Tensor::from_fn(&[5, 7], |_| r.normal() * 3.0);
    let zt = Tensor::from_fn(&[5, 7], |_| r.normal() * 3.0);
    let y = [0, 6, 3, 3, 1];
    let l = |alpha| {
        distilled_loss(&DistillLossInput {
            student_logits: &zs,
            teacher_logits: &zt,
            labels: &y,
            alpha,
        })
    };
    let (l0, l1) = (l(0.0)?, l(1.0)?);
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let got = alphas.iter().map(|&a| l(a)).collect::<Result<Vec<_>>>()?;
    let want: Vec<f64> = alphas.iter().map(|a| a * l1 + (1.0 - a) * l0).collect();
    let (ok, detail) = compare("L(α)", &got, &want, 1e-12);
    if !ok {
        return Ok((false, detail));
    }
    let ce = cross_entropy(&zs, &y, 0.0)?;
    if l1 != ce {
        return Ok((false, format!("L(1) = {l1:e}, CE = {ce:e}")));
    }
    let example = distilled_loss(&DistillLossInput {
        student_logits: &Tensor::new(&[1, 2], vec![1.0, 0.0])?,
        teacher_logits: &Tensor::new(&[1, 2], vec![0.0, 2.0])?,
        labels: &[0],
        alpha: 0.5,
    })?;
    let want = 0.5 * (-1f64).exp().ln_1p() + 0.5 * 1f64.exp().ln_1p();
    let (ok, d) = compare("worked example", &[example], &[want], 1e-12);
    Ok((ok, if ok { format!("linearity {detail}; L(1) = CE; example {example:.5}") } else { d }))
}

fn params_closed_form(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    for cfg in [ModelConfig::micro(), ModelConfig::tiny()] {
        let built: GroupMambaModel<f32> = GroupMambaModel::build(&cfg, &Rng::new(0))?;
        let closed = count_params(&cfg)?.total;
        let enumerated = built.num_params();
        if closed != enumerated {
            return Ok((false, format!("{}: closed form {closed}, enumerated {enumerated}", cfg.name)));
        }
        parts.push(format!("{} {closed}", cfg.name));
    }
    Ok((true, parts.join(", ")))
}

fn macs_instrumented(_: &VerifyOptions) -> Result<(bool, String)> {
    let cfg = ModelConfig::micro();
    let m: GroupMambaModel<f32> = GroupMambaModel::build(&cfg, &Rng::new(0))?;
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[2, 32, 32, 3]));
    m.forward(&mut g, x)?;
    let analytic = 2 * count_flops(&cfg, 32, 32)?.macs;
    Ok((
        g.macs() == analytic,
        format!("micro 2×32²: analytic {analytic}, instrumented {}", g.macs()),
    ))
}

fn persistence(opts: &VerifyOptions) -> Result<(bool, String)> {
    let m: GroupMambaModel<f32> = GroupMambaModel::build(&ModelConfig::micro(), &Rng::new(opts.seed))?;
    let bytes = write_checkpoint(&m);
    let back: GroupMambaModel<f32> = read_checkpoint(&bytes)?;
    if write_checkpoint(&back) != bytes {
        return Ok((false, "checkpoint re-encode differs".into()));
    }
    let mut r = Rng::new(opts.seed).fork_named("cache");
    let cache = TeacherLogits::new(10, (0..50).map(|_| r.normal() as f32).collect())?;
    let cache_bytes = cache.to_bytes();
    if TeacherLogits::from_bytes(&cache_bytes)?.to_bytes() != cache_bytes {
        return Ok((false, "teacher cache re-encode differs".into()));
    }
    let fixture: Vec<u8> = (0..3 * CIFAR_RECORD)
        .map(|i| if i % CIFAR_RECORD == 0 { (i / 997 % 10) as u8 } else { r.below(256) as u8 })
        .collect();
    if encode_cifar10(&decode_cifar10(&fixture, 0)?)? != fixture {
        return Ok((false, "CIFAR-10 fixture re-encode differs".into()));
    }
    Ok((
        true,
        format!("checkpoint {} B, teacher cache {} B, CIFAR fixture {} B", bytes.len(), cache_bytes.len(), fixture.len()),
    ))
}
