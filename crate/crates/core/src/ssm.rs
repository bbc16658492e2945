//! Selective state-space scan (S6) with zero-order-hold discretization.
//!
//! For every channel `d` and state index `n` the continuous system
//! `h' = A h + B x`, `y = C h` is discretized per token with step `Δ_t`:
//!
//! ```text
//! Ā = exp(Δ·A)
//! B̄ = (Δ·A)⁻¹ (exp(Δ·A) − 1) · Δ·B
//! h_t = Ā h_{t−1} + B̄ x_t
//! y_t = Σ_n C_t[n] h_t[n]  (+ D·x_t when the skip term is enabled)
//! ```
//!
//! `A` is diagonal and stored as `a_log` with `A = −exp(a_log)`, so it is
//! strictly negative. `Δ`, `B` and `C` are functions of the current token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{expm1_over, expm1_over_grad};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Unary, Var};
use crate::scalar::Scalar;

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// Exact zero-order hold for both `Ā` and `B̄`.
    #[default]
    Zoh,
    /// Zero-order hold for `Ā`, first-order `B̄ = Δ·B`.
    EulerInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_state: usize,
    /// Adds the direct feedthrough `D·x_t` to the output.
    pub d_skip: bool,
    pub dt_min: f64,
    pub dt_max: f64,
    pub discretization: Discretization,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            d_skip: true,
            dt_min: 0.001,
            dt_max: 0.1,
            discretization: Discretization::Zoh,
        }
    }
}

/// Rank of the low-rank `Δ` projection for `d_inner` channels.
pub fn dt_rank(d_inner: usize) -> usize {
    d_inner.div_ceil(16).max(1)
}

/// Parameter handles of one selective-scan unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    /// `[D, N]`, `A = −exp(a_log)`.
    pub a_log: ParamId,
    /// `[D, 2N]`: first `N` outputs are `B_t`, last `N` are `C_t`.
    pub proj_bc: ParamId,
    /// `[D, dt_rank]`
    pub dt_down: ParamId,
    /// `[dt_rank, D]`
    pub dt_up: ParamId,
    /// `[D]`
    pub dt_bias: ParamId,
    /// `[D]`
    pub d_skip: Option<ParamId>,
    pub discretization: Discretization,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Registers and initializes the buffers under `prefix`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_inner: usize,
        cfg: &SsmConfig,
        rng: &Rng,
    ) -> Result<Self> {
        if d_inner == 0 || cfg.d_state == 0 {
            return Err(Error::config("selective scan needs d_inner, d_state >= 1"));
        }
        if !(0.0 < cfg.dt_min && cfg.dt_min <= cfg.dt_max) {
            return Err(Error::config(format!(
                "dt range [{}, {}] must be positive and ordered",
                cfg.dt_min, cfg.dt_max
            )));
        }
        let (d, n) = (d_inner, cfg.d_state);
        let r = dt_rank(d);

        let a_log = Tensor::from_fn(&[d, n], |i| T::of(((i % n) + 1) as f64).ln());

        let mut proj_bc = Tensor::zeros(&[d, 2 * n]);
        rng.fork_named(&format!("{prefix}.proj_bc"))
            .fill_trunc_normal(proj_bc.data_mut(), 0.02);
        let mut dt_down = Tensor::zeros(&[d, r]);
        rng.fork_named(&format!("{prefix}.dt_down"))
            .fill_trunc_normal(dt_down.data_mut(), 0.02);
        let mut dt_up = Tensor::zeros(&[r, d]);
        let bound = (r as f64).powf(-0.5);
        rng.fork_named(&format!("{prefix}.dt_up"))
            .fill_uniform(dt_up.data_mut(), -bound, bound);

        // softplus(bias) = dt, log-uniform in [dt_min, dt_max]
        let mut dt_rng = rng.fork_named(&format!("{prefix}.dt_bias"));
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias = Tensor::from_fn(&[d], |_| {
            T::of(inverse_softplus(dt_rng.uniform_range(lo, hi).exp()))
        });

        Ok(SsmParams {
            d_inner: d,
            d_state: n,
            dt_rank: r,
            a_log: store.add(format!("{prefix}.a_log"), a_log, false),
            proj_bc: store.add(format!("{prefix}.proj_bc"), proj_bc, true),
            dt_down: store.add(format!("{prefix}.dt_down"), dt_down, true),
            dt_up: store.add(format!("{prefix}.dt_up"), dt_up, true),
            dt_bias: store.add(format!("{prefix}.dt_bias"), dt_bias, false),
            d_skip: cfg
                .d_skip
                .then(|| store.add(format!("{prefix}.d_skip"), Tensor::ones(&[d]), false)),
            discretization: cfg.discretization,
        })
    }

    /// Number of scalar parameters, in closed form.
    pub fn count(d_inner: usize, cfg: &SsmConfig) -> usize {
        let (d, n, r) = (d_inner, cfg.d_state, dt_rank(d_inner));
        d * n + d * 2 * n + d * r + r * d + d + if cfg.d_skip { d } else { 0 }
    }

    /// Multiply-accumulates for `tokens` tokens, in closed form.
    pub fn macs(d_inner: usize, cfg: &SsmConfig, tokens: usize) -> u64 {
        let (d, n, r) = (d_inner, cfg.d_state, dt_rank(d_inner));
        let proj = d * 2 * n + d * r + r * d;
        (tokens * (proj + scan_macs_per_token(d, n, cfg.d_skip))) as u64
    }
}

/// Discretizes one diagonal entry: returns `(Ā, B̄)` for step `delta`.
pub fn zoh_discretize<T: Scalar>(a: T, b: T, delta: T) -> Result<(T, T)> {
    if !(delta > T::zero()) {
        return Err(Error::Domain(format!("step must be positive, got {delta}")));
    }
    let s = delta * a;
    Ok((s.exp(), delta * expm1_over(s) * b))
}

fn scan_macs_per_token(d: usize, n: usize, skip: bool) -> usize {
    // 9 ops per (channel, state) as in the reference selective-scan counter, plus skip
    9 * d * n + if skip { d } else { 0 }
}

/// Per-token inputs of a scan, all token-major.
#[derive(Clone, Debug)]
pub struct ScanInputs<T> {
    /// `[B, L, D]`
    pub u: Tensor<T>,
    /// `[B, L, D]`, strictly positive.
    pub delta: Tensor<T>,
    /// `[D, N]`
    pub a_log: Tensor<T>,
    /// `[B, L, N]`
    pub b: Tensor<T>,
    /// `[B, L, N]`
    pub c: Tensor<T>,
    /// `[D]`
    pub d_skip: Option<Tensor<T>>,
    pub discretization: Discretization,
}

/// Output of [`scan_kernel`].
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    /// `[B, L, D]`
    pub y: Tensor<T>,
    /// `[B, L, D, N]` hidden states after each token, when requested.
    pub states: Option<Vec<T>>,
}

#[derive(Clone, Copy)]
struct ScanDims {
    b: usize,
    l: usize,
    d: usize,
    n: usize,
}

fn check_scan_shapes<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: Option<&Tensor<T>>,
) -> Result<ScanDims> {
    let [bn, l, d] = u.dims3()?;
    let n = match a_log.shape() {
        [da, n] if *da == d => *n,
        s => return Err(Error::shape(format!("scan: a_log {s:?} for {d} channels"))),
    };
    if delta.shape() != u.shape()
        || b.shape() != [bn, l, n]
        || c.shape() != [bn, l, n]
        || d_skip.is_some_and(|s| s.shape() != [d])
    {
        return Err(Error::shape(format!(
            "scan: u {:?}, delta {:?}, B {:?}, C {:?}, D {:?}",
            u.shape(),
            delta.shape(),
            b.shape(),
            c.shape(),
            d_skip.map(|s| s.shape().to_vec())
        )));
    }
    Ok(ScanDims { b: bn, l, d, n })
}

/// Sequential recurrence over the token axis, `h₀ = 0`.
pub fn scan_kernel<T: Scalar>(inp: &ScanInputs<T>, keep_states: bool) -> Result<ScanTrace<T>> {
    let dims = check_scan_shapes(
        &inp.u,
        &inp.delta,
        &inp.a_log,
        &inp.b,
        &inp.c,
        inp.d_skip.as_ref(),
    )?;
    Ok(scan_forward(
        dims,
        inp.u.data(),
        inp.delta.data(),
        inp.a_log.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.as_ref().map(|t| t.data()),
        inp.discretization,
        keep_states,
    ))
}

#[inline]
fn input_gain<T: Scalar>(disc: Discretization, delta: T, s: T) -> T {
    match disc {
        Discretization::Zoh => delta * expm1_over(s),
        Discretization::EulerInput => delta,
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_forward<T: Scalar>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a_log: &[T],
    bm: &[T],
    cm: &[T],
    d_skip: Option<&[T]>,
    disc: Discretization,
    keep_states: bool,
) -> ScanTrace<T> {
    let ScanDims { b, l, d, n } = dims;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let mut y = vec![T::zero(); b * l * d];
    let mut states = keep_states.then(|| vec![T::zero(); b * l * d * n]);
    let mut h = vec![T::zero(); d * n];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let tok = bi * l + t;
            let bt = &bm[tok * n..(tok + 1) * n];
            let ct = &cm[tok * n..(tok + 1) * n];
            for di in 0..d {
                let x = u[tok * d + di];
                let dt = delta[tok * d + di];
                let hd = &mut h[di * n..(di + 1) * n];
                let ad = &a[di * n..(di + 1) * n];
                let mut acc = T::zero();
                for k in 0..n {
                    let s = dt * ad[k];
                    let abar = s.exp();
                    let bbar = input_gain(disc, dt, s) * bt[k];
                    hd[k] = abar * hd[k] + bbar * x;
                    acc += ct[k] * hd[k];
                }
                if let Some(ds) = d_skip {
                    acc += ds[di] * x;
                }
                y[tok * d + di] = acc;
                if let Some(st) = states.as_mut() {
                    st[(tok * d + di) * n..(tok * d + di + 1) * n].copy_from_slice(hd);
                }
            }
        }
    }
    ScanTrace {
        y: Tensor::new(&[b, l, d], y).expect("scan output shape"),
        states,
    }
}

/// Differentiable scan op. All inputs are graph nodes; see [`ScanInputs`]
/// for shapes.
#[allow(clippy::too_many_arguments)]
pub fn scan_op<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    delta: Var,
    a_log: Var,
    bm: Var,
    cm: Var,
    d_skip: Option<Var>,
    disc: Discretization,
) -> Result<Var> {
    let dims = check_scan_shapes(
        g.value(u),
        g.value(delta),
        g.value(a_log),
        g.value(bm),
        g.value(cm),
        d_skip.map(|v| g.value(v)),
    )?;
    let mut parents = vec![u, delta, a_log, bm, cm];
    parents.extend(d_skip);
    let keep = g.needs_grad(&parents);
    let trace = scan_forward(
        dims,
        g.value(u).data(),
        g.value(delta).data(),
        g.value(a_log).data(),
        g.value(bm).data(),
        g.value(cm).data(),
        d_skip.map(|v| g.value(v).data()),
        disc,
        keep,
    );
    g.add_macs((dims.b * dims.l * scan_macs_per_token(dims.d, dims.n, d_skip.is_some())) as u64);
    let states = trace.states.unwrap_or_default();
    Ok(g.push_op(
        trace.y,
        &parents,
        Box::new(move |gy, vals, grads| {
            let ScanDims { b, l, d, n } = dims;
            let ud = vals.get(u).data();
            let dd = vals.get(delta).data();
            let ald = vals.get(a_log).data();
            let bd = vals.get(bm).data();
            let cd = vals.get(cm).data();
            let sd = d_skip.map(|v| vals.get(v).data());
            let gyd = gy.data();
            let a: Vec<T> = ald.iter().map(|&v| -v.exp()).collect();

            let mut du = vec![T::zero(); ud.len()];
            let mut ddelta = vec![T::zero(); dd.len()];
            let mut da = vec![T::zero(); a.len()];
            let mut db = vec![T::zero(); bd.len()];
            let mut dc = vec![T::zero(); cd.len()];
            let mut dskip = vec![T::zero(); d];
            let mut adj = vec![T::zero(); n];
            for bi in 0..b {
                for di in 0..d {
                    adj.iter_mut().for_each(|v| *v = T::zero());
                    let ad = &a[di * n..(di + 1) * n];
                    for t in (0..l).rev() {
                        let tok = bi * l + t;
                        let gy_t = gyd[tok * d + di];
                        let x = ud[tok * d + di];
                        let dt = dd[tok * d + di];
                        let h_t = &states[(tok * d + di) * n..(tok * d + di + 1) * n];
                        let h_prev = (t > 0).then(|| &states[((tok - 1) * d + di) * n..][..n]);
                        let bt = &bd[tok * n..(tok + 1) * n];
                        let ct = &cd[tok * n..(tok + 1) * n];
                        let mut dx = T::zero();
                        if let Some(s) = sd {
                            dx += gy_t * s[di];
                            dskip[di] += gy_t * x;
                        }
                        let mut ddt = T::zero();
                        for k in 0..n {
                            dc[tok * n + k] += gy_t * h_t[k];
                            adj[k] += gy_t * ct[k];
                            let s = dt * ad[k];
                            let abar = s.exp();
                            let hp = h_prev.map_or(T::zero(), |h| h[k]);
                            let d_abar = adj[k] * hp;
                            let d_beta = adj[k] * x;
                            let gain = input_gain(disc, dt, s);
                            dx += adj[k] * gain * bt[k];
                            db[tok * n + k] += d_beta * gain;
                            // dĀ/dΔ = A·Ā, dĀ/dA = Δ·Ā
                            ddt += d_abar * abar * ad[k];
                            da[di * n + k] += d_abar * abar * dt;
                            match disc {
                                Discretization::Zoh => {
                                    // d(Δ·φ(ΔA))/dΔ = exp(ΔA), d/dA = Δ²·φ'(ΔA)
                                    ddt += d_beta * bt[k] * abar;
                                    da[di * n + k] += d_beta * bt[k] * dt * dt * expm1_over_grad(s);
                                }
                                Discretization::EulerInput => {
                                    ddt += d_beta * bt[k];
                                }
                            }
                            adj[k] *= abar;
                        }
                        du[tok * d + di] += dx;
                        ddelta[tok * d + di] += ddt;
                    }
                }
            }
            for (v, buf) in [(u, du), (delta, ddelta), (bm, db), (cm, dc)] {
                if let Some(acc) = grads.acc(v) {
                    acc.iter_mut().zip(buf).for_each(|(o, x)| *o += x);
                }
            }
            if let Some(acc) = grads.acc(a_log) {
                // dA/da_log = A
                for ((o, x), &av) in acc.iter_mut().zip(da).zip(&a) {
                    *o += x * av;
                }
            }
            if let Some(acc) = d_skip.and_then(|v| grads.acc(v)) {
                acc.iter_mut().zip(dskip).for_each(|(o, x)| *o += x);
            }
        }),
    ))
}

/// Graph nodes for the token-dependent `Δ`, `B`, `C`.
pub struct SelectiveVars {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

/// Computes `Δ = softplus(up(down(x)) + bias)` and `[B | C] = proj_bc(x)`.
pub fn selective_inputs<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &SsmParams,
    x: Var,
) -> Result<SelectiveVars> {
    let [_, _, d] = g.value(x).dims3()?;
    if d != p.d_inner {
        return Err(Error::shape(format!(
            "selective scan expects {} channels, got {d}",
            p.d_inner
        )));
    }
    let w_bc = g.param(store, p.proj_bc);
    let bc = g.linear(x, w_bc, None)?;
    let b = g.slice_last(bc, 0, p.d_state)?;
    let c = g.slice_last(bc, p.d_state, p.d_state)?;
    let w_down = g.param(store, p.dt_down);
    let w_up = g.param(store, p.dt_up);
    let bias = g.param(store, p.dt_bias);
    let low = g.linear(x, w_down, None)?;
    let pre = g.linear(low, w_up, Some(bias))?;
    let delta = g.unary(pre, Unary::Softplus)?;
    Ok(SelectiveVars { delta, b, c })
}

/// The full S6 unit on a `(B, L, D)` sequence node.
pub fn s6_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &SsmParams,
    x: Var,
) -> Result<Var> {
    let sel = selective_inputs(g, store, p, x)?;
    let a_log = g.param(store, p.a_log);
    let d_skip = p.d_skip.map(|id| g.param(store, id));
    scan_op(g, x, sel.delta, a_log, sel.b, sel.c, d_skip, p.discretization)
}

/// Token sequence `(batch, len, channels)`. Unlike [`Tensor`] it admits
/// `len = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence<T> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ScanSequence<T> {
    pub fn new(batch: usize, len: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if batch * len * channels != data.len() {
            return Err(Error::shape(format!(
                "sequence ({batch}, {len}, {channels}) needs {} values, got {}",
                batch * len * channels,
                data.len()
            )));
        }
        Ok(ScanSequence {
            batch,
            len,
            channels,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let [b, l, d] = t.dims3()?;
        Self::new(b, l, d, t.data().to_vec())
    }

    /// Flattens a `(B, H, W, C)` map in row-major token order.
    pub fn from_map(t: &Tensor<T>) -> Result<Self> {
        let [b, h, w, c] = t.dims4()?;
        Self::new(b, h * w, c, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::new(&[self.batch, self.len, self.channels], self.data.clone())
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, b: usize, t: usize, d: usize) -> T {
        self.data[(b * self.len + t) * self.channels + d]
    }
}

fn check_channels<T>(p: &SsmParams, seq: &ScanSequence<T>) -> Result<()> {
    if seq.channels != p.d_inner {
        return Err(Error::shape(format!(
            "selective scan expects {} channels, got {}",
            p.d_inner, seq.channels
        )));
    }
    Ok(())
}

/// Value-level S6. An empty sequence maps to an empty sequence.
pub fn selective_scan<T: Scalar>(
    store: &ParamStore<T>,
    p: &SsmParams,
    seq: &ScanSequence<T>,
) -> Result<ScanSequence<T>> {
    check_channels(p, seq)?;
    if seq.is_empty() {
        return Ok(seq.clone());
    }
    let mut g = Graph::inference();
    let x = g.constant(seq.to_tensor()?);
    let y = s6_forward(&mut g, store, p, x)?;
    ScanSequence::from_tensor(g.value(y))
}

/// Materializes the per-token scan inputs of `seq` for inspection and oracles.
pub fn materialize_inputs<T: Scalar>(
    store: &ParamStore<T>,
    p: &SsmParams,
    seq: &Tensor<T>,
) -> Result<ScanInputs<T>> {
    let mut g = Graph::inference();
    let x = g.constant(seq.clone());
    let sel = selective_inputs(&mut g, store, p, x)?;
    Ok(ScanInputs {
        u: seq.clone(),
        delta: g.value(sel.delta).clone(),
        a_log: store.get(p.a_log).clone(),
        b: g.value(sel.b).clone(),
        c: g.value(sel.c).clone(),
        d_skip: p.d_skip.map(|id| store.get(id).clone()),
        discretization: p.discretization,
    })
}

/// Integrates `h' = A h + B_t x_t` over each token's interval `Δ_t` with
/// classical RK4, holding the input constant within the interval, and
/// reads out `y_t = C_t · h` at the end of the interval (no skip term).
pub fn ode_oracle<T: Scalar>(
    store: &ParamStore<T>,
    p: &SsmParams,
    seq: &ScanSequence<T>,
    substeps: usize,
) -> Result<ScanSequence<T>> {
    if substeps < 16 {
        return Err(Error::Domain(format!("ode_oracle needs >= 16 substeps, got {substeps}")));
    }
    check_channels(p, seq)?;
    if seq.is_empty() {
        return Ok(seq.clone());
    }
    let inp = materialize_inputs(store, p, &seq.to_tensor()?)?;
    ScanSequence::from_tensor(&integrate_rk4(&inp, substeps))
}

/// RK4 integration of the continuous system described by `inp`.
pub fn integrate_rk4<T: Scalar>(inp: &ScanInputs<T>, substeps: usize) -> Tensor<T> {
    let [b, l, d] = inp.u.dims3().expect("u is (B, L, D)");
    let n = inp.a_log.shape()[1];
    let mut y = Tensor::zeros(&[b, l, d]);
    let two = T::of(2.0);
    let six = T::of(6.0);
    for bi in 0..b {
        for di in 0..d {
            for k in 0..n {
                let a = -inp.a_log.data()[di * n + k].exp();
                let mut h = T::zero();
                for t in 0..l {
                    let tok = bi * l + t;
                    let drive = inp.b.data()[tok * n + k] * inp.u.data()[tok * d + di];
                    let step = inp.delta.data()[tok * d + di] / T::of(substeps as f64);
                    let f = |h: T| a * h + drive;
                    for _ in 0..substeps {
                        let k1 = f(h);
                        let k2 = f(h + step / two * k1);
                        let k3 = f(h + step / two * k2);
                        let k4 = f(h + step * k3);
                        h += step / six * (k1 + two * k2 + two * k3 + k4);
                    }
                    let out = &mut y.data_mut()[tok * d + di];
                    *out += inp.c.data()[tok * n + k] * h;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_reference_values() {
        let (a, b) = zoh_discretize(-1.0f64, 1.0, 0.1).unwrap();
        // exp(-0.1) and 1 - exp(-0.1), evaluated independently
        assert!((a - 0.904_837_418_035_959_6).abs() < 1e-15);
        assert!((b - 0.095_162_581_964_040_43).abs() < 1e-15);

        let (a, b) = zoh_discretize(0.0f64, 1.0, 0.1).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - 0.1).abs() < 1e-15);

        let (a, b) = zoh_discretize(-1.0f64, 1.0, 1e-12).unwrap();
        assert!((a - 1.0).abs() < 1e-11 && b.abs() < 1e-11);
    }

    #[test]
    fn zoh_rejects_non_positive_step() {
        assert!(matches!(zoh_discretize(-1.0f64, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(zoh_discretize(-1.0f64, 1.0, -0.5).is_err());
        assert!(zoh_discretize(-1.0f64, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn init_respects_invariants() {
        let mut store = ParamStore::<f64>::new();
        let cfg = SsmConfig::default();
        let p = SsmParams::init(&mut store, "s", 8, &cfg, &Rng::new(1)).unwrap();
        assert_eq!(p.dt_rank, 1);
        assert!(store.get(p.a_log).data().iter().all(|&v| -v.exp() < 0.0));
        assert_eq!(store.get(p.a_log).get(&[3, 4]), 5.0f64.ln());
        for &bias in store.get(p.dt_bias).data() {
            let dt = crate::numerics::kernels::softplus(bias);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt), "dt = {dt}");
        }
        assert_eq!(store.num_scalars(), SsmParams::count(8, &cfg));
    }

    #[test]
    fn dt_rank_rule() {
        assert_eq!(dt_rank(1), 1);
        assert_eq!(dt_rank(16), 1);
        assert_eq!(dt_rank(17), 2);
        assert_eq!(dt_rank(184), 12);
    }
}
