use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Unary, Var};
use crate::scalar::Scalar;
use crate::ssm::{s6_forward, SsmParams};

use super::LayerConfig;

/// Weight `[in, out]` and optional bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &Rng,
    ) -> Self {
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        rng.fork_named(&format!("{prefix}.w"))
            .fill_trunc_normal(w.data_mut(), 0.02);
        Linear {
            w: store.add(format!("{prefix}.w"), w, true),
            b: bias.then(|| store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]), false)),
            fan_in,
            fan_out,
        }
    }

    pub fn count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|id| g.param(store, id));
        g.linear(x, w, b)
    }
}

/// Per-channel LayerNorm over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), false),
            eps,
        }
    }

    pub fn count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// `W₂·GELU(W₁x + b₁) + b₂`
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, ratio: usize, rng: &Rng) -> Self {
        Ffn {
            fc1: Linear::init(store, &format!("{prefix}.fc1"), dim, dim * ratio, true, rng),
            fc2: Linear::init(store, &format!("{prefix}.fc2"), dim * ratio, dim, true, rng),
        }
    }

    pub fn count(dim: usize, ratio: usize) -> usize {
        Linear::count(dim, dim * ratio, true) + Linear::count(dim * ratio, dim, true)
    }

    pub fn macs(dim: usize, ratio: usize, tokens: usize) -> u64 {
        (2 * tokens * dim * dim * ratio) as u64
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.unary(h, Unary::Gelu)?;
        self.fc2.forward(g, store, h)
    }
}

/// Gated Mamba mixer on a `(B, L, D)` sequence in scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mamba {
    pub dim: usize,
    pub d_inner: usize,
    /// `D → 2·D_e`, content then gate.
    pub in_proj: Linear,
    /// `[D_e, k]`
    pub conv_w: ParamId,
    /// `[D_e]`
    pub conv_b: ParamId,
    pub ssm: SsmParams,
    pub out_proj: Linear,
}

impl Mamba {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        cfg: &LayerConfig,
        rng: &Rng,
    ) -> Result<Self> {
        let de = cfg.expand * dim;
        let k = cfg.conv_kernel;
        let in_proj = Linear::init(store, &format!("{prefix}.in_proj"), dim, 2 * de, false, rng);
        let mut conv_w = Tensor::zeros(&[de, k]);
        let bound = 1.0 / (k as f64).sqrt();
        rng.fork_named(&format!("{prefix}.conv_w"))
            .fill_uniform(conv_w.data_mut(), -bound, bound);
        let conv_w = store.add(format!("{prefix}.conv_w"), conv_w, true);
        let conv_b = store.add(format!("{prefix}.conv_b"), Tensor::zeros(&[de]), false);
        let ssm = SsmParams::init(store, &format!("{prefix}.ssm"), de, &cfg.ssm, rng)?;
        let out_proj = Linear::init(store, &format!("{prefix}.out_proj"), de, dim, false, rng);
        Ok(Mamba {
            dim,
            d_inner: de,
            in_proj,
            conv_w,
            conv_b,
            ssm,
            out_proj,
        })
    }

    pub fn count(dim: usize, cfg: &LayerConfig) -> usize {
        let de = cfg.expand * dim;
        Linear::count(dim, 2 * de, false)
            + de * cfg.conv_kernel
            + de
            + SsmParams::count(de, &cfg.ssm)
            + Linear::count(de, dim, false)
    }

    pub fn macs(dim: usize, cfg: &LayerConfig, tokens: usize) -> u64 {
        let de = cfg.expand * dim;
        (tokens * (dim * 2 * de + de * cfg.conv_kernel + de * dim)) as u64
            + SsmParams::macs(de, &cfg.ssm, tokens)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let xz = self.in_proj.forward(g, store, x)?;
        let xs = g.slice_last(xz, 0, self.d_inner)?;
        let z = g.slice_last(xz, self.d_inner, self.d_inner)?;
        let w = g.param(store, self.conv_w);
        let b = g.param(store, self.conv_b);
        let xs = g.dwconv1d(xs, w, b)?;
        let xs = g.unary(xs, Unary::Silu)?;
        let y = s6_forward(g, store, &self.ssm, xs)?;
        let gate = g.unary(z, Unary::Silu)?;
        let y = g.mul(y, gate)?;
        self.out_proj.forward(g, store, y)
    }
}

/// Visual single selective scanning block:
/// `z' = z + Mamba(LN(z))`, `out = z' + FFN(LN(z'))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vsss {
    pub dim: usize,
    pub norm1: LayerNorm,
    pub mamba: Mamba,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl Vsss {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        cfg: &LayerConfig,
        rng: &Rng,
    ) -> Result<Self> {
        Ok(Vsss {
            dim,
            norm1: LayerNorm::init(store, &format!("{prefix}.norm1"), dim, cfg.ln_eps),
            mamba: Mamba::init(store, &format!("{prefix}.mamba"), dim, cfg, rng)?,
            norm2: LayerNorm::init(store, &format!("{prefix}.norm2"), dim, cfg.ln_eps),
            ffn: Ffn::init(store, &format!("{prefix}.ffn"), dim, cfg.vsss_ffn_ratio, rng),
        })
    }

    pub fn count(dim: usize, cfg: &LayerConfig) -> usize {
        2 * LayerNorm::count(dim) + Mamba::count(dim, cfg) + Ffn::count(dim, cfg.vsss_ffn_ratio)
    }

    pub fn macs(dim: usize, cfg: &LayerConfig, tokens: usize) -> u64 {
        Mamba::macs(dim, cfg, tokens) + Ffn::macs(dim, cfg.vsss_ffn_ratio, tokens)
    }

    /// `z` is a `(B, L, dim)` sequence.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let d = g.value(z).dims3()?[2];
        if d != self.dim {
            return Err(Error::shape(format!("vsss block has {} channels, input has {d}", self.dim)));
        }
        let h = self.norm1.forward(g, store, z)?;
        let h = self.mamba.forward(g, store, h)?;
        let z = g.add(z, h)?;
        let h = self.norm2.forward(g, store, z)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(z, h)
    }
}
