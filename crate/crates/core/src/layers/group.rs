use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Unary, Var};
use crate::scalar::Scalar;
use crate::ssm::{s6_forward, SsmParams};

use super::blocks::{Ffn, LayerNorm, Linear, Vsss};
use super::cam::Cam;
use super::direction::{scan_permutation, ScanDirection};
use super::{CamSource, LayerConfig};

/// Modulated group Mamba layer on a `(B, H, W, C)` map:
///
/// ```text
/// X_GM  = concat_g VSSS_g(scan_g(X_in[group g]))
/// X_CAM = X_GM ⊙ affinity(X_in)
/// X_out = X_in + FFN(LN(X_CAM))
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMambaLayer {
    pub channels: usize,
    pub group_dim: usize,
    pub directions: Vec<ScanDirection>,
    pub groups: Vec<Vsss>,
    pub cam: Option<Cam>,
    pub cam_source: CamSource,
    pub norm: LayerNorm,
    pub ffn: Ffn,
}

/// Intermediate nodes of one layer application.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub x_gm: Var,
    pub affinity: Option<Var>,
    pub x_cam: Var,
    pub out: Var,
}

fn check_groups(channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "{channels} channels cannot be split into {groups} groups"
        )));
    }
    Ok(channels / groups)
}

impl GroupMambaLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &LayerConfig,
        rng: &Rng,
    ) -> Result<Self> {
        let group_dim = check_groups(channels, cfg.groups)?;
        let directions: Vec<_> = (0..cfg.groups).map(ScanDirection::for_group).collect();
        let groups = directions
            .iter()
            .enumerate()
            .map(|(i, d)| Vsss::init(store, &format!("{prefix}.group{i}_{}", d.name()), group_dim, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(GroupMambaLayer {
            channels,
            group_dim,
            directions,
            groups,
            cam: cfg
                .cam
                .then(|| Cam::init(store, &format!("{prefix}.cam"), channels, cfg.cam_reduction, rng)),
            cam_source: cfg.cam_source,
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), channels, cfg.ln_eps),
            ffn: Ffn::init(store, &format!("{prefix}.ffn"), channels, cfg.ffn_ratio, rng),
        })
    }

    pub fn count(channels: usize, cfg: &LayerConfig) -> Result<usize> {
        let cg = check_groups(channels, cfg.groups)?;
        Ok(cfg.groups * Vsss::count(cg, cfg)
            + if cfg.cam { Cam::count(channels, cfg.cam_reduction) } else { 0 }
            + LayerNorm::count(channels)
            + Ffn::count(channels, cfg.ffn_ratio))
    }

    /// Multiply-accumulates per sample on an `h×w` map.
    pub fn macs(channels: usize, cfg: &LayerConfig, h: usize, w: usize) -> Result<u64> {
        let cg = check_groups(channels, cfg.groups)?;
        let tokens = h * w;
        Ok(cfg.groups as u64 * Vsss::macs(cg, cfg, tokens)
            + if cfg.cam { Cam::macs(channels, cfg.cam_reduction) } else { 0 }
            + Ffn::macs(channels, cfg.ffn_ratio, tokens))
    }

    /// Grouped operator alone: split channels, scan each group in its own
    /// direction, restore grid order and concatenate.
    pub fn grouped<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [b, h, w, c] = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "layer has {} channels, input has {c}",
                self.channels
            )));
        }
        let seq = g.reshape(x, &[b, h * w, c])?;
        let mut parts = Vec::with_capacity(self.groups.len());
        for (i, (block, &dir)) in self.groups.iter().zip(&self.directions).enumerate() {
            let perm = scan_permutation(dir, h, w);
            let part = g.slice_last(seq, i * self.group_dim, self.group_dim)?;
            let part = g.gather_tokens(part, perm.forward.clone())?;
            let part = block.forward(g, store, part)?;
            parts.push(g.gather_tokens(part, perm.inverse.clone())?);
        }
        let cat = g.concat_last(&parts)?;
        g.reshape(cat, &[b, h, w, c])
    }

    /// Full layer. `affinity` replaces the computed channel weights when given.
    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        affinity: Option<Var>,
    ) -> Result<LayerTrace> {
        let x_gm = self.grouped(g, store, x)?;
        let affinity = match (affinity, &self.cam) {
            (Some(a), _) => Some(a),
            (None, Some(cam)) => {
                let src = match self.cam_source {
                    CamSource::Input => x,
                    CamSource::Grouped => x_gm,
                };
                Some(cam.affinity(g, store, src)?)
            }
            (None, None) => None,
        };
        let x_cam = match affinity {
            Some(a) => g.channel_scale(x_gm, a)?,
            None => x_gm,
        };
        let h = self.norm.forward(g, store, x_cam)?;
        let h = self.ffn.forward(g, store, h)?;
        let out = g.add(x, h)?;
        Ok(LayerTrace {
            x_gm,
            affinity,
            x_cam,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, None)?.out)
    }
}

/// Reference layer for the grouping comparison: one Mamba mixer on all `C`
/// channels that scans the map in all four directions with separate SSM
/// parameters per direction and sums the results, followed by the same
/// residual FFN stages as the grouped layer. No channel modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct FullScanLayer {
    pub channels: usize,
    pub d_inner: usize,
    pub norm1: LayerNorm,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: Vec<SsmParams>,
    pub out_proj: Linear,
    pub norm2: LayerNorm,
    pub inner_ffn: Ffn,
    pub norm: LayerNorm,
    pub ffn: Ffn,
}

impl FullScanLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &LayerConfig,
        rng: &Rng,
    ) -> Result<Self> {
        let de = cfg.expand * channels;
        let k = cfg.conv_kernel;
        let norm1 = LayerNorm::init(store, &format!("{prefix}.norm1"), channels, cfg.ln_eps);
        let in_proj = Linear::init(store, &format!("{prefix}.in_proj"), channels, 2 * de, false, rng);
        let mut w = Tensor::zeros(&[de, k]);
        let bound = 1.0 / (k as f64).sqrt();
        rng.fork_named(&format!("{prefix}.conv_w"))
            .fill_uniform(w.data_mut(), -bound, bound);
        let conv_w = store.add(format!("{prefix}.conv_w"), w, true);
        let conv_b = store.add(format!("{prefix}.conv_b"), Tensor::zeros(&[de]), false);
        let ssm = ScanDirection::ALL
            .iter()
            .map(|d| SsmParams::init(store, &format!("{prefix}.ssm_{}", d.name()), de, &cfg.ssm, rng))
            .collect::<Result<_>>()?;
        Ok(FullScanLayer {
            channels,
            d_inner: de,
            norm1,
            in_proj,
            conv_w,
            conv_b,
            ssm,
            out_proj: Linear::init(store, &format!("{prefix}.out_proj"), de, channels, false, rng),
            norm2: LayerNorm::init(store, &format!("{prefix}.norm2"), channels, cfg.ln_eps),
            inner_ffn: Ffn::init(store, &format!("{prefix}.inner_ffn"), channels, cfg.vsss_ffn_ratio, rng),
            norm: LayerNorm::init(store, &format!("{prefix}.norm"), channels, cfg.ln_eps),
            ffn: Ffn::init(store, &format!("{prefix}.ffn"), channels, cfg.ffn_ratio, rng),
        })
    }

    pub fn count(channels: usize, cfg: &LayerConfig) -> usize {
        let de = cfg.expand * channels;
        3 * LayerNorm::count(channels)
            + Linear::count(channels, 2 * de, false)
            + de * cfg.conv_kernel
            + de
            + 4 * SsmParams::count(de, &cfg.ssm)
            + Linear::count(de, channels, false)
            + Ffn::count(channels, cfg.vsss_ffn_ratio)
            + Ffn::count(channels, cfg.ffn_ratio)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [b, h, w, c] = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "layer has {} channels, input has {c}",
                self.channels
            )));
        }
        let seq = g.reshape(x, &[b, h * w, c])?;
        let n = self.norm1.forward(g, store, seq)?;
        let xz = self.in_proj.forward(g, store, n)?;
        let xs = g.slice_last(xz, 0, self.d_inner)?;
        let z = g.slice_last(xz, self.d_inner, self.d_inner)?;
        let cw = g.param(store, self.conv_w);
        let cb = g.param(store, self.conv_b);
        let mut acc: Option<Var> = None;
        for (ssm, &dir) in self.ssm.iter().zip(&ScanDirection::ALL) {
            let perm = scan_permutation(dir, h, w);
            let p = g.gather_tokens(xs, perm.forward.clone())?;
            let p = g.dwconv1d(p, cw, cb)?;
            let p = g.unary(p, Unary::Silu)?;
            let p = s6_forward(g, store, ssm, p)?;
            let p = g.gather_tokens(p, perm.inverse.clone())?;
            acc = Some(match acc {
                Some(a) => g.add(a, p)?,
                None => p,
            });
        }
        let gate = g.unary(z, Unary::Silu)?;
        let y = g.mul(acc.expect("four directions"), gate)?;
        let y = self.out_proj.forward(g, store, y)?;
        let z1 = g.add(seq, y)?;
        let hdn = self.norm2.forward(g, store, z1)?;
        let hdn = self.inner_ffn.forward(g, store, hdn)?;
        let z2 = g.add(z1, hdn)?;
        let hdn = self.norm.forward(g, store, z2)?;
        let hdn = self.ffn.forward(g, store, hdn)?;
        let out = g.add(z2, hdn)?;
        g.reshape(out, &[b, h, w, c])
    }
}
