//! Composite blocks: scan orders, Mamba/VSSS blocks, channel affinity
//! modulation and the modulated group Mamba layer.

mod blocks;
mod cam;
mod direction;
mod group;

use serde::{Deserialize, Serialize};

pub use blocks::{Ffn, LayerNorm, Linear, Mamba, Vsss};
pub use cam::{cam_hidden, Cam};
pub use direction::{scan_permutation, ScanDirection, ScanPermutation};
pub use group::{FullScanLayer, GroupMambaLayer, LayerTrace};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::ssm::SsmConfig;

/// Which tensor the channel affinity is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    /// The layer input.
    #[default]
    Input,
    /// The grouped operator's output.
    Grouped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub ssm: SsmConfig,
    /// Mamba inner width as a multiple of the block width.
    pub expand: usize,
    pub conv_kernel: usize,
    /// Hidden ratio of the FFN inside each VSSS block.
    pub vsss_ffn_ratio: usize,
    /// Hidden ratio of the layer's outer FFN.
    pub ffn_ratio: usize,
    pub groups: usize,
    pub cam: bool,
    pub cam_reduction: usize,
    pub cam_source: CamSource,
    pub ln_eps: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            ssm: SsmConfig::default(),
            expand: 2,
            conv_kernel: 3,
            vsss_ffn_ratio: 2,
            ffn_ratio: 2,
            groups: 4,
            cam: true,
            cam_reduction: 4,
            cam_source: CamSource::Input,
            ln_eps: 1e-5,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("expand", self.expand),
            ("vsss_ffn_ratio", self.vsss_ffn_ratio),
            ("ffn_ratio", self.ffn_ratio),
            ("groups", self.groups),
            ("cam_reduction", self.cam_reduction),
            ("ssm.d_state", self.ssm.d_state),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }
}

fn eval<T: Scalar>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}

/// VSSS block on a `(B, L, D)` sequence.
pub fn vsss_forward<T: Scalar>(store: &ParamStore<T>, block: &Vsss, z: &Tensor<T>) -> Result<Tensor<T>> {
    eval(|g| {
        let z = g.constant(z.clone());
        block.forward(g, store, z)
    })
}

/// Grouped four-direction operator on a `(B, H, W, C)` map.
pub fn grouped_mamba<T: Scalar>(
    store: &ParamStore<T>,
    layer: &GroupMambaLayer,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    eval(|g| {
        let x = g.constant(x.clone());
        layer.grouped(g, store, x)
    })
}

/// Per-sample channel means `(B, C)` of a `(B, H, W, C)` map.
pub fn channel_stat<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims4()?;
    eval(|g| {
        let x = g.constant(x.clone());
        g.mean_spatial(x)
    })
}

pub fn affinity<T: Scalar>(store: &ParamStore<T>, cam: &Cam, x: &Tensor<T>) -> Result<Tensor<T>> {
    eval(|g| {
        let x = g.constant(x.clone());
        cam.affinity(g, store, x)
    })
}

pub fn cam_modulate<T: Scalar>(x_gm: &Tensor<T>, aff: &Tensor<T>) -> Result<Tensor<T>> {
    eval(|g| {
        let x = g.constant(x_gm.clone());
        let a = g.constant(aff.clone());
        g.channel_scale(x, a)
    })
}

pub fn modulated_group_mamba<T: Scalar>(
    store: &ParamStore<T>,
    layer: &GroupMambaLayer,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    eval(|g| {
        let x = g.constant(x.clone());
        layer.forward(g, store, x)
    })
}
