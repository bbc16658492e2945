//! The hierarchical backbone: convolutional stem, four stages of modulated
//! group Mamba layers with strided-conv downsampling, and a linear head.

mod accounting;
mod checkpoint;
mod config;

pub use accounting::{count_flops, count_params, FlopCount, ParamBreakdown};
pub(crate) use checkpoint::Reader;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use config::{ModelConfig, PaperFigures};

use crate::error::{Error, Result};
use crate::layers::{GroupMambaLayer, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Unary, Var};
use crate::scalar::Scalar;

/// `k×k` convolution with bias, `w[k, k, in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        std: f64,
        rng: &Rng,
    ) -> Self {
        let mut w = Tensor::zeros(&[3, 3, cin, cout]);
        rng.fork_named(&format!("{prefix}.w"))
            .fill_trunc_normal(w.data_mut(), std);
        Conv2d {
            w: store.add(format!("{prefix}.w"), w, true),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]), false),
            kernel: 3,
            stride,
            pad: 1,
            cin,
            cout,
        }
    }

    pub fn count(cin: usize, cout: usize) -> usize {
        9 * cin * cout + cout
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
}

/// A built model: architecture handles plus the parameter values.
#[derive(Clone, Debug)]
pub struct GroupMambaModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub stem: Stem,
    pub stages: Vec<Vec<GroupMambaLayer>>,
    /// `downsamplers[i]` runs before stage `i + 1`.
    pub downsamplers: Vec<Conv2d>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

/// Nodes of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stages: Vec<Var>,
    pub logits: Var,
}

impl<T: Scalar> GroupMambaModel<T> {
    pub fn build(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let eps = config.layer.ln_eps;
        let c1 = config.stage_dims[0];
        let stem = Stem {
            conv1: Conv2d::init(s, "stem.conv1", config.in_channels, config.stem_mid_dim, 2, 0.02, rng),
            norm1: LayerNorm::init(s, "stem.norm1", config.stem_mid_dim, eps),
            conv2: Conv2d::init(s, "stem.conv2", config.stem_mid_dim, c1, 2, 0.02, rng),
            norm2: LayerNorm::init(s, "stem.norm2", c1, eps),
        };
        let mut stages = Vec::new();
        let mut downsamplers = Vec::new();
        for (i, (&dim, &depth)) in config.stage_dims.iter().zip(&config.stage_depths).enumerate() {
            if i > 0 {
                let prev = config.stage_dims[i - 1];
                downsamplers.push(Conv2d::init(s, &format!("down{i}"), prev, dim, 2, 0.02, rng));
            }
            let layers = (0..depth)
                .map(|j| GroupMambaLayer::init(s, &format!("stage{i}.layer{j}"), dim, &config.layer, rng))
                .collect::<Result<_>>()?;
            stages.push(layers);
        }
        let last = *config.stage_dims.last().expect("validated");
        let head_norm = LayerNorm::init(s, "head.norm", last, eps);
        let head = Linear::init(s, "head.fc", last, config.num_classes, true, rng);
        Ok(GroupMambaModel {
            config: config.clone(),
            store,
            stem,
            stages,
            downsamplers,
            head_norm,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Forward pass on `(B, H, W, in_channels)` images.
    pub fn forward_traced(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardTrace> {
        self.forward_traced_with(g, &self.store, images)
    }

    /// Forward pass reading parameters from `s`, which must share this
    /// model's layout (e.g. a perturbed copy of `self.store`).
    pub fn forward_traced_with(&self, g: &mut Graph<T>, s: &ParamStore<T>, images: Var) -> Result<ForwardTrace> {
        let [_, h, w, c] = g.value(images).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_resolution(h, w)?;
        let mut x = self.stem.conv1.forward(g, s, images)?;
        x = self.stem.norm1.forward(g, s, x)?;
        x = g.unary(x, Unary::Gelu)?;
        x = self.stem.conv2.forward(g, s, x)?;
        x = self.stem.norm2.forward(g, s, x)?;
        x = g.unary(x, Unary::Gelu)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, layers) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.downsamplers[i - 1].forward(g, s, x)?;
            }
            for layer in layers {
                x = layer.forward(g, s, x)?;
            }
            stages.push(x);
        }
        let pooled = g.mean_spatial(x)?;
        let pooled = self.head_norm.forward(g, s, pooled)?;
        let logits = self.head.forward(g, s, pooled)?;
        Ok(ForwardTrace { stages, logits })
    }

    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        Ok(self.forward_traced(g, images)?.logits)
    }

    pub fn forward_with(&self, g: &mut Graph<T>, s: &ParamStore<T>, images: Var) -> Result<Var> {
        Ok(self.forward_traced_with(g, s, images)?.logits)
    }

    /// Inference-only logits `(B, num_classes)`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
