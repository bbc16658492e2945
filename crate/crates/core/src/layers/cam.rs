use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Rng, Unary, Var};
use crate::scalar::Scalar;

use super::blocks::Linear;

/// Channel affinity modulation: `σ(W₂ δ(W₁ mean(x)))` with a bottleneck of
/// `C / r` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub fn cam_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl Cam {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &Rng,
    ) -> Self {
        let hidden = cam_hidden(channels, reduction);
        Cam {
            channels,
            hidden,
            fc1: Linear::init(store, &format!("{prefix}.fc1"), channels, hidden, true, rng),
            fc2: Linear::init(store, &format!("{prefix}.fc2"), hidden, channels, true, rng),
        }
    }

    pub fn count(channels: usize, reduction: usize) -> usize {
        let h = cam_hidden(channels, reduction);
        Linear::count(channels, h, true) + Linear::count(h, channels, true)
    }

    pub fn macs(channels: usize, reduction: usize) -> u64 {
        (2 * channels * cam_hidden(channels, reduction)) as u64
    }

    /// Per-sample channel weights in `(0, 1)`, shape `(B, C)`.
    pub fn affinity<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.mean_spatial(x)?;
        let h = self.fc1.forward(g, store, s)?;
        let h = g.unary(h, Unary::Relu)?;
        let h = self.fc2.forward(g, store, h)?;
        g.unary(h, Unary::Sigmoid)
    }
}
