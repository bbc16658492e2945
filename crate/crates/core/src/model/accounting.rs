use serde::Serialize;

use crate::error::Result;
use crate::layers::{GroupMambaLayer, LayerNorm, Linear};

use super::{Conv2d, ModelConfig};

/// Closed-form parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub stem: usize,
    /// Per stage, including the downsampler that feeds it.
    pub stages: Vec<usize>,
    pub head: usize,
    pub total: usize,
}

pub fn count_params(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let dims = &config.stage_dims;
    let stem = Conv2d::count(config.in_channels, config.stem_mid_dim)
        + LayerNorm::count(config.stem_mid_dim)
        + Conv2d::count(config.stem_mid_dim, dims[0])
        + LayerNorm::count(dims[0]);
    let mut stages = Vec::with_capacity(dims.len());
    for (i, (&c, &depth)) in dims.iter().zip(&config.stage_depths).enumerate() {
        let down = if i > 0 { Conv2d::count(dims[i - 1], c) } else { 0 };
        stages.push(down + depth * GroupMambaLayer::count(c, &config.layer)?);
    }
    let last = *dims.last().expect("validated");
    let head = LayerNorm::count(last) + Linear::count(last, config.num_classes, true);
    let total = stem + stages.iter().sum::<usize>() + head;
    Ok(ParamBreakdown {
        stem,
        stages,
        head,
        total,
    })
}

/// Analytic multiply-accumulate count for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub stem_macs: u64,
    pub stage_macs: Vec<u64>,
    pub head_macs: u64,
    pub macs: u64,
    /// `2 × macs`.
    pub flops: u64,
}

pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopCount> {
    config.validate()?;
    config.check_resolution(h, w)?;
    let conv = |oh: usize, ow: usize, cin: usize, cout: usize| (oh * ow * 9 * cin * cout) as u64;
    let dims = &config.stage_dims;
    let stem_macs = conv(h / 2, w / 2, config.in_channels, config.stem_mid_dim)
        + conv(h / 4, w / 4, config.stem_mid_dim, dims[0]);
    let mut stage_macs = Vec::with_capacity(dims.len());
    for (i, (&c, &depth)) in dims.iter().zip(&config.stage_depths).enumerate() {
        let (sh, sw) = (h >> (i + 2), w >> (i + 2));
        let down = if i > 0 { conv(sh, sw, dims[i - 1], c) } else { 0 };
        stage_macs.push(down + depth as u64 * GroupMambaLayer::macs(c, &config.layer, sh, sw)?);
    }
    let head_macs = (dims.last().expect("validated") * config.num_classes) as u64;
    let macs = stem_macs + stage_macs.iter().sum::<u64>() + head_macs;
    Ok(FlopCount {
        stem_macs,
        stage_macs,
        head_macs,
        macs,
        flops: 2 * macs,
    })
}
