use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub stem_mid_dim: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layer: LayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::micro()
    }
}

/// Reference sizes for the three published variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaperFigures {
    pub params: f64,
    /// Multiply-accumulates at 224².
    pub macs: f64,
}

impl ModelConfig {
    fn preset(name: &str, dims: [usize; 4], depths: [usize; 4], stem: usize, classes: usize) -> Self {
        ModelConfig {
            name: name.to_string(),
            stage_dims: dims.to_vec(),
            stage_depths: depths.to_vec(),
            stem_mid_dim: stem,
            in_channels: 3,
            num_classes: classes,
            layer: LayerConfig::default(),
        }
    }

    /// Desk-scale variant for 32² inputs and 10 classes.
    pub fn micro() -> Self {
        Self::preset("micro", [16, 32, 64, 128], [1, 1, 2, 1], 16, 10)
    }

    pub fn tiny() -> Self {
        Self::preset("tiny", [96, 192, 368, 760], [2, 2, 9, 2], 32, 1000)
    }

    pub fn small() -> Self {
        Self::preset("small", [96, 192, 384, 768], [2, 2, 20, 2], 64, 1000)
    }

    pub fn base() -> Self {
        Self::preset("base", [128, 256, 496, 1012], [2, 2, 20, 2], 64, 1000)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected micro, tiny, small or base)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn paper_figures(&self) -> Option<PaperFigures> {
        let (params, macs) = match self.name.as_str() {
            "tiny" => (23e6, 4.5e9),
            "small" => (34e6, 7.0e9),
            "base" => (57e6, 14e9),
            _ => return None,
        };
        Some(PaperFigures { params, macs })
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Input sides must be multiples of this.
    pub fn resolution_divisor(&self) -> usize {
        1 << (self.num_stages() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_depths.len() {
            return Err(Error::config(format!(
                "{} stage dims vs {} stage depths",
                self.stage_dims.len(),
                self.stage_depths.len()
            )));
        }
        if let Some(d) = self.stage_depths.iter().find(|&&d| d == 0) {
            return Err(Error::config(format!("stage depth {d} must be >= 1")));
        }
        let groups = self.layer.groups.max(1);
        if let Some(c) = self.stage_dims.iter().find(|&&c| c == 0 || c % groups != 0) {
            return Err(Error::config(format!(
                "stage width {c} is not a positive multiple of {groups} groups"
            )));
        }
        if self.stem_mid_dim == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("stem_mid_dim, in_channels and num_classes must be >= 1"));
        }
        self.layer.validate()
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let d = self.resolution_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::shape(format!("input {h}×{w} is not a multiple of {d}")));
        }
        Ok(())
    }
}
