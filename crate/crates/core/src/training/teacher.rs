use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, Normalization};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::model::{Conv2d, Reader};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Unary, Var};
use crate::scalar::Scalar;

use super::loss::argmax_rows;
use super::train::{predict, train, Classifier, EpochRecord, TrainConfig, TrainReport};

pub const TEACHER_MAGIC: &[u8; 4] = b"GMTL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Output channels of each 3×3 conv.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub ln_eps: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            widths: vec![32, 64, 64, 128, 128],
            strides: vec![1, 2, 1, 2, 2],
            in_channels: 3,
            num_classes: 10,
            ln_eps: 1e-5,
        }
    }
}

/// Plain CNN: `conv → LN → ReLU` blocks, global average pool, linear head.
#[derive(Clone, Debug)]
pub struct TeacherNet<T: Scalar> {
    pub config: TeacherConfig,
    pub store: ParamStore<T>,
    pub convs: Vec<Conv2d>,
    pub norms: Vec<LayerNorm>,
    pub head: Linear,
}

impl<T: Scalar> TeacherNet<T> {
    pub fn build(config: &TeacherConfig, rng: &Rng) -> Result<Self> {
        if config.widths.is_empty() || config.widths.len() != config.strides.len() {
            return Err(Error::config("teacher widths and strides must be non-empty and equal length"));
        }
        if config.widths.contains(&0) || config.strides.contains(&0) || config.num_classes == 0 {
            return Err(Error::config("teacher widths, strides and classes must be positive"));
        }
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = config.in_channels;
        for (i, (&w, &s)) in config.widths.iter().zip(&config.strides).enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            convs.push(Conv2d::init(&mut store, &format!("teacher.conv{i}"), cin, w, s, std, rng));
            norms.push(LayerNorm::init(&mut store, &format!("teacher.norm{i}"), w, config.ln_eps));
            cin = w;
        }
        let head = Linear::init(&mut store, "teacher.head", cin, config.num_classes, true, rng);
        Ok(TeacherNet {
            config: config.clone(),
            store,
            convs,
            norms,
            head,
        })
    }
}

impl<T: Scalar> Classifier<T> for TeacherNet<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = &self.store;
        let mut x = images;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(g, s, x)?;
            x = norm.forward(g, s, x)?;
            x = g.unary(x, Unary::Relu)?;
        }
        let pooled = g.mean_spatial(x)?;
        self.head.forward(g, s, pooled)
    }
}

/// Per-sample teacher logits in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogits {
    classes: usize,
    logits: Vec<f32>,
}

impl TeacherLogits {
    pub fn new(classes: usize, logits: Vec<f32>) -> Result<Self> {
        if classes == 0 || !logits.len().is_multiple_of(classes) {
            return Err(Error::shape(format!("{} logits for {classes} classes", logits.len())));
        }
        Ok(TeacherLogits { classes, logits })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let k = match t.shape() {
            [_, k] => *k,
            s => return Err(Error::shape(format!("teacher logits must be rank 2, got {s:?}"))),
        };
        Self::new(k, t.data().iter().map(|v| v.f64() as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.logits.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Hard teacher labels; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        let t = Tensor::new(&[self.len(), self.classes], self.logits.clone()).expect("validated shape");
        argmax_rows(&t).expect("rank 2")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.logits.len());
        out.extend_from_slice(TEACHER_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        for v in &self.logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != TEACHER_MAGIC {
            return Err(Error::format(0, "not a teacher-logits cache"));
        }
        let at = r.offset();
        let n = r.u64("sample count")?;
        let classes = r.u64("class count")?;
        if classes == 0 {
            return Err(Error::format(at + 8, "class count is zero"));
        }
        let total = n
            .checked_mul(classes)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| Error::format(at, "sample × class count overflows"))?;
        let body = r.take(total.checked_mul(4).ok_or_else(|| Error::format(at, "cache too large"))?, "logits")?;
        r.finish()?;
        let logits = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(TeacherLogits {
            classes: classes as usize,
            logits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub struct TrainedTeacher<T: Scalar> {
    pub net: TeacherNet<T>,
    pub report: TrainReport,
    /// Logits on the training set, in its order.
    pub cache: TeacherLogits,
}

/// Trains a teacher with plain cross-entropy, then exports its logits on
/// `train` (unaugmented).
pub fn train_teacher<T, F>(
    config: &TeacherConfig,
    train_set: &[LabeledImage],
    eval: Option<&[LabeledImage]>,
    norm: &Normalization,
    cfg: &TrainConfig,
    on_epoch: F,
) -> Result<TrainedTeacher<T>>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &TeacherNet<T>) -> Result<()>,
{
    let mut net = TeacherNet::build(config, &Rng::new(cfg.seed).fork_named("teacher"))?;
    let report = train(&mut net, train_set, eval, None, norm, cfg, on_epoch)?;
    let logits = predict(&net, train_set, norm, cfg.eval_batch_size, cfg.threads)?;
    Ok(TrainedTeacher {
        net,
        report,
        cache: TeacherLogits::from_tensor(&logits)?,
    })
}
