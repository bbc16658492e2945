//! Labeled images: the CIFAR-10 binary codec, a synthetic generator,
//! deterministic splitting and per-channel normalization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// `H×W×3` pixels in `[0, 1]`, channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub label: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Decodes CIFAR-10 binary records: one label byte, then the R, G and B
/// planes, each 32×32 row-major. Ids start at `first_id`.
pub fn decode_cifar10(bytes: &[u8], first_id: u64) -> Result<Vec<LabeledImage>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            whole as u64,
            format!(
                "length {} is not a multiple of {CIFAR_RECORD}; trailing {} bytes",
                bytes.len(),
                bytes.len() - whole
            ),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::format(
                    (i * CIFAR_RECORD) as u64,
                    format!("label {label} out of range"),
                ));
            }
            let mut pixels = vec![0.0f32; 3 * plane];
            for c in 0..3 {
                for p in 0..plane {
                    pixels[p * 3 + c] = rec[1 + c * plane + p] as f32 / 255.0;
                }
            }
            Ok(LabeledImage {
                id: first_id + i as u64,
                label,
                height: CIFAR_SIDE,
                width: CIFAR_SIDE,
                pixels,
            })
        })
        .collect()
}

/// Inverse of [`decode_cifar10`]; pixels are rounded to the nearest byte.
pub fn encode_cifar10(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for img in images {
        if img.height != CIFAR_SIDE || img.width != CIFAR_SIDE || img.label >= CIFAR_CLASSES {
            return Err(Error::shape(format!(
                "image {} ({}×{}, label {}) is not a CIFAR-10 record",
                img.id, img.height, img.width, img.label
            )));
        }
        out.push(img.label as u8);
        for c in 0..3 {
            for p in 0..plane {
                out.push((img.pixels[p * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_cifar10(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar10(&bytes, 0)
}

/// Reads the training batches (`data_batch_1.bin` … `data_batch_5.bin`) and
/// the test batch (`test_batch.bin`) of a CIFAR-10 binary directory.
pub fn read_cifar10_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        train.extend(decode_cifar10(&bytes, train.len() as u64)?);
    }
    let path = dir.join("test_batch.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let test = decode_cifar10(&bytes, train.len() as u64)?;
    Ok((train, test))
}

/// Manifest of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub size: usize,
}

/// Class-conditional images: a per-class base color, a per-class blob
/// position and color, and per-sample noise. Class means differ in every
/// channel, so a nearest-mean classifier on channel means separates them.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<LabeledImage>> {
    let SyntheticSpec { seed, n, classes, size } = *spec;
    if size == 0 || size % 32 != 0 {
        return Err(Error::config(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    if classes == 0 {
        return Err(Error::config("synthetic data needs at least one class"));
    }
    let root = Rng::new(seed);
    let mut proto = root.fork_named("classes");
    struct Proto {
        base: [f64; 3],
        blob: [f64; 3],
        cy: f64,
        cx: f64,
    }
    let protos: Vec<Proto> = (0..classes)
        .map(|_| Proto {
            base: [0.0; 3].map(|_| proto.uniform_range(0.15, 0.85)),
            blob: [0.0; 3].map(|_| proto.uniform_range(0.0, 1.0)),
            cy: proto.uniform_range(0.25, 0.75),
            cx: proto.uniform_range(0.25, 0.75),
        })
        .collect();
    let mut rng = root.fork_named("samples");
    let s = size as f64;
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let p = &protos[label];
            let tint = [0.0; 3].map(|_| rng.normal() * 0.04);
            let (cy, cx) = (
                (p.cy + rng.normal() * 0.05) * s,
                (p.cx + rng.normal() * 0.05) * s,
            );
            let radius = s * 0.18;
            let mut pixels = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let w = (-d2 / (2.0 * radius * radius)).exp();
                    for c in 0..3 {
                        let v = (1.0 - w) * (p.base[c] + tint[c]) + w * p.blob[c] + rng.normal() * 0.05;
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            LabeledImage {
                id: i as u64,
                label,
                height: size,
                width: size,
                pixels,
            }
        })
        .collect())
}

/// Deterministic shuffle followed by a split: the first
/// `round(train_fraction · n)` shuffled items train, the rest evaluate.
pub fn split_shuffle(
    data: &[LabeledImage],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let order = Rng::new(seed).fork_named("split").permutation(data.len());
    let cut = (train_fraction * data.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    /// Channel statistics of `images`.
    pub fn fit(images: &[LabeledImage]) -> Normalization {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.pixels.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
            }
            count += img.pixels.len() / 3;
        }
        if count == 0 {
            return Self::IDENTITY;
        }
        let mean = sum.map(|s| s / count as f64);
        let mut std = [1.0f32; 3];
        for c in 0..3 {
            let var = sq[c] / count as f64 - mean[c] * mean[c];
            std[c] = var.max(1e-12).sqrt().max(1e-3) as f32;
        }
        Normalization {
            mean: mean.map(|m| m as f32),
            std,
        }
    }

    pub fn normalize(&self, pixels: &[f32]) -> Vec<f32> {
        pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % 3]) / self.std[i % 3])
            .collect()
    }

    pub fn denormalize(&self, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % 3] + self.mean[i % 3])
            .collect()
    }
}

/// Stacks normalized images into `(B, H, W, 3)`; `flip[i]` mirrors image `i`
/// horizontally.
pub fn batch_tensor<T: Scalar>(
    images: &[&LabeledImage],
    norm: &Normalization,
    flip: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("cannot batch zero images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for (i, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape(format!(
                "image {} is {}×{}, batch is {h}×{w}",
                img.id, img.height, img.width
            )));
        }
        let mirrored = flip.is_some_and(|f| f[i]);
        for y in 0..h {
            for x in 0..w {
                let sx = if mirrored { w - 1 - x } else { x };
                let px = &img.pixels[(y * w + sx) * 3..(y * w + sx) * 3 + 3];
                for c in 0..3 {
                    data.push(T::of(((px[c] - norm.mean[c]) / norm.std[c]) as f64));
                }
            }
        }
    }
    Tensor::new(&[images.len(), h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_record() {
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 7;
        let imgs = decode_cifar10(&rec, 0).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].label, 7);
        assert!(imgs[0].pixels.iter().all(|&p| p == 1.0));
        assert!(decode_cifar10(&[], 0).unwrap().is_empty());
    }

    #[test]
    fn plane_order() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[1 + 5] = 255; // R plane, pixel 5
        rec[1 + 1024 + 5] = 51; // G plane
        rec[1 + 2048] = 102; // B plane, pixel 0
        let img = &decode_cifar10(&rec, 0).unwrap()[0];
        assert_eq!(img.pixels[5 * 3], 1.0);
        assert_eq!(img.pixels[5 * 3 + 1], 0.2);
        assert_eq!(img.pixels[2], 0.4);
    }

    #[test]
    fn malformed_input_names_offsets() {
        let mut two = vec![0u8; 2 * CIFAR_RECORD];
        two[CIFAR_RECORD] = 10;
        assert!(matches!(
            decode_cifar10(&two, 0),
            Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64
        ));
        assert!(matches!(
            decode_cifar10(&two[..CIFAR_RECORD + 5], 0),
            Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64
        ));
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let spec = |size| SyntheticSpec { seed: 0, n: 2, classes: 2, size };
        assert!(synthesize(&spec(24)).is_err());
        assert!(synthesize(&spec(0)).is_err());
        assert_eq!(synthesize(&SyntheticSpec { n: 0, ..spec(32) }).unwrap().len(), 0);
    }
}
