//! Forward throughput of the grouped layer against the full-width
//! four-direction layer at equal channel count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FullScanLayer, GroupMambaLayer, LayerConfig};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
    pub layer: LayerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 64,
            height: 14,
            width: 14,
            batch: 8,
            warmup: 3,
            reps: 5,
            seed: 0,
            layer: LayerConfig::default(),
        }
    }
}

/// Wall-clock measurements of one layer variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSide {
    pub params: usize,
    /// Seconds per forward pass, one entry per repetition.
    pub times_s: Vec<f64>,
    pub median_s: f64,
    pub samples_per_s: f64,
    /// `(max − min) / median` over repetitions.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub grouped: BenchSide,
    pub full: BenchSide,
    /// Grouped over full median throughput.
    pub throughput_ratio: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn measure(
    store: &ParamStore<f32>,
    input: &Tensor<f32>,
    cfg: &BenchConfig,
    f: impl Fn(&mut Graph<f32>, &ParamStore<f32>, Var) -> Result<Var>,
) -> Result<BenchSide> {
    let run = || -> Result<f64> {
        let start = Instant::now();
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let y = f(&mut g, store, x)?;
        std::hint::black_box(g.value(y));
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let times_s = (0..cfg.reps).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let median_s = median(&times_s);
    let (lo, hi) = times_s
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    Ok(BenchSide {
        params: store.num_scalars(),
        samples_per_s: cfg.batch as f64 / median_s,
        spread: (hi - lo) / median_s,
        median_s,
        times_s,
    })
}

pub fn bench_layers(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.warmup < 3 || cfg.reps < 3 {
        return Err(Error::config("bench needs at least 3 warmup runs and 3 repetitions"));
    }
    if cfg.batch == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::config("bench input dims must be positive"));
    }
    cfg.layer.validate()?;
    let rng = Rng::new(cfg.seed);
    let mut grouped_store = ParamStore::new();
    let grouped = GroupMambaLayer::init(&mut grouped_store, "grouped", cfg.channels, &cfg.layer, &rng)?;
    let mut full_store = ParamStore::new();
    let full = FullScanLayer::init(&mut full_store, "full", cfg.channels, &cfg.layer, &rng)?;

    let mut r = rng.fork_named("input");
    let input = Tensor::from_fn(&[cfg.batch, cfg.height, cfg.width, cfg.channels], |_| r.normal() as f32);
    let grouped = measure(&grouped_store, &input, cfg, |g, s, x| grouped.forward(g, s, x))?;
    let full = measure(&full_store, &input, cfg, |g, s, x| full.forward(g, s, x))?;
    Ok(BenchReport {
        config: cfg.clone(),
        throughput_ratio: grouped.samples_per_s / full.samples_per_s,
        grouped,
        full,
    })
}
