//! `groupmamba` command-line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use groupmamba::bench::{bench_layers, BenchConfig};
use groupmamba::data::{read_cifar10_dir, split_shuffle, synthesize, LabeledImage, Normalization, SyntheticSpec};
use groupmamba::model::{count_flops, count_params, load_checkpoint, save_checkpoint, GroupMambaModel, ModelConfig};
use groupmamba::numerics::Rng;
use groupmamba::training::{
    evaluate, train, train_teacher, AdamWConfig, EpochRecord, TeacherConfig, TeacherLogits, TrainConfig,
};
use groupmamba::verify::{run_suite, Fault, VerifyOptions};

#[derive(Parser)]
#[command(name = "groupmamba", version, about = "Grouped selective-scan vision backbone: accounting, oracles, training, benchmarks")]
struct Cli {
    /// Machine-readable output
    #[arg(long, global = true)]
    json: bool,

    #[arg(long, global = true, env = "GROUPMAMBA_THREADS", default_value_t = 1)]
    threads: usize,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage and total parameter counts
    Params(VariantArgs),
    /// Analytic multiply-accumulate and FLOP counts
    Flops {
        #[command(flatten)]
        variant: VariantArgs,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Run the oracle suite
    Verify {
        /// Inject a fault to show the targeted check fails
        #[arg(long = "break", value_enum)]
        fault: Option<FaultArg>,
        #[arg(long, default_value_t = 100)]
        scan_cases: usize,
    },
    /// Train a model
    Train {
        #[command(flatten)]
        variant: VariantArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        opt: OptArgs,
        /// Teacher-logits cache; enables the distilled objective
        #[arg(long)]
        distill: Option<PathBuf>,
        /// Weight of the ground-truth term under distillation
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Directory for report.jsonl and checkpoints
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the convolutional teacher and export its logits cache
    Teacher {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        opt: OptArgs,
        /// Cache file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Grouped vs full-width layer forward throughput
    Bench {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 14)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Summarize a checkpoint file
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Zoh,
    Perm,
    Grad,
}

#[derive(Args)]
struct VariantArgs {
    /// micro, tiny, small, base, or a path to a model config JSON file
    #[arg(long, default_value = "micro")]
    variant: String,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 binary directory (data_batch_*.bin, test_batch.bin)
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Training images taken from the CIFAR-10 training batches
    #[arg(long, default_value_t = 5000)]
    subset: usize,
    /// Held-out images taken from the CIFAR-10 test batch
    #[arg(long, default_value_t = 1000)]
    eval_size: usize,
    /// Use this many synthetic images instead of CIFAR-10
    #[arg(long)]
    synthetic: Option<usize>,
    /// Held-out fraction of the synthetic set
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
}

#[derive(Args)]
struct OptArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup_fraction: f64,
    /// Disable gradient-norm clipping
    #[arg(long)]
    no_clip: bool,
    /// Disable random horizontal flips
    #[arg(long)]
    no_flip: bool,
}

impl OptArgs {
    fn config(&self, seed: u64, threads: usize, alpha: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_fraction: self.warmup_fraction,
            label_smoothing: self.label_smoothing,
            alpha,
            flip: !self.no_flip,
            optimizer: AdamWConfig {
                weight_decay: self.weight_decay,
                clip_norm: (!self.no_clip).then_some(5.0),
                ..AdamWConfig::default()
            },
            threads,
            seed,
            ..TrainConfig::default()
        }
    }
}

struct Dataset {
    train: Vec<LabeledImage>,
    eval: Vec<LabeledImage>,
    norm: Normalization,
    source: Value,
}

impl DataArgs {
    fn load(&self, seed: u64, classes: usize) -> Result<Dataset> {
        if let Some(n) = self.synthetic {
            let spec = SyntheticSpec {
                seed,
                n,
                classes,
                size: 32,
            };
            let all = synthesize(&spec)?;
            let (train, eval) = split_shuffle(&all, 1.0 - self.eval_fraction, seed)?;
            let norm = Normalization::fit(&train);
            return Ok(Dataset {
                train,
                eval,
                norm,
                source: json!({ "synthetic": spec, "eval_fraction": self.eval_fraction }),
            });
        }
        let Some(dir) = &self.data else {
            bail!("either --data <cifar-10 dir> or --synthetic <n> is required");
        };
        let (mut train, mut eval) = read_cifar10_dir(dir)?;
        train.truncate(self.subset);
        eval.truncate(self.eval_size);
        Ok(Dataset {
            train,
            eval,
            norm: Normalization::CIFAR10,
            source: json!({ "cifar10": dir, "subset": self.subset, "eval_size": self.eval_size }),
        })
    }
}

fn resolve_variant(v: &VariantArgs) -> Result<ModelConfig> {
    let mut cfg = match ModelConfig::by_name(&v.variant) {
        Ok(cfg) => cfg,
        Err(_) if Path::new(&v.variant).is_file() => {
            let text = fs::read_to_string(&v.variant).with_context(|| format!("reading {}", v.variant))?;
            ModelConfig::from_json(&text)?
        }
        Err(e) => return Err(e).context("unknown variant and no such config file"),
    };
    if let Some(k) = v.num_classes {
        cfg.num_classes = k;
    }
    if let Some(g) = v.groups {
        cfg.layer.groups = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints canonical JSON: sorted keys, no whitespace.
fn emit(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("JSON values serialize"));
}

fn resolved(cli: &Cli, command: &str, extra: Value) -> Value {
    let mut v = json!({ "command": command, "seed": cli.seed, "threads": cli.threads, "json": cli.json });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want) / want
}

fn cmd_params(cli: &Cli, v: &VariantArgs) -> Result<bool> {
    let cfg = resolve_variant(v)?;
    emit(&resolved(cli, "params", json!({ "model": cfg })));
    let p = count_params(&cfg)?;
    let paper = cfg.paper_figures().map(|f| f.params);
    if cli.json {
        emit(&json!({
            "variant": cfg.name,
            "stem": p.stem,
            "stages": p.stages,
            "head": p.head,
            "total": p.total,
            "reference_total": paper,
            "relative_deviation": paper.map(|r| rel(p.total as f64, r)),
        }));
        return Ok(true);
    }
    println!("{:<10} {:>14}", "part", "params");
    println!("{:<10} {:>14}", "stem", p.stem);
    for (i, s) in p.stages.iter().enumerate() {
        println!("{:<10} {:>14}", format!("stage{i}"), s);
    }
    println!("{:<10} {:>14}", "head", p.head);
    println!("{:<10} {:>14}", "total", p.total);
    if let Some(r) = paper {
        println!("{:<10} {:>14.0}   deviation {:+.1}%", "reference", r, 100.0 * rel(p.total as f64, r));
    }
    Ok(true)
}

fn cmd_flops(cli: &Cli, v: &VariantArgs, resolution: usize) -> Result<bool> {
    let cfg = resolve_variant(v)?;
    emit(&resolved(cli, "flops", json!({ "model": cfg, "resolution": resolution })));
    let f = count_flops(&cfg, resolution, resolution)?;
    let paper = (resolution == 224).then(|| cfg.paper_figures().map(|f| f.macs)).flatten();
    if cli.json {
        emit(&json!({
            "variant": cfg.name,
            "resolution": resolution,
            "stem_macs": f.stem_macs,
            "stage_macs": f.stage_macs,
            "head_macs": f.head_macs,
            "macs": f.macs,
            "flops": f.flops,
            "reference_macs": paper,
            "relative_deviation": paper.map(|r| rel(f.macs as f64, r)),
        }));
        return Ok(true);
    }
    println!("{:<10} {:>16}", "part", "MACs");
    println!("{:<10} {:>16}", "stem", f.stem_macs);
    for (i, s) in f.stage_macs.iter().enumerate() {
        println!("{:<10} {:>16}", format!("stage{i}"), s);
    }
    println!("{:<10} {:>16}", "head", f.head_macs);
    println!("{:<10} {:>16}   ({:.3} G)", "total", f.macs, f.macs as f64 / 1e9);
    println!("{:<10} {:>16}", "flops", f.flops);
    if let Some(r) = paper {
        println!("{:<10} {:>16.0}   deviation {:+.1}%", "reference", r, 100.0 * rel(f.macs as f64, r));
    }
    Ok(true)
}

fn cmd_verify(cli: &Cli, fault: Option<FaultArg>, scan_cases: usize) -> Result<bool> {
    let opts = VerifyOptions {
        seed: cli.seed,
        fault: fault.map(|f| match f {
            FaultArg::Zoh => Fault::Zoh,
            FaultArg::Perm => Fault::Perm,
            FaultArg::Grad => Fault::Grad,
        }),
        scan_cases,
    };
    emit(&resolved(cli, "verify", json!({ "options": opts })));
    let results = run_suite(&opts, |r| {
        if cli.json {
            emit(&serde_json::to_value(r).expect("serializable"));
        } else {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            println!("{tag} {:<20} {:>7.2}s  {}", r.name, r.seconds, r.detail);
        }
        let _ = std::io::stdout().flush();
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if !cli.json {
        println!("{} checks, {failed} failed", results.len());
    }
    Ok(failed == 0)
}

fn append_line(file: &mut Option<(PathBuf, fs::File)>, r: &EpochRecord) -> groupmamba::Result<()> {
    if let Some((path, f)) = file {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|source| groupmamba::Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn report_epoch(cli: &Cli, r: &EpochRecord) {
    if cli.json {
        emit(&serde_json::to_value(r).expect("serializable"));
    } else {
        let eval = r.eval_acc.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4} ± {:.4}  train acc {:.2}%  eval acc {eval}",
            r.epoch,
            r.lr,
            r.train_loss_mean,
            r.train_loss_std,
            100.0 * r.train_acc
        );
    }
    let _ = std::io::stdout().flush();
}

fn cmd_train(
    cli: &Cli,
    v: &VariantArgs,
    data: &DataArgs,
    opt: &OptArgs,
    distill: Option<&Path>,
    alpha: f64,
    out: Option<&Path>,
) -> Result<bool> {
    let model_cfg = resolve_variant(v)?;
    let cfg = opt.config(cli.seed, cli.threads, alpha);
    let ds = data.load(cli.seed, model_cfg.num_classes)?;
    emit(&resolved(
        cli,
        "train",
        json!({ "model": model_cfg, "train": cfg, "data": ds.source, "distill": distill, "out": out }),
    ));
    let teacher = distill.map(TeacherLogits::load).transpose()?;
    let mut model: GroupMambaModel<f32> = GroupMambaModel::build(&model_cfg, &Rng::new(cli.seed))?;
    let mut report_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("report.jsonl");
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Some((path, f))
        }
        None => None,
    };
    let eval = (!ds.eval.is_empty()).then_some(&ds.eval[..]);
    let report = train(&mut model, &ds.train, eval, teacher.as_ref(), &ds.norm, &cfg, |r, m| {
        report_epoch(cli, r);
        append_line(&mut report_file, r)?;
        if let Some(dir) = out {
            save_checkpoint(m, &dir.join("last.gmba"))?;
        }
        Ok(())
    })?;
    let train_acc = evaluate(&model, &ds.train, &ds.norm, cfg.eval_batch_size, cfg.threads)?;
    let summary = json!({
        "steps": report.steps,
        "clipped_steps": report.clipped_steps,
        "final_train_acc": train_acc,
        "final_eval_acc": report.epochs.last().and_then(|r| r.eval_acc),
    });
    if cli.json {
        emit(&summary);
    } else {
        println!(
            "done: {} steps, final train acc {:.2}%{}",
            report.steps,
            100.0 * train_acc,
            report
                .epochs
                .last()
                .and_then(|r| r.eval_acc)
                .map_or(String::new(), |a| format!(", eval acc {:.2}%", 100.0 * a))
        );
    }
    Ok(true)
}

fn cmd_teacher(cli: &Cli, data: &DataArgs, opt: &OptArgs, out: &Path) -> Result<bool> {
    let tcfg = TeacherConfig::default();
    let cfg = opt.config(cli.seed, cli.threads, 1.0);
    let ds = data.load(cli.seed, tcfg.num_classes)?;
    emit(&resolved(cli, "teacher", json!({ "teacher": tcfg, "train": cfg, "data": ds.source, "out": out })));
    let eval = (!ds.eval.is_empty()).then_some(&ds.eval[..]);
    let t = train_teacher::<f32, _>(&tcfg, &ds.train, eval, &ds.norm, &cfg, |r, _| {
        report_epoch(cli, r);
        Ok(())
    })?;
    t.cache.save(out)?;
    let eval_acc = t.report.epochs.last().and_then(|r| r.eval_acc);
    if cli.json {
        emit(&json!({ "cache": out, "samples": t.cache.len(), "classes": t.cache.classes(), "eval_acc": eval_acc }));
    } else {
        println!("wrote {} ({} × {} logits)", out.display(), t.cache.len(), t.cache.classes());
    }
    Ok(true)
}

fn cmd_bench(cli: &Cli, cfg: BenchConfig) -> Result<bool> {
    emit(&resolved(cli, "bench", json!({ "bench": cfg })));
    let r = bench_layers(&cfg)?;
    if cli.json {
        emit(&serde_json::to_value(&r)?);
        return Ok(true);
    }
    println!("{:<8} {:>10} {:>12} {:>14} {:>8}", "layer", "params", "median ms", "samples/s", "spread");
    for (name, s) in [("grouped", &r.grouped), ("full", &r.full)] {
        println!(
            "{name:<8} {:>10} {:>12.3} {:>14.1} {:>7.1}%",
            s.params,
            1e3 * s.median_s,
            s.samples_per_s,
            100.0 * s.spread
        );
    }
    println!("throughput ratio (measured) {:.3}", r.throughput_ratio);
    Ok(true)
}

fn cmd_inspect(cli: &Cli, path: &Path) -> Result<bool> {
    emit(&resolved(cli, "inspect", json!({ "checkpoint": path })));
    let m: GroupMambaModel<f32> = load_checkpoint(path)?;
    if cli.json {
        let buffers: Vec<Value> = m
            .store
            .entries()
            .iter()
            .map(|e| json!({ "name": e.name, "shape": e.value.shape() }))
            .collect();
        emit(&json!({ "model": m.config, "params": m.num_params(), "buffers": buffers }));
        return Ok(true);
    }
    println!("variant {}  params {}  buffers {}", m.config.name, m.num_params(), m.store.len());
    for e in m.store.entries() {
        println!("  {:<48} {:?}", e.name, e.value.shape());
    }
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    match &cli.command {
        Command::Params(v) => cmd_params(cli, v),
        Command::Flops { variant, resolution } => cmd_flops(cli, variant, *resolution),
        Command::Verify { fault, scan_cases } => cmd_verify(cli, *fault, *scan_cases),
        Command::Train {
            variant,
            data,
            opt,
            distill,
            alpha,
            out,
        } => cmd_train(cli, variant, data, opt, distill.as_deref(), *alpha, out.as_deref()),
        Command::Teacher { data, opt, out } => cmd_teacher(cli, data, opt, out),
        Command::Bench {
            channels,
            resolution,
            batch,
            warmup,
            reps,
        } => cmd_bench(
            cli,
            BenchConfig {
                channels: *channels,
                height: *resolution,
                width: *resolution,
                batch: *batch,
                warmup: *warmup,
                reps: *reps,
                seed: cli.seed,
                ..BenchConfig::default()
            },
        ),
        Command::Inspect { checkpoint } => cmd_inspect(cli, checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
