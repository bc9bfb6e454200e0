//! `ttt-seg`: synthetic data generation, training, evaluation, prediction
//! and gradient checks for the TTT U-Net.
//!
//! Exit codes: 0 success, 1 a gradient check failed, 2 invalid input or
//! configuration, 3 training diverged.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ttt_seg::autodiff::OpKind;
use ttt_seg::config::{RunConfig, Split};
use ttt_seg::dataio::{export_mask_pgm, generate, load_dataset, save_dataset, save_predictions, Dataset};
use ttt_seg::metrics::{evaluate, LabelMask};
use ttt_seg::training::{predict_masks, train_with, FINAL_CHECKPOINT_DIR, LOG_FILE};
use ttt_seg::unet::{load_checkpoint, ModelParams, Variant};
use ttt_seg::verify::{check_names, run_suite};
use ttt_seg::Error;

const THREADS_VAR: &str = "TTT_SEG_THREADS";

#[derive(Parser)]
#[command(name = "ttt-seg", version, about = "U-Net segmentation with test-time training layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration with optional `data`, `train` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a network and write its log and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory; defaults to the training output's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// NSD boundary tolerance in pixels.
        #[arg(long)]
        tau: Option<f64>,
        /// Report path; defaults to `<out_dir>/metrics.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one PGM per predicted mask into this directory.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Write predicted masks for a dataset split.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Output directory; defaults to `<out_dir>/predictions`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every backward rule against finite differences.
    Gradcheck {
        /// Run only the named checks (repeatable).
        #[arg(long)]
        only: Vec<String>,
        /// Also write the results as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Break one backward rule on purpose: `OP` or `OP:DELTA`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown split {s:?} (expected train, validation or all)"))
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidConfig(format!("{THREADS_VAR} must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?),
        None => None,
    };
    let mut cfg = RunConfig::parse(text.as_deref(), &args.overrides)?;
    if let Some(d) = &args.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.display().to_string(), source: e })?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = generate(&cfg.data)?;
    save_dataset(&data, &cfg.data_dir)?;
    println!("wrote {} samples to {}", data.samples.len(), cfg.data_dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = load_dataset(&cfg.data_dir).with_context(|| format!("loading dataset from {}", cfg.data_dir.display()))?;
    let run = &cfg.train;
    eprintln!(
        "training {} ({}) on {} samples for {} epochs, seed {}, {} thread(s)",
        run.variant,
        run.preset,
        data.samples.len(),
        run.epochs,
        run.seed,
        threads()?
    );
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.display().to_string(), source: e })?;
    write_json(&cfg.out_dir.join("run_config.json"), cfg)?;
    let outcome = train_with(run, &data, Some(&cfg.out_dir), |r| {
        let val = r.val_dsc.map(|d| format!("  val dsc {d:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {:>4}  loss {:.5} (dice {:.5}, ce {:.5})  lr {:.1e}{val}  {} ms",
            r.epoch, r.train_loss, r.dice_part, r.ce_part, r.lr, r.wall_ms
        );
    })?;
    if let Some(last) = outcome.log.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    eprintln!(
        "log {}, checkpoint {}",
        cfg.out_dir.join(LOG_FILE).display(),
        cfg.out_dir.join(FINAL_CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn split_indices(data: &Dataset, split: Split) -> anyhow::Result<Vec<usize>> {
    let (train, val) = data.split();
    let idx = match split {
        Split::Train => train,
        Split::Validation => val,
        Split::All => (0..data.samples.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("the {split:?} split of this dataset is empty")).into());
    }
    Ok(idx)
}

/// Loads the checkpoint and dataset and checks that they fit each other.
fn model_and_data(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> anyhow::Result<(ModelParams, Dataset)> {
    let dir = checkpoint.unwrap_or_else(|| cfg.out_dir.join(FINAL_CHECKPOINT_DIR));
    let (model, _) = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let data = load_dataset(&cfg.data_dir).with_context(|| format!("loading dataset from {}", cfg.data_dir.display()))?;
    let (n, s) = (model.config(), &data.spec);
    if n.patch_size != [s.height, s.width] || n.num_classes != s.num_classes || n.input_channels != s.input_channels {
        return Err(Error::InvalidShape(format!(
            "checkpoint expects {}×{:?} inputs with {} classes, dataset has {}×[{}, {}] with {} classes",
            n.input_channels, n.patch_size, n.num_classes, s.input_channels, s.height, s.width, s.num_classes
        ))
        .into());
    }
    Ok((model, data))
}

fn predicted(cfg: &RunConfig, model: &ModelParams, data: &Dataset, split: Split) -> anyhow::Result<Vec<(usize, LabelMask)>> {
    threads()?;
    let idx = split_indices(data, split)?;
    let masks = predict_masks(model, data, &idx, cfg.eval.batch_size)?;
    Ok(idx.into_iter().zip(masks).collect())
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, report: Option<PathBuf>, pgm: Option<PathBuf>) -> anyhow::Result<()> {
    let (model, data) = model_and_data(cfg, checkpoint)?;
    let preds = predicted(cfg, &model, &data, cfg.eval.split)?;
    let c = data.spec.num_classes;
    let mut cases = Vec::with_capacity(preds.len());
    for (i, pred) in &preds {
        let s = &data.samples[*i];
        cases.push((s.id.clone(), pred.clone(), LabelMask::from_tensor(&s.labels, c)?));
    }
    let metrics = evaluate(&cases, &cfg.eval.options())?;
    let path = report.unwrap_or_else(|| cfg.out_dir.join("metrics.json"));
    write_json(&path, &metrics)?;
    let pgm = pgm.or_else(|| cfg.eval.export_pgm.then(|| cfg.out_dir.join("pgm")));
    if let Some(dir) = &pgm {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
        for (i, mask) in &preds {
            export_mask_pgm(mask, &dir.join(format!("{}.pgm", data.samples[*i].id)))?;
        }
    }
    println!(
        "{} cases: mean DSC {:.4}, mean NSD {:.4} (tau {}){}",
        metrics.num_cases,
        metrics.mean_dsc,
        metrics.mean_nsd,
        metrics.tau,
        metrics.instance_f1.map(|f| format!(", instance F1 {f:.4}")).unwrap_or_default()
    );
    println!("report {}", path.display());
    Ok(())
}

fn predict(cfg: &RunConfig, checkpoint: Option<PathBuf>, split: Split, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (model, data) = model_and_data(cfg, checkpoint)?;
    let preds = predicted(cfg, &model, &data, split)?;
    let named: Vec<_> = preds.into_iter().map(|(i, m)| (data.samples[i].id.clone(), m)).collect();
    let dir = out.unwrap_or_else(|| cfg.out_dir.join("predictions"));
    save_predictions(&named, &dir)?;
    println!("wrote {} masks to {}", named.len(), dir.display());
    Ok(())
}

fn parse_fault(spec: &str) -> anyhow::Result<(OpKind, f64)> {
    let (name, delta) = spec.split_once(':').unwrap_or((spec, "0.01"));
    let Some(kind) = OpKind::from_name(name) else {
        let known: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        bail!(Error::InvalidArgument(format!("unknown op {name:?}; known ops: {}", known.join(", "))));
    };
    let delta: f64 = delta.parse().map_err(|_| Error::InvalidArgument(format!("bad fault size {delta:?}")))?;
    Ok((kind, delta))
}

fn gradcheck(only: &[String], report: Option<PathBuf>, fault: Option<String>) -> anyhow::Result<ExitCode> {
    let names = check_names();
    if let Some(bad) = only.iter().find(|n| !names.contains(&n.as_str())) {
        bail!(Error::InvalidArgument(format!("unknown check {bad:?}; available: {}", names.join(", "))));
    }
    let fault = fault.as_deref().map(parse_fault).transpose()?;
    let outcomes = run_suite(only, fault);
    for o in &outcomes {
        let status = if o.passed { "ok" } else { "FAIL" };
        let note = o.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default();
        println!("{status:<4} {:<18} max rel err {:.3e}  tol {:.0e}{note}", o.name, o.max_rel_error, o.tolerance);
    }
    if let Some(w) = outcomes.iter().max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance))) {
        match &w.worst {
            Some(e) => println!(
                "worst offender: {} (parameter {}, index {}): analytic {:e}, numeric {:e}, rel err {:.3e}",
                w.name, e.param, e.index, e.analytic, e.numeric, e.rel_error
            ),
            None => println!("worst offender: {}", w.name),
        }
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if let Some(path) = report {
        let rows: Vec<_> = outcomes
            .iter()
            .map(|o| {
                json!({
                    "name": o.name,
                    "passed": o.passed,
                    "tolerance": o.tolerance,
                    "max_rel_error": if o.max_rel_error.is_finite() { json!(o.max_rel_error) } else { json!(null) },
                    "worst": o.worst.as_ref().map(|e| json!({
                        "param": e.param, "index": e.index, "analytic": e.analytic,
                        "numeric": e.numeric, "rel_error": e.rel_error,
                    })),
                    "error": o.error,
                })
            })
            .collect();
        write_json(&path, &json!({ "passed": failed.is_empty(), "checks": rows }))?;
    }
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    threads()?;
    match cli.command {
        Command::GenData { cfg, seed, samples } => {
            let mut c = load_config(&cfg)?;
            c.data.seed = seed.unwrap_or(c.data.seed);
            c.data.samples = samples.unwrap_or(c.data.samples);
            c.validate()?;
            gen_data(&c)?;
        }
        Command::Train { cfg, preset, variant, epochs, seed, out } => {
            let mut c = load_config(&cfg)?;
            let t = &mut c.train;
            t.preset = preset.unwrap_or(std::mem::take(&mut t.preset));
            t.variant = variant.unwrap_or(t.variant);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.seed = seed.unwrap_or(t.seed);
            c.out_dir = out.unwrap_or(c.out_dir);
            c.validate()?;
            train(&c)?;
        }
        Command::Eval { cfg, checkpoint, split, tau, report, pgm } => {
            let mut c = load_config(&cfg)?;
            c.eval.split = split.unwrap_or(c.eval.split);
            c.eval.tau = tau.unwrap_or(c.eval.tau);
            c.validate()?;
            eval(&c, checkpoint, report, pgm)?;
        }
        Command::Predict { cfg, checkpoint, split, out } => {
            let c = load_config(&cfg)?;
            predict(&c, checkpoint, split.unwrap_or(c.eval.split), out)?;
        }
        Command::Gradcheck { only, report, inject_fault } => return gradcheck(&only, report, inject_fault),
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::DivergedTraining { .. } | Error::NumericFailure(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
