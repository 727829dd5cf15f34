//! lightfc command line: track sequences, evaluate result files, fuse
//! weights into deploy form, count parameters/MACs, and generate synthetic
//! test sequences.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad input.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use lightfc_core::config::RunConfig;
use lightfc_core::error::Error as CoreError;
use lightfc_core::init::{seeded, uniform};
use lightfc_core::metrics::{macro_average, sequence_report, MetricReport};
use lightfc_core::model::LightFc;
use lightfc_core::seqio::{self, Sequence};
use lightfc_core::stats::{model_stats, StatsReport};
use lightfc_core::synth::{rigged_model, write_sequence, MotionKind, SynthSpec};
use lightfc_core::tensor::Tensor;
use lightfc_core::track::TrackerState;
use lightfc_core::weights::Store;

#[derive(Parser)]
#[command(name = "lightfc", version, about = "Lightweight fully-convolutional tracker toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the tracker over a sequence directory and write one box per frame
    Track {
        /// Config file; built-in defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        /// Sequence directory: frames (or an img/ subdir) + groundtruth.txt
        #[arg(long)]
        sequence: PathBuf,
        /// Result file, one x,y,w,h line per frame
        #[arg(long)]
        out: PathBuf,
    },
    /// Score result files against annotations and write a JSON report
    Eval {
        /// Directory of per-sequence result files (<name>.txt)
        #[arg(long)]
        results: PathBuf,
        /// Directory of sequence dirs (<name>/groundtruth.txt) or <name>.txt files
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Reparameterize a train-form container into deploy form
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count trainable parameters and per-frame MACs, train and deploy form
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the per-layer breakdown as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic sequence with exact ground truth
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Target trajectory: linear or sine
        #[arg(long, default_value = "linear")]
        motion: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        target_size: usize,
        /// Also write a weights container rigged to track this target
        #[arg(long)]
        rig_weights: Option<PathBuf>,
        /// Config for the rigged weights; built-in defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // core errors mean the inputs were bad; anything else is our bug
            if e.chain().any(|c| c.is::<CoreError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Track { config, weights, sequence, out } => track(config, weights, sequence, out),
        Cmd::Eval { results, annotations, report } => eval(results, annotations, report),
        Cmd::Fuse { config, weights, out } => fuse(config, weights, out),
        Cmd::Stats { config, json } => stats(config, json),
        Cmd::Synth {
            out,
            frames,
            motion,
            seed,
            width,
            height,
            target_size,
            rig_weights,
            config,
        } => synth(out, frames, motion, seed, width, height, target_size, rig_weights, config),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn user_error(msg: String) -> anyhow::Error {
    anyhow::Error::new(CoreError::Input(msg))
}

/// Output files land in directories the user named; create them on demand.
fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CoreError::Io)?;
    }
    Ok(())
}

// ── track ───────────────────────────────────────────────────────────────

fn track(config: Option<PathBuf>, weights: PathBuf, sequence: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = LightFc::load(&cfg, &weights)
        .with_context(|| format!("loading weights {}", weights.display()))?;
    let seq = Sequence::load(&sequence)?;
    let init = seq.init_box();
    let mut boxes = Vec::with_capacity(seq.frames.len());
    boxes.push(init); // frame 0 echoes the init annotation
    let first = seqio::load_frame(&seq.frames[0])?;
    let mut state = TrackerState::init(&model, &first, &init)?;
    for path in &seq.frames[1..] {
        let frame = seqio::load_frame(path)?;
        let (bbox, _) = state.track(&frame)?;
        boxes.push(bbox);
    }
    ensure_parent(&out)?;
    seqio::write_boxes(&out, &boxes)?;
    println!("tracked {} frames -> {}", boxes.len(), out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn txt_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)
        .map_err(CoreError::Io)
        .with_context(|| format!("reading {}", dir.display()))?
    {
        let path = entry.map_err(CoreError::Io)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.insert(stem.to_string());
            }
        }
    }
    Ok(names)
}

fn annotation_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = txt_stems(dir)?;
    for entry in std::fs::read_dir(dir).map_err(CoreError::Io)? {
        let path = entry.map_err(CoreError::Io)?.path();
        if path.is_dir() && path.join("groundtruth.txt").is_file() {
            if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn annotation_boxes(dir: &Path, name: &str) -> Result<Vec<Option<lightfc_core::boxes::BBox>>> {
    let nested = dir.join(name).join("groundtruth.txt");
    let flat = dir.join(format!("{name}.txt"));
    let path = if nested.is_file() { nested } else { flat };
    Ok(seqio::read_boxes(&path)?)
}

fn eval(results: PathBuf, annotations: PathBuf, report: PathBuf) -> Result<()> {
    let res_names = txt_stems(&results)?;
    let ann_names = annotation_names(&annotations)?;
    if res_names != ann_names {
        let fmt = |s: &BTreeSet<String>| {
            let v: Vec<&str> = s.iter().map(String::as_str).collect();
            if v.is_empty() { "(none)".to_string() } else { v.join(", ") }
        };
        return Err(user_error(format!(
            "sequence sets differ: results hold [{}], annotations hold [{}]",
            fmt(&res_names),
            fmt(&ann_names)
        )));
    }
    if res_names.is_empty() {
        return Err(user_error(format!("no result files under {}", results.display())));
    }
    let mut reports: BTreeMap<String, MetricReport> = BTreeMap::new();
    for name in &res_names {
        let pred = seqio::read_boxes(&results.join(format!("{name}.txt")))?;
        let gt = annotation_boxes(&annotations, name)?;
        let rep = sequence_report(&pred, &gt)
            .with_context(|| format!("scoring sequence `{name}`"))?;
        reports.insert(name.clone(), rep);
    }
    let all: Vec<MetricReport> = reports.values().cloned().collect();
    let aggregate = macro_average(&all)?;
    let doc = json!({ "sequences": reports, "aggregate": aggregate });
    ensure_parent(&report)?;
    seqio::atomic_write(&report, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    println!(
        "{} sequences: AUC {:.4}  P {:.4}  Pnorm {:.4} -> {}",
        all.len(),
        aggregate.auc,
        aggregate.p,
        aggregate.pnorm,
        report.display()
    );
    Ok(())
}

// ── fuse ────────────────────────────────────────────────────────────────

fn fuse(config: Option<PathBuf>, weights: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config)?;
    let store = Store::load(&weights)?;
    if store.any_name_contains(".fused.") {
        return Err(user_error(format!(
            "{} already holds deploy-form entries; nothing to fuse",
            weights.display()
        )));
    }
    drop(store);
    let model = LightFc::load(&cfg, &weights)?;
    let fused = model.fuse()?;

    // equivalence check on random input pairs before anything is written
    let mut rng = seeded(cfg.seed);
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let z = uniform(&mut rng, 1, 3, cfg.template_size, cfg.template_size, -2.0, 2.0);
        let x = uniform(&mut rng, 1, 3, cfg.search_size, cfg.search_size, -2.0, 2.0);
        let a = model.forward_patches(&z, &x)?;
        let b = fused.forward_patches(&z, &x)?;
        worst = worst
            .max(Tensor::max_abs_diff(&a.response, &b.response))
            .max(Tensor::max_abs_diff(&a.offset, &b.offset))
            .max(Tensor::max_abs_diff(&a.size, &b.size));
    }
    if !(worst <= 1e-3) {
        anyhow::bail!("fusion equivalence check failed: max divergence {worst:.3e} > 1e-3");
    }
    ensure_parent(&out)?;
    fused.save(&out)?;
    let before = std::fs::metadata(&weights).map_err(CoreError::Io)?.len();
    let after = std::fs::metadata(&out).map_err(CoreError::Io)?.len();
    if after >= before {
        anyhow::bail!("fused container is not smaller ({after} vs {before} bytes)");
    }
    println!(
        "fused {} -> {} ({} -> {} bytes); max forward divergence {:.3e} over 10 random input pairs",
        weights.display(),
        out.display(),
        before,
        after,
        worst
    );
    Ok(())
}

// ── stats ───────────────────────────────────────────────────────────────

fn stats_json(rep: &StatsReport) -> serde_json::Value {
    json!({
        "params": rep.params(),
        "macs": rep.macs(),
        "layers": rep
            .layers
            .iter()
            .map(|l| json!({ "name": l.name, "params": l.params, "macs": l.macs }))
            .collect::<Vec<_>>(),
    })
}

fn stats(config: Option<PathBuf>, json_out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = LightFc::random(&cfg)?;
    let train = model_stats(&model)?;
    let deploy = model_stats(&model.fuse()?)?;
    println!(
        "train form:  {:>9} params  {:>11} MACs/frame",
        train.params(),
        train.macs()
    );
    println!(
        "deploy form: {:>9} params  {:>11} MACs/frame",
        deploy.params(),
        deploy.macs()
    );
    println!(
        "deploy form ~ {:.2} M params, {:.2} G MACs (published full-scale model: 3.16 M, 0.95 G)",
        deploy.params() as f64 / 1e6,
        deploy.macs() as f64 / 1e9
    );
    if let Some(path) = json_out {
        let doc = json!({ "train": stats_json(&train), "deploy": stats_json(&deploy) });
        ensure_parent(&path)?;
        seqio::atomic_write(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
        println!("wrote layer breakdown to {}", path.display());
    }
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn synth(
    out: PathBuf,
    frames: usize,
    motion: String,
    seed: u64,
    width: usize,
    height: usize,
    target_size: usize,
    rig_weights: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let spec = SynthSpec {
        frames,
        width,
        height,
        target_size,
        motion: MotionKind::parse(&motion)?,
        seed,
    };
    let boxes = write_sequence(&spec, &out)?;
    println!(
        "wrote {} frames under {} ({}x{} target starting at ({}, {}))",
        boxes.len(),
        out.display(),
        target_size,
        target_size,
        boxes[0].x,
        boxes[0].y
    );
    if let Some(wpath) = rig_weights {
        let cfg = load_config(&config)?;
        let model = rigged_model(&cfg, target_size)?;
        ensure_parent(&wpath)?;
        model.save(&wpath)?;
        println!("wrote rigged weights to {}", wpath.display());
    }
    Ok(())
}
