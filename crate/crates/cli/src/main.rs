//! `tempo`: generate synthetic data, train, detect, evaluate and benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tempo_core::dataset::{
    build_buffers, load_detections, load_manifest, save_detections, synth_generate, Detection,
    Manifest, SynthConfig,
};
use tempo_core::metrics::{
    ar_an_auc, average_map, frame_level_map, ground_truth, gts_by_video, map_rows,
    proposals_by_video, write_report, MetricRow, FRAME_SAMPLES,
};
use tempo_core::pipeline::{bench, detect_video, Mode, Model};
use tempo_core::train::{train, TrainConfig};
use tempo_core::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "tempo", version, about = "Temporal activity detection in untrimmed video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus with train and test manifests.
    Synth(SynthArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Run a checkpoint on every video of a manifest.
    Detect(DetectArgs),
    /// Score detections against a manifest's annotations.
    Eval(EvalArgs),
    /// Measure inference throughput in input frames per second.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key=value file overriding the default corpus settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Train the classifier on the hardest proposals.
    #[arg(long)]
    ohem: bool,
    /// Add temporally reversed buffers.
    #[arg(long = "two-way")]
    two_way: bool,
    /// Add horizontally mirrored buffers.
    #[arg(long)]
    flip: bool,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation tIoU threshold; the final NMS runs 0.1 below it.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Detections file (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Metric {
    Map,
    AvgMap,
    Auc,
    FrameMap,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, num_args = 1.., default_values_t = [Metric::Map])]
    metric: Vec<Metric>,
    /// Thresholds for the map metric.
    #[arg(long, num_args = 1.., default_values_t = [0.5])]
    alpha: Vec<f64>,
    /// Moving-average window over frame scores for frame_map.
    #[arg(long)]
    smooth: Option<usize>,
    /// Directory for report.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    /// Use only the first N videos.
    #[arg(long)]
    videos: Option<usize>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::from(1)
        }
    }
}

/// `TEMPO_THREADS` caps the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("TEMPO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TEMPO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Detect(a) => run_detect(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = synth_generate(&cfg, &a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "train_manifest": out.train_manifest,
            "test_manifest": out.test_manifest,
        })
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    cfg.ohem |= a.ohem;
    cfg.two_way |= a.two_way;
    cfg.flip |= a.flip;
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let manifest = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("train_manifest is not set".into()))?;
    match cfg.dtype.as_str() {
        "f64" => train_as::<f64>(&cfg, &manifest),
        _ => train_as::<f32>(&cfg, &manifest),
    }
}

fn train_as<S: Scalar>(cfg: &TrainConfig, manifest: &Path) -> Result<()> {
    let dataset = load_manifest::<S>(manifest)?;
    let outcome = train(&dataset, cfg, Some(&cfg.out_dir))?;
    let last = outcome.log.last().map(|r| r.losses.total).unwrap_or(0.0);
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": cfg.out_dir.join("model.tckp"),
            "iterations": outcome.log.len(),
            "final_total_loss": last,
        })
    );
    Ok(())
}

fn run_detect(a: DetectArgs) -> Result<()> {
    if !(a.alpha > 0.1 && a.alpha <= 1.0) {
        return Err(Error::Config(format!("--alpha must lie in (0.1, 1], got {}", a.alpha)));
    }
    let model = Model::<f64>::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let per_video: Vec<Result<Vec<Detection>>> = (0..manifest.videos.len())
        .into_par_iter()
        .map(|i| detect_video(&model, &manifest.load_video::<f64>(i)?, a.alpha))
        .collect();
    let mut dets = Vec::new();
    for d in per_video {
        dets.extend(d?);
    }
    save_detections(&a.out, &dets)?;
    println!(
        "{}",
        serde_json::json!({ "detections": dets.len(), "videos": manifest.videos.len(), "out": a.out })
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let dets = load_detections(&a.detections)?;
    let manifest = Manifest::load(&a.manifest)?;
    let (gts, durations) = ground_truth(&manifest);
    let mut rows = Vec::new();
    for m in &a.metric {
        match m {
            Metric::Map => rows.extend(map_rows(&dets, &gts, &manifest.classes, &a.alpha)),
            Metric::AvgMap => rows.push(MetricRow {
                metric: "avg_map".into(),
                class: "ALL".into(),
                alpha: None,
                value: average_map(&dets, &gts),
            }),
            Metric::Auc => rows.push(MetricRow {
                metric: "ar_an_auc".into(),
                class: "ALL".into(),
                alpha: None,
                value: ar_an_auc(&proposals_by_video(&dets), &gts_by_video(&gts)),
            }),
            Metric::FrameMap => rows.push(MetricRow {
                metric: "frame_map".into(),
                class: "ALL".into(),
                alpha: None,
                value: frame_level_map(&dets, &gts, &durations, FRAME_SAMPLES, a.smooth),
            }),
        }
    }
    write_report(&a.out, &rows)?;
    println!("{}", tempo_core::metrics::summary_json(&rows));
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let model = Model::<f64>::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let n = a.videos.unwrap_or(manifest.videos.len()).min(manifest.videos.len());
    let mut buffers = Vec::new();
    for i in 0..n {
        let video = manifest.load_video::<f64>(i)?;
        buffers.extend(build_buffers(&video, model.config.buffer_len, false, false)?);
    }
    let report = bench(&model, &buffers, a.repeat)?;
    let json = serde_json::to_string(&report).expect("report serializes");
    if let Some(p) = &a.out {
        std::fs::write(p, &json).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    println!("{json}");
    Ok(())
}
