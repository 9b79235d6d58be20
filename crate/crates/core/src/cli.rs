//! Command-line driver: clip generation, training, evaluation, the scan
//! benchmark and single-clip demo output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{generate_clip, read_clip, write_clip, VideoClip};
use crate::error::Error;
use crate::model::{Ablation, Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::train::{
    bench_scan, evaluate_clip, psnr, restore, BenchOptions, ClipMetrics, Moments, TrainConfig, Trainer, DEFAULT_LENGTHS,
};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";
pub const INDEX: &str = "index.json";
pub const LOG: &str = "train_log.jsonl";
pub const OPTIMIZER: &str = "optimizer.dmmb";
pub const CLIP_EXT: &str = "mvc";

#[derive(Debug, Parser)]
#[command(name = "demmamba", version, about = "Raw video demoireing with selective state-space blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic moire clips.
    Gen(GenArgs),
    /// Train a model on a directory of clips.
    Train(TrainArgs),
    /// Report PSNR/SSIM of a checkpoint on a directory of clips.
    Eval(EvalArgs),
    /// Time the selective scan over sequence lengths.
    Bench(BenchArgs),
    /// Restore one clip and write degraded/restored/clean images.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Total epochs; a resumed run continues up to this count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// No progress output on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated ascending sequence lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad extent `{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedClip {
    pub path: PathBuf,
    pub reason: String,
}

/// Everything needed to reproduce or resume a run, written next to its
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub clips: Vec<PathBuf>,
    pub skipped: Vec<SkippedClip>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub parameters: usize,
    pub epochs_completed: usize,
    pub step: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    /// `running` until the last epoch's outputs are written, then `complete`.
    pub status: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipIndex {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub amplitude: f64,
    pub seed: u64,
    pub clips: Vec<IndexEntry>,
}

/// Caps rayon's pool from `DEMMAMBA_THREADS`; `0` means one thread.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("DEMMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize =
        value.trim().parse().with_context(|| format!("DEMMAMBA_THREADS must be an integer, got `{value}`"))?;
    // a pool that was already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => {
            cmd_gen(&a).map(|index| println!("wrote {} clips to {}", index.clips.len(), a.out.display()))
        }
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|csv| print!("{csv}")),
        Command::Demo(a) => cmd_demo(&a).map(|_| ()),
    }
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<ClipIndex> {
    let (h, w) = args.size;
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        bail!("frame size must be positive multiples of 4, got {h}x{w}");
    }
    if args.frames == 0 {
        bail!("--frames must be at least 1");
    }
    if !(0.0..=1.0).contains(&args.amplitude) {
        bail!("--amplitude must lie in [0, 1], got {}", args.amplitude);
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let written: Vec<anyhow::Result<IndexEntry>> = (0..args.clips)
        .into_par_iter()
        .map(|i| {
            let seed = args.seed.wrapping_add(i as u64);
            let clip = generate_clip(seed, args.frames, h, w, args.amplitude)?;
            let name = PathBuf::from(format!("clip_{i:04}.{CLIP_EXT}"));
            let path = args.out.join(&name);
            write_clip(&path, &clip).with_context(|| format!("writing {}", path.display()))?;
            Ok(IndexEntry { path: name, seed })
        })
        .collect();
    let clips = written.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let index =
        ClipIndex { frames: args.frames, height: h, width: w, amplitude: args.amplitude, seed: args.seed, clips };
    fs::write(args.out.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

/// Clip files of `dir` in name order.
pub fn clip_paths(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == CLIP_EXT));
    paths.sort();
    Ok(paths)
}

/// Loads every readable clip of `dir` that fits the model, warning about
/// and recording the rest.
pub fn load_clips(dir: &Path, frames: usize) -> anyhow::Result<(Vec<(PathBuf, VideoClip)>, Vec<SkippedClip>)> {
    let mut good: Vec<(PathBuf, VideoClip)> = Vec::new();
    let mut skipped = Vec::new();
    for path in clip_paths(dir)? {
        let checked = read_clip(&path).and_then(|clip| {
            if clip.frames() != frames {
                return Err(Error::ConfigMismatch {
                    field: "frames".into(),
                    detail: format!("clip has {} frames, model expects {frames}", clip.frames()),
                });
            }
            if clip.height() % 4 != 0 || clip.width() % 4 != 0 {
                return Err(Error::Dimension(format!("{}x{} is not a multiple of 4", clip.height(), clip.width())));
            }
            if let Some((_, first)) = good.first() {
                if first.raw.shape() != clip.raw.shape() {
                    return Err(Error::Dimension(format!(
                        "clip shape {:?} differs from {:?}",
                        clip.raw.shape(),
                        first.raw.shape()
                    )));
                }
            }
            Ok(clip)
        });
        match checked {
            Ok(clip) => good.push((path, clip)),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped.push(SkippedClip { path, reason: e.to_string() });
            }
        }
    }
    Ok((good, skipped))
}

fn epoch_checkpoint(epoch: usize) -> String {
    format!("epoch_{epoch:04}.dmmb")
}

fn save_optimizer(path: &Path, trainer: &mut Trainer) -> anyhow::Result<()> {
    let names: Vec<String> = trainer.model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut entries = Vec::new();
    for (name, m) in names.iter().zip(&trainer.optimizer.moments) {
        let n = m.m.len();
        entries.push((format!("m.{name}"), Tensor::from_vec(&[n], m.m.clone())?));
        entries.push((format!("v.{name}"), Tensor::from_vec(&[n], m.v.clone())?));
    }
    checkpoint::save(path, entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

fn load_optimizer(path: &Path, trainer: &mut Trainer) -> anyhow::Result<()> {
    let entries = checkpoint::load(path)?;
    let names: Vec<String> = trainer.model.named_params().into_iter().map(|(n, _)| n).collect();
    if entries.len() != 2 * names.len() {
        bail!("optimizer state has {} entries, expected {}", entries.len(), 2 * names.len());
    }
    let mut moments = Vec::with_capacity(names.len());
    for (name, pair) in names.iter().zip(entries.chunks(2)) {
        if pair[0].0 != format!("m.{name}") || pair[1].0 != format!("v.{name}") {
            bail!("optimizer state entry `{}` does not match parameter `{name}`", pair[0].0);
        }
        moments.push(Moments { m: pair[0].1.to_vec(), v: pair[1].1.to_vec() });
    }
    trainer.optimizer.moments = moments;
    Ok(())
}

pub fn model_entries(model: &mut Model<f32>) -> Vec<(String, Tensor<f32>)> {
    model.named_params().into_iter().map(|(n, p)| (n, p.detach())).collect()
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<RunManifest> {
    let mut config: RunConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(a) = args.ablation {
        config.model.ablation = a;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    config.model.validate()?;
    config.train.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let (clips, skipped) = load_clips(&args.data, config.model.frames)?;
    if clips.is_empty() {
        bail!("no usable clips in {} ({} skipped)", args.data.display(), skipped.len());
    }
    let mut trainer = Trainer::new(Model::new(&config.model, config.train.seed)?, config.train.clone())?;
    let manifest_path = args.out.join(MANIFEST);
    let mut manifest = if manifest_path.exists() {
        let previous = RunManifest::load(&manifest_path)?;
        previous.model.ensure_matches(&config.model).context("cannot resume: model config differs")?;
        let ckpt = previous.checkpoint.as_ref().ok_or_else(|| anyhow!("cannot resume: manifest has no checkpoint"))?;
        trainer.model.load_params(&checkpoint::load(&args.out.join(ckpt))?)?;
        load_optimizer(&args.out.join(OPTIMIZER), &mut trainer)?;
        trainer.optimizer.step = previous.step;
        trainer.epoch = previous.epochs_completed;
        if !args.quiet {
            println!("resuming at epoch {} (step {})", previous.epochs_completed, previous.step);
        }
        RunManifest { train: config.train.clone(), skipped: skipped.clone(), status: "running".into(), ..previous }
    } else {
        RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            model: config.model.clone(),
            train: config.train.clone(),
            data_dir: args.data.clone(),
            clips: clips.iter().map(|(p, _)| p.clone()).collect(),
            skipped: skipped.clone(),
            seed: config.train.seed,
            out_dir: args.out.clone(),
            parameters: trainer.model.param_count(),
            epochs_completed: 0,
            step: 0,
            last_loss: None,
            checkpoint: None,
            status: "running".into(),
        }
    };
    manifest.save(&args.out)?;

    let log_file = fs::OpenOptions::new().create(true).append(true).open(args.out.join(LOG))?;
    let mut log = BufWriter::new(log_file);
    let data: Vec<VideoClip> = clips.into_iter().map(|(_, c)| c).collect();
    while trainer.epoch < config.train.epochs {
        let mean = trainer.run_epoch(&data, |entry| {
            serde_json::to_writer(&mut log, entry)?;
            writeln!(log)?;
            Ok(())
        })?;
        log.flush()?;
        let name = epoch_checkpoint(trainer.epoch);
        let entries = model_entries(&mut trainer.model);
        checkpoint::save(&args.out.join(&name), entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        save_optimizer(&args.out.join(OPTIMIZER), &mut trainer)?;
        manifest.epochs_completed = trainer.epoch;
        manifest.step = trainer.step();
        manifest.last_loss = Some(mean);
        manifest.checkpoint = Some(name.into());
        manifest.save(&args.out)?;
        if !args.quiet {
            println!(
                "epoch {} step {} loss {mean:.5} lr {:.2e}",
                trainer.epoch,
                trainer.step(),
                trainer.config.lr(trainer.epoch - 1)
            );
        }
    }
    manifest.status = "complete".into();
    manifest.save(&args.out)?;
    if args.quiet {
        return Ok(manifest);
    }
    println!(
        "trained {} epochs ({} steps) on {} clips, {} skipped; ablation {}",
        manifest.epochs_completed,
        manifest.step,
        data.len(),
        manifest.skipped.len(),
        manifest.model.ablation.name()
    );
    Ok(manifest)
}

/// Model for a checkpoint: the config comes from the run manifest in the
/// checkpoint's directory.
pub fn load_model(ckpt: &Path) -> anyhow::Result<(Model<f32>, RunManifest)> {
    if !ckpt.is_file() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::load(&dir.join(MANIFEST)).context("the checkpoint's run manifest is required")?;
    let mut model = Model::new(&manifest.model, manifest.seed)?;
    let entries = checkpoint::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    model.load_params(&entries)?;
    Ok((model, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub path: PathBuf,
    #[serde(flatten)]
    pub metrics: ClipMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub parameters: usize,
    pub clips: Vec<ClipReport>,
    pub skipped: Vec<SkippedClip>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr: f64,
    pub mean_baseline_ssim: f64,
    pub mean_seconds_per_frame: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let (mut model, manifest) = load_model(&args.ckpt)?;
    let (clips, skipped) = load_clips(&args.data, manifest.model.frames)?;
    if clips.is_empty() {
        bail!("no usable clips in {}", args.data.display());
    }
    let mut reports = Vec::with_capacity(clips.len());
    for (path, clip) in &clips {
        let metrics = evaluate_clip(&model, clip)?;
        println!(
            "{}: psnr {:.4} dB ssim {:.4} (degraded {:.4} dB / {:.4})",
            path.display(),
            metrics.psnr,
            metrics.ssim,
            metrics.baseline_psnr,
            metrics.baseline_ssim
        );
        reports.push(ClipReport { path: path.clone(), metrics });
    }
    let mean = |f: fn(&ClipMetrics) -> f64| reports.iter().map(|r| f(&r.metrics)).sum::<f64>() / reports.len() as f64;
    let report = EvalReport {
        checkpoint: args.ckpt.clone(),
        data: args.data.clone(),
        parameters: model.param_count(),
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        mean_baseline_psnr: mean(|m| m.baseline_psnr),
        mean_baseline_ssim: mean(|m| m.baseline_ssim),
        mean_seconds_per_frame: mean(|m| m.seconds),
        clips: reports,
        skipped,
    };
    println!(
        "mean psnr {:.4} dB ssim {:.4} (degraded {:.4} dB) over {} clips; {} parameters; {:.4} s/frame",
        report.mean_psnr,
        report.mean_ssim,
        report.mean_baseline_psnr,
        report.clips.len(),
        report.parameters,
        report.mean_seconds_per_frame
    );
    let dir = args.ckpt.parent().unwrap_or(Path::new("."));
    let out = dir.join("eval.json");
    fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", out.display());
    Ok(report)
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<String> {
    let opts = BenchOptions {
        lengths: args.lengths.clone().unwrap_or_else(|| DEFAULT_LENGTHS.to_vec()),
        trials: args.trials,
        ..BenchOptions::default()
    };
    Ok(bench_scan(&opts)?.to_csv())
}

/// Binary PPM of a `[3, H, W]` display-domain image. The values are
/// already gamma-2.2 encoded, so they are only clamped and quantized.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> anyhow::Result<()> {
    let &[3, h, w] = image.shape() else {
        bail!("PPM export needs a [3, H, W] image, got {:?}", image.shape());
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Concatenates `[3, H, W]` images left to right.
pub fn side_by_side(images: &[&Tensor<f32>]) -> anyhow::Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = images.iter().map(|t| (*t).detach()).collect();
    Ok(Tensor::cat(&parts, 2)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub psnr: f64,
    pub baseline_psnr: f64,
    pub images: Vec<PathBuf>,
}

pub fn cmd_demo(args: &DemoArgs) -> anyhow::Result<DemoReport> {
    let (model, _) = load_model(&args.ckpt)?;
    let clip = read_clip(&args.clip).with_context(|| format!("reading {}", args.clip.display()))?;
    if clip.frames() != model.config().frames {
        bail!("clip has {} frames, model expects {}", clip.frames(), model.config().frames);
    }
    let restored = restore(&model, &clip)?;
    let degraded = clip.center_baseline()?;
    let clean = clip.center_clean();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut images = Vec::new();
    for (name, img) in [
        ("degraded.ppm", degraded.clone()),
        ("restored.ppm", restored.clone()),
        ("clean.ppm", clean.clone()),
        ("side_by_side.ppm", side_by_side(&[&degraded, &restored, &clean])?),
    ] {
        let path = args.out.join(name);
        write_ppm(&path, &img)?;
        images.push(path);
    }
    let report =
        DemoReport { psnr: psnr(&restored, &clean, 1.0)?, baseline_psnr: psnr(&degraded, &clean, 1.0)?, images };
    println!(
        "{}: psnr {:.4} dB (degraded {:.4} dB); images in {}",
        args.clip.display(),
        report.psnr,
        report.baseline_psnr,
        args.out.display()
    );
    Ok(report)
}
