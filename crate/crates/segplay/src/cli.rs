//! Command-line interface.
//!
//! Every subcommand accepts `--config <file>` (flat `key = value` or JSON);
//! explicit flags override file values, which override built-in defaults.
//! Each run writes `<artifact>.run.json` (command, version, seed, resolved
//! settings) beside its main output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use segplay_core::detector::Head;
use segplay_core::env::{Opponent, Terminators};
use segplay_core::inference::{self, InferenceMode};
use segplay_core::nn::{OptimizerKind, Pool};
use segplay_core::synth::{generate_dataset, RoiKind, SyntheticConfig};
use segplay_core::{CompetitorMode, DetectorArch, DetectorTrainConfig, EnvConfig, Mask, SelfPlayConfig};

use crate::checkpoint;
use crate::config;
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};
use crate::io::{self, Masks};
use crate::pipeline::{self, EvalOptions, RewardSource};
use crate::report::{self, Report, RunInfo};

#[derive(Debug, Parser)]
#[command(name = "segplay", version = report::VERSION, about = "Gamified weakly-supervised segmentation with self-play")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, masks, manifest.jsonl).
    GenData(GenDataFlags),
    /// Train the object-presence detector from image-level labels.
    TrainDetector(TrainDetectorFlags),
    /// Train the patch-selection policy by self-play (or against a fixed score).
    TrainSelfplay(TrainSelfplayFlags),
    /// Segment one image with a trained policy.
    Infer(InferFlags),
    /// Score a policy, the sliding-window baseline or a folder of masks.
    Evaluate(EvaluateFlags),
    /// Run the ablation grid or the baseline comparison over several seeds.
    Experiment(ExperimentFlags),
}

fn skip<T>(v: &Option<T>) -> bool {
    v.is_none()
}

fn not(b: &bool) -> bool {
    !*b
}

/// Parses a snake_case enum name through its serde representation.
fn named<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn required(v: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    v.clone().ok_or_else(|| Error::Config(format!("missing required setting `{name}`")))
}

fn parse_shifts(text: &str, patch_size: usize) -> Result<Vec<(usize, usize)>> {
    match text.trim() {
        "auto" => return Ok(inference::default_shifts(patch_size)),
        "none" => return Ok(vec![(0, 0)]),
        _ => {}
    }
    text.split(';')
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("bad shift `{pair}` (expected x,y)")))?;
            let n = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad shift `{pair}`")))
            };
            Ok((n(x)?, n(y)?))
        })
        .collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Args, Serialize)]
pub struct GenDataFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub image_size: Option<usize>,
    /// rectangle | ellipse
    #[arg(long, value_parser = named::<RoiKind>)]
    #[serde(skip_serializing_if = "skip")]
    pub roi_kind: Option<RoiKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub roi_area_lo: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub roi_area_hi: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub noise_std: Option<f64>,
    /// Probability that a sample contains an ROI.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub positive_fraction: Option<f64>,
    /// png | pgm
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub roi_kind: RoiKind,
    pub roi_area_lo: f64,
    pub roi_area_hi: f64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_std: f64,
    pub positive_fraction: f64,
    pub format: String,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            out: None,
            n: 500,
            seed: 0,
            image_size: s.image_size,
            channels: s.channels,
            roi_kind: s.roi_kind,
            roi_area_lo: s.roi_area_fraction.0,
            roi_area_hi: s.roi_area_fraction.1,
            foreground_mean: s.foreground_mean,
            background_mean: s.background_mean,
            noise_std: s.noise_std,
            positive_fraction: s.positive_fraction,
            format: "png".into(),
        }
    }
}

impl GenDataSettings {
    fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            image_size: self.image_size,
            channels: self.channels,
            roi_kind: self.roi_kind,
            roi_area_fraction: (self.roi_area_lo, self.roi_area_hi),
            foreground_mean: self.foreground_mean,
            background_mean: self.background_mean,
            noise_std: self.noise_std,
            positive_fraction: self.positive_fraction,
        }
    }
}

fn gen_data(flags: &GenDataFlags) -> Result<()> {
    let s: GenDataSettings = config::resolve(flags.config.as_deref(), flags)?;
    let out = required(&s.out, "out")?;
    let ext = match (s.format.as_str(), s.channels) {
        ("png", _) => "png",
        ("pgm" | "pnm" | "ppm", 1) => "pgm",
        ("pgm" | "pnm" | "ppm", _) => "ppm",
        (f, _) => return Err(Error::Config(format!("unknown format `{f}`"))),
    };
    let samples = generate_dataset(&mut ChaCha8Rng::seed_from_u64(s.seed), &s.synthetic(), s.n)?;
    let manifest = io::write_dataset(&out, &samples, ext)?;
    RunInfo::new("gen-data", s.seed, &s)?.write_for(&out)?;
    println!("{}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------- train-detector

#[derive(Debug, Args, Serialize)]
pub struct TrainDetectorFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub manifest: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDetectorSettings {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub input_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub pool: Pool,
    pub head: Head,
    /// sgd | adam
    pub optimizer: String,
}

impl Default for TrainDetectorSettings {
    fn default() -> Self {
        let c = DetectorTrainConfig::default();
        Self {
            manifest: None,
            out: None,
            epochs: c.epochs,
            lr: c.learning_rate,
            batch_size: c.batch_size,
            seed: c.seed,
            validation_fraction: c.validation_fraction,
            input_size: c.arch.input_size,
            conv1: c.arch.conv1,
            conv2: c.arch.conv2,
            hidden: c.arch.hidden,
            pool: c.arch.pool,
            head: c.arch.head,
            optimizer: "sgd".into(),
        }
    }
}

fn optimizer(name: &str) -> Result<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::sgd_momentum()),
        "adam" => Ok(OptimizerKind::adam()),
        o => Err(Error::Config(format!("unknown optimizer `{o}`"))),
    }
}

fn train_detector(flags: &TrainDetectorFlags) -> Result<()> {
    let s: TrainDetectorSettings = config::resolve(flags.config.as_deref(), flags)?;
    let manifest = required(&s.manifest, "manifest")?;
    let out = required(&s.out, "out")?;
    let samples = io::load_dataset(&manifest, Masks::Ignore)?;
    let channels = samples.first().map_or(1, |x| x.image.channels());
    let cfg = DetectorTrainConfig {
        arch: DetectorArch {
            input_size: s.input_size,
            channels,
            conv1: s.conv1,
            conv2: s.conv2,
            hidden: s.hidden,
            pool: s.pool,
            head: s.head,
        },
        learning_rate: s.lr,
        batch_size: s.batch_size,
        epochs: s.epochs,
        seed: s.seed,
        validation_fraction: s.validation_fraction,
        optimizer: optimizer(&s.optimizer)?,
    };
    let (det, rep) = pipeline::fit_detector(&samples, &cfg)?;
    checkpoint::save_detector(&out, &det)?;
    report::write_json(&out.with_extension("report.json"), &rep)?;
    RunInfo::new("train-detector", s.seed, &s)?.write_for(&out)?;
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

// ---------------------------------------------------------- train-selfplay

#[derive(Debug, Args, Serialize)]
pub struct TrainSelfplayFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub manifest: Option<PathBuf>,
    /// Detector checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub detector: Option<PathBuf>,
    /// Policy checkpoint path.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    /// Competitor sampling: prioritized | fictitious | vanilla
    #[arg(long, value_parser = named::<CompetitorMode>)]
    #[serde(skip_serializing_if = "skip")]
    pub mode: Option<CompetitorMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub patch_size: Option<usize>,
    /// Discount factor (default 0.96).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub gamma: Option<f64>,
    /// Terminating at t <= t_min is penalised (default 4).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub t_min: Option<usize>,
    /// Step bound; terminating at t >= t_max is penalised (default 1024).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub t_max: Option<usize>,
    /// Disable the repetition reward.
    #[arg(long)]
    #[serde(skip_serializing_if = "not")]
    pub no_rep: bool,
    /// Disable the iteration-bounding reward.
    #[arg(long)]
    #[serde(skip_serializing_if = "not")]
    pub no_iter: bool,
    /// Replace agent b by this constant score (single-agent training).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub non_sp_threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub max_updates: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub episodes_per_update: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub lr: Option<f64>,
    /// Score selections with the ground-truth masks instead of the detector.
    #[arg(long)]
    #[serde(skip_serializing_if = "not")]
    pub oracle_rewards: bool,
    /// Training history CSV (default: beside the checkpoint).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSelfplaySettings {
    pub manifest: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub mode: CompetitorMode,
    pub patch_size: usize,
    pub gamma: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub no_rep: bool,
    pub no_iter: bool,
    pub non_sp_threshold: Option<f64>,
    pub terminal_weight: f64,
    pub terminators: Terminators,
    pub seed: u64,
    pub max_updates: usize,
    pub episodes_per_update: usize,
    pub lr: f64,
    pub baseline: bool,
    pub max_grad_norm: Option<f64>,
    pub snapshot_stride: usize,
    pub early_stop: bool,
    pub initial_terminate_prob: f64,
    pub oracle_rewards: bool,
}

impl Default for TrainSelfplaySettings {
    fn default() -> Self {
        let c = SelfPlayConfig::default();
        Self {
            manifest: None,
            detector: None,
            out: None,
            history: None,
            mode: c.mode,
            patch_size: c.env.patch_size,
            gamma: c.gamma,
            t_min: c.env.t_min,
            t_max: c.env.t_max,
            no_rep: !c.env.enable_rep,
            no_iter: !c.env.enable_iter,
            non_sp_threshold: None,
            terminal_weight: c.env.terminal_weight,
            terminators: c.env.terminators,
            seed: c.seed,
            max_updates: c.max_updates,
            episodes_per_update: c.episodes_per_update,
            lr: c.learning_rate,
            baseline: c.baseline,
            max_grad_norm: c.max_grad_norm,
            snapshot_stride: c.snapshot_stride,
            early_stop: c.early_stop,
            initial_terminate_prob: c.initial_terminate_prob,
            oracle_rewards: false,
        }
    }
}

impl TrainSelfplaySettings {
    pub fn selfplay(&self) -> SelfPlayConfig {
        let d = SelfPlayConfig::default();
        SelfPlayConfig {
            mode: self.mode,
            gamma: self.gamma,
            episodes_per_update: self.episodes_per_update,
            max_updates: self.max_updates,
            seed: self.seed,
            env: EnvConfig {
                t_min: self.t_min,
                t_max: self.t_max,
                patch_size: self.patch_size,
                terminal_weight: self.terminal_weight,
                enable_rep: !self.no_rep,
                enable_iter: !self.no_iter,
                opponent: self.non_sp_threshold.map_or(Opponent::SelfPlay, Opponent::Fixed),
                terminators: self.terminators,
                ..d.env
            },
            snapshot_stride: self.snapshot_stride,
            learning_rate: self.lr,
            baseline: self.baseline,
            max_grad_norm: self.max_grad_norm,
            early_stop: self.early_stop,
            initial_terminate_prob: self.initial_terminate_prob,
            ..d
        }
    }
}

fn train_selfplay(flags: &TrainSelfplayFlags) -> Result<()> {
    let s: TrainSelfplaySettings = config::resolve(flags.config.as_deref(), flags)?;
    let manifest = required(&s.manifest, "manifest")?;
    let det_path = required(&s.detector, "detector")?;
    let out = required(&s.out, "out")?;
    let detector = checkpoint::load_detector(&det_path)?;
    let masks = if s.oracle_rewards { Masks::Require } else { Masks::Ignore };
    let samples = io::load_dataset(&manifest, masks)?;
    let source = if s.oracle_rewards {
        RewardSource::Oracle
    } else {
        RewardSource::Detector
    };
    let cfg = s.selfplay();
    let outcome = pipeline::fit_policy(&samples, &detector, source, &cfg, None)?;
    checkpoint::save_policy(&out, &outcome.policy)?;
    let history = s
        .history
        .clone()
        .unwrap_or_else(|| out.with_extension("history.csv"));
    report::write_history(&history, &outcome.history)?;
    RunInfo::new("train-selfplay", s.seed, &s)?.write_for(&out)?;
    if let Some(last) = outcome.history.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

// ------------------------------------------------------------------ infer

#[derive(Debug, Args, Serialize)]
pub struct InferFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub patch_size: Option<usize>,
    /// auto | none | x,y;x,y;...
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub shifts: Option<String>,
    /// Output mask (.png or .pgm).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    /// Per-step JSONL trace; scores selections against a blank opponent.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSettings {
    pub policy: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub patch_size: usize,
    pub shifts: String,
    pub t_min: usize,
    pub t_max: usize,
    /// Return an empty mask when the whole image scores below 0.5.
    pub presence_gate: bool,
    pub seed: u64,
}

impl Default for InferSettings {
    fn default() -> Self {
        let e = EnvConfig::default();
        Self {
            policy: None,
            detector: None,
            image: None,
            out: None,
            trace: None,
            patch_size: e.patch_size,
            shifts: "auto".into(),
            t_min: e.t_min,
            t_max: e.t_max,
            presence_gate: true,
            seed: 0,
        }
    }
}

fn eval_options(patch_size: usize, t_min: usize, t_max: usize, shifts: &str, gate: bool) -> Result<EvalOptions> {
    let env = EnvConfig {
        patch_size,
        t_min,
        t_max,
        ..EnvConfig::default()
    };
    let mut opts = EvalOptions::new(env);
    opts.shifts = parse_shifts(shifts, patch_size)?;
    opts.presence_gate = gate;
    Ok(opts)
}

fn infer(flags: &InferFlags) -> Result<()> {
    let s: InferSettings = config::resolve(flags.config.as_deref(), flags)?;
    let policy = checkpoint::load_policy(&required(&s.policy, "policy")?)?;
    let detector = checkpoint::load_detector(&required(&s.detector, "detector")?)?;
    let image = io::load_image(&required(&s.image, "image")?)?;
    let out = required(&s.out, "out")?;
    let mut opts = eval_options(s.patch_size, s.t_min, s.t_max, &s.shifts, s.presence_gate)?;
    if s.trace.is_some() {
        opts.mode = InferenceMode::DummyOpponent;
    }
    let seg = pipeline::segment_image(&policy, &detector, &image, &opts)?;
    io::save_mask(&out, &seg.mask)?;
    if let Some(t) = &s.trace {
        let steps: Vec<_> = seg.runs.iter().flat_map(|r| r.trace.iter().cloned()).collect();
        report::write_trace(t, &steps)?;
    }
    RunInfo::new("infer", s.seed, &s)?.write_for(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "present": seg.present,
            "foreground_pixels": seg.mask.count(),
            "runs": seg.runs.iter().map(|r| serde_json::json!({
                "selected": r.selected, "steps": r.steps, "terminated": r.terminated,
            })).collect::<Vec<_>>(),
        })
    );
    Ok(())
}

// --------------------------------------------------------------- evaluate

#[derive(Debug, Args, Serialize)]
pub struct EvaluateFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Manifest whose entries carry mask paths.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub manifest: Option<PathBuf>,
    /// Evaluate this policy checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub detector: Option<PathBuf>,
    /// Evaluate the sliding-window baseline instead of a policy.
    #[arg(long)]
    #[serde(skip_serializing_if = "not")]
    pub sliding_window: bool,
    /// Evaluate precomputed masks named after the manifest images.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub patch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub shifts: Option<String>,
    /// Report JSON path.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub manifest: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub sliding_window: bool,
    pub pred_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub patch_size: usize,
    pub shifts: String,
    pub t_min: usize,
    pub t_max: usize,
    pub threshold: f64,
    pub presence_gate: bool,
    pub seed: u64,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        let i = InferSettings::default();
        Self {
            manifest: None,
            policy: None,
            detector: None,
            sliding_window: false,
            pred_dir: None,
            out: None,
            patch_size: i.patch_size,
            shifts: i.shifts,
            t_min: i.t_min,
            t_max: i.t_max,
            threshold: 0.5,
            presence_gate: true,
            seed: 0,
        }
    }
}

fn pred_path(dir: &Path, image_path: &str) -> PathBuf {
    let stem = Path::new(image_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ["png", "pgm"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(format!("{stem}.png")))
}

fn evaluate(flags: &EvaluateFlags) -> Result<()> {
    let s: EvaluateSettings = config::resolve(flags.config.as_deref(), flags)?;
    let manifest = required(&s.manifest, "manifest")?;
    let out = required(&s.out, "out")?;
    let test = io::load_dataset(&manifest, Masks::Require)?;
    let chosen = [s.policy.is_some(), s.sliding_window, s.pred_dir.is_some()];
    if chosen.iter().filter(|&&c| c).count() != 1 {
        return Err(Error::Config(
            "choose exactly one of --policy, --sliding-window, --pred-dir".into(),
        ));
    }
    let opts = eval_options(s.patch_size, s.t_min, s.t_max, &s.shifts, s.presence_gate)?;
    let (method, eval) = if let Some(dir) = &s.pred_dir {
        let entries = io::read_manifest(&manifest)?;
        let preds = entries
            .iter()
            .map(|e| io::load_mask(&pred_path(dir, &e.image_path)))
            .collect::<Result<Vec<Mask>>>()?;
        ("pred-dir", pipeline::evaluate_masks(&preds, &test, &opts.env)?)
    } else {
        let detector = checkpoint::load_detector(&required(&s.detector, "detector")?)?;
        if let Some(p) = &s.policy {
            let policy = checkpoint::load_policy(p)?;
            ("policy", pipeline::evaluate_policy(&policy, &detector, &test, &opts)?)
        } else {
            let eval = pipeline::evaluate_sliding_window(
                |_| &detector,
                &detector,
                &test,
                &opts.env,
                s.threshold,
                s.presence_gate,
            )?;
            ("sliding-window", eval)
        }
    };
    let report = Report::new(method, eval, &s, s.seed)?;
    report::write_json(&out, &report)?;
    RunInfo::new("evaluate", s.seed, &s)?.write_for(&out)?;
    print!("{}", report.table());
    Ok(())
}

// ------------------------------------------------------------- experiment

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Ablation,
    Baselines,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "skip")]
    pub suite: Option<Suite>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds (default 1,2,3).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "skip")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub n_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub n_test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub max_updates: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub detector_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub suite: Suite,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub max_updates: usize,
    pub episodes_per_update: usize,
    pub lr: f64,
    pub detector_epochs: usize,
    pub patch_size: usize,
    pub gamma: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub mode: CompetitorMode,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            suite: Suite::Baselines,
            out: None,
            seeds: e.seeds,
            n_train: e.n_train,
            n_test: e.n_test,
            max_updates: e.selfplay.max_updates,
            episodes_per_update: e.selfplay.episodes_per_update,
            lr: e.selfplay.learning_rate,
            detector_epochs: e.detector.epochs,
            patch_size: e.selfplay.env.patch_size,
            gamma: e.selfplay.gamma,
            t_min: e.selfplay.env.t_min,
            t_max: e.selfplay.env.t_max,
            mode: e.selfplay.mode,
        }
    }
}

impl ExperimentSettings {
    pub fn experiment(&self) -> ExperimentConfig {
        let mut e = ExperimentConfig {
            seeds: self.seeds.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
            ..Default::default()
        };
        e.detector.epochs = self.detector_epochs;
        let sp = &mut e.selfplay;
        sp.max_updates = self.max_updates;
        sp.episodes_per_update = self.episodes_per_update;
        sp.learning_rate = self.lr;
        sp.gamma = self.gamma;
        sp.mode = self.mode;
        sp.env.patch_size = self.patch_size;
        sp.env.t_min = self.t_min;
        sp.env.t_max = self.t_max;
        e
    }
}

fn run_experiment(flags: &ExperimentFlags) -> Result<()> {
    let s: ExperimentSettings = config::resolve(flags.config.as_deref(), flags)?;
    let out = required(&s.out, "out")?;
    let cfg = s.experiment();
    let variants = match s.suite {
        Suite::Ablation => experiment::ablation_variants(),
        Suite::Baselines => experiment::baseline_variants(),
    };
    let rows = experiment::run_suite(&cfg, &variants, &mut |line| eprintln!("{line}"))?;
    let table = experiment::format_table(&rows, s.suite == Suite::Baselines);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report::write_json(&out.join("rows.json"), &rows)?;
    std::fs::write(out.join("table.txt"), &table).map_err(|e| Error::io(&out, e))?;
    let seed = s.seeds.first().copied().unwrap_or(0);
    RunInfo::new("experiment", seed, &s)?.write_for(&out)?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(f) => gen_data(f),
        Command::TrainDetector(f) => train_detector(f),
        Command::TrainSelfplay(f) => train_selfplay(f),
        Command::Infer(f) => infer(f),
        Command::Evaluate(f) => evaluate(f),
        Command::Experiment(f) => run_experiment(f),
    }
}

/// Machine-readable error body printed on failure.
pub fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}
