//! Experiment bundles: the component ablation grid and the baseline
//! comparison, each repeated over several seeds.
//!
//! Every seed reruns the whole pipeline: a fresh synthetic split, a fresh
//! detector and fresh policies, all derived from that seed. Variants of one
//! seed share the split and the detector.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use segplay_core::env::Opponent;
use segplay_core::math;
use segplay_core::metrics::Aggregate;
use segplay_core::synth::{Sample, SyntheticConfig};
use segplay_core::{Detector, DetectorTrainConfig, Policy, Result, SelfPlayConfig};

use crate::pipeline::{self, EvalOptions, EvalReport, RewardSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub detector: DetectorTrainConfig,
    pub selfplay: SelfPlayConfig,
    /// Grid offsets for pixel-level voting; `None` uses the default three.
    pub shifts: Option<Vec<(usize, usize)>>,
    pub sliding_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            n_train: 500,
            n_test: 100,
            seeds: vec![1, 2, 3],
            detector: DetectorTrainConfig::default(),
            selfplay: SelfPlayConfig::default(),
            shifts: None,
            sliding_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    SelfPlay { rep: bool, iter: bool },
    /// Agent `b` replaced by a constant score.
    NonSelfPlay { threshold: f64, rep: bool, iter: bool },
    SlidingWindow,
    /// Self-play against ground-truth patch scores; an upper bound.
    OracleBound,
}

impl Variant {
    pub const RLSP: Variant = Variant::SelfPlay {
        rep: true,
        iter: true,
    };

    pub fn label(&self) -> String {
        let sr = |rep: bool, iter: bool| match (rep, iter) {
            (true, true) => String::new(),
            (true, false) => " -iter".into(),
            (false, true) => " -rep".into(),
            (false, false) => " -rep -iter".into(),
        };
        match *self {
            Variant::SelfPlay { rep, iter } => format!("RLSP{}", sr(rep, iter)),
            Variant::NonSelfPlay { threshold, rep, iter } => {
                format!("non-SP@{threshold}{}", sr(rep, iter))
            }
            Variant::SlidingWindow => "sliding-window".into(),
            Variant::OracleBound => "oracle bound".into(),
        }
    }
}

/// The six rows of the component ablation: self-play on/off crossed with the
/// two shaping rewards.
pub fn ablation_variants() -> Vec<Variant> {
    let non_sp = |rep, iter| Variant::NonSelfPlay {
        threshold: 0.8,
        rep,
        iter,
    };
    vec![
        non_sp(false, false),
        non_sp(true, true),
        Variant::SelfPlay {
            rep: false,
            iter: false,
        },
        Variant::SelfPlay {
            rep: true,
            iter: false,
        },
        Variant::SelfPlay {
            rep: false,
            iter: true,
        },
        Variant::RLSP,
    ]
}

pub fn baseline_variants() -> Vec<Variant> {
    let non_sp = |threshold| Variant::NonSelfPlay {
        threshold,
        rep: true,
        iter: true,
    };
    vec![
        Variant::OracleBound,
        non_sp(0.8),
        non_sp(0.5),
        non_sp(0.2),
        Variant::SlidingWindow,
        Variant::RLSP,
    ]
}

/// Data and detector shared by all variants of one seed.
pub struct SeedContext {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub detector: Detector,
    pub detector_ms: f64,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (train, test) = pipeline::synthetic_split(&cfg.synthetic, cfg.n_train, cfg.n_test, seed)?;
    let start = Instant::now();
    let dcfg = DetectorTrainConfig {
        seed,
        ..cfg.detector.clone()
    };
    let (detector, _) = pipeline::fit_detector(&train, &dcfg)?;
    Ok(SeedContext {
        seed,
        train,
        test,
        detector,
        detector_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub aggregate: Aggregate,
    /// Fraction of grid runs ending with `t_min < t < t_max`.
    pub termination_in_range: Option<f64>,
    /// Mean (selected, ground-truth) base-grid patch counts on positives.
    pub patch_counts: Option<(f64, f64)>,
    pub mean_detector_calls: f64,
    pub train_ms: f64,
    pub updates: usize,
}

fn summarize(seed: u64, eval: &EvalReport, train_ms: f64, updates: usize, t: (usize, usize)) -> SeedResult {
    let calls: Vec<f64> = eval.per_image.iter().map(|e| e.detector_calls as f64).collect();
    SeedResult {
        seed,
        aggregate: eval.aggregate,
        termination_in_range: eval.termination_in_range(t.0, t.1),
        patch_counts: eval.patch_counts(),
        mean_detector_calls: math::mean(&calls),
        train_ms,
        updates,
    }
}

pub fn run_variant(cfg: &ExperimentConfig, ctx: &SeedContext, variant: Variant) -> Result<SeedResult> {
    Ok(run_variant_with_policy(cfg, ctx, variant)?.0)
}

/// Like [`run_variant`], also returning the trained policy (None for the
/// sliding-window baseline).
pub fn run_variant_with_policy(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    variant: Variant,
) -> Result<(SeedResult, Option<Policy>)> {
    let mut sp = SelfPlayConfig {
        seed: ctx.seed,
        ..cfg.selfplay.clone()
    };
    let bounds = (sp.env.t_min, sp.env.t_max);
    let mut opts = EvalOptions::new(sp.env.clone());
    if let Some(s) = &cfg.shifts {
        opts.shifts = s.clone();
    }
    let source = match variant {
        Variant::SlidingWindow => {
            let eval = pipeline::evaluate_sliding_window(
                |_| &ctx.detector,
                &ctx.detector,
                &ctx.test,
                &sp.env,
                cfg.sliding_threshold,
                opts.presence_gate,
            )?;
            return Ok((summarize(ctx.seed, &eval, 0.0, 0, bounds), None));
        }
        Variant::SelfPlay { rep, iter } => {
            sp.env.enable_rep = rep;
            sp.env.enable_iter = iter;
            RewardSource::Detector
        }
        Variant::NonSelfPlay { threshold, rep, iter } => {
            sp.env.enable_rep = rep;
            sp.env.enable_iter = iter;
            sp.env.opponent = Opponent::Fixed(threshold);
            RewardSource::Detector
        }
        Variant::OracleBound => RewardSource::Oracle,
    };
    let start = Instant::now();
    let out = pipeline::fit_policy(&ctx.train, &ctx.detector, source, &sp, None)?;
    let train_ms = start.elapsed().as_secs_f64() * 1e3;
    let eval = pipeline::evaluate_policy(&out.policy, &ctx.detector, &ctx.test, &opts)?;
    let result = summarize(ctx.seed, &eval, train_ms, out.history.len(), bounds);
    Ok((result, Some(out.policy)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub label: String,
    pub per_seed: Vec<SeedResult>,
}

impl Row {
    fn column(&self, f: impl Fn(&SeedResult) -> f64) -> Vec<f64> {
        self.per_seed.iter().map(f).collect()
    }

    pub fn mean_miou(&self) -> f64 {
        math::mean(&self.column(|s| s.aggregate.miou))
    }

    pub fn std_miou(&self) -> f64 {
        math::sample_std(&self.column(|s| s.aggregate.miou))
    }

    pub fn mean_mdsc(&self) -> f64 {
        math::mean(&self.column(|s| s.aggregate.mdsc))
    }

    /// Seed-mean of FP + FN (percent of image).
    pub fn mean_fp_fn(&self) -> f64 {
        math::mean(&self.column(|s| s.aggregate.fp + s.aggregate.fn_))
    }

    pub fn mean_aggregate(&self) -> Aggregate {
        let m = |f: fn(&Aggregate) -> f64| math::mean(&self.column(|s| f(&s.aggregate)));
        Aggregate {
            miou: m(|a| a.miou),
            mdsc: m(|a| a.mdsc),
            tp: m(|a| a.tp),
            tn: m(|a| a.tn),
            fp: m(|a| a.fp),
            fn_: m(|a| a.fn_),
        }
    }

    /// Mean over seeds that produced a value.
    pub fn mean_termination_in_range(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_seed.iter().filter_map(|s| s.termination_in_range).collect();
        (!v.is_empty()).then(|| math::mean(&v))
    }

    pub fn mean_patch_counts(&self) -> Option<(f64, f64)> {
        let v: Vec<(f64, f64)> = self.per_seed.iter().filter_map(|s| s.patch_counts).collect();
        (!v.is_empty()).then(|| {
            (
                math::mean(&v.iter().map(|c| c.0).collect::<Vec<_>>()),
                math::mean(&v.iter().map(|c| c.1).collect::<Vec<_>>()),
            )
        })
    }
}

/// Runs every variant for every seed. `progress` receives one line per
/// finished (seed, variant).
pub fn run_suite(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<Row>> {
    let mut rows: Vec<Row> = variants
        .iter()
        .map(|&v| Row {
            variant: v,
            label: v.label(),
            per_seed: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let ctx = prepare(cfg, seed)?;
        progress(&format!("seed {seed}: detector trained in {:.0} ms", ctx.detector_ms));
        for row in rows.iter_mut() {
            let r = run_variant(cfg, &ctx, row.variant)?;
            progress(&format!(
                "seed {seed}: {:<24} mIoU {:6.2}  ({:.0} ms)",
                row.label,
                100.0 * r.aggregate.miou,
                r.train_ms
            ));
            row.per_seed.push(r);
        }
    }
    Ok(rows)
}

/// Plain-text table of seed means (and per-seed mIoU for self-play rows
/// when `seed_rows` is set).
pub fn format_table(rows: &[Row], seed_rows: bool) -> String {
    let mut s = format!(
        "{:<26} {:>7} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "variant", "mIoU", "std", "mDSC", "TP", "TN", "FP", "FN"
    );
    for r in rows {
        let a = r.mean_aggregate();
        s += &format!(
            "{:<26} {:>7.2} {:>6.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
            r.label,
            100.0 * a.miou,
            100.0 * r.std_miou(),
            100.0 * a.mdsc,
            a.tp,
            a.tn,
            a.fp,
            a.fn_
        );
        if seed_rows && matches!(r.variant, Variant::SelfPlay { .. }) {
            for p in &r.per_seed {
                s += &format!(
                    "{:<26} {:>7.2}\n",
                    format!("  {} (seed {})", r.label, p.seed),
                    100.0 * p.aggregate.miou
                );
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_have_expected_rows() {
        let abl = ablation_variants();
        assert_eq!(abl.len(), 6);
        assert_eq!(abl.iter().filter(|v| matches!(v, Variant::SelfPlay { .. })).count(), 4);
        assert_eq!(abl.last(), Some(&Variant::RLSP));
        let labels: Vec<String> = baseline_variants().iter().map(Variant::label).collect();
        assert_eq!(
            labels,
            ["oracle bound", "non-SP@0.8", "non-SP@0.5", "non-SP@0.2", "sliding-window", "RLSP"]
        );
    }

    #[test]
    fn tiny_suite_runs() {
        let mut cfg = ExperimentConfig {
            n_train: 40,
            n_test: 6,
            seeds: vec![5],
            ..Default::default()
        };
        cfg.detector.epochs = 1;
        cfg.selfplay.max_updates = 2;
        cfg.selfplay.episodes_per_update = 2;
        let mut lines = Vec::new();
        let rows = run_suite(
            &cfg,
            &[Variant::SlidingWindow, Variant::RLSP],
            &mut |l| lines.push(l.to_string()),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(lines.len(), 3);
        assert_eq!(rows[1].per_seed[0].updates, 2);
        assert_eq!(rows[1].per_seed[0].mean_detector_calls, 0.0);
        let table = format_table(&rows, true);
        assert!(table.contains("RLSP (seed 5)"));
    }
}
