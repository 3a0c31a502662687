//! In-memory pipeline stages shared by the CLI, the experiment suites and the
//! acceptance tests: data splits, detector fitting, self-play training and
//! set-level evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use segplay_core::detector::{train_detector, CountingScorer, DetectorTrainReport, PatchScorer};
use segplay_core::env::EnvConfig;
use segplay_core::grid::PatchGrid;
use segplay_core::inference::{self, InferenceMode};
use segplay_core::metrics::{self, Aggregate, ImageScore};
use segplay_core::selfplay::{self, HistoryRow, TrainHooks, TrainOutcome};
use segplay_core::synth::{generate_dataset, Sample, SyntheticConfig};
use segplay_core::{
    Detector, DetectorTrainConfig, Image, Mask, OracleDetector, Policy, Result, SelfPlayConfig,
};

/// Seed offset separating the test stream from the training stream.
const TEST_STREAM: u64 = 0x7e57_0000;

/// Train and test samples drawn from independent seeded streams.
pub fn synthetic_split(
    cfg: &SyntheticConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate_dataset(&mut ChaCha8Rng::seed_from_u64(seed), cfg, n_train)?;
    let test = generate_dataset(&mut ChaCha8Rng::seed_from_u64(seed ^ TEST_STREAM), cfg, n_test)?;
    Ok((train, test))
}

/// Fits the presence detector on image-level labels only.
pub fn fit_detector(
    train: &[Sample],
    cfg: &DetectorTrainConfig,
) -> Result<(Detector, DetectorTrainReport)> {
    let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    train_detector(&images, &labels, cfg)
}

/// Which detector scores the agents' selections during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Detector,
    /// Ground-truth masks (upper bound only, uses pixel labels).
    Oracle,
}

/// Self-play (or fixed-opponent) training on the positively labelled images.
pub fn fit_policy(
    train: &[Sample],
    detector: &Detector,
    source: RewardSource,
    cfg: &SelfPlayConfig,
    on_update: Option<&mut dyn FnMut(&HistoryRow)>,
) -> Result<TrainOutcome> {
    let positives: Vec<&Sample> = train.iter().filter(|s| s.label == 1).collect();
    let images: Vec<Image> = positives.iter().map(|s| s.image.clone()).collect();
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64() * 1e3;
    let mut forward = on_update;
    let mut cb = |row: &HistoryRow, _: &segplay_core::policy::UpdateStats| {
        if let Some(f) = forward.as_mut() {
            f(row);
        }
    };
    let mut hooks = TrainHooks {
        clock: Some(&clock),
        on_update: Some(&mut cb),
    };
    match source {
        RewardSource::Detector => selfplay::train(&images, |_| detector, cfg, &mut hooks),
        RewardSource::Oracle => selfplay::train(
            &images,
            |i| OracleDetector::new(positives[i].mask.clone()),
            cfg,
            &mut hooks,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub env: EnvConfig,
    pub shifts: Vec<(usize, usize)>,
    pub mode: InferenceMode,
    /// Skip segmentation (empty mask) when the whole-image detector score is
    /// below 0.5.
    pub presence_gate: bool,
}

impl EvalOptions {
    pub fn new(env: EnvConfig) -> Self {
        let shifts = inference::default_shifts(env.patch_size);
        Self {
            env,
            shifts,
            mode: InferenceMode::Unopposed,
            presence_gate: true,
        }
    }
}

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub index: usize,
    pub label: u8,
    pub present: bool,
    pub score: ImageScore,
    /// Patches selected on the unshifted grid (None when not segmented).
    pub selected: Option<usize>,
    /// Base-grid patches containing at least one ROI pixel.
    pub gt_patches: usize,
    /// Termination step of each grid run (None: ran out of steps or patches).
    pub termination_steps: Vec<Option<usize>>,
    pub detector_calls: usize,
    pub patch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    fn from_images(per_image: Vec<ImageEval>) -> Self {
        let scores: Vec<ImageScore> = per_image.iter().map(|e| e.score).collect();
        Self {
            aggregate: metrics::aggregate(&scores),
            per_image,
        }
    }

    pub fn miou(&self) -> f64 {
        self.aggregate.miou
    }

    /// Fraction of played episodes that terminated with `t_min < t < t_max`.
    pub fn termination_in_range(&self, t_min: usize, t_max: usize) -> Option<f64> {
        let runs: Vec<&Option<usize>> = self
            .per_image
            .iter()
            .flat_map(|e| e.termination_steps.iter())
            .collect();
        if runs.is_empty() {
            return None;
        }
        let ok = runs
            .iter()
            .filter(|t| t.is_some_and(|t| t_min < t && t < t_max))
            .count();
        Some(ok as f64 / runs.len() as f64)
    }

    /// Mean selected and ground-truth patch counts over segmented positives.
    pub fn patch_counts(&self) -> Option<(f64, f64)> {
        let rows: Vec<(usize, usize)> = self
            .per_image
            .iter()
            .filter(|e| e.label == 1)
            .filter_map(|e| e.selected.map(|s| (s, e.gt_patches)))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.0 as f64).sum::<f64>() / n,
            rows.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        ))
    }
}

fn gt_patch_count(mask: &Mask, env: &EnvConfig) -> Result<usize> {
    let (w, h) = mask.dims();
    let grid = PatchGrid::new(w, h, env.patch_size, (0, 0), env.fit)?;
    Ok(grid.rects().filter(|&r| mask.count_in(r) > 0).count())
}

/// Segments each test image with `policy` and scores it against its mask.
pub fn evaluate_policy(
    policy: &Policy,
    detector: &Detector,
    test: &[Sample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(test.len());
    for (index, s) in test.iter().enumerate() {
        let present = !opts.presence_gate || inference::object_present(detector, &s.image);
        let counting = CountingScorer::new(detector);
        let (mask, selected, termination_steps, patch_count) = if present {
            let r = inference::segment_pixellevel(
                policy,
                &counting,
                &s.image,
                &opts.env,
                &opts.shifts,
                opts.mode,
            )?;
            let terms = r
                .runs
                .iter()
                .map(|run| run.terminated.then(|| run.steps - 1))
                .collect();
            let base = &r.runs[0];
            (r.mask.clone(), Some(base.selected.len()), terms, base.grid.len())
        } else {
            (Mask::empty(s.mask.width(), s.mask.height()), None, Vec::new(), 0)
        };
        rows.push(ImageEval {
            index,
            label: s.label,
            present,
            score: metrics::score_pair(&mask, &s.mask)?,
            selected,
            gt_patches: gt_patch_count(&s.mask, &opts.env)?,
            termination_steps,
            detector_calls: counting.calls(),
            patch_count,
        });
    }
    Ok(EvalReport::from_images(rows))
}

/// Sliding-window detector baseline with stride equal to the patch size.
pub fn evaluate_sliding_window<S: PatchScorer>(
    scorer_for: impl Fn(&Sample) -> S,
    detector: &Detector,
    test: &[Sample],
    env: &EnvConfig,
    threshold: f64,
    presence_gate: bool,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(test.len());
    for (index, s) in test.iter().enumerate() {
        let present = !presence_gate || inference::object_present(detector, &s.image);
        let counting = CountingScorer::new(scorer_for(s));
        let (mask, windows) = if present {
            let (m, w) = inference::sliding_window_segment(
                &counting,
                &s.image,
                env.patch_size,
                env.patch_size,
                threshold,
            )?;
            (m, w)
        } else {
            (Mask::empty(s.mask.width(), s.mask.height()), 0)
        };
        let selected = present.then(|| {
            let grid = PatchGrid::new(s.image.width(), s.image.height(), env.patch_size, (0, 0), env.fit);
            grid.map(|g| g.rects().filter(|&r| mask.count_in(r) > 0).count()).unwrap_or(0)
        });
        rows.push(ImageEval {
            index,
            label: s.label,
            present,
            score: metrics::score_pair(&mask, &s.mask)?,
            selected,
            gt_patches: gt_patch_count(&s.mask, env)?,
            termination_steps: Vec::new(),
            detector_calls: counting.calls(),
            patch_count: windows,
        });
    }
    Ok(EvalReport::from_images(rows))
}

/// Result of segmenting one image outside an evaluation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub present: bool,
    /// One entry per grid shift; empty when the presence gate fired.
    pub runs: Vec<inference::PatchLevelResult>,
}

/// Segments a single image with the options used during evaluation.
pub fn segment_image(
    policy: &Policy,
    detector: &Detector,
    image: &Image,
    opts: &EvalOptions,
) -> Result<Segmentation> {
    let present = !opts.presence_gate || inference::object_present(detector, image);
    if !present {
        return Ok(Segmentation {
            mask: Mask::empty(image.width(), image.height()),
            present,
            runs: Vec::new(),
        });
    }
    let r = inference::segment_pixellevel(policy, detector, image, &opts.env, &opts.shifts, opts.mode)?;
    Ok(Segmentation {
        mask: r.mask,
        present,
        runs: r.runs,
    })
}

/// Scores precomputed masks, paired with `test` by position.
pub fn evaluate_masks(preds: &[Mask], test: &[Sample], env: &EnvConfig) -> Result<EvalReport> {
    if preds.len() != test.len() {
        return Err(segplay_core::Error::InvalidConfig(format!(
            "{} predictions for {} test images",
            preds.len(),
            test.len()
        )));
    }
    let mut rows = Vec::with_capacity(test.len());
    for (index, (mask, s)) in preds.iter().zip(test).enumerate() {
        let grid = PatchGrid::new(s.image.width(), s.image.height(), env.patch_size, (0, 0), env.fit)?;
        rows.push(ImageEval {
            index,
            label: s.label,
            present: mask.count() > 0,
            score: metrics::score_pair(mask, &s.mask)?,
            selected: Some(grid.rects().filter(|&r| mask.count_in(r) > 0).count()),
            gt_patches: gt_patch_count(&s.mask, env)?,
            termination_steps: Vec::new(),
            detector_calls: 0,
            patch_count: grid.len(),
        });
    }
    Ok(EvalReport::from_images(rows))
}
