//! Test-time segmentation: greedy single-agent rollouts, shifted-grid voting
//! and the sliding-window detector baseline.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{PatchScorer, PRESENCE_THRESHOLD};
use crate::env::{Action, Agent, EnvConfig, GameState, Opponent, StepRecord};
use crate::error::{Error, Result};
use crate::grid::{self, PatchGrid};
use crate::image::{Image, Mask, Rect};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// The agent plays alone; the detector is never consulted.
    #[default]
    Unopposed,
    /// A virtual opponent always plays an all-zero patch placed outside the
    /// grid; the agent's selections are scored for the trace.
    DummyOpponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchLevelResult {
    pub mask: Mask,
    /// Patches in the mask, in selection order.
    pub selected: Vec<usize>,
    /// Steps taken, including a final terminating step.
    pub steps: usize,
    pub terminated: bool,
    pub grid: PatchGrid,
    /// Per-step records (dummy-opponent mode only).
    pub trace: Vec<StepRecord>,
}

/// Greedy rollout of `policy` on `image`. Already-selected patches are never
/// chosen again; the game stops when the policy terminates, when `t_max`
/// steps have been taken, or when every patch has been selected. The
/// terminating step's patch is not part of the mask.
pub fn segment_patchlevel<S: PatchScorer>(
    policy: &Policy,
    scorer: S,
    image: &Image,
    env: &EnvConfig,
    mode: InferenceMode,
) -> Result<PatchLevelResult> {
    match mode {
        InferenceMode::Unopposed => unopposed(policy, image, env),
        InferenceMode::DummyOpponent => dummy(policy, scorer, image, env),
    }
}

fn unopposed(policy: &Policy, image: &Image, env: &EnvConfig) -> Result<PatchLevelResult> {
    env.validate()?;
    let grid = PatchGrid::new(image.width(), image.height(), env.patch_size, env.offset, env.fit)?;
    let rects: Vec<Rect> = grid.rects().collect();
    let mut canvas = grid.canvas(image)?;
    let mut erased = vec![false; grid.len()];
    let mut selected = Vec::new();
    let mut steps = 0;
    let mut terminated = false;
    while steps < env.t_max && selected.len() < grid.len() {
        let enc = policy.encode_parts(&canvas, &rects, &erased);
        let allowed: Vec<bool> = erased.iter().map(|e| !e).collect();
        let (action, _) = policy.greedy_action(&enc, Some(&allowed))?;
        steps += 1;
        if action.terminate {
            terminated = true;
            break;
        }
        canvas.zero_rect(rects[action.patch])?;
        erased[action.patch] = true;
        selected.push(action.patch);
    }
    let mask = grid::mask_from_selection(&grid, &selected)?;
    Ok(PatchLevelResult {
        mask,
        selected,
        steps,
        terminated,
        grid,
        trace: Vec::new(),
    })
}

fn dummy<S: PatchScorer>(
    policy: &Policy,
    scorer: S,
    image: &Image,
    env: &EnvConfig,
) -> Result<PatchLevelResult> {
    let blank = scorer.blank_score();
    let cfg = EnvConfig {
        opponent: Opponent::Fixed(blank.clamp(0.0, 1.0)),
        ..env.clone()
    };
    let mut state = GameState::reset(image, scorer, &cfg)?;
    let mut selected = Vec::new();
    let mut trace = Vec::new();
    let mut terminated = false;
    while !state.is_done() && selected.len() < state.num_patches() {
        let enc = policy.encode(&state);
        let allowed: Vec<bool> = state.erased().iter().map(|e| !e).collect();
        let (action, _) = policy.greedy_action(&enc, Some(&allowed))?;
        let sel_a = state.apply_selection(Agent::A, action)?;
        let sel_b = state.apply_selection(Agent::B, Action::select(0))?;
        let rec = state.finish_step(action, sel_a, None, sel_b)?;
        trace.push(rec);
        if action.terminate {
            terminated = true;
            break;
        }
        selected.push(action.patch);
    }
    let grid = *state.grid();
    let mask = grid::mask_from_selection(&grid, &selected)?;
    Ok(PatchLevelResult {
        mask,
        selected,
        steps: trace.len(),
        terminated,
        grid,
        trace,
    })
}

/// Base grid plus grids shifted by half a patch along each axis.
pub fn default_shifts(patch_size: usize) -> Vec<(usize, usize)> {
    let h = patch_size / 2;
    let mut out = vec![(0, 0)];
    for s in [(h, 0), (0, h)] {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Pixel-wise majority over runs, counting only runs whose grid covers the
/// pixel. Ties go to foreground; pixels no grid covers are background.
pub fn majority_vote(runs: &[(Mask, Mask)]) -> Result<Mask> {
    let first = &runs.first().ok_or(Error::InvalidGrid("no runs to vote over".into()))?.0;
    let (w, h) = first.dims();
    let mut votes = vec![0usize; w * h];
    let mut covering = vec![0usize; w * h];
    for (mask, cover) in runs {
        mask.ensure_same_dims(first)?;
        cover.ensure_same_dims(first)?;
        for i in 0..w * h {
            if cover.data()[i] {
                covering[i] += 1;
                votes[i] += usize::from(mask.data()[i]);
            }
        }
    }
    let data = votes
        .iter()
        .zip(&covering)
        .map(|(&v, &c)| c > 0 && 2 * v >= c)
        .collect();
    Mask::new(w, h, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelLevelResult {
    pub mask: Mask,
    pub runs: Vec<PatchLevelResult>,
}

/// Runs [`segment_patchlevel`] once per grid offset and fuses the masks.
pub fn segment_pixellevel<S: PatchScorer>(
    policy: &Policy,
    scorer: S,
    image: &Image,
    env: &EnvConfig,
    shifts: &[(usize, usize)],
    mode: InferenceMode,
) -> Result<PixelLevelResult> {
    if shifts.is_empty() {
        return Err(Error::InvalidConfig("at least one grid shift is required".into()));
    }
    for (i, s) in shifts.iter().enumerate() {
        if shifts[..i].contains(s) {
            return Err(Error::InvalidConfig("grid shifts must be distinct".into()));
        }
    }
    let mut runs = Vec::with_capacity(shifts.len());
    let mut votes = Vec::with_capacity(shifts.len());
    for &offset in shifts {
        let cfg = EnvConfig {
            offset,
            ..env.clone()
        };
        let run = segment_patchlevel(policy, &scorer, image, &cfg, mode)?;
        let cover = grid::coverage(&run.grid);
        votes.push((run.mask.clone(), cover));
        runs.push(run);
    }
    Ok(PixelLevelResult {
        mask: majority_vote(&votes)?,
        runs,
    })
}

/// Scores every `patch_size` window on a `stride` lattice; a pixel is
/// foreground iff some covering window scores at least `threshold`.
/// Returns the mask and the number of windows scored.
pub fn sliding_window_segment<S: PatchScorer>(
    scorer: S,
    image: &Image,
    patch_size: usize,
    stride: usize,
    threshold: f64,
) -> Result<(Mask, usize)> {
    let (w, h) = image.dims();
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidGrid("patch size and stride must be positive".into()));
    }
    if patch_size > w || patch_size > h {
        return Err(Error::PatchTooLarge {
            patch: patch_size,
            width: w,
            height: h,
        });
    }
    let mut mask = Mask::empty(w, h);
    let mut windows = 0;
    for y in (0..=h - patch_size).step_by(stride) {
        for x in (0..=w - patch_size).step_by(stride) {
            let r = Rect::new(x, y, patch_size, patch_size);
            windows += 1;
            if scorer.score_region(image, r) >= threshold {
                mask.fill_rect(r, true);
            }
        }
    }
    Ok((mask, windows))
}

/// Whole-image presence decision at the 0.5 threshold.
pub fn object_present<S: PatchScorer>(scorer: S, image: &Image) -> bool {
    scorer.score_region(image, image.full_rect()) >= PRESENCE_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{CountingScorer, OracleDetector};
    use crate::nn::Pool;
    use crate::policy::PolicyArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> PolicyArch {
        PolicyArch {
            input_size: 8,
            channels: 1,
            conv1: 2,
            conv2: 2,
            patch_hidden: 3,
            term_hidden: 2,
            pool: Pool::Avg,
        }
    }

    /// Policy whose terminate logit is pinned far above or below continue.
    fn policy_with_term_bias(bias: f64) -> Policy {
        let p = Policy::init(arch(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut params = p.params().to_vec();
        let n = params.len();
        params[n - 2] = 0.0;
        params[n - 1] = bias;
        Policy::from_params(arch(), params).unwrap()
    }

    fn scene() -> (Image, Mask) {
        let mut mask = Mask::empty(16, 16);
        mask.fill_rect(Rect::new(4, 4, 8, 6), true);
        let data = (0..256).map(|i| if mask.data()[i] { 0.8 } else { 0.2 }).collect();
        (Image::new(16, 16, 1, data).unwrap(), mask)
    }

    fn env() -> EnvConfig {
        EnvConfig {
            patch_size: 4,
            t_max: 100,
            ..Default::default()
        }
    }

    #[test]
    fn immediate_termination_gives_empty_mask() {
        let (img, mask) = scene();
        let p = policy_with_term_bias(50.0);
        for mode in [InferenceMode::Unopposed, InferenceMode::DummyOpponent] {
            let r = segment_patchlevel(&p, OracleDetector::new(mask.clone()), &img, &env(), mode).unwrap();
            assert!(r.mask.is_empty());
            assert_eq!(r.steps, 1);
            assert!(r.terminated);
        }
    }

    #[test]
    fn never_repeats_and_modes_agree() {
        let (img, mask) = scene();
        let p = policy_with_term_bias(-50.0);
        let oracle = CountingScorer::new(OracleDetector::new(mask));
        let u = segment_patchlevel(&p, &oracle, &img, &env(), InferenceMode::Unopposed).unwrap();
        assert_eq!(oracle.calls(), 0);
        let d = segment_patchlevel(&p, &oracle, &img, &env(), InferenceMode::DummyOpponent).unwrap();
        assert!(oracle.calls() <= d.steps);
        assert_eq!(u.selected, d.selected);
        assert_eq!(u.selected.len(), 16);
        let mut sorted = u.selected.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), u.selected.len());
        assert_eq!(u.mask, Mask::full(16, 16));
    }

    #[test]
    fn t_max_bounds_rollout() {
        let (img, _) = scene();
        let p = policy_with_term_bias(-50.0);
        let cfg = EnvConfig { t_max: 5, ..env() };
        let r = segment_patchlevel(&p, OracleDetector::new(Mask::empty(16, 16)), &img, &cfg, InferenceMode::Unopposed)
            .unwrap();
        assert_eq!(r.steps, 5);
        assert_eq!(r.mask.count(), 5 * 16);
    }

    #[test]
    fn votes() {
        let full = Mask::full(2, 1);
        let a = Mask::new(2, 1, vec![true, false]).unwrap();
        let b = Mask::new(2, 1, vec![true, true]).unwrap();
        let c = Mask::new(2, 1, vec![false, false]).unwrap();
        // 2 of 3 -> foreground, 1 of 3 -> background
        let v = majority_vote(&[(a.clone(), full.clone()), (b.clone(), full.clone()), (c.clone(), full.clone())]).unwrap();
        assert_eq!(v.data(), [true, false]);
        // 1 of 2 -> tie -> foreground
        let v = majority_vote(&[(a.clone(), full.clone()), (c.clone(), full.clone())]).unwrap();
        assert_eq!(v.data(), [true, false]);
        // only covering runs vote
        let half = Mask::new(2, 1, vec![true, false]).unwrap();
        let v = majority_vote(&[(b.clone(), full.clone()), (c.clone(), half.clone()), (c, half)]).unwrap();
        assert_eq!(v.data(), [false, true]);
        let v = majority_vote(&vec![(a.clone(), full.clone()); 3]).unwrap();
        assert_eq!(v, a);
    }

    #[test]
    fn single_shift_equals_patch_level() {
        let (img, mask) = scene();
        let p = policy_with_term_bias(-1.0);
        let cfg = EnvConfig { t_max: 6, ..env() };
        let pl = segment_patchlevel(&p, OracleDetector::new(mask.clone()), &img, &cfg, InferenceMode::Unopposed).unwrap();
        let px = segment_pixellevel(&p, OracleDetector::new(mask), &img, &cfg, &[(0, 0)], InferenceMode::Unopposed)
            .unwrap();
        assert_eq!(px.mask, pl.mask);
    }

    #[test]
    fn shift_defaults_and_validation() {
        assert_eq!(default_shifts(8), [(0, 0), (4, 0), (0, 4)]);
        assert_eq!(default_shifts(1), [(0, 0)]);
        let (img, mask) = scene();
        let p = policy_with_term_bias(0.0);
        let o = OracleDetector::new(mask);
        assert!(segment_pixellevel(&p, &o, &img, &env(), &[], InferenceMode::Unopposed).is_err());
        assert!(segment_pixellevel(&p, &o, &img, &env(), &[(0, 0), (0, 0)], InferenceMode::Unopposed).is_err());
    }

    #[test]
    fn sliding_window_with_oracle() {
        let (img, mask) = scene();
        let oracle = CountingScorer::new(OracleDetector::new(mask.clone()));
        let (m, windows) = sliding_window_segment(&oracle, &img, 4, 4, 0.5).unwrap();
        assert_eq!(windows, 16);
        assert_eq!(oracle.calls(), 16);
        // expected: exactly the grid cells with at least half their area in the ROI
        let g = PatchGrid::new(16, 16, 4, (0, 0), crate::grid::Fit::Strict).unwrap();
        let keep: Vec<usize> = (0..16)
            .filter(|&p| 2 * mask.count_in(g.rect(p).unwrap()) >= 16)
            .collect();
        assert_eq!(m, grid::mask_from_selection(&g, &keep).unwrap());
        let (none, _) = sliding_window_segment(&oracle, &img, 4, 4, 1.0 + 1e-9).unwrap();
        assert!(none.is_empty());
    }
}
