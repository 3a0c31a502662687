//! Self-play training: snapshot history, competitor sampling, dual-trajectory
//! episode collection and the outer update loop.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::PatchScorer;
use crate::env::{Action, Agent, EnvConfig, GameState, StepRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::nn::{Optimizer, OptimizerKind};
use crate::policy::{
    policy_gradient_update, Policy, PolicyArch, Trajectory, TrajectoryStep, UpdateConfig,
    UpdateStats,
};

/// How agent `b`'s policy is drawn from the snapshot history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompetitorMode {
    /// Always the latest policy.
    Vanilla,
    /// Uniform over all snapshots.
    Fictitious,
    /// Gaussian weighting centred on the middle of the history.
    #[default]
    Prioritized,
}

/// Unnormalised sampling weight of snapshot `h` when the latest is `head`.
pub fn competitor_weight(h: usize, head: usize, mode: CompetitorMode) -> f64 {
    if head == 0 {
        return f64::from(u8::from(h == 0));
    }
    match mode {
        CompetitorMode::Vanilla => f64::from(u8::from(h == head)),
        CompetitorMode::Fictitious => 1.0,
        CompetitorMode::Prioritized => {
            let hf = head as f64;
            math::normal_pdf((4.0 * h as f64 - 2.0 * hf) / hf)
        }
    }
}

/// Probability of picking each of snapshots `0..=head`.
pub fn competitor_pmf(head: usize, mode: CompetitorMode) -> Vec<f64> {
    let w: Vec<f64> = (0..=head).map(|h| competitor_weight(h, head, mode)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Index drawn from unnormalised non-negative `weights` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// History of policy snapshots `pi_0 .. pi_H`.
///
/// With a stride `k > 1` only every k-th snapshot is retained, plus the most
/// recent one. Sampling weights are evaluated at the retained snapshots' true
/// iteration numbers.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    stride: usize,
    entries: Vec<(usize, Arc<Policy>)>,
    next: usize,
}

impl SnapshotStore {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("snapshot stride must be >= 1".into()));
        }
        Ok(Self {
            stride,
            entries: Vec::new(),
            next: 0,
        })
    }

    /// Appends the next snapshot and returns its iteration number.
    pub fn push(&mut self, policy: Policy) -> usize {
        let h = self.next;
        if let Some(&(last, _)) = self.entries.last() {
            if last % self.stride != 0 {
                self.entries.pop();
            }
        }
        self.entries.push((h, Arc::new(policy)));
        self.next += 1;
        h
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of retained snapshots.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Iteration number `H` of the latest snapshot.
    pub fn head(&self) -> Option<usize> {
        self.entries.last().map(|e| e.0)
    }

    pub fn iterations(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn get(&self, h: usize) -> Option<&Arc<Policy>> {
        self.entries
            .binary_search_by_key(&h, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Draws a competitor; returns its iteration number and parameters.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mode: CompetitorMode,
        rng: &mut R,
    ) -> Result<(usize, Arc<Policy>)> {
        let head = self.head().ok_or(Error::EmptyDataset)?;
        let weights: Vec<f64> = self
            .entries
            .iter()
            .map(|e| competitor_weight(e.0, head, mode))
            .collect();
        let i = sample_index(&weights, rng);
        Ok((self.entries[i].0, Arc::clone(&self.entries[i].1)))
    }
}

/// One game's worth of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub traj_a: Trajectory,
    /// Empty when the opponent is a fixed score.
    pub traj_b: Trajectory,
    pub records: Vec<StepRecord>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Step at which an agent chose to end the game, if any did.
    pub fn termination_step(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.terminator.is_some())
            .map(|r| r.t)
    }
}

/// Plays one game. Agent `a` moves first each step; both sides sample from
/// their own policy without masking repeats.
pub fn collect_episode<S, R>(
    image: &Image,
    scorer: S,
    policy_a: &Policy,
    policy_b: &Policy,
    env: &EnvConfig,
    rng: &mut R,
) -> Result<Episode>
where
    S: PatchScorer,
    R: Rng + ?Sized,
{
    let mut state = GameState::reset(image, scorer, env)?;
    let self_play = env.is_self_play();
    let mut traj_a = Trajectory::new(Agent::A);
    let mut traj_b = Trajectory::new(Agent::B);
    let mut records = Vec::new();
    while !state.is_done() {
        let enc_a = policy_a.encode(&state);
        let (act_a, lp_a) = policy_a.sample_action(&enc_a, rng, None)?;
        let sel_a = state.apply_selection(Agent::A, act_a)?;
        let (b, sel_b) = if self_play {
            let enc_b = policy_b.encode(&state);
            let (act_b, lp_b) = policy_b.sample_action(&enc_b, rng, None)?;
            let sel = state.apply_selection(Agent::B, act_b)?;
            (Some((enc_b, act_b, lp_b)), sel)
        } else {
            (None, state.apply_selection(Agent::B, Action::select(0))?)
        };
        let rec = state.finish_step(act_a, sel_a, b.as_ref().map(|x| x.1), sel_b)?;
        traj_a.steps.push(TrajectoryStep {
            encoding: enc_a,
            action: act_a,
            log_prob: lp_a,
            reward: rec.reward_a.total,
        });
        if let Some((encoding, action, log_prob)) = b {
            traj_b.steps.push(TrajectoryStep {
                encoding,
                action,
                log_prob,
                reward: rec.reward_b.total,
            });
        }
        records.push(rec);
    }
    Ok(Episode {
        traj_a,
        traj_b,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub mode: CompetitorMode,
    pub gamma: f64,
    pub episodes_per_update: usize,
    pub max_updates: usize,
    pub seed: u64,
    pub env: EnvConfig,
    pub snapshot_stride: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Subtract the batch-mean return (off = plain REINFORCE).
    pub baseline: bool,
    pub max_grad_norm: Option<f64>,
    /// Stop once the 20-update moving average of agent `a`'s return improves
    /// by less than 1% over the preceding 20 updates.
    pub early_stop: bool,
    /// Include agent `b`'s trajectories in the update.
    pub use_opponent_trajectories: bool,
    pub policy: PolicyArch,
    pub initial_terminate_prob: f64,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        Self {
            mode: CompetitorMode::Prioritized,
            gamma: 0.96,
            episodes_per_update: 8,
            max_updates: 200,
            seed: 0,
            env: EnvConfig::default(),
            snapshot_stride: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            baseline: false,
            max_grad_norm: None,
            early_stop: false,
            use_opponent_trajectories: true,
            policy: PolicyArch::default(),
            initial_terminate_prob: crate::policy::INITIAL_TERMINATE_PROB,
        }
    }
}

impl SelfPlayConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        if self.episodes_per_update == 0 {
            return Err(Error::InvalidConfig("episodes_per_update must be >= 1".into()));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidConfig("snapshot stride must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            gamma: self.gamma,
            baseline: self.baseline,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub update: usize,
    pub mean_return_a: f64,
    /// NaN when the opponent is a fixed score.
    pub mean_return_b: f64,
    pub mean_episode_len: f64,
    /// Mean step at which an agent terminated, over episodes that were
    /// terminated by an agent (NaN if none were).
    pub mean_termination_step: f64,
    pub wall_ms: f64,
}

pub type UpdateObserver<'a> = &'a mut dyn FnMut(&HistoryRow, &UpdateStats);

/// Optional observers for [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Milliseconds since an arbitrary origin.
    pub clock: Option<&'a dyn Fn() -> f64>,
    pub on_update: Option<UpdateObserver<'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub history: Vec<HistoryRow>,
    pub snapshots: SnapshotStore,
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        math::mean(xs)
    }
}

/// Self-play policy optimisation. `scorer_for(i)` supplies the detector used
/// for `images[i]`.
pub fn train<S, F>(
    images: &[Image],
    scorer_for: F,
    cfg: &SelfPlayConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome>
where
    S: PatchScorer,
    F: Fn(usize) -> S,
{
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::init_with(cfg.policy, cfg.initial_terminate_prob, &mut rng)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, policy.params().len());
    let mut store = SnapshotStore::new(cfg.snapshot_stride)?;
    store.push(policy.clone());
    let update_cfg = cfg.update_config();
    let now = |hooks: &TrainHooks<'_>| hooks.clock.map_or(0.0, |c| c());
    let mut history = Vec::with_capacity(cfg.max_updates);

    for update in 0..cfg.max_updates {
        let start = now(hooks);
        let mut trajectories = Vec::with_capacity(2 * cfg.episodes_per_update);
        let (mut ret_a, mut ret_b, mut lens, mut terms) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.episodes_per_update {
            let i = rng.random_range(0..images.len());
            let (_, opponent) = store.sample(cfg.mode, &mut rng)?;
            let ep = collect_episode(&images[i], scorer_for(i), &policy, &opponent, &cfg.env, &mut rng)?;
            ret_a.push(ep.traj_a.total_reward());
            if !ep.traj_b.is_empty() {
                ret_b.push(ep.traj_b.total_reward());
            }
            lens.push(ep.len() as f64);
            if let Some(t) = ep.termination_step() {
                terms.push(t as f64);
            }
            trajectories.push(ep.traj_a);
            if cfg.use_opponent_trajectories && !ep.traj_b.is_empty() {
                trajectories.push(ep.traj_b);
            }
        }
        let stats = policy_gradient_update(&mut policy, &trajectories, &update_cfg, &mut optimizer)?;
        store.push(policy.clone());
        let row = HistoryRow {
            update,
            mean_return_a: math::mean(&ret_a),
            mean_return_b: mean_or_nan(&ret_b),
            mean_episode_len: math::mean(&lens),
            mean_termination_step: mean_or_nan(&terms),
            wall_ms: now(hooks) - start,
        };
        if let Some(f) = hooks.on_update.as_mut() {
            f(&row, &stats);
        }
        history.push(row);
        if cfg.early_stop && converged(&history) {
            break;
        }
    }
    Ok(TrainOutcome {
        policy,
        history,
        snapshots: store,
    })
}

const EARLY_STOP_WINDOW: usize = 20;

fn converged(history: &[HistoryRow]) -> bool {
    let w = EARLY_STOP_WINDOW;
    if history.len() < 2 * w {
        return false;
    }
    let r: Vec<f64> = history[history.len() - 2 * w..]
        .iter()
        .map(|h| h.mean_return_a)
        .collect();
    let prev = math::mean(&r[..w]);
    let cur = math::mean(&r[w..]);
    cur - prev < 0.01 * prev.abs()
}
