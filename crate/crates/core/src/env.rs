//! The two-player patch-selection game.
//!
//! One time-step consists of a move by agent `a` followed by a move by agent
//! `b`. Each move selects a patch, which is scored by the detector *before*
//! it is erased to zero. Rewards for both sides are derived from the two
//! scores of the step.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{PatchScorer, LOGIT_EPS};
use crate::error::{Error, Result};
use crate::grid::{Fit, PatchGrid};
use crate::image::Image;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub patch: usize,
    pub terminate: bool,
}

impl Action {
    pub fn select(patch: usize) -> Self {
        Self {
            patch,
            terminate: false,
        }
    }

    pub fn terminate(patch: usize) -> Self {
        Self {
            patch,
            terminate: true,
        }
    }
}

/// Who plays agent `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opponent {
    /// A second policy selects and erases patches.
    SelfPlay,
    /// Single-agent game: `b` is virtual and always "scores" this constant.
    Fixed(f64),
}

/// Which agents may end the game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminators {
    #[default]
    Either,
    AgentAOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub patch_size: usize,
    pub offset: (usize, usize),
    pub fit: Fit,
    pub terminal_weight: f64,
    pub enable_rep: bool,
    pub enable_iter: bool,
    pub opponent: Opponent,
    pub terminators: Terminators,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            t_min: 4,
            t_max: 1024,
            patch_size: 8,
            offset: (0, 0),
            fit: Fit::Strict,
            terminal_weight: 100.0,
            enable_rep: true,
            enable_iter: true,
            opponent: Opponent::SelfPlay,
            terminators: Terminators::Either,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.t_min && self.t_min < self.t_max) {
            return Err(Error::InvalidConfig(alloc::format!(
                "need 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min,
                self.t_max
            )));
        }
        if !self.terminal_weight.is_finite() {
            return Err(Error::InvalidConfig("terminal_weight must be finite".into()));
        }
        if let Opponent::Fixed(s) = self.opponent {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidConfig(
                    "fixed opponent score must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_self_play(&self) -> bool {
        self.opponent == Opponent::SelfPlay
    }

    fn b_may_terminate(&self) -> bool {
        self.is_self_play() && self.terminators == Terminators::Either
    }
}

/// Per-agent reward for one time-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub patch: i32,
    pub term: i32,
    pub rep: i32,
    pub iter: i32,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(patch: i32, term: i32, rep: i32, iter: i32, weight: f64) -> Self {
        let mut b = Self {
            patch,
            term,
            rep,
            iter,
            total: 0.0,
        };
        b.total = total_reward(&b, weight);
        b
    }
}

/// `+1` if the agent's patch wins the step. Agent `a` wins ties (`>=`);
/// agent `b` needs a strictly higher score, so the two always sum to zero.
pub fn patch_reward(who: Agent, f_a: f64, f_b: f64) -> i32 {
    let wins = match who {
        Agent::A => f_a >= f_b,
        Agent::B => f_b > f_a,
    };
    if wins {
        1
    } else {
        -1
    }
}

/// Terminal rewards `(a, b)`. The terminator is rewarded by its own win/loss
/// comparison of this step's scores and the other side receives the negation.
pub fn terminal_reward(terminator: Option<Agent>, f_a: f64, f_b: f64) -> (i32, i32) {
    match terminator {
        None => (0, 0),
        Some(Agent::A) => {
            let r = patch_reward(Agent::A, f_a, f_b);
            (r, -r)
        }
        Some(Agent::B) => {
            let r = patch_reward(Agent::B, f_a, f_b);
            (-r, r)
        }
    }
}

pub fn repetition_reward(was_repeat: bool) -> i32 {
    if was_repeat {
        -1
    } else {
        0
    }
}

/// `-1` for a termination outside the open interval `(t_min, t_max)`.
pub fn iteration_reward(t: usize, terminate: bool, t_min: usize, t_max: usize) -> i32 {
    if terminate && !(t_min < t && t < t_max) {
        -1
    } else {
        0
    }
}

/// `patch + weight * term + rep + iter`.
pub fn total_reward(b: &RewardBreakdown, weight: f64) -> f64 {
    f64::from(b.patch) + weight * f64::from(b.term) + f64::from(b.rep) + f64::from(b.iter)
}

/// Result of one agent's move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Detector score of the selected patch before erasure.
    pub score: f64,
    /// Detector logit of the same patch; rewards compare these.
    pub logit: f64,
    pub was_repeat: bool,
}

/// Everything that happened in one time-step (also the trace-log record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action_a: Action,
    pub action_b: Option<Action>,
    pub selection_a: Selection,
    pub selection_b: Selection,
    pub reward_a: RewardBreakdown,
    pub reward_b: RewardBreakdown,
    pub terminator: Option<Agent>,
    pub done: bool,
}

/// Game state `s_t`: the image with all erasures so far applied.
#[derive(Debug, Clone)]
pub struct GameState<S> {
    working: Image,
    grid: PatchGrid,
    erased: Vec<bool>,
    t: usize,
    done: bool,
    cfg: EnvConfig,
    scorer: S,
    /// Scores of un-erased patches (content never changes until erased).
    score_cache: Vec<Option<(f64, f64)>>,
}

impl<S: PatchScorer> GameState<S> {
    /// Starts a game on `image` with grid geometry from `cfg`.
    pub fn reset(image: &Image, scorer: S, cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = PatchGrid::new(
            image.width(),
            image.height(),
            cfg.patch_size,
            cfg.offset,
            cfg.fit,
        )?;
        let working = grid.canvas(image)?;
        let p = grid.len();
        Ok(Self {
            working,
            grid,
            erased: vec![false; p],
            t: 0,
            done: false,
            cfg: cfg.clone(),
            scorer,
            score_cache: vec![None; p],
        })
    }

    pub fn working_image(&self) -> &Image {
        &self.working
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn erased(&self) -> &[bool] {
        &self.erased
    }

    pub fn erased_count(&self) -> usize {
        self.erased.iter().filter(|&&e| e).count()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }

    pub fn num_patches(&self) -> usize {
        self.grid.len()
    }

    /// Detector score of patch `p` in the current state.
    pub fn patch_score(&mut self, p: usize) -> Result<f64> {
        Ok(self.patch_score_logit(p)?.0)
    }

    /// Detector score and logit of patch `p` in the current state.
    pub fn patch_score_logit(&mut self, p: usize) -> Result<(f64, f64)> {
        let rect = self.grid.rect(p)?;
        if self.erased[p] {
            return Ok((self.scorer.blank_score(), self.scorer.blank_logit()));
        }
        if let Some(v) = self.score_cache[p] {
            return Ok(v);
        }
        let v = self.scorer.score_and_logit(&self.working, rect);
        self.score_cache[p] = Some(v);
        Ok(v)
    }

    /// Scores the selected patch, then erases it. With a fixed opponent,
    /// agent `b` is virtual: it scores the constant and erases nothing.
    pub fn apply_selection(&mut self, who: Agent, act: Action) -> Result<Selection> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if let (Agent::B, Opponent::Fixed(score)) = (who, self.cfg.opponent) {
            return Ok(Selection {
                score,
                logit: math::logit(score, LOGIT_EPS),
                was_repeat: false,
            });
        }
        let (score, logit) = self.patch_score_logit(act.patch)?;
        let was_repeat = self.erased[act.patch];
        let rect = self.grid.rect(act.patch)?;
        self.working.zero_rect(rect)?;
        self.erased[act.patch] = true;
        Ok(Selection {
            score,
            logit,
            was_repeat,
        })
    }

    /// Computes both agents' rewards for the current step from the two
    /// selections already applied, and advances `t`.
    pub fn finish_step(
        &mut self,
        act_a: Action,
        sel_a: Selection,
        act_b: Option<Action>,
        sel_b: Selection,
    ) -> Result<StepRecord> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let cfg = &self.cfg;
        let (f_a, f_b) = (sel_a.logit, sel_b.logit);
        let b_term = cfg.b_may_terminate() && act_b.is_some_and(|a| a.terminate);
        let terminator = if act_a.terminate {
            Some(Agent::A)
        } else if b_term {
            Some(Agent::B)
        } else {
            None
        };
        let (term_a, term_b) = terminal_reward(terminator, f_a, f_b);
        let t = self.t;
        let rep = |on: bool, r: bool| if on { repetition_reward(r) } else { 0 };
        let iter = |on: bool, term: bool| {
            if on {
                iteration_reward(t, term, cfg.t_min, cfg.t_max)
            } else {
                0
            }
        };
        let w = cfg.terminal_weight;
        let reward_a = RewardBreakdown::new(
            patch_reward(Agent::A, f_a, f_b),
            term_a,
            rep(cfg.enable_rep, sel_a.was_repeat),
            iter(cfg.enable_iter, act_a.terminate),
            w,
        );
        let reward_b = RewardBreakdown::new(
            patch_reward(Agent::B, f_a, f_b),
            term_b,
            rep(cfg.enable_rep && cfg.is_self_play(), sel_b.was_repeat),
            iter(cfg.enable_iter, b_term),
            w,
        );
        let done = terminator.is_some() || t + 1 >= cfg.t_max;
        self.t += 1;
        self.done = done;
        Ok(StepRecord {
            t,
            action_a: act_a,
            action_b: act_b,
            selection_a: sel_a,
            selection_b: sel_b,
            reward_a,
            reward_b,
            terminator,
            done,
        })
    }

    /// Agent `a` moves, then agent `b` (who observes `a`'s erasure), then
    /// rewards are computed. In fixed-opponent mode `act_b` is ignored.
    pub fn step_pair(&mut self, act_a: Action, act_b: Action) -> Result<StepRecord> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        self.grid.rect(act_a.patch)?;
        if self.cfg.is_self_play() {
            self.grid.rect(act_b.patch)?;
        }
        let sel_a = self.apply_selection(Agent::A, act_a)?;
        let act_b = self.cfg.is_self_play().then_some(act_b);
        let sel_b = match act_b {
            Some(b) => self.apply_selection(Agent::B, b)?,
            None => self.apply_selection(Agent::B, Action::select(0))?,
        };
        self.finish_step(act_a, sel_a, act_b, sel_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::OracleDetector;
    use crate::image::{Mask, Rect};

    /// 16x16 image, 4x4 patches, ROI fully covering patch 5 and half of patch 6.
    fn setup(cfg: &EnvConfig) -> GameState<OracleDetector> {
        let mut mask = Mask::empty(16, 16);
        mask.fill_rect(Rect::new(4, 4, 6, 4), true);
        let img = Image::filled(16, 16, 1, 0.5).unwrap();
        let cfg = EnvConfig {
            patch_size: 4,
            ..cfg.clone()
        };
        GameState::reset(&img, OracleDetector::new(mask), &cfg).unwrap()
    }

    #[test]
    fn reset_state() {
        let s = setup(&EnvConfig::default());
        assert_eq!(s.t(), 0);
        assert_eq!(s.erased_count(), 0);
        assert_eq!(s.num_patches(), 16);
    }

    #[test]
    fn selection_scores_before_erasure() {
        let mut s = setup(&EnvConfig::default());
        let sel = s.apply_selection(Agent::A, Action::select(5)).unwrap();
        assert_eq!((sel.score, sel.was_repeat), (1.0, false));
        let again = s.apply_selection(Agent::B, Action::select(5)).unwrap();
        assert_eq!((again.score, again.was_repeat), (0.0, true));
        assert!(again.logit < sel.logit);
        assert!(s.apply_selection(Agent::A, Action::select(16)).is_err());
    }

    #[test]
    fn fixed_opponent_is_virtual() {
        let cfg = EnvConfig {
            opponent: Opponent::Fixed(0.8),
            ..Default::default()
        };
        let mut s = setup(&cfg);
        for _ in 0..3 {
            let sel = s.apply_selection(Agent::B, Action::select(5)).unwrap();
            assert_eq!(sel.score, 0.8);
        }
        assert_eq!(s.erased_count(), 0);
    }

    #[test]
    fn reward_components() {
        assert_eq!(patch_reward(Agent::A, 0.7, 0.3), 1);
        assert_eq!(patch_reward(Agent::A, 0.3, 0.7), -1);
        assert_eq!(patch_reward(Agent::A, 0.5, 0.5), 1);
        assert_eq!(patch_reward(Agent::B, 0.5, 0.5), -1);
        assert_eq!(terminal_reward(None, 0.6, 0.2), (0, 0));
        assert_eq!(terminal_reward(Some(Agent::A), 0.6, 0.2), (1, -1));
        assert_eq!(terminal_reward(Some(Agent::A), 0.1, 0.9), (-1, 1));
        assert_eq!(terminal_reward(Some(Agent::B), 0.1, 0.9), (-1, 1));
        assert_eq!(terminal_reward(Some(Agent::B), 0.5, 0.5), (1, -1));
        assert_eq!(repetition_reward(true), -1);
        assert_eq!(repetition_reward(false), 0);
        assert_eq!(iteration_reward(2, true, 4, 1024), -1);
        assert_eq!(iteration_reward(10, false, 4, 1024), 0);
        assert_eq!(iteration_reward(10, true, 4, 1024), 0);
        assert_eq!(iteration_reward(4, true, 4, 1024), -1);
        assert_eq!(iteration_reward(1024, true, 4, 1024), -1);
    }

    #[test]
    fn total_reward_weights() {
        assert_eq!(RewardBreakdown::new(1, 1, 0, 0, 100.0).total, 101.0);
        assert_eq!(RewardBreakdown::new(-1, -1, -1, -1, 100.0).total, -103.0);
    }

    #[test]
    fn shaping_toggles() {
        let cfg = EnvConfig {
            enable_rep: false,
            enable_iter: false,
            ..Default::default()
        };
        let mut s = setup(&cfg);
        s.step_pair(Action::select(5), Action::select(6)).unwrap();
        let r = s.step_pair(Action::terminate(5), Action::select(0)).unwrap();
        assert_eq!(r.reward_a.rep, 0);
        assert_eq!(r.reward_a.iter, 0);
        assert_eq!(r.reward_a.total, f64::from(r.reward_a.patch) + 100.0 * f64::from(r.reward_a.term));
    }

    #[test]
    fn step_pair_flow() {
        let mut s = setup(&EnvConfig::default());
        let r = s.step_pair(Action::select(5), Action::select(6)).unwrap();
        assert_eq!(r.selection_a.score, 1.0);
        assert_eq!(r.selection_b.score, 0.5);
        assert_eq!(r.reward_a.patch, 1);
        assert_eq!(r.reward_b.patch, -1);
        assert!(!r.done);
        assert_eq!(s.t(), 1);
        assert_eq!(s.erased_count(), 2);
        // b terminates and loses the comparison
        let r = s.step_pair(Action::select(0), Action::terminate(1)).unwrap();
        assert_eq!(r.terminator, Some(Agent::B));
        assert_eq!((r.reward_a.term, r.reward_b.term), (1, -1));
        assert_eq!(r.reward_b.iter, -1);
        assert!(r.done);
        assert_eq!(
            s.step_pair(Action::select(2), Action::select(3)).unwrap_err(),
            Error::EpisodeDone
        );
    }

    #[test]
    fn simultaneous_termination_credits_a() {
        let mut s = setup(&EnvConfig::default());
        let r = s.step_pair(Action::terminate(0), Action::terminate(5)).unwrap();
        assert_eq!(r.terminator, Some(Agent::A));
        assert_eq!((r.reward_a.term, r.reward_b.term), (-1, 1));
    }

    #[test]
    fn a_only_termination_ignores_b() {
        let cfg = EnvConfig {
            terminators: Terminators::AgentAOnly,
            ..Default::default()
        };
        let mut s = setup(&cfg);
        let r = s.step_pair(Action::select(0), Action::terminate(5)).unwrap();
        assert!(!r.done);
        assert_eq!(r.terminator, None);
    }

    #[test]
    fn episode_bounded_by_t_max() {
        let cfg = EnvConfig {
            t_min: 1,
            t_max: 3,
            ..Default::default()
        };
        let mut s = setup(&cfg);
        let mut steps = 0;
        while !s.is_done() {
            s.step_pair(Action::select(0), Action::select(0)).unwrap();
            steps += 1;
        }
        assert_eq!(steps, 3);
    }

    #[test]
    fn invalid_config() {
        let cfg = EnvConfig {
            t_min: 5,
            t_max: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EnvConfig {
            opponent: Opponent::Fixed(1.5),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    /// Probabilities saturate at 1 while the logits still grow with patch index.
    struct Saturated;

    impl PatchScorer for Saturated {
        fn score_region(&self, _: &Image, _: Rect) -> f64 {
            1.0
        }

        fn blank_score(&self) -> f64 {
            0.0
        }

        fn score_and_logit(&self, _: &Image, rect: Rect) -> (f64, f64) {
            (1.0, 40.0 + rect.x as f64 + rect.y as f64)
        }
    }

    #[test]
    fn saturated_scores_compared_by_logit() {
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        let cfg = EnvConfig {
            patch_size: 4,
            ..Default::default()
        };
        let mut s = GameState::reset(&img, Saturated, &cfg).unwrap();
        let r = s
            .step_pair(Action::terminate(0), Action::select(3))
            .unwrap();
        assert_eq!((r.selection_a.score, r.selection_b.score), (1.0, 1.0));
        assert_eq!(r.reward_a.patch, -1);
        assert_eq!(r.reward_a.term, -1);
        assert_eq!(r.reward_b.term, 1);
    }
}
