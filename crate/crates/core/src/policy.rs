//! Stochastic patch-selection policy `pi(. | s; theta)` and its REINFORCE update.
//!
//! The network sees the current game state as a downsampled copy of the
//! working image plus the per-patch erased flags. A convolutional trunk
//! produces a feature map; features are averaged over each patch's footprint,
//! concatenated with that patch's erased flag and passed through a small dense
//! layer shared across patches, giving one logit per patch. The termination
//! head reads the sum of the per-patch hidden activations (an estimate of how
//! much object is left) and the erased fraction, and emits two logits
//! (`[continue, terminate]`). The two heads are independent categoricals.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::PatchScorer;
use crate::env::{Action, Agent, GameState};
use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::math;
use crate::nn::{self, ConvTrunk, LayoutBuilder, Optimizer, Pool, Span, TrunkLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    /// Side of the downsampled state image.
    pub input_size: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub patch_hidden: usize,
    pub term_hidden: usize,
    pub pool: Pool,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: 1,
            conv1: 6,
            conv2: 8,
            patch_hidden: 16,
            term_hidden: 8,
            pool: Pool::Avg,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PolicyLayout {
    trunk: TrunkLayout,
    w_patch: Span,
    b_patch: Span,
    w_logit: Span,
    b_logit: Span,
    w_term: Span,
    b_term: Span,
    w_term_out: Span,
    b_term_out: Span,
    total: usize,
}

impl PolicyArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || !self.input_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "policy input size must be an even number >= 4".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("policy channels must be 1 or 3".into()));
        }
        if self.conv1 == 0 || self.conv2 == 0 || self.patch_hidden == 0 || self.term_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn trunk(&self) -> ConvTrunk {
        ConvTrunk {
            in_channels: self.channels,
            in_size: self.input_size,
            conv1: self.conv1,
            conv2: self.conv2,
            pool: self.pool,
            pool_after_conv1: true,
            pool_after_conv2: false,
        }
    }

    /// Side of the feature map patch footprints are pooled from.
    pub fn feature_size(&self) -> usize {
        self.trunk().out_size()
    }

    fn patch_in(&self) -> usize {
        self.conv2 + 1
    }

    fn term_in(&self) -> usize {
        self.patch_hidden + 1
    }

    fn layout(&self) -> PolicyLayout {
        let mut b = LayoutBuilder::default();
        let trunk = self.trunk().layout(&mut b);
        let w_patch = b.take(self.patch_hidden * self.patch_in());
        let b_patch = b.take(self.patch_hidden);
        let w_logit = b.take(self.patch_hidden);
        let b_logit = b.take(1);
        let w_term = b.take(self.term_hidden * self.term_in());
        let b_term = b.take(self.term_hidden);
        let w_term_out = b.take(2 * self.term_hidden);
        let b_term_out = b.take(2);
        PolicyLayout {
            trunk,
            w_patch,
            b_patch,
            w_logit,
            b_logit,
            w_term,
            b_term,
            w_term_out,
            b_term_out,
            total: b.total(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Policy input for one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    /// Downsampled working image, CHW.
    pub pixels: Vec<f64>,
    pub erased: Vec<bool>,
    /// Patch footprints in feature-map coordinates.
    pub regions: Vec<Rect>,
}

impl Encoding {
    pub fn num_patches(&self) -> usize {
        self.erased.len()
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    arch: PolicyArch,
    params: Vec<f64>,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Head outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub patch: Vec<f64>,
    /// `[continue, terminate]`.
    pub term: [f64; 2],
}

struct ForwardCache {
    trunk: nn::TrunkCache,
    patch_inputs: Vec<Vec<f64>>,
    patch_hidden: Vec<Vec<f64>>,
    term_input: Vec<f64>,
    term_hidden: Vec<f64>,
    logits: Logits,
}

/// Default termination probability of a freshly initialised policy.
pub const INITIAL_TERMINATE_PROB: f64 = 0.1;

impl Policy {
    pub fn init<R: Rng + ?Sized>(arch: PolicyArch, rng: &mut R) -> Result<Self> {
        Self::init_with(arch, INITIAL_TERMINATE_PROB, rng)
    }

    /// Random initialisation whose termination head starts near `terminate_prob`.
    pub fn init_with<R: Rng + ?Sized>(arch: PolicyArch, terminate_prob: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if !(terminate_prob > 0.0 && terminate_prob < 1.0) {
            return Err(Error::InvalidConfig("initial terminate probability must lie in (0, 1)".into()));
        }
        let l = arch.layout();
        let mut params = vec![0.0; l.total];
        arch.trunk().init(&l.trunk, &mut params, rng);
        nn::init_he(rng, &mut params, l.w_patch, arch.patch_in(), 1.0);
        nn::init_he(rng, &mut params, l.w_logit, arch.patch_hidden, 0.1);
        nn::init_he(rng, &mut params, l.w_term, arch.term_in(), 0.05);
        nn::init_he(rng, &mut params, l.w_term_out, arch.term_hidden, 0.1);
        let bias = l.b_term_out.of_mut(&mut params);
        bias[0] = 0.0;
        bias[1] = math::logit(terminate_prob, 1e-12);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: PolicyArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::ParameterCount {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Encodes a game state: downsampled working image plus erased flags.
    pub fn encode<S: PatchScorer>(&self, state: &GameState<S>) -> Encoding {
        let rects: Vec<Rect> = state.grid().rects().collect();
        self.encode_parts(state.working_image(), &rects, state.erased())
    }

    /// Encodes an arbitrary canvas with patch `rects` (canvas coordinates).
    pub fn encode_parts(&self, canvas: &Image, rects: &[Rect], erased: &[bool]) -> Encoding {
        let s = self.arch.input_size;
        let small = canvas.resize_bilinear(s, s);
        let c = self.arch.channels;
        let mut pixels = vec![0.0; c * s * s];
        for y in 0..s {
            for x in 0..s {
                let gray = (0..small.channels()).map(|k| small.get(x, y, k)).sum::<f64>()
                    / small.channels() as f64;
                for k in 0..c {
                    pixels[(k * s + y) * s + x] = if small.channels() == c {
                        small.get(x, y, k)
                    } else {
                        gray
                    };
                }
            }
        }
        let fs = self.arch.feature_size();
        let (cw, ch) = canvas.dims();
        let map = |v: usize, len: usize, floor: bool| -> usize {
            let f = v as f64 * fs as f64 / len as f64;
            if floor {
                libm::floor(f) as usize
            } else {
                libm::ceil(f) as usize
            }
        };
        let regions = rects
            .iter()
            .map(|r| {
                let x0 = map(r.x, cw, true).min(fs - 1);
                let y0 = map(r.y, ch, true).min(fs - 1);
                let x1 = map(r.x + r.w, cw, false).clamp(x0 + 1, fs);
                let y1 = map(r.y + r.h, ch, false).clamp(y0 + 1, fs);
                Rect::new(x0, y0, x1 - x0, y1 - y0)
            })
            .collect();
        Encoding {
            pixels,
            erased: erased.to_vec(),
            regions,
        }
    }

    fn check(&self, enc: &Encoding) -> Result<()> {
        let s = self.arch.input_size;
        if enc.pixels.len() != self.arch.channels * s * s {
            return Err(Error::EncodingMismatch(alloc::format!(
                "{} pixels, expected {}",
                enc.pixels.len(),
                self.arch.channels * s * s
            )));
        }
        if enc.regions.len() != enc.erased.len() || enc.erased.is_empty() {
            return Err(Error::EncodingMismatch(
                "regions and erased flags must be non-empty and equally long".into(),
            ));
        }
        let fs = self.arch.feature_size();
        if enc
            .regions
            .iter()
            .any(|r| r.w == 0 || r.h == 0 || r.x + r.w > fs || r.y + r.h > fs)
        {
            return Err(Error::EncodingMismatch("region outside feature map".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, enc: &Encoding) -> ForwardCache {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let trunk = a.trunk().forward(&l.trunk, p, &enc.pixels);
        let fs = a.feature_size();
        let n = enc.num_patches();

        let mut patch_inputs = Vec::with_capacity(n);
        let mut patch_hidden = Vec::with_capacity(n);
        let mut patch_logits = Vec::with_capacity(n);
        let mut sum_hidden = vec![0.0; a.patch_hidden];
        for (r, &erased) in enc.regions.iter().zip(&enc.erased) {
            let mut x = vec![0.0; a.patch_in()];
            let inv = 1.0 / r.area() as f64;
            for c in 0..a.conv2 {
                let plane = &trunk.out[c * fs * fs..(c + 1) * fs * fs];
                let mut acc = 0.0;
                for y in r.y..r.y + r.h {
                    acc += plane[y * fs + r.x..y * fs + r.x + r.w].iter().sum::<f64>();
                }
                x[c] = acc * inv;
            }
            x[a.conv2] = if erased { 1.0 } else { 0.0 };
            let mut h = vec![0.0; a.patch_hidden];
            nn::dense_forward(&x, l.w_patch.of(p), l.b_patch.of(p), &mut h);
            nn::relu_in_place(&mut h);
            let mut out = [0.0];
            nn::dense_forward(&h, l.w_logit.of(p), l.b_logit.of(p), &mut out);
            for (s, v) in sum_hidden.iter_mut().zip(&h) {
                *s += v;
            }
            patch_inputs.push(x);
            patch_hidden.push(h);
            patch_logits.push(out[0]);
        }

        let erased_frac = enc.erased.iter().filter(|&&e| e).count() as f64 / n as f64;
        let mut term_input = sum_hidden;
        term_input.push(erased_frac);
        let mut term_hidden = vec![0.0; a.term_hidden];
        nn::dense_forward(&term_input, l.w_term.of(p), l.b_term.of(p), &mut term_hidden);
        nn::relu_in_place(&mut term_hidden);
        let mut term = [0.0; 2];
        nn::dense_forward(&term_hidden, l.w_term_out.of(p), l.b_term_out.of(p), &mut term);

        ForwardCache {
            trunk,
            patch_inputs,
            patch_hidden,
            term_input,
            term_hidden,
            logits: Logits {
                patch: patch_logits,
                term,
            },
        }
    }

    /// Patch logits (one per patch) and termination logits.
    pub fn forward(&self, enc: &Encoding) -> Result<Logits> {
        self.check(enc)?;
        Ok(self.forward_cached(enc).logits)
    }

    /// Accumulates `d(objective)/d(theta)` into `grad` given the objective's
    /// gradient w.r.t. both heads' logits.
    fn backward(&self, enc: &Encoding, c: &ForwardCache, d_patch: &[f64], d_term: &[f64; 2], grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let fs = a.feature_size();

        let mut d_term_hidden = vec![0.0; a.term_hidden];
        {
            let (dw, db) = nn::split_two(grad, l.w_term_out, l.b_term_out);
            nn::dense_backward(&c.term_hidden, l.w_term_out.of(p), d_term, dw, db, Some(&mut d_term_hidden));
        }
        nn::relu_backward_in_place(&c.term_hidden, &mut d_term_hidden);
        let mut d_term_input = vec![0.0; a.term_in()];
        {
            let (dw, db) = nn::split_two(grad, l.w_term, l.b_term);
            nn::dense_backward(&c.term_input, l.w_term.of(p), &d_term_hidden, dw, db, Some(&mut d_term_input));
        }
        // every patch's hidden activations feed the sum
        let d_sum = &d_term_input[..a.patch_hidden];

        let mut d_features = vec![0.0; c.trunk.out.len()];
        for (k, r) in enc.regions.iter().enumerate() {
            let h = &c.patch_hidden[k];
            let mut d_h = d_sum.to_vec();
            {
                let (dw, db) = nn::split_two(grad, l.w_logit, l.b_logit);
                nn::dense_backward(h, l.w_logit.of(p), &[d_patch[k]], dw, db, Some(&mut d_h));
            }
            nn::relu_backward_in_place(h, &mut d_h);
            let mut d_x = vec![0.0; a.patch_in()];
            {
                let (dw, db) = nn::split_two(grad, l.w_patch, l.b_patch);
                nn::dense_backward(&c.patch_inputs[k], l.w_patch.of(p), &d_h, dw, db, Some(&mut d_x));
            }
            let inv = 1.0 / r.area() as f64;
            for ch in 0..a.conv2 {
                let g = d_x[ch] * inv;
                if g == 0.0 {
                    continue;
                }
                let plane = &mut d_features[ch * fs * fs..(ch + 1) * fs * fs];
                for y in r.y..r.y + r.h {
                    for v in &mut plane[y * fs + r.x..y * fs + r.x + r.w] {
                        *v += g;
                    }
                }
            }
        }
        a.trunk().backward(&l.trunk, p, &c.trunk, &d_features, grad);
    }

    /// Log-probability of `action` (sum of both heads), unmasked.
    pub fn log_prob(&self, enc: &Encoding, action: Action) -> Result<f64> {
        let logits = self.forward(enc)?;
        Ok(action_log_prob(&logits, action, None))
    }

    /// Adds `weight * d log pi(action | enc) / d theta` into `grad` and
    /// returns the log-probability.
    pub fn accumulate_log_prob_grad(
        &self,
        enc: &Encoding,
        action: Action,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check(enc)?;
        let c = self.forward_cached(enc);
        let lp = action_log_prob(&c.logits, action, None);
        if weight == 0.0 {
            return Ok(lp);
        }
        let probs = math::softmax(&c.logits.patch, None);
        let d_patch: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &q)| weight * (f64::from(u8::from(i == action.patch)) - q))
            .collect();
        let tq = math::softmax(&c.logits.term, None);
        let j = usize::from(action.terminate);
        let d_term = [
            weight * (f64::from(u8::from(j == 0)) - tq[0]),
            weight * (f64::from(u8::from(j == 1)) - tq[1]),
        ];
        self.backward(enc, &c, &d_patch, &d_term, grad);
        Ok(lp)
    }

    /// Draws `a ~ pi(. | s)`. Patches where `allowed[p]` is false are excluded.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        enc: &Encoding,
        rng: &mut R,
        allowed: Option<&[bool]>,
    ) -> Result<(Action, f64)> {
        let logits = self.forward(enc)?;
        sample_from_logits(&logits, rng, allowed)
    }

    /// Highest-probability action among allowed patches.
    pub fn greedy_action(&self, enc: &Encoding, allowed: Option<&[bool]>) -> Result<(Action, f64)> {
        let logits = self.forward(enc)?;
        greedy_from_logits(&logits, allowed)
    }
}

fn action_log_prob(logits: &Logits, action: Action, allowed: Option<&[bool]>) -> f64 {
    let lp_patch = logits.patch[action.patch] - math::log_sum_exp(&logits.patch, allowed);
    let j = usize::from(action.terminate);
    let lp_term = logits.term[j] - math::log_sum_exp(&logits.term, None);
    lp_patch + lp_term
}

fn check_allowed(n: usize, allowed: Option<&[bool]>) -> Result<()> {
    if let Some(m) = allowed {
        if m.len() != n {
            return Err(Error::EncodingMismatch("mask length differs from P".into()));
        }
        if !m.iter().any(|&k| k) {
            return Err(Error::AllMasked);
        }
    }
    Ok(())
}

/// Inverse-CDF draw from a probability vector (zero entries never drawn).
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in probs.iter().enumerate() {
        if q <= 0.0 {
            continue;
        }
        acc += q;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &Logits,
    rng: &mut R,
    allowed: Option<&[bool]>,
) -> Result<(Action, f64)> {
    check_allowed(logits.patch.len(), allowed)?;
    let probs = math::softmax(&logits.patch, allowed);
    let patch = draw(&probs, rng);
    let tq = math::softmax(&logits.term, None);
    let terminate = draw(&tq, rng) == 1;
    let action = Action { patch, terminate };
    Ok((action, action_log_prob(logits, action, allowed)))
}

pub fn greedy_from_logits(logits: &Logits, allowed: Option<&[bool]>) -> Result<(Action, f64)> {
    check_allowed(logits.patch.len(), allowed)?;
    let patch = (0..logits.patch.len())
        .filter(|&i| allowed.is_none_or(|m| m[i]))
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if logits.patch[b] >= logits.patch[i] => Some(b),
            _ => Some(i),
        })
        .expect("at least one allowed patch");
    let terminate = logits.term[1] > logits.term[0];
    let action = Action { patch, terminate };
    Ok((action, action_log_prob(logits, action, allowed)))
}

/// `out[t] = sum_k gamma^k rewards[t + k]`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub encoding: Encoding,
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
}

/// One agent's experience in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent: Agent,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new(agent: Agent) -> Self {
        Self {
            agent,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Undiscounted episode return.
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub gamma: f64,
    /// Subtract the batch-mean return-to-go from every return.
    pub baseline: bool,
    /// Rescale the gradient to at most this L2 norm (`None`: no clipping).
    pub max_grad_norm: Option<f64>,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            gamma: 0.96,
            baseline: false,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub trajectories: usize,
    pub records: usize,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub baseline: f64,
}

/// Per-record advantages: discounted returns-to-go, optionally minus the
/// batch mean. Empty trajectories contribute nothing.
pub fn advantages(trajectories: &[Trajectory], gamma: f64, baseline: bool) -> (Vec<Vec<f64>>, f64) {
    let mut all: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| returns_to_go(&t.rewards(), gamma))
        .collect();
    let flat: Vec<f64> = all.iter().flatten().copied().collect();
    let b = if baseline { math::mean(&flat) } else { 0.0 };
    for g in all.iter_mut().flatten() {
        *g -= b;
    }
    (all, b)
}

/// Surrogate objective `(1/N) sum_tau sum_t log pi(a_t | s_t) A_t` at the
/// current parameters, with the advantages held fixed.
pub fn surrogate(policy: &Policy, trajectories: &[Trajectory], adv: &[Vec<f64>]) -> Result<f64> {
    let n = trajectories.iter().filter(|t| !t.is_empty()).count().max(1) as f64;
    let mut total = 0.0;
    for (traj, a) in trajectories.iter().zip(adv) {
        for (step, &g) in traj.steps.iter().zip(a) {
            total += policy.log_prob(&step.encoding, step.action)? * g;
        }
    }
    Ok(total / n)
}

/// Gradient of [`surrogate`] w.r.t. the policy parameters.
pub fn surrogate_gradient(
    policy: &Policy,
    trajectories: &[Trajectory],
    adv: &[Vec<f64>],
) -> Result<(Vec<f64>, f64)> {
    let n = trajectories.iter().filter(|t| !t.is_empty()).count().max(1) as f64;
    let mut grad = vec![0.0; policy.params.len()];
    let mut total = 0.0;
    for (traj, a) in trajectories.iter().zip(adv) {
        for (step, &g) in traj.steps.iter().zip(a) {
            let lp = policy.accumulate_log_prob_grad(&step.encoding, step.action, g / n, &mut grad)?;
            total += lp * g;
        }
    }
    Ok((grad, total / n))
}

/// One gradient-ascent step on the surrogate objective using trajectories of
/// both agents.
pub fn policy_gradient_update(
    policy: &mut Policy,
    trajectories: &[Trajectory],
    cfg: &UpdateConfig,
    optimizer: &mut Optimizer,
) -> Result<UpdateStats> {
    let records: usize = trajectories.iter().map(Trajectory::len).sum();
    if records == 0 {
        return Err(Error::NoTrajectories);
    }
    let (adv, b) = advantages(trajectories, cfg.gamma, cfg.baseline);
    let (mut grad, value) = surrogate_gradient(policy, trajectories, &adv)?;
    let norm = math::sqrt(grad.iter().map(|g| g * g).sum());
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if let Some(max) = cfg.max_grad_norm {
        if norm > max {
            let s = max / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    // optimisers descend, we ascend
    grad.iter_mut().for_each(|g| *g = -*g);
    optimizer.step(&mut policy.params, &grad);
    Ok(UpdateStats {
        trajectories: trajectories.iter().filter(|t| !t.is_empty()).count(),
        records,
        surrogate: value,
        grad_norm: norm,
        baseline: b,
    })
}
