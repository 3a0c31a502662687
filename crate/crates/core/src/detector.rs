//! Object-presence detector: a small convolutional binary classifier trained
//! with binary cross-entropy on image-level labels, plus an exact oracle
//! scorer for tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear_region, Image, Mask, Rect};
use crate::math;
use crate::nn::{self, ConvTrunk, LayoutBuilder, Optimizer, OptimizerKind, Pool, Span, TrunkLayout};

/// Probability clamp used inside [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Decision threshold for object presence.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// Binary cross-entropy `-y ln p - (1 - y) ln(1 - p)` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(y: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * math::ln(p) - (1.0 - y) * math::ln(1.0 - p)
}

/// Probability clamp used when a scorer only exposes probabilities.
pub const LOGIT_EPS: f64 = 1e-12;

/// Anything that can score how likely a region of an image contains the ROI.
pub trait PatchScorer {
    /// Presence probability of `rect` within `image`.
    fn score_region(&self, image: &Image, rect: Rect) -> f64;

    /// Score of an all-zero patch. A property of the scorer, not of any image.
    fn blank_score(&self) -> f64;

    /// Probability and logit of `rect` in one evaluation. The logit keeps
    /// confident patches distinguishable where the probability rounds to 1.
    fn score_and_logit(&self, image: &Image, rect: Rect) -> (f64, f64) {
        let s = self.score_region(image, rect);
        (s, math::logit(s, LOGIT_EPS))
    }

    fn blank_logit(&self) -> f64 {
        math::logit(self.blank_score(), LOGIT_EPS)
    }
}

impl<S: PatchScorer + ?Sized> PatchScorer for &S {
    fn score_region(&self, image: &Image, rect: Rect) -> f64 {
        (**self).score_region(image, rect)
    }

    fn blank_score(&self) -> f64 {
        (**self).blank_score()
    }

    fn score_and_logit(&self, image: &Image, rect: Rect) -> (f64, f64) {
        (**self).score_and_logit(image, rect)
    }

    fn blank_logit(&self) -> f64 {
        (**self).blank_logit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorArch {
    /// Side of the square network input; every image or patch is bilinearly
    /// resized to it.
    pub input_size: usize,
    pub channels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub pool: Pool,
    pub head: Head,
}

/// How the conv feature map is reduced before the dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Per-channel mean over all positions.
    #[default]
    GlobalAvg,
    /// The whole feature map, flattened.
    Flatten,
}

impl Head {
    pub fn code(self) -> u8 {
        match self {
            Head::GlobalAvg => 0,
            Head::Flatten => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Head::GlobalAvg),
            1 => Some(Head::Flatten),
            _ => None,
        }
    }
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: 1,
            conv1: 4,
            conv2: 8,
            hidden: 16,
            pool: Pool::Max,
            head: Head::GlobalAvg,
        }
    }
}

impl DetectorArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 || !self.input_size.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "detector input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("detector channels must be 1 or 3".into()));
        }
        if self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 {
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
            pool_after_conv2: true,
        }
    }

    fn head_len(&self) -> usize {
        match self.head {
            Head::GlobalAvg => self.conv2,
            Head::Flatten => self.trunk().out_len(),
        }
    }

    fn layout(&self) -> DetectorLayout {
        let trunk = self.trunk();
        let mut b = LayoutBuilder::default();
        let t = trunk.layout(&mut b);
        let w3 = b.take(self.hidden * self.head_len());
        let b3 = b.take(self.hidden);
        let w4 = b.take(self.hidden);
        let b4 = b.take(1);
        DetectorLayout {
            trunk: t,
            w3,
            b3,
            w4,
            b4,
            total: b.total(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct DetectorLayout {
    trunk: TrunkLayout,
    w3: Span,
    b3: Span,
    w4: Span,
    b4: Span,
    total: usize,
}

/// Trained (or freshly initialised) detector `f(.; w)`.
#[derive(Debug, Clone)]
pub struct Detector {
    arch: DetectorArch,
    params: Vec<f64>,
    blank: f64,
}

impl PartialEq for Detector {
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

struct ForwardCache {
    trunk: nn::TrunkCache,
    features: Vec<f64>,
    hidden: Vec<f64>,
    logit: f64,
}

impl Detector {
    pub fn init<R: Rng + ?Sized>(arch: DetectorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let mut params = vec![0.0; l.total];
        arch.trunk().init(&l.trunk, &mut params, rng);
        nn::init_he(rng, &mut params, l.w3, arch.head_len(), 1.0);
        nn::init_he(rng, &mut params, l.w4, arch.hidden, 0.5);
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: DetectorArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::ParameterCount {
                expected,
                actual: params.len(),
            });
        }
        let mut d = Self {
            arch,
            params,
            blank: 0.0,
        };
        d.refresh_blank();
        Ok(d)
    }

    pub fn arch(&self) -> &DetectorArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn refresh_blank(&mut self) {
        let zeros = vec![0.0; self.arch.channels * self.arch.input_size * self.arch.input_size];
        self.blank = math::sigmoid(self.forward(&zeros).logit);
    }

    /// Resizes `rect` of `image` to the network input and lays it out CHW.
    pub fn prepare_region(&self, image: &Image, rect: Rect) -> Vec<f64> {
        let s = self.arch.input_size;
        let resized = resize_bilinear_region(image, rect, s, s);
        to_chw(&resized, self.arch.channels)
    }

    pub fn prepare(&self, image: &Image) -> Vec<f64> {
        self.prepare_region(image, image.full_rect())
    }

    fn forward(&self, input: &[f64]) -> ForwardCache {
        let l = self.arch.layout();
        let trunk = self.arch.trunk().forward(&l.trunk, &self.params, input);
        let features = match self.arch.head {
            Head::Flatten => trunk.out.clone(),
            Head::GlobalAvg => {
                let n = trunk.out.len() / self.arch.conv2;
                trunk
                    .out
                    .chunks(n)
                    .map(|c| c.iter().sum::<f64>() / n as f64)
                    .collect()
            }
        };
        let mut hidden = vec![0.0; self.arch.hidden];
        nn::dense_forward(&features, l.w3.of(&self.params), l.b3.of(&self.params), &mut hidden);
        nn::relu_in_place(&mut hidden);
        let mut out = [0.0];
        nn::dense_forward(&hidden, l.w4.of(&self.params), l.b4.of(&self.params), &mut out);
        ForwardCache {
            trunk,
            features,
            hidden,
            logit: out[0],
        }
    }

    /// Logit of a prepared input tensor.
    pub fn logit_tensor(&self, input: &[f64]) -> f64 {
        self.forward(input).logit
    }

    /// Unbounded presence score; a monotone transform of [`Detector::score`].
    pub fn logit(&self, patch: &Image) -> f64 {
        self.logit_tensor(&self.prepare(patch))
    }

    /// Presence probability of a whole image or patch.
    pub fn score(&self, patch: &Image) -> f64 {
        math::sigmoid(self.logit(patch))
    }

    /// BCE loss on one prepared input and the gradient of that loss,
    /// accumulated into `grad`.
    pub fn loss_and_grad(&self, input: &[f64], label: f64, grad: &mut [f64]) -> f64 {
        let l = self.arch.layout();
        let c = self.forward(input);
        let p = math::sigmoid(c.logit);
        let loss = bce_loss(label, p);
        // d/dz of BCE(sigmoid(z))
        let dz = p - label;
        let mut d_hidden = vec![0.0; self.arch.hidden];
        {
            let (dw4, db4) = nn::split_two(grad, l.w4, l.b4);
            nn::dense_backward(
                &c.hidden,
                l.w4.of(&self.params),
                &[dz],
                dw4,
                db4,
                Some(&mut d_hidden),
            );
        }
        nn::relu_backward_in_place(&c.hidden, &mut d_hidden);
        let mut d_features = vec![0.0; c.features.len()];
        {
            let (dw3, db3) = nn::split_two(grad, l.w3, l.b3);
            nn::dense_backward(
                &c.features,
                l.w3.of(&self.params),
                &d_hidden,
                dw3,
                db3,
                Some(&mut d_features),
            );
        }
        let d_trunk = match self.arch.head {
            Head::Flatten => d_features,
            Head::GlobalAvg => {
                let n = c.trunk.out.len() / self.arch.conv2;
                d_features
                    .iter()
                    .flat_map(|&g| core::iter::repeat_n(g / n as f64, n))
                    .collect()
            }
        };
        self.arch
            .trunk()
            .backward(&l.trunk, &self.params, &c.trunk, &d_trunk, grad);
        loss
    }

    /// BCE loss without the gradient.
    pub fn loss(&self, input: &[f64], label: f64) -> f64 {
        bce_loss(label, math::sigmoid(self.forward(input).logit))
    }

    /// Replaces the parameters in place (used by optimisers and gradient checks).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ParameterCount {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        self.refresh_blank();
        Ok(())
    }
}

impl PatchScorer for Detector {
    fn score_region(&self, image: &Image, rect: Rect) -> f64 {
        math::sigmoid(self.logit_tensor(&self.prepare_region(image, rect)))
    }

    fn blank_score(&self) -> f64 {
        self.blank
    }

    fn score_and_logit(&self, image: &Image, rect: Rect) -> (f64, f64) {
        let z = self.logit_tensor(&self.prepare_region(image, rect));
        (math::sigmoid(z), z)
    }
}

fn to_chw(image: &Image, channels: usize) -> Vec<f64> {
    let (w, h) = image.dims();
    let src_c = image.channels();
    let mut out = vec![0.0; channels * w * h];
    for y in 0..h {
        for x in 0..w {
            let gray = if src_c == channels {
                0.0
            } else {
                (0..src_c).map(|c| image.get(x, y, c)).sum::<f64>() / src_c as f64
            };
            for c in 0..channels {
                out[(c * h + y) * w + x] = if src_c == channels {
                    image.get(x, y, c)
                } else {
                    gray
                };
            }
        }
    }
    out
}

/// Perfect scorer built from a ground-truth mask: a patch scores the fraction
/// of its pixels that belong to the ROI, and an all-zero (erased) patch scores 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDetector {
    mask: Mask,
}

impl OracleDetector {
    pub fn new(mask: Mask) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }
}

impl PatchScorer for OracleDetector {
    fn score_region(&self, image: &Image, rect: Rect) -> f64 {
        if image.rect_is_zero(rect) {
            return 0.0;
        }
        let (mw, mh) = self.mask.dims();
        let x1 = (rect.x + rect.w).min(mw);
        let y1 = (rect.y + rect.h).min(mh);
        if rect.x >= x1 || rect.y >= y1 {
            return 0.0;
        }
        let inside = Rect::new(rect.x, rect.y, x1 - rect.x, y1 - rect.y);
        self.mask.count_in(inside) as f64 / rect.area() as f64
    }

    fn blank_score(&self) -> f64 {
        0.0
    }
}

/// Wraps a scorer and counts `score_region` calls.
#[derive(Debug)]
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: PatchScorer> PatchScorer for CountingScorer<S> {
    fn score_region(&self, image: &Image, rect: Rect) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_region(image, rect)
    }

    fn blank_score(&self) -> f64 {
        self.inner.blank_score()
    }

    fn score_and_logit(&self, image: &Image, rect: Rect) -> (f64, f64) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_and_logit(image, rect)
    }

    fn blank_logit(&self) -> f64 {
        self.inner.blank_logit()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub arch: DetectorArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            arch: DetectorArch::default(),
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 15,
            seed: 0,
            validation_fraction: 0.2,
            optimizer: OptimizerKind::sgd_momentum(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
    /// Mean training loss over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: Option<f64>,
    pub validation_loss: Option<f64>,
    pub train_size: usize,
    pub validation_size: usize,
}

/// Trains a detector from `(image, label)` pairs only.
pub fn train_detector(
    images: &[Image],
    labels: &[u8],
    cfg: &DetectorTrainConfig,
) -> Result<(Detector, DetectorTrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut detector = Detector::init(cfg.arch, &mut rng)?;

    let tensors: Vec<Vec<f64>> = images.iter().map(|im| detector.prepare(im)).collect();
    let ys: Vec<f64> = labels.iter().map(|&y| f64::from(y.min(1))).collect();

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (libm::floor(images.len() as f64 * cfg.validation_fraction) as usize)
        .min(images.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let has = |v: f64| train_idx.iter().any(|&i| ys[i] == v);
    if !has(0.0) || !has(1.0) {
        return Err(Error::SingleClass);
    }

    let mean_loss = |d: &Detector, idx: &[usize]| -> f64 {
        idx.iter().map(|&i| d.loss(&tensors[i], ys[i])).sum::<f64>() / idx.len() as f64
    };
    let initial_loss = mean_loss(&detector, &train_idx);

    let n_params = detector.params.len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, n_params);
    let mut grad = vec![0.0; n_params];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                total += detector.loss_and_grad(&tensors[i], ys[i], &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, cfg));
            }
            let mut params = core::mem::take(&mut detector.params);
            opt.step(&mut params, &grad);
            detector.params = params;
        }
        let mean = total / train_idx.len() as f64;
        if !mean.is_finite() {
            return Err(diverged(epoch, cfg));
        }
        epoch_losses.push(mean);
    }
    detector.refresh_blank();

    let (validation_accuracy, validation_loss) = if val_idx.is_empty() {
        (None, None)
    } else {
        let correct = val_idx
            .iter()
            .filter(|&&i| {
                let p = math::sigmoid(detector.logit_tensor(&tensors[i]));
                (p >= PRESENCE_THRESHOLD) == (ys[i] == 1.0)
            })
            .count();
        (
            Some(correct as f64 / val_idx.len() as f64),
            Some(mean_loss(&detector, val_idx)),
        )
    };

    Ok((
        detector,
        DetectorTrainReport {
            initial_loss,
            epoch_losses,
            validation_accuracy,
            validation_loss,
            train_size: train_idx.len(),
            validation_size: val_idx.len(),
        },
    ))
}

fn diverged(epoch: usize, cfg: &DetectorTrainConfig) -> Error {
    Error::Diverged {
        epoch,
        config: format!(
            "lr={} batch_size={} epochs={} seed={} optimizer={:?}",
            cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.seed, cfg.optimizer
        ),
    }
}
