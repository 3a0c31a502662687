//! Synthetic image/mask/label generator used as a desk-scale dataset.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub channels: usize,
    pub roi_kind: RoiKind,
    /// ROI area as a fraction of the image, `[lo, hi]`.
    pub roi_area_fraction: (f64, f64),
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_std: f64,
    /// Probability that a sample contains an ROI.
    pub positive_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            roi_kind: RoiKind::Rectangle,
            roi_area_fraction: (0.1, 0.3),
            foreground_mean: 0.8,
            background_mean: 0.2,
            noise_std: 0.05,
            positive_fraction: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.roi_area_fraction;
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "roi_area_fraction must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        for m in [self.foreground_mean, self.background_mean] {
            if !(0.0..=1.0).contains(&m) {
                return bad("intensity means must lie in [0, 1]");
            }
        }
        // the pixel grid must be able to express an area inside the range
        let n = (self.image_size * self.image_size) as f64;
        if libm::floor(hi * n) < libm::ceil(lo * n) {
            return bad("roi_area_fraction range is narrower than one pixel");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    pub label: u8,
}

/// Draws one sample. `cfg` must have passed [`SyntheticConfig::validate`].
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticConfig) -> Sample {
    let s = cfg.image_size;
    let positive = rng.random::<f64>() < cfg.positive_fraction;
    let mask = if positive {
        match cfg.roi_kind {
            RoiKind::Rectangle => rectangle_mask(rng, cfg),
            RoiKind::Ellipse => ellipse_mask(rng, cfg),
        }
    } else {
        Mask::empty(s, s)
    };

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let mut data = Vec::with_capacity(s * s * cfg.channels);
    for y in 0..s {
        for x in 0..s {
            let mean = if mask.get(x, y) {
                cfg.foreground_mean
            } else {
                cfg.background_mean
            };
            for _ in 0..cfg.channels {
                let v = if cfg.noise_std > 0.0 {
                    mean + noise.sample(rng)
                } else {
                    mean
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let image = Image::new(s, s, cfg.channels, data).expect("clamped intensities");
    let label = u8::from(!mask.is_empty());
    Sample { image, mask, label }
}

/// Generates `n` samples from one RNG stream.
pub fn generate_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SyntheticConfig,
    n: usize,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..n).map(|_| generate_sample(rng, cfg)).collect())
}

fn area_in_range(cfg: &SyntheticConfig, count: usize) -> bool {
    let n = (cfg.image_size * cfg.image_size) as f64;
    let f = count as f64 / n;
    count > 0 && f >= cfg.roi_area_fraction.0 && f <= cfg.roi_area_fraction.1
}

fn draw_area_and_aspect<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticConfig) -> (f64, f64) {
    let (lo, hi) = cfg.roi_area_fraction;
    let area = lo + (hi - lo) * rng.random::<f64>();
    // log-uniform aspect ratio in [1/2, 2]
    let aspect = libm::exp((rng.random::<f64>() * 2.0 - 1.0) * core::f64::consts::LN_2);
    (area * (cfg.image_size * cfg.image_size) as f64, aspect)
}

fn rectangle_mask<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticConfig) -> Mask {
    let s = cfg.image_size;
    loop {
        let (area, aspect) = draw_area_and_aspect(rng, cfg);
        let w = libm::round(libm::sqrt(area * aspect)) as usize;
        if w == 0 || w > s {
            continue;
        }
        let h = libm::round(area / w as f64) as usize;
        if h == 0 || h > s || !area_in_range(cfg, w * h) {
            continue;
        }
        let x0 = rng.random_range(0..=s - w);
        let y0 = rng.random_range(0..=s - h);
        let mut m = Mask::empty(s, s);
        m.fill_rect(crate::image::Rect::new(x0, y0, w, h), true);
        return m;
    }
}

fn ellipse_mask<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticConfig) -> Mask {
    let s = cfg.image_size;
    let sf = s as f64;
    loop {
        let (area, aspect) = draw_area_and_aspect(rng, cfg);
        let rx = libm::sqrt(area * aspect / core::f64::consts::PI);
        let ry = area / (core::f64::consts::PI * rx);
        if 2.0 * rx > sf || 2.0 * ry > sf {
            continue;
        }
        let cx = rx + (sf - 2.0 * rx) * rng.random::<f64>();
        let cy = ry + (sf - 2.0 * ry) * rng.random::<f64>();
        let mut m = Mask::empty(s, s);
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    m.set(x, y, true);
                }
            }
        }
        if area_in_range(cfg, m.count()) {
            return m;
        }
    }
}
