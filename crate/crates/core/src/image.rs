//! Image and mask containers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major intensity image with values in `[0, 1]`.
///
/// Pixel `(x, y)` channel `c` lives at `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty {width}x{height} image")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}*{height}*{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sets one intensity, clamped into `[0, 1]`.
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    fn check_rect(&self, r: Rect) -> Result<()> {
        if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
            return Err(Error::InvalidImage(format!(
                "rect {r:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Copies the sub-image under `r`.
    pub fn crop(&self, r: Rect) -> Result<Image> {
        self.check_rect(r)?;
        let c = self.channels;
        let mut data = Vec::with_capacity(r.area() * c);
        for y in r.y..r.y + r.h {
            let start = (y * self.width + r.x) * c;
            data.extend_from_slice(&self.data[start..start + r.w * c]);
        }
        Ok(Image {
            width: r.w,
            height: r.h,
            channels: c,
            data,
        })
    }

    /// Sets every channel of every pixel under `r` to zero.
    pub fn zero_rect(&mut self, r: Rect) -> Result<()> {
        self.check_rect(r)?;
        let c = self.channels;
        for y in r.y..r.y + r.h {
            let start = (y * self.width + r.x) * c;
            self.data[start..start + r.w * c].fill(0.0);
        }
        Ok(())
    }

    pub fn rect_is_zero(&self, r: Rect) -> bool {
        let c = self.channels;
        (r.y..r.y + r.h).all(|y| {
            let start = (y * self.width + r.x) * c;
            self.data[start..start + r.w * c].iter().all(|&v| v == 0.0)
        })
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear resize with half-pixel centres (edge samples clamp).
    ///
    /// An exact 2x reduction therefore averages 2x2 blocks, and resizing to the
    /// same size returns an identical copy.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        resize_bilinear_region(self, self.full_rect(), width, height)
    }

    /// Pads right/bottom with zeros up to `width x height`.
    pub fn pad_to(&self, width: usize, height: usize) -> Image {
        assert!(width >= self.width && height >= self.height);
        let c = self.channels;
        let mut data = vec![0.0; width * height * c];
        for y in 0..self.height {
            let src = y * self.width * c;
            let dst = y * width * c;
            data[dst..dst + self.width * c].copy_from_slice(&self.data[src..src + self.width * c]);
        }
        Image {
            width,
            height,
            channels: c,
            data,
        }
    }
}

/// Bilinear resize of the region `r` of `src` without materialising the crop.
pub fn resize_bilinear_region(src: &Image, r: Rect, width: usize, height: usize) -> Image {
    let c = src.channels;
    let mut data = vec![0.0; width * height * c];
    let sx = r.w as f64 / width as f64;
    let sy = r.h as f64 / height as f64;
    let taps = |d: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    for dy in 0..height {
        let (y0, y1, fy) = taps(dy, sy, r.h);
        for dx in 0..width {
            let (x0, x1, fx) = taps(dx, sx, r.w);
            for ch in 0..c {
                let p = |x: usize, y: usize| src.get(r.x + x, r.y + y, ch);
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                data[(dy * width + dx) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image {
        width,
        height,
        channels: c,
        data,
    }
}

/// Binary label grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "mask data length {} != {width}*{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn fill_rect(&mut self, r: Rect, v: bool) {
        for y in r.y..(r.y + r.h).min(self.height) {
            for x in r.x..(r.x + r.w).min(self.width) {
                self.data[y * self.width + x] = v;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixels inside `r`.
    pub fn count_in(&self, r: Rect) -> usize {
        (r.y..r.y + r.h)
            .map(|y| {
                self.data[y * self.width + r.x..y * self.width + r.x + r.w]
                    .iter()
                    .filter(|&&v| v)
                    .count()
            })
            .sum()
    }

    /// Top-left `width x height` corner (used to undo padding).
    pub fn crop_to(&self, width: usize, height: usize) -> Mask {
        let mut out = Mask::empty(width, height);
        for y in 0..height.min(self.height) {
            for x in 0..width.min(self.width) {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn ensure_same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}
