//! Minimal differentiable building blocks shared by the detector and the policy.
//!
//! Tensors are plain `f64` slices in channel-major (CHW) order. Every layer has
//! an explicit forward and backward pass; the backward passes accumulate into
//! caller-provided gradient buffers so several samples can share one buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// 3x3 convolution, stride 1, zero "same" padding.
///
/// `weights` is `[c_out][c_in][3][3]`, `bias` is `[c_out]`.
pub fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(out.len(), c_out * h * w);
    for co in 0..c_out {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.fill(bias[co]);
        for ci in 0..c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let k = &weights[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    let n = x_hi - x_lo;
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let orow = &mut plane[y * w + x_lo..y * w + x_lo + n];
                        let irow = &src[sy * w + x_lo + kx - 1..sy * w + x_lo + kx - 1 + n];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += kv * i;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Backward pass of [`conv3x3_forward`]. Accumulates into `d_weights`,
/// `d_bias` and (when given) `d_input`.
pub fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    for co in 0..c_out {
        let g = &d_out[co * h * w..(co + 1) * h * w];
        d_bias[co] += g.iter().sum::<f64>();
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for ci in 0..c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let base = (co * c_in + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    let n = x_hi - x_lo;
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let grow = &g[y * w + x_lo..y * w + x_lo + n];
                        let irow = &src[sy * w + x_lo + kx - 1..sy * w + x_lo + kx - 1 + n];
                        acc += dot(grow, irow);
                    }
                    d_weights[base + ky * 3 + kx] += acc;
                    if let Some(din) = d_input.as_deref_mut() {
                        let kv = weights[base + ky * 3 + kx];
                        let dplane = &mut din[ci * h * w..(ci + 1) * h * w];
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let grow = &g[y * w + x_lo..y * w + x_lo + n];
                            let drow = &mut dplane[sy * w + x_lo + kx - 1..sy * w + x_lo + kx - 1 + n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_in_place(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was clipped by ReLU.
pub fn relu_backward_in_place(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Avg,
    Max,
}

impl Pool {
    pub fn code(self) -> u8 {
        match self {
            Pool::Avg => 0,
            Pool::Max => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Pool::Avg),
            1 => Some(Pool::Max),
            _ => None,
        }
    }
}

/// 2x2 pooling with stride 2 (`h`, `w` even). Returns, for max pooling, the
/// flat input index picked for every output cell.
pub fn pool2_forward(
    kind: Pool,
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = Vec::new();
    if kind == Pool::Max {
        argmax.resize(c * oh * ow, 0);
    }
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = [
                    (ch * h + 2 * oy) * w + 2 * ox,
                    (ch * h + 2 * oy) * w + 2 * ox + 1,
                    (ch * h + 2 * oy + 1) * w + 2 * ox,
                    (ch * h + 2 * oy + 1) * w + 2 * ox + 1,
                ];
                let o = (ch * oh + oy) * ow + ox;
                match kind {
                    Pool::Avg => out[o] = idx.iter().map(|&i| input[i]).sum::<f64>() * 0.25,
                    Pool::Max => {
                        let best = idx
                            .iter()
                            .copied()
                            .fold(idx[0], |b, i| if input[i] > input[b] { i } else { b });
                        out[o] = input[best];
                        argmax[o] = best;
                    }
                }
            }
        }
    }
    argmax
}

pub fn pool2_backward(
    kind: Pool,
    argmax: &[usize],
    c: usize,
    h: usize,
    w: usize,
    d_out: &[f64],
    d_input: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (ch * oh + oy) * ow + ox;
                match kind {
                    Pool::Avg => {
                        let g = d_out[o] * 0.25;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                d_input[(ch * h + 2 * oy + dy) * w + 2 * ox + dx] += g;
                            }
                        }
                    }
                    Pool::Max => d_input[argmax[o]] += d_out[o],
                }
            }
        }
    }
}

/// `out = W x + b` with `W` stored row-major `[n_out][n_in]`.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weights[o * n_in..(o + 1) * n_in];
        *y = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn dense_backward(
    x: &[f64],
    weights: &[f64],
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &mut d_weights[o * n_in..(o + 1) * n_in];
        for (rw, &xi) in row.iter_mut().zip(x) {
            *rw += g * xi;
        }
    }
    if let Some(dx) = d_x {
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &weights[o * n_in..(o + 1) * n_in];
            for (d, &wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
    }
}

/// Named slice of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.start..self.start + self.len]
    }

    pub fn of_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.start..self.start + self.len]
    }
}

/// Sequential allocator of [`Span`]s.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn take(&mut self, len: usize) -> Span {
        let s = Span {
            start: self.next,
            len,
        };
        self.next += len;
        s
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// He-normal initialisation of `span` with the given fan-in, scaled by `gain`.
pub fn init_he<R: Rng + ?Sized>(
    rng: &mut R,
    params: &mut [f64],
    span: Span,
    fan_in: usize,
    gain: f64,
) {
    let std = gain * libm::sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("finite std");
    for p in span.of_mut(params) {
        *p = normal.sample(rng);
    }
}

/// Two 3x3 convolution stages with ReLU; each stage optionally followed by a
/// 2x2 pool. Shared front end of the detector and the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTrunk {
    pub in_channels: usize,
    pub in_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub pool: Pool,
    pub pool_after_conv1: bool,
    pub pool_after_conv2: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrunkLayout {
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

/// Activations kept from a trunk forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    a2: Vec<f64>,
    arg2: Vec<usize>,
    pub out: Vec<f64>,
}

impl ConvTrunk {
    pub fn layout(&self, b: &mut LayoutBuilder) -> TrunkLayout {
        TrunkLayout {
            w1: b.take(self.conv1 * self.in_channels * 9),
            b1: b.take(self.conv1),
            w2: b.take(self.conv2 * self.conv1 * 9),
            b2: b.take(self.conv2),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, l: &TrunkLayout, params: &mut [f64], rng: &mut R) {
        init_he(rng, params, l.w1, self.in_channels * 9, 1.0);
        init_he(rng, params, l.w2, self.conv1 * 9, 1.0);
        l.b1.of_mut(params).fill(0.0);
        l.b2.of_mut(params).fill(0.0);
    }

    fn size1(&self) -> usize {
        if self.pool_after_conv1 {
            self.in_size / 2
        } else {
            self.in_size
        }
    }

    /// Spatial side of the output feature map.
    pub fn out_size(&self) -> usize {
        if self.pool_after_conv2 {
            self.size1() / 2
        } else {
            self.size1()
        }
    }

    pub fn out_len(&self) -> usize {
        self.conv2 * self.out_size() * self.out_size()
    }

    pub fn forward(&self, l: &TrunkLayout, params: &[f64], input: &[f64]) -> TrunkCache {
        let s0 = self.in_size;
        let mut a1 = vec![0.0; self.conv1 * s0 * s0];
        conv3x3_forward(
            input,
            self.in_channels,
            s0,
            s0,
            l.w1.of(params),
            l.b1.of(params),
            self.conv1,
            &mut a1,
        );
        relu_in_place(&mut a1);
        let s1 = self.size1();
        let (p1, arg1) = if self.pool_after_conv1 {
            let mut p = vec![0.0; self.conv1 * s1 * s1];
            let arg = pool2_forward(self.pool, &a1, self.conv1, s0, s0, &mut p);
            (p, arg)
        } else {
            (a1.clone(), Vec::new())
        };
        let mut a2 = vec![0.0; self.conv2 * s1 * s1];
        conv3x3_forward(
            &p1,
            self.conv1,
            s1,
            s1,
            l.w2.of(params),
            l.b2.of(params),
            self.conv2,
            &mut a2,
        );
        relu_in_place(&mut a2);
        let (out, arg2) = if self.pool_after_conv2 {
            let s2 = s1 / 2;
            let mut p = vec![0.0; self.conv2 * s2 * s2];
            let arg = pool2_forward(self.pool, &a2, self.conv2, s1, s1, &mut p);
            (p, arg)
        } else {
            (a2.clone(), Vec::new())
        };
        TrunkCache {
            input: input.to_vec(),
            a1,
            p1,
            arg1,
            a2,
            arg2,
            out,
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. `cache.out`) into `grad`.
    pub fn backward(
        &self,
        l: &TrunkLayout,
        params: &[f64],
        cache: &TrunkCache,
        d_out: &[f64],
        grad: &mut [f64],
    ) {
        let s0 = self.in_size;
        let s1 = self.size1();
        let mut d_a2 = if self.pool_after_conv2 {
            let mut d = vec![0.0; self.conv2 * s1 * s1];
            pool2_backward(self.pool, &cache.arg2, self.conv2, s1, s1, d_out, &mut d);
            d
        } else {
            d_out.to_vec()
        };
        relu_backward_in_place(&cache.a2, &mut d_a2);
        let mut d_p1 = vec![0.0; self.conv1 * s1 * s1];
        {
            let (dw2, db2) = split_two(grad, l.w2, l.b2);
            conv3x3_backward(
                &cache.p1,
                self.conv1,
                s1,
                s1,
                l.w2.of(params),
                self.conv2,
                &d_a2,
                dw2,
                db2,
                Some(&mut d_p1),
            );
        }
        let mut d_a1 = if self.pool_after_conv1 {
            let mut d = vec![0.0; self.conv1 * s0 * s0];
            pool2_backward(self.pool, &cache.arg1, self.conv1, s0, s0, &d_p1, &mut d);
            d
        } else {
            d_p1
        };
        relu_backward_in_place(&cache.a1, &mut d_a1);
        let (dw1, db1) = split_two(grad, l.w1, l.b1);
        conv3x3_backward(
            &cache.input,
            self.in_channels,
            s0,
            s0,
            l.w1.of(params),
            self.conv1,
            &d_a1,
            dw1,
            db1,
            None,
        );
    }
}

/// Two disjoint mutable spans of one buffer (`a` must precede `b`).
pub fn split_two(buf: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    assert!(a.start + a.len <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (
        &mut lo[a.start..a.start + a.len],
        &mut hi[..b.len],
    )
}

/// First-order optimisers. `step` always *descends* along `grad`; callers that
/// maximise pass the negated gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            m: vec![0.0; n_params],
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, m), g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.t as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
    }
}

/// Largest relative discrepancy between two gradients, with `floor` guarding
/// the denominator for entries that are both ~0.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c_in, c_out, h, w) = (2, 3, 5, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
        let weights: Vec<f64> = (0..c_out * c_in * 9).map(|_| rng.random::<f64>() - 0.5).collect();
        let bias = [0.1, -0.2, 0.3];
        let mut out = vec![0.0; c_out * h * w];
        conv3x3_forward(&input, c_in, h, w, &weights, &bias, c_out, &mut out);
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += weights[(co * c_in + ci) * 9 + ky * 3 + kx]
                                        * input[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(co * h + y) * w + x] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        for pool in [Pool::Avg, Pool::Max] {
            let trunk = ConvTrunk {
                in_channels: 2,
                in_size: 8,
                conv1: 3,
                conv2: 2,
                pool,
                pool_after_conv1: true,
                pool_after_conv2: true,
            };
            let mut b = LayoutBuilder::default();
            let l = trunk.layout(&mut b);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut params = vec![0.0; b.total()];
            trunk.init(&l, &mut params, &mut rng);
            for p in l.b1.of_mut(&mut params) {
                *p = 0.1;
            }
            let input: Vec<f64> = (0..2 * 64).map(|_| rng.random::<f64>()).collect();
            let proj: Vec<f64> = (0..trunk.out_len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let f = |p: &[f64]| -> f64 {
                let c = trunk.forward(&l, p, &input);
                c.out.iter().zip(&proj).map(|(a, b)| a * b).sum()
            };
            let cache = trunk.forward(&l, &params, &input);
            let mut grad = vec![0.0; b.total()];
            trunk.backward(&l, &params, &cache, &proj, &mut grad);
            let num = numeric_grad(&f, &params, 1e-6);
            let err = max_relative_error(&grad, &num, 1e-6);
            assert!(err < 1e-4, "{pool:?}: {err}");
        }
    }

    #[test]
    fn adam_and_sgd_descend_a_quadratic() {
        for kind in [OptimizerKind::sgd_momentum(), OptimizerKind::adam()] {
            let mut x = vec![3.0, -2.0];
            let mut opt = Optimizer::new(kind, 0.05, 2);
            for _ in 0..500 {
                let g = [2.0 * x[0], 2.0 * x[1]];
                opt.step(&mut x, &g);
            }
            assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{kind:?} {x:?}");
        }
    }
}
