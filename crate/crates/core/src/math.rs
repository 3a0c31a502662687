//! Scalar helpers shared across modules (`libm`-backed so the crate stays `no_std`).

use alloc::vec::Vec;

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the argument clamped to `[eps, 1 - eps]`.
pub fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    ln(p / (1.0 - p))
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * exp(-0.5 * z * z)
}

/// Numerically stable log-sum-exp over the entries where `keep` is true
/// (all entries when `keep` is `None`). Returns `-inf` if nothing is kept.
pub fn log_sum_exp(xs: &[f64], keep: Option<&[bool]>) -> f64 {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let max = (0..xs.len())
        .filter(|&i| kept(i))
        .map(|i| xs[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = (0..xs.len())
        .filter(|&i| kept(i))
        .map(|i| exp(xs[i] - max))
        .sum();
    max + ln(s)
}

/// Softmax restricted to the entries where `keep` is true; masked entries get 0.
pub fn softmax(xs: &[f64], keep: Option<&[bool]>) -> Vec<f64> {
    let lse = log_sum_exp(xs, keep);
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            if keep.is_none_or(|k| k[i]) {
                exp(x - lse)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    sqrt(var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_respects_mask() {
        let p = softmax(&[1.0, 2.0, 3.0, 4.0], Some(&[true, false, true, false]));
        assert_eq!(p[1], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[2] / p[0] - exp(2.0)).abs() < 1e-9);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &x in &[-8.0, -1.0, 0.0, 0.3, 5.0] {
            assert!((logit(sigmoid(x), 1e-15) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_pdf_at_zero() {
        assert!((normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert!((normal_pdf(2.0) - 0.053_990_966_5).abs() < 1e-10);
    }
}
