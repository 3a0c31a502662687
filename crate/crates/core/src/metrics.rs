//! Overlap metrics and over/under-segmentation accounting.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Mask;
use crate::math;

/// Pixel counts of the four confusion cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    pred.ensure_same_dims(gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn ratios(&self) -> Ratios {
        let n = (self.tp + self.tn + self.fp + self.fn_) as f64;
        let pct = |k: usize| 100.0 * k as f64 / n;
        Ratios {
            tp: pct(self.tp),
            tn: pct(self.tn),
            fp: pct(self.fp),
            fn_: pct(self.fn_),
        }
    }
}

/// Confusion cells as percentages of the image (sum to 100).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ratios {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.iou())
}

/// Dice coefficient; 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn confusion_ratios(pred: &Mask, gt: &Mask) -> Result<Ratios> {
    Ok(confusion(pred, gt)?.ratios())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub iou: f64,
    pub dice: f64,
    pub ratios: Ratios,
}

pub fn score_pair(pred: &Mask, gt: &Mask) -> Result<ImageScore> {
    let c = confusion(pred, gt)?;
    Ok(ImageScore {
        iou: c.iou(),
        dice: c.dice(),
        ratios: c.ratios(),
    })
}

/// Set-level summary: per-image metrics averaged in input order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub miou: f64,
    pub mdsc: f64,
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

pub fn aggregate(scores: &[ImageScore]) -> Aggregate {
    let col = |f: fn(&ImageScore) -> f64| math::mean(&scores.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        miou: col(|s| s.iou),
        mdsc: col(|s| s.dice),
        tp: col(|s| s.ratios.tp),
        tn: col(|s| s.ratios.tn),
        fp: col(|s| s.ratios.fp),
        fn_: col(|s| s.ratios.fn_),
    }
}

/// Mean and sample standard deviation of `run(seed)` over `seeds`.
pub fn seed_variance<F>(seeds: &[u64], mut run: F) -> Result<(f64, f64)>
where
    F: FnMut(u64) -> Result<f64>,
{
    let values = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    Ok((math::mean(&values), math::sample_std(&values)))
}

/// Mann-Kendall trend test (no tie correction). Returns the statistic `S`
/// and the one-sided p-value for an increasing trend.
pub fn mann_kendall(xs: &[f64]) -> (i64, f64) {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(core::cmp::Ordering::Greater) => 1,
                Some(core::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    if n < 3 {
        return (s, 1.0);
    }
    let nf = n as f64;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = if s > 0 {
        (s as f64 - 1.0) / math::sqrt(var)
    } else if s < 0 {
        (s as f64 + 1.0) / math::sqrt(var)
    } else {
        0.0
    };
    let p = 0.5 * libm::erfc(z / core::f64::consts::SQRT_2);
    (s, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask3(bits: u16) -> Mask {
        Mask::new(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect()).unwrap()
    }

    #[test]
    fn examples() {
        let mut a = Mask::empty(4, 4);
        let mut b = Mask::empty(4, 4);
        a.fill_rect(crate::image::Rect::new(0, 0, 2, 2), true);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        b.fill_rect(crate::image::Rect::new(2, 2, 2, 2), true);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let mut c = Mask::empty(4, 4);
        c.fill_rect(crate::image::Rect::new(1, 0, 2, 2), true);
        assert!((iou(&a, &c).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        let e = Mask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn ratio_examples() {
        let mut half = Mask::empty(4, 4);
        half.fill_rect(crate::image::Rect::new(0, 0, 4, 2), true);
        let r = confusion_ratios(&half, &half).unwrap();
        assert_eq!((r.tp, r.tn, r.fp, r.fn_), (50.0, 50.0, 0.0, 0.0));
        let e = Mask::empty(4, 4);
        assert_eq!(confusion_ratios(&e, &e).unwrap().tn, 100.0);
        assert_eq!(confusion_ratios(&Mask::full(4, 4), &e).unwrap().fp, 100.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(iou(&Mask::empty(3, 3), &Mask::empty(4, 3)).is_err());
    }

    #[test]
    fn brute_force_all_3x3_pairs() {
        for a in 0u16..512 {
            let ma = mask3(a);
            for b in 0u16..512 {
                let mb = mask3(b);
                let inter = (a & b).count_ones() as f64;
                let union = (a | b).count_ones() as f64;
                let sizes = (a.count_ones() + b.count_ones()) as f64;
                let want_iou = if union == 0.0 { 1.0 } else { inter / union };
                let want_dice = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
                assert_eq!(iou(&ma, &mb).unwrap(), want_iou);
                assert_eq!(dice(&ma, &mb).unwrap(), want_dice);
                let r = confusion_ratios(&ma, &mb).unwrap();
                assert!((r.tp + r.tn + r.fp + r.fn_ - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seed_variance_reports_mean_and_std() {
        let (m, s) = seed_variance(&[1, 2, 3], |k| Ok(k as f64)).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mann_kendall_detects_trend() {
        let up: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (s, p) = mann_kendall(&up);
        assert_eq!(s, 435);
        assert!(p < 1e-6);
        let down: Vec<f64> = up.iter().rev().copied().collect();
        assert!(mann_kendall(&down).1 > 0.99);
        assert_eq!(mann_kendall(&[1.0; 10]).0, 0);
    }

    #[test]
    fn aggregate_averages_per_image() {
        let a = Mask::full(2, 2);
        let e = Mask::empty(2, 2);
        let s = [score_pair(&a, &a).unwrap(), score_pair(&a, &e).unwrap()];
        let agg = aggregate(&s);
        assert_eq!(agg.miou, 0.5);
        assert_eq!(agg.tp, 50.0);
        assert_eq!(agg.fp, 50.0);
    }

    proptest! {
        #[test]
        fn iou_bounded_by_dice(a in 0u16..512, b in 0u16..512) {
            let (ma, mb) = (mask3(a), mask3(b));
            let i = iou(&ma, &mb).unwrap();
            let d = dice(&ma, &mb).unwrap();
            prop_assert!(i <= d + 1e-15 && d <= 1.0);
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert_eq!(i == 0.0, d == 0.0);
            prop_assert_eq!(i == 1.0, d == 1.0);
        }
    }
}
