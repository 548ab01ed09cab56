//! Raster and boundary evaluation metrics.
//!
//! Ratios whose denominator vanishes return a [`Score`] of 0 with the
//! `degenerate` flag set instead of NaN.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::DenseTensor;

/// A metric value plus a flag for the degenerate-denominator convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// `K x K` counts; row = predicted class, column = actual class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k || k == 0 {
            return dim_err(format!("{} counts cannot form a {k} x {k} matrix", counts.len()));
        }
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, predicted: usize, actual: usize) -> u64 {
        self.counts[predicted * self.k + actual]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Times each class was predicted (row sums).
    pub fn predicted_totals(&self) -> Vec<u64> {
        self.counts.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    /// Actual occurrences of each class (column sums).
    pub fn actual_totals(&self) -> Vec<u64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn correct(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Exact integer terms `(c s - sum p t, s^2 - sum p^2, s^2 - sum t^2, s^2 - sum p t)`.
    fn agreement_terms(&self) -> (i128, i128, i128, i128) {
        let p = self.predicted_totals();
        let t = self.actual_totals();
        let s = self.total() as i128;
        let c = self.correct() as i128;
        let pt: i128 = p.iter().zip(&t).map(|(&a, &b)| a as i128 * b as i128).sum();
        let pp: i128 = p.iter().map(|&a| a as i128 * a as i128).sum();
        let tt: i128 = t.iter().map(|&a| a as i128 * a as i128).sum();
        (c * s - pt, s * s - pp, s * s - tt, s * s - pt)
    }
}

/// Counts pixels predicted `i` with truth `j`.
pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return dim_err(format!("label maps have {} and {} pixels", pred.len(), truth.len()));
    }
    let mut counts = vec![0u64; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Range(format!("label {} outside [0, {k})", p.max(t))));
        }
        counts[p * k + t] += 1;
    }
    ConfusionMatrix::from_counts(k, counts)
}

/// Multiclass Matthews correlation coefficient.
pub fn mcc(cm: &ConfusionMatrix) -> Score {
    let (num, dp, dt, _) = cm.agreement_terms();
    if cm.total() == 0 || dp == 0 || dt == 0 {
        return Score::degenerate();
    }
    Score::ok(num as f64 / ((dp as f64) * (dt as f64)).sqrt())
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Score {
    let (num, _, _, den) = cm.agreement_terms();
    if cm.total() == 0 || den == 0 {
        return Score::degenerate();
    }
    Score::ok(num as f64 / den as f64)
}

/// Mean over classes of the fuzzy IoU `sum min / sum max`. `P` and `L` are
/// `N x H x W`; a class with both maps empty scores 1.
pub fn miou_fuzzy(p: &DenseTensor, l: &DenseTensor) -> Result<f64> {
    if p.shape() != l.shape() || p.rank() != 3 {
        return dim_err(format!("mIoU inputs must share an N x H x W shape: {:?} vs {:?}", p.shape(), l.shape()));
    }
    if let Some(x) = p.data().iter().chain(l.data()).find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Range(format!("membership {x} outside [0, 1]")));
    }
    let n = p.shape()[0];
    let plane = p.len() / n;
    let mut total = 0.0;
    for (pc, lc) in p.data().chunks(plane).zip(l.data().chunks(plane)) {
        let (mut inter, mut union) = (0.0, 0.0);
        for (&a, &b) in pc.iter().zip(lc) {
            inter += a.min(b);
            union += a.max(b);
        }
        total += if union == 0.0 { 1.0 } else { inter / union };
    }
    Ok(total / n as f64)
}

/// Binary counts `(tp, fp, fn, tn)`.
pub fn binary_counts(pred: &[bool], truth: &[bool]) -> Result<(u64, u64, u64, u64)> {
    if pred.len() != truth.len() {
        return dim_err(format!("masks have {} and {} pixels", pred.len(), truth.len()));
    }
    let mut c = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)`; an empty union scores 1.
pub fn iou_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    let (tp, fp, fn_, _) = binary_counts(pred, truth)?;
    let union = tp + fp + fn_;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// False discovery rate `|A ∩ ¬B| / |A|`.
pub fn fdr(pred: &[bool], truth: &[bool]) -> Result<Score> {
    let (tp, fp, _, _) = binary_counts(pred, truth)?;
    Ok(if tp + fp == 0 {
        Score::degenerate()
    } else {
        Score::ok(fp as f64 / (tp + fp) as f64)
    })
}

/// False omission rate `|¬A ∩ B| / |¬A|`.
pub fn for_rate(pred: &[bool], truth: &[bool]) -> Result<Score> {
    let (_, _, fn_, tn) = binary_counts(pred, truth)?;
    Ok(if fn_ + tn == 0 {
        Score::degenerate()
    } else {
        Score::ok(fn_ as f64 / (fn_ + tn) as f64)
    })
}

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// For each point of `from`, the distance to the nearest point of `to`.
fn nearest(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn nonempty(x: &[Point], y: &[Point]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyGeometry("vertex set is empty".into()));
    }
    Ok(())
}

/// Mean surface distance between two vertex sets.
pub fn msd(x: &[Point], y: &[Point]) -> Result<f64> {
    nonempty(x, y)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nearest(x, y)) + mean(nearest(y, x))))
}

/// Symmetric Hausdorff distance between two vertex sets.
pub fn hausdorff(x: &[Point], y: &[Point]) -> Result<f64> {
    nonempty(x, y)?;
    let directed = |a, b| nearest(a, b).into_iter().fold(0.0, f64::max);
    Ok(directed(x, y).max(directed(y, x)))
}

/// Inserts vertices so no ring segment is longer than `spacing`.
pub fn densify(ring: &[Point], spacing: f64) -> Vec<Point> {
    if ring.len() < 2 || spacing <= 0.0 {
        return ring.to_vec();
    }
    let mut out = Vec::new();
    for w in ring.windows(2) {
        let n = (dist(w[0], w[1]) / spacing).ceil().max(1.0) as usize;
        for s in 0..n {
            let f = s as f64 / n as f64;
            out.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
        }
    }
    out.push(*ring.last().unwrap());
    out
}
