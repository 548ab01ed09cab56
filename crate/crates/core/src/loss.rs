//! Tanimoto-with-complement losses for fuzzy segmentation maps.

use crate::error::{dim_err, Error, Result};
use crate::prediction::MultitaskPrediction;
use crate::pta3d::ZERO_NORM_SQ;
use crate::tensor::DenseTensor;

fn check(p: &[f64], l: &[f64]) -> Result<()> {
    if p.len() != l.len() {
        return dim_err(format!("loss inputs have lengths {} and {}", p.len(), l.len()));
    }
    for (name, xs) in [("prediction", p), ("label", l)] {
        if let Some(x) = xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Range(format!("{name} value {x} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Fuzzy Tanimoto of two flattened maps and its gradient with respect to `p`.
fn tanimoto_with_grad(p: impl Iterator<Item = f64> + Clone, l: impl Iterator<Item = f64> + Clone) -> (f64, Vec<f64>) {
    let (mut pl, mut pp, mut ll) = (0.0, 0.0, 0.0);
    for (a, b) in p.clone().zip(l.clone()) {
        pl += a * b;
        pp += a * a;
        ll += b * b;
    }
    if pp < ZERO_NORM_SQ && ll < ZERO_NORM_SQ {
        return (0.0, p.map(|_| 0.0).collect());
    }
    let den = pp + ll - pl;
    let inv2 = 1.0 / (den * den);
    // dT/dp_k = (l_k (pp + ll) - 2 pl p_k) / den^2
    let grad = p
        .zip(l)
        .map(|(a, b)| (b * (pp + ll) - 2.0 * pl * a) * inv2)
        .collect();
    (pl / den, grad)
}

/// `1 - (T(p, l) + T(1 - p, 1 - l)) / 2`.
pub fn tanimoto_loss(p: &[f64], l: &[f64]) -> Result<f64> {
    tanimoto_loss_grad(p, l).map(|(v, _)| v)
}

/// Loss value and its gradient with respect to `p`.
pub fn tanimoto_loss_grad(p: &[f64], l: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(p, l)?;
    let (t, gt) = tanimoto_with_grad(p.iter().copied(), l.iter().copied());
    let (tc, gc) = tanimoto_with_grad(p.iter().map(|x| 1.0 - x), l.iter().map(|x| 1.0 - x));
    let grad = gt.iter().zip(&gc).map(|(a, b)| -0.5 * (a - b)).collect();
    Ok((1.0 - 0.5 * (t + tc), grad))
}

/// Mean of the per-layer losses over extent, boundary and distance.
pub fn multitask_loss(pred: &MultitaskPrediction, gt: &MultitaskPrediction) -> Result<f64> {
    multitask_loss_grad(pred, gt).map(|(v, _)| v)
}

/// [`multitask_loss`] and its gradient for each predicted layer, in the
/// order extent, boundary, distance.
pub fn multitask_loss_grad(pred: &MultitaskPrediction, gt: &MultitaskPrediction) -> Result<(f64, [DenseTensor; 3])> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(3);
    for ((_, p), (_, l)) in pred.layers().into_iter().zip(gt.layers()) {
        if p.shape() != l.shape() {
            return dim_err(format!("layer shapes {:?} and {:?} differ", p.shape(), l.shape()));
        }
        let (v, g) = tanimoto_loss_grad(p.data(), l.data())?;
        total += v;
        grads.push(DenseTensor::new(p.shape().to_vec(), g.into_iter().map(|x| x / 3.0).collect())?);
    }
    let grads: [DenseTensor; 3] = grads.try_into().expect("three layers");
    Ok((total / 3.0, grads))
}
