//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use fieldbound::tensor::DenseTensor;
use fieldbound::PatchSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn scalar_tanimoto(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa < 1e-30 && bb < 1e-30 {
        0.0
    } else {
        ab / (aa + bb - ab)
    }
}

fn gather(x: &DenseTensor, p: PatchSpec, ci: usize, t: usize, hi: usize, wi: usize) -> Vec<f64> {
    let s = x.shape();
    let (pc, ph, pw) = (s[0] / p.c, s[2] / p.h, s[3] / p.w);
    let mut out = Vec::with_capacity(pc * ph * pw);
    for r in 0..pc {
        for a in 0..ph {
            for b in 0..pw {
                out.push(x.get(&[ci * pc + r, t, hi * ph + a, wi * pw + b]));
            }
        }
    }
    out
}

/// Contracted similarity `(k, T, l, m)` by explicit loops over both patch grids.
pub fn naive_contracted(
    q: &DenseTensor,
    k: &DenseTensor,
    p: PatchSpec,
    weights: Option<&DenseTensor>,
    causal: bool,
) -> DenseTensor {
    let (fq, tk) = (q.shape()[1], k.shape()[1]);
    let n = (p.c * fq * p.h * p.w) as f64;
    DenseTensor::from_fn(&[p.c, tk, p.h, p.w], |j| {
        let kp = gather(k, p, j[0], j[1], j[2], j[3]);
        let mut acc = 0.0;
        for c in 0..p.c {
            for f in 0..fq {
                if causal && f > j[1] {
                    continue;
                }
                for h in 0..p.h {
                    for w in 0..p.w {
                        let wt = weights.map_or(1.0 / n, |wt| wt.get(&[c, f, h, w]));
                        acc += wt * scalar_tanimoto(&gather(q, p, c, f, h, w), &kp);
                    }
                }
            }
        }
        acc
    })
}

/// Attention output composed from the naive contracted similarity.
pub fn naive_attention(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    p: PatchSpec,
    weights: Option<&DenseTensor>,
    causal: bool,
) -> DenseTensor {
    let sim = naive_contracted(q, k, p, weights, causal);
    let s = v.shape();
    let (pc, ph, pw) = (s[0] / p.c, s[2] / p.h, s[3] / p.w);
    DenseTensor::from_fn(s, |i| sim.get(&[i[0] / pc, i[1], i[2] / ph, i[3] / pw]) * v.get(i))
}

/// Central finite-difference derivative of `f` along coordinate `idx` of `x`.
pub fn central_difference(
    x: &DenseTensor,
    idx: usize,
    step: f64,
    mut f: impl FnMut(&DenseTensor) -> f64,
) -> f64 {
    let bump = |delta: f64| {
        let mut d = x.data().to_vec();
        d[idx] += delta;
        DenseTensor::new(x.shape().to_vec(), d).unwrap()
    };
    (f(&bump(step)) - f(&bump(-step))) / (2.0 * step)
}

/// Relative error with an absolute floor so vanishing derivatives do not blow up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn dot(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
