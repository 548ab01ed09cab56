//! Full-batch gradient descent for small models.

use std::collections::HashMap;

use super::graph::{Backend, Tape};
use super::model::{unet3d, TimeCompaction, UNet3DConfig};
use super::ops::Op;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::prediction::MultitaskPrediction;
use crate::synth::{gen_scene, SceneSpec};
use crate::tensor::{DenseTensor, PatchSpec};

/// One training pair: a `C x T x H x W` series and its target maps.
pub type Sample = (DenseTensor, MultitaskPrediction);

/// The single-level model used for toy training: four optical bands in,
/// eight features, one attention stage plus the final stage.
pub fn toy_config() -> UNet3DConfig {
    UNet3DConfig {
        in_channels: 4,
        init_features: 8,
        stage_repeats: vec![1],
        patch: PatchSpec::new(1, 4, 4),
        causal: false,
        final_repeats: 1,
        compaction: TimeCompaction::Mean,
    }
}

/// `n` default-sized synthetic scenes with seeds `seed, seed + 1, ...`:
/// the optical series paired with its targets.
pub fn toy_dataset(seed: u64, n: usize, times: usize, cloud_fraction: f64) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| {
            let spec = SceneSpec {
                seed: seed.wrapping_add(i),
                times,
                cloud_fraction,
                ..SceneSpec::default()
            };
            let s = gen_scene(&spec)?;
            Ok((s.optical, s.gt))
        })
        .collect()
}

/// Mean multitask loss over `data` and its gradient for every parameter.
pub fn loss_and_grads(
    cfg: &UNet3DConfig,
    w: &ModelWeights,
    data: &[Sample],
) -> Result<(f64, HashMap<String, DenseTensor>)> {
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut total = 0.0;
    let mut grads: HashMap<String, DenseTensor> = HashMap::new();
    let inv_n = 1.0 / data.len() as f64;
    for (x, target) in data {
        let mut tape = Tape::new(w);
        let input = tape.constant(x.clone());
        let out = unet3d(&mut tape, input, cfg)?;
        let mut loss = None;
        for (pred, gt) in [
            (out.extent, &target.extent),
            (out.boundary, &target.boundary),
            (out.distance, &target.distance),
        ] {
            let shape = tape.shape(&pred).to_vec();
            let gt = tape.constant(gt.reshape(&shape)?);
            let l = tape.apply(Op::TanimotoLoss, &[&pred, &gt])?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.apply(Op::Add, &[&acc, &l])?,
            });
        }
        let loss = loss.expect("three layers");
        let loss = tape.apply(Op::Affine { scale: inv_n / 3.0, shift: 0.0 }, &[&loss])?;
        total += tape.value(loss).item();
        for (name, g) in tape.backward(loss)? {
            match grads.get_mut(&name) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok((total, grads))
}

/// Plain gradient descent on the mean multitask loss. Returns the trained
/// weights and the loss before every step followed by the final loss.
pub fn fit_toy(
    cfg: &UNet3DConfig,
    init: ModelWeights,
    data: &[Sample],
    steps: usize,
    lr: f64,
) -> Result<(ModelWeights, Vec<f64>)> {
    if cfg.stage_repeats.len() != 1 {
        return Err(Error::Config(format!(
            "toy training expects a single-level model, got stage_repeats {:?}",
            cfg.stage_repeats
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
    }
    let mut w = init;
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = loss_and_grads(cfg, &w, data)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss} at step {step}")));
        }
        trace.push(loss);
        if step == steps {
            break;
        }
        for (name, g) in grads {
            let p = w.get_mut(&name).expect("gradient for a known parameter");
            *p = p.zip_with(&g, |a, b| a - lr * b)?;
        }
    }
    Ok((w, trace))
}
