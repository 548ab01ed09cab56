//! Named parameter storage and seeded initialization.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// How a parameter tensor was (or will be) filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitRule {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

/// Role of a parameter, which decides its initial values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Connection weights with the given fan-in.
    Weight { fan_in: usize },
    /// Last projection of a residual branch.
    ResidualOut { fan_in: usize },
    Bias,
    /// Normalization gain.
    Gain,
}

/// A parameter a model expects to find.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub rule: InitRule,
    /// Last projection of a residual branch; zeroed by identity init.
    pub residual_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first element in the flat parameter blob.
    pub offset: usize,
    pub init_rule: InitRule,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    manifest: Vec<ManifestEntry>,
    tensors: Vec<DenseTensor>,
    index: HashMap<String, usize>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamDecl {
    pub fn new(name: &str, shape: &[usize], kind: ParamKind) -> Self {
        let (rule, residual_out) = match kind {
            ParamKind::Weight { fan_in } => (InitRule::TruncNormal { std: 1.0 / (fan_in as f64).sqrt() }, false),
            ParamKind::ResidualOut { fan_in } => (InitRule::TruncNormal { std: 1.0 / (fan_in as f64).sqrt() }, true),
            ParamKind::Bias => (InitRule::Zeros, false),
            ParamKind::Gain => (InitRule::Ones, false),
        };
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            rule,
            residual_out,
        }
    }
}

impl ModelWeights {
    /// Builds weights from a manifest and matching tensors, checking that
    /// offsets are contiguous and names unique.
    pub fn from_parts(spec: ModelSpec, manifest: Vec<ManifestEntry>, tensors: Vec<DenseTensor>) -> Result<Self> {
        if manifest.len() != tensors.len() {
            return Err(Error::Weight(format!(
                "{} manifest entries for {} tensors",
                manifest.len(),
                tensors.len()
            )));
        }
        let mut index = HashMap::new();
        let mut offset = 0;
        for (i, (e, t)) in manifest.iter().zip(&tensors).enumerate() {
            if e.shape != t.shape() || e.offset != offset {
                return Err(Error::Weight(format!("manifest entry {} is inconsistent with its data", e.name)));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Weight(format!("duplicate parameter {}", e.name)));
            }
            offset += t.len();
        }
        Ok(Self {
            spec,
            manifest,
            tensors,
            index,
        })
    }

    /// Seeded initialization of every declared parameter. Each tensor gets
    /// its own seed drawn in declaration order, so adding a parameter at the
    /// end never changes the earlier ones.
    pub fn initialize(spec: ModelSpec, decls: &[ParamDecl], seed: u64, identity_residuals: bool) -> Result<Self> {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut manifest = Vec::with_capacity(decls.len());
        let mut tensors = Vec::with_capacity(decls.len());
        let mut offset = 0;
        for d in decls {
            let tensor_seed = master.next_u64();
            let rule = if identity_residuals && d.residual_out {
                InitRule::Zeros
            } else {
                d.rule.clone()
            };
            let n: usize = d.shape.iter().product();
            let data = match rule {
                InitRule::Zeros => vec![0.0; n],
                InitRule::Ones => vec![1.0; n],
                InitRule::TruncNormal { std } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed);
                    (0..n).map(|_| trunc_normal(&mut rng, std)).collect()
                }
            };
            manifest.push(ManifestEntry {
                name: d.name.clone(),
                shape: d.shape.clone(),
                offset,
                init_rule: rule,
                seed: tensor_seed,
            });
            tensors.push(DenseTensor::new(d.shape.clone(), data)?);
            offset += n;
        }
        Self::from_parts(spec, manifest, tensors)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ManifestEntry, &DenseTensor)> {
        self.manifest.iter().zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(DenseTensor::len).sum()
    }

    /// Checks that every declared parameter exists with the declared shape.
    pub fn check_against(&self, decls: &[ParamDecl]) -> Result<()> {
        for d in decls {
            match self.get(&d.name) {
                None => return Err(Error::Weight(format!("missing parameter {}", d.name))),
                Some(t) if t.shape() != d.shape => {
                    return Err(Error::Weight(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
