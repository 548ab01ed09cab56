//! Sentinel-1 preprocessing and the dual-pol entropy/alpha decomposition.
//!
//! S1 stacks carry five bands in the fixed order [`S1_BAND_NAMES`]:
//! scattering angle (degrees before transform, radians after), anisotropy,
//! entropy, VH and VV intensities.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};
use crate::prediction::MultitaskPrediction;
use crate::tensor::DenseTensor;

pub const S1_BAND_NAMES: [&str; 5] = ["alpha", "anisotropy", "entropy", "VH", "VV"];
pub const SYMLOG_EPSILON: f64 = 1e-5;
pub const CHIP_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct S1Stack {
    /// `5 x T x H x W`.
    pub bands: DenseTensor,
    pub transformed: bool,
}

impl S1Stack {
    pub fn new(bands: DenseTensor, transformed: bool) -> Result<Self> {
        if bands.rank() != 4 || bands.shape()[0] != S1_BAND_NAMES.len() {
            return Err(Error::Format(format!(
                "S1 stack needs 5 bands {S1_BAND_NAMES:?} as 5 x T x H x W, got shape {:?}",
                bands.shape()
            )));
        }
        let plane = bands.len() / 5;
        for (b, name) in [(1, "anisotropy"), (2, "entropy")] {
            if let Some(x) = bands.data()[b * plane..(b + 1) * plane]
                .iter()
                .find(|x| !(-1e-6..=1.0 + 1e-6).contains(*x))
            {
                return Err(Error::Range(format!("{name} value {x} outside [0, 1]")));
            }
        }
        Ok(Self { bands, transformed })
    }
}

/// `sign(x) * ln(|x| + eps)`, with `sign(0) = 0`.
pub fn symlog(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (x.abs() + SYMLOG_EPSILON).ln()
    }
}

/// Degrees to radians on the angle band, symlog on VH and VV.
pub fn transform_s1(stack: &S1Stack) -> Result<S1Stack> {
    if stack.transformed {
        return Err(Error::Format("S1 stack is already transformed".into()));
    }
    let plane = stack.bands.len() / 5;
    let mut data = stack.bands.data().to_vec();
    for x in &mut data[..plane] {
        *x *= std::f64::consts::PI / 180.0;
    }
    for x in &mut data[3 * plane..] {
        *x = symlog(*x);
    }
    S1Stack::new(DenseTensor::new(stack.bands.shape().to_vec(), data)?, true)
}

/// Per-band (axis 0) mean and standard deviation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn compute(x: &DenseTensor) -> Result<Self> {
        let bands = x.shape()[0];
        let plane = x.len() / bands;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (b, chunk) in x.data().chunks(plane).enumerate() {
            let m = crate::tensor::compensated_sum(chunk.iter().copied()) / plane as f64;
            let var = crate::tensor::compensated_sum(chunk.iter().map(|v| (v - m) * (v - m))) / plane as f64;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::DegenerateBand { band: b });
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std })
    }
}

/// `(x - mean) / std` per band. Without `stats` they are computed from `x`.
pub fn standardize(x: &DenseTensor, stats: Option<&BandStats>) -> Result<(DenseTensor, BandStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => BandStats::compute(x)?,
    };
    let bands = x.shape()[0];
    if stats.mean.len() != bands || stats.std.len() != bands {
        return dim_err(format!("stats cover {} bands, tensor has {bands}", stats.mean.len()));
    }
    if let Some(b) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateBand { band: b });
    }
    let plane = x.len() / bands;
    let (mean, std) = (&stats.mean, &stats.std);
    let data = x
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(b, c)| c.iter().map(move |v| (v - mean[b]) / std[b]))
        .collect();
    Ok((DenseTensor::new(x.shape().to_vec(), data)?, stats))
}

/// Inverse of [`standardize`].
pub fn destandardize(x: &DenseTensor, stats: &BandStats) -> Result<DenseTensor> {
    let bands = x.shape()[0];
    let plane = x.len() / bands;
    let data = x
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(b, c)| c.iter().map(move |v| v * stats.std[b] + stats.mean[b]))
        .collect();
    DenseTensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub data: DenseTensor,
    pub row: usize,
    pub col: usize,
}

/// Chips cut on a regular grid; margins narrower than a chip are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipSet {
    pub size: usize,
    pub chips: Vec<Chip>,
}

/// Crops a `C x T x H x W` window at `(row, col)`.
pub fn crop(x: &DenseTensor, row: usize, col: usize, height: usize, width: usize) -> Result<DenseTensor> {
    let s = x.shape();
    if s.len() != 4 || row + height > s[2] || col + width > s[3] {
        return dim_err(format!("window {height}x{width} at ({row},{col}) exceeds {s:?}"));
    }
    Ok(DenseTensor::from_fn(&[s[0], s[1], height, width], |i| {
        x.get(&[i[0], i[1], row + i[2], col + i[3]])
    }))
}

pub fn extract_chips(x: &DenseTensor, size: usize, stride: usize) -> Result<ChipSet> {
    let s = x.shape();
    if s.len() != 4 {
        return dim_err(format!("chipping needs C x T x H x W, got {s:?}"));
    }
    if size == 0 || stride == 0 || s[2] < size || s[3] < size {
        return dim_err(format!("{}x{} raster is smaller than chip size {size}", s[2], s[3]));
    }
    let mut chips = Vec::new();
    for row in (0..=s[2] - size).step_by(stride) {
        for col in (0..=s[3] - size).step_by(stride) {
            chips.push(Chip {
                data: crop(x, row, col, size, size)?,
                row,
                col,
            });
        }
    }
    Ok(ChipSet { size, chips })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    None,
    /// Mirror columns.
    H,
    /// Mirror rows.
    V,
    Hv,
}

fn flip_last_two(x: &DenseTensor, mode: FlipMode) -> DenseTensor {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (fh, fv) = match mode {
        FlipMode::None => (false, false),
        FlipMode::H => (true, false),
        FlipMode::V => (false, true),
        FlipMode::Hv => (true, true),
    };
    DenseTensor::from_fn(s, |i| {
        let mut j = i.to_vec();
        let n = j.len();
        if fv {
            j[n - 2] = h - 1 - j[n - 2];
        }
        if fh {
            j[n - 1] = w - 1 - j[n - 1];
        }
        x.get(&j)
    })
}

/// Applies the same spatial flip to every time slice and every label layer.
pub fn flip_augment(
    x: &DenseTensor,
    mode: FlipMode,
    label: &MultitaskPrediction,
) -> Result<(DenseTensor, MultitaskPrediction)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2..] != [label.height(), label.width()] {
        return dim_err(format!(
            "input {s:?} and label {}x{} are not aligned",
            label.height(),
            label.width()
        ));
    }
    let flipped = MultitaskPrediction::new(
        flip_last_two(&label.extent, mode),
        flip_last_two(&label.boundary, mode),
        flip_last_two(&label.distance, mode),
    )?;
    Ok((flip_last_two(x, mode), flipped))
}

/// A 2x2 wave coherency matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualPolSample {
    pub j: [[Complex64; 2]; 2],
}

impl DualPolSample {
    /// Rejects matrices that are not Hermitian to within `1e-12` of their scale.
    pub fn new(j: [[Complex64; 2]; 2]) -> Result<Self> {
        let scale = j.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
        let tol = 1e-12 * scale;
        let off = (j[0][1] - j[1][0].conj()).norm();
        if off > tol || j[0][0].im.abs() > tol || j[1][1].im.abs() > tol {
            return Err(Error::Format(format!("coherency matrix is not Hermitian (deviation {off:e})")));
        }
        Ok(Self { j })
    }

    /// From 8 reals: re/im of J_xx, J_xy, J_yx, J_yy.
    pub fn from_channels(c: &[f64]) -> Result<Self> {
        if c.len() != 8 {
            return Err(Error::Format(format!("expected 8 channels, got {}", c.len())));
        }
        let z = |k: usize| Complex64::new(c[2 * k], c[2 * k + 1]);
        Self::new([[z(0), z(1)], [z(2), z(3)]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualPolDecomposition {
    /// Mean scattering angle in radians, `[0, pi/2]`.
    pub alpha_bar: f64,
    /// Base-2 entropy of the eigenvalue pseudo-probabilities, `[0, 1]`.
    pub entropy: f64,
    pub anisotropy: f64,
    /// Angle of the principal eigenvector, `cos alpha = |u_x|`.
    pub alpha: f64,
    /// Phase of the principal eigenvector's second component.
    pub delta: f64,
    /// Eigenvalues, descending.
    pub lambda: [f64; 2],
}

/// Diagonalises J with one complex Jacobi rotation and derives the
/// entropy/alpha parameters from the eigenvalues and principal eigenvector.
pub fn dualpol_decompose(sample: &DualPolSample) -> Result<DualPolDecomposition> {
    let a = sample.j[0][0].re;
    let d = sample.j[1][1].re;
    let b = sample.j[0][1];
    let trace = a + d;
    let scale = sample.j.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    if !(trace > 0.0) || trace <= 1e-300 {
        return Err(Error::DegenerateSample(format!("coherency trace {trace} is not positive")));
    }
    // diag(1, e^{-i phi})^H J diag(1, e^{-i phi}) is real symmetric.
    let (bn, phi) = b.to_polar();
    let theta = 0.5 * (2.0 * bn).atan2(a - d);
    let (s, c) = theta.sin_cos();
    let cross = 2.0 * bn * s * c;
    let l1 = a * c * c + d * s * s + cross;
    let l2 = a * s * s + d * c * c - cross;
    if l2 < -1e-12 * scale.max(1.0) {
        return Err(Error::Format(format!("coherency matrix is not positive semidefinite (eigenvalue {l2:e})")));
    }
    let (l1, l2) = (l1.max(0.0), l2.max(0.0));
    let sum = l1 + l2;
    let (p1, p2) = (l1 / sum, l2 / sum);
    let entropy = -[p1, p2]
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>();
    let alpha = theta;
    Ok(DualPolDecomposition {
        alpha_bar: alpha * (p1 - p2) + p2 * FRAC_PI_2,
        entropy: entropy.clamp(0.0, 1.0),
        anisotropy: (l1 - l2) / sum,
        alpha,
        delta: -phi,
        lambda: [l1, l2],
    })
}
