//! Seeded synthetic scenes: Voronoi field mosaics with extent, boundary and
//! distance targets, an optical-like series with drifting clouds, and a
//! cloud-free SAR-like series with gamma speckle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{label_components, Mask};
use crate::prediction::MultitaskPrediction;
use crate::tensor::DenseTensor;

pub const OPTICAL_BANDS: usize = 4;
pub const OPTICAL_NOISE: f64 = 0.02;
/// Reflectance multiplier on boundary pixels (hedgerows, tracks).
pub const BOUNDARY_DARKENING: f64 = 0.6;
pub const MIN_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_fields: usize,
    pub times: usize,
    pub cloud_fraction: f64,
    /// Cloud drift per frame, in pixels.
    pub cloud_speed_px: f64,
    pub speckle_looks: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            n_fields: 6,
            times: 4,
            cloud_fraction: 0.0,
            cloud_speed_px: 8.0,
            speckle_looks: 4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIZE || self.width < MIN_SIZE {
            return Err(Error::Config(format!(
                "scene {}x{} is smaller than {MIN_SIZE}x{MIN_SIZE}",
                self.height, self.width
            )));
        }
        if self.n_fields == 0 || self.n_fields > self.height * self.width / 16 {
            return Err(Error::Config(format!("cannot place {} fields", self.n_fields)));
        }
        if self.times == 0 {
            return Err(Error::Config("a series needs at least one frame".into()));
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return Err(Error::Config(format!("cloud fraction {} not in [0, 1)", self.cloud_fraction)));
        }
        if !self.cloud_speed_px.is_finite() || self.speckle_looks == 0 {
            return Err(Error::Config("cloud speed must be finite and looks positive".into()));
        }
        Ok(())
    }

    /// Independent generator streams derived from the scene seed.
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Field id of every pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn get(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }

    /// Pixels whose 4-neighbourhood (pixel included) holds at least two
    /// labels. Pixels outside the image are ignored.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut m = Mask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                let l = self.get(r, c);
                let differs = (r > 0 && self.get(r - 1, c) != l)
                    || (r + 1 < h && self.get(r + 1, c) != l)
                    || (c > 0 && self.get(r, c - 1) != l)
                    || (c + 1 < w && self.get(r, c + 1) != l);
                m.set(r, c, differs);
            }
        }
        m
    }
}

fn sample_sites(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut min_dist = 0.6 * (h * w / spec.n_fields as f64).sqrt();
    let mut sites: Vec<[f64; 2]> = Vec::with_capacity(spec.n_fields);
    let mut misses = 0;
    while sites.len() < spec.n_fields {
        let p = [rng.random_range(0.0..h), rng.random_range(0.0..w)];
        if sites.iter().all(|s| (s[0] - p[0]).hypot(s[1] - p[1]) >= min_dist) {
            sites.push(p);
            misses = 0;
        } else {
            misses += 1;
            if misses > 200 {
                min_dist *= 0.9;
                misses = 0;
            }
        }
    }
    sites
}

/// Voronoi labels from seeded sites; ties go to the lower site index.
pub fn gen_labels(spec: &SceneSpec) -> Result<LabelMap> {
    spec.validate()?;
    let sites = sample_sites(spec, &mut spec.rng(0));
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let p = [r as f64 + 0.5, c as f64 + 0.5];
            let nearest = sites
                .iter()
                .map(|s| (s[0] - p[0]).powi(2) + (s[1] - p[1]).powi(2))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one site");
            labels.push(nearest);
        }
    }
    Ok(LabelMap {
        height: spec.height,
        width: spec.width,
        labels,
    })
}

/// Two-pass chamfer distance (unit and diagonal steps) from every pixel of
/// `inside` to the nearest pixel outside it; the image exterior counts as
/// outside.
pub fn chamfer_distance(inside: &Mask) -> Vec<f64> {
    let (h, w) = (inside.height(), inside.width());
    let diag = std::f64::consts::SQRT_2;
    let mut d: Vec<f64> = inside.data().iter().map(|&v| if v { f64::INFINITY } else { 0.0 }).collect();
    let at = |d: &[f64], r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            d[r as usize * w + c as usize]
        }
    };
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, r - 1, c) + 1.0)
                .min(at(&d, r, c - 1) + 1.0)
                .min(at(&d, r - 1, c - 1) + diag)
                .min(at(&d, r - 1, c + 1) + diag);
            d[i] = v;
        }
    }
    for r in (0..h as isize).rev() {
        for c in (0..w as isize).rev() {
            let i = r as usize * w + c as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, r + 1, c) + 1.0)
                .min(at(&d, r, c + 1) + 1.0)
                .min(at(&d, r + 1, c + 1) + diag)
                .min(at(&d, r + 1, c - 1) + diag);
            d[i] = v;
        }
    }
    d
}

/// Ground truth for a label map. Extent is the field interior without the
/// boundary band; for each field only its largest interior piece is kept,
/// so every field is one 4-connected extent component. Distance is the
/// chamfer distance to the nearest non-extent pixel, scaled to peak at 1
/// within each component.
pub fn ground_truth(labels: &LabelMap) -> Result<MultitaskPrediction> {
    let (h, w) = (labels.height, labels.width);
    let boundary = labels.boundary();
    let interior: Vec<bool> = boundary.data().iter().map(|&b| !b).collect();
    let interior = Mask::new(h, w, interior)?;
    let (comp, n) = label_components(&interior);
    let n_fields = labels.labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n + 1];
    for &c in &comp {
        sizes[c] += 1;
    }
    let mut best = vec![0usize; n_fields];
    for (i, &c) in comp.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let f = labels.labels[i];
        if best[f] == 0 || sizes[c] > sizes[best[f]] || (sizes[c] == sizes[best[f]] && c < best[f]) {
            best[f] = c;
        }
    }
    let extent_data: Vec<bool> = comp
        .iter()
        .zip(&labels.labels)
        .map(|(&c, &f)| c != 0 && best[f] == c)
        .collect();
    let extent = Mask::new(h, w, extent_data)?;
    let dist = chamfer_distance(&extent);
    let (ext_comp, ne) = label_components(&extent);
    let mut peak = vec![0.0f64; ne + 1];
    for (&c, &d) in ext_comp.iter().zip(&dist) {
        peak[c] = peak[c].max(d);
    }
    let distance: Vec<f64> = ext_comp
        .iter()
        .zip(&dist)
        .map(|(&c, &d)| if c == 0 || peak[c] == 0.0 { 0.0 } else { d / peak[c] })
        .collect();
    MultitaskPrediction::new(
        extent.to_tensor(),
        boundary.to_tensor(),
        DenseTensor::new(vec![h, w], distance)?,
    )
}

/// Labels and ground truth in one call.
pub fn gen_fields(spec: &SceneSpec) -> Result<(LabelMap, MultitaskPrediction)> {
    let labels = gen_labels(spec)?;
    let gt = ground_truth(&labels)?;
    Ok((labels, gt))
}

/// Smooth periodic blob field; wrapping makes circular shifts seamless.
fn cloud_field(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let n_blobs = (h * w / 300).max(4);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(3.0..7.0),
            )
        })
        .collect();
    let wrap = |d: f64, n: f64| {
        let d = d.abs() % n;
        d.min(n - d)
    };
    let mut f = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            f[r * w + c] = blobs
                .iter()
                .map(|&(br, bc, s)| {
                    let (dr, dc) = (wrap(r as f64 - br, h as f64), wrap(c as f64 - bc, w as f64));
                    (-(dr * dr + dc * dc) / (2.0 * s * s)).exp()
                })
                .sum::<f64>();
        }
    }
    f
}

/// Per-frame cloud masks. Each frame is a circular shift of one thresholded
/// field, so every frame covers the same number of pixels.
pub fn gen_clouds(spec: &SceneSpec) -> Result<Vec<Mask>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    if spec.cloud_fraction == 0.0 {
        return Ok(vec![Mask::empty(h, w); spec.times]);
    }
    let mut rng = spec.rng(1);
    let field = cloud_field(spec, &mut rng);
    let n_cloud = (spec.cloud_fraction * (h * w) as f64).round() as usize;
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut base = vec![false; h * w];
    for &i in &order[..n_cloud] {
        base[i] = true;
    }
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    (0..spec.times)
        .map(|t| {
            let dr = (t as f64 * spec.cloud_speed_px * angle.sin()).round() as i64;
            let dc = (t as f64 * spec.cloud_speed_px * angle.cos()).round() as i64;
            let mut m = Mask::empty(h, w);
            for r in 0..h {
                for c in 0..w {
                    let sr = (r as i64 - dr).rem_euclid(h as i64) as usize;
                    let sc = (c as i64 - dc).rem_euclid(w as i64) as usize;
                    m.set(r, c, base[sr * w + sc]);
                }
            }
            Ok(m)
        })
        .collect()
}

/// Optical-like `4 x T x H x W` reflectances in [0, 1]: per-field seasonal
/// trajectories, darker boundaries, Gaussian noise and bright clouds.
pub fn gen_optical(spec: &SceneSpec, labels: &LabelMap, clouds: &[Mask]) -> Result<DenseTensor> {
    spec.validate()?;
    let (h, w, t) = (spec.height, spec.width, spec.times);
    let mut rng = spec.rng(2);
    let n_fields = labels.labels.iter().max().map_or(0, |m| m + 1);
    // (base, amplitude, phase) per field and band.
    let params: Vec<[(f64, f64, f64); OPTICAL_BANDS]> = (0..n_fields)
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.0..0.15),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
        })
        .collect();
    let boundary = labels.boundary();
    let noise = Normal::new(0.0, OPTICAL_NOISE).expect("positive std");
    let cloud_noise = Normal::new(0.85, 0.05).expect("positive std");
    let mut data = Vec::with_capacity(OPTICAL_BANDS * t * h * w);
    for band in 0..OPTICAL_BANDS {
        for (ti, cloud) in clouds.iter().enumerate().take(t) {
            let phase = std::f64::consts::TAU * ti as f64 / t as f64;
            for r in 0..h {
                for c in 0..w {
                    let v = if cloud.get(r, c) {
                        cloud_noise.sample(&mut rng)
                    } else {
                        let (base, amp, ph) = params[labels.get(r, c)][band];
                        let mut v = base + amp * (phase + ph).sin();
                        if boundary.get(r, c) {
                            v *= BOUNDARY_DARKENING;
                        }
                        v + noise.sample(&mut rng)
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    DenseTensor::new(vec![OPTICAL_BANDS, t, h, w], data)
}

/// SAR-like `5 x T x H x W` stack in the band order alpha (degrees),
/// anisotropy, entropy, VH, VV. Backscatter carries multiplicative gamma
/// speckle with `speckle_looks` looks. Clouds play no part.
pub fn gen_sar(spec: &SceneSpec, labels: &LabelMap) -> Result<DenseTensor> {
    spec.validate()?;
    let (h, w, t) = (spec.height, spec.width, spec.times);
    let mut rng = spec.rng(3);
    let n_fields = labels.labels.iter().max().map_or(0, |m| m + 1);
    // (alpha deg, anisotropy, entropy, vh, vv) per field.
    let params: Vec<[f64; 5]> = (0..n_fields)
        .map(|_| {
            [
                rng.random_range(15.0..60.0),
                rng.random_range(0.1..0.8),
                rng.random_range(0.2..0.9),
                rng.random_range(0.005..0.05),
                rng.random_range(0.02..0.2),
            ]
        })
        .collect();
    let boundary = labels.boundary();
    let looks = f64::from(spec.speckle_looks);
    let speckle = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    let jitter = Normal::new(0.0, 0.03).expect("positive std");
    let mut data = Vec::with_capacity(5 * t * h * w);
    for band in 0..5 {
        for ti in 0..t {
            let season = 1.0 + 0.2 * (std::f64::consts::TAU * ti as f64 / t as f64).sin();
            for r in 0..h {
                for c in 0..w {
                    let p = params[labels.get(r, c)];
                    let edge = boundary.get(r, c);
                    let v = match band {
                        0 => (p[0] + if edge { 10.0 } else { 0.0 } + 90.0 * jitter.sample(&mut rng)).clamp(0.0, 90.0),
                        1 | 2 => (p[band] + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                        _ => p[band] * season * if edge { 1.5 } else { 1.0 } * speckle.sample(&mut rng),
                    };
                    data.push(v);
                }
            }
        }
    }
    DenseTensor::new(vec![5, t, h, w], data)
}

/// Everything generated for one scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub labels: LabelMap,
    pub gt: MultitaskPrediction,
    pub optical: DenseTensor,
    pub sar: DenseTensor,
    pub clouds: Vec<Mask>,
}

/// Optical and SAR series plus cloud masks for a scene.
pub fn gen_timeseries(spec: &SceneSpec, labels: &LabelMap) -> Result<(DenseTensor, DenseTensor, Vec<Mask>)> {
    let clouds = gen_clouds(spec)?;
    let optical = gen_optical(spec, labels, &clouds)?;
    let sar = gen_sar(spec, labels)?;
    Ok((optical, sar, clouds))
}

pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    let (labels, gt) = gen_fields(spec)?;
    let (optical, sar, clouds) = gen_timeseries(spec, &labels)?;
    Ok(Scene {
        labels,
        gt,
        optical,
        sar,
        clouds,
    })
}
