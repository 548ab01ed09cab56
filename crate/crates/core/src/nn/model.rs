//! Blocks, stages and the two macro-architectures.

use serde::{Deserialize, Serialize};

use super::graph::{Backend, Declare, Eval};
use super::ops::{dims4, ConvSpec, Op};
use super::weights::{ModelWeights, ParamDecl, ParamKind};
use crate::error::{dim_err, Error, Result};
use crate::prediction::MultitaskPrediction;
use crate::tensor::{DenseTensor, PatchSpec};

/// Width multiplier of the inverted-bottleneck and feed-forward layers.
pub const EXPANSION: usize = 4;
/// Channel reduction of the squeeze-excitation bottleneck.
pub const SE_REDUCTION: usize = 4;

/// A sequence of `repeats` blocks, each MBConv → squeeze-excite → patch
/// attention → feed-forward with residual connections.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub repeats: usize,
    pub channels: usize,
    pub patch: PatchSpec,
    pub causal: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("a stage needs at least one block".into()));
        }
        check_patch_channels(self.channels, self.patch)
    }
}

fn check_patch_channels(channels: usize, patch: PatchSpec) -> Result<()> {
    if channels == 0 || patch.c == 0 || patch.h == 0 || patch.w == 0 || !channels.is_multiple_of(patch.c) {
        return Err(Error::Config(format!(
            "{channels} channels cannot be split into {} channel patches",
            patch.c
        )));
    }
    Ok(())
}

/// How the final feature volume loses its time axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeCompaction {
    /// Average over time. Works for any number of frames.
    Mean,
    /// Valid convolution whose kernel spans exactly `frames` time steps.
    Conv { frames: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNet3DConfig {
    pub in_channels: usize,
    pub init_features: usize,
    /// Encoder stages, bottleneck, decoder stages.
    pub stage_repeats: Vec<usize>,
    pub patch: PatchSpec,
    pub causal: bool,
    /// Blocks in the stage that runs after the decoder.
    pub final_repeats: usize,
    pub compaction: TimeCompaction,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            init_features: 16,
            stage_repeats: vec![2, 2, 5, 2, 5, 2, 2],
            patch: PatchSpec::new(1, 4, 4),
            causal: false,
            final_repeats: 1,
            compaction: TimeCompaction::Mean,
        }
    }
}

impl UNet3DConfig {
    /// Number of encoder stages (and of downsampling steps).
    pub fn depth(&self) -> usize {
        self.stage_repeats.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.stage_repeats;
        if r.len().is_multiple_of(2) {
            return Err(Error::Config(format!("stage_repeats {r:?} must have odd length")));
        }
        if r.iter().rev().ne(r.iter()) {
            return Err(Error::Config(format!("stage_repeats {r:?} is not symmetric")));
        }
        if r.contains(&0) || self.final_repeats == 0 {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if let TimeCompaction::Conv { frames: 0 } = self.compaction {
            return Err(Error::Config("time compaction over zero frames".into()));
        }
        check_patch_channels(self.init_features, self.patch)
    }
}

/// Two independent encoders joined by cross attention at every level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub s2_channels: usize,
    pub s1_channels: usize,
    pub init_features: usize,
    pub encoder_repeats: Vec<usize>,
    pub decoder_repeats: Vec<usize>,
    pub patch: PatchSpec,
    pub final_repeats: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            s2_channels: 4,
            s1_channels: 5,
            init_features: 16,
            encoder_repeats: vec![2, 2, 5, 2],
            decoder_repeats: vec![5, 2, 2],
            patch: PatchSpec::new(1, 4, 4),
            final_repeats: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let (e, d) = (&self.encoder_repeats, &self.decoder_repeats);
        if e.is_empty() || d.len() + 1 != e.len() {
            return Err(Error::Config(format!(
                "{} encoder stages need {} decoder stages, got {}",
                e.len(),
                e.len().saturating_sub(1),
                d.len()
            )));
        }
        if e.contains(&0) || d.contains(&0) || self.final_repeats == 0 {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.s1_channels == 0 || self.s2_channels == 0 {
            return Err(Error::Config("input channel counts must be positive".into()));
        }
        check_patch_channels(self.init_features, self.patch)
    }

    fn downsamples(&self) -> usize {
        self.encoder_repeats.len() - 1
    }
}

/// The architecture a weight set belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Stage(StageConfig),
    Unet3d(UNet3DConfig),
    Fusion(FusionConfig),
}

impl From<StageConfig> for ModelSpec {
    fn from(c: StageConfig) -> Self {
        ModelSpec::Stage(c)
    }
}

impl From<UNet3DConfig> for ModelSpec {
    fn from(c: UNet3DConfig) -> Self {
        ModelSpec::Unet3d(c)
    }
}

impl From<FusionConfig> for ModelSpec {
    fn from(c: FusionConfig) -> Self {
        ModelSpec::Fusion(c)
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Stage(c) => c.validate(),
            ModelSpec::Unet3d(c) => c.validate(),
            ModelSpec::Fusion(c) => c.validate(),
        }
    }
}

// Building blocks, generic over the execution backend.

fn conv<B: Backend>(b: &mut B, name: &str, x: &B::T, co: usize, spec: ConvSpec, residual: bool) -> Result<B::T> {
    let ci = b.shape(x)[0];
    let cig = ci / spec.groups.max(1);
    let fan_in = cig * spec.kernel.iter().product::<usize>();
    let kind = if residual {
        ParamKind::ResidualOut { fan_in }
    } else {
        ParamKind::Weight { fan_in }
    };
    let [kt, kh, kw] = spec.kernel;
    let w = b.param(&format!("{name}.w"), &[co, cig, kt, kh, kw], kind)?;
    let bias = b.param(&format!("{name}.b"), &[co], ParamKind::Bias)?;
    b.apply(Op::Conv3d(spec), &[x, &w, &bias])
}

fn pointwise<B: Backend>(b: &mut B, name: &str, x: &B::T, co: usize, residual: bool) -> Result<B::T> {
    conv(b, name, x, co, ConvSpec::pointwise(), residual)
}

fn linear<B: Backend>(b: &mut B, name: &str, x: &B::T, co: usize, residual: bool) -> Result<B::T> {
    let ci = b.shape(x)[0];
    let kind = if residual {
        ParamKind::ResidualOut { fan_in: ci }
    } else {
        ParamKind::Weight { fan_in: ci }
    };
    let w = b.param(&format!("{name}.w"), &[co, ci], kind)?;
    let bias = b.param(&format!("{name}.b"), &[co], ParamKind::Bias)?;
    b.apply(Op::Linear, &[x, &w, &bias])
}

fn norm<B: Backend>(b: &mut B, name: &str, x: &B::T) -> Result<B::T> {
    let c = b.shape(x)[0];
    let g = b.param(&format!("{name}.g"), &[c], ParamKind::Gain)?;
    let beta = b.param(&format!("{name}.b"), &[c], ParamKind::Bias)?;
    b.apply(Op::InstanceNorm, &[x, &g, &beta])
}

fn unary<B: Backend>(b: &mut B, op: Op, x: &B::T) -> Result<B::T> {
    b.apply(op, &[x])
}

fn add<B: Backend>(b: &mut B, x: &B::T, y: &B::T) -> Result<B::T> {
    b.apply(Op::Add, &[x, y])
}

fn mbconv<B: Backend>(b: &mut B, p: &str, x: &B::T) -> Result<B::T> {
    let c = b.shape(x)[0];
    let wide = EXPANSION * c;
    let n = norm(b, &format!("{p}.norm"), x)?;
    let h = pointwise(b, &format!("{p}.expand"), &n, wide, false)?;
    let h = unary(b, Op::Silu, &h)?;
    let h = conv(b, &format!("{p}.depthwise"), &h, wide, ConvSpec::same([3, 3, 3], wide), false)?;
    let h = unary(b, Op::Silu, &h)?;
    let h = pointwise(b, &format!("{p}.project"), &h, c, true)?;
    add(b, x, &h)
}

/// Channel gate `2 sigmoid(z)`, so a zero excitation leaves `x` unchanged.
fn squeeze_excite<B: Backend>(b: &mut B, p: &str, x: &B::T) -> Result<B::T> {
    let c = b.shape(x)[0];
    let s = unary(b, Op::ChannelMean, x)?;
    let z = linear(b, &format!("{p}.reduce"), &s, (c / SE_REDUCTION).max(1), false)?;
    let z = unary(b, Op::Silu, &z)?;
    let z = linear(b, &format!("{p}.excite"), &z, c, true)?;
    let g = unary(b, Op::Sigmoid, &z)?;
    let g = unary(b, Op::Affine { scale: 2.0, shift: 0.0 }, &g)?;
    b.apply(Op::ChannelScale, &[x, &g])
}

/// Residual patch attention over `x`. With `source`, queries come from that
/// other stream instead of from `x`.
fn attention_block<B: Backend>(
    b: &mut B,
    p: &str,
    source: Option<&B::T>,
    x: &B::T,
    patch: PatchSpec,
    causal: bool,
) -> Result<B::T> {
    let c = b.shape(x)[0];
    let nx = norm(b, &format!("{p}.norm"), x)?;
    let ns = match source {
        Some(s) => norm(b, &format!("{p}.norm_query"), s)?,
        None => nx.clone(),
    };
    let q = pointwise(b, &format!("{p}.query"), &ns, c, false)?;
    let q = unary(b, Op::Sigmoid, &q)?;
    let k = pointwise(b, &format!("{p}.key"), &nx, c, false)?;
    let k = unary(b, Op::Sigmoid, &k)?;
    let v = pointwise(b, &format!("{p}.value"), &nx, c, false)?;
    let a = b.apply(Op::Attention { patch, causal }, &[&q, &k, &v])?;
    let out = pointwise(b, &format!("{p}.out"), &a, c, true)?;
    add(b, x, &out)
}

fn feed_forward<B: Backend>(b: &mut B, p: &str, x: &B::T) -> Result<B::T> {
    let c = b.shape(x)[0];
    let n = norm(b, &format!("{p}.norm"), x)?;
    let h = pointwise(b, &format!("{p}.fc1"), &n, EXPANSION * c, false)?;
    let h = unary(b, Op::Silu, &h)?;
    let h = pointwise(b, &format!("{p}.fc2"), &h, c, true)?;
    add(b, x, &h)
}

pub(crate) fn stage<B: Backend>(b: &mut B, p: &str, x: B::T, cfg: &StageConfig) -> Result<B::T> {
    let shape = b.shape(&x);
    if shape.len() != 4 || shape[0] != cfg.channels {
        return dim_err(format!("stage {p} expects {} channels, got shape {shape:?}", cfg.channels));
    }
    let mut h = x;
    for r in 0..cfg.repeats {
        let q = format!("{p}.{r}");
        h = mbconv(b, &format!("{q}.mbconv"), &h)?;
        h = squeeze_excite(b, &format!("{q}.se"), &h)?;
        h = attention_block(b, &format!("{q}.attn"), None, &h, cfg.patch, cfg.causal)?;
        h = feed_forward(b, &format!("{q}.ffn"), &h)?;
    }
    Ok(h)
}

/// Extent, boundary and distance maps, each `1 x 1 x H x W`.
pub(crate) struct HeadOutput<T> {
    pub extent: T,
    pub boundary: T,
    pub distance: T,
}

/// Distance first, then boundary conditioned on distance, then extent
/// conditioned on both.
fn head<B: Backend>(b: &mut B, x: &B::T) -> Result<HeadOutput<B::T>> {
    let f = b.shape(x)[0];
    let k = ConvSpec::same([1, 3, 3], 1);
    let pre = conv(b, "head.pre", x, f, k, false)?;
    let pre = unary(b, Op::Silu, &pre)?;
    let d = conv(b, "head.distance", &pre, 1, k, false)?;
    let distance = unary(b, Op::Sigmoid, &d)?;
    let cat = b.apply(Op::Concat { axis: 0 }, &[&pre, &distance])?;
    let bd = conv(b, "head.boundary", &cat, 1, k, false)?;
    let boundary = unary(b, Op::Sigmoid, &bd)?;
    let cat = b.apply(Op::Concat { axis: 0 }, &[&pre, &distance, &boundary])?;
    let e = conv(b, "head.extent", &cat, 1, k, false)?;
    let extent = unary(b, Op::Sigmoid, &e)?;
    Ok(HeadOutput {
        extent,
        boundary,
        distance,
    })
}

fn stage_cfg(repeats: usize, channels: usize, patch: PatchSpec, causal: bool) -> StageConfig {
    StageConfig {
        repeats,
        channels,
        patch,
        causal,
    }
}

/// Upsample, project to `channels`, concatenate the skip and fuse.
fn merge_skip<B: Backend>(b: &mut B, l: usize, h: &B::T, skip: &B::T, channels: usize) -> Result<B::T> {
    let up = unary(b, Op::Upsample2, h)?;
    let up = pointwise(b, &format!("up{l}"), &up, channels, false)?;
    let cat = b.apply(Op::Concat { axis: 0 }, &[&up, skip])?;
    pointwise(b, &format!("fuse{l}"), &cat, channels, false)
}

fn check_spatial(shape: &[usize], levels: usize, what: &str) -> Result<()> {
    let f = 1usize << levels;
    if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
        return dim_err(format!(
            "{what} spatial size {}x{} is not divisible by {f}",
            shape[2], shape[3]
        ));
    }
    Ok(())
}

pub(crate) fn unet3d<B: Backend>(b: &mut B, x: B::T, cfg: &UNet3DConfig) -> Result<HeadOutput<B::T>> {
    cfg.validate()?;
    let shape = b.shape(&x).to_vec();
    if shape.len() != 4 || shape[0] != cfg.in_channels {
        return dim_err(format!("model expects {} x T x H x W input, got {shape:?}", cfg.in_channels));
    }
    let n = cfg.depth();
    check_spatial(&shape, n, "input")?;
    let r = &cfg.stage_repeats;
    let f = cfg.init_features;
    let mut h = conv(b, "stem", &x, f, ConvSpec::same([1, 3, 3], 1), false)?;
    let mut skips = Vec::with_capacity(n);
    for (l, &reps) in r.iter().enumerate().take(n) {
        h = stage(b, &format!("enc{l}"), h, &stage_cfg(reps, f << l, cfg.patch, cfg.causal))?;
        skips.push(h.clone());
        h = conv(b, &format!("down{l}"), &h, f << (l + 1), ConvSpec::down2(), false)?;
    }
    h = stage(b, "mid", h, &stage_cfg(r[n], f << n, cfg.patch, cfg.causal))?;
    for l in (0..n).rev() {
        h = merge_skip(b, l, &h, &skips[l], f << l)?;
        h = stage(b, &format!("dec{l}"), h, &stage_cfg(r[2 * n - l], f << l, cfg.patch, cfg.causal))?;
    }
    h = stage(b, "final", h, &stage_cfg(cfg.final_repeats, f, cfg.patch, cfg.causal))?;
    let h = match cfg.compaction {
        TimeCompaction::Mean => unary(b, Op::TimeMean, &h)?,
        TimeCompaction::Conv { frames } => {
            if shape[1] != frames {
                return dim_err(format!("time compaction expects {frames} frames, input has {}", shape[1]));
            }
            conv(b, "compact", &h, f, ConvSpec::over_time(frames), false)?
        }
    };
    head(b, &h)
}

fn encode<B: Backend>(b: &mut B, p: &str, x: &B::T, cfg: &FusionConfig) -> Result<Vec<B::T>> {
    let f = cfg.init_features;
    let mut h = conv(b, &format!("{p}.stem"), x, f, ConvSpec::same([1, 3, 3], 1), false)?;
    let mut levels = Vec::with_capacity(cfg.encoder_repeats.len());
    for (l, &reps) in cfg.encoder_repeats.iter().enumerate() {
        if l > 0 {
            h = conv(b, &format!("{p}.down{}", l - 1), &h, f << l, ConvSpec::down2(), false)?;
        }
        h = stage(b, &format!("{p}.enc{l}"), h, &stage_cfg(reps, f << l, cfg.patch, false))?;
        levels.push(h.clone());
    }
    Ok(levels)
}

pub(crate) fn fusion<B: Backend>(b: &mut B, x_s2: B::T, x_s1: B::T, cfg: &FusionConfig) -> Result<HeadOutput<B::T>> {
    cfg.validate()?;
    let (s2, s1) = (b.shape(&x_s2).to_vec(), b.shape(&x_s1).to_vec());
    if s2.len() != 4 || s1.len() != 4 || s2[0] != cfg.s2_channels || s1[0] != cfg.s1_channels {
        return dim_err(format!(
            "fusion expects {} and {} input channels, got {s2:?} and {s1:?}",
            cfg.s2_channels, cfg.s1_channels
        ));
    }
    if s2[2..] != s1[2..] {
        return dim_err(format!("streams differ in spatial size: {s2:?} vs {s1:?}"));
    }
    check_spatial(&s2, cfg.downsamples(), "input")?;
    let f2 = encode(b, "s2", &x_s2, cfg)?;
    let f1 = encode(b, "s1", &x_s1, cfg)?;
    let mut fused = Vec::with_capacity(f2.len());
    for (l, (a2, a1)) in f2.iter().zip(&f1).enumerate() {
        let u2 = attention_block(b, &format!("cross{l}.s2"), Some(a1), a2, cfg.patch, false)?;
        let u1 = attention_block(b, &format!("cross{l}.s1"), Some(a2), a1, cfg.patch, false)?;
        fused.push(b.apply(Op::Concat { axis: 1 }, &[&u2, &u1])?);
    }
    let f = cfg.init_features;
    let mut h = fused.pop().expect("at least one level");
    for (i, &reps) in cfg.decoder_repeats.iter().enumerate() {
        let l = cfg.downsamples() - 1 - i;
        h = merge_skip(b, l, &h, &fused[l], f << l)?;
        h = stage(b, &format!("dec{l}"), h, &stage_cfg(reps, f << l, cfg.patch, false))?;
    }
    h = stage(b, "final", h, &stage_cfg(cfg.final_repeats, f, cfg.patch, false))?;
    let h = unary(b, Op::TimeMean, &h)?;
    head(b, &h)
}

fn to_prediction(out: HeadOutput<DenseTensor>) -> Result<MultitaskPrediction> {
    let flat = |t: DenseTensor| {
        let [_, _, h, w] = dims4(&t)?;
        t.into_reshape(&[h, w])
    };
    MultitaskPrediction::new(flat(out.extent)?, flat(out.boundary)?, flat(out.distance)?)
}

/// Runs one stage. Output has the input's shape.
pub fn stage_forward(x: &DenseTensor, cfg: &StageConfig, w: &ModelWeights) -> Result<DenseTensor> {
    cfg.validate()?;
    stage(&mut Eval::new(w), "stage", x.clone(), cfg)
}

pub fn unet3d_forward(x: &DenseTensor, cfg: &UNet3DConfig, w: &ModelWeights) -> Result<MultitaskPrediction> {
    to_prediction(unet3d(&mut Eval::new(w), x.clone(), cfg)?)
}

pub fn fusion_forward(
    x_s2: &DenseTensor,
    x_s1: &DenseTensor,
    cfg: &FusionConfig,
    w: &ModelWeights,
) -> Result<MultitaskPrediction> {
    to_prediction(fusion(&mut Eval::new(w), x_s2.clone(), x_s1.clone(), cfg)?)
}

/// Every parameter the model reads, in the order it first reads them.
/// Weights never depend on the time extent or the image size, so the
/// declaration runs on the smallest admissible input.
pub fn declare_params(spec: &ModelSpec) -> Result<Vec<ParamDecl>> {
    spec.validate()?;
    let mut d = Declare::default();
    match spec {
        ModelSpec::Stage(c) => {
            stage(&mut d, "stage", vec![c.channels, 1, c.patch.h, c.patch.w], c)?;
        }
        ModelSpec::Unet3d(c) => {
            let t = match c.compaction {
                TimeCompaction::Mean => 1,
                TimeCompaction::Conv { frames } => frames,
            };
            let n = c.depth();
            unet3d(&mut d, vec![c.in_channels, t, c.patch.h << n, c.patch.w << n], c)?;
        }
        ModelSpec::Fusion(c) => {
            let n = c.downsamples();
            let (h, w) = (c.patch.h << n, c.patch.w << n);
            fusion(&mut d, vec![c.s2_channels, 1, h, w], vec![c.s1_channels, 1, h, w], c)?;
        }
    }
    Ok(d.into_decls())
}

/// Seeded truncated-normal initialization of every parameter.
pub fn init_weights(spec: impl Into<ModelSpec>, seed: u64) -> Result<ModelWeights> {
    init_weights_with(spec, seed, false)
}

/// As [`init_weights`]; with `identity_residuals` the last projection of
/// every residual branch starts at zero, so each block is the identity.
pub fn init_weights_with(spec: impl Into<ModelSpec>, seed: u64, identity_residuals: bool) -> Result<ModelWeights> {
    let spec = spec.into();
    let decls = declare_params(&spec)?;
    ModelWeights::initialize(spec, &decls, seed, identity_residuals)
}
