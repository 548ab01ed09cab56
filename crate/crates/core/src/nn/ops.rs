//! Differentiable primitives. Each [`Op`] knows its forward kernel and how to
//! pull an output gradient back to its inputs.

use crate::error::{dim_err, Result};
use crate::loss::tanimoto_loss_grad;
use crate::pta3d::{attention, attention_grad, AttentionConfig};
use crate::tensor::{matmul, matmul_nt, DenseTensor, PatchSpec};

pub const NORM_EPS: f64 = 1e-5;

/// Kernel geometry of a 3-D convolution over `C x T x H x W`. Out-of-range
/// taps read the nearest edge sample (replicate padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        Self {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            groups: 1,
        }
    }

    /// Stride-1 convolution that preserves the input extent.
    pub fn same(kernel: [usize; 3], groups: usize) -> Self {
        Self {
            kernel,
            stride: [1, 1, 1],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            groups,
        }
    }

    /// Spatial downsampling by 2, time untouched.
    pub fn down2() -> Self {
        Self {
            kernel: [1, 2, 2],
            stride: [1, 2, 2],
            pad: [0, 0, 0],
            groups: 1,
        }
    }

    /// Collapses a time axis of length `t` to 1.
    pub fn over_time(t: usize) -> Self {
        Self {
            kernel: [t, 1, 1],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            groups: 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    fn out_len(&self, axis: usize, n: usize) -> Result<usize> {
        let padded = n + 2 * self.pad[axis];
        if padded < self.kernel[axis] {
            return dim_err(format!("kernel {:?} larger than padded input extent {padded}", self.kernel));
        }
        Ok((padded - self.kernel[axis]) / self.stride[axis] + 1)
    }

    /// Input index read by output `o` at tap `k` on `axis`.
    fn taps(&self, axis: usize, n_in: usize, n_out: usize) -> Vec<Vec<usize>> {
        (0..self.kernel[axis])
            .map(|k| {
                (0..n_out)
                    .map(|o| {
                        let pos = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
                        pos.clamp(0, n_in as isize - 1) as usize
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn dims4(x: &DenseTensor) -> Result<[usize; 4]> {
    shape4(x.shape())
}

fn shape4(s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [c, t, h, w] => Ok([c, t, h, w]),
        ref s => dim_err(format!("expected C x T x H x W, got {s:?}")),
    }
}

struct ConvGeometry {
    ci: usize,
    co: usize,
    cig: usize,
    cog: usize,
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
    taps: [Vec<Vec<usize>>; 3],
    /// Per width tap, the output columns `lo..hi` that read the contiguous
    /// input columns starting at `start` without clamping (stride 1 only).
    spans: Vec<Option<(usize, usize, usize)>>,
}

/// `orow[k] += wv * xrow[taps[k]]`.
fn row_axpy(orow: &mut [f64], xrow: &[f64], taps: &[usize], span: Option<(usize, usize, usize)>, wv: f64) {
    match span {
        Some((lo, hi, start)) => {
            for (ov, &wi) in orow[..lo].iter_mut().zip(&taps[..lo]) {
                *ov += wv * xrow[wi];
            }
            for (ov, &xv) in orow[lo..hi].iter_mut().zip(&xrow[start..start + hi - lo]) {
                *ov += wv * xv;
            }
            for (ov, &wi) in orow[hi..].iter_mut().zip(&taps[hi..]) {
                *ov += wv * xrow[wi];
            }
        }
        None => {
            for (ov, &wi) in orow.iter_mut().zip(taps) {
                *ov += wv * xrow[wi];
            }
        }
    }
}

/// Adjoint of [`row_axpy`]: scatters `wv * grow` into `dxrow` and returns
/// `sum_k grow[k] * xrow[taps[k]]`.
fn row_adjoint(
    grow: &[f64],
    xrow: &[f64],
    dxrow: &mut [f64],
    taps: &[usize],
    span: Option<(usize, usize, usize)>,
    wv: f64,
) -> f64 {
    let mut acc = 0.0;
    let mut gather = |range: std::ops::Range<usize>, acc: &mut f64| {
        for k in range {
            let wi = taps[k];
            *acc += grow[k] * xrow[wi];
            dxrow[wi] += wv * grow[k];
        }
    };
    match span {
        Some((lo, hi, start)) => {
            gather(0..lo, &mut acc);
            gather(hi..grow.len(), &mut acc);
            let (g, x) = (&grow[lo..hi], &xrow[start..start + hi - lo]);
            let mut lanes = [0.0; 4];
            let (gc, xc) = (g.chunks_exact(4), x.chunks_exact(4));
            let (gr, xr) = (gc.remainder(), xc.remainder());
            for (a, b) in gc.zip(xc) {
                for l in 0..4 {
                    lanes[l] += a[l] * b[l];
                }
            }
            acc += lanes.iter().sum::<f64>() + gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            for (d, &gv) in dxrow[start..start + hi - lo].iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
        None => gather(0..grow.len(), &mut acc),
    }
    acc
}

fn conv_geometry(xs: &[usize], ws: &[usize], bs: &[usize], spec: &ConvSpec) -> Result<ConvGeometry> {
    let [ci, t, h, wd] = shape4(xs)?;
    if ws.len() != 5 || ws[2..] != spec.kernel {
        return dim_err(format!("conv weight {ws:?} does not match kernel {:?}", spec.kernel));
    }
    let (co, cig) = (ws[0], ws[1]);
    if spec.groups == 0 || ci != cig * spec.groups || co % spec.groups != 0 {
        return dim_err(format!(
            "conv weight {ws:?} with {} groups cannot consume {ci} channels",
            spec.groups
        ));
    }
    if bs != [co] {
        return dim_err(format!("conv bias {bs:?} does not match {co} outputs"));
    }
    let (to, ho, wo) = (spec.out_len(0, t)?, spec.out_len(1, h)?, spec.out_len(2, wd)?);
    Ok(ConvGeometry {
        ci,
        co,
        cig,
        cog: co / spec.groups,
        t,
        h,
        w: wd,
        to,
        ho,
        wo,
        taps: [spec.taps(0, t, to), spec.taps(1, h, ho), spec.taps(2, wd, wo)],
        spans: (0..spec.kernel[2])
            .map(|c| {
                if spec.stride[2] != 1 {
                    return None;
                }
                // Output column o reads input column o + c - pad.
                let pad = spec.pad[2];
                let lo = pad.saturating_sub(c).min(wo);
                let hi = (wd + pad).saturating_sub(c).min(wo).max(lo);
                Some((lo, hi, lo + c - pad))
            })
            .collect(),
    })
}

pub fn conv3d(x: &DenseTensor, w: &DenseTensor, b: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let g = conv_geometry(x.shape(), w.shape(), b.shape(), spec)?;
    let n_out = g.to * g.ho * g.wo;
    let mut out = if spec.is_pointwise() {
        matmul(w.data(), x.data(), g.co, g.ci, n_out)
    } else {
        let mut out = vec![0.0; g.co * n_out];
        let [kt, kh, kw] = spec.kernel;
        let wdat = w.data();
        let xdat = x.data();
        for o in 0..g.co {
            let grp = o / g.cog;
            for icg in 0..g.cig {
                let i = grp * g.cig + icg;
                for a in 0..kt {
                    for bb in 0..kh {
                        for c in 0..kw {
                            let wv = wdat[(((o * g.cig + icg) * kt + a) * kh + bb) * kw + c];
                            let (wtaps, span) = (&g.taps[2][c], g.spans[c]);
                            for (tt, &ti) in g.taps[0][a].iter().enumerate() {
                                for (hh, &hi) in g.taps[1][bb].iter().enumerate() {
                                    let xrow = &xdat[((i * g.t + ti) * g.h + hi) * g.w..][..g.w];
                                    let orow = &mut out[((o * g.to + tt) * g.ho + hh) * g.wo..][..g.wo];
                                    row_axpy(orow, xrow, wtaps, span, wv);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    };
    for (chunk, &bv) in out.chunks_mut(n_out).zip(b.data()) {
        for v in chunk {
            *v += bv;
        }
    }
    DenseTensor::new(vec![g.co, g.to, g.ho, g.wo], out)
}

/// Returns `(dx, dw, db)`.
pub fn conv3d_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    b: &DenseTensor,
    spec: &ConvSpec,
    grad: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let g = conv_geometry(x.shape(), w.shape(), b.shape(), spec)?;
    let n_out = g.to * g.ho * g.wo;
    let gd = grad.data();
    let db: Vec<f64> = gd.chunks(n_out).map(|c| c.iter().sum()).collect();
    let (dx, dw) = if spec.is_pointwise() {
        let wt = w.reshape(&[g.co, g.ci])?.transpose2()?;
        (
            matmul(wt.data(), gd, g.ci, g.co, n_out),
            matmul_nt(gd, x.data(), g.co, n_out, g.ci),
        )
    } else {
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let [kt, kh, kw] = spec.kernel;
        let wdat = w.data();
        let xdat = x.data();
        for o in 0..g.co {
            let grp = o / g.cog;
            for icg in 0..g.cig {
                let i = grp * g.cig + icg;
                for a in 0..kt {
                    for bb in 0..kh {
                        for c in 0..kw {
                            let widx = (((o * g.cig + icg) * kt + a) * kh + bb) * kw + c;
                            let wv = wdat[widx];
                            let (wtaps, span) = (&g.taps[2][c], g.spans[c]);
                            let mut acc = 0.0;
                            for (tt, &ti) in g.taps[0][a].iter().enumerate() {
                                for (hh, &hi) in g.taps[1][bb].iter().enumerate() {
                                    let base = ((i * g.t + ti) * g.h + hi) * g.w;
                                    let grow = &gd[((o * g.to + tt) * g.ho + hh) * g.wo..][..g.wo];
                                    let xrow = &xdat[base..base + g.w];
                                    let dxrow = &mut dx[base..base + g.w];
                                    acc += row_adjoint(grow, xrow, dxrow, wtaps, span, wv);
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        (dx, dw)
    };
    Ok((
        DenseTensor::new(x.shape().to_vec(), dx)?,
        DenseTensor::new(w.shape().to_vec(), dw)?,
        DenseTensor::new(vec![g.co], db)?,
    ))
}

/// Per-channel normalisation over every non-channel axis, then affine.
pub fn instance_norm(x: &DenseTensor, gamma: &DenseTensor, beta: &DenseTensor) -> Result<DenseTensor> {
    let c = x.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!("norm parameters do not match {c} channels"));
    }
    let n = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for (ch, chunk) in x.data().chunks(n).enumerate() {
        let (mean, inv) = moments(chunk);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        out.extend(chunk.iter().map(|v| (v - mean) * inv * g + b));
    }
    DenseTensor::new(x.shape().to_vec(), out)
}

fn moments(chunk: &[f64]) -> (f64, f64) {
    let n = chunk.len() as f64;
    let mean = chunk.iter().sum::<f64>() / n;
    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

pub fn instance_norm_backward(
    x: &DenseTensor,
    gamma: &DenseTensor,
    grad: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let c = x.shape()[0];
    let n = x.len() / c;
    let mut dx = Vec::with_capacity(x.len());
    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
    for (ch, (xc, gc)) in x.data().chunks(n).zip(grad.data().chunks(n)).enumerate() {
        let (mean, inv) = moments(xc);
        let g = gamma.data()[ch];
        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
        for (&xv, &gv) in xc.iter().zip(gc) {
            let xhat = (xv - mean) * inv;
            dg[ch] += gv * xhat;
            db[ch] += gv;
            sum_d += gv * g;
            sum_dx += gv * g * xhat;
        }
        let nf = n as f64;
        dx.extend(xc.iter().zip(gc).map(|(&xv, &gv)| {
            let xhat = (xv - mean) * inv;
            inv / nf * (nf * gv * g - sum_d - xhat * sum_dx)
        }));
    }
    Ok((
        DenseTensor::new(x.shape().to_vec(), dx)?,
        DenseTensor::new(vec![c], dg)?,
        DenseTensor::new(vec![c], db)?,
    ))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Concatenation along `axis`.
pub fn concat(parts: &[&DenseTensor], axis: usize) -> Result<DenseTensor> {
    let first = parts.first().map(|p| p.shape()).unwrap_or(&[]);
    if axis >= first.len() {
        return dim_err("concat axis out of range");
    }
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(k, (a, b))| k != axis && a != b) {
            return dim_err(format!("cannot concatenate {s:?} with {first:?} along axis {axis}"));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let inner = p.len() / outer;
            data.extend_from_slice(&p.data()[o * inner..(o + 1) * inner]);
        }
    }
    DenseTensor::new(shape, data)
}

fn split(grad: &DenseTensor, shapes: &[Vec<usize>], axis: usize) -> Result<Vec<DenseTensor>> {
    let outer: usize = grad.shape()[..axis].iter().product();
    let mut parts: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (p, s) in parts.iter_mut().zip(shapes) {
            let inner = s.iter().product::<usize>() / outer;
            p.extend_from_slice(&grad.data()[pos..pos + inner]);
            pos += inner;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(d, s)| DenseTensor::new(s.clone(), d))
        .collect()
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2(x: &DenseTensor) -> Result<DenseTensor> {
    let [c, t, h, w] = dims4(x)?;
    Ok(DenseTensor::from_fn(&[c, t, 2 * h, 2 * w], |i| x.get(&[i[0], i[1], i[2] / 2, i[3] / 2])))
}

fn upsample2_backward(grad: &DenseTensor) -> Result<DenseTensor> {
    let [c, t, h2, w2] = dims4(grad)?;
    let mut out = DenseTensor::zeros(&[c, t, h2 / 2, w2 / 2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let od = out.data_mut();
    for (k, &g) in grad.data().iter().enumerate() {
        let x = k % w2;
        let y = (k / w2) % h2;
        let ct = k / (w2 * h2);
        od[(ct * h + y / 2) * w + x / 2] += g;
    }
    Ok(out)
}

/// A differentiable operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Inputs: x, weight, bias.
    Conv3d(ConvSpec),
    /// Inputs: x, gamma, beta.
    InstanceNorm,
    Silu,
    Sigmoid,
    Add,
    Mul,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    /// `C x ...` → `[C]`, mean over the non-channel axes.
    ChannelMean,
    /// Inputs: s `[Ci]`, weight `[Co, Ci]`, bias `[Co]`.
    Linear,
    /// Inputs: x `C x ...`, s `[C]`.
    ChannelScale,
    Concat { axis: usize },
    Upsample2,
    /// `C x T x H x W` → `C x 1 x H x W`.
    TimeMean,
    /// Inputs: q, k, v; mean contraction.
    Attention { patch: PatchSpec, causal: bool },
    /// Inputs: prediction, target. Gradient flows to the prediction only.
    TanimotoLoss,
}

impl Op {
    /// Output shape for the given input shapes, with the same validation as
    /// [`Op::forward`] but without touching any data.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let x = inputs[0];
        let same = |a: &[usize], b: &[usize]| -> Result<Vec<usize>> {
            if a != b {
                return dim_err(format!("shape mismatch: {a:?} vs {b:?}"));
            }
            Ok(a.to_vec())
        };
        match self {
            Op::Conv3d(spec) => {
                let g = conv_geometry(x, inputs[1], inputs[2], spec)?;
                Ok(vec![g.co, g.to, g.ho, g.wo])
            }
            Op::InstanceNorm => {
                let c = [*x.first().unwrap_or(&0)];
                same(inputs[1], &c)?;
                same(inputs[2], &c)?;
                Ok(x.to_vec())
            }
            Op::Silu | Op::Sigmoid | Op::Affine { .. } => Ok(x.to_vec()),
            Op::Add | Op::Mul => same(x, inputs[1]),
            Op::ChannelMean => Ok(vec![x[0]]),
            Op::Linear => {
                let w = inputs[1];
                if w.len() != 2 || x != [w[1]] || inputs[2] != [w[0]] {
                    return dim_err(format!("linear {w:?} cannot map {x:?}"));
                }
                Ok(vec![w[0]])
            }
            Op::ChannelScale => {
                same(inputs[1], &[x[0]])?;
                Ok(x.to_vec())
            }
            Op::Concat { axis } => {
                let mut out = x.to_vec();
                for s in &inputs[1..] {
                    if s.len() != x.len() || s.iter().zip(x).enumerate().any(|(k, (a, b))| k != *axis && a != b) {
                        return dim_err(format!("cannot concatenate {s:?} with {x:?} along axis {axis}"));
                    }
                    out[*axis] += s[*axis];
                }
                Ok(out)
            }
            Op::Upsample2 => {
                let [c, t, h, w] = shape4(x)?;
                Ok(vec![c, t, 2 * h, 2 * w])
            }
            Op::TimeMean => {
                let [c, _, h, w] = shape4(x)?;
                Ok(vec![c, 1, h, w])
            }
            Op::Attention { patch, .. } => {
                let ([c, _, h, w], k) = (shape4(x)?, shape4(inputs[1])?);
                if k[0] != c || k[2] != h || k[3] != w {
                    return dim_err(format!("query {x:?} and key {k:?} differ outside the time axis"));
                }
                patch.validate(c, h, w)?;
                same(inputs[2], inputs[1])
            }
            Op::TanimotoLoss => {
                same(x, inputs[1])?;
                Ok(vec![1])
            }
        }
    }

    pub fn forward(&self, inputs: &[&DenseTensor]) -> Result<DenseTensor> {
        let x = inputs[0];
        match self {
            Op::Conv3d(spec) => conv3d(x, inputs[1], inputs[2], spec),
            Op::InstanceNorm => instance_norm(x, inputs[1], inputs[2]),
            Op::Silu => Ok(x.map(silu)),
            Op::Sigmoid => Ok(x.map(sigmoid)),
            Op::Add => x.add(inputs[1]),
            Op::Mul => x.mul(inputs[1]),
            Op::Affine { scale, shift } => Ok(x.map(|v| scale * v + shift)),
            Op::ChannelMean => {
                let c = x.shape()[0];
                let n = x.len() / c;
                DenseTensor::new(vec![c], x.data().chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect())
            }
            Op::Linear => {
                let (w, b) = (inputs[1], inputs[2]);
                let (co, ci) = (w.shape()[0], w.shape()[1]);
                if x.shape() != [ci] || b.shape() != [co] {
                    return dim_err(format!("linear {:?} cannot map {:?}", w.shape(), x.shape()));
                }
                let y = matmul(w.data(), x.data(), co, ci, 1);
                DenseTensor::new(vec![co], y)?.add(b)
            }
            Op::ChannelScale => x.broadcast_mul_trailing(inputs[1]),
            Op::Concat { axis } => concat(inputs, *axis),
            Op::Upsample2 => upsample2(x),
            Op::TimeMean => {
                let [c, t, h, w] = dims4(x)?;
                Ok(DenseTensor::from_fn(&[c, 1, h, w], |i| {
                    (0..t).map(|tt| x.get(&[i[0], tt, i[2], i[3]])).sum::<f64>() / t as f64
                }))
            }
            Op::Attention { patch, causal } => {
                attention(x, inputs[1], inputs[2], &AttentionConfig::mean(*patch).causal(*causal))
            }
            Op::TanimotoLoss => {
                let (v, _) = tanimoto_loss_grad(x.data(), inputs[1].data())?;
                Ok(DenseTensor::scalar(v))
            }
        }
    }

    /// Gradients for each input; `None` where the input is not differentiable.
    pub fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>> {
        let x = inputs[0];
        Ok(match self {
            Op::Conv3d(spec) => {
                let (dx, dw, db) = conv3d_backward(x, inputs[1], inputs[2], spec, grad)?;
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::InstanceNorm => {
                let (dx, dg, db) = instance_norm_backward(x, inputs[1], grad)?;
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::Silu => vec![Some(x.zip_with(grad, |v, g| g * silu_grad(v))?)],
            Op::Sigmoid => vec![Some(output.zip_with(grad, |s, g| g * s * (1.0 - s))?)],
            Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Op::Mul => vec![Some(grad.mul(inputs[1])?), Some(grad.mul(x)?)],
            Op::Affine { scale, .. } => vec![Some(grad.scale(*scale))],
            Op::ChannelMean => {
                let c = x.shape()[0];
                let n = x.len() / c;
                let data = grad.data().iter().flat_map(|&g| std::iter::repeat_n(g / n as f64, n)).collect();
                vec![Some(DenseTensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Linear => {
                let w = inputs[1];
                let (co, ci) = (w.shape()[0], w.shape()[1]);
                let dx = matmul(w.transpose2()?.data(), grad.data(), ci, co, 1);
                let dw = matmul(grad.data(), x.data(), co, 1, ci);
                vec![
                    Some(DenseTensor::new(vec![ci], dx)?),
                    Some(DenseTensor::new(vec![co, ci], dw)?),
                    Some(grad.clone()),
                ]
            }
            Op::ChannelScale => {
                let s = inputs[1];
                let c = s.len();
                let n = x.len() / c;
                let ds = x
                    .data()
                    .chunks(n)
                    .zip(grad.data().chunks(n))
                    .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                    .collect();
                vec![Some(grad.broadcast_mul_trailing(s)?), Some(DenseTensor::new(vec![c], ds)?)]
            }
            Op::Concat { axis } => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
                split(grad, &shapes, *axis)?.into_iter().map(Some).collect()
            }
            Op::Upsample2 => vec![Some(upsample2_backward(grad)?)],
            Op::TimeMean => {
                let t = x.shape()[1];
                vec![Some(DenseTensor::from_fn(x.shape(), |i| grad.get(&[i[0], 0, i[2], i[3]]) / t as f64))]
            }
            Op::Attention { patch, causal } => {
                let cfg = AttentionConfig::mean(*patch).causal(*causal);
                let g = attention_grad(x, inputs[1], inputs[2], &cfg, grad)?;
                vec![Some(g.dq), Some(g.dk), Some(g.dv)]
            }
            Op::TanimotoLoss => {
                let (_, dp) = tanimoto_loss_grad(x.data(), inputs[1].data())?;
                let scale = grad.item();
                vec![
                    Some(DenseTensor::new(x.shape().to_vec(), dp.into_iter().map(|g| g * scale).collect())?),
                    None,
                ]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Compares the analytic input gradients of `op` against central
    /// differences of `<op(inputs), u>`.
    fn check_op(op: Op, inputs: Vec<DenseTensor>, differentiable: &[bool], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs: Vec<&DenseTensor> = inputs.iter().collect();
        let out = op.forward(&refs).unwrap();
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        assert_eq!(op.output_shape(&shapes).unwrap(), out.shape());
        let u = random(out.shape(), &mut rng, -1.0, 1.0);
        let grads = op.backward(&refs, &out, &u).unwrap();
        let objective = |xs: &[DenseTensor]| {
            let r: Vec<&DenseTensor> = xs.iter().collect();
            let o = op.forward(&r).unwrap();
            o.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for (k, g) in grads.iter().enumerate() {
            if !differentiable[k] {
                continue;
            }
            let g = g.as_ref().expect("gradient");
            assert_eq!(g.shape(), inputs[k].shape());
            for _ in 0..6 {
                let i = rng.random_range(0..inputs[k].len());
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{op:?} input {k} element {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = [
            (ConvSpec::pointwise(), [3, 2, 1, 1, 1], 2),
            (ConvSpec::same([3, 3, 3], 1), [2, 2, 3, 3, 3], 2),
            (ConvSpec::same([3, 3, 3], 4), [4, 1, 3, 3, 3], 4),
            (ConvSpec::same([1, 3, 3], 1), [2, 3, 1, 3, 3], 3),
            (ConvSpec::down2(), [4, 2, 1, 2, 2], 2),
            (ConvSpec::over_time(3), [2, 2, 3, 1, 1], 2),
        ];
        for (s, (spec, ws, ci)) in specs.into_iter().enumerate() {
            let x = random(&[ci, 3, 4, 6], &mut rng, -1.0, 1.0);
            let w = random(&ws, &mut rng, -1.0, 1.0);
            let b = random(&[ws[0]], &mut rng, -1.0, 1.0);
            check_op(Op::Conv3d(spec), vec![x, w, b], &[true; 3], s as u64);
        }
    }

    #[test]
    fn pointwise_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 4, 5], &mut rng, -1.0, 1.0);
        let w = random(&[2, 3, 1, 1, 1], &mut rng, -1.0, 1.0);
        let b = random(&[2], &mut rng, -1.0, 1.0);
        let fast = conv3d(&x, &w, &b, &ConvSpec::pointwise()).unwrap();
        // Same geometry with a zero-padded 1x1x3 kernel takes the gather path.
        let w3 = DenseTensor::from_fn(&[2, 3, 1, 1, 3], |i| if i[4] == 1 { w.get(&i[..2].iter().copied().chain([0, 0, 0]).collect::<Vec<_>>()) } else { 0.0 });
        let slow = conv3d(&x, &w3, &b, &ConvSpec::same([1, 1, 3], 1)).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-14);
    }

    #[test]
    fn replicate_padding_keeps_constants() {
        let x = DenseTensor::full(&[1, 2, 3, 3], 2.0);
        let w = DenseTensor::full(&[1, 1, 3, 3, 3], 0.5);
        let b = DenseTensor::full(&[1], 1.0);
        let y = conv3d(&x, &w, &b, &ConvSpec::same([3, 3, 3], 1)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 28.0).abs() < 1e-12));
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 2, 2, 4], &mut rng, -2.0, 2.0);
        let y = random(&[3, 2, 2, 4], &mut rng, -2.0, 2.0);
        let g = random(&[3], &mut rng, 0.5, 1.5);
        let bt = random(&[3], &mut rng, -0.5, 0.5);
        check_op(Op::InstanceNorm, vec![x.clone(), g.clone(), bt], &[true; 3], 10);
        check_op(Op::Silu, vec![x.clone()], &[true], 11);
        check_op(Op::Sigmoid, vec![x.clone()], &[true], 12);
        check_op(Op::Add, vec![x.clone(), y.clone()], &[true, true], 13);
        check_op(Op::Mul, vec![x.clone(), y.clone()], &[true, true], 14);
        check_op(Op::Affine { scale: 2.0, shift: 0.3 }, vec![x.clone()], &[true], 15);
        check_op(Op::ChannelMean, vec![x.clone()], &[true], 16);
        check_op(Op::ChannelScale, vec![x.clone(), g.clone()], &[true, true], 17);
        check_op(Op::Concat { axis: 0 }, vec![x.clone(), y.clone()], &[true, true], 18);
        check_op(Op::Concat { axis: 1 }, vec![x.clone(), random(&[3, 1, 2, 4], &mut rng, -1.0, 1.0)], &[true, true], 19);
        check_op(Op::Upsample2, vec![x.clone()], &[true], 20);
        check_op(Op::TimeMean, vec![x], &[true], 21);
        let w = random(&[2, 3], &mut rng, -1.0, 1.0);
        let b = random(&[2], &mut rng, -1.0, 1.0);
        check_op(Op::Linear, vec![g, w, b], &[true; 3], 22);
    }

    #[test]
    fn attention_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&[2, 2, 4, 4], &mut rng, 0.0, 1.0);
        let k = random(&[2, 3, 4, 4], &mut rng, 0.0, 1.0);
        let v = random(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let op = Op::Attention {
            patch: PatchSpec::new(1, 2, 2),
            causal: false,
        };
        check_op(op, vec![q, k, v], &[true; 3], 30);
        let p = random(&[1, 1, 4, 4], &mut rng, 0.05, 0.95);
        let l = random(&[1, 1, 4, 4], &mut rng, 0.0, 1.0);
        check_op(Op::TanimotoLoss, vec![p, l], &[true, false], 31);
    }

    #[test]
    fn shape_errors() {
        let x = DenseTensor::zeros(&[3, 1, 4, 4]);
        let w = DenseTensor::zeros(&[2, 2, 1, 1, 1]);
        let b = DenseTensor::zeros(&[2]);
        assert!(conv3d(&x, &w, &b, &ConvSpec::pointwise()).is_err());
        assert!(Op::Add.output_shape(&[&[1, 2], &[2, 1]]).is_err());
        assert!(Op::Concat { axis: 1 }.output_shape(&[&[1, 2, 3], &[2, 2, 3]]).is_err());
    }
}
