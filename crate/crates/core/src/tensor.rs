//! Dense row-major tensors.
//!
//! `DenseTensor` owns its data; every operation returns a fresh tensor. The
//! element type defaults to `f64`; `f32` tensors are available through
//! [`DenseTensor::cast`] for storage and interchange.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub const MAX_RANK: usize = 8;

/// Element types a tensor can hold.
pub trait Element: Float + Debug + Default + Send + Sync + 'static {}
impl Element for f64 {}
impl Element for f32 {}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Number of patches along the channel, height and width axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    /// Checks that the spec tiles a `C x H x W` extent exactly.
    pub fn validate(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        for (axis, n, extent) in [
            ("C", self.c, channels),
            ("H", self.h, height),
            ("W", self.w, width),
        ] {
            if n == 0 || extent % n != 0 {
                return dim_err(format!(
                    "patch count {n} does not divide axis {axis} of extent {extent}"
                ));
            }
        }
        Ok(())
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Element, I: IntoIterator<Item = T>>(it: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp = comp + ((sum - t) + x);
        } else {
            comp = comp + ((x - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return dim_err(format!("rank {} outside 1..={MAX_RANK}", shape.len()));
    }
    Ok(())
}

impl<T: Element> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_rank(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (k, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[k]);
            off = off * self.shape[k] + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Element>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("float cast"))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|x| x + s)
    }

    /// 1 where `x > t`, else 0.
    pub fn threshold(&self, t: T) -> Self {
        self.map(|x| if x > t { T::one() } else { T::zero() })
    }

    pub fn mask_gt(&self, t: T) -> Vec<bool> {
        self.data.iter().map(|&x| x > t).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Multiplies by `map`, whose shape must be a leading prefix of `self`'s,
    /// broadcasting it over the trailing axes.
    pub fn broadcast_mul_trailing(&self, map: &Self) -> Result<Self> {
        let k = map.rank();
        if k > self.rank() || self.shape[..k] != map.shape[..] {
            return dim_err(format!(
                "map shape {:?} is not a prefix of {:?}",
                map.shape, self.shape
            ));
        }
        let inner: usize = self.shape[k..].iter().product();
        let mut data = self.data.clone();
        for (chunk, &m) in data.chunks_mut(inner).zip(&map.data) {
            for x in chunk {
                *x = *x * m;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Compensated sum of every element.
    pub fn sum(&self) -> T {
        compensated_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from(self.data.len()).unwrap()
    }

    /// Sums over the listed axes, removing them. Reducing every axis yields a
    /// one-element tensor of shape `[1]`.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let mut reduce = vec![false; self.rank()];
        for &a in axes {
            if a >= self.rank() || reduce[a] {
                return dim_err(format!("invalid reduction axis {a} for rank {}", self.rank()));
            }
            reduce[a] = true;
        }
        let kept: Vec<usize> = (0..self.rank()).filter(|&a| !reduce[a]).collect();
        let red: Vec<usize> = (0..self.rank()).filter(|&a| reduce[a]).collect();
        let mut perm = kept.clone();
        perm.extend(&red);
        let p = self.permute(&perm)?;
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| self.shape[a]).collect()
        };
        let inner: usize = red.iter().map(|&a| self.shape[a]).product();
        let data = p
            .data
            .chunks(inner.max(1))
            .map(|c| compensated_sum(c.iter().copied()))
            .collect();
        Self::new(out_shape, data)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let n: usize = axes.iter().map(|&a| self.shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.scale(T::one() / T::from(n).unwrap()))
    }

    /// Output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("{perm:?} is not a permutation of rank {r}"));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            for k in (0..r).rev() {
                idx[k] += 1;
                src += src_strides[k];
                if idx[k] < out_shape[k] {
                    break;
                }
                src -= src_strides[k] * out_shape[k];
                idx[k] = 0;
            }
        }
        Self::new(out_shape, data)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return dim_err("transpose2 needs a rank-2 tensor");
        }
        self.permute(&[1, 0])
    }
}

/// Tensor contraction. `axes` pairs an axis of `a` with an axis of `b`; the
/// output carries the free axes of `a` followed by the free axes of `b`.
pub fn contract<T: Element>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    axes: &[(usize, usize)],
) -> Result<DenseTensor<T>> {
    let mut ca = vec![false; a.rank()];
    let mut cb = vec![false; b.rank()];
    for &(ia, ib) in axes {
        if ia >= a.rank() || ib >= b.rank() || ca[ia] || cb[ib] {
            return dim_err(format!("invalid contraction pair ({ia}, {ib})"));
        }
        if a.shape[ia] != b.shape[ib] {
            return dim_err(format!(
                "contracted extents differ: axis {ia} of a has {}, axis {ib} of b has {}",
                a.shape[ia], b.shape[ib]
            ));
        }
        ca[ia] = true;
        cb[ib] = true;
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|&k| !ca[k]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&k| !cb[k]).collect();
    let mut perm_a = free_a.clone();
    perm_a.extend(axes.iter().map(|p| p.0));
    let mut perm_b: Vec<usize> = axes.iter().map(|p| p.1).collect();
    perm_b.extend(&free_b);
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;
    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let kk: usize = axes.iter().map(|p| a.shape[p.0]).product();
    let data = matmul(&pa.data, &pb.data, m, kk, n);
    let mut shape: Vec<usize> = free_a.iter().map(|&k| a.shape[k]).collect();
    shape.extend(free_b.iter().map(|&k| b.shape[k]));
    if shape.is_empty() {
        shape.push(1);
    }
    if shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!("contraction result rank {} too large", shape.len())));
    }
    DenseTensor::new(shape, data)
}

/// Row-major `(m x k) * (k x n)`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &x) in row.iter_mut().zip(brow) {
                *o = *o + s * x;
            }
        }
    }
    out
}

/// Inner product with four independent partial sums, which lets the
/// compiler vectorize; the summation order is fixed, so results are
/// reproducible.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let tail = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Row-major `(m x k) * (n x k)^T`.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

fn rank4(x: &DenseTensor<impl Element>) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => dim_err(format!("expected a rank-4 C x T x H x W tensor, got {:?}", x.shape())),
    }
}

/// `C x T x H x W` → `c x T x h x w x (C/c) x (H/h) x (W/w)`.
pub fn patch_partition<T: Element>(x: &DenseTensor<T>, p: PatchSpec) -> Result<DenseTensor<T>> {
    let [cc, tt, hh, ww] = rank4(x)?;
    p.validate(cc, hh, ww)?;
    let (pc, ph, pw) = (cc / p.c, hh / p.h, ww / p.w);
    // View C as (c, pc), H as (h, ph), W as (w, pw) and permute.
    let view = x.reshape(&[p.c, pc, tt, p.h, ph, p.w, pw])?;
    view.permute(&[0, 2, 3, 5, 1, 4, 6])
}

/// Inverse of [`patch_partition`].
pub fn patch_merge<T: Element>(xp: &DenseTensor<T>, p: PatchSpec) -> Result<DenseTensor<T>> {
    let s = xp.shape();
    if s.len() != 7 || s[0] != p.c || s[2] != p.h || s[3] != p.w {
        return dim_err(format!("shape {s:?} is not a partition under {p:?}"));
    }
    let (tt, pc, ph, pw) = (s[1], s[4], s[5], s[6]);
    // (c, T, h, w, pc, ph, pw) -> (c, pc, T, h, ph, w, pw)
    let back = xp.permute(&[0, 4, 1, 2, 5, 3, 6])?;
    back.into_reshape(&[p.c * pc, tt, p.h * ph, p.w * pw])
}
