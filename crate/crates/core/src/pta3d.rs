//! Patch Tanimoto attention over spatio-temporal patches.
//!
//! Query, key and value tensors (`C x T x H x W`) are cut into `c x h x w`
//! patches per time step. Every query patch is compared with every key patch
//! through the Tanimoto similarity, the resulting 8-D map is reduced over the
//! query coordinates, and the reduced map scales the matching value patches.
//!
//! The query may carry a different number of time steps than key and value
//! (cross attention between sensors); the output always has the value's shape.
//!
//! Two paths are provided: an explicit one that materialises the rank-8
//! similarity map ([`similarity_8d`], [`apply_causal_mask`],
//! [`contract_similarity`]) and a fused one ([`attention`],
//! [`attention_grad`]) whose largest temporary is the patch Gram matrix.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{matmul, matmul_nt, patch_merge, patch_partition, DenseTensor, PatchSpec};

/// Squared norms below this are treated as exactly zero.
pub const ZERO_NORM_SQ: f64 = 1e-30;

/// How the 8-D similarity map is reduced over query coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Contraction {
    /// Arithmetic mean over `(c, F, h, w)`.
    Mean,
    /// Weighted sum with a weight per query patch, shape `(c, F, h, w)`.
    LearnedWeight(DenseTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub patch: PatchSpec,
    pub contraction: Contraction,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn mean(patch: PatchSpec) -> Self {
        Self {
            patch,
            contraction: Contraction::Mean,
            causal: false,
        }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_weight(mut self, weight: DenseTensor) -> Self {
        self.contraction = Contraction::LearnedWeight(weight);
        self
    }

    fn query_weights(&self, grid: [usize; 4]) -> Result<Vec<f64>> {
        let n: usize = grid.iter().product();
        match &self.contraction {
            Contraction::Mean => Ok(vec![1.0 / n as f64; n]),
            Contraction::LearnedWeight(w) => {
                if w.shape() != grid {
                    return Err(Error::Config(format!(
                        "contraction weight has shape {:?}, query patch grid is {grid:?}",
                        w.shape()
                    )));
                }
                Ok(w.data().to_vec())
            }
        }
    }
}

/// A similarity map: rank 8 `(c, F, h, w, k, T, l, m)` before contraction,
/// rank 4 `(k, T, l, m)` after.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap(pub DenseTensor);

impl SimilarityMap {
    pub fn values(&self) -> &DenseTensor {
        &self.0
    }
}

/// Tanimoto similarity from the three inner products.
#[inline]
pub fn tanimoto_from_products(qk: f64, qq: f64, kk: f64) -> f64 {
    if qq < ZERO_NORM_SQ && kk < ZERO_NORM_SQ {
        0.0
    } else {
        qk / (qq + kk - qk)
    }
}

/// `<q|k> / (<q|q> + <k|k> - <q|k>)`, and 0 when both vectors vanish.
pub fn tanimoto(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return dim_err(format!("tanimoto of lengths {} and {}", q.len(), k.len()));
    }
    let (mut qk, mut qq, mut kk) = (0.0, 0.0, 0.0);
    for (&a, &b) in q.iter().zip(k) {
        qk += a * b;
        qq += a * a;
        kk += b * b;
    }
    Ok(tanimoto_from_products(qk, qq, kk))
}

/// Shapes of a query/key pair after validation.
#[derive(Clone, Copy, Debug)]
struct Layout {
    channels: usize,
    q_times: usize,
    k_times: usize,
    height: usize,
    width: usize,
    patch: PatchSpec,
}

impl Layout {
    fn new(q: &DenseTensor, k: &DenseTensor, patch: PatchSpec) -> Result<Self> {
        let (qs, ks) = (q.shape(), k.shape());
        if qs.len() != 4 || ks.len() != 4 {
            return dim_err(format!("attention inputs must be rank 4, got {qs:?} and {ks:?}"));
        }
        if qs[0] != ks[0] || qs[2] != ks[2] || qs[3] != ks[3] {
            return dim_err(format!("query {qs:?} and key {ks:?} differ outside the time axis"));
        }
        patch.validate(qs[0], qs[2], qs[3])?;
        Ok(Self {
            channels: qs[0],
            q_times: qs[1],
            k_times: ks[1],
            height: qs[2],
            width: qs[3],
            patch,
        })
    }

    fn q_grid(&self) -> [usize; 4] {
        [self.patch.c, self.q_times, self.patch.h, self.patch.w]
    }

    fn k_grid(&self) -> [usize; 4] {
        [self.patch.c, self.k_times, self.patch.h, self.patch.w]
    }

    fn q_patches(&self) -> usize {
        self.q_grid().iter().product()
    }

    fn k_patches(&self) -> usize {
        self.k_grid().iter().product()
    }

    fn patch_len(&self) -> usize {
        (self.channels / self.patch.c) * (self.height / self.patch.h) * (self.width / self.patch.w)
    }

    /// Time index of a flattened patch index.
    fn time_of(&self, patch: usize, times: usize) -> usize {
        (patch / (self.patch.h * self.patch.w)) % times
    }

    fn mask(&self, causal: bool) -> Option<Vec<bool>> {
        causal.then(|| {
            let (pq, pk) = (self.q_patches(), self.k_patches());
            let mut m = vec![false; pq * pk];
            for i in 0..pq {
                let f = self.time_of(i, self.q_times);
                for j in 0..pk {
                    m[i * pk + j] = f <= self.time_of(j, self.k_times);
                }
            }
            m
        })
    }
}

/// Peak-allocation bookkeeping for the fused attention path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Element count of the largest temporary buffer.
    pub largest: usize,
    /// Sum of element counts of every temporary buffer.
    pub total: usize,
}

impl AllocStats {
    fn record(&mut self, elements: usize) {
        self.largest = self.largest.max(elements);
        self.total += elements;
    }
}

/// Rank-8 Tanimoto similarity between every query and key patch.
pub fn similarity_8d(q: &DenseTensor, k: &DenseTensor, cfg: &AttentionConfig) -> Result<SimilarityMap> {
    let lay = Layout::new(q, k, cfg.patch)?;
    let (qm, km) = (patch_partition(q, cfg.patch)?, patch_partition(k, cfg.patch)?);
    let d = lay.patch_len();
    let (pq, pk) = (lay.q_patches(), lay.k_patches());
    let g = matmul_nt(qm.data(), km.data(), pq, d, pk);
    let nq = row_norms(qm.data(), d);
    let nk = row_norms(km.data(), d);
    let mut data = Vec::with_capacity(pq * pk);
    for i in 0..pq {
        for j in 0..pk {
            data.push(tanimoto_from_products(g[i * pk + j], nq[i], nk[j]));
        }
    }
    let mut shape = lay.q_grid().to_vec();
    shape.extend(lay.k_grid());
    Ok(SimilarityMap(DenseTensor::new(shape, data)?))
}

fn split_rank8(s8: &SimilarityMap) -> Result<([usize; 4], [usize; 4])> {
    match *s8.0.shape() {
        [a, b, c, d, e, f, g, h] => Ok(([a, b, c, d], [e, f, g, h])),
        ref s => dim_err(format!("expected a rank-8 similarity map, got {s:?}")),
    }
}

/// Zeroes entries whose query time exceeds the key time.
pub fn apply_causal_mask(s8: &SimilarityMap) -> Result<SimilarityMap> {
    let ([_, ft, qh, qw], [_, tt, kh, kw]) = split_rank8(s8)?;
    let pk: usize = s8.0.shape()[4..].iter().product();
    let mut out = s8.0.clone();
    for (i, row) in out.data_mut().chunks_mut(pk).enumerate() {
        let f = (i / (qh * qw)) % ft;
        for (j, x) in row.iter_mut().enumerate() {
            if f > (j / (kh * kw)) % tt {
                *x = 0.0;
            }
        }
    }
    Ok(SimilarityMap(out))
}

/// Reduces a rank-8 map over the query coordinates.
pub fn contract_similarity(s8: &SimilarityMap, cfg: &AttentionConfig) -> Result<SimilarityMap> {
    let (qg, kg) = split_rank8(s8)?;
    let w = cfg.query_weights(qg)?;
    let pk: usize = kg.iter().product();
    let mut out = vec![0.0; pk];
    for (row, &wi) in s8.0.data().chunks(pk).zip(&w) {
        for (o, &s) in out.iter_mut().zip(row) {
            *o += wi * s;
        }
    }
    Ok(SimilarityMap(DenseTensor::new(kg.to_vec(), out)?))
}

fn row_norms(m: &[f64], d: usize) -> Vec<f64> {
    m.chunks(d).map(|r| r.iter().map(|x| x * x).sum()).collect()
}

struct Prepared {
    lay: Layout,
    q: DenseTensor,
    k: DenseTensor,
    gram: Vec<f64>,
    nq: Vec<f64>,
    nk: Vec<f64>,
    weights: Vec<f64>,
    mask: Option<Vec<bool>>,
}

fn prepare(q: &DenseTensor, k: &DenseTensor, cfg: &AttentionConfig, stats: &mut AllocStats) -> Result<Prepared> {
    let lay = Layout::new(q, k, cfg.patch)?;
    let weights = cfg.query_weights(lay.q_grid())?;
    let qm = patch_partition(q, cfg.patch)?;
    let km = patch_partition(k, cfg.patch)?;
    stats.record(qm.len());
    stats.record(km.len());
    let d = lay.patch_len();
    let (pq, pk) = (lay.q_patches(), lay.k_patches());
    let gram = matmul_nt(qm.data(), km.data(), pq, d, pk);
    stats.record(gram.len());
    let nq = row_norms(qm.data(), d);
    let nk = row_norms(km.data(), d);
    stats.record(nq.len() + nk.len());
    let mask = lay.mask(cfg.causal);
    if let Some(m) = &mask {
        stats.record(m.len());
    }
    Ok(Prepared {
        lay,
        q: qm,
        k: km,
        gram,
        nq,
        nk,
        weights,
        mask,
    })
}

impl Prepared {
    fn contracted(&self) -> Vec<f64> {
        let pk = self.lay.k_patches();
        let mut out = vec![0.0; pk];
        for (i, (grow, (&nqi, &wi))) in self
            .gram
            .chunks(pk)
            .zip(self.nq.iter().zip(&self.weights))
            .enumerate()
        {
            for j in 0..pk {
                if self.mask.as_ref().is_some_and(|m| !m[i * pk + j]) {
                    continue;
                }
                out[j] += wi * tanimoto_from_products(grow[j], nqi, self.nk[j]);
            }
        }
        out
    }
}

/// Fused computation of the contracted `(k, T, l, m)` similarity.
pub fn contracted_similarity(q: &DenseTensor, k: &DenseTensor, cfg: &AttentionConfig) -> Result<DenseTensor> {
    let prep = prepare(q, k, cfg, &mut AllocStats::default())?;
    DenseTensor::new(prep.lay.k_grid().to_vec(), prep.contracted())
}

/// Patch Tanimoto attention; output has the shape of `v`.
pub fn attention(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor, cfg: &AttentionConfig) -> Result<DenseTensor> {
    attention_with_stats(q, k, v, cfg).map(|(out, _)| out)
}

/// [`attention`] plus the sizes of the temporaries it allocated.
pub fn attention_with_stats(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cfg: &AttentionConfig,
) -> Result<(DenseTensor, AllocStats)> {
    if v.shape() != k.shape() {
        return dim_err(format!("key {:?} and value {:?} shapes differ", k.shape(), v.shape()));
    }
    let mut stats = AllocStats::default();
    let prep = prepare(q, k, cfg, &mut stats)?;
    let sim = prep.contracted();
    stats.record(sim.len());
    let vm = patch_partition(v, cfg.patch)?;
    stats.record(vm.len());
    let scaled = vm.broadcast_mul_trailing(&DenseTensor::new(prep.lay.k_grid().to_vec(), sim)?)?;
    stats.record(scaled.len());
    let out = patch_merge(&scaled, cfg.patch)?;
    stats.record(out.len());
    Ok((out, stats))
}

/// Gradients of `<upstream, attention(q, k, v)>`.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: DenseTensor,
    pub dk: DenseTensor,
    pub dv: DenseTensor,
    /// Present for [`Contraction::LearnedWeight`].
    pub dw: Option<DenseTensor>,
}

/// Reverse-mode gradients of the fused attention. The zero branch of the
/// similarity contributes no gradient.
pub fn attention_grad(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cfg: &AttentionConfig,
    upstream: &DenseTensor,
) -> Result<AttentionGrads> {
    if v.shape() != k.shape() || upstream.shape() != v.shape() {
        return dim_err(format!(
            "key {:?}, value {:?} and upstream {:?} shapes must agree",
            k.shape(),
            v.shape(),
            upstream.shape()
        ));
    }
    let prep = prepare(q, k, cfg, &mut AllocStats::default())?;
    let lay = prep.lay;
    let (pq, pk, d) = (lay.q_patches(), lay.k_patches(), lay.patch_len());
    let sim = prep.contracted();
    let vm = patch_partition(v, cfg.patch)?;
    let gm = patch_partition(upstream, cfg.patch)?;

    // dV_j = s_j g_j and r_j = <g_j, v_j>.
    let mut dv = gm.broadcast_mul_trailing(&DenseTensor::new(lay.k_grid().to_vec(), sim)?)?;
    let r: Vec<f64> = gm
        .data()
        .chunks(d)
        .zip(vm.data().chunks(d))
        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();

    // dS_ij = r_j w_i m_ij; chain through S = a / (nq + nk - a).
    let mut coef_a = vec![0.0; pq * pk];
    let mut row_beta = vec![0.0; pq];
    let mut col_beta = vec![0.0; pk];
    let mut dw = vec![0.0; pq];
    for i in 0..pq {
        for j in 0..pk {
            if prep.mask.as_ref().is_some_and(|m| !m[i * pk + j]) {
                continue;
            }
            let (a, nqi, nkj) = (prep.gram[i * pk + j], prep.nq[i], prep.nk[j]);
            if nqi < ZERO_NORM_SQ && nkj < ZERO_NORM_SQ {
                continue;
            }
            let den = nqi + nkj - a;
            dw[i] += r[j] * a / den;
            let ds = r[j] * prep.weights[i];
            let inv2 = 1.0 / (den * den);
            coef_a[i * pk + j] = ds * (nqi + nkj) * inv2;
            let beta = -ds * a * inv2;
            row_beta[i] += beta;
            col_beta[j] += beta;
        }
    }
    // dQ = A K + 2 diag(rowsum beta) Q;  dK = A^T Q + 2 diag(colsum beta) K.
    let mut dqm = matmul(&coef_a, prep.k.data(), pq, pk, d);
    for (i, row) in dqm.chunks_mut(d).enumerate() {
        let qrow = &prep.q.data()[i * d..(i + 1) * d];
        for (o, &x) in row.iter_mut().zip(qrow) {
            *o += 2.0 * row_beta[i] * x;
        }
    }
    let coef_t = DenseTensor::new(vec![pq, pk], coef_a)?.transpose2()?;
    let mut dkm = matmul(coef_t.data(), prep.q.data(), pk, pq, d);
    for (j, row) in dkm.chunks_mut(d).enumerate() {
        let krow = &prep.k.data()[j * d..(j + 1) * d];
        for (o, &x) in row.iter_mut().zip(krow) {
            *o += 2.0 * col_beta[j] * x;
        }
    }
    let dq = patch_merge(&DenseTensor::new(prep.q.shape().to_vec(), dqm)?, cfg.patch)?;
    let dk = patch_merge(&DenseTensor::new(prep.k.shape().to_vec(), dkm)?, cfg.patch)?;
    dv = patch_merge(&dv, cfg.patch)?;
    let dw = match cfg.contraction {
        Contraction::Mean => None,
        Contraction::LearnedWeight(_) => Some(DenseTensor::new(lay.q_grid().to_vec(), dw)?),
    };
    Ok(AttentionGrads { dq, dk, dv, dw })
}
