//! 4-way tensor storage and the multilinear kernels used by the solvers:
//! mode unfolding, MTTKRP, CP reconstruction, and masked projection.
//!
//! Storage linearization: element (i, j, k, s) lives at offset
//! `i + I*(j + J*(k + K*s))`, i.e. mode-1 fibers are contiguous.
//!
//! Unfolding column order follows the left-to-right Khatri-Rao convention of
//! [`crate::matrix::khatri_rao`]: for the mode-n unfolding the remaining modes
//! are listed in ascending order and the last listed mode varies fastest, so
//! that `unfold(reconstruct(θ), 1) == A · khatri_rao([B, C, D])ᵀ` holds
//! exactly (and analogously for modes 2-4).
//!
//! MTTKRP and reconstruction may run data-parallel (feature `parallel`, on by
//! default). Each output element is accumulated by exactly one task in a fixed
//! loop order, so results are bitwise identical to the sequential path for any
//! thread count.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense nonnegative 4-way tensor (location × feature × update-index × GD).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

/// Dense 3-way array (location × feature × GD), used for aggregated counts
/// and marginalized estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

/// CP factor matrices of a rank-F model, one per tensor mode.
/// All entries are kept nonnegative by the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

impl FactorSet {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self> {
        let f = a.cols();
        if b.cols() != f || c.cols() != f || d.cols() != f {
            return Err(Error::arg("factor matrices must share a rank"));
        }
        Ok(FactorSet { a, b, c, d })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.a.rows(), self.b.rows(), self.c.rows(), self.d.rows()]
    }

    pub fn is_nonneg(&self) -> bool {
        self.a.is_nonneg() && self.b.is_nonneg() && self.c.is_nonneg() && self.d.is_nonneg()
    }

    pub fn frob_dist(&self, other: &FactorSet) -> f64 {
        (self.a.frob_dist(&other.a).powi(2)
            + self.b.frob_dist(&other.b).powi(2)
            + self.c.frob_dist(&other.c).powi(2)
            + self.d.frob_dist(&other.d).powi(2))
        .sqrt()
    }
}

/// Which side of an observation mask to keep in [`project_mask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSide {
    Inside,
    Outside,
}

/// Observation mask Ω over a 4-way tensor.
///
/// The masks arising from loading-date windows depend only on (k, s), stored
/// as a per-(k, s) bitmap that applies to every (i, j). A dense per-entry
/// variant is kept for robustness tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    dims: [usize; 4],
    kind: MaskKind,
}

#[derive(Debug, Clone, PartialEq)]
enum MaskKind {
    /// bitmap indexed by k + K*s
    PerAge(Vec<bool>),
    /// bitmap in tensor linearization order
    Dense(Vec<bool>),
}

impl ObservationMask {
    pub fn full(dims: [usize; 4]) -> Self {
        ObservationMask {
            dims,
            kind: MaskKind::PerAge(vec![true; dims[2] * dims[3]]),
        }
    }

    pub fn empty(dims: [usize; 4]) -> Self {
        ObservationMask {
            dims,
            kind: MaskKind::PerAge(vec![false; dims[2] * dims[3]]),
        }
    }

    /// Mask observing, for each GD slab s, the first `counts[s]` update slots.
    pub fn from_age_counts(dims: [usize; 4], counts: &[usize]) -> Result<Self> {
        let [_, _, k_dim, s_dim] = dims;
        if counts.len() != s_dim {
            return Err(Error::arg("age count length must equal S"));
        }
        let mut bits = vec![false; k_dim * s_dim];
        for (s, &n) in counts.iter().enumerate() {
            for k in 0..n.min(k_dim) {
                bits[k + k_dim * s] = true;
            }
        }
        Ok(ObservationMask {
            dims,
            kind: MaskKind::PerAge(bits),
        })
    }

    pub fn from_per_age(dims: [usize; 4], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims[2] * dims[3] {
            return Err(Error::arg("per-age bitmap length must equal K*S"));
        }
        Ok(ObservationMask {
            dims,
            kind: MaskKind::PerAge(bits),
        })
    }

    pub fn from_dense(dims: [usize; 4], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() {
            return Err(Error::arg("dense bitmap length must equal I*J*K*S"));
        }
        Ok(ObservationMask {
            dims,
            kind: MaskKind::Dense(bits),
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize, k: usize, s: usize) -> bool {
        match &self.kind {
            MaskKind::PerAge(bits) => bits[k + self.dims[2] * s],
            MaskKind::Dense(bits) => {
                let [i_dim, j_dim, k_dim, _] = self.dims;
                bits[i + i_dim * (j + j_dim * (k + k_dim * s))]
            }
        }
    }

    /// True when slab s is observed at every (i, j, k).
    pub fn slab_fully_observed(&self, s: usize) -> bool {
        let [i_dim, j_dim, k_dim, _] = self.dims;
        match &self.kind {
            MaskKind::PerAge(bits) => (0..k_dim).all(|k| bits[k + k_dim * s]),
            MaskKind::Dense(_) => (0..k_dim).all(|k| {
                (0..j_dim).all(|j| (0..i_dim).all(|i| self.is_observed(i, j, k, s)))
            }),
        }
    }

    pub fn complement(&self) -> ObservationMask {
        let kind = match &self.kind {
            MaskKind::PerAge(bits) => MaskKind::PerAge(bits.iter().map(|b| !b).collect()),
            MaskKind::Dense(bits) => MaskKind::Dense(bits.iter().map(|b| !b).collect()),
        };
        ObservationMask {
            dims: self.dims,
            kind,
        }
    }

    pub fn observed_count(&self) -> usize {
        let [i_dim, j_dim, ..] = self.dims;
        match &self.kind {
            MaskKind::PerAge(bits) => i_dim * j_dim * bits.iter().filter(|b| **b).count(),
            MaskKind::Dense(bits) => bits.iter().filter(|b| **b).count(),
        }
    }

    pub fn is_subset_of(&self, other: &ObservationMask) -> bool {
        let [i_dim, j_dim, k_dim, s_dim] = self.dims;
        for s in 0..s_dim {
            for k in 0..k_dim {
                for j in 0..j_dim {
                    for i in 0..i_dim {
                        if self.is_observed(i, j, k, s) && !other.is_observed(i, j, k, s) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// The per-(k, s) bitmap, when the mask is uniform over (i, j).
    pub fn per_age_bits(&self) -> Option<&[bool]> {
        match &self.kind {
            MaskKind::PerAge(bits) => Some(bits),
            MaskKind::Dense(_) => None,
        }
    }
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::arg(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("tensor entries must be finite"));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize, s: usize) -> usize {
        let [i_dim, j_dim, k_dim, _] = self.dims;
        i + i_dim * (j + j_dim * (k + k_dim * s))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, s: usize) -> f64 {
        self.data[self.index(i, j, k, s)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, s: usize, v: f64) {
        let idx = self.index(i, j, k, s);
        self.data[idx] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, k: usize, s: usize, v: f64) {
        let idx = self.index(i, j, k, s);
        self.data[idx] += v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The contiguous mode-4 slab for GD s (length I*J*K).
    pub fn slab(&self, s: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        &self.data[s * n..(s + 1) * n]
    }

    pub fn slab_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        &mut self.data[s * n..(s + 1) * n]
    }

    /// Scales every entry of slab s.
    pub fn scale_slab(&mut self, s: usize, w: f64) {
        for v in self.slab_mut(s) {
            *v *= w;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frob_dist(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Sums over the update-index mode: Ẑ(i,j,s) = Σ_k X(i,j,k,s).
    pub fn marginalize_updates(&self) -> Tensor3 {
        let [i_dim, j_dim, k_dim, s_dim] = self.dims;
        let mut out = Tensor3::zeros([i_dim, j_dim, s_dim]);
        for s in 0..s_dim {
            for k in 0..k_dim {
                for j in 0..j_dim {
                    let base = self.index(0, j, k, s);
                    let obase = out.index(0, j, s);
                    for i in 0..i_dim {
                        out.data[obase + i] += self.data[base + i];
                    }
                }
            }
        }
        out
    }
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::arg("tensor3 data length does not match dims"));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, s: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * s)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, s: usize) -> f64 {
        self.data[self.index(i, j, s)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, s: usize, v: f64) {
        let idx = self.index(i, j, s);
        self.data[idx] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, s: usize, v: f64) {
        let idx = self.index(i, j, s);
        self.data[idx] += v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn frob_dist(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=4).contains(&mode) {
        return Err(Error::arg(format!("mode must be 1..4, got {mode}")));
    }
    Ok(())
}

/// Mode-n unfolding. Columns are the mode-n fibers; the remaining modes are
/// ordered ascending with the last varying fastest (see module docs).
pub fn unfold(t: &Tensor4, mode: usize) -> Result<Matrix> {
    check_mode(mode)?;
    let [i_dim, j_dim, k_dim, s_dim] = t.dims;
    let (rows, others): (usize, [usize; 3]) = match mode {
        1 => (i_dim, [j_dim, k_dim, s_dim]),
        2 => (j_dim, [i_dim, k_dim, s_dim]),
        3 => (k_dim, [i_dim, j_dim, s_dim]),
        _ => (s_dim, [i_dim, j_dim, k_dim]),
    };
    let cols = others[0] * others[1] * others[2];
    let mut out = Matrix::zeros(rows, cols);
    for s in 0..s_dim {
        for k in 0..k_dim {
            for j in 0..j_dim {
                for i in 0..i_dim {
                    let (r, c) = match mode {
                        1 => (i, (j * k_dim + k) * s_dim + s),
                        2 => (j, (i * k_dim + k) * s_dim + s),
                        3 => (k, (i * j_dim + j) * s_dim + s),
                        _ => (s, (i * j_dim + j) * k_dim + k),
                    };
                    out.set(r, c, t.get(i, j, k, s));
                }
            }
        }
    }
    Ok(out)
}

fn check_mttkrp_dims(t: &Tensor4, factors: [&Matrix; 3], mode: usize) -> Result<usize> {
    check_mode(mode)?;
    let [i_dim, j_dim, k_dim, s_dim] = t.dims;
    let expect: [usize; 3] = match mode {
        1 => [j_dim, k_dim, s_dim],
        2 => [i_dim, k_dim, s_dim],
        3 => [i_dim, j_dim, s_dim],
        _ => [i_dim, j_dim, k_dim],
    };
    for (m, &e) in factors.iter().zip(expect.iter()) {
        if m.rows() != e {
            return Err(Error::arg(format!(
                "mttkrp factor rows {} do not match tensor mode size {e}",
                m.rows()
            )));
        }
    }
    let f = factors[0].cols();
    if factors.iter().any(|m| m.cols() != f) {
        return Err(Error::arg("mttkrp factors must share a rank"));
    }
    Ok(f)
}

/// unfold(T, mode) · khatri_rao(other factors), computed without materializing
/// the Khatri-Rao matrix. `factors` are the non-target modes in ascending
/// mode order. Parallel when the `parallel` feature is enabled.
pub fn mttkrp(t: &Tensor4, factors: [&Matrix; 3], mode: usize) -> Result<Matrix> {
    let f = check_mttkrp_dims(t, factors, mode)?;
    #[cfg(feature = "parallel")]
    {
        Ok(mttkrp_par(t, factors, mode, f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(mttkrp_seq_inner(t, factors, mode, f))
    }
}

/// Sequential MTTKRP, always available (benchmark baseline and `parallel`-off
/// fallback).
pub fn mttkrp_seq(t: &Tensor4, factors: [&Matrix; 3], mode: usize) -> Result<Matrix> {
    let f = check_mttkrp_dims(t, factors, mode)?;
    Ok(mttkrp_seq_inner(t, factors, mode, f))
}

fn target_dim(t: &Tensor4, mode: usize) -> usize {
    t.dims[mode - 1]
}

fn mttkrp_seq_inner(t: &Tensor4, factors: [&Matrix; 3], mode: usize, f: usize) -> Matrix {
    let rows = target_dim(t, mode);
    let mut out = Matrix::zeros(rows, f);
    mttkrp_chunk(out.values_mut(), 0, rows, t, factors, mode, f);
    out
}

#[cfg(feature = "parallel")]
fn mttkrp_par(t: &Tensor4, factors: [&Matrix; 3], mode: usize, f: usize) -> Matrix {
    let rows = target_dim(t, mode);
    let mut out = Matrix::zeros(rows, f);
    let threads = rayon::current_num_threads().max(1);
    let chunk_rows = rows.div_ceil(threads * 4).max(1);
    out.values_mut()
        .par_chunks_mut(chunk_rows * f)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let r0 = ci * chunk_rows;
            let rlen = chunk.len() / f;
            mttkrp_chunk(chunk, r0, rlen, t, factors, mode, f);
        });
    out
}

/// Accumulates MTTKRP output rows [r0, r0+rlen) into `out` (rlen × f,
/// row-major). The accumulation order per output element is fixed and
/// independent of the chunking.
fn mttkrp_chunk(
    out: &mut [f64],
    r0: usize,
    _rlen: usize,
    t: &Tensor4,
    factors: [&Matrix; 3],
    mode: usize,
    f: usize,
) {
    let [i_dim, j_dim, k_dim, s_dim] = t.dims;
    let data = &t.data;
    let mut w = vec![0.0; f];
    match mode {
        1 => {
            // out(i) += T(i,j,k,s) * B(j)∘C(k)∘D(s), order (s,k,j)
            let [b, c, d] = factors;
            let mut wjks = vec![0.0; f];
            for s in 0..s_dim {
                let dr = d.row(s);
                for k in 0..k_dim {
                    let cr = c.row(k);
                    for (x, (&cv, &dv)) in w.iter_mut().zip(cr.iter().zip(dr.iter())) {
                        *x = cv * dv;
                    }
                    for j in 0..j_dim {
                        let br = b.row(j);
                        for (x, (&bv, &wv)) in wjks.iter_mut().zip(br.iter().zip(w.iter())) {
                            *x = bv * wv;
                        }
                        let base = i_dim * (j + j_dim * (k + k_dim * s));
                        for (ii, row) in out.chunks_mut(f).enumerate() {
                            let v = data[base + r0 + ii];
                            if v != 0.0 {
                                for (o, &x) in row.iter_mut().zip(wjks.iter()) {
                                    *o += v * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        2 => {
            // out(j) += T(i,j,k,s) * A(i)∘C(k)∘D(s), order (s,k,i)
            let [a, c, d] = factors;
            for s in 0..s_dim {
                let dr = d.row(s);
                for k in 0..k_dim {
                    let cr = c.row(k);
                    for (x, (&cv, &dv)) in w.iter_mut().zip(cr.iter().zip(dr.iter())) {
                        *x = cv * dv;
                    }
                    for (jj, row) in out.chunks_mut(f).enumerate() {
                        let j = r0 + jj;
                        let base = i_dim * (j + j_dim * (k + k_dim * s));
                        for i in 0..i_dim {
                            let v = data[base + i];
                            if v != 0.0 {
                                let ar = a.row(i);
                                for ((o, &av), &wv) in
                                    row.iter_mut().zip(ar.iter()).zip(w.iter())
                                {
                                    *o += v * av * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            // out(k) += T(i,j,k,s) * A(i)∘B(j)∘D(s), order (s,j,i)
            let [a, b, d] = factors;
            for s in 0..s_dim {
                let dr = d.row(s);
                for j in 0..j_dim {
                    let br = b.row(j);
                    for (x, (&bv, &dv)) in w.iter_mut().zip(br.iter().zip(dr.iter())) {
                        *x = bv * dv;
                    }
                    for (kk, row) in out.chunks_mut(f).enumerate() {
                        let k = r0 + kk;
                        let base = i_dim * (j + j_dim * (k + k_dim * s));
                        for i in 0..i_dim {
                            let v = data[base + i];
                            if v != 0.0 {
                                let ar = a.row(i);
                                for ((o, &av), &wv) in
                                    row.iter_mut().zip(ar.iter()).zip(w.iter())
                                {
                                    *o += v * av * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => {
            // out(s) += T(i,j,k,s) * A(i)∘B(j)∘C(k), order (k,j,i)
            let [a, b, c] = factors;
            for (ss, row) in out.chunks_mut(f).enumerate() {
                let s = r0 + ss;
                for k in 0..k_dim {
                    let cr = c.row(k);
                    for j in 0..j_dim {
                        let br = b.row(j);
                        for (x, (&bv, &cv)) in w.iter_mut().zip(br.iter().zip(cr.iter())) {
                            *x = bv * cv;
                        }
                        let base = i_dim * (j + j_dim * (k + k_dim * s));
                        for i in 0..i_dim {
                            let v = data[base + i];
                            if v != 0.0 {
                                let ar = a.row(i);
                                for ((o, &av), &wv) in
                                    row.iter_mut().zip(ar.iter()).zip(w.iter())
                                {
                                    *o += v * av * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// CP reconstruction: entry (i,j,k,s) = Σ_f A(i,f)B(j,f)C(k,f)D(s,f).
/// Parallel over GD slabs when the `parallel` feature is enabled.
pub fn reconstruct(theta: &FactorSet) -> Tensor4 {
    #[cfg(feature = "parallel")]
    {
        reconstruct_par(theta)
    }
    #[cfg(not(feature = "parallel"))]
    {
        reconstruct_seq(theta)
    }
}

/// Sequential CP reconstruction, always available.
pub fn reconstruct_seq(theta: &FactorSet) -> Tensor4 {
    let dims = theta.dims();
    let mut out = Tensor4::zeros(dims);
    let slab = dims[0] * dims[1] * dims[2];
    for (s, chunk) in out.data.chunks_mut(slab).enumerate() {
        reconstruct_slab(chunk, s, theta);
    }
    out
}

#[cfg(feature = "parallel")]
fn reconstruct_par(theta: &FactorSet) -> Tensor4 {
    let dims = theta.dims();
    let mut out = Tensor4::zeros(dims);
    let slab = dims[0] * dims[1] * dims[2];
    out.data
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(s, chunk)| reconstruct_slab(chunk, s, theta));
    out
}

fn reconstruct_slab(out: &mut [f64], s: usize, theta: &FactorSet) {
    let [i_dim, j_dim, k_dim, _] = theta.dims();
    let f = theta.rank();
    let dr = theta.d.row(s);
    let mut w = vec![0.0; f];
    for k in 0..k_dim {
        let cr = theta.c.row(k);
        for j in 0..j_dim {
            let br = theta.b.row(j);
            for (x, (&bv, (&cv, &dv))) in
                w.iter_mut().zip(br.iter().zip(cr.iter().zip(dr.iter())))
            {
                *x = bv * cv * dv;
            }
            let base = i_dim * (j + j_dim * k);
            for i in 0..i_dim {
                let ar = theta.a.row(i);
                let mut acc = 0.0;
                for (&av, &wv) in ar.iter().zip(w.iter()) {
                    acc += av * wv;
                }
                out[base + i] = acc;
            }
        }
    }
}

/// Keeps entries on the requested side of Ω and zeroes the rest.
/// `project_mask(T, Ω, Inside) + project_mask(T, Ω, Outside) == T` exactly.
pub fn project_mask(t: &Tensor4, mask: &ObservationMask, keep: MaskSide) -> Result<Tensor4> {
    if t.dims != mask.dims() {
        return Err(Error::arg("mask dims do not match tensor dims"));
    }
    let [i_dim, j_dim, k_dim, s_dim] = t.dims;
    let mut out = Tensor4::zeros(t.dims);
    for s in 0..s_dim {
        for k in 0..k_dim {
            for j in 0..j_dim {
                for i in 0..i_dim {
                    let inside = mask.is_observed(i, j, k, s);
                    let keep_it = match keep {
                        MaskSide::Inside => inside,
                        MaskSide::Outside => !inside,
                    };
                    if keep_it {
                        let idx = t.index(i, j, k, s);
                        out.data[idx] = t.data[idx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Coordinate-list sparse 4-way tensor, entries sorted by (s, k, j, i).
#[derive(Debug, Clone)]
pub struct SparseTensor4 {
    dims: [usize; 4],
    coords: Vec<[u32; 4]>,
    vals: Vec<f64>,
}

impl SparseTensor4 {
    pub fn from_dense(t: &Tensor4) -> Self {
        let [i_dim, j_dim, k_dim, s_dim] = t.dims;
        let mut coords = Vec::new();
        let mut vals = Vec::new();
        for s in 0..s_dim {
            for k in 0..k_dim {
                for j in 0..j_dim {
                    for i in 0..i_dim {
                        let v = t.get(i, j, k, s);
                        if v != 0.0 {
                            coords.push([i as u32, j as u32, k as u32, s as u32]);
                            vals.push(v);
                        }
                    }
                }
            }
        }
        SparseTensor4 {
            dims: t.dims,
            coords,
            vals,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Sparse MTTKRP iterating only stored nonzeros.
    pub fn mttkrp(&self, factors: [&Matrix; 3], mode: usize) -> Result<Matrix> {
        // reuse the dense dim checks via a zero tensor header
        let header = Tensor4 {
            dims: self.dims,
            data: Vec::new(),
        };
        let f = check_mttkrp_dims(&header, factors, mode)?;
        let rows = self.dims[mode - 1];
        let mut out = Matrix::zeros(rows, f);
        for (coord, &v) in self.coords.iter().zip(self.vals.iter()) {
            let [i, j, k, s] = coord.map(|x| x as usize);
            let (r, f1, f2, f3) = match mode {
                1 => (i, factors[0].row(j), factors[1].row(k), factors[2].row(s)),
                2 => (j, factors[0].row(i), factors[1].row(k), factors[2].row(s)),
                3 => (k, factors[0].row(i), factors[1].row(j), factors[2].row(s)),
                _ => (s, factors[0].row(i), factors[1].row(j), factors[2].row(k)),
            };
            let dst = out.row_mut(r);
            for (((o, &x1), &x2), &x3) in
                dst.iter_mut().zip(f1.iter()).zip(f2.iter()).zip(f3.iter())
            {
                *o += v * x1 * x2 * x3;
            }
        }
        Ok(out)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"MVTC";
const SNAPSHOT_VERSION: u32 = 1;

/// Writes the binary tensor snapshot: magic "MVTC", version, dims, value
/// count, little-endian f64 values, then an optional per-(k,s) mask bitmap.
pub fn write_snapshot(
    path: &Path,
    t: &Tensor4,
    mask: Option<&ObservationMask>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    for d in t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&(t.data.len() as u64).to_le_bytes())?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    match mask {
        None => w.write_all(&[0u8])?,
        Some(m) => {
            if m.dims() != t.dims {
                return Err(Error::arg("snapshot mask dims do not match tensor"));
            }
            let bits = m.per_age_bits().ok_or_else(|| {
                Error::Snapshot("only per-(k,s) masks can be serialized".into())
            })?;
            w.write_all(&[1u8])?;
            let mut bytes = vec![0u8; bits.len().div_ceil(8)];
            for (idx, &b) in bits.iter().enumerate() {
                if b {
                    bytes[idx / 8] |= 1 << (idx % 8);
                }
            }
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(Tensor4, Option<ObservationMask>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        r.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    if count != dims.iter().product::<usize>() {
        return Err(Error::Snapshot("value count does not match dims".into()));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let t = Tensor4::from_vec(dims, data)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let mask = match flag[0] {
        0 => None,
        1 => {
            let nbits = dims[2] * dims[3];
            let mut bytes = vec![0u8; nbits.div_ceil(8)];
            r.read_exact(&mut bytes)?;
            let bits = (0..nbits)
                .map(|idx| bytes[idx / 8] & (1 << (idx % 8)) != 0)
                .collect();
            Some(ObservationMask::from_per_age(dims, bits)?)
        }
        f => return Err(Error::Snapshot(format!("bad mask flag {f}"))),
    };
    Ok((t, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::khatri_rao;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    fn random_factors(dims: [usize; 4], f: usize, rng: &mut impl Rng) -> FactorSet {
        FactorSet::new(
            Matrix::random_uniform(dims[0], f, rng),
            Matrix::random_uniform(dims[1], f, rng),
            Matrix::random_uniform(dims[2], f, rng),
            Matrix::random_uniform(dims[3], f, rng),
        )
        .unwrap()
    }

    #[test]
    fn unfold_degenerate_dims() {
        let t = Tensor4::from_vec([1, 1, 1, 1], vec![7.5]).unwrap();
        for mode in 1..=4 {
            let m = unfold(&t, mode).unwrap();
            assert_eq!((m.rows(), m.cols()), (1, 1));
            assert_eq!(m.get(0, 0), 7.5);
        }
    }

    #[test]
    fn unfold_unit_vector_outer_product() {
        // e2 ∘ e1 ∘ e1 ∘ e1 with I = 3
        let mut t = Tensor4::zeros([3, 1, 1, 1]);
        t.set(1, 0, 0, 0, 1.0);
        let m = unfold(&t, 1).unwrap();
        for r in 0..3 {
            assert_eq!(m.get(r, 0), if r == 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn unfold_matches_placement_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor([3, 2, 2, 2], &mut rng);
        let m = unfold(&t, 1).unwrap();
        let [_, j_dim, k_dim, s_dim] = t.dims();
        for i in 0..3 {
            for j in 0..j_dim {
                for k in 0..k_dim {
                    for s in 0..s_dim {
                        let col = (j * k_dim + k) * s_dim + s;
                        assert_eq!(m.get(i, col), t.get(i, j, k, s));
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_invalid_mode() {
        let t = Tensor4::zeros([2, 2, 2, 2]);
        assert!(unfold(&t, 0).is_err());
        assert!(unfold(&t, 5).is_err());
    }

    #[test]
    fn unfold_reconstruct_consistency_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_factors([3, 2, 2, 3], 2, &mut rng);
        let t = reconstruct(&theta);
        let cases: [(usize, [&Matrix; 3], &Matrix); 4] = [
            (1, [&theta.b, &theta.c, &theta.d], &theta.a),
            (2, [&theta.a, &theta.c, &theta.d], &theta.b),
            (3, [&theta.a, &theta.b, &theta.d], &theta.c),
            (4, [&theta.a, &theta.b, &theta.c], &theta.d),
        ];
        for (mode, others, target) in cases {
            let kr = khatri_rao(&others).unwrap();
            let expect = target.matmul(&kr.transpose()).unwrap();
            let got = unfold(&t, mode).unwrap();
            assert!(
                got.frob_dist(&expect) <= 1e-12 * expect.frob_norm(),
                "mode {mode}"
            );
        }
    }

    #[test]
    fn reconstruct_all_ones() {
        let ones = |n| Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let theta = FactorSet::new(ones(2), ones(2), ones(2), ones(2)).unwrap();
        let t = reconstruct(&theta);
        assert!(t.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reconstruct_zero_factor_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut theta = random_factors([2, 3, 2, 2], 2, &mut rng);
        theta.c = Matrix::zeros(2, 2);
        let t = reconstruct(&theta);
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = random_factors([3, 2, 2, 3], 2, &mut rng);
        let t = reconstruct(&theta);
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..2 {
                    for s in 0..3 {
                        let mut expect = 0.0;
                        for f in 0..2 {
                            expect += theta.a.get(i, f)
                                * theta.b.get(j, f)
                                * theta.c.get(k, f)
                                * theta.d.get(s, f);
                        }
                        assert!((t.get(i, j, k, s) - expect).abs() <= 1e-12 * expect.abs());
                    }
                }
            }
        }
    }

    #[test]
    fn mttkrp_zero_tensor() {
        let t = Tensor4::zeros([2, 3, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Matrix::random_uniform(3, 2, &mut rng);
        let c = Matrix::random_uniform(2, 2, &mut rng);
        let d = Matrix::random_uniform(2, 2, &mut rng);
        let out = mttkrp(&t, [&b, &c, &d], 1).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mttkrp_all_ones_counts_fibers() {
        let ones = |n| Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let theta = FactorSet::new(ones(2), ones(3), ones(2), ones(4)).unwrap();
        let t = reconstruct(&theta);
        let out = mttkrp(&t, [&theta.b, &theta.c, &theta.d], 1).unwrap();
        // every entry J*K*S = 24
        assert!(out.values().iter().all(|&v| (v - 24.0).abs() < 1e-12));
    }

    #[test]
    fn mttkrp_matches_unfold_khatri_rao_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tensor([3, 2, 2, 3], &mut rng);
        let theta = random_factors([3, 2, 2, 3], 2, &mut rng);
        let cases: [(usize, [&Matrix; 3]); 4] = [
            (1, [&theta.b, &theta.c, &theta.d]),
            (2, [&theta.a, &theta.c, &theta.d]),
            (3, [&theta.a, &theta.b, &theta.d]),
            (4, [&theta.a, &theta.b, &theta.c]),
        ];
        for (mode, others) in cases {
            let got = mttkrp(&t, others, mode).unwrap();
            let kr = khatri_rao(&others).unwrap();
            let expect = unfold(&t, mode).unwrap().matmul(&kr).unwrap();
            assert!(
                got.frob_dist(&expect) <= 1e-12 * expect.frob_norm(),
                "mode {mode}"
            );
        }
    }

    #[test]
    fn mttkrp_dim_mismatch() {
        let t = Tensor4::zeros([2, 3, 2, 2]);
        let m = Matrix::zeros(4, 2);
        let c = Matrix::zeros(2, 2);
        let d = Matrix::zeros(2, 2);
        assert!(mttkrp(&t, [&m, &c, &d], 1).is_err());
    }

    #[test]
    fn sparse_and_dense_mttkrp_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [4, 3, 3, 5];
        let mut t = Tensor4::zeros(dims);
        for v in t.values_mut() {
            if rng.gen::<f64>() < 0.3 {
                *v = rng.gen::<f64>();
            }
        }
        let sp = SparseTensor4::from_dense(&t);
        let theta = random_factors(dims, 3, &mut rng);
        let cases: [(usize, [&Matrix; 3]); 4] = [
            (1, [&theta.b, &theta.c, &theta.d]),
            (2, [&theta.a, &theta.c, &theta.d]),
            (3, [&theta.a, &theta.b, &theta.d]),
            (4, [&theta.a, &theta.b, &theta.c]),
        ];
        for (mode, others) in cases {
            let dense = mttkrp(&t, others, mode).unwrap();
            let sparse = sp.mttkrp(others, mode).unwrap();
            assert!(
                dense.frob_dist(&sparse) <= 1e-12 * dense.frob_norm().max(1.0),
                "mode {mode}"
            );
        }
    }

    #[test]
    fn parallel_and_seq_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = [5, 4, 3, 6];
        let t = random_tensor(dims, &mut rng);
        let theta = random_factors(dims, 3, &mut rng);
        let par = mttkrp(&t, [&theta.b, &theta.c, &theta.d], 1).unwrap();
        let seq = mttkrp_seq(&t, [&theta.b, &theta.c, &theta.d], 1).unwrap();
        assert_eq!(par.values(), seq.values());
        let rp = reconstruct(&theta);
        let rs = reconstruct_seq(&theta);
        assert_eq!(rp.values(), rs.values());
    }

    #[test]
    fn project_mask_trivial_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [3, 2, 2, 4];
        let t = random_tensor(dims, &mut rng);
        let full = ObservationMask::full(dims);
        assert_eq!(project_mask(&t, &full, MaskSide::Inside).unwrap(), t);
        let empty = ObservationMask::empty(dims);
        let z = project_mask(&t, &empty, MaskSide::Inside).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));

        let bits: Vec<bool> = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen::<bool>())
            .collect();
        let mask = ObservationMask::from_dense(dims, bits).unwrap();
        let inside = project_mask(&t, &mask, MaskSide::Inside).unwrap();
        let outside = project_mask(&t, &mask, MaskSide::Outside).unwrap();
        for idx in 0..t.len() {
            // bitwise partition, no arithmetic tolerance
            assert_eq!(inside.values()[idx] + outside.values()[idx], t.values()[idx]);
            assert!(inside.values()[idx] == 0.0 || outside.values()[idx] == 0.0);
        }
    }

    #[test]
    fn marginalize_sums_update_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_tensor([2, 3, 4, 2], &mut rng);
        let z = t.marginalize_updates();
        for i in 0..2 {
            for j in 0..3 {
                for s in 0..2 {
                    let expect: f64 = (0..4).map(|k| t.get(i, j, k, s)).sum();
                    assert!((z.get(i, j, s) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = [3, 2, 3, 4];
        let t = random_tensor(dims, &mut rng);
        let mask = ObservationMask::from_age_counts(dims, &[3, 3, 2, 1]).unwrap();
        let dir = std::env::temp_dir().join("mvtc_snapshot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.mvtc");
        write_snapshot(&path, &t, Some(&mask)).unwrap();
        let (t2, mask2) = read_snapshot(&path).unwrap();
        assert_eq!(t, t2);
        assert_eq!(mask, mask2.unwrap());
    }

    #[test]
    fn mask_complement_partitions_indices() {
        let dims = [2, 2, 3, 4];
        let mask = ObservationMask::from_age_counts(dims, &[3, 3, 2, 1]).unwrap();
        let comp = mask.complement();
        for s in 0..4 {
            for k in 0..3 {
                assert_ne!(mask.is_observed(0, 0, k, s), comp.is_observed(0, 0, k, s));
            }
        }
        assert_eq!(
            mask.observed_count() + comp.observed_count(),
            dims.iter().product::<usize>()
        );
    }
}
