//! Causal dilated 1-D convolution over packed sequences.
//!
//! Several independent sequences are stored back to back in one
//! `[positions × channels]` matrix; a [`Segments`] value records where each
//! starts. Reads before a segment's first position see zeros, so no value
//! ever leaks across segments or from the future.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::linalg::{gemm_acc, gemm_tn_acc, matmul_nt};
use super::params::{init_uniform, Params};
use crate::error::{ensure_shape, Error, Result};
use crate::real::Real;

/// Layout of packed sequences: contiguous, non-empty, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    ranges: Vec<Range<usize>>,
    /// Offset of each position inside its own segment.
    offset: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut ranges = Vec::with_capacity(lengths.len());
        let mut offset = Vec::with_capacity(lengths.iter().sum());
        let mut at = 0;
        for &len in lengths {
            ranges.push(at..at + len);
            offset.extend(0..len);
            at += len;
        }
        Segments { ranges, offset }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn total(&self) -> usize {
        self.offset.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Position of each entry within its segment (the per-timestep index).
    pub fn offsets(&self) -> &[usize] {
        &self.offset
    }

    pub fn max_len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Filters `[k × d_in × d_out]` and a dilation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilterBank<T: Real> {
    pub filters: Array3<T>,
    pub dilation: usize,
}

impl<T: Real> ConvFilterBank<T> {
    pub fn new(filters: Array3<T>, dilation: usize) -> Result<Self> {
        if filters.shape()[0] == 0 {
            return Err(Error::config("filter width k must be at least 1"));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        Ok(ConvFilterBank { filters, dilation })
    }

    pub fn zeros(k: usize, d_in: usize, d_out: usize, dilation: usize) -> Self {
        ConvFilterBank { filters: Array3::zeros((k, d_in, d_out)), dilation }
    }

    pub fn random<R: Rng + ?Sized>(k: usize, d_in: usize, d_out: usize, dilation: usize, rng: &mut R) -> Self {
        let f = init_uniform::<T, _>(&[k, d_in, d_out], k * d_in, rng);
        ConvFilterBank { filters: f.into_dimensionality().expect("rank 3"), dilation }
    }

    pub fn width(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.filters.shape()[2]
    }

    /// Number of past steps (beyond `t` itself) this layer can read.
    pub fn lookback(&self) -> usize {
        (self.width() - 1) * self.dilation
    }

    fn flat(&self) -> ArrayView2<'_, T> {
        let (k, di, dout) = self.filters.dim();
        self.filters.view().into_shape_with_order((k * di, dout)).expect("standard layout filters")
    }
}

impl<T: Real> Params<T> for ConvFilterBank<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("f".to_string(), self.filters.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("f".to_string(), self.filters.view_mut().into_dyn())]
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T: Real> {
    cols: Array2<T>,
}

fn im2col<T: Real>(x: ArrayView2<T>, segs: &Segments, k: usize, dilation: usize) -> Array2<T> {
    let (n, d) = x.dim();
    let mut cols = Array2::zeros((n, k * d));
    for (t, &off) in segs.offsets().iter().enumerate() {
        for j in 0..k {
            let back = dilation * j;
            if back > off {
                break;
            }
            cols.slice_mut(s![t, j * d..(j + 1) * d]).assign(&x.row(t - back));
        }
    }
    cols
}

/// `y_t = Σ_j f_jᵀ x_{t − dilation·j}`, with reads before the segment start
/// treated as zero vectors. Output has one row per input row.
pub fn causal_dilated_conv<T: Real>(
    x: ArrayView2<T>,
    segs: &Segments,
    bank: &ConvFilterBank<T>,
) -> Result<(Array2<T>, ConvCache<T>)> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    ensure_shape(d == bank.in_channels(), || {
        format!("conv input has {d} channels, filters expect {}", bank.in_channels())
    })?;
    ensure_shape(segs.total() == n, || format!("segments cover {} rows, input has {n}", segs.total()))?;
    let cols = im2col(x, segs, bank.width(), bank.dilation);
    let mut y = Array2::zeros((n, bank.out_channels()));
    gemm_acc(cols.view(), bank.flat(), y.view_mut());
    Ok((y, ConvCache { cols }))
}

/// Returns `dx` and accumulates the filter gradient into `grad`.
pub fn causal_dilated_conv_backward<T: Real>(
    dy: ArrayView2<T>,
    segs: &Segments,
    bank: &ConvFilterBank<T>,
    cache: &ConvCache<T>,
    grad: &mut ConvFilterBank<T>,
) -> Array2<T> {
    let (k, d, dout) = bank.filters.dim();
    {
        let mut gflat = grad.filters.view_mut().into_shape_with_order((k * d, dout)).expect("standard layout");
        gemm_tn_acc(cache.cols.view(), dy, gflat.view_mut());
    }
    let dcols = matmul_nt(dy, bank.flat());
    let n = dy.nrows();
    let mut dx = Array2::zeros((n, d));
    for (t, &off) in segs.offsets().iter().enumerate() {
        for j in 0..k {
            let back = bank.dilation * j;
            if back > off {
                break;
            }
            let mut row = dx.row_mut(t - back);
            row += &dcols.slice(s![t, j * d..(j + 1) * d]);
        }
    }
    dx
}
