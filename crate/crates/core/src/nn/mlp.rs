//! Two-layer prediction head: `u = W2 · ReLU(W1 · s + b1) + b2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::linalg::{gemm_acc, gemm_tn_acc};
use super::params::{init_uniform, Params};
use crate::error::{ensure_shape, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHeadParams<T: Real> {
    /// `[hidden × input]`
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// `[output × hidden]`
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> MlpHeadParams<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        MlpHeadParams {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let w1 = init_uniform::<T, _>(&[hidden, input], input, rng);
        let w2 = init_uniform::<T, _>(&[output, hidden], hidden, rng);
        MlpHeadParams {
            w1: w1.into_dimensionality().expect("rank 2"),
            b1: Array1::zeros(hidden),
            w2: w2.into_dimensionality().expect("rank 2"),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }
}

impl<T: Real> Params<T> for MlpHeadParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("w1".to_string(), self.w1.view().into_dyn()),
            ("b1".to_string(), self.b1.view().into_dyn()),
            ("w2".to_string(), self.w2.view().into_dyn()),
            ("b2".to_string(), self.b2.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("w1".to_string(), self.w1.view_mut().into_dyn()),
            ("b1".to_string(), self.b1.view_mut().into_dyn()),
            ("w2".to_string(), self.w2.view_mut().into_dyn()),
            ("b2".to_string(), self.b2.view_mut().into_dyn()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache<T: Real> {
    input: Array2<T>,
    pre: Array2<T>,
    hidden: Array2<T>,
}

/// Applies the head to every row of `s: [N × input]`.
pub fn mlp_forward<T: Real>(s: ArrayView2<T>, p: &MlpHeadParams<T>) -> Result<(Array2<T>, MlpCache<T>)> {
    ensure_shape(s.ncols() == p.input_dim(), || {
        format!("head input has {} features, expected {}", s.ncols(), p.input_dim())
    })?;
    let w1t = p.w1.t().as_standard_layout().into_owned();
    let mut pre = Array2::zeros((s.nrows(), p.w1.nrows()));
    gemm_acc(s, w1t.view(), pre.view_mut());
    pre += &p.b1;
    let hidden = pre.mapv(Real::relu);
    let w2t = p.w2.t().as_standard_layout().into_owned();
    let mut out = Array2::zeros((s.nrows(), p.output_dim()));
    gemm_acc(hidden.view(), w2t.view(), out.view_mut());
    out += &p.b2;
    Ok((out, MlpCache { input: s.to_owned(), pre, hidden }))
}

pub fn mlp_backward<T: Real>(
    du: ArrayView2<T>,
    p: &MlpHeadParams<T>,
    cache: &MlpCache<T>,
    grads: &mut MlpHeadParams<T>,
) -> Array2<T> {
    gemm_tn_acc(du, cache.hidden.view(), grads.w2.view_mut());
    grads.b2 += &du.sum_axis(Axis(0));
    let mut dpre = Array2::zeros(cache.pre.dim());
    gemm_acc(du, p.w2.view(), dpre.view_mut());
    dpre.zip_mut_with(&cache.pre, |d, &z| {
        if z <= T::zero() {
            *d = T::zero();
        }
    });
    gemm_tn_acc(dpre.view(), cache.input.view(), grads.w1.view_mut());
    grads.b1 += &dpre.sum_axis(Axis(0));
    let mut ds = Array2::zeros(cache.input.dim());
    gemm_acc(dpre.view(), p.w1.view(), ds.view_mut());
    ds
}

/// Single-vector form of the head.
pub fn mlp_head<T: Real>(s: ArrayView1<T>, p: &MlpHeadParams<T>) -> Result<Array1<T>> {
    let (u, _) = mlp_forward(s.insert_axis(Axis(0)), p)?;
    Ok(u.row(0).to_owned())
}
