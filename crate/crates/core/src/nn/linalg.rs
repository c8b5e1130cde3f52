//! Dense kernels on row-major ndarray storage.
//!
//! Every product sums over the shared dimension in ascending order, so a row
//! of the result is bit-identical no matter how many other rows are computed
//! alongside it. Streaming inference relies on that to reproduce offline
//! scores exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2};

use crate::real::Real;

fn contiguous<'a, T: Real>(a: &'a ArrayView2<'_, T>) -> std::borrow::Cow<'a, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// `c += a · b` with `a: [m × k]`, `b: [k × n]`.
pub fn gemm_acc<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, mut c: ArrayViewMut2<T>) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.dim(), (m, n), "output shape");
    let a = contiguous(&a);
    let b = contiguous(&b);
    let c = c.as_slice_mut().expect("output must be standard layout");
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    gemm_acc(a, b, c.view_mut());
    c
}

/// `c += aᵀ · b` with `a: [k × m]`, `b: [k × n]`.
pub fn gemm_tn_acc<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, mut c: ArrayViewMut2<T>) {
    let (k, m) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.dim(), (m, n), "output shape");
    let a = contiguous(&a);
    let b = contiguous(&b);
    let c = c.as_slice_mut().expect("output must be standard layout");
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `a · bᵀ` with `a: [m × k]`, `b: [n × k]`.
pub fn matmul_nt<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let bt = b.t().as_standard_layout().into_owned();
    matmul(a, bt.view())
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn dotv<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => dot(x, y),
        _ => a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum(),
    }
}

/// `w · x` for `w: [o × i]`.
pub fn matvec<T: Real>(w: ArrayView2<T>, x: ArrayView1<T>) -> Array1<T> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    w.rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(r) => dot(r, xs),
            None => row.iter().zip(xs).map(|(&a, &b)| a * b).sum(),
        })
        .collect()
}

/// `out += wᵀ · y` for `w: [o × i]`.
pub fn matvec_t_acc<T: Real>(w: ArrayView2<T>, y: ArrayView1<T>, out: &mut Array1<T>) {
    let out = out.as_slice_mut().expect("standard layout");
    for (row, &yv) in w.rows().into_iter().zip(y.iter()) {
        if yv == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row.iter()) {
            *o += yv * wv;
        }
    }
}

/// `g += y ⊗ x` (outer product accumulate) for `g: [o × i]`.
pub fn outer_acc<T: Real>(g: &mut Array2<T>, y: ArrayView1<T>, x: ArrayView1<T>) {
    for (mut row, &yv) in g.rows_mut().into_iter().zip(y.iter()) {
        if yv == T::zero() {
            continue;
        }
        row.zip_mut_with(&x, |gv, &xv| *gv += yv * xv);
    }
}
