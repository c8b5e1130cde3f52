//! Named parameter tensors.
//!
//! Every trainable structure lists its tensors in a fixed order. Gradients are
//! stored in a value of the same type, so a gradient bundle always mirrors the
//! parameter layout it belongs to.

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::real::Real;

pub trait Params<T: Real> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, &v| *d += v);
        }
    }

    fn scale(&mut self, factor: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Flattened copy of every tensor, in listing order.
    fn flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
    }

    fn set_flat(&mut self, values: &[T]) {
        let mut at = 0;
        for (_, mut t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = values[at];
                at += 1;
            }
        }
        assert_eq!(at, values.len(), "flat length mismatch");
    }
}

pub fn zeros_like<T: Real, P: Params<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill_zero();
    z
}

/// Copies values between precisions when both sides have identical layouts.
pub fn copy_cast<A: Real, B: Real, PA: Params<A>, PB: Params<B>>(src: &PA, dst: &mut PB) {
    let s = src.tensors();
    let d = dst.tensors_mut();
    assert_eq!(s.len(), d.len(), "parameter layouts differ");
    for ((sn, st), (dn, mut dt)) in s.into_iter().zip(d) {
        assert_eq!(sn, dn);
        assert_eq!(st.shape(), dt.shape(), "shape of {sn}");
        dt.zip_mut_with(&st, |d, &v| *d = B::of(v.as_f64()));
    }
}

pub(crate) fn prefixed<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items.into_iter().map(|(n, v)| (format!("{prefix}.{n}"), v)).collect()
}

/// Uniform(−a, a) with `a = 1/√fan_in`.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ndarray::ArrayD<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    ndarray::ArrayD::from_shape_simple_fn(shape.to_vec(), || T::of(rng.random_range(-a..a)))
}
