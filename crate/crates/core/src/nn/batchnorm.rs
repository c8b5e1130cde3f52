//! Batch normalization with statistics kept separately for every timestep.
//!
//! Padded entries never contribute to a mean, a variance, or a running
//! statistic; in the padded `[B × T × d]` form they come back as zeros.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};

use super::params::Params;
use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learned per-feature affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Real> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(dim: usize) -> Self {
        BatchNormParams { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }
}

impl<T: Real> Params<T> for BatchNormParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("gamma".to_string(), self.gamma.view().into_dyn()),
            ("beta".to_string(), self.beta.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("gamma".to_string(), self.gamma.view_mut().into_dyn()),
            ("beta".to_string(), self.beta.view_mut().into_dyn()),
        ]
    }
}

/// Running mean/variance, one row per timestep. Timesteps past the last
/// stored row reuse the last row at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Array2<T>,
    pub var: Array2<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(dim: usize) -> Self {
        RunningStats { mean: Array2::zeros((0, dim)), var: Array2::zeros((0, dim)) }
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn steps(&self) -> usize {
        self.mean.nrows()
    }

    fn ensure_steps(&mut self, steps: usize) {
        let have = self.steps();
        if steps <= have {
            return;
        }
        let d = self.dim();
        let mut mean = Array2::zeros((steps, d));
        let mut var = Array2::ones((steps, d));
        mean.slice_mut(ndarray::s![..have, ..]).assign(&self.mean);
        var.slice_mut(ndarray::s![..have, ..]).assign(&self.var);
        self.mean = mean;
        self.var = var;
    }

    fn row(&self, step: usize) -> (Array1<T>, Array1<T>) {
        if self.steps() == 0 {
            return (Array1::zeros(self.dim()), Array1::ones(self.dim()));
        }
        let r = step.min(self.steps() - 1);
        (self.mean.row(r).to_owned(), self.var.row(r).to_owned())
    }

    /// Folds batch statistics in; timesteps without valid entries are skipped.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        self.ensure_steps(batch.count.len());
        let mom = T::of(BN_MOMENTUM);
        let rest = T::one() - mom;
        for (t, &c) in batch.count.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for j in 0..self.dim() {
                self.mean[[t, j]] = mom * self.mean[[t, j]] + rest * batch.mean[[t, j]];
                self.var[[t, j]] = mom * self.var[[t, j]] + rest * batch.var[[t, j]];
            }
        }
    }
}

/// Per-timestep statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Array2<T>,
    pub var: Array2<T>,
    pub count: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T: Real> {
    xhat: Array2<T>,
    inv_std: Array2<T>,
    step_of: Vec<usize>,
    count: Vec<usize>,
    mode: Mode,
}

fn batch_stats<T: Real>(x: ArrayView2<T>, step_of: &[usize]) -> BatchStats<T> {
    let d = x.ncols();
    let steps = step_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut mean = Array2::<T>::zeros((steps, d));
    let mut var = Array2::<T>::zeros((steps, d));
    let mut count = vec![0usize; steps];
    for (row, &t) in x.rows().into_iter().zip(step_of) {
        count[t] += 1;
        let mut m = mean.row_mut(t);
        m += &row;
    }
    for t in 0..steps {
        if count[t] > 0 {
            let inv = T::one() / T::of(count[t] as f64);
            mean.row_mut(t).mapv_inplace(|v| v * inv);
        }
    }
    for (row, &t) in x.rows().into_iter().zip(step_of) {
        for j in 0..d {
            let c = row[j] - mean[[t, j]];
            var[[t, j]] += c * c;
        }
    }
    for t in 0..steps {
        if count[t] > 0 {
            let inv = T::one() / T::of(count[t] as f64);
            var.row_mut(t).mapv_inplace(|v| v * inv);
        }
    }
    BatchStats { mean, var, count }
}

/// Normalizes packed rows `x: [N × d]`; `step_of[i]` is row `i`'s timestep.
/// In training mode the returned batch statistics should be folded into the
/// running statistics by the caller.
pub fn bn_forward<T: Real>(
    x: ArrayView2<T>,
    step_of: &[usize],
    params: &BatchNormParams<T>,
    running: &RunningStats<T>,
    mode: Mode,
) -> (Array2<T>, BnCache<T>, Option<BatchStats<T>>) {
    let (n, d) = x.dim();
    let eps = T::of(BN_EPS);
    let stats = (mode == Mode::Train).then(|| batch_stats(x, step_of));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let t = step_of[i];
        let (mean, var) = match &stats {
            Some(s) => (s.mean.row(t).to_owned(), s.var.row(t).to_owned()),
            None => running.row(t),
        };
        for j in 0..d {
            let is = T::one() / (var[j] + eps).sqrt();
            let xh = (x[[i, j]] - mean[j]) * is;
            inv_std[[i, j]] = is;
            xhat[[i, j]] = xh;
            y[[i, j]] = params.gamma[j] * xh + params.beta[j];
        }
    }
    let count = stats.as_ref().map(|s| s.count.clone()).unwrap_or_default();
    (y, BnCache { xhat, inv_std, step_of: step_of.to_vec(), count, mode }, stats)
}

pub fn bn_backward<T: Real>(
    dy: ArrayView2<T>,
    params: &BatchNormParams<T>,
    cache: &BnCache<T>,
    grads: &mut BatchNormParams<T>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    for i in 0..n {
        for j in 0..d {
            grads.gamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            grads.beta[j] += dy[[i, j]];
        }
    }
    let mut dx = Array2::zeros((n, d));
    match cache.mode {
        Mode::Eval => {
            for i in 0..n {
                for j in 0..d {
                    dx[[i, j]] = dy[[i, j]] * params.gamma[j] * cache.inv_std[[i, j]];
                }
            }
        }
        Mode::Train => {
            let steps = cache.count.len();
            let mut sum_dxh = Array2::<T>::zeros((steps, d));
            let mut sum_dxh_xh = Array2::<T>::zeros((steps, d));
            for i in 0..n {
                let t = cache.step_of[i];
                for j in 0..d {
                    let dxh = dy[[i, j]] * params.gamma[j];
                    sum_dxh[[t, j]] += dxh;
                    sum_dxh_xh[[t, j]] += dxh * cache.xhat[[i, j]];
                }
            }
            for i in 0..n {
                let t = cache.step_of[i];
                let m = T::of(cache.count[t] as f64);
                for j in 0..d {
                    let dxh = dy[[i, j]] * params.gamma[j];
                    dx[[i, j]] = cache.inv_std[[i, j]] / m
                        * (m * dxh - sum_dxh[[t, j]] - cache.xhat[[i, j]] * sum_dxh_xh[[t, j]]);
                }
            }
        }
    }
    dx
}

/// Padded form: `batch: [B × T × d]`, `mask[b, t]` true for real entries.
/// Running statistics are updated from valid entries in training mode.
pub fn masked_temporal_batchnorm<T: Real>(
    batch: ArrayView3<T>,
    mask: ArrayView2<bool>,
    stats: &mut RunningStats<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Array3<T> {
    let (b, steps, d) = batch.dim();
    let mut rows = Vec::new();
    let mut step_of = Vec::new();
    let mut index = Vec::new();
    for i in 0..b {
        for t in 0..steps {
            if mask[[i, t]] {
                rows.extend(batch.slice(ndarray::s![i, t, ..]).iter().copied());
                step_of.push(t);
                index.push((i, t));
            }
        }
    }
    let mut out = Array3::zeros((b, steps, d));
    if index.is_empty() {
        return out;
    }
    let x = Array2::from_shape_vec((index.len(), d), rows).expect("row count");
    let (y, _, batch_stats) = bn_forward(x.view(), &step_of, params, stats, mode);
    if let Some(bs) = batch_stats {
        stats.update(&bs);
    }
    for (r, &(i, t)) in index.iter().enumerate() {
        out.slice_mut(ndarray::s![i, t, ..]).assign(&y.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_timestep_normalizes_to_zero() {
        let x = Array3::from_elem((3, 2, 2), 4.0f64);
        let mask = Array2::from_elem((3, 2), true);
        let mut st = RunningStats::new(2);
        let y = masked_temporal_batchnorm(x.view(), mask.view(), &mut st, &BatchNormParams::new(2), Mode::Train);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_values_hand_computation() {
        let x = array![[[1.0f64]], [[3.0]]];
        let mask = Array2::from_elem((2, 1), true);
        let mut st = RunningStats::new(1);
        let y = masked_temporal_batchnorm(x.view(), mask.view(), &mut st, &BatchNormParams::new(1), Mode::Train);
        let k = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((y[[0, 0, 0]] + k).abs() < 1e-12);
        assert!((y[[1, 0, 0]] - k).abs() < 1e-12);
        // running: 0.9·0 + 0.1·2, 0.9·1 + 0.1·1
        assert!((st.mean[[0, 0]] - 0.2).abs() < 1e-12);
        assert!((st.var[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padded_row_matches_removed_row() {
        let x = array![[[1.0f64, 2.0], [3.0, 0.5]], [[-1.0, 4.0], [2.0, 2.0]], [[9.0, 9.0], [9.0, 9.0]]];
        let mut mask = Array2::from_elem((3, 2), true);
        mask[[2, 0]] = false;
        mask[[2, 1]] = false;
        let mut st_a = RunningStats::new(2);
        let ya = masked_temporal_batchnorm(x.view(), mask.view(), &mut st_a, &BatchNormParams::new(2), Mode::Train);
        let x2 = x.slice(ndarray::s![0..2, .., ..]).to_owned();
        let m2 = Array2::from_elem((2, 2), true);
        let mut st_b = RunningStats::new(2);
        let yb = masked_temporal_batchnorm(x2.view(), m2.view(), &mut st_b, &BatchNormParams::new(2), Mode::Train);
        assert_eq!(ya.slice(ndarray::s![0..2, .., ..]), yb);
        assert!(ya.slice(ndarray::s![2, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(st_a, st_b);
    }

    #[test]
    fn empty_timestep_keeps_running_stats() {
        let x = array![[[1.0f64], [5.0]], [[3.0], [7.0]]];
        let mut mask = Array2::from_elem((2, 2), true);
        mask[[0, 1]] = false;
        mask[[1, 1]] = false;
        let mut st = RunningStats::new(1);
        st.ensure_steps(2);
        st.mean[[1, 0]] = 0.25;
        masked_temporal_batchnorm(x.view(), mask.view(), &mut st, &BatchNormParams::new(1), Mode::Train);
        assert_eq!(st.mean[[1, 0]], 0.25);
        assert_eq!(st.var[[1, 0]], 1.0);
    }
}
