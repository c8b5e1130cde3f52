//! Central-difference gradient checking (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x`. With
/// `max_coords`, a seeded random subset of coordinates is checked instead of
/// all of them.
pub fn finite_difference_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64, max_coords: Option<(usize, u64)>) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let coords: Vec<usize> = match max_coords {
        Some((n, seed)) if n < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, x.len(), n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..x.len()).collect(),
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: coords.len() };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_error(analytic[i], numeric);
        if e > report.max_rel_error || !e.is_finite() {
            report.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
            report.worst_index = i;
        }
    }
    report
}

/// Same check over every tensor of a parameter structure.
pub fn check_params<P, F>(params: &P, analytic: &P, loss: F, eps: f64, max_coords: Option<(usize, u64)>) -> GradCheckReport
where
    P: Params<f64> + Clone,
    F: Fn(&P) -> f64,
{
    let x = params.flat();
    let g = analytic.flat();
    let f = |v: &[f64]| {
        let mut p = params.clone();
        p.set_flat(v);
        loss(&p)
    };
    finite_difference_check(f, &x, &g, eps, max_coords)
}
