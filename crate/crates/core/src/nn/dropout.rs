//! Inverted dropout; the GRU applies it to the candidate activation only.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Mask of kept/dropped units; kept entries carry the `1/(1−rate)` scale.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Array1<T>> {
    check_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Array1::from_shape_simple_fn(len, || if rate > 0.0 && rng.random::<f64>() < rate { T::zero() } else { keep }))
}

pub fn dropout_masks<T: Real, R: Rng + ?Sized>(steps: usize, width: usize, rate: f64, rng: &mut R) -> Result<Array2<T>> {
    check_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Array2::from_shape_simple_fn((steps, width), || {
        if rate > 0.0 && rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

/// `D(h)`: identity when `training` is false.
pub fn recurrent_dropout_step<T: Real, R: Rng + ?Sized>(
    h_candidate: ArrayView1<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Array1<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(h_candidate.to_owned());
    }
    let mask = dropout_mask::<T, R>(h_candidate.len(), rate, rng)?;
    Ok(&h_candidate * &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = array![0.3f64, -1.0, 2.0];
        assert_eq!(recurrent_dropout_step(h.view(), 0.0, true, &mut rng).unwrap(), h);
        assert_eq!(recurrent_dropout_step(h.view(), 0.5, false, &mut rng).unwrap(), h);
    }

    #[test]
    fn kept_units_are_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = array![1.0f64, 2.0, 3.0, 4.0];
        for _ in 0..200 {
            let out = recurrent_dropout_step(h.view(), 0.5, true, &mut rng).unwrap();
            for (o, i) in out.iter().zip(h.iter()) {
                assert!(*o == 0.0 || *o == 2.0 * i);
            }
        }
    }

    #[test]
    fn rate_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = array![1.0f32];
        assert!(matches!(recurrent_dropout_step(h.view(), 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn unbiased_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = array![0.5f64, -1.5, 3.0];
        let mut acc = Array1::<f64>::zeros(3);
        let n = 10_000;
        for _ in 0..n {
            acc += &recurrent_dropout_step(h.view(), 0.3, true, &mut rng).unwrap();
        }
        acc /= n as f64;
        for (a, b) in acc.iter().zip(h.iter()) {
            assert!((a - b).abs() <= 0.05 * b.abs(), "{a} vs {b}");
        }
    }
}
