//! Self-checks of the adaptive convolution against the integer-rate
//! reference, plus impulse and delta-kernel probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adc::{adaptive_conv, adc_forward_with, AdcParams, KernelPath};
use crate::drm::DilationRates;
use crate::error::{AdcError, Result};
use crate::reference::{dilated_conv_forward, receptive_field_area, ConvSpec};
use crate::tensor::{Matrix, Tensor4};

pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCheck {
    pub rate: usize,
    pub path: KernelPath,
    pub max_abs_diff: f64,
}

impl RateCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < ORACLE_TOL
    }
}

/// ADC layer whose DRM is rigged to output `rate` for every group.
pub fn rigged_layer(c_in: usize, c_out: usize, groups: usize, rate: f64, rng: &mut impl Rng) -> Result<AdcParams> {
    let mut p = AdcParams::new(c_in, c_out, 3, groups, rng)?;
    p.drm.w2 = Matrix::zeros(p.drm.hidden(), groups);
    p.drm.b2 = vec![rate; groups];
    Ok(p)
}

/// Full ADC forward (DRM included) with rigged integer rates against the
/// reference dilated convolution.
pub fn integer_rate_check(rate: usize, path: KernelPath, seed: u64) -> Result<RateCheck> {
    if rate == 0 {
        return Err(AdcError::BadRate(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::random_uniform([2, 4, 11, 10], -1.0, 1.0, &mut rng);
    let params = rigged_layer(4, 3, 2, rate as f64, &mut rng)?;
    let (y, _) = adc_forward_with(&x, &params, path)?;
    let reference = dilated_conv_forward(&x, &params.weight, &ConvSpec::new(3, rate, 4, 3)?)?;
    Ok(RateCheck {
        rate,
        path,
        max_abs_diff: y.max_abs_diff(&reference)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Footprint {
    pub rate: f64,
    /// Output rows (equally, columns) that respond to a centered impulse.
    pub support: Vec<usize>,
    pub bounding_side: usize,
    pub mass: f64,
    pub formula_area: f64,
}

/// Response of a 3×3 all-ones kernel at `rate` to a unit impulse in the
/// middle of a plane large enough to hold it.
pub fn impulse_footprint(rate: f64) -> Result<Footprint> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(AdcError::BadRate(rate));
    }
    let mid = rate.ceil() as usize + 3;
    let size = 2 * mid + 1;
    let x = Tensor4::from_fn([1, 1, size, size], |_, _, i, j| if i == mid && j == mid { 1.0 } else { 0.0 });
    let weight = Tensor4::filled([1, 1, 3, 3], 1.0);
    let y = adaptive_conv(&x, &weight, &DilationRates::constant(1, 1, rate)?, KernelPath::Naive)?;
    let support: Vec<usize> = (0..size).filter(|&i| (0..size).any(|j| y.get(0, 0, i, j) != 0.0)).collect();
    let bounding_side = match (support.first(), support.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    };
    Ok(Footprint {
        rate,
        support,
        bounding_side,
        mass: y.sum(),
        formula_area: receptive_field_area(3, rate)?,
    })
}

/// Max deviation from the input of a layer whose kernel only has a unit
/// center tap on the diagonal, at random fractional rates.
pub fn delta_kernel_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::random_uniform([2, 4, 9, 9], -1.0, 1.0, &mut rng);
    let weight = Tensor4::from_fn([4, 4, 3, 3], |co, c, a, b| if co == c && a == 1 && b == 1 { 1.0 } else { 0.0 });
    let rates = DilationRates::new(Matrix::random_uniform(2, 4, 0.5, 3.5, &mut rng))?;
    let mut worst: f64 = 0.0;
    for path in [KernelPath::Naive, KernelPath::Blocked] {
        worst = worst.max(adaptive_conv(&x, &weight, &rates, path)?.max_abs_diff(&x)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_rates_pass() {
        for rate in 1..=3 {
            for path in [KernelPath::Naive, KernelPath::Blocked] {
                assert!(integer_rate_check(rate, path, 0).unwrap().passed());
            }
        }
    }

    #[test]
    fn footprint_at_two_and_a_half() {
        let f = impulse_footprint(2.5).unwrap();
        let mid = 6;
        assert_eq!(f.support, vec![mid - 3, mid - 2, mid, mid + 2, mid + 3]);
        assert_eq!(f.bounding_side, 7);
        assert!((f.mass - 9.0).abs() < 1e-12);
        assert_eq!(f.formula_area, 36.0);
    }

    #[test]
    fn footprint_at_rate_one_is_dense() {
        let f = impulse_footprint(1.0).unwrap();
        assert_eq!(f.support.len(), 3);
        assert_eq!(f.formula_area, 9.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        assert_eq!(delta_kernel_check(3).unwrap(), 0.0);
    }
}
