//! Distance-aware control stage: a Gaussian gate on the effective distance
//! `d / scale`, calibrated so that the unscaled gate reaches exactly
//! `w_min_dc` at `d_max`.

use ndarray::Array2;

use crate::error::{DrsError, Result};
use crate::semantic::check_shape;
use crate::types::{LogitsMatrix, Stage};

fn check_w_min(name: &str, w: f64) -> Result<()> {
    if w > 0.0 && w < 1.0 {
        Ok(())
    } else {
        Err(DrsError::InvalidHyperParams(format!(
            "{name} must lie strictly in (0,1), got {w}"
        )))
    }
}

/// `sigma0 = d_max / sqrt(-2 ln w_min_dc)`.
pub fn calibrate_sigma0(d_max: usize, w_min_dc: f64) -> Result<f64> {
    check_w_min("w_min_dc", w_min_dc)?;
    if d_max == 0 {
        return Err(DrsError::Domain("d_max must be >= 1".into()));
    }
    Ok(d_max as f64 / (-2.0 * w_min_dc.ln()).sqrt())
}

/// `d / scale`. The scale must already be clamped into `(0, 1]`.
pub fn effective_distance(d: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(DrsError::Domain(format!("scale {scale} outside (0, 1]")));
    }
    if !(d >= 0.0) {
        return Err(DrsError::Domain(format!("distance {d} is negative")));
    }
    Ok(d / scale)
}

/// `exp(-(d / (scale * sigma0))^2 / 2)`.
pub fn dc_weight(d: f64, scale: f64, sigma0: f64) -> f64 {
    let z = d / scale / sigma0;
    (-0.5 * z * z).exp()
}

/// Analytic `d/dd` of [`dc_weight`].
pub fn dc_weight_derivative(d: f64, scale: f64, sigma0: f64) -> f64 {
    let s = scale * sigma0;
    -dc_weight(d, scale, sigma0) * d / (s * s)
}

/// Gate for every pair, with `|i - j|` as the distance between query row `i`
/// and key column `j`.
pub fn dc_weight_map(scale: &Array2<f64>, sigma0: f64) -> Array2<f64> {
    Array2::from_shape_fn(scale.dim(), |(i, j)| {
        dc_weight(i.abs_diff(j) as f64, scale[[i, j]], sigma0)
    })
}

/// `lambda_dc * A * r_dc`.
pub fn dc_logits(base: &LogitsMatrix, r_dc: &Array2<f64>, lambda_dc: f64) -> Result<LogitsMatrix> {
    check_shape(base.values(), r_dc)?;
    let values = ndarray::Zip::from(base.values())
        .and(r_dc)
        .map_collect(|&a, &r| lambda_dc * a * r);
    LogitsMatrix::new(values, Stage::Dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sigma0_reference_values() {
        let s = calibrate_sigma0(100, 0.01).unwrap();
        assert!((s - 32.9505).abs() < 1e-3);
        let s = calibrate_sigma0(1, (-0.5f64).exp()).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigma0_rejects_bad_inputs() {
        assert!(calibrate_sigma0(10, 1.0).is_err());
        assert!(calibrate_sigma0(10, 0.0).is_err());
        assert!(calibrate_sigma0(0, 0.5).is_err());
    }

    #[test]
    fn effective_distance_cases() {
        assert_eq!(effective_distance(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(effective_distance(10.0, 1.0).unwrap(), 10.0);
        assert_eq!(effective_distance(10.0, 0.5).unwrap(), 20.0);
        assert!(effective_distance(10.0, 0.0).is_err());
    }

    #[test]
    fn weight_reference_values() {
        let sigma0 = calibrate_sigma0(100, 0.01).unwrap();
        assert_eq!(dc_weight(0.0, 0.7, sigma0), 1.0);
        assert!((dc_weight(sigma0, 1.0, sigma0) - 0.6065306597126334).abs() < 1e-5);
        assert!((dc_weight(100.0, 1.0, sigma0) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn logits_cases() {
        let a = LogitsMatrix::new(array![[1.0, -2.0], [0.5, 3.0]], Stage::Base).unwrap();
        let zero = dc_logits(&a, &Array2::from_elem((2, 2), 0.3), 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let same = dc_logits(&a, &Array2::ones((2, 2)), 1.0).unwrap();
        assert_eq!(same.values(), a.values());
        let half = dc_logits(&a, &Array2::from_elem((2, 2), 0.5), 1.0).unwrap();
        assert_eq!(half.values()[[0, 1]], -1.0);
        assert!(dc_logits(&a, &Array2::ones((1, 2)), 1.0).is_err());
    }

    #[test]
    fn weight_map_diagonal_is_one() {
        let scale = Array2::from_elem((4, 4), 0.2);
        let r = dc_weight_map(&scale, 1.5);
        for i in 0..4 {
            assert_eq!(r[[i, i]], 1.0);
        }
    }

    proptest! {
        #[test]
        fn plug_back(d_max in 1usize..5000, w in 0.001f64..0.999) {
            let s = calibrate_sigma0(d_max, w).unwrap();
            prop_assert!((dc_weight(d_max as f64, 1.0, s) - w).abs() < 1e-9);
        }

        #[test]
        fn strictly_decreasing_in_distance(
            d1 in 0.0f64..200.0, gap in 0.01f64..50.0, scale in 0.05f64..=1.0, sigma in 5.0f64..100.0
        ) {
            // beyond ~35 sigma both values underflow to zero
            prop_assume!((d1 + gap) / (scale * sigma) < 35.0);
            prop_assert!(dc_weight(d1, scale, sigma) > dc_weight(d1 + gap, scale, sigma));
        }

        #[test]
        fn increasing_in_scale(d in 0.5f64..100.0, s1 in 0.01f64..1.0, s2 in 0.01f64..=1.0, sigma in 5.0f64..100.0) {
            prop_assume!(s1 < s2);
            prop_assert!(dc_weight(d, s2, sigma) >= dc_weight(d, s1, sigma));
        }

        #[test]
        fn lower_bound_on_range(d_max in 1usize..4096, w in 0.001f64..0.999, t in 0.0f64..=1.0) {
            let s = calibrate_sigma0(d_max, w).unwrap();
            let d = (t * d_max as f64).round();
            prop_assert!(dc_weight(d, 1.0, s) >= w - 1e-12);
        }
    }
}
