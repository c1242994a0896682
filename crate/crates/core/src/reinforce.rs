//! Long-range reinforcement stage: a rational-quadratic gate
//! `(1 + d^2 / (2 (sigma_re * scale)^2))^(-alpha)` whose exponent is chosen so
//! the gate equals `w_min_re` at `d_max`.
//!
//! The exponent depends on `sigma_re` and the closed form for `sigma_re`
//! depends on the exponent. [`calibrate_re`] resolves the pair by fixed-point
//! iteration at `scale = 1`, seeded at the Gaussian length scale.

use ndarray::Array2;

use crate::distance::calibrate_sigma0;
use crate::error::{DrsError, Result};
use crate::semantic::check_shape;
use crate::types::{LogitsMatrix, Stage};

/// Boundary residual accepted after calibration.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReCalibration {
    pub sigma_re: f64,
    pub alpha_ref: f64,
    /// Evaluations of the alternating update map.
    pub iterations: usize,
    /// `|r_re(d_max, scale = 1) - w_min_re|` at the returned pair.
    pub residual: f64,
}

/// Exponent that pins the gate to `w_min_re` at `d_max` for the given scale.
pub fn re_alpha(d_max: usize, w_min_re: f64, sigma_re: f64, scale: f64) -> f64 {
    let s = sigma_re * scale;
    let dm = d_max as f64;
    -w_min_re.ln() / (dm * dm / (2.0 * s * s)).ln_1p()
}

/// Closed-form length scale for a given exponent:
/// `d_max / sqrt(2 alpha (w_min_re^(-1/alpha) - 1))`.
pub fn sigma_from_alpha(d_max: usize, w_min_re: f64, alpha: f64) -> f64 {
    let excess = (-w_min_re.ln() / alpha).exp_m1();
    d_max as f64 / (2.0 * alpha * excess).sqrt()
}

pub fn re_weight(d: f64, scale: f64, sigma_re: f64, alpha: f64) -> f64 {
    let s = sigma_re * scale;
    (-alpha * (d * d / (2.0 * s * s)).ln_1p()).exp()
}

/// Analytic `d/dd` of [`re_weight`].
pub fn re_weight_derivative(d: f64, scale: f64, sigma_re: f64, alpha: f64) -> f64 {
    let s2 = (sigma_re * scale).powi(2);
    let base = 1.0 + d * d / (2.0 * s2);
    -alpha * re_weight(d, scale, sigma_re, alpha) / base * d / s2
}

/// One alternation: exponent from the current length scale, then the
/// length scale from that exponent.
fn update(d_max: usize, w_min_re: f64, sigma: f64) -> f64 {
    let alpha = re_alpha(d_max, w_min_re, sigma, 1.0);
    sigma_from_alpha(d_max, w_min_re, alpha)
}

/// Solves the exponent / length-scale pair at `scale = 1`.
///
/// Each outer step applies the alternating update twice and takes a
/// Steffensen extrapolation of the two results. Convergence is declared when
/// the relative change in `sigma_re` drops to `tol`. `max_iters` bounds the
/// total number of update evaluations.
pub fn calibrate_re(d_max: usize, w_min_re: f64, tol: f64, max_iters: usize) -> Result<ReCalibration> {
    if !(w_min_re > 0.0 && w_min_re < 1.0) {
        return Err(DrsError::InvalidHyperParams(format!(
            "w_min_re must lie strictly in (0,1), got {w_min_re}"
        )));
    }
    if !(tol > 0.0) {
        return Err(DrsError::InvalidHyperParams(format!("tolerance must be > 0, got {tol}")));
    }
    let mut sigma = calibrate_sigma0(d_max, w_min_re)?;
    let mut evals = 0;
    let mut last_change = f64::INFINITY;

    while evals < max_iters {
        let s1 = update(d_max, w_min_re, sigma);
        evals += 1;
        let next = if evals < max_iters {
            let s2 = update(d_max, w_min_re, s1);
            evals += 1;
            let denom = s2 - 2.0 * s1 + sigma;
            let accelerated = sigma - (s1 - sigma).powi(2) / denom;
            if denom != 0.0 && accelerated.is_finite() && accelerated > 0.0 {
                accelerated
            } else {
                s2
            }
        } else {
            s1
        };
        if !(next.is_finite() && next > 0.0) {
            break;
        }
        last_change = (next - sigma).abs() / next;
        sigma = next;
        if last_change <= tol {
            let alpha_ref = re_alpha(d_max, w_min_re, sigma, 1.0);
            let residual = (re_weight(d_max as f64, 1.0, sigma, alpha_ref) - w_min_re).abs();
            if residual >= BOUNDARY_TOL {
                return Err(DrsError::Calibration {
                    iterations: evals,
                    residual,
                });
            }
            return Ok(ReCalibration {
                sigma_re: sigma,
                alpha_ref,
                iterations: evals,
                residual,
            });
        }
    }
    Err(DrsError::Calibration {
        iterations: evals,
        residual: last_change,
    })
}

/// Per-pair exponent and gate. Distance between query row `i` and key
/// column `j` is `|i - j|`.
pub fn re_maps(
    scale: &Array2<f64>,
    d_max: usize,
    w_min_re: f64,
    sigma_re: f64,
) -> (Array2<f64>, Array2<f64>) {
    let alpha = scale.mapv(|s| re_alpha(d_max, w_min_re, sigma_re, s));
    let r = Array2::from_shape_fn(scale.dim(), |(i, j)| {
        re_weight(i.abs_diff(j) as f64, scale[[i, j]], sigma_re, alpha[[i, j]])
    });
    (alpha, r)
}

/// `lambda_re * A * r_re`.
pub fn re_logits(base: &LogitsMatrix, r_re: &Array2<f64>, lambda_re: f64) -> Result<LogitsMatrix> {
    check_shape(base.values(), r_re)?;
    let values = ndarray::Zip::from(base.values())
        .and(r_re)
        .map_collect(|&a, &r| lambda_re * a * r);
    LogitsMatrix::new(values, Stage::Re)
}
