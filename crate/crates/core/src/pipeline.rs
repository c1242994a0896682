//! Full modulation pass: base logits, the three stages, their residual sum,
//! optional causal masking, row softmax and value aggregation.
//!
//! The combined logits are `A + A_sd + A_dc + A_re`. Since `A_sd` already
//! contains `A`, the base logits enter the sum twice; this is intentional and
//! shows up in [`CalibrationReport::decomposition`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distance::{calibrate_sigma0, dc_logits, dc_weight_map};
use crate::error::{DrsError, Result};
use crate::reinforce::{calibrate_re, re_logits, re_maps};
use crate::rope::base_logits;
use crate::semantic::{positive_affinity, scale_map, sd_logits, semantic_similarity};
use crate::types::{
    validate_hyperparams, DrsHyperParams, LogitsMatrix, ModulationMaps, RotarySchedule, Segment,
    Stage, TokenSequence,
};

/// Bounds applied to automatically derived `w_min` values.
pub const AUTO_W_MIN_FLOOR: f64 = 1e-6;
pub const AUTO_W_MIN_CEIL: f64 = 1.0 - 1e-6;

/// Ablation variants, from plain RoPE attention to the full three-stage sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    #[serde(alias = "sd")]
    SdOnly,
    #[serde(alias = "no-rerd")]
    NoRerd,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::SdOnly, Variant::NoRerd, Variant::Full];

    /// Short key used in reports (`baseline`, `sd`, `no_rerd`, `full`).
    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SdOnly => "sd",
            Variant::NoRerd => "no_rerd",
            Variant::Full => "full",
        }
    }

    fn decomposition(self) -> &'static str {
        match self {
            Variant::Baseline => "A",
            Variant::SdOnly => "2A + sem_pos",
            Variant::NoRerd => "2A + sem_pos + A_dc",
            Variant::Full => "2A + sem_pos + A_dc + A_re",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = DrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sd" | "sd_only" | "sd-only" => Ok(Variant::SdOnly),
            "no_rerd" | "no-rerd" => Ok(Variant::NoRerd),
            "full" => Ok(Variant::Full),
            other => Err(DrsError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub hyper: DrsHyperParams,
    /// Derive `w_min_dc` / `w_min_re` from the smallest base-logit magnitude.
    pub auto_calibrate: bool,
    pub w_dc_multiplier: f64,
    pub w_re_multiplier: f64,
    pub causal_mask: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            hyper: DrsHyperParams::default(),
            auto_calibrate: false,
            w_dc_multiplier: 3.0,
            w_re_multiplier: 2.0,
            causal_mask: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(self) -> Result<Self> {
        for (name, m) in [
            ("w_dc_multiplier", self.w_dc_multiplier),
            ("w_re_multiplier", self.w_re_multiplier),
        ] {
            if !(m.is_finite() && m > 0.0) {
                return Err(DrsError::Config(format!("{name} must be finite and > 0, got {m}")));
            }
        }
        validate_hyperparams(self.hyper)?;
        Ok(self)
    }

    /// Parses and validates a JSON document using the struct's field names.
    /// Missing fields take their defaults; unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| DrsError::Config(e.to_string()))?;
        cfg.validate()
    }
}

/// Calibrated scalars and the hyperparameters actually used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub sigma0: f64,
    pub sigma_re: f64,
    pub alpha_ref: f64,
    pub abs_min: f64,
    pub w_min_dc: f64,
    pub w_min_re: f64,
    pub lambda_dc: f64,
    pub lambda_re: f64,
    pub iterations: usize,
    pub boundary_residual: f64,
    pub d_max: usize,
    pub auto_calibrated: bool,
    pub decomposition: String,
}

#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub variant: Variant,
    pub logits_by_stage: BTreeMap<Stage, LogitsMatrix>,
    pub weights: LogitsMatrix,
    pub output: Array2<f64>,
    pub maps: ModulationMaps,
    pub calibration: CalibrationReport,
    pub query_labels: Vec<(usize, Segment)>,
    pub key_labels: Vec<(usize, Segment)>,
    pub causal_mask: bool,
}

impl AttentionResult {
    pub fn stage(&self, stage: Stage) -> Option<&LogitsMatrix> {
        self.logits_by_stage.get(&stage)
    }

    /// Pre-softmax logits after the residual combination (before masking).
    pub fn combined(&self) -> &LogitsMatrix {
        &self.logits_by_stage[&Stage::Combined]
    }
}

/// Smallest absolute entry of the base logits.
pub fn abs_min(base: &LogitsMatrix) -> Result<f64> {
    base.values()
        .iter()
        .map(|v| v.abs())
        .reduce(f64::min)
        .ok_or(DrsError::EmptyMatrix)
}

/// `w_min_dc = m_dc * |A|_min`, `w_min_re = m_re * |A|_min` (both clamped),
/// `lambda_dc = 1`; `lambda_re` and numerical settings come from `cfg`.
pub fn auto_hyperparams(base: &LogitsMatrix, cfg: &PipelineConfig) -> Result<DrsHyperParams> {
    let a_min = abs_min(base)?;
    let clamp = |w: f64| w.clamp(AUTO_W_MIN_FLOOR, AUTO_W_MIN_CEIL);
    Ok(DrsHyperParams {
        w_min_dc: clamp(cfg.w_dc_multiplier * a_min),
        w_min_re: clamp(cfg.w_re_multiplier * a_min),
        lambda_dc: 1.0,
        ..cfg.hyper
    })
}

/// Numerically stable row softmax. `-inf` marks a masked cell; any other
/// non-finite entry is rejected.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<LogitsMatrix> {
    let mut out = Array2::zeros(logits.dim());
    for (i, (row, mut dst)) in logits.rows().into_iter().zip(out.rows_mut()).enumerate() {
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(DrsError::NonFinite(format!("softmax input row {i}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DrsError::FullyMaskedRow { row: i });
        }
        let mut sum = 0.0;
        for (src, d) in row.iter().zip(dst.iter_mut()) {
            *d = (src - max).exp();
            sum += *d;
        }
        dst.mapv_inplace(|v| v / sum);
    }
    LogitsMatrix::new(out, Stage::PostSoftmax)
}

fn sum_stages(parts: &[&Array2<f64>]) -> Array2<f64> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc += *p;
    }
    acc
}

pub fn run(
    q: &TokenSequence,
    k: &TokenSequence,
    v: &TokenSequence,
    schedule: &RotarySchedule,
    cfg: &PipelineConfig,
) -> Result<AttentionResult> {
    let cfg = cfg.validate()?;
    if k.len() != v.len() {
        return Err(DrsError::Dimension(format!(
            "{} keys but {} values",
            k.len(),
            v.len()
        )));
    }
    let base = base_logits(q, k, schedule)?;
    let a_min = abs_min(&base)?;
    let hyper = if cfg.auto_calibrate {
        auto_hyperparams(&base, &cfg)?
    } else {
        cfg.hyper
    };
    let hyper = validate_hyperparams(hyper)?;

    let d_max = q.len().max(k.len()).saturating_sub(1).max(1);

    let sem_sim = semantic_similarity(q, k)?;
    let sem_pos = positive_affinity(&sem_sim)?;
    let scale = scale_map(&sem_pos, hyper.scale_clamp_eps)?;
    let sd = sd_logits(&base, &sem_pos)?;

    let sigma0 = calibrate_sigma0(d_max, hyper.w_min_dc)?;
    let r_dc = dc_weight_map(&scale, sigma0);
    let dc = dc_logits(&base, &r_dc, hyper.lambda_dc)?;

    let cal = calibrate_re(
        d_max,
        hyper.w_min_re,
        hyper.fixed_point_tol,
        hyper.fixed_point_max_iters,
    )?;
    let (alpha, r_re) = re_maps(&scale, d_max, hyper.w_min_re, cal.sigma_re);
    let re = re_logits(&base, &r_re, hyper.lambda_re)?;

    let combined = match cfg.variant {
        Variant::Baseline => base.values().clone(),
        Variant::SdOnly => sum_stages(&[base.values(), sd.values()]),
        Variant::NoRerd => sum_stages(&[base.values(), sd.values(), dc.values()]),
        Variant::Full => sum_stages(&[base.values(), sd.values(), dc.values(), re.values()]),
    };
    let combined = LogitsMatrix::new(combined, Stage::Combined)?;

    let mut masked = combined.values().clone();
    if cfg.causal_mask {
        for ((i, j), cell) in masked.indexed_iter_mut() {
            if j > i {
                *cell = f64::NEG_INFINITY;
            }
        }
    }
    let weights = softmax_rows(&masked)?;
    let output = aggregate(weights.values(), v.embeddings());

    let calibration = CalibrationReport {
        sigma0,
        sigma_re: cal.sigma_re,
        alpha_ref: cal.alpha_ref,
        abs_min: a_min,
        w_min_dc: hyper.w_min_dc,
        w_min_re: hyper.w_min_re,
        lambda_dc: hyper.lambda_dc,
        lambda_re: hyper.lambda_re,
        iterations: cal.iterations,
        boundary_residual: cal.residual,
        d_max,
        auto_calibrated: cfg.auto_calibrate,
        decomposition: cfg.variant.decomposition().to_string(),
    };

    let mut logits_by_stage = BTreeMap::new();
    logits_by_stage.insert(Stage::Base, base);
    logits_by_stage.insert(Stage::Sd, sd);
    logits_by_stage.insert(Stage::Dc, dc);
    logits_by_stage.insert(Stage::Re, re);
    logits_by_stage.insert(Stage::Combined, combined);
    logits_by_stage.insert(Stage::PostSoftmax, weights.clone());

    let labels = |s: &TokenSequence| s.positions().into_iter().zip(s.segments().iter().copied()).collect();

    Ok(AttentionResult {
        variant: cfg.variant,
        logits_by_stage,
        weights,
        output,
        maps: ModulationMaps {
            sem_sim,
            sem_pos,
            scale,
            r_dc,
            r_re,
            alpha,
            sigma0,
            sigma_re: cal.sigma_re,
            d_max,
        },
        calibration,
        query_labels: labels(q),
        key_labels: labels(k),
        causal_mask: cfg.causal_mask,
    })
}

/// `weights · values` with a fixed left-to-right reduction.
fn aggregate(weights: &Array2<f64>, values: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((weights.nrows(), values.ncols()));
    for (w_row, mut o_row) in weights.rows().into_iter().zip(out.rows_mut()) {
        for (&w, v_row) in w_row.iter().zip(values.rows()) {
            for (o, &x) in o_row.iter_mut().zip(v_row.iter()) {
                *o += w * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::build_sequence;
    use ndarray::array;

    fn logits(v: Array2<f64>) -> LogitsMatrix {
        LogitsMatrix::new(v, Stage::Base).unwrap()
    }

    #[test]
    fn abs_min_cases() {
        assert_eq!(abs_min(&logits(array![[-3.0, 0.5]])).unwrap(), 0.5);
        assert_eq!(abs_min(&logits(Array2::zeros((2, 2)))).unwrap(), 0.0);
        assert_eq!(abs_min(&logits(array![[0.2, -0.1], [0.3, 0.4]])).unwrap(), 0.1);
        assert_eq!(abs_min(&logits(Array2::zeros((0, 3)))), Err(DrsError::EmptyMatrix));
    }

    #[test]
    fn auto_hyperparams_rule() {
        let cfg = PipelineConfig {
            auto_calibrate: true,
            ..Default::default()
        };
        let h = auto_hyperparams(&logits(array![[0.05, -0.7]]), &cfg).unwrap();
        assert!((h.w_min_dc - 0.15).abs() < 1e-15);
        assert!((h.w_min_re - 0.10).abs() < 1e-15);
        assert_eq!(h.lambda_dc, 1.0);
        assert_eq!(h.lambda_re, cfg.hyper.lambda_re);

        let h = auto_hyperparams(&logits(array![[0.5, 2.0]]), &cfg).unwrap();
        assert_eq!(h.w_min_dc, AUTO_W_MIN_CEIL);

        let h = auto_hyperparams(&logits(Array2::zeros((2, 2))), &cfg).unwrap();
        assert_eq!(h.w_min_dc, AUTO_W_MIN_FLOOR);
        assert_eq!(h.w_min_re, AUTO_W_MIN_FLOOR);
    }

    #[test]
    fn softmax_cases() {
        let w = softmax_rows(&array![[0.0, 0.0]]).unwrap();
        assert_eq!(w.values(), &array![[0.5, 0.5]]);

        let big = softmax_rows(&array![[1000.0, 1000.5]]).unwrap();
        let small = softmax_rows(&array![[0.0, 0.5]]).unwrap();
        assert_eq!(big.values(), small.values());

        let w = softmax_rows(&array![[0.0, 3f64.ln()]]).unwrap();
        assert!((w.values()[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((w.values()[[0, 1]] - 0.75).abs() < 1e-15);

        let masked = softmax_rows(&array![[1.0, f64::NEG_INFINITY]]).unwrap();
        assert_eq!(masked.values()[[0, 1]], 0.0);
        assert_eq!(
            softmax_rows(&array![[0.0], [f64::NEG_INFINITY]]),
            Err(DrsError::FullyMaskedRow { row: 1 })
        );
        assert!(softmax_rows(&array![[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn single_token_gets_full_weight() {
        let s = build_sequence(0, 1, 4, 3).unwrap();
        let sched = RotarySchedule::new(4).unwrap();
        for variant in Variant::ALL {
            let cfg = PipelineConfig {
                variant,
                ..Default::default()
            };
            let r = run(&s, &s, &s, &sched, &cfg).unwrap();
            assert_eq!(r.weights.values(), &array![[1.0]]);
        }
    }

    #[test]
    fn baseline_matches_plain_rope_softmax() {
        let s = build_sequence(3, 3, 8, 11).unwrap();
        let sched = RotarySchedule::new(8).unwrap();
        let cfg = PipelineConfig {
            variant: Variant::Baseline,
            ..Default::default()
        };
        let r = run(&s, &s, &s, &sched, &cfg).unwrap();
        let plain = softmax_rows(base_logits(&s, &s, &sched).unwrap().values()).unwrap();
        assert_eq!(r.weights.values(), plain.values());
    }

    #[test]
    fn causal_mask_zeroes_future_keys() {
        let s = build_sequence(4, 4, 8, 2).unwrap();
        let sched = RotarySchedule::new(8).unwrap();
        let cfg = PipelineConfig {
            causal_mask: true,
            ..Default::default()
        };
        let r = run(&s, &s, &s, &sched, &cfg).unwrap();
        for ((i, j), &w) in r.weights.values().indexed_iter() {
            if j > i {
                assert_eq!(w, 0.0);
            }
        }
        for row in r.weights.values().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_tags_parse() {
        assert_eq!("sd".parse::<Variant>().unwrap(), Variant::SdOnly);
        assert_eq!("no-rerd".parse::<Variant>().unwrap(), Variant::NoRerd);
        assert_eq!("no_rerd".parse::<Variant>().unwrap(), Variant::NoRerd);
        assert!("partial".parse::<Variant>().is_err());
    }

    #[test]
    fn config_json() {
        let cfg = PipelineConfig::from_json(
            r#"{"variant":"no_rerd","auto_calibrate":true,"hyper":{"lambda_re":0.8}}"#,
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::NoRerd);
        assert!(cfg.auto_calibrate);
        assert_eq!(cfg.hyper.lambda_re, 0.8);
        assert_eq!(cfg.hyper.w_min_dc, DrsHyperParams::default().w_min_dc);

        assert!(PipelineConfig::from_json(r#"{"variant":"sideways"}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus":1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"w_dc_multiplier":-1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"hyper":{"w_min_dc":1.5}}"#).is_err());
        assert!(PipelineConfig::from_json("not json").is_err());
    }

    #[test]
    fn value_length_mismatch() {
        let s = build_sequence(2, 2, 4, 0).unwrap();
        let v = build_sequence(2, 1, 4, 0).unwrap();
        let sched = RotarySchedule::new(4).unwrap();
        assert!(run(&s, &s, &v, &sched, &PipelineConfig::default()).is_err());
    }
}
