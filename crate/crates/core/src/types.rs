//! Shared data model: token sequences, rotary schedules, logit matrices and
//! the modulation hyperparameters.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DrsError, Result};

/// Modality tag of a token in the concatenated multimodal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Vision,
    Instruction,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Vision => "vision",
            Segment::Instruction => "instruction",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Vision tokens followed by instruction tokens, one embedding row per token.
///
/// Positions are always `0..n` in order; shifted positions are expressed
/// through the explicit offsets taken by the rotary routines.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Array2<f64>,
    segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn new(embeddings: Array2<f64>, segments: Vec<Segment>) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 {
            return Err(DrsError::EmptySequence);
        }
        check_head_dim(d)?;
        if segments.len() != n {
            return Err(DrsError::Dimension(format!(
                "{} segment tags for {} tokens",
                segments.len(),
                n
            )));
        }
        if segments
            .windows(2)
            .any(|w| w[0] == Segment::Instruction && w[1] == Segment::Vision)
        {
            return Err(DrsError::Dimension(
                "vision tokens must precede instruction tokens".into(),
            ));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(DrsError::NonFinite("embeddings".into()));
        }
        Ok(Self {
            embeddings,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Index of the first instruction token (equals `len()` when there is none).
    pub fn boundary(&self) -> usize {
        self.segments
            .iter()
            .position(|s| *s == Segment::Instruction)
            .unwrap_or(self.len())
    }

    pub fn vision_count(&self) -> usize {
        self.boundary()
    }

    pub fn instruction_count(&self) -> usize {
        self.len() - self.boundary()
    }
}

fn check_head_dim(d: usize) -> Result<()> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(DrsError::Dimension(format!(
            "head dimension must be even and >= 2, got {d}"
        )));
    }
    Ok(())
}

/// Synthetic multimodal sequence: `vision_count` vision tokens followed by
/// `instr_count` instruction tokens, embeddings drawn i.i.d. standard normal
/// from a ChaCha8 stream seeded with `seed`.
pub fn build_sequence(
    vision_count: usize,
    instr_count: usize,
    dim: usize,
    seed: u64,
) -> Result<TokenSequence> {
    check_head_dim(dim)?;
    let n = vision_count + instr_count;
    if n == 0 {
        return Err(DrsError::EmptySequence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        data.push(StandardNormal.sample(&mut rng));
    }
    let embeddings = Array2::from_shape_vec((n, dim), data)
        .map_err(|e| DrsError::Dimension(e.to_string()))?;
    let segments = std::iter::repeat_n(Segment::Vision, vision_count)
        .chain(std::iter::repeat_n(Segment::Instruction, instr_count))
        .collect();
    TokenSequence::new(embeddings, segments)
}

/// Rotation frequencies `thetas[i] = base^(-2i/d)` for `i = 0..d/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotarySchedule {
    dim: usize,
    base: f64,
    thetas: Vec<f64>,
}

impl RotarySchedule {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(dim: usize) -> Result<Self> {
        Self::with_base(dim, Self::DEFAULT_BASE)
    }

    pub fn with_base(dim: usize, base: f64) -> Result<Self> {
        check_head_dim(dim)?;
        if !(base.is_finite() && base > 1.0) {
            return Err(DrsError::Domain(format!(
                "rotary base must be finite and > 1, got {base}"
            )));
        }
        let thetas = (0..dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        Ok(Self { dim, base, thetas })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// Which point of the modulation pipeline a logit matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Sd,
    Dc,
    Re,
    Combined,
    PostSoftmax,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Base,
        Stage::Sd,
        Stage::Dc,
        Stage::Re,
        Stage::Combined,
        Stage::PostSoftmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Sd => "sd",
            Stage::Dc => "dc",
            Stage::Re => "re",
            Stage::Combined => "combined",
            Stage::PostSoftmax => "post_softmax",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = DrsError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| DrsError::UnknownStage(s.to_string()))
    }
}

/// Row-sum tolerance for `Stage::PostSoftmax` matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Dense `(n_q, n_k)` attention matrix tagged with its pipeline stage.
///
/// Entries are always finite. Post-softmax matrices are additionally
/// non-negative with rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    values: Array2<f64>,
    stage: Stage,
}

impl LogitsMatrix {
    pub fn new(values: Array2<f64>, stage: Stage) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DrsError::NonFinite(stage.to_string()));
        }
        if stage == Stage::PostSoftmax {
            for (i, row) in values.rows().into_iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(DrsError::Domain(format!(
                        "post-softmax row {i} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(Self { values, stage })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// The four tuned scalars plus numerical settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrsHyperParams {
    pub w_min_dc: f64,
    pub lambda_dc: f64,
    pub w_min_re: f64,
    pub lambda_re: f64,
    pub scale_clamp_eps: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iters: usize,
}

impl Default for DrsHyperParams {
    fn default() -> Self {
        Self {
            w_min_dc: 0.01,
            lambda_dc: 1.0,
            w_min_re: 0.02,
            lambda_re: 1.0,
            scale_clamp_eps: 1e-3,
            fixed_point_tol: 1e-9,
            fixed_point_max_iters: 100,
        }
    }
}

impl DrsHyperParams {
    pub fn validate(self) -> Result<Self> {
        validate_hyperparams(self)
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(DrsError::InvalidHyperParams(format!(
            "{name} must lie strictly in (0,1), got {v}"
        )))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(DrsError::InvalidHyperParams(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

pub fn validate_hyperparams(p: DrsHyperParams) -> Result<DrsHyperParams> {
    open_unit("w_min_dc", p.w_min_dc)?;
    open_unit("w_min_re", p.w_min_re)?;
    non_negative("lambda_dc", p.lambda_dc)?;
    non_negative("lambda_re", p.lambda_re)?;
    if !(p.scale_clamp_eps > 0.0 && p.scale_clamp_eps < 0.5) {
        return Err(DrsError::InvalidHyperParams(format!(
            "scale_clamp_eps must lie in (0,0.5), got {}",
            p.scale_clamp_eps
        )));
    }
    if !(p.fixed_point_tol.is_finite() && p.fixed_point_tol > 0.0) {
        return Err(DrsError::InvalidHyperParams(format!(
            "fixed_point_tol must be > 0, got {}",
            p.fixed_point_tol
        )));
    }
    if p.fixed_point_max_iters == 0 {
        return Err(DrsError::InvalidHyperParams(
            "fixed_point_max_iters must be >= 1".into(),
        ));
    }
    Ok(p)
}

/// Per-pair intermediate maps and calibrated scalars of one modulation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMaps {
    pub sem_sim: Array2<f64>,
    pub sem_pos: Array2<f64>,
    pub scale: Array2<f64>,
    pub r_dc: Array2<f64>,
    pub r_re: Array2<f64>,
    pub alpha: Array2<f64>,
    pub sigma0: f64,
    pub sigma_re: f64,
    pub d_max: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_instruction_token() {
        let s = build_sequence(0, 1, 2, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.segments(), &[Segment::Instruction]);
        assert_eq!(s.boundary(), 0);
    }

    #[test]
    fn segment_layout_and_positions() {
        let s = build_sequence(3, 2, 4, 7).unwrap();
        assert_eq!(s.positions(), vec![0, 1, 2, 3, 4]);
        use Segment::*;
        assert_eq!(
            s.segments(),
            &[Vision, Vision, Vision, Instruction, Instruction]
        );
        assert_eq!(s.vision_count(), 3);
        assert_eq!(s.instruction_count(), 2);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = build_sequence(3, 2, 4, 7).unwrap();
        let b = build_sequence(3, 2, 4, 7).unwrap();
        let bits = |s: &TokenSequence| s.embeddings().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = build_sequence(3, 2, 4, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn build_sequence_errors() {
        assert!(matches!(build_sequence(1, 1, 3, 0), Err(DrsError::Dimension(_))));
        assert!(matches!(build_sequence(1, 1, 0, 0), Err(DrsError::Dimension(_))));
        assert_eq!(build_sequence(0, 0, 4, 0), Err(DrsError::EmptySequence));
    }

    #[test]
    fn rejects_interleaved_segments() {
        use Segment::*;
        let e = Array2::zeros((3, 2));
        assert!(TokenSequence::new(e, vec![Vision, Instruction, Vision]).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        for d in [2usize, 4, 8, 64, 128] {
            let s = RotarySchedule::new(d).unwrap();
            assert_eq!(s.thetas()[0], 1.0);
            assert!(s.thetas().windows(2).all(|w| w[0] > w[1]));
            let last = 10_000f64.powf(-((d - 2) as f64) / d as f64);
            assert!((s.thetas()[d / 2 - 1] - last).abs() <= 1e-15 * last.max(1e-300));
        }
        let s = RotarySchedule::new(4).unwrap();
        assert!((s.thetas()[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hyperparam_validation() {
        let ok = DrsHyperParams {
            w_min_dc: 0.5,
            lambda_dc: 1.0,
            w_min_re: 0.3,
            lambda_re: 0.8,
            ..Default::default()
        };
        assert_eq!(validate_hyperparams(ok), Ok(ok));

        let err = validate_hyperparams(DrsHyperParams { w_min_dc: 1.0, ..ok }).unwrap_err();
        assert!(err.to_string().contains("w_min_dc must lie strictly in (0,1)"));
        assert!(validate_hyperparams(DrsHyperParams { w_min_re: 0.0, ..ok }).is_err());
        assert!(validate_hyperparams(DrsHyperParams { lambda_dc: -0.1, ..ok }).is_err());
        assert!(validate_hyperparams(DrsHyperParams { fixed_point_tol: 0.0, ..ok }).is_err());
        assert!(validate_hyperparams(DrsHyperParams { w_min_re: f64::NAN, ..ok }).is_err());
    }

    #[test]
    fn stage_tags_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.as_str().parse::<Stage>().unwrap(), st);
        }
        assert!("softmax".parse::<Stage>().is_err());
    }

    #[test]
    fn logits_matrix_rejects_bad_values() {
        let bad = Array2::from_elem((1, 2), f64::NAN);
        assert!(LogitsMatrix::new(bad, Stage::Base).is_err());
        let not_dist = Array2::from_elem((1, 2), 0.4);
        assert!(LogitsMatrix::new(not_dist, Stage::PostSoftmax).is_err());
    }
}
