//! Semantic-driven stage: cosine affinity between the unrotated query and
//! key embeddings, mapped to `[0, 1]` and added to the base logits. The
//! min-max normalised affinity (`scale`) feeds the two distance kernels.

use ndarray::Array2;

use crate::error::{DrsError, Result};
use crate::rope::dot;
use crate::types::{LogitsMatrix, Stage, TokenSequence};

/// Cosine similarity of every (query, key) pair. Pairs involving a
/// zero-norm row are defined as 0.
pub fn semantic_similarity(q_tokens: &TokenSequence, k_tokens: &TokenSequence) -> Result<Array2<f64>> {
    if q_tokens.dim() != k_tokens.dim() {
        return Err(DrsError::Dimension(format!(
            "query dim {} != key dim {}",
            q_tokens.dim(),
            k_tokens.dim()
        )));
    }
    let q = q_tokens.embeddings();
    let k = k_tokens.embeddings();
    let q_norms: Vec<f64> = q.rows().into_iter().map(|r| dot(r, r).sqrt()).collect();
    let k_norms: Vec<f64> = k.rows().into_iter().map(|r| dot(r, r).sqrt()).collect();

    let mut sim = Array2::zeros((q.nrows(), k.nrows()));
    for (i, qi) in q.rows().into_iter().enumerate() {
        for (j, kj) in k.rows().into_iter().enumerate() {
            let denom = q_norms[i] * k_norms[j];
            sim[[i, j]] = if denom > 0.0 {
                (dot(qi, kj) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(sim)
}

/// `(sem_sim + 1) / 2`.
pub fn positive_affinity(sem_sim: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(bad) = sem_sim.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(DrsError::Domain(format!(
            "similarity {bad} outside [-1, 1]"
        )));
    }
    Ok(sem_sim.mapv(|s| 0.5 * (s + 1.0)))
}

pub fn sd_logits(base: &LogitsMatrix, sem_pos: &Array2<f64>) -> Result<LogitsMatrix> {
    check_shape(base.values(), sem_pos)?;
    LogitsMatrix::new(base.values() + sem_pos, Stage::Sd)
}

/// Global min-max normalisation of `sem_pos`, floored at `eps`.
/// A constant map becomes 0.5 everywhere.
pub fn scale_map(sem_pos: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    if sem_pos.is_empty() {
        return Err(DrsError::EmptyMatrix);
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(DrsError::Domain(format!("scale clamp eps must lie in (0,0.5), got {eps}")));
    }
    if let Some(bad) = sem_pos.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DrsError::Domain(format!("affinity {bad} outside [0, 1]")));
    }
    let (min, max) = sem_pos
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    Ok(sem_pos.mapv(|v| {
        let s = if range > 0.0 { (v - min) / range } else { 0.5 };
        s.max(eps)
    }))
}

pub(crate) fn check_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(DrsError::ShapeMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}
