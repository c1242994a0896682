//! Rotary position embedding.
//!
//! Dimension `2i` is paired with `2i + 1` so the fast path matches the
//! block-diagonal rotation matrix exactly. Logits are pre-softmax and carry
//! the `1/sqrt(d)` scaling; nothing else in the crate rescales them.

use ndarray::{Array2, ArrayView1};

use crate::error::{DrsError, Result};
use crate::types::{LogitsMatrix, RotarySchedule, Stage, TokenSequence};

/// Dense `(d, d)` block-diagonal rotation for position `m`.
pub fn rotation_matrix(schedule: &RotarySchedule, m: u64) -> Array2<f64> {
    let d = schedule.dim();
    let mut r = Array2::zeros((d, d));
    for (i, &theta) in schedule.thetas().iter().enumerate() {
        let (sin, cos) = (m as f64 * theta).sin_cos();
        let a = 2 * i;
        r[[a, a]] = cos;
        r[[a, a + 1]] = -sin;
        r[[a + 1, a]] = sin;
        r[[a + 1, a + 1]] = cos;
    }
    r
}

fn check_len(schedule: &RotarySchedule, len: usize) -> Result<()> {
    if len != schedule.dim() {
        return Err(DrsError::Dimension(format!(
            "vector of length {len} does not match rotary dimension {}",
            schedule.dim()
        )));
    }
    Ok(())
}

fn rotate_into(schedule: &RotarySchedule, x: ArrayView1<'_, f64>, m: u64, out: &mut [f64]) {
    for (i, &theta) in schedule.thetas().iter().enumerate() {
        let (sin, cos) = (m as f64 * theta).sin_cos();
        let (x0, x1) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = cos * x0 - sin * x1;
        out[2 * i + 1] = sin * x0 + cos * x1;
    }
}

/// `R(m) · x` without materialising the matrix.
pub fn apply_rotation(schedule: &RotarySchedule, x: &[f64], m: u64) -> Result<Vec<f64>> {
    check_len(schedule, x.len())?;
    let mut out = vec![0.0; x.len()];
    rotate_into(schedule, ArrayView1::from(x), m, &mut out);
    Ok(out)
}

/// Token embeddings after rotation by their (possibly offset) positions.
#[derive(Debug, Clone)]
pub struct RotatedVectors<'a> {
    pub rotated: Array2<f64>,
    pub schedule: &'a RotarySchedule,
}

/// Rotates row `m` of `seq` by position `m + offset`.
pub fn rotate_sequence<'a>(
    seq: &TokenSequence,
    schedule: &'a RotarySchedule,
    offset: u64,
) -> Result<RotatedVectors<'a>> {
    check_len(schedule, seq.dim())?;
    let mut rotated = Array2::zeros(seq.embeddings().dim());
    for (m, (row, mut out)) in seq
        .embeddings()
        .rows()
        .into_iter()
        .zip(rotated.rows_mut())
        .enumerate()
    {
        let out = out.as_slice_mut().expect("fresh array is contiguous");
        rotate_into(schedule, row, m as u64 + offset, out);
    }
    Ok(RotatedVectors { rotated, schedule })
}

/// Left-to-right dot product; the fixed order keeps results bit-stable.
pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Pre-softmax RoPE logits `(R_i q_i)·(R_j k_j) / sqrt(d)`.
pub fn base_logits(
    q_tokens: &TokenSequence,
    k_tokens: &TokenSequence,
    schedule: &RotarySchedule,
) -> Result<LogitsMatrix> {
    base_logits_shifted(q_tokens, k_tokens, schedule, 0)
}

/// Same as [`base_logits`] with every position (query and key) moved by `shift`.
pub fn base_logits_shifted(
    q_tokens: &TokenSequence,
    k_tokens: &TokenSequence,
    schedule: &RotarySchedule,
    shift: u64,
) -> Result<LogitsMatrix> {
    if q_tokens.dim() != k_tokens.dim() {
        return Err(DrsError::Dimension(format!(
            "query dim {} != key dim {}",
            q_tokens.dim(),
            k_tokens.dim()
        )));
    }
    let q = rotate_sequence(q_tokens, schedule, shift)?;
    let k = rotate_sequence(k_tokens, schedule, shift)?;
    let inv_sqrt_d = 1.0 / (schedule.dim() as f64).sqrt();
    let mut values = Array2::zeros((q_tokens.len(), k_tokens.len()));
    for (qi, mut out) in q.rotated.rows().into_iter().zip(values.rows_mut()) {
        for (kj, cell) in k.rotated.rows().into_iter().zip(out.iter_mut()) {
            *cell = dot(qi, kj) * inv_sqrt_d;
        }
    }
    LogitsMatrix::new(values, Stage::Base)
}

/// RoPE logit between `q` at position 0 and `k` at position `gap`.
pub fn logit_at_gap(schedule: &RotarySchedule, q: &[f64], k: &[f64], gap: u64) -> Result<f64> {
    check_len(schedule, q.len())?;
    let rk = apply_rotation(schedule, k, gap)?;
    let s = dot(ArrayView1::from(q), ArrayView1::from(rk.as_slice()));
    Ok(s / (schedule.dim() as f64).sqrt())
}
