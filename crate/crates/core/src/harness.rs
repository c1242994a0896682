//! Desk-scale experiments: decay-curve sweeps, ablation comparisons across
//! the four variants, and labelled attention-map snapshots for heatmaps.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::distance::{calibrate_sigma0, dc_weight};
use crate::error::{DrsError, Result};
use crate::pipeline::{run, AttentionResult, CalibrationReport, PipelineConfig, Variant};
use crate::reinforce::{calibrate_re, re_weight};
use crate::rope::logit_at_gap;
use crate::types::{validate_hyperparams, DrsHyperParams, RotarySchedule, Segment, Stage, TokenSequence};

/// Query/key vectors used to trace the RoPE decay envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Probe {
    /// `q = k = (1, ..., 1) / sqrt(d)`.
    Ones,
    /// `trials` unit vectors drawn from a seeded normal, with `q = k` per trial.
    Random { seed: u64, trials: usize },
}

impl Probe {
    fn vectors(self, dim: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            Probe::Ones => Ok(vec![vec![1.0 / (dim as f64).sqrt(); dim]]),
            Probe::Random { seed, trials } => {
                if trials == 0 {
                    return Err(DrsError::InvalidProbe("random probe needs at least one trial".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut out = Vec::with_capacity(trials);
                while out.len() < trials {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        out.push(v.into_iter().map(|x| x / norm).collect());
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCurve {
    pub gaps: Vec<usize>,
    pub mean_abs_logit: Vec<f64>,
    pub r_dc_curve: Vec<f64>,
    pub r_re_curve: Vec<f64>,
    pub dim: usize,
    pub probe: Probe,
    pub hyper: DrsHyperParams,
    pub sigma0: f64,
    pub sigma_re: f64,
    pub alpha_ref: f64,
    pub iterations: usize,
}

/// Baseline RoPE envelope (mean |logit| per gap) next to both distance
/// kernels evaluated at `scale = 1` with `d_max = max_gap`.
pub fn sweep_decay(dim: usize, max_gap: usize, hyper: DrsHyperParams, probe: Probe) -> Result<DecayCurve> {
    if max_gap == 0 {
        return Err(DrsError::Domain("max_gap must be >= 1".into()));
    }
    let hyper = validate_hyperparams(hyper)?;
    let schedule = RotarySchedule::new(dim)?;
    let probes = probe.vectors(dim)?;

    let sigma0 = calibrate_sigma0(max_gap, hyper.w_min_dc)?;
    let cal = calibrate_re(max_gap, hyper.w_min_re, hyper.fixed_point_tol, hyper.fixed_point_max_iters)?;

    let gaps: Vec<usize> = (0..=max_gap).collect();
    let mut mean_abs_logit = Vec::with_capacity(gaps.len());
    for &gap in &gaps {
        let mut acc = 0.0;
        for p in &probes {
            acc += logit_at_gap(&schedule, p, p, gap as u64)?.abs();
        }
        mean_abs_logit.push(acc / probes.len() as f64);
    }
    let r_dc_curve = gaps.iter().map(|&g| dc_weight(g as f64, 1.0, sigma0)).collect();
    let r_re_curve = gaps
        .iter()
        .map(|&g| re_weight(g as f64, 1.0, cal.sigma_re, cal.alpha_ref))
        .collect();

    Ok(DecayCurve {
        gaps,
        mean_abs_logit,
        r_dc_curve,
        r_re_curve,
        dim,
        probe,
        hyper,
        sigma0,
        sigma_re: cal.sigma_re,
        alpha_ref: cal.alpha_ref,
        iterations: cal.iterations,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Summary statistics for one post-softmax attention map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionStats {
    /// Mean per-row weight on keys farther than the distant threshold.
    pub distant_mass: f64,
    /// Mean per-row weight on keys of the other modality; `None` when the
    /// sequences hold only one modality.
    pub cross_modal_mass: Option<f64>,
    pub row_entropy: Vec<f64>,
    pub mean_entropy: f64,
}

pub fn attention_stats(
    weights: &Array2<f64>,
    query_labels: &[(usize, Segment)],
    key_labels: &[(usize, Segment)],
    distant_threshold: f64,
) -> AttentionStats {
    let n_rows = weights.nrows().max(1) as f64;
    let modalities = |labels: &[(usize, Segment)]| {
        (
            labels.iter().any(|l| l.1 == Segment::Vision),
            labels.iter().any(|l| l.1 == Segment::Instruction),
        )
    };
    let all = [query_labels, key_labels].concat();
    let (has_v, has_t) = modalities(&all);
    let cross_present = has_v && has_t;

    let mut distant = 0.0;
    let mut cross = 0.0;
    let mut row_entropy = Vec::with_capacity(weights.nrows());
    for (row, &(qp, qs)) in weights.rows().into_iter().zip(query_labels) {
        let mut h = 0.0;
        for (&w, &(kp, ks)) in row.iter().zip(key_labels) {
            if qp.abs_diff(kp) as f64 > distant_threshold {
                distant += w;
            }
            if ks != qs {
                cross += w;
            }
            if w > 0.0 {
                h -= w * w.ln();
            }
        }
        row_entropy.push(h.max(0.0));
    }
    let mean_entropy = row_entropy.iter().sum::<f64>() / n_rows;
    AttentionStats {
        distant_mass: distant / n_rows,
        cross_modal_mass: cross_present.then_some(cross / n_rows),
        row_entropy,
        mean_entropy,
    }
}

fn row_argmax(weights: &Array2<f64>) -> Vec<usize> {
    weights
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &w)| if w > best.1 { (j, w) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax key coincides.
pub fn argmax_agreement(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (xa, xb) = (row_argmax(a), row_argmax(b));
    if xa.is_empty() {
        return 1.0;
    }
    xa.iter().zip(&xb).filter(|(p, q)| p == q).count() as f64 / xa.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    #[serde(flatten)]
    pub stats: AttentionStats,
    pub argmax_agreement_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub variants: BTreeMap<String, VariantSummary>,
    /// Row/column order is [`Variant::ALL`].
    pub agreement_order: Vec<String>,
    pub agreement: Vec<Vec<f64>>,
    pub distant_threshold: f64,
    pub calibration: CalibrationReport,
}

/// `|i - j| > d_max / 2`.
pub fn distant_threshold(d_max: usize) -> f64 {
    d_max as f64 / 2.0
}

pub fn summarize(result: &AttentionResult, baseline_weights: &Array2<f64>) -> VariantSummary {
    let stats = attention_stats(
        result.weights.values(),
        &result.query_labels,
        &result.key_labels,
        distant_threshold(result.calibration.d_max),
    );
    VariantSummary {
        stats,
        argmax_agreement_vs_baseline: argmax_agreement(result.weights.values(), baseline_weights),
    }
}

/// Runs all four variants on the same self-attention input with fixed
/// hyperparameters.
pub fn compare_variants(
    seq: &TokenSequence,
    schedule: &RotarySchedule,
    hyper: DrsHyperParams,
) -> Result<ComparisonReport> {
    let cfg = PipelineConfig {
        hyper,
        ..Default::default()
    };
    compare_variants_with(seq, schedule, &cfg)
}

/// As [`compare_variants`], taking every setting except the variant from `cfg`.
pub fn compare_variants_with(
    seq: &TokenSequence,
    schedule: &RotarySchedule,
    cfg: &PipelineConfig,
) -> Result<ComparisonReport> {
    if seq.len() < 4 {
        return Err(DrsError::Dimension(format!(
            "comparison needs at least 4 tokens, got {}",
            seq.len()
        )));
    }
    let results = Variant::ALL
        .iter()
        .map(|&variant| run(seq, seq, seq, schedule, &PipelineConfig { variant, ..*cfg }))
        .collect::<Result<Vec<_>>>()?;
    let baseline = results[0].weights.values();

    let variants = results
        .iter()
        .map(|r| (r.variant.key().to_string(), summarize(r, baseline)))
        .collect();
    let agreement = results
        .iter()
        .map(|a| {
            results
                .iter()
                .map(|b| argmax_agreement(a.weights.values(), b.weights.values()))
                .collect()
        })
        .collect();
    let full = &results[3];
    Ok(ComparisonReport {
        variants,
        agreement_order: Variant::ALL.iter().map(|v| v.key().to_string()).collect(),
        agreement,
        distant_threshold: distant_threshold(full.calibration.d_max),
        calibration: full.calibration.clone(),
    })
}

/// A stage matrix with position and modality labels on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    pub stage: Stage,
    pub values: Array2<f64>,
    pub row_labels: Vec<(usize, Segment)>,
    pub col_labels: Vec<(usize, Segment)>,
}

pub fn export_attention(result: &AttentionResult, which: &str) -> Result<AttentionSnapshot> {
    let stage: Stage = which.parse()?;
    let m = result
        .stage(stage)
        .ok_or_else(|| DrsError::UnknownStage(which.to_string()))?;
    Ok(AttentionSnapshot {
        stage,
        values: m.values().clone(),
        row_labels: result.query_labels.clone(),
        col_labels: result.key_labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::build_sequence;
    use ndarray::array;
    use proptest::prelude::*;

    fn hyper() -> DrsHyperParams {
        DrsHyperParams::default()
    }

    #[test]
    fn decay_endpoints() {
        let c = sweep_decay(16, 64, hyper(), Probe::Ones).unwrap();
        assert_eq!(c.gaps.len(), 65);
        assert_eq!(c.r_dc_curve[0], 1.0);
        assert_eq!(c.r_re_curve[0], 1.0);
        assert!((c.r_dc_curve[64] - 0.01).abs() < 1e-6);
        assert!((c.r_re_curve[64] - 0.02).abs() < 1e-6);
        // ones probe at gap 0: |q|^2 / sqrt(d)
        assert!((c.mean_abs_logit[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_probe_is_seeded() {
        let p = Probe::Random { seed: 5, trials: 8 };
        let a = sweep_decay(8, 32, hyper(), p).unwrap();
        let b = sweep_decay(8, 32, hyper(), p).unwrap();
        assert_eq!(a, b);
        assert!(sweep_decay(8, 32, hyper(), Probe::Random { seed: 5, trials: 0 }).is_err());
        assert!(sweep_decay(8, 0, hyper(), Probe::Ones).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn baseline_self_agreement() {
        let s = build_sequence(4, 4, 16, 9).unwrap();
        let sched = RotarySchedule::new(16).unwrap();
        let rep = compare_variants(&s, &sched, hyper()).unwrap();
        assert_eq!(rep.variants["baseline"].argmax_agreement_vs_baseline, 1.0);
        for i in 0..4 {
            assert_eq!(rep.agreement[i][i], 1.0);
        }
        for v in rep.variants.values() {
            assert!((0.0..=1.0).contains(&v.stats.distant_mass));
            let cm = v.stats.cross_modal_mass.unwrap();
            assert!((0.0..=1.0).contains(&cm));
            assert!(v.stats.row_entropy.iter().all(|&h| h >= 0.0 && h <= (8f64).ln() + 1e-12));
        }
    }

    #[test]
    fn single_modality_has_no_cross_mass() {
        let s = build_sequence(0, 6, 8, 1).unwrap();
        let sched = RotarySchedule::new(8).unwrap();
        let rep = compare_variants(&s, &sched, hyper()).unwrap();
        assert!(rep.variants.values().all(|v| v.stats.cross_modal_mass.is_none()));
        let short = build_sequence(1, 2, 8, 1).unwrap();
        assert!(compare_variants(&short, &sched, hyper()).is_err());
    }

    #[test]
    fn export_shapes_and_errors() {
        let s = build_sequence(3, 2, 8, 4).unwrap();
        let sched = RotarySchedule::new(8).unwrap();
        let r = run(&s, &s, &s, &sched, &PipelineConfig::default()).unwrap();
        let snap = export_attention(&r, "base").unwrap();
        assert_eq!(snap.values.dim(), (5, 5));
        assert_eq!(snap.row_labels[3], (3, Segment::Instruction));
        let post = export_attention(&r, "post_softmax").unwrap();
        for row in post.values.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let comb = export_attention(&r, "combined").unwrap().values;
        let sum = |st: &str| export_attention(&r, st).unwrap().values;
        let recomposed = sum("base") + sum("sd") + sum("dc") + sum("re");
        assert!(comb.iter().zip(recomposed.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(export_attention(&r, "heat"), Err(DrsError::UnknownStage(_))));
    }

    #[test]
    fn agreement_counts_rows() {
        let a = array![[0.9, 0.1], [0.2, 0.8]];
        let b = array![[0.6, 0.4], [0.7, 0.3]];
        assert_eq!(argmax_agreement(&a, &b), 0.5);
    }

    proptest! {
        #[test]
        fn kernel_endpoints(dim in (1usize..=16).prop_map(|h| 2 * h), max_gap in 1usize..300,
                            w_dc in 0.001f64..0.999, w_re in 0.001f64..0.999) {
            let h = DrsHyperParams { w_min_dc: w_dc, w_min_re: w_re, ..hyper() };
            let c = sweep_decay(dim, max_gap, h, Probe::Ones).unwrap();
            prop_assert_eq!(c.r_dc_curve[0], 1.0);
            prop_assert_eq!(c.r_re_curve[0], 1.0);
            prop_assert!((c.r_dc_curve[max_gap] - w_dc).abs() < 1e-6);
            prop_assert!((c.r_re_curve[max_gap] - w_re).abs() < 1e-6);
            prop_assert!(c.r_dc_curve.iter().chain(&c.r_re_curve).all(|&r| r > 0.0 && r <= 1.0));
        }

        #[test]
        fn stats_are_permutation_consistent(seed in 0u64..1000, rot in 1usize..6) {
            let s = build_sequence(3, 3, 8, seed).unwrap();
            let sched = RotarySchedule::new(8).unwrap();
            let r = run(&s, &s, &s, &sched, &PipelineConfig::default()).unwrap();
            let w = r.weights.values();
            let n = w.ncols();
            let perm: Vec<usize> = (0..n).map(|j| (j + rot) % n).collect();
            let pw = Array2::from_shape_fn(w.dim(), |(i, j)| w[[i, perm[j]]]);
            let pk: Vec<_> = perm.iter().map(|&j| r.key_labels[j]).collect();
            let a = attention_stats(w, &r.query_labels, &r.key_labels, 2.5);
            let b = attention_stats(&pw, &r.query_labels, &pk, 2.5);
            prop_assert!((a.distant_mass - b.distant_mass).abs() < 1e-12);
            prop_assert!((a.cross_modal_mass.unwrap() - b.cross_modal_mass.unwrap()).abs() < 1e-12);
            prop_assert!((a.mean_entropy - b.mean_entropy).abs() < 1e-12);
        }
    }
}
