//! Detection metrics over labeled trial scores: equal error rate and
//! minimum normalized detection cost.
//!
//! Both metrics are computed from operating points taken at midpoints
//! between consecutive distinct scores plus the two boundary decisions, with
//! a trial accepted iff its score is >= the threshold. Error rates depend on
//! scores only through counts, so any strictly increasing transform of the
//! scores leaves both metrics bit-identical.

use crate::embedding::{TrialLabel, TrialList};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ScoredTrial {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: Option<TrialLabel>,
}

/// Ordered trial scores, in trial-list order.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub trials: Vec<ScoredTrial>,
}

impl ScoreSet {
    /// Attach labels from a trial list, matching entries by position and id.
    pub fn with_labels_from(&self, trials: &TrialList) -> Result<ScoreSet> {
        if trials.trials.len() != self.trials.len() {
            return Err(Error::Invalid(format!(
                "trial list has {} entries but score set has {}",
                trials.trials.len(),
                self.trials.len()
            )));
        }
        let mut labeled = self.clone();
        for (scored, trial) in labeled.trials.iter_mut().zip(&trials.trials) {
            if scored.enroll_id != trial.enroll_id || scored.test_id != trial.test_id {
                return Err(Error::Invalid(format!(
                    "trial mismatch: scores have ({}, {}), trial list has ({}, {})",
                    scored.enroll_id, scored.test_id, trial.enroll_id, trial.test_id
                )));
            }
            scored.label = trial.label;
        }
        Ok(labeled)
    }
}

/// One point of the detection trade-off, for the decision "accept iff
/// score >= threshold".
#[derive(Debug, Clone, Copy)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// False-acceptance rate: fraction of nontargets at or above threshold.
    pub far: f64,
    /// False-rejection rate: fraction of targets below threshold.
    pub frr: f64,
}

fn split_labeled(scores: &ScoreSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &scores.trials {
        if !t.score.is_finite() {
            return Err(Error::Invalid(format!(
                "trial ({}, {}) has non-finite score",
                t.enroll_id, t.test_id
            )));
        }
        match t.label {
            Some(TrialLabel::Target) => targets.push(t.score),
            Some(TrialLabel::Nontarget) => nontargets.push(t.score),
            None => {
                return Err(Error::Invalid(format!(
                    "trial ({}, {}) has no label",
                    t.enroll_id, t.test_id
                )))
            }
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Invalid(format!(
            "metrics need both classes: {} target(s), {} nontarget(s)",
            targets.len(),
            nontargets.len()
        )));
    }
    Ok((targets, nontargets))
}

/// Operating points swept from accept-everything to reject-everything.
///
/// Thresholds are `-inf`, midpoints between consecutive distinct scores,
/// and `+inf`, in ascending order; rates come from cumulative counts over
/// the scores sorted descending.
pub fn operating_points(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (targets, nontargets) = split_labeled(scores)?;
    let n_tar = targets.len() as f64;
    let n_non = nontargets.len() as f64;

    let mut all: Vec<f64> = Vec::with_capacity(targets.len() + nontargets.len());
    all.extend_from_slice(&targets);
    all.extend_from_slice(&nontargets);
    all.sort_by(|a, b| a.total_cmp(b));
    all.dedup();

    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(f64::NEG_INFINITY);
    for w in all.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(f64::INFINITY);

    let mut sorted_targets = targets;
    let mut sorted_nontargets = nontargets;
    sorted_targets.sort_by(|a, b| a.total_cmp(b));
    sorted_nontargets.sort_by(|a, b| a.total_cmp(b));

    let count_below = |sorted: &[f64], t: f64| sorted.partition_point(|&s| s < t);

    Ok(thresholds
        .into_iter()
        .map(|t| OperatingPoint {
            threshold: t,
            frr: count_below(&sorted_targets, t) as f64 / n_tar,
            far: (sorted_nontargets.len() - count_below(&sorted_nontargets, t)) as f64 / n_non,
        })
        .collect())
}

/// Equal error rate with linear interpolation between adjacent operating
/// points, and the threshold at the crossing.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let points = operating_points(scores)?;
    eer_from_points(&points)
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> Result<(f64, f64)> {
    // far - frr starts at +1 (accept all) and ends at -1 (reject all); find
    // the first sign change scanning thresholds in ascending order.
    for (i, p) in points.iter().enumerate() {
        let diff = p.far - p.frr;
        if diff == 0.0 {
            return Ok((p.far, finite_threshold(points, i)));
        }
        if diff < 0.0 {
            let prev = &points[i - 1];
            let d_prev = prev.far - prev.frr;
            let lambda = d_prev / (d_prev - diff);
            let eer = (1.0 - lambda) * prev.far + lambda * p.far;
            let threshold = if prev.threshold.is_finite() && p.threshold.is_finite() {
                (1.0 - lambda) * prev.threshold + lambda * p.threshold
            } else if prev.threshold.is_finite() {
                prev.threshold
            } else {
                finite_threshold(points, i)
            };
            return Ok((eer, threshold));
        }
    }
    Err(Error::Invalid("no EER crossing found".into()))
}

fn finite_threshold(points: &[OperatingPoint], i: usize) -> f64 {
    if points[i].threshold.is_finite() {
        return points[i].threshold;
    }
    // boundary point: fall back to the nearest finite threshold
    let finite: Vec<f64> = points
        .iter()
        .map(|p| p.threshold)
        .filter(|t| t.is_finite())
        .collect();
    if finite.is_empty() {
        0.0
    } else if points[i].threshold == f64::NEG_INFINITY {
        finite[0]
    } else {
        finite[finite.len() - 1]
    }
}

/// Minimum normalized detection cost at target prior `p_tar` and the
/// threshold achieving it.
///
/// `cost(t) = p_tar·c_miss·P_miss(t) + (1−p_tar)·c_fa·P_fa(t)`, normalized
/// by `min(p_tar·c_miss, (1−p_tar)·c_fa)`. The boundary decisions are
/// included, so the result never exceeds 1.
pub fn compute_min_dcf(scores: &ScoreSet, p_tar: f64, c_miss: f64, c_fa: f64) -> Result<(f64, f64)> {
    if !(p_tar > 0.0 && p_tar < 1.0) {
        return Err(Error::Invalid(format!("p_tar must be in (0, 1), got {p_tar}")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Invalid("costs must be positive".into()));
    }
    let points = operating_points(scores)?;
    min_dcf_from_points(&points, p_tar, c_miss, c_fa)
}

pub(crate) fn min_dcf_from_points(
    points: &[OperatingPoint],
    p_tar: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<(f64, f64)> {
    let norm = (p_tar * c_miss).min((1.0 - p_tar) * c_fa);
    let mut best: Option<(f64, f64)> = None;
    for p in points {
        let cost = (p_tar * c_miss * p.frr + (1.0 - p_tar) * c_fa * p.far) / norm;
        if best.is_none_or(|(b, _)| cost < b) {
            best = Some((cost, p.threshold));
        }
    }
    best.ok_or_else(|| Error::Invalid("no operating points".into()))
}

#[derive(Debug, Clone)]
pub struct MinDcfEntry {
    pub p_tar: f64,
    pub value: f64,
    pub threshold: f64,
}

/// EER plus minDCF at each requested target prior, with class counts.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: Vec<MinDcfEntry>,
    pub num_targets: usize,
    pub num_nontargets: usize,
}

pub fn compute_metrics(scores: &ScoreSet, p_tars: &[f64]) -> Result<MetricReport> {
    let (targets, nontargets) = split_labeled(scores)?;
    let points = operating_points(scores)?;
    let (eer, eer_threshold) = eer_from_points(&points)?;
    let mut min_dcf = Vec::with_capacity(p_tars.len());
    for &p_tar in p_tars {
        if !(p_tar > 0.0 && p_tar < 1.0) {
            return Err(Error::Invalid(format!("p_tar must be in (0, 1), got {p_tar}")));
        }
        let (value, threshold) = min_dcf_from_points(&points, p_tar, 1.0, 1.0)?;
        min_dcf.push(MinDcfEntry {
            p_tar,
            value,
            threshold,
        });
    }
    Ok(MetricReport {
        eer,
        eer_threshold,
        min_dcf,
        num_targets: targets.len(),
        num_nontargets: nontargets.len(),
    })
}
