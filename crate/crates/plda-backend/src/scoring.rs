//! Back-end scoring: cosine similarity, exact PLDA log-likelihood ratios,
//! and the reduction that makes cosine a special case of PLDA.
//!
//! The pairwise PLDA score uses the precomputed kernel
//!
//! * `Q = W((B+2W)⁻¹ − (B+W)⁻¹)W`
//! * `P = W(B+2W)⁻¹W`
//! * `llr = ½(x₁ᵀQx₁ + x₂ᵀQx₂ + 2 x₁ᵀPx₂) + c₀`
//!
//! with `c₀ = ½(2 log|B+W| − log|B| − log|B+2W|)`, which restores the
//! additive constant usually dropped, so the kernel score equals the exact
//! ratio `log p(x₁,x₂)/(p(x₁)p(x₂))`. For `B = W = I` this collapses to an
//! affine function of the cosine (`Q = −I/6`, `P = I/3`), and more generally
//! the two back-ends coincide exactly when `Q = αI`, `P = βI` with `α < 0`,
//! `α + β ≥ 0`. Scores center inputs by the model's trained mean, so the
//! usual "mu ≈ 0" simplification is exact here.

use std::fmt::Write as _;
use std::path::Path;

use crate::embedding::{EmbeddingSet, TrialList};
use crate::error::{Error, Result};
use crate::evaluation::{ScoreSet, ScoredTrial};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{MarginalEvaluator, PldaModel, SetStats};
use crate::textio::{fmt_g17, parse_f64, write_file, LineSource};

/// Unit-norm slack accepted by [`cosine_score`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Default entrywise tolerance for [`check_cosine_equivalence`].
pub const DEFAULT_EQUIVALENCE_TOL: f64 = 1e-9;

/// Inner product of two unit-norm vectors.
pub fn cosine_score(x1: &Vector, x2: &Vector) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: x1.len(),
            got: x2.len(),
        });
    }
    for x in [x1, x2] {
        let norm = x.norm();
        if (norm - 1.0).abs() >= UNIT_NORM_TOL {
            return Err(Error::Invalid(format!(
                "cosine scoring requires unit-norm inputs, got norm {norm}"
            )));
        }
    }
    Ok(x1.dot(x2))
}

/// Precomputed pairwise-scoring kernel `(P, Q, c₀)` of a PLDA model.
#[derive(Debug, Clone)]
pub struct ScoringKernel {
    dim: usize,
    p: Matrix,
    q: Matrix,
    exact_const: f64,
}

impl ScoringKernel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    /// The additive constant restoring the exact LLR.
    pub fn exact_const(&self) -> f64 {
        self.exact_const
    }

    /// `(max eigenvalue of Q, min eigenvalue of P+Q)`: a valid kernel has
    /// the first negative and the second nonnegative up to roundoff.
    pub fn definiteness(&self) -> (f64, f64) {
        let q_eigs = linalg::symmetric_eigenvalues(&self.q);
        let pq_eigs = linalg::symmetric_eigenvalues(&(&self.p + &self.q));
        (q_eigs[0], pq_eigs[pq_eigs.len() - 1])
    }
}

/// Build the pairwise kernel from model precisions.
pub fn build_kernel(model: &PldaModel) -> Result<ScoringKernel> {
    let b = model.b_precision();
    let w = model.w_precision();

    let b_w = b + w;
    let b_2w = b + w * 2.0;
    let chol_bw = linalg::cholesky(&b_w, "B + W")?;
    let chol_b2w = linalg::cholesky(&b_2w, "B + 2W")?;
    let chol_b = linalg::cholesky(b, "B")?;

    let inv_bw = chol_bw.inverse();
    let inv_b2w = chol_b2w.inverse();
    let p = linalg::sym(&(w * &inv_b2w * w));
    let q = linalg::sym(&(w * (&inv_b2w - &inv_bw) * w));
    let exact_const = 0.5
        * (2.0 * linalg::log_det(&chol_bw) - linalg::log_det(&chol_b) - linalg::log_det(&chol_b2w));

    Ok(ScoringKernel {
        dim: model.dim(),
        p,
        q,
        exact_const,
    })
}

/// Exact pairwise log-likelihood ratio via the kernel. Inputs are centered
/// by `model_mu` internally.
pub fn pairwise_llr(kernel: &ScoringKernel, x1: &Vector, x2: &Vector, model_mu: &Vector) -> Result<f64> {
    if x1.len() != kernel.dim || x2.len() != kernel.dim || model_mu.len() != kernel.dim {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim,
            got: x1.len().max(x2.len()).max(model_mu.len()),
        });
    }
    let c1 = x1 - model_mu;
    let c2 = x2 - model_mu;
    let q1 = c1.dot(&(&kernel.q * &c1));
    let q2 = c2.dot(&(&kernel.q * &c2));
    let cross = c1.dot(&(&kernel.p * &c2));
    Ok(0.5 * (q1 + q2 + 2.0 * cross) + kernel.exact_const)
}

/// Log marginal density of a same-speaker set under the model, all constant
/// terms included. Permutation-invariant.
pub fn set_log_marginal(model: &PldaModel, xs: &[Vector]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut evaluator = MarginalEvaluator::new(model)?;
    let stats = accumulate(&evaluator, xs, model.dim())?;
    evaluator.log_marginal(&stats)
}

/// Set-vs-set log-likelihood ratio:
/// `log p(X₁ ∪ X₂) − log p(X₁) − log p(X₂)`.
///
/// Pooled statistics are combined with commutative sums and the two
/// single-set terms are added before subtracting, so swapping the arguments
/// gives a bit-identical result.
pub fn set_vs_set_llr(model: &PldaModel, xs1: &[Vector], xs2: &[Vector]) -> Result<f64> {
    if xs1.is_empty() || xs2.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut evaluator = MarginalEvaluator::new(model)?;
    let s1 = accumulate(&evaluator, xs1, model.dim())?;
    let s2 = accumulate(&evaluator, xs2, model.dim())?;
    llr_from_stats(&mut evaluator, &s1, &s2)
}

fn accumulate(evaluator: &MarginalEvaluator, xs: &[Vector], dim: usize) -> Result<SetStats> {
    let mut stats = SetStats::zero(dim);
    for x in xs {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        evaluator.accumulate(&mut stats, x);
    }
    Ok(stats)
}

fn llr_from_stats(evaluator: &mut MarginalEvaluator, s1: &SetStats, s2: &SetStats) -> Result<f64> {
    let pooled = SetStats::pooled(s1, s2);
    let joint = evaluator.log_marginal(&pooled)?;
    let separate = evaluator.log_marginal(s1)? + evaluator.log_marginal(s2)?;
    Ok(joint - separate)
}

/// Closed-form many-vs-many score for the identity model (`B = W = I`):
///
/// `K₁K₂/(1+K₁+K₂) · cos(mu₁, mu₂) + ½ C(K₁, K₂)`
///
/// with
///
/// `C = (K₁²+K₂²)/(1+K₁+K₂) − K₁²/(1+K₁) − K₂²/(1+K₂)
///      + D · log(1 + K₁K₂/(1+K₁+K₂))`.
///
/// The log term carries a factor of `D`: evaluating the exact set marginals
/// under `B = W = I` produces `D/2 · log((1+K₁)(1+K₂)/(1+K₁+K₂))` worth of
/// determinant terms, and the identity
/// `(1+K₁)(1+K₂)/(1+K₁+K₂) = 1 + K₁K₂/(1+K₁+K₂)` turns that into the form
/// above. The formula reproduces [`set_vs_set_llr`] exactly when both set
/// centroids have unit norm (e.g. repeated enrollment of one utterance);
/// otherwise the difference depends only on the centroid norms, never on
/// the angle between the sets.
pub fn closed_form_set_score(
    k1: usize,
    k2: usize,
    mu1: &Vector,
    mu2: &Vector,
    dim: usize,
) -> Result<f64> {
    if k1 < 1 || k2 < 1 {
        return Err(Error::Invalid("set sizes must be >= 1".into()));
    }
    if mu1.len() != dim || mu2.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: mu1.len().max(mu2.len()),
        });
    }
    let norm1 = mu1.norm();
    let norm2 = mu2.norm();
    if norm1 == 0.0 || norm2 == 0.0 {
        return Err(Error::Invalid("set centroid has zero norm".into()));
    }
    let cos = mu1.dot(mu2) / (norm1 * norm2);

    let (k1, k2) = (k1 as f64, k2 as f64);
    let denom = 1.0 + k1 + k2;
    let scale = k1 * k2 / denom;
    let c = (k1 * k1 + k2 * k2) / denom - k1 * k1 / (1.0 + k1) - k2 * k2 / (1.0 + k2)
        + dim as f64 * (1.0 + k1 * k2 / denom).ln();
    Ok(scale * cos + 0.5 * c)
}

/// Outcome of testing a kernel for cosine equivalence (`Q = αI`, `P = βI`
/// with `α < 0`, `α + β ≥ 0`).
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub is_cosine_equivalent: bool,
    pub alpha: f64,
    pub beta: f64,
    pub max_offdiag_deviation: f64,
    pub max_diag_deviation: f64,
    pub tolerance: f64,
}

/// Test whether the kernel reduces PLDA scoring to the cosine: both `P` and
/// `Q` must be multiples of the identity within `tol`, with `α < 0` and
/// `α + β ≥ −tol`.
pub fn check_cosine_equivalence(kernel: &ScoringKernel, tol: f64) -> EquivalenceReport {
    let dim = kernel.dim;
    let mean_diag = |m: &Matrix| (0..dim).map(|i| m[(i, i)]).sum::<f64>() / dim as f64;
    let alpha = mean_diag(&kernel.q);
    let beta = mean_diag(&kernel.p);

    let max_offdiag = linalg::max_abs_offdiag(&kernel.q).max(linalg::max_abs_offdiag(&kernel.p));
    let mut max_diag_dev: f64 = 0.0;
    for i in 0..dim {
        max_diag_dev = max_diag_dev
            .max((kernel.q[(i, i)] - alpha).abs())
            .max((kernel.p[(i, i)] - beta).abs());
    }

    EquivalenceReport {
        is_cosine_equivalent: max_offdiag <= tol
            && max_diag_dev <= tol
            && alpha < 0.0
            && alpha + beta >= -tol,
        alpha,
        beta,
        max_offdiag_deviation: max_offdiag,
        max_diag_deviation: max_diag_dev,
        tolerance: tol,
    }
}

/// Which back-end scores a trial list.
#[derive(Debug, Clone, Copy)]
pub enum ScoringBackend<'a> {
    Cosine,
    Plda(&'a PldaModel),
}

/// How a multi-utterance enrollment is folded for the cosine back-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MultiSessionPolicy {
    /// Average the enrollment embeddings, then re-length-normalize.
    #[default]
    CentroidRenorm,
}

/// Score every trial, in order.
///
/// The enroll id may name a single utterance or, failing that, a speaker id
/// whose utterances form the enrollment set; the test id must name a single
/// utterance. The cosine back-end folds multi-session enrollments per
/// `policy`; the PLDA back-end scores the enrollment set against the test
/// utterance with the exact set-vs-set ratio.
pub fn score_trials(
    backend: ScoringBackend,
    embeddings: &EmbeddingSet,
    trials: &TrialList,
    policy: MultiSessionPolicy,
) -> Result<ScoreSet> {
    let MultiSessionPolicy::CentroidRenorm = policy;
    let mut evaluator = match backend {
        ScoringBackend::Plda(model) => {
            if model.dim() != embeddings.dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    got: embeddings.dim(),
                });
            }
            Some(MarginalEvaluator::new(model)?)
        }
        ScoringBackend::Cosine => None,
    };

    // speaker-level enrollment groups, built once on first use
    let mut speaker_index: Option<std::collections::HashMap<&str, Vec<usize>>> = None;

    let mut scored = Vec::with_capacity(trials.trials.len());
    for (idx, trial) in trials.trials.iter().enumerate() {
        let line = idx + 1;
        let test = embeddings
            .by_utterance(&trial.test_id)
            .ok_or_else(|| Error::UnknownId {
                id: trial.test_id.clone(),
                line,
            })?;

        let enroll_vectors: Vec<&Vector> = match embeddings.by_utterance(&trial.enroll_id) {
            Some(record) => vec![&record.vector],
            None => {
                let index = speaker_index.get_or_insert_with(|| {
                    let mut map: std::collections::HashMap<&str, Vec<usize>> =
                        std::collections::HashMap::new();
                    for (i, r) in embeddings.records().iter().enumerate() {
                        if let Some(s) = &r.speaker_id {
                            map.entry(s.as_str()).or_default().push(i);
                        }
                    }
                    map
                });
                let group = index.get(trial.enroll_id.as_str()).ok_or_else(|| Error::UnknownId {
                    id: trial.enroll_id.clone(),
                    line,
                })?;
                group.iter().map(|&i| &embeddings.records()[i].vector).collect()
            }
        };

        let score = match (&backend, &mut evaluator) {
            (ScoringBackend::Cosine, _) => {
                let enroll = fold_enrollment(&enroll_vectors, &trial.enroll_id)?;
                cosine_score(&enroll, &test.vector)?
            }
            (ScoringBackend::Plda(model), Some(evaluator)) => {
                let mut s1 = SetStats::zero(model.dim());
                for v in &enroll_vectors {
                    if v.len() != model.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: model.dim(),
                            got: v.len(),
                        });
                    }
                    evaluator.accumulate(&mut s1, v);
                }
                let mut s2 = SetStats::zero(model.dim());
                evaluator.accumulate(&mut s2, &test.vector);
                llr_from_stats(evaluator, &s1, &s2)?
            }
            (ScoringBackend::Plda(_), None) => unreachable!(),
        };
        scored.push(ScoredTrial {
            enroll_id: trial.enroll_id.clone(),
            test_id: trial.test_id.clone(),
            score,
            label: trial.label,
        });
    }
    Ok(ScoreSet { trials: scored })
}

fn fold_enrollment(vectors: &[&Vector], enroll_id: &str) -> Result<Vector> {
    if vectors.len() == 1 {
        return Ok(vectors[0].clone());
    }
    let mut centroid = Vector::zeros(vectors[0].len());
    for v in vectors {
        centroid += *v;
    }
    centroid /= vectors.len() as f64;
    let norm = centroid.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm(enroll_id.to_string()));
    }
    Ok(centroid / norm)
}

// ---------------------------------------------------------------------------
// Score file format:
//   <enroll_id> <test_id> <score>        (same order as the trial file)
// ---------------------------------------------------------------------------

pub fn scores_to_string(scores: &ScoreSet) -> String {
    let mut out = String::new();
    for t in &scores.trials {
        let _ = writeln!(out, "{} {} {}", t.enroll_id, t.test_id, fmt_g17(t.score));
    }
    out
}

pub fn write_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    write_file(path, &scores_to_string(scores))
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let mut src = LineSource::open(path)?;
    let mut trials = Vec::new();
    while let Some((line_no, line)) = src.next_line() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected `<enroll> <test> <score>`, found {} token(s)", tokens.len()),
            ));
        }
        trials.push(ScoredTrial {
            enroll_id: tokens[0].to_string(),
            test_id: tokens[1].to_string(),
            score: parse_f64(path, line_no, tokens[2])?,
            label: None,
        });
    }
    Ok(ScoreSet { trials })
}
