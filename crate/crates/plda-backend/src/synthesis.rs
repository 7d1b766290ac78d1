//! Sampler for the two-covariance generative model and a brute-force
//! joint-Gaussian oracle.
//!
//! The sampler draws per-speaker means `y_m ~ N(mu, b_cov)` and utterances
//! `x_{m,n} ~ N(y_m, w_cov)` from a single ChaCha20 stream keyed by the
//! seed, so output is byte-reproducible. The oracle evaluates the marginal
//! density of a same-speaker set directly on the stacked `n*D`-dimensional
//! Gaussian (covariance `ones(n,n) ⊗ b_cov + I_n ⊗ w_cov`), giving an
//! implementation-independent ground truth for marginal likelihoods and
//! log-likelihood ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::embedding::{EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Built-in covariance regimes.
///
/// `Isotropic` (`b_cov = w_cov = I`) models the domain-matched condition;
/// `CorrelatedBetween` swaps in a banded between-class covariance
/// (`rho^|i-j|` with `rho = 0.6`) to model broken dimensional independence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Isotropic,
    CorrelatedBetween,
}

pub const CORRELATED_BETWEEN_RHO: f64 = 0.6;

/// Sessions per speaker: fixed, or drawn uniformly from an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionCount {
    Fixed(usize),
    Range(usize, usize),
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub dim: usize,
    pub speakers: usize,
    pub sessions: SessionCount,
    pub mu: Vector,
    /// Between-class covariance (the model's `B⁻¹`).
    pub b_cov: Matrix,
    /// Within-class covariance (the model's `W⁻¹`).
    pub w_cov: Matrix,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_preset(
        preset: Preset,
        dim: usize,
        speakers: usize,
        sessions: SessionCount,
        seed: u64,
    ) -> Self {
        let b_cov = match preset {
            Preset::Isotropic => Matrix::identity(dim, dim),
            Preset::CorrelatedBetween => banded_spd(dim, CORRELATED_BETWEEN_RHO),
        };
        SynthSpec {
            dim,
            speakers,
            sessions,
            mu: Vector::zeros(dim),
            b_cov,
            w_cov: Matrix::identity(dim, dim),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.speakers == 0 {
            return Err(Error::Invalid("dim and speakers must be >= 1".into()));
        }
        match self.sessions {
            SessionCount::Fixed(n) if n >= 1 => {}
            SessionCount::Range(lo, hi) if lo >= 1 && lo <= hi => {}
            _ => return Err(Error::Invalid("sessions must be >= 1 (and lo <= hi)".into())),
        }
        if self.mu.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.mu.len(),
            });
        }
        for (m, name) in [(&self.b_cov, "b_cov"), (&self.w_cov, "w_cov")] {
            if m.nrows() != self.dim || m.ncols() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: m.nrows(),
                });
            }
            if !linalg::all_finite_mat(m) {
                return Err(Error::Invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Banded SPD matrix with entries `rho^|i-j|` (positive definite for
/// `|rho| < 1`).
pub fn banded_spd(dim: usize, rho: f64) -> Matrix {
    Matrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Well-conditioned random SPD matrix, for randomized tests.
pub fn random_spd(dim: usize, rng: &mut impl Rng) -> Matrix {
    let r = Matrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    linalg::sym(&(&r * r.transpose() / dim as f64 + Matrix::identity(dim, dim) * 0.25))
}

fn standard_normal_vector(dim: usize, rng: &mut impl Rng) -> Vector {
    Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draw a labeled embedding set from the generative model.
///
/// Returns the set and the latent per-speaker means, in speaker order.
/// Per speaker the draw order is: session count (if ranged), the `D`
/// components of `y_m`, then each utterance's `D` components.
pub fn sample(spec: &SynthSpec) -> Result<(EmbeddingSet, Vec<(String, Vector)>)> {
    spec.validate()?;
    let chol_b = linalg::cholesky(&spec.b_cov, "b_cov")?;
    let chol_w = linalg::cholesky(&spec.w_cov, "w_cov")?;
    let lb = chol_b.l();
    let lw = chol_w.l();

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut set = EmbeddingSet::new(spec.dim)?;
    let mut truth = Vec::with_capacity(spec.speakers);

    let width = (spec.speakers.max(2) - 1).ilog10() as usize + 1;
    for m in 0..spec.speakers {
        let speaker_id = format!("s{m:0width$}");
        let n_m = match spec.sessions {
            SessionCount::Fixed(n) => n,
            SessionCount::Range(lo, hi) => rng.random_range(lo..=hi),
        };
        let y = &spec.mu + &lb * standard_normal_vector(spec.dim, &mut rng);
        for n in 0..n_m {
            let x = &y + &lw * standard_normal_vector(spec.dim, &mut rng);
            set.push(EmbeddingRecord {
                utterance_id: format!("{speaker_id}-u{n:03}"),
                speaker_id: Some(speaker_id.clone()),
                vector: x,
            })?;
        }
        truth.push((speaker_id, y));
    }
    Ok((set, truth))
}

/// Deterministic labeled trial list over a fully labeled set: every
/// within-speaker pair is a target; each utterance is paired with the
/// matching-index utterances of the next three speakers as nontargets.
pub fn make_trial_list(set: &EmbeddingSet) -> Result<crate::embedding::TrialList> {
    use crate::embedding::{Trial, TrialLabel, TrialList};
    let groups = set.speaker_groups()?;
    let speakers: Vec<(&str, &Vec<usize>)> = groups.iter().map(|(s, v)| (*s, v)).collect();
    let mut trials = Vec::new();
    for (_, indices) in &speakers {
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                trials.push(Trial {
                    enroll_id: set.records()[i].utterance_id.clone(),
                    test_id: set.records()[j].utterance_id.clone(),
                    label: Some(TrialLabel::Target),
                });
            }
        }
    }
    for (s, (_, indices)) in speakers.iter().enumerate() {
        for offset in 1..=3usize {
            let (_, other) = speakers[(s + offset) % speakers.len()];
            for (k, &i) in indices.iter().enumerate() {
                let &j = &other[k % other.len()];
                if set.records()[i].speaker_id == set.records()[j].speaker_id {
                    continue;
                }
                trials.push(Trial {
                    enroll_id: set.records()[i].utterance_id.clone(),
                    test_id: set.records()[j].utterance_id.clone(),
                    label: Some(TrialLabel::Nontarget),
                });
            }
        }
    }
    Ok(TrialList { trials })
}

/// Exact log marginal density of a same-speaker set under the generative
/// model, evaluated on the stacked joint Gaussian.
pub fn oracle_log_marginal(mu: &Vector, b_cov: &Matrix, w_cov: &Matrix, xs: &[Vector]) -> Result<f64> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let dim = mu.len();
    for x in xs {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
    }

    let nd = n * dim;
    let mut cov = Matrix::zeros(nd, nd);
    let mut centered = Vector::zeros(nd);
    for (bi, x) in xs.iter().enumerate() {
        for bj in 0..n {
            let block = if bi == bj { b_cov + w_cov } else { b_cov.clone() };
            cov.view_mut((bi * dim, bj * dim), (dim, dim)).copy_from(&block);
        }
        centered.rows_mut(bi * dim, dim).copy_from(&(x - mu));
    }

    let chol = linalg::cholesky(&cov, "stacked oracle covariance")?;
    let log_det = linalg::log_det(&chol);
    let solved = chol.solve(&centered);
    let quad = centered.dot(&solved);
    Ok(-0.5 * (quad + log_det + nd as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Oracle log-likelihood ratio: same-speaker vs independent-speakers for
/// two sets.
pub fn oracle_llr(
    mu: &Vector,
    b_cov: &Matrix,
    w_cov: &Matrix,
    xs1: &[Vector],
    xs2: &[Vector],
) -> Result<f64> {
    let mut union: Vec<Vector> = Vec::with_capacity(xs1.len() + xs2.len());
    union.extend_from_slice(xs1);
    union.extend_from_slice(xs2);
    Ok(oracle_log_marginal(mu, b_cov, w_cov, &union)?
        - oracle_log_marginal(mu, b_cov, w_cov, xs1)?
        - oracle_log_marginal(mu, b_cov, w_cov, xs2)?)
}
