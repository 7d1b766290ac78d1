//! Two-covariance PLDA: parameters, EM training, dataset marginal
//! log-likelihood, and model file I/O.
//!
//! The generative model draws a latent per-speaker mean `y_m ~ N(mu, B⁻¹)`
//! and utterances `x_{m,n} ~ N(y_m, W⁻¹)`; `B` and `W` are precision
//! matrices. EM alternates:
//!
//! * E-step: `L_m = B + n_m W`, posterior `y_m | X ~ N(L_m⁻¹ (B mu + W Σ_n
//!   x_{m,n}), L_m⁻¹)`;
//! * M-step: `mu = (1/M) Σ ŷ_m`, `B⁻¹ = (1/M) Σ (L_m⁻¹ + ŷ_m ŷ_mᵀ) − mu muᵀ`,
//!   `W⁻¹ = (1/N) Σ_m Σ_n (L_m⁻¹ + (ŷ_m − x_{m,n})(ŷ_m − x_{m,n})ᵀ)`.
//!
//! The diagonal variant keeps only the diagonals of both covariance
//! estimates before inversion, which is the Hadamard-square form of the
//! same expectations. Training starts from `B = W = I`, `mu = 0`, the
//! configuration under which scoring coincides with the cosine.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, Dyn};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::textio::{fmt_g17, parse_usize, write_file, LineSource};

pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Full,
    Diagonal,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Full => "full",
            ModelKind::Diagonal => "diagonal",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "full" => Some(ModelKind::Full),
            "diagonal" => Some(ModelKind::Diagonal),
            _ => None,
        }
    }
}

/// Two-covariance PLDA parameters `{mu, B, W}`.
///
/// `B` (between-class) and `W` (within-class) are symmetric positive
/// definite precision matrices; a `Diagonal` model additionally has exactly
/// zero off-diagonal entries. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct PldaModel {
    dim: usize,
    mu: Vector,
    b_precision: Matrix,
    w_precision: Matrix,
    kind: ModelKind,
    iterations_trained: usize,
}

impl PldaModel {
    pub fn new(mu: Vector, b_precision: Matrix, w_precision: Matrix, kind: ModelKind) -> Result<Self> {
        Self::with_iterations(mu, b_precision, w_precision, kind, 0)
    }

    pub(crate) fn with_iterations(
        mu: Vector,
        b_precision: Matrix,
        w_precision: Matrix,
        kind: ModelKind,
        iterations_trained: usize,
    ) -> Result<Self> {
        let dim = mu.len();
        if dim == 0 {
            return Err(Error::Invalid("model dimension must be >= 1".into()));
        }
        if !linalg::all_finite_vec(&mu) {
            return Err(Error::Invalid("mu has non-finite components".into()));
        }
        for (m, name) in [(&b_precision, "B"), (&w_precision, "W")] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.nrows(),
                });
            }
            if !linalg::all_finite_mat(m) {
                return Err(Error::Invalid(format!("{name} has non-finite entries")));
            }
            if linalg::max_abs_asymmetry(m) > SYMMETRY_TOL {
                return Err(Error::Invalid(format!("{name} is not symmetric")));
            }
            if kind == ModelKind::Diagonal && !linalg::is_exactly_diagonal(m) {
                return Err(Error::Invalid(format!(
                    "{name} of a diagonal model has nonzero off-diagonal entries"
                )));
            }
        }
        let b_precision = linalg::sym(&b_precision);
        let w_precision = linalg::sym(&w_precision);
        linalg::cholesky(&b_precision, "B")?;
        linalg::cholesky(&w_precision, "W")?;
        Ok(PldaModel {
            dim,
            mu,
            b_precision,
            w_precision,
            kind,
            iterations_trained,
        })
    }

    /// The EM starting point `B = W = I`, `mu = 0` — the cosine-equivalent
    /// configuration.
    pub fn init_identity(dim: usize) -> Result<Self> {
        PldaModel::new(
            Vector::zeros(dim),
            Matrix::identity(dim, dim),
            Matrix::identity(dim, dim),
            ModelKind::Full,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> &Vector {
        &self.mu
    }

    pub fn b_precision(&self) -> &Matrix {
        &self.b_precision
    }

    pub fn w_precision(&self) -> &Matrix {
        &self.w_precision
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn iterations_trained(&self) -> usize {
        self.iterations_trained
    }

    /// Between-class covariance `B⁻¹`.
    pub fn b_covariance(&self) -> Result<Matrix> {
        linalg::spd_inverse(&self.b_precision, "B")
    }

    /// Within-class covariance `W⁻¹`.
    pub fn w_covariance(&self) -> Result<Matrix> {
        linalg::spd_inverse(&self.w_precision, "W")
    }
}

/// Per-speaker posterior of the latent mean: `y_m | X ~ N(mean, precision⁻¹)`
/// with `precision = B + n_m W`.
#[derive(Debug, Clone)]
pub struct SpeakerPosterior {
    pub speaker_id: String,
    pub mean: Vector,
    pub precision: Matrix,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub speakers: Vec<SpeakerPosterior>,
}

/// E-step: infer the latent-mean posterior for every speaker.
pub fn e_step(model: &PldaModel, set: &EmbeddingSet) -> Result<PosteriorStats> {
    if set.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: set.dim(),
        });
    }
    let groups = set.speaker_groups()?;
    let b_mu = &model.b_precision * &model.mu;

    // L_m depends on n_m only; factor once per distinct count.
    let mut chol_cache: HashMap<usize, (Matrix, Cholesky<f64, Dyn>)> = HashMap::new();
    let mut speakers = Vec::with_capacity(groups.len());
    for (speaker_id, indices) in groups {
        let n_m = indices.len();
        if let Entry::Vacant(slot) = chol_cache.entry(n_m) {
            let l = &model.b_precision + &model.w_precision * n_m as f64;
            let chol = linalg::cholesky(&l, "posterior precision L_m")?;
            slot.insert((l, chol));
        }
        let (l, chol) = &chol_cache[&n_m];

        let mut sum = Vector::zeros(model.dim());
        for &i in &indices {
            sum += &set.records()[i].vector;
        }
        let rhs = &b_mu + &model.w_precision * sum;
        speakers.push(SpeakerPosterior {
            speaker_id: speaker_id.to_string(),
            mean: chol.solve(&rhs),
            precision: l.clone(),
            count: n_m,
        });
    }
    Ok(PosteriorStats { speakers })
}

/// M-step: re-estimate `{mu, B, W}` from posterior statistics.
///
/// For `ModelKind::Diagonal` the covariance estimates are reduced to their
/// diagonals before inversion, so the returned precisions have exactly zero
/// off-diagonal entries.
pub fn m_step(stats: &PosteriorStats, set: &EmbeddingSet, kind: ModelKind) -> Result<PldaModel> {
    let num_speakers = stats.speakers.len();
    if num_speakers == 0 {
        return Err(Error::EmptySet);
    }
    let dim = stats.speakers[0].mean.len();
    if set.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: set.dim(),
        });
    }
    let groups = set.speaker_groups()?;
    if groups.len() != num_speakers {
        return Err(Error::Invalid(format!(
            "posterior stats cover {num_speakers} speaker(s) but the set has {}",
            groups.len()
        )));
    }

    let m = num_speakers as f64;
    let n = set.len() as f64;

    let mut mu = Vector::zeros(dim);
    for sp in &stats.speakers {
        mu += &sp.mean;
    }
    mu /= m;

    // Posterior covariance L_m⁻¹; one inversion per distinct count.
    let mut linv_cache: HashMap<usize, Matrix> = HashMap::new();

    let mut b_cov = Matrix::zeros(dim, dim);
    let mut w_cov = Matrix::zeros(dim, dim);
    for sp in &stats.speakers {
        let indices = groups.get(sp.speaker_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!(
                "posterior stats mention speaker {:?} absent from the set",
                sp.speaker_id
            ))
        })?;
        if indices.len() != sp.count {
            return Err(Error::Invalid(format!(
                "speaker {:?}: stats count {} does not match set count {}",
                sp.speaker_id,
                sp.count,
                indices.len()
            )));
        }
        if let Entry::Vacant(slot) = linv_cache.entry(sp.count) {
            slot.insert(linalg::spd_inverse(&sp.precision, "L_m")?);
        }
        let l_inv = &linv_cache[&sp.count];

        b_cov += l_inv + &sp.mean * sp.mean.transpose();
        w_cov += l_inv * sp.count as f64;
        for &i in indices {
            let d = &sp.mean - &set.records()[i].vector;
            w_cov += &d * d.transpose();
        }
    }
    b_cov /= m;
    b_cov -= &mu * mu.transpose();
    w_cov /= n;

    let (b_precision, w_precision) = match kind {
        ModelKind::Full => (
            invert_covariance_estimate(&b_cov, "between-class covariance estimate")?,
            invert_covariance_estimate(&w_cov, "within-class covariance estimate")?,
        ),
        ModelKind::Diagonal => (
            invert_diagonal_estimate(&b_cov, "between-class covariance estimate")?,
            invert_diagonal_estimate(&w_cov, "within-class covariance estimate")?,
        ),
    };
    PldaModel::with_iterations(mu, b_precision, w_precision, kind, 0)
}

fn invert_covariance_estimate(cov: &Matrix, what: &str) -> Result<Matrix> {
    let sym = linalg::sym(cov);
    let (chol, _) = linalg::cholesky_with_jitter(&sym, what)?;
    Ok(linalg::sym(&chol.inverse()))
}

/// Invert only the diagonal of a covariance estimate; off-diagonals of the
/// result are exactly zero.
fn invert_diagonal_estimate(cov: &Matrix, what: &str) -> Result<Matrix> {
    let dim = cov.nrows();
    let mut diag: Vec<f64> = (0..dim).map(|i| cov[(i, i)]).collect();
    if diag.iter().any(|&d| d <= 0.0) {
        let jitter = linalg::SPD_JITTER_EPS * diag.iter().sum::<f64>() / dim as f64;
        for d in diag.iter_mut() {
            *d += jitter;
        }
        if diag.iter().any(|&d| d <= 0.0) {
            return Err(Error::NotPositiveDefinite(format!("{what} (diagonal)")));
        }
    }
    Ok(Matrix::from_diagonal(&Vector::from_iterator(
        dim,
        diag.iter().map(|d| 1.0 / d),
    )))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub kind: ModelKind,
    pub iterations: usize,
    /// Stop early once the relative log-likelihood improvement drops below
    /// this value. Off by default: iteration sweeps need every step.
    pub early_stop_rel_tol: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            kind: ModelKind::Full,
            iterations: 10,
            early_stop_rel_tol: None,
        }
    }
}

pub fn train(set: &EmbeddingSet, options: &TrainOptions) -> Result<PldaModel> {
    train_with_snapshots(set, options, |_, _| {})
}

/// EM training from the identity initialization. The snapshot hook receives
/// `(iteration, model)` after every completed iteration; with zero
/// iterations the identity model itself is returned.
pub fn train_with_snapshots(
    set: &EmbeddingSet,
    options: &TrainOptions,
    mut snapshot_hook: impl FnMut(usize, &PldaModel),
) -> Result<PldaModel> {
    let groups = set.speaker_groups()?;
    if groups.len() < 2 {
        return Err(Error::Invalid(format!(
            "training requires at least 2 speakers, found {}",
            groups.len()
        )));
    }
    drop(groups);

    let mut model = PldaModel::init_identity(set.dim())?;
    let mut prev_ll = match options.early_stop_rel_tol {
        Some(_) => Some(log_likelihood(&model, set)?),
        None => None,
    };
    for iteration in 1..=options.iterations {
        let stats = e_step(&model, set)?;
        model = m_step(&stats, set, options.kind)?;
        model.iterations_trained = iteration;
        snapshot_hook(iteration, &model);

        if let Some(tol) = options.early_stop_rel_tol {
            let ll = log_likelihood(&model, set)?;
            let prev = prev_ll.expect("previous log-likelihood tracked when early stopping");
            if (ll - prev).abs() <= tol * prev.abs() {
                break;
            }
            prev_ll = Some(ll);
        }
    }
    Ok(model)
}

/// Dataset marginal log-likelihood `Σ_m log p(X_m)` under the model, with
/// every constant term included.
pub fn log_likelihood(model: &PldaModel, set: &EmbeddingSet) -> Result<f64> {
    let groups = set.speaker_groups()?;
    if set.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: set.dim(),
        });
    }
    let mut evaluator = MarginalEvaluator::new(model)?;
    let mut total = 0.0;
    for (_, indices) in groups {
        let mut stats = SetStats::zero(model.dim());
        for &i in &indices {
            evaluator.accumulate(&mut stats, &set.records()[i].vector);
        }
        total += evaluator.log_marginal(&stats)?;
    }
    Ok(total)
}

/// Sufficient statistics of a centered same-speaker set: count, component
/// sum, and the accumulated quadratic form `Σ (x−mu)ᵀ W (x−mu)`.
///
/// Marginals evaluated from these statistics are invariant to the order the
/// vectors were accumulated in up to float commutativity, and two sets can
/// be pooled with [`SetStats::pooled`], which keeps set-vs-set scores
/// exactly symmetric.
#[derive(Debug, Clone)]
pub(crate) struct SetStats {
    pub count: usize,
    pub sum: Vector,
    pub quad: f64,
}

impl SetStats {
    pub(crate) fn zero(dim: usize) -> SetStats {
        SetStats {
            count: 0,
            sum: Vector::zeros(dim),
            quad: 0.0,
        }
    }

    pub(crate) fn pooled(a: &SetStats, b: &SetStats) -> SetStats {
        SetStats {
            count: a.count + b.count,
            sum: &a.sum + &b.sum,
            quad: a.quad + b.quad,
        }
    }
}

/// Evaluates the closed-form marginal `log p(X)` of a same-speaker set:
///
/// `½ (sᵀW L⁻¹ W s − Σ xᵀWx + log|B| + n log|W| − log|B+nW| − nD log 2π)`
///
/// where `s = Σ x` over the centered set and `L = B + nW`. Factorizations
/// of `L` are cached per set size.
pub(crate) struct MarginalEvaluator {
    b: Matrix,
    w: Matrix,
    mu: Vector,
    log_det_b: f64,
    log_det_w: f64,
    dim: usize,
    chol_cache: HashMap<usize, (Cholesky<f64, Dyn>, f64)>,
}

impl MarginalEvaluator {
    pub(crate) fn new(model: &PldaModel) -> Result<Self> {
        let chol_b = linalg::cholesky(&model.b_precision, "B")?;
        let chol_w = linalg::cholesky(&model.w_precision, "W")?;
        Ok(MarginalEvaluator {
            b: model.b_precision.clone(),
            w: model.w_precision.clone(),
            mu: model.mu.clone(),
            log_det_b: linalg::log_det(&chol_b),
            log_det_w: linalg::log_det(&chol_w),
            dim: model.dim(),
            chol_cache: HashMap::new(),
        })
    }

    /// Center `x` by the model mean and fold it into the statistics.
    pub(crate) fn accumulate(&self, stats: &mut SetStats, x: &Vector) {
        let centered = x - &self.mu;
        let wx = &self.w * &centered;
        stats.quad += centered.dot(&wx);
        stats.sum += centered;
        stats.count += 1;
    }

    pub(crate) fn log_marginal(&mut self, stats: &SetStats) -> Result<f64> {
        let n = stats.count;
        if n == 0 {
            return Err(Error::EmptySet);
        }
        if let Entry::Vacant(slot) = self.chol_cache.entry(n) {
            let l = &self.b + &self.w * n as f64;
            let chol = linalg::cholesky(&l, "B + nW")?;
            let log_det_l = linalg::log_det(&chol);
            slot.insert((chol, log_det_l));
        }
        let (chol, log_det_l) = &self.chol_cache[&n];

        let ws = &self.w * &stats.sum;
        let pooled_quad = ws.dot(&chol.solve(&ws));
        let n_f = n as f64;
        Ok(0.5
            * (pooled_quad - stats.quad + self.log_det_b + n_f * self.log_det_w - log_det_l
                - n_f * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()))
    }
}

// ---------------------------------------------------------------------------
// Model file format:
//   PLDA <D> <full|diagonal> <iterations>
//   MU <D floats>
//   B
//   <D rows of D floats>
//   W
//   <D rows of D floats>
// ---------------------------------------------------------------------------

pub fn model_to_string(model: &PldaModel) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "PLDA {} {} {}",
        model.dim,
        model.kind.as_str(),
        model.iterations_trained
    );
    let mu: Vec<String> = model.mu.iter().map(|v| fmt_g17(*v)).collect();
    let _ = writeln!(out, "MU {}", mu.join(" "));
    for (tag, m) in [("B", &model.b_precision), ("W", &model.w_precision)] {
        let _ = writeln!(out, "{tag}");
        for i in 0..model.dim {
            let row: Vec<String> = (0..model.dim).map(|j| fmt_g17(m[(i, j)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

pub fn save_model(model: &PldaModel, path: &Path) -> Result<()> {
    write_file(path, &model_to_string(model))
}

pub fn load_model(path: &Path) -> Result<PldaModel> {
    let mut src = LineSource::open(path)?;
    let (line_no, header) = src.expect_line("PLDA header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != "PLDA" {
        return Err(Error::parse(
            path,
            line_no,
            "expected header `PLDA <D> <kind> <iterations>`",
        ));
    }
    let dim = parse_usize(path, line_no, tokens[1])?;
    let kind = ModelKind::parse(tokens[2])
        .ok_or_else(|| Error::parse(path, line_no, format!("unknown model kind {:?}", tokens[2])))?;
    let iterations = parse_usize(path, line_no, tokens[3])?;

    let (line_no, mu_line) = src.expect_line("MU row")?;
    let tokens: Vec<&str> = mu_line.split_whitespace().collect();
    if tokens.first() != Some(&"MU") {
        return Err(Error::parse(path, line_no, "expected `MU <floats>`"));
    }
    let mu = Vector::from_vec(crate::textio::parse_floats(path, line_no, &tokens[1..], dim)?);

    let mut read_matrix = |tag: &str| -> Result<Matrix> {
        let (line_no, tag_line) = src.expect_line(tag)?;
        if tag_line.trim() != tag {
            return Err(Error::parse(path, line_no, format!("expected matrix tag {tag:?}")));
        }
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            let (line_no, row) = src.expect_line("matrix row")?;
            let tokens: Vec<&str> = row.split_whitespace().collect();
            let values = crate::textio::parse_floats(path, line_no, &tokens, dim)?;
            for (j, v) in values.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    };
    let b = read_matrix("B")?;
    let w = read_matrix("W")?;
    src.expect_eof()?;

    PldaModel::with_iterations(mu, b, w, kind, iterations).map_err(|e| match e {
        Error::Invalid(msg) => Error::parse(path, 0, msg),
        Error::NotPositiveDefinite(what) => {
            Error::parse(path, 0, format!("{what} is not positive definite"))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;
    use crate::synthesis::{self, Preset, SessionCount, SynthSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    fn rec(utt: &str, spk: &str, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            utterance_id: utt.to_string(),
            speaker_id: Some(spk.to_string()),
            vector: Vector::from_vec(v.to_vec()),
        }
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        let diff: f64 = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
        let base: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / base
    }

    #[test]
    fn init_identity_values() {
        let m = PldaModel::init_identity(2).unwrap();
        assert_eq!(m.b_precision(), &Matrix::identity(2, 2));
        assert_eq!(m.w_precision(), &Matrix::identity(2, 2));
        assert_eq!(m.mu(), &Vector::zeros(2));
        assert_eq!(m.kind(), ModelKind::Full);
        assert_eq!(m.iterations_trained(), 0);

        let scalar = PldaModel::init_identity(1).unwrap();
        assert_eq!(scalar.b_precision()[(0, 0)], 1.0);
        assert_eq!(scalar.w_precision()[(0, 0)], 1.0);
    }

    #[test]
    fn e_step_identity_two_utterances() {
        let model = PldaModel::init_identity(2).unwrap();
        let set = EmbeddingSet::from_records(
            2,
            vec![rec("a", "s1", &[1.0, 0.0]), rec("b", "s1", &[0.0, 1.0])],
        )
        .unwrap();
        let stats = e_step(&model, &set).unwrap();
        assert_eq!(stats.speakers.len(), 1);
        let sp = &stats.speakers[0];
        assert_eq!(sp.precision, Matrix::identity(2, 2) * 3.0);
        assert_relative_eq!(sp.mean[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(sp.mean[1], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn e_step_single_utterance() {
        let model = PldaModel::init_identity(2).unwrap();
        let set = EmbeddingSet::from_records(2, vec![rec("a", "s1", &[0.6, 0.8])]).unwrap();
        let stats = e_step(&model, &set).unwrap();
        let sp = &stats.speakers[0];
        assert_relative_eq!(sp.mean[0], 0.3, epsilon = 1e-14);
        assert_relative_eq!(sp.mean[1], 0.4, epsilon = 1e-14);
    }

    #[test]
    fn e_step_matches_independent_linear_solver() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let b = synthesis::random_spd(3, &mut rng);
        let w = synthesis::random_spd(3, &mut rng);
        let mu = Vector::from_vec(vec![0.3, -0.1, 0.7]);
        let model = PldaModel::new(mu.clone(), b.clone(), w.clone(), ModelKind::Full).unwrap();
        let set = EmbeddingSet::from_records(
            3,
            vec![
                rec("a", "s1", &[1.0, 2.0, -0.5]),
                rec("b", "s1", &[0.0, 1.5, 0.25]),
                rec("c", "s1", &[-1.0, 0.5, 1.0]),
            ],
        )
        .unwrap();
        let stats = e_step(&model, &set).unwrap();
        let sp = &stats.speakers[0];

        // independent route: LU solve of L y = B mu + W Σx
        let sum: Vector = set.records().iter().map(|r| r.vector.clone()).sum();
        let l = &b + &w * 3.0;
        let rhs = &b * &mu + &w * sum;
        let oracle = l.lu().solve(&rhs).unwrap();
        for d in 0..3 {
            assert_relative_eq!(sp.mean[d], oracle[d], epsilon = 1e-10);
        }
    }

    #[test]
    fn m_step_single_speaker_collapses_to_posterior_covariance() {
        let model = PldaModel::init_identity(2).unwrap();
        let set = EmbeddingSet::from_records(
            2,
            vec![rec("a", "s1", &[1.0, 0.0]), rec("b", "s1", &[0.0, 1.0])],
        )
        .unwrap();
        let stats = e_step(&model, &set).unwrap();
        let next = m_step(&stats, &set, ModelKind::Full).unwrap();
        // B⁻¹ = L⁻¹ + ŷŷᵀ − μμᵀ = L⁻¹ when M = 1, so B = L = 3I
        assert!(rel_frob(next.b_precision(), &(Matrix::identity(2, 2) * 3.0)) < 1e-12);
    }

    #[test]
    fn m_step_matches_brute_force_accumulation() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let b = synthesis::random_spd(2, &mut rng);
        let w = synthesis::random_spd(2, &mut rng);
        let model =
            PldaModel::new(Vector::from_vec(vec![0.1, -0.2]), b, w, ModelKind::Full).unwrap();
        let set = EmbeddingSet::from_records(
            2,
            vec![
                rec("a", "s1", &[1.0, 0.5]),
                rec("b", "s1", &[0.5, 1.0]),
                rec("c", "s2", &[-1.0, 0.0]),
                rec("d", "s2", &[-0.5, -0.5]),
                rec("e", "s2", &[0.0, -1.0]),
            ],
        )
        .unwrap();
        let stats = e_step(&model, &set).unwrap();
        let next = m_step(&stats, &set, ModelKind::Full).unwrap();

        // oracle: accumulate the two covariance sums directly per speaker
        let m = 2.0;
        let n = 5.0;
        let mut mu = Vector::zeros(2);
        for sp in &stats.speakers {
            mu += &sp.mean;
        }
        mu /= m;
        let mut b_cov = Matrix::zeros(2, 2);
        let mut w_cov = Matrix::zeros(2, 2);
        for sp in &stats.speakers {
            let l_inv = sp.precision.clone().try_inverse().unwrap();
            b_cov += &l_inv + &sp.mean * sp.mean.transpose();
            for r in set.records() {
                if r.speaker_id.as_deref() == Some(sp.speaker_id.as_str()) {
                    let d = &sp.mean - &r.vector;
                    w_cov += &l_inv + &d * d.transpose();
                }
            }
        }
        b_cov /= m;
        b_cov -= &mu * mu.transpose();
        w_cov /= n;

        assert!(rel_frob(&next.b_covariance().unwrap(), &b_cov) < 1e-9);
        assert!(rel_frob(&next.w_covariance().unwrap(), &w_cov) < 1e-9);
        for d in 0..2 {
            assert_relative_eq!(next.mu()[d], mu[d], epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_m_step_has_exactly_zero_offdiagonals() {
        let spec = SynthSpec::from_preset(Preset::CorrelatedBetween, 4, 30, SessionCount::Fixed(3), 5);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let model = PldaModel::init_identity(4).unwrap();
        let stats = e_step(&model, &set).unwrap();
        let next = m_step(&stats, &set, ModelKind::Diagonal).unwrap();
        assert!(linalg::is_exactly_diagonal(next.b_precision()));
        assert!(linalg::is_exactly_diagonal(next.w_precision()));
        assert_eq!(next.kind(), ModelKind::Diagonal);
    }

    #[test]
    fn train_zero_iterations_is_identity() {
        let spec = SynthSpec::from_preset(Preset::Isotropic, 3, 10, SessionCount::Fixed(2), 2);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let options = TrainOptions {
            iterations: 0,
            ..Default::default()
        };
        let model = train(&set, &options).unwrap();
        let identity = PldaModel::init_identity(3).unwrap();
        assert_eq!(model.b_precision(), identity.b_precision());
        assert_eq!(model.w_precision(), identity.w_precision());
        assert_eq!(model.mu(), identity.mu());
        assert_eq!(model.iterations_trained(), 0);
    }

    #[test]
    fn train_requires_two_speakers() {
        let set = EmbeddingSet::from_records(
            2,
            vec![rec("a", "s1", &[1.0, 0.0]), rec("b", "s1", &[0.0, 1.0])],
        )
        .unwrap();
        assert!(train(&set, &TrainOptions::default()).is_err());
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let spec = SynthSpec::from_preset(Preset::CorrelatedBetween, 4, 120, SessionCount::Fixed(4), 9);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let mut lls = vec![log_likelihood(&PldaModel::init_identity(4).unwrap(), &set).unwrap()];
        let options = TrainOptions {
            iterations: 8,
            ..Default::default()
        };
        train_with_snapshots(&set, &options, |_, model| {
            lls.push(log_likelihood(model, &set).unwrap());
        })
        .unwrap();
        assert_eq!(lls.len(), 9);
        for w in lls.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs(),
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn em_recovers_generative_covariances() {
        let mut spec = SynthSpec::from_preset(Preset::Isotropic, 4, 800, SessionCount::Fixed(6), 31);
        spec.b_cov = synthesis::banded_spd(4, 0.5);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let options = TrainOptions {
            iterations: 10,
            ..Default::default()
        };
        let model = train(&set, &options).unwrap();
        assert!(rel_frob(&model.b_covariance().unwrap(), &spec.b_cov) < 0.15);
        assert!(rel_frob(&model.w_covariance().unwrap(), &spec.w_cov) < 0.15);
        assert_eq!(model.iterations_trained(), 10);
    }

    #[test]
    fn em_fixed_point_drift_shrinks_with_sample_size() {
        let drift = |speakers: usize, seed: u64| {
            let mut spec =
                SynthSpec::from_preset(Preset::Isotropic, 3, speakers, SessionCount::Fixed(5), seed);
            spec.b_cov = synthesis::banded_spd(3, 0.4);
            let (set, _) = synthesis::sample(&spec).unwrap();
            let truth = PldaModel::new(
                spec.mu.clone(),
                linalg::spd_inverse(&spec.b_cov, "b").unwrap(),
                linalg::spd_inverse(&spec.w_cov, "w").unwrap(),
                ModelKind::Full,
            )
            .unwrap();
            let stats = e_step(&truth, &set).unwrap();
            let next = m_step(&stats, &set, ModelKind::Full).unwrap();
            rel_frob(&next.b_covariance().unwrap(), &spec.b_cov)
                + rel_frob(&next.w_covariance().unwrap(), &spec.w_cov)
        };
        let small = drift(60, 13);
        let large = drift(2000, 13);
        assert!(large < small, "drift should shrink with N: {small} vs {large}");
        assert!(large < 0.1);
    }

    #[test]
    fn early_stop_halts_before_iteration_budget() {
        let spec = SynthSpec::from_preset(Preset::Isotropic, 3, 200, SessionCount::Fixed(8), 19);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let model = train(
            &set,
            &TrainOptions {
                kind: ModelKind::Full,
                iterations: 50,
                early_stop_rel_tol: Some(1e-6),
            },
        )
        .unwrap();
        assert!(
            model.iterations_trained() < 50,
            "expected early stop, ran all {} iterations",
            model.iterations_trained()
        );
        assert!(model.iterations_trained() >= 1);
    }

    #[test]
    fn training_keeps_singleton_speakers() {
        // session counts 1..=3 guarantee speakers with a single utterance
        let spec = SynthSpec::from_preset(Preset::Isotropic, 3, 60, SessionCount::Range(1, 3), 29);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let singletons = set
            .speaker_groups()
            .unwrap()
            .values()
            .filter(|v| v.len() == 1)
            .count();
        assert!(singletons > 0, "seed should produce singleton speakers");
        let model = train(
            &set,
            &TrainOptions {
                iterations: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.iterations_trained(), 5);
    }

    #[test]
    fn log_likelihood_scalar_reference_value() {
        let model = PldaModel::init_identity(1).unwrap();
        let set = EmbeddingSet::from_records(1, vec![rec("a", "s1", &[1.0])]).unwrap();
        let ll = log_likelihood(&model, &set).unwrap();
        let expected = 0.5 * (0.5 - 1.0 - 2f64.ln() - (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(ll, expected, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_invariant_to_within_speaker_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let b = synthesis::random_spd(2, &mut rng);
        let w = synthesis::random_spd(2, &mut rng);
        let model = PldaModel::new(Vector::from_vec(vec![0.2, 0.1]), b, w, ModelKind::Full).unwrap();
        let set_a = EmbeddingSet::from_records(
            2,
            vec![
                rec("a", "s1", &[1.0, 0.0]),
                rec("b", "s1", &[0.0, 1.0]),
                rec("c", "s1", &[1.0, 1.0]),
            ],
        )
        .unwrap();
        let set_b = EmbeddingSet::from_records(
            2,
            vec![
                rec("c", "s1", &[1.0, 1.0]),
                rec("a", "s1", &[1.0, 0.0]),
                rec("b", "s1", &[0.0, 1.0]),
            ],
        )
        .unwrap();
        let la = log_likelihood(&model, &set_a).unwrap();
        let lb = log_likelihood(&model, &set_b).unwrap();
        assert_relative_eq!(la, lb, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        for case in 0..20 {
            let dim = 1 + case % 3;
            let b = synthesis::random_spd(dim, &mut rng);
            let w = synthesis::random_spd(dim, &mut rng);
            let mu = Vector::from_fn(dim, |_, _| {
                rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
            });
            let model = PldaModel::new(mu.clone(), b.clone(), w.clone(), ModelKind::Full).unwrap();
            let b_cov = linalg::spd_inverse(&b, "b").unwrap();
            let w_cov = linalg::spd_inverse(&w, "w").unwrap();

            let n_m = 1 + case % 3;
            let mut records = Vec::new();
            let mut xs = Vec::new();
            for n in 0..n_m {
                let x = Vector::from_fn(dim, |_, _| {
                    rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
                });
                records.push(EmbeddingRecord {
                    utterance_id: format!("u{n}"),
                    speaker_id: Some("s1".into()),
                    vector: x.clone(),
                });
                xs.push(x);
            }
            let set = EmbeddingSet::from_records(dim, records).unwrap();
            let got = log_likelihood(&model, &set).unwrap();
            let expected = synthesis::oracle_log_marginal(&mu, &b_cov, &w_cov, &xs).unwrap();
            assert_relative_eq!(got, expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn model_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let identity = PldaModel::init_identity(3).unwrap();
        save_model(&identity, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.mu(), identity.mu());
        assert_eq!(back.b_precision(), identity.b_precision());
        assert_eq!(back.w_precision(), identity.w_precision());
        assert_eq!(back.kind(), ModelKind::Full);
        assert_eq!(back.iterations_trained(), 0);
    }

    #[test]
    fn load_rejects_asymmetric_b() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        std::fs::write(
            &path,
            "PLDA 2 full 0\nMU 0.0 0.0\nB\n1.0 0.5\n0.0 1.0\nW\n1.0 0.0\n0.0 1.0\n",
        )
        .unwrap();
        match load_model(&path) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("not symmetric")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_non_spd() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        std::fs::write(
            &path,
            "PLDA 2 full 0\nMU 0.0 0.0\nB\n1.0 2.0\n2.0 1.0\nW\n1.0 0.0\n0.0 1.0\n",
        )
        .unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn trained_model_round_trip_preserves_parameters() {
        let spec = SynthSpec::from_preset(Preset::CorrelatedBetween, 8, 100, SessionCount::Fixed(4), 77);
        let (set, _) = synthesis::sample(&spec).unwrap();
        let model = train(
            &set,
            &TrainOptions {
                iterations: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.txt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.mu(), model.mu());
        assert_eq!(back.b_precision(), model.b_precision());
        assert_eq!(back.w_precision(), model.w_precision());
        assert_eq!(back.iterations_trained(), 3);
    }
}
