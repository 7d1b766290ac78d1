//! Covariance diagnostics: between-/within-class scatter, the diagonal
//! index `trace(G)/sum(G)`, heatmap export, and the optional LDA transform.
//!
//! The default scatter normalization divides both matrices by the utterance
//! count N, which reduces the between-class scatter to the ordinary sample
//! covariance when every speaker has one utterance. The speaker-count (1/M)
//! variant weighs speakers by their session counts and is kept selectable
//! for literal reproduction; with unequal session counts it is not
//! guaranteed positive semidefinite.

use std::fmt::Write as _;
use std::path::Path;

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::textio::{fmt_g17, parse_f64, write_file, LineSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScatterNormalization {
    /// Divide by the number of utterances N.
    #[default]
    ByUtterances,
    /// Divide by the number of speakers M.
    BySpeakers,
}

/// Between- and within-class second moments of a labeled set.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub between: Matrix,
    pub within: Matrix,
    pub global_mean: Vector,
    /// Per-speaker means, sorted by speaker id.
    pub per_speaker_means: Vec<(String, Vector)>,
}

/// Scatter matrices from per-speaker means:
///
/// `between = (1/N) Σ_m n_m y_m y_mᵀ − mu₀ mu₀ᵀ`
/// `within  = (1/N) Σ_m Σ_n (x_{m,n} − y_m)(x_{m,n} − y_m)ᵀ`
///
/// with `y_m` the speaker means and `mu₀` the global mean (replace `1/N`
/// with `1/M` under [`ScatterNormalization::BySpeakers`]).
pub fn compute_scatter(set: &EmbeddingSet, norm: ScatterNormalization) -> Result<ScatterPair> {
    let groups = set.speaker_groups()?;
    if groups.len() < 2 {
        return Err(Error::Invalid(format!(
            "scatter requires at least 2 speakers, found {}",
            groups.len()
        )));
    }
    let dim = set.dim();
    let n = set.len() as f64;
    let denom = match norm {
        ScatterNormalization::ByUtterances => n,
        ScatterNormalization::BySpeakers => groups.len() as f64,
    };

    let mut global_mean = Vector::zeros(dim);
    for r in set.records() {
        global_mean += &r.vector;
    }
    global_mean /= n;

    let mut between = Matrix::zeros(dim, dim);
    let mut within = Matrix::zeros(dim, dim);
    let mut per_speaker_means = Vec::with_capacity(groups.len());
    for (speaker, indices) in groups {
        let n_m = indices.len() as f64;
        let mut y = Vector::zeros(dim);
        for &i in &indices {
            y += &set.records()[i].vector;
        }
        y /= n_m;
        between += &y * y.transpose() * n_m;
        for &i in &indices {
            let d = &set.records()[i].vector - &y;
            within += &d * d.transpose();
        }
        per_speaker_means.push((speaker.to_string(), y));
    }
    between /= denom;
    between -= &global_mean * global_mean.transpose();
    within /= denom;

    Ok(ScatterPair {
        between: linalg::sym(&between),
        within: linalg::sym(&within),
        global_mean,
        per_speaker_means,
    })
}

/// `trace(G)/sum(G)` of an entrywise non-negative matrix: 1 exactly iff the
/// matrix is diagonal, `1/D` for the all-ones matrix. Callers pass the
/// entrywise absolute value of a covariance matrix.
pub fn diagonal_index(g: &Matrix) -> Result<f64> {
    if g.nrows() != g.ncols() || g.nrows() == 0 {
        return Err(Error::Invalid("diagonal index needs a square matrix".into()));
    }
    if g.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Invalid(
            "diagonal index needs non-negative finite entries (apply abs first)".into(),
        ));
    }
    let total: f64 = g.iter().sum();
    if total == 0.0 {
        return Err(Error::Invalid("diagonal index of an all-zero matrix".into()));
    }
    Ok(g.trace() / total)
}

/// Entrywise absolute value, as used for the heatmaps.
pub fn abs_matrix(g: &Matrix) -> Matrix {
    g.map(f64::abs)
}

/// `|G|` as row-major CSV plus a trailing comment line carrying the
/// diagonal index.
pub fn heatmap_to_string(g: &Matrix) -> Result<String> {
    let a = abs_matrix(g);
    let index = diagonal_index(&a)?;
    let mut out = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| fmt_g17(a[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    let _ = writeln!(out, "# diagonal_index = {}", fmt_g17(index));
    Ok(out)
}

pub fn export_heatmap(g: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &heatmap_to_string(g)?)
}

/// Read a heatmap CSV back: the matrix and its recorded diagonal index.
pub fn read_heatmap(path: &Path) -> Result<(Matrix, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut index = None;
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if let Some(rest) = line.trim().strip_prefix('#') {
            if let Some((_, value)) = rest.split_once('=') {
                index = Some(parse_f64(path, line_no, value.trim())?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|t| parse_f64(path, line_no, t.trim()))
            .collect();
        rows.push(row?);
    }
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::parse(path, 0, "empty heatmap"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse(path, 0, "ragged heatmap rows"));
    }
    let m = Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    let index = index.ok_or_else(|| Error::parse(path, 0, "missing diagonal_index line"))?;
    Ok((m, index))
}

/// LDA transform: the top `out_dim` generalized eigenvectors of
/// `(between, within)`, by descending eigenvalue, scaled within-scatter
/// orthonormal (`vᵀ within v = 1`). Returns a `D x out_dim` matrix whose
/// columns are the projection axes.
pub fn lda_projection(scatter: &ScatterPair, out_dim: usize) -> Result<Matrix> {
    let dim = scatter.between.nrows();
    if out_dim == 0 || out_dim > dim {
        return Err(Error::Invalid(format!(
            "LDA output dimension must be in 1..={dim}, got {out_dim}"
        )));
    }
    let (within_chol, _) = linalg::cholesky_with_jitter(&scatter.within, "within-class scatter")?;
    let within = {
        // reuse the (possibly jittered) SPD matrix by reconstructing it
        let l = within_chol.l();
        &l * l.transpose()
    };
    let (_, vectors) = linalg::generalized_symmetric_eigen(&scatter.between, &within, "within-class scatter")?;
    Ok(vectors.columns(0, out_dim).into_owned())
}

// ---------------------------------------------------------------------------
// Transform file format:
//   LDA <D> <K>
//   <D rows of K floats>                 (columns are projection axes)
// ---------------------------------------------------------------------------

pub fn transform_to_string(t: &Matrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "LDA {} {}", t.nrows(), t.ncols());
    for i in 0..t.nrows() {
        let row: Vec<String> = (0..t.ncols()).map(|j| fmt_g17(t[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn write_transform(t: &Matrix, path: &Path) -> Result<()> {
    write_file(path, &transform_to_string(t))
}

pub fn read_transform(path: &Path) -> Result<Matrix> {
    let mut src = LineSource::open(path)?;
    let (line_no, header) = src.expect_line("LDA header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 3 || tokens[0] != "LDA" {
        return Err(Error::parse(path, line_no, "expected header `LDA <D> <K>`"));
    }
    let d = crate::textio::parse_usize(path, line_no, tokens[1])?;
    let k = crate::textio::parse_usize(path, line_no, tokens[2])?;
    if d == 0 || k == 0 || k > d {
        return Err(Error::parse(path, line_no, "transform needs 1 <= K <= D"));
    }
    let mut t = Matrix::zeros(d, k);
    for i in 0..d {
        let (line_no, row) = src.expect_line("transform row")?;
        let tokens: Vec<&str> = row.split_whitespace().collect();
        let values = crate::textio::parse_floats(path, line_no, &tokens, k)?;
        for (j, v) in values.into_iter().enumerate() {
            t[(i, j)] = v;
        }
    }
    src.expect_eof()?;
    Ok(t)
}

/// Eigenvalues of the LDA problem, descending (for reporting/tests).
pub fn lda_eigenvalues(scatter: &ScatterPair) -> Result<Vec<f64>> {
    let (within_chol, _) = linalg::cholesky_with_jitter(&scatter.within, "within-class scatter")?;
    let within = {
        let l = within_chol.l();
        &l * l.transpose()
    };
    let (values, _) = linalg::generalized_symmetric_eigen(&scatter.between, &within, "within-class scatter")?;
    Ok(values)
}
