//! Speaker-verification back-end toolkit: cosine scoring, two-covariance
//! PLDA with EM training (full and diagonal), exact log-likelihood-ratio
//! scoring, detection metrics, and covariance diagnostics.
//!
//! The identity-initialized PLDA model scores trials as an affine function
//! of the cosine similarity, so the two back-ends start from identical
//! rankings; EM training then moves PLDA away from that point. A seeded
//! sampler for the generative model plus a brute-force joint-Gaussian
//! oracle back the test suite end to end.

pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod scoring;
pub mod synthesis;
mod textio;

pub use embedding::{EmbeddingRecord, EmbeddingSet, PreprocessStats, Trial, TrialLabel, TrialList};
pub use error::{Error, Result};
pub use evaluation::{MetricReport, ScoreSet, ScoredTrial};
pub use model::{ModelKind, PldaModel, TrainOptions};
pub use scoring::{MultiSessionPolicy, ScoringBackend, ScoringKernel};
pub use synthesis::{Preset, SessionCount, SynthSpec};
