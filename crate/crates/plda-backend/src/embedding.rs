//! Labeled embedding sets, mean/length-normalization preprocessing, and the
//! embedding / trial text formats.
//!
//! Preprocessing is the usual two-step: subtract a mean, then scale to unit
//! Euclidean norm. The mean is computed on training data and serialized so
//! that evaluation data reuses the stored value.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{all_finite_vec, Vector};
use crate::textio::{fmt_g17, parse_f64, parse_usize, write_file, LineSource};

/// Speaker id spelled as `-` in files, meaning "unlabeled".
const UNLABELED: &str = "-";

#[derive(Debug, Clone)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub vector: Vector,
}

/// Ordered collection of D-dimensional labeled embeddings.
///
/// Invariants enforced on construction: every vector has exactly `dim`
/// finite components and utterance ids are unique. Read-only after
/// construction.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    by_utterance: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be >= 1".into()));
        }
        Ok(EmbeddingSet {
            dim,
            records: Vec::new(),
            by_utterance: HashMap::new(),
        })
    }

    pub fn from_records(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut set = EmbeddingSet::new(dim)?;
        for r in records {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: record.vector.len(),
            });
        }
        if !all_finite_vec(&record.vector) {
            return Err(Error::Invalid(format!(
                "utterance {:?} has non-finite components",
                record.utterance_id
            )));
        }
        if record.speaker_id.as_deref() == Some(UNLABELED) || record.utterance_id == UNLABELED {
            return Err(Error::Invalid(format!(
                "{UNLABELED:?} is reserved for unlabeled records"
            )));
        }
        if self.by_utterance.contains_key(&record.utterance_id) {
            return Err(Error::DuplicateUtterance(record.utterance_id));
        }
        self.by_utterance
            .insert(record.utterance_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn by_utterance(&self, utterance_id: &str) -> Option<&EmbeddingRecord> {
        self.by_utterance
            .get(utterance_id)
            .map(|&i| &self.records[i])
    }

    /// Record indices grouped by speaker, sorted by speaker id.
    ///
    /// Errors on the first unlabeled record: training and scatter operations
    /// require a fully labeled set.
    pub fn speaker_groups(&self) -> Result<BTreeMap<&str, Vec<usize>>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            match &r.speaker_id {
                Some(s) => groups.entry(s.as_str()).or_default().push(i),
                None => return Err(Error::Unlabeled(r.utterance_id.clone())),
            }
        }
        Ok(groups)
    }

    pub fn num_speakers(&self) -> usize {
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        for r in &self.records {
            if let Some(s) = &r.speaker_id {
                seen.insert(s, ());
            }
        }
        seen.len()
    }
}

/// Where a preprocessing mean came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    ComputedFromData,
    LoadedFromFile,
}

/// The centering mean used by [`preprocess`].
#[derive(Debug, Clone)]
pub struct PreprocessStats {
    pub mean: Vector,
    pub source: StatsSource,
}

/// Arithmetic mean over all vectors of the set.
pub fn compute_mean(set: &EmbeddingSet) -> Result<PreprocessStats> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = Vector::zeros(set.dim());
    for r in set.records() {
        sum += &r.vector;
    }
    Ok(PreprocessStats {
        mean: sum / set.len() as f64,
        source: StatsSource::ComputedFromData,
    })
}

/// Center by `stats.mean` and scale each vector to unit Euclidean norm.
///
/// Labels and ordering are preserved. A record that centers to the zero
/// vector is rejected by name rather than dropped, so trial lists stay
/// consistent with the embedding file.
pub fn preprocess(set: &EmbeddingSet, stats: &PreprocessStats) -> Result<EmbeddingSet> {
    if stats.mean.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: stats.mean.len(),
        });
    }
    if !all_finite_vec(&stats.mean) {
        return Err(Error::Invalid("preprocessing mean has non-finite components".into()));
    }
    let mut out = EmbeddingSet::new(set.dim())?;
    for r in set.records() {
        let centered = &r.vector - &stats.mean;
        let norm = centered.norm();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(r.utterance_id.clone()));
        }
        out.push(EmbeddingRecord {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            vector: centered / norm,
        })?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedding file format:
//   EMB <N> <D>
//   <utt_id> <spk_id> <v_1> ... <v_D>     (N lines, spk_id `-` = unlabeled)
// ---------------------------------------------------------------------------

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_file(path, &embeddings_to_string(set))
}

pub fn embeddings_to_string(set: &EmbeddingSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "EMB {} {}", set.len(), set.dim());
    for r in set.records() {
        let _ = write!(out, "{} {}", r.utterance_id, r.speaker_id.as_deref().unwrap_or(UNLABELED));
        for v in r.vector.iter() {
            let _ = write!(out, " {}", fmt_g17(*v));
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut src = LineSource::open(path)?;
    let (line_no, header) = src.expect_line("EMB header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 3 || tokens[0] != "EMB" {
        return Err(Error::parse(path, line_no, "expected header `EMB <N> <D>`"));
    }
    let n = parse_usize(path, line_no, tokens[1])?;
    let dim = parse_usize(path, line_no, tokens[2])?;
    if dim == 0 {
        return Err(Error::parse(path, line_no, "dimension must be >= 1"));
    }

    let mut set = EmbeddingSet::new(dim)?;
    for _ in 0..n {
        let (line_no, line) = src.expect_line("embedding row")?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != dim + 2 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 2 ids and {dim} floats, found {} token(s)", tokens.len()),
            ));
        }
        let mut values = Vec::with_capacity(dim);
        for t in &tokens[2..] {
            values.push(parse_f64(path, line_no, t)?);
        }
        let record = EmbeddingRecord {
            utterance_id: tokens[0].to_string(),
            speaker_id: if tokens[1] == UNLABELED {
                None
            } else {
                Some(tokens[1].to_string())
            },
            vector: Vector::from_vec(values),
        };
        set.push(record).map_err(|e| match e {
            Error::DuplicateUtterance(id) => {
                Error::parse(path, line_no, format!("duplicate utterance id {id:?}"))
            }
            Error::Invalid(msg) => Error::parse(path, line_no, msg),
            other => other,
        })?;
    }
    src.expect_eof()?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Mean file format:
//   MEAN <D>
//   <v_1> ... <v_D>
// ---------------------------------------------------------------------------

pub fn stats_to_string(stats: &PreprocessStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "MEAN {}", stats.mean.len());
    let floats: Vec<String> = stats.mean.iter().map(|v| fmt_g17(*v)).collect();
    let _ = writeln!(out, "{}", floats.join(" "));
    out
}

pub fn write_preprocess_stats(stats: &PreprocessStats, path: &Path) -> Result<()> {
    write_file(path, &stats_to_string(stats))
}

pub fn read_preprocess_stats(path: &Path) -> Result<PreprocessStats> {
    let mut src = LineSource::open(path)?;
    let (line_no, header) = src.expect_line("MEAN header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 2 || tokens[0] != "MEAN" {
        return Err(Error::parse(path, line_no, "expected header `MEAN <D>`"));
    }
    let dim = parse_usize(path, line_no, tokens[1])?;
    let (line_no, row) = src.expect_line("mean row")?;
    let tokens: Vec<&str> = row.split_whitespace().collect();
    let values = crate::textio::parse_floats(path, line_no, &tokens, dim)?;
    let mean = Vector::from_vec(values);
    if !all_finite_vec(&mean) {
        return Err(Error::parse(path, line_no, "mean has non-finite components"));
    }
    src.expect_eof()?;
    Ok(PreprocessStats {
        mean,
        source: StatsSource::LoadedFromFile,
    })
}

// ---------------------------------------------------------------------------
// Trial file format:
//   <enroll_utt_or_group_id> <test_utt_id> [target|nontarget]
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<TrialLabel>,
}

/// Ordered list of enroll/test pairs. The enroll id may name a single
/// utterance or a speaker-level enrollment group; the test id always names
/// a single utterance.
#[derive(Debug, Clone, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let mut src = LineSource::open(path)?;
    let mut trials = Vec::new();
    while let Some((line_no, line)) = src.next_line() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let label = match tokens.len() {
            2 => None,
            3 => match tokens[2] {
                "target" => Some(TrialLabel::Target),
                "nontarget" => Some(TrialLabel::Nontarget),
                other => {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("expected `target` or `nontarget`, found {other:?}"),
                    ))
                }
            },
            n => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected 2 or 3 tokens, found {n}"),
                ))
            }
        };
        trials.push(Trial {
            enroll_id: tokens[0].to_string(),
            test_id: tokens[1].to_string(),
            label,
        });
    }
    Ok(TrialList { trials })
}

pub fn trials_to_string(list: &TrialList) -> String {
    let mut out = String::new();
    for t in &list.trials {
        match t.label {
            Some(label) => {
                let _ = writeln!(out, "{} {} {}", t.enroll_id, t.test_id, label.as_str());
            }
            None => {
                let _ = writeln!(out, "{} {}", t.enroll_id, t.test_id);
            }
        }
    }
    out
}

pub fn write_trials(list: &TrialList, path: &Path) -> Result<()> {
    write_file(path, &trials_to_string(list))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn rec(utt: &str, spk: Option<&str>, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            utterance_id: utt.to_string(),
            speaker_id: spk.map(String::from),
            vector: Vector::from_vec(v.to_vec()),
        }
    }

    #[test]
    fn mean_of_two_unit_axes() {
        let set = EmbeddingSet::from_records(
            2,
            vec![rec("a", None, &[1.0, 0.0]), rec("b", None, &[0.0, 1.0])],
        )
        .unwrap();
        let stats = compute_mean(&set).unwrap();
        assert_eq!(stats.mean.as_slice(), &[0.5, 0.5]);
        assert_eq!(stats.source, StatsSource::ComputedFromData);
    }

    #[test]
    fn mean_of_single_vector_is_identity() {
        let set = EmbeddingSet::from_records(3, vec![rec("a", None, &[1.5, -2.0, 0.25])]).unwrap();
        let stats = compute_mean(&set).unwrap();
        assert_eq!(stats.mean.as_slice(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn mean_of_empty_set_errors() {
        let set = EmbeddingSet::new(2).unwrap();
        assert!(matches!(compute_mean(&set), Err(Error::EmptySet)));
    }

    #[test]
    fn mean_matches_compensated_summation_oracle() {
        // 1000 draws around a known center; oracle recomputes the mean with
        // Kahan summation per component.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let center = [3.0, -1.0, 0.5];
        let mut set = EmbeddingSet::new(3).unwrap();
        for i in 0..1000 {
            let v: Vec<f64> = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            set.push(rec(&format!("u{i}"), None, &v)).unwrap();
        }
        let stats = compute_mean(&set).unwrap();

        let mut oracle = [0.0f64; 3];
        for (d, slot) in oracle.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for r in set.records() {
                let y = r.vector[d] - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            *slot = sum / set.len() as f64;
        }
        for (d, expected) in oracle.iter().enumerate() {
            assert_relative_eq!(stats.mean[d], *expected, epsilon = 1e-12);
        }
        // and the empirical mean is near the true center
        for (d, c) in center.iter().enumerate() {
            assert!((stats.mean[d] - c).abs() < 0.15);
        }
    }

    #[test]
    fn preprocess_three_four_five() {
        let set = EmbeddingSet::from_records(2, vec![rec("a", None, &[3.0, 4.0])]).unwrap();
        let stats = PreprocessStats {
            mean: Vector::zeros(2),
            source: StatsSource::ComputedFromData,
        };
        let out = preprocess(&set, &stats).unwrap();
        assert_relative_eq!(out.records()[0].vector[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(out.records()[0].vector[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn preprocess_symmetric_center() {
        let set = EmbeddingSet::from_records(2, vec![rec("a", None, &[1.0, 0.0])]).unwrap();
        let stats = PreprocessStats {
            mean: Vector::from_vec(vec![0.5, 0.5]),
            source: StatsSource::ComputedFromData,
        };
        let out = preprocess(&set, &stats).unwrap();
        let v = &out.records()[0].vector;
        assert_relative_eq!(v[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(v[1], -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn preprocess_rejects_zero_norm_by_name() {
        let set = EmbeddingSet::from_records(2, vec![rec("bad", None, &[0.5, 0.5])]).unwrap();
        let stats = PreprocessStats {
            mean: Vector::from_vec(vec![0.5, 0.5]),
            source: StatsSource::ComputedFromData,
        };
        match preprocess(&set, &stats) {
            Err(Error::ZeroNorm(id)) => assert_eq!(id, "bad"),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_utterance_rejected() {
        let err = EmbeddingSet::from_records(
            1,
            vec![rec("a", None, &[1.0]), rec("a", None, &[2.0])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateUtterance(_)));
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let set = EmbeddingSet::from_records(
            2,
            vec![
                rec("u1", Some("s1"), &[1.0 / 3.0, -2.5e-17]),
                rec("u2", Some("s1"), &[0.25, 1e300]),
                rec("u3", None, &[-0.0, 7.125]),
            ],
        )
        .unwrap();
        write_embeddings(&set, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.dim(), 2);
        for (a, b) in set.records().iter().zip(back.records()) {
            assert_eq!(a.utterance_id, b.utterance_id);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.vector, b.vector);
        }
    }

    #[test]
    fn short_row_errors_with_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "EMB 1 4\nu1 s1 1.0 2.0 3.0\n").unwrap();
        match read_embeddings(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ten_k_rows_canonical_reserialization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let mut set = EmbeddingSet::new(4).unwrap();
        for i in 0..10_000 {
            let v: Vec<f64> = (0..4)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            set.push(rec(&format!("u{i}"), Some(&format!("s{}", i % 500)), &v))
                .unwrap();
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        write_embeddings(&set, &path).unwrap();
        let text_a = std::fs::read_to_string(&path).unwrap();
        let back = read_embeddings(&path).unwrap();
        let text_b = embeddings_to_string(&back);
        assert_eq!(text_a, text_b, "canonical re-serialization must be byte-identical");
    }

    #[test]
    fn trial_round_trip_and_bad_label() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        let list = TrialList {
            trials: vec![
                Trial {
                    enroll_id: "spk1".into(),
                    test_id: "u9".into(),
                    label: Some(TrialLabel::Target),
                },
                Trial {
                    enroll_id: "u2".into(),
                    test_id: "u3".into(),
                    label: None,
                },
            ],
        };
        write_trials(&list, &path).unwrap();
        let back = read_trials(&path).unwrap();
        assert_eq!(back.trials.len(), 2);
        assert_eq!(back.trials[0].label, Some(TrialLabel::Target));
        assert_eq!(back.trials[1].label, None);

        std::fs::write(&path, "a b maybe\n").unwrap();
        assert!(matches!(read_trials(&path), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        // preprocess output is unit-norm, order- and label-preserving, and
        // idempotent under a zero mean.
        #[test]
        fn preprocess_contract(vals in proptest::collection::vec(-50.0f64..50.0, 3..60)) {
            let dim = 3;
            let n = vals.len() / dim;
            prop_assume!(n >= 1);
            let mut set = EmbeddingSet::new(dim).unwrap();
            let mut kept = 0usize;
            for i in 0..n {
                let v = &vals[i * dim..(i + 1) * dim];
                if v.iter().map(|x| x * x).sum::<f64>() > 0.0 {
                    set.push(rec(&format!("u{i}"), Some("s"), v)).unwrap();
                    kept += 1;
                }
            }
            prop_assume!(kept >= 1);
            let zero = PreprocessStats { mean: Vector::zeros(dim), source: StatsSource::ComputedFromData };
            let once = preprocess(&set, &zero).unwrap();
            prop_assert_eq!(once.len(), set.len());
            for (a, b) in set.records().iter().zip(once.records()) {
                prop_assert_eq!(&a.utterance_id, &b.utterance_id);
                prop_assert_eq!(&a.speaker_id, &b.speaker_id);
                prop_assert!((b.vector.norm() - 1.0).abs() < 1e-12);
            }
            let twice = preprocess(&once, &zero).unwrap();
            for (a, b) in once.records().iter().zip(twice.records()) {
                for d in 0..dim {
                    prop_assert!((a.vector[d] - b.vector[d]).abs() < 1e-12);
                }
            }
        }
    }
}
