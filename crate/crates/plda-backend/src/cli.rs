//! Command-line front end: `synth`, `preprocess`, `train`, `score`, `eval`,
//! `diag`, and `sweep`.
//!
//! Every output file starts with a `#` provenance comment recording the
//! effective argument list (command-line flags merged over an optional
//! `key=value` config file), so reruns with the same inputs are
//! byte-identical. Exit codes: 0 success, 1 data error, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use plda_backend::diagnostics::{
    self, compute_scatter, diagonal_index, heatmap_to_string, lda_projection, ScatterNormalization,
};
use plda_backend::embedding::{
    compute_mean, embeddings_to_string, preprocess, read_embeddings, read_preprocess_stats,
    read_trials, stats_to_string, trials_to_string, EmbeddingRecord, EmbeddingSet, PreprocessStats,
    StatsSource,
};
use plda_backend::evaluation::{compute_metrics, operating_points, MetricReport};
use plda_backend::linalg::{Matrix, Vector};
use plda_backend::model::{
    load_model, model_to_string, train_with_snapshots, ModelKind, PldaModel, TrainOptions,
};
use plda_backend::scoring::{
    read_scores, score_trials, scores_to_string, MultiSessionPolicy, ScoringBackend,
};
use plda_backend::synthesis::{sample, Preset, SessionCount, SynthSpec};

#[derive(Parser, Debug)]
#[command(
    name = "plda",
    version,
    about = "Speaker-verification back-end: cosine/PLDA scoring, EM training, metrics, diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a labeled embedding set from the generative model
    Synth(SynthArgs),
    /// Mean-subtract and length-normalize an embedding file
    Preprocess(PreprocessArgs),
    /// EM-train a PLDA or DPLDA model
    Train(TrainArgs),
    /// Score a trial list with the cosine or a PLDA back-end
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and labeled trials
    Eval(EvalArgs),
    /// Between/within scatter heatmaps and diagonal indices
    Diag(DiagArgs),
    /// Per-iteration EER/DCF sweep over EM training
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Optional key=value file supplying defaults for this subcommand's
    /// flags; explicit flags win
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Cosine,
    Plda,
    Dplda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Isotropic,
    CorrelatedBetween,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NormArg {
    /// Divide scatter matrices by the utterance count
    N,
    /// Divide scatter matrices by the speaker count
    M,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output embedding file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Sidecar model file recording the true mu, B, W
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Also emit a labeled trial list over the sampled utterances
    #[arg(long, value_name = "FILE")]
    trials_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "isotropic")]
    preset: PresetArg,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    speakers: usize,
    /// Sessions per speaker: a count or an inclusive range `lo..hi`
    #[arg(long, default_value = "5")]
    sessions: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Reuse a stored mean instead of computing one from the input
    #[arg(long, value_name = "FILE")]
    mean_in: Option<PathBuf>,
    /// Store the centering mean for later reuse
    #[arg(long, value_name = "FILE")]
    mean_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training embeddings (preprocessed, fully labeled)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output model file
    #[arg(long, value_name = "FILE")]
    model_out: PathBuf,
    #[arg(long, value_enum, default_value = "plda")]
    backend: BackendArg,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Project embeddings to this dimension with LDA before training
    #[arg(long, value_name = "K")]
    ldadim: Option<usize>,
    /// Where to store the LDA transform (required with --ldadim)
    #[arg(long, value_name = "FILE")]
    lda_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Evaluation embeddings (preprocessed)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// Output score file, same order as the trial list
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "cosine")]
    backend: BackendArg,
    /// Model file (required for plda/dplda back-ends)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Apply a stored LDA transform before scoring
    #[arg(long, value_name = "FILE")]
    lda: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    scores: PathBuf,
    /// Trial list supplying the target/nontarget labels
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// Comma-separated target priors for minDCF
    #[arg(long, default_value = "0.01,0.001")]
    ptar: String,
    /// Export ROC operating points as CSV
    #[arg(long, value_name = "FILE")]
    roc_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct DiagArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Directory receiving between.csv and within.csv
    #[arg(long, value_name = "DIR")]
    outdir: PathBuf,
    #[arg(long, value_enum, default_value = "n")]
    norm: NormArg,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Training embeddings
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Evaluation embeddings scored at every iteration
    #[arg(long, value_name = "FILE")]
    eval: PathBuf,
    /// Labeled trial list over the evaluation embeddings
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// Output CSV: iter,eer,dcf0.01,dcf0.001
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "plda")]
    backend: BackendArg,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[command(flatten)]
    config: ConfigArg,
}

pub fn run(argv: impl Iterator<Item = String>) -> ExitCode {
    let argv: Vec<String> = argv.collect();
    let argv = match expand_config(argv) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let provenance = format!("# plda {}", argv.join(" "));

    let with_binary = std::iter::once("plda".to_string()).chain(argv);
    let cli = match Cli::try_parse_from(with_binary) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args, &provenance),
        Command::Preprocess(args) => cmd_preprocess(args, &provenance),
        Command::Train(args) => cmd_train(args, &provenance),
        Command::Score(args) => cmd_score(args, &provenance),
        Command::Eval(args) => cmd_eval(args, &provenance),
        Command::Diag(args) => cmd_diag(args, &provenance),
        Command::Sweep(args) => cmd_sweep(args, &provenance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Splice `key=value` pairs from a `--config` file in as flags right after
/// the subcommand, so explicit command-line flags (parsed later) override
/// them.
fn expand_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut config_path: Option<PathBuf> = None;
    for (i, arg) in argv.iter().enumerate() {
        if arg == "--config" {
            config_path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(path));
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    if argv.is_empty() {
        return Ok(argv);
    }
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut injected = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), line_no + 1))?;
        let flag = format!("--{}", key.trim());
        let given_explicitly = argv
            .iter()
            .any(|a| a == &flag || a.starts_with(&format!("{flag}=")));
        if given_explicitly {
            continue;
        }
        injected.push(flag);
        injected.push(value.trim().to_string());
    }
    // argv[0] is the subcommand; config-derived flags go right after it
    let mut out = Vec::with_capacity(argv.len() + injected.len());
    out.push(argv[0].clone());
    out.extend(injected);
    out.extend(argv.into_iter().skip(1));
    Ok(out)
}

fn write_with_provenance(path: &Path, provenance: &str, body: &str) -> anyhow::Result<()> {
    std::fs::write(path, format!("{provenance}\n{body}"))
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Check output destinations up front, before any heavy work.
fn validate_output_paths<'a>(
    paths: impl IntoIterator<Item = Option<&'a PathBuf>>,
) -> anyhow::Result<()> {
    for path in paths.into_iter().flatten() {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                bail!("output directory {} does not exist", parent.display());
            }
        }
    }
    Ok(())
}

fn parse_sessions(s: &str) -> anyhow::Result<SessionCount> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().context("invalid session range")?;
        let hi: usize = hi.trim().parse().context("invalid session range")?;
        Ok(SessionCount::Range(lo, hi))
    } else {
        Ok(SessionCount::Fixed(
            s.trim().parse().context("invalid session count")?,
        ))
    }
}

fn parse_ptars(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid p_tar {t:?}"))
        })
        .collect()
}

fn cmd_synth(args: SynthArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([Some(&args.out), args.truth.as_ref(), args.trials_out.as_ref()])?;
    let sessions = parse_sessions(&args.sessions)?;
    let preset = match args.preset {
        PresetArg::Isotropic => Preset::Isotropic,
        PresetArg::CorrelatedBetween => Preset::CorrelatedBetween,
    };
    let spec = SynthSpec::from_preset(preset, args.dim, args.speakers, sessions, args.seed);
    let (set, _truth_means) = sample(&spec)?;
    write_with_provenance(&args.out, provenance, &embeddings_to_string(&set))?;

    if let Some(truth_path) = &args.truth {
        let truth_model = PldaModel::new(
            spec.mu.clone(),
            plda_backend::linalg::spd_inverse(&spec.b_cov, "b_cov")?,
            plda_backend::linalg::spd_inverse(&spec.w_cov, "w_cov")?,
            ModelKind::Full,
        )?;
        write_with_provenance(truth_path, provenance, &model_to_string(&truth_model))?;
    }
    if let Some(trials_path) = &args.trials_out {
        let trials = plda_backend::synthesis::make_trial_list(&set)?;
        write_with_provenance(trials_path, provenance, &trials_to_string(&trials))?;
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([Some(&args.output), args.mean_out.as_ref()])?;
    let set = read_embeddings(&args.input)?;
    let stats = match &args.mean_in {
        Some(path) => read_preprocess_stats(path)?,
        None => compute_mean(&set)?,
    };
    let out = preprocess(&set, &stats)?;
    write_with_provenance(&args.output, provenance, &embeddings_to_string(&out))?;
    if let Some(path) = &args.mean_out {
        write_with_provenance(path, provenance, &stats_to_string(&stats))?;
    }
    Ok(())
}

fn train_kind(backend: BackendArg) -> anyhow::Result<ModelKind> {
    match backend {
        BackendArg::Plda => Ok(ModelKind::Full),
        BackendArg::Dplda => Ok(ModelKind::Diagonal),
        BackendArg::Cosine => bail!("the cosine back-end has no trainable parameters"),
    }
}

/// Project onto LDA axes and re-length-normalize.
fn apply_lda(set: &EmbeddingSet, transform: &Matrix) -> anyhow::Result<EmbeddingSet> {
    if transform.nrows() != set.dim() {
        bail!(
            "LDA transform expects dimension {}, embeddings have {}",
            transform.nrows(),
            set.dim()
        );
    }
    let mut projected = EmbeddingSet::new(transform.ncols())?;
    for r in set.records() {
        projected.push(EmbeddingRecord {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            vector: transform.transpose() * &r.vector,
        })?;
    }
    let zero = PreprocessStats {
        mean: Vector::zeros(transform.ncols()),
        source: StatsSource::ComputedFromData,
    };
    Ok(preprocess(&projected, &zero)?)
}

fn cmd_train(args: TrainArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([Some(&args.model_out), args.lda_out.as_ref()])?;
    let kind = train_kind(args.backend)?;
    let mut set = read_embeddings(&args.input)?;

    if let Some(ldadim) = args.ldadim {
        let lda_out = args
            .lda_out
            .as_ref()
            .ok_or_else(|| anyhow!("--ldadim requires --lda-out to store the transform"))?;
        let scatter = compute_scatter(&set, ScatterNormalization::ByUtterances)?;
        let transform = lda_projection(&scatter, ldadim)?;
        write_with_provenance(lda_out, provenance, &diagnostics::transform_to_string(&transform))?;
        set = apply_lda(&set, &transform)?;
    } else if args.lda_out.is_some() {
        bail!("--lda-out is only meaningful together with --ldadim");
    }

    let options = TrainOptions {
        kind,
        iterations: args.iters,
        early_stop_rel_tol: None,
    };
    let model = train_with_snapshots(&set, &options, |_, _| {})?;
    write_with_provenance(&args.model_out, provenance, &model_to_string(&model))?;
    Ok(())
}

fn cmd_score(args: ScoreArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([Some(&args.output)])?;
    let mut set = read_embeddings(&args.input)?;
    let trials = read_trials(&args.trials)?;
    if let Some(lda_path) = &args.lda {
        let transform = diagnostics::read_transform(lda_path)?;
        set = apply_lda(&set, &transform)?;
    }

    let model;
    let backend = match args.backend {
        BackendArg::Cosine => {
            if args.model.is_some() {
                bail!("--model is not used by the cosine back-end");
            }
            ScoringBackend::Cosine
        }
        BackendArg::Plda | BackendArg::Dplda => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| anyhow!("--backend requires --model"))?;
            model = load_model(path)?;
            let expected = train_kind(args.backend)?;
            if model.kind() != expected {
                bail!(
                    "model kind {:?} does not match the requested backend (expected {:?})",
                    model.kind().as_str(),
                    expected.as_str()
                );
            }
            ScoringBackend::Plda(&model)
        }
    };
    let scores = score_trials(backend, &set, &trials, MultiSessionPolicy::CentroidRenorm)?;
    write_with_provenance(&args.output, provenance, &scores_to_string(&scores))?;
    Ok(())
}

fn metrics_machine_line(report: &MetricReport) -> String {
    let mut line = format!("EER={}", report.eer);
    for entry in &report.min_dcf {
        let _ = write!(line, " DCF{}={}", entry.p_tar, entry.value);
    }
    line
}

fn cmd_eval(args: EvalArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([args.roc_out.as_ref()])?;
    let scores = read_scores(&args.scores)?;
    let trials = read_trials(&args.trials)?;
    let labeled = scores.with_labels_from(&trials)?;
    let ptars = parse_ptars(&args.ptar)?;
    let report = compute_metrics(&labeled, &ptars)?;

    println!("{}", metrics_machine_line(&report));
    println!();
    println!(
        "  trials: {} target / {} nontarget",
        report.num_targets, report.num_nontargets
    );
    println!(
        "  EER: {:.4}% at threshold {:.6}",
        report.eer * 100.0,
        report.eer_threshold
    );
    for entry in &report.min_dcf {
        println!(
            "  minDCF(p_tar={}): {:.6} at threshold {:.6}",
            entry.p_tar, entry.value, entry.threshold
        );
    }

    if let Some(roc_path) = &args.roc_out {
        let points = operating_points(&labeled)?;
        let mut body = String::from("threshold,far,frr\n");
        for p in points {
            let _ = writeln!(body, "{},{},{}", p.threshold, p.far, p.frr);
        }
        write_with_provenance(roc_path, provenance, &body)?;
    }
    Ok(())
}

fn cmd_diag(args: DiagArgs, provenance: &str) -> anyhow::Result<()> {
    let set = read_embeddings(&args.input)?;
    let norm = match args.norm {
        NormArg::N => ScatterNormalization::ByUtterances,
        NormArg::M => ScatterNormalization::BySpeakers,
    };
    let scatter = compute_scatter(&set, norm)?;
    std::fs::create_dir_all(&args.outdir)
        .with_context(|| format!("cannot create {}", args.outdir.display()))?;
    write_with_provenance(
        &args.outdir.join("between.csv"),
        provenance,
        &heatmap_to_string(&scatter.between)?,
    )?;
    write_with_provenance(
        &args.outdir.join("within.csv"),
        provenance,
        &heatmap_to_string(&scatter.within)?,
    )?;
    let between_index = diagonal_index(&diagnostics::abs_matrix(&scatter.between))?;
    let within_index = diagonal_index(&diagnostics::abs_matrix(&scatter.within))?;
    println!("between_index={between_index} within_index={within_index}");
    Ok(())
}

fn cmd_sweep(args: SweepArgs, provenance: &str) -> anyhow::Result<()> {
    validate_output_paths([Some(&args.output)])?;
    let kind = train_kind(args.backend)?;
    let train_set = read_embeddings(&args.train)?;
    let eval_set = read_embeddings(&args.eval)?;
    let trials = read_trials(&args.trials)?;

    let eval_model = |model: &PldaModel| -> anyhow::Result<MetricReport> {
        let scores = score_trials(
            ScoringBackend::Plda(model),
            &eval_set,
            &trials,
            MultiSessionPolicy::CentroidRenorm,
        )?;
        Ok(compute_metrics(&scores, &[0.01, 0.001])?)
    };

    let mut body = String::from("iter,eer,dcf0.01,dcf0.001\n");
    let append_row = |body: &mut String, iter: usize, report: &MetricReport| {
        let _ = writeln!(
            body,
            "{iter},{},{},{}",
            report.eer, report.min_dcf[0].value, report.min_dcf[1].value
        );
    };

    let identity = PldaModel::init_identity(train_set.dim())?;
    append_row(&mut body, 0, &eval_model(&identity)?);

    let options = TrainOptions {
        kind,
        iterations: args.iters,
        early_stop_rel_tol: None,
    };
    let mut snapshot_error = None;
    train_with_snapshots(&train_set, &options, |iter, model| {
        if snapshot_error.is_some() {
            return;
        }
        match eval_model(model) {
            Ok(report) => append_row(&mut body, iter, &report),
            Err(e) => snapshot_error = Some(e),
        }
    })?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    write_with_provenance(&args.output, provenance, &body)?;
    Ok(())
}
