//! The `opfreq` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on input or data errors, 2 on usage errors.
//! Structured outputs go to `--out` (or `--model`, `--vocab`); human-readable
//! tables go to standard output; logs go to standard error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{self, FeatureMatrix, LabelTag, Sample, Vocabulary};
use crate::curation::{self, CurationConfig, SizedFile};
use crate::eval::{self, CvConfig, CvReport, SelectionMode};
use crate::ingest::{self, SourceDialect};
use crate::learners::{self, Classifier, LearnerSpec};
use crate::rank::{self, FeatureRanking, RankMethod};
use crate::write::atomic_write;

#[derive(Debug, Parser)]
#[command(name = "opfreq", version, about = "Opcode-frequency malware detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Parse listings named in a manifest into a feature matrix.
    Extract,
    /// Apply the weight threshold and interval pruning to a matrix.
    Curate,
    /// Rank opcodes with one filter method.
    Rank,
    /// Train a classifier on the top-ranked opcodes.
    Train,
    /// Stratified k-fold cross-validation.
    Cv,
    /// Classify samples with a saved model.
    Predict,
    /// Ranking comparison across all methods and cross-validation across all learners.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DialectArg {
    Auto,
    Kaggle,
    Objdump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fisher,
    Ig,
    Gr,
    Su,
    Chi,
}

impl From<MethodArg> for RankMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fisher => RankMethod::Fisher,
            MethodArg::Ig => RankMethod::InfoGain,
            MethodArg::Gr => RankMethod::GainRatio,
            MethodArg::Su => RankMethod::SymUncertainty,
            MethodArg::Chi => RankMethod::ChiSquare,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnerArg {
    Stump,
    C45,
    Rtree,
    Reptree,
    Forest,
}

impl LearnerArg {
    fn name(self) -> &'static str {
        match self {
            LearnerArg::Stump => "stump",
            LearnerArg::C45 => "c45",
            LearnerArg::Rtree => "rtree",
            LearnerArg::Reptree => "reptree",
            LearnerArg::Forest => "forest",
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Options {
    /// Key-value (TOML) file supplying defaults for any flag below.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// CSV with header `path,label,family`.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "auto")]
    dialect: DialectArg,
    #[arg(long, global = true, value_name = "PATH")]
    matrix: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    vocab: Option<PathBuf>,
    #[arg(long, global = true, value_name = "BYTES", default_value_t = curation::DEFAULT_SIZE_CAP_BYTES)]
    size_cap: u64,
    #[arg(long, global = true, value_name = "N", default_value_t = curation::DEFAULT_WEIGHT_THRESHOLD)]
    weight_threshold: u64,
    /// Interval widths, strictly decreasing.
    #[arg(long, global = true, value_name = "CSV", value_delimiter = ',', default_values_t = curation::DEFAULT_INTERVAL_WIDTHS)]
    intervals: Vec<u64>,
    #[arg(long, global = true, value_enum, default_value = "fisher")]
    method: MethodArg,
    #[arg(long, global = true, value_name = "N", default_value_t = rank::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, global = true, value_enum, default_value = "forest")]
    learner: LearnerArg,
    #[arg(long, global = true, value_name = "N")]
    trees: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    subset: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    min_leaf: Option<usize>,
    #[arg(long, global = true, value_name = "F")]
    cf: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    prune_fraction: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long, global = true, value_name = "N", default_value_t = 10)]
    k: usize,
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Rank features on each training fold instead of once on the full matrix.
    #[arg(long, global = true)]
    per_fold_selection: bool,
    /// Worker threads; defaults to the number of processors.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Refuse to score samples whose vocabulary differs from the model's.
    #[arg(long, global = true)]
    strict_vocab: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

type Outcome = Result<(), Failure>;

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

macro_rules! impl_data_from {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                data(e)
            }
        })*
    };
}

impl_data_from!(
    corpus::CorpusError,
    curation::CurationError,
    rank::RankError,
    learners::LearnError,
    eval::EvalError
);

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path, Failure> {
    v.as_deref()
        .ok_or_else(|| Failure::Usage(format!("`{cmd}` requires --{flag}")))
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            return 2;
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.opts.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 2;
        }
        pool = pool.num_threads(j);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command, &cli.opts)) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

/// Appends `--key value` for every config-file key whose flag is not
/// already on the command line.
fn merge_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| data(format!("{}: {e}", path.display())))?;
    let given = |flag: &str| {
        argv.iter().any(|a| {
            a.to_str()
                .is_some_and(|s| s == flag || s.strip_prefix(flag).is_some_and(|r| r.starts_with('=')))
        })
    };
    let mut extra = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || given(&flag) {
            continue;
        }
        match value {
            toml::Value::Boolean(true) => extra.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => extra.extend([flag, s]),
            toml::Value::Integer(n) => extra.extend([flag, n.to_string()]),
            toml::Value::Float(x) => extra.extend([flag, x.to_string()]),
            toml::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                extra.extend([flag, parts.join(",")]);
            }
            other => {
                return Err(Failure::Usage(format!(
                    "{}: unsupported value for `{key}`: {other}",
                    path.display()
                )))
            }
        }
    }
    argv.extend(extra.into_iter().map(OsString::from));
    Ok(argv)
}

fn dispatch(command: Command, o: &Options) -> Outcome {
    match command {
        Command::Extract => extract(o),
        Command::Curate => curate(o),
        Command::Rank => rank_cmd(o),
        Command::Train => train(o),
        Command::Cv => cv(o),
        Command::Predict => predict(o),
        Command::Report => report(o),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Outcome {
    atomic_write(path, bytes).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn print_stdout(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(data)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

fn curation_config(o: &Options) -> CurationConfig {
    CurationConfig {
        size_cap_bytes: o.size_cap,
        weight_threshold: o.weight_threshold,
        interval_widths: o.intervals.clone(),
    }
}

fn learner_spec(o: &Options, learner: LearnerArg) -> Result<LearnerSpec, Failure> {
    let mut spec = LearnerSpec::from_name(learner.name()).expect("every learner argument has a spec");
    match &mut spec {
        LearnerSpec::Stump => {}
        LearnerSpec::C45(c) => {
            c.min_leaf = o.min_leaf.unwrap_or(c.min_leaf);
            c.cf = o.cf.unwrap_or(c.cf);
        }
        LearnerSpec::RandomTree(c) => {
            c.min_leaf = o.min_leaf.unwrap_or(c.min_leaf);
            c.subset = o.subset.or(c.subset);
        }
        LearnerSpec::RepTree(c) => {
            c.min_leaf = o.min_leaf.unwrap_or(c.min_leaf);
            c.prune_fraction = o.prune_fraction.unwrap_or(c.prune_fraction);
        }
        LearnerSpec::Forest(c) => {
            c.trees = o.trees.unwrap_or(c.trees);
            c.subset = o.subset.or(c.subset);
        }
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(spec)
}

fn load_matrix(o: &Options, cmd: &str) -> Result<FeatureMatrix, Failure> {
    Ok(FeatureMatrix::load(required(&o.matrix, "matrix", cmd)?)?)
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads and tallies one listing. `None` means the dialect could not be
/// recognized and the file is quarantined.
fn read_listing(path: &Path, dialect: DialectArg) -> Result<Option<ingest::OpcodeTally>, Failure> {
    let bytes = std::fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&bytes);
    let d = match dialect {
        DialectArg::Kaggle => SourceDialect::KaggleAsm,
        DialectArg::Objdump => SourceDialect::Objdump,
        DialectArg::Auto => match ingest::detect_dialect_in(&text) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("quarantined {}: {e}", path.display());
                return Ok(None);
            }
        },
    };
    Ok(Some(ingest::count_file(&text, d)))
}

fn extract(o: &Options) -> Outcome {
    let manifest = required(&o.manifest, "manifest", "extract")?;
    let out = required(&o.out, "out", "extract")?;
    let cfg = curation_config(o);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let entries = corpus::read_manifest(manifest, true)?;
    let mut files = Vec::with_capacity(entries.len());
    for e in entries {
        let meta = std::fs::metadata(&e.path).map_err(|err| data(format!("{}: {err}", e.path.display())))?;
        let label = e.label.expect("labels are required");
        files.push(SizedFile {
            byte_size: meta.len(),
            label: label.tag(),
            item: (e.path, label),
        });
    }
    let (files, removed_by_size) = curation::filter_size_cap(files, &cfg);
    if removed_by_size > 0 {
        log::info!("size cap removed {removed_by_size} benign listings");
    }

    let parsed: Vec<_> = files
        .par_iter()
        .map(|f| {
            let tally = read_listing(&f.item.0, o.dialect)?;
            Ok(tally.map(|t| ((file_id(&f.item.0), t), f.item.1.clone())))
        })
        .collect::<Result<_, Failure>>()?;
    let parsed: Vec<_> = parsed.into_iter().flatten().collect();
    let quarantined = files.len() - parsed.len();
    if quarantined > 0 {
        log::warn!("{quarantined} listings quarantined");
    }

    let vocabulary = Vocabulary::from_opcodes(
        parsed
            .iter()
            .flat_map(|((_, t), _)| t.counts.keys().map(String::as_str))
            .collect::<BTreeSet<_>>(),
    );
    let samples: Vec<Sample> = parsed
        .into_iter()
        .map(|((id, t), label)| Sample::new(id, label, t.counts))
        .collect();
    let mut matrix = FeatureMatrix::new(vocabulary, samples);
    matrix.removed_by_size = removed_by_size;
    if let Some(v) = &o.vocab {
        matrix.vocabulary.save(v)?;
    }
    matrix.save(out)?;
    let (m, b) = matrix.class_counts();
    print_stdout(&format!(
        "extracted {m} malware, {b} benign; {} opcodes; {removed_by_size} removed by size cap; {quarantined} quarantined\n",
        matrix.vocabulary.len()
    ))
}

fn curate(o: &Options) -> Outcome {
    let matrix = load_matrix(o, "curate")?;
    let out = required(&o.out, "out", "curate")?;
    let cfg = curation_config(o);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let removed_by_size = matrix.removed_by_size;
    let (samples, report) = curation::curate(matrix.samples, &cfg)?;
    let report = report.with_size_removals(removed_by_size);
    let mut curated = FeatureMatrix::new(matrix.vocabulary, samples);
    curated.removed_by_size = removed_by_size;
    curated.save(out)?;
    print_stdout(&report.to_table())
}

#[derive(Serialize)]
struct RankOutput<'a> {
    matrix_samples: usize,
    vocab_digest: String,
    ranking: &'a FeatureRanking,
}

fn rank_cmd(o: &Options) -> Outcome {
    let matrix = load_matrix(o, "rank")?;
    let ranking = rank::rank_top_k(&matrix, o.method.into(), o.top_k)?;
    if let Some(out) = &o.out {
        write_out(
            out,
            &to_json(&RankOutput {
                matrix_samples: matrix.samples.len(),
                vocab_digest: matrix.vocabulary.digest(),
                ranking: &ranking,
            }),
        )?;
    }
    print_stdout(&ranking.to_table())
}

fn train(o: &Options) -> Outcome {
    let matrix = load_matrix(o, "train")?;
    let model_path = required(&o.model, "model", "train")?;
    let spec = learner_spec(o, o.learner)?;
    let ranking = rank::rank_top_k(&matrix, o.method.into(), o.top_k)?;
    let classifier = learners::train_on_matrix(&spec, &matrix, &ranking.opcodes(), o.seed)?;
    classifier.save(model_path)?;
    print_stdout(&format!(
        "trained {} on {} samples with {} features\n",
        spec.display_name(),
        matrix.samples.len(),
        classifier.features().len()
    ))
}

fn cv_config(o: &Options, spec: LearnerSpec) -> Result<CvConfig, Failure> {
    if o.k < 2 {
        return Err(Failure::Usage("--k must be at least 2".into()));
    }
    Ok(CvConfig {
        learner: spec,
        k: o.k,
        seed: o.seed,
        selection: if o.per_fold_selection {
            SelectionMode::PerFold
        } else {
            SelectionMode::Global
        },
    })
}

fn cv(o: &Options) -> Outcome {
    let matrix = load_matrix(o, "cv")?;
    let spec = learner_spec(o, o.learner)?;
    let cfg = cv_config(o, spec)?;
    let ranking = rank::rank_top_k(&matrix, o.method.into(), o.top_k)?;
    let report = eval::cross_validate(&matrix, &ranking, &cfg)?;
    match &o.out {
        Some(out) => {
            write_out(out, &to_json(&report))?;
            print_stdout(&eval::performance_table(std::slice::from_ref(&report)))
        }
        None => print_stdout(&String::from_utf8(to_json(&report)).expect("json is utf-8")),
    }
}

fn predict(o: &Options) -> Outcome {
    let model_path = required(&o.model, "model", "predict")?;
    let classifier = Classifier::load(model_path)?;
    let (samples, digest): (Vec<Sample>, String) = match (&o.matrix, &o.manifest) {
        (Some(m), _) => {
            let matrix = FeatureMatrix::load(m)?;
            let digest = matrix.vocabulary.digest();
            (matrix.samples, digest)
        }
        (None, Some(manifest)) => {
            let vocab_path = required(&o.vocab, "vocab", "predict --manifest")?;
            let vocab = Vocabulary::load(vocab_path)?;
            let entries = corpus::read_manifest(manifest, false)?;
            for e in &entries {
                if !e.path.exists() {
                    return Err(data(format!("{}: no such file", e.path.display())));
                }
            }
            let samples: Vec<Option<Sample>> = entries
                .par_iter()
                .map(|e| {
                    let label = e.label.clone().unwrap_or_else(|| LabelTag::Benign.into());
                    Ok(read_listing(&e.path, o.dialect)?
                        .map(|t| corpus::vectorize_counts(&file_id(&e.path), &t.counts, &vocab, label).sample))
                })
                .collect::<Result<_, Failure>>()?;
            (samples.into_iter().flatten().collect(), vocab.digest())
        }
        (None, None) => return Err(Failure::Usage("`predict` requires --matrix or --manifest".into())),
    };
    classifier.check_vocabulary(Some(&digest), o.strict_vocab)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "label", "score"]).map_err(data)?;
    for s in &samples {
        let p = classifier.predict(s);
        w.write_record([s.file_id.as_str(), p.label.as_str(), &format!("{:.6}", p.score)])
            .map_err(data)?;
    }
    let bytes = w.into_inner().map_err(data)?;
    match &o.out {
        Some(out) => write_out(out, &bytes),
        None => print_stdout(&String::from_utf8_lossy(&bytes)),
    }
}

const REPORT_LEARNERS: [LearnerArg; 5] = [
    LearnerArg::Stump,
    LearnerArg::C45,
    LearnerArg::Rtree,
    LearnerArg::Reptree,
    LearnerArg::Forest,
];

#[derive(Serialize)]
struct FullReport {
    samples: usize,
    vocab_digest: String,
    rankings: Vec<FeatureRanking>,
    cross_validation: Vec<CvReport>,
}

fn report(o: &Options) -> Outcome {
    let matrix = load_matrix(o, "report")?;
    let rankings: Vec<FeatureRanking> = RankMethod::ALL
        .iter()
        .map(|&m| rank::rank_top_k(&matrix, m, o.top_k))
        .collect::<Result<_, _>>()?;
    let method: RankMethod = o.method.into();
    let selected = rankings
        .iter()
        .find(|r| r.method == method)
        .expect("every method is ranked");
    let mut reports = Vec::with_capacity(REPORT_LEARNERS.len());
    for learner in REPORT_LEARNERS {
        let cfg = cv_config(o, learner_spec(o, learner)?)?;
        reports.push(eval::cross_validate(&matrix, selected, &cfg)?);
    }
    let mut text = String::new();
    let _ = writeln!(text, "Top {} opcodes by method", o.top_k);
    text.push_str(&rank::comparison_table(&rankings));
    let _ = writeln!(text);
    let _ = writeln!(text, "{}-fold cross-validation on {} features", o.k, method.display_name());
    text.push_str(&eval::performance_table(&reports));
    if let Some(out) = &o.out {
        write_out(
            out,
            &to_json(&FullReport {
                samples: matrix.samples.len(),
                vocab_digest: matrix.vocabulary.digest(),
                rankings,
                cross_validation: reports,
            }),
        )?;
    }
    print_stdout(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["opfreq", "cv", "--bogus"]), 2);
        assert_eq!(run(["opfreq"]), 2);
    }

    #[test]
    fn missing_required_path_is_usage_error() {
        assert_eq!(run(["opfreq", "cv"]), 2);
    }

    #[test]
    fn config_keys_yield_to_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "seed = 9\ntop_k = 5\nper_fold_selection = true\nintervals = [50, 2]\n").unwrap();
        let argv: Vec<OsString> = ["opfreq", "cv", "--seed", "3", "--config", cfg.to_str().unwrap()]
            .iter()
            .map(OsString::from)
            .collect();
        let merged = merge_config(argv).unwrap();
        let cli = Cli::try_parse_from(&merged).unwrap();
        assert_eq!(cli.opts.seed, 3);
        assert_eq!(cli.opts.top_k, 5);
        assert!(cli.opts.per_fold_selection);
        assert_eq!(cli.opts.intervals, vec![50, 2]);
    }
}
