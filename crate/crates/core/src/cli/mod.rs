//! Command-line front end.
//!
//! Exit codes: 0 success, 2 schema or config error, 3 invariant violation,
//! 4 non-finite training abort, 5 missing class, 6 gradient check failure.

pub mod config;
pub mod records;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibration::calibrate_group;
use crate::diagnostics::{
    class_histograms, entropy_gap, length_entropy_association, roc_auc, roc_points, te_ae_report, verify_answer,
    ClassHistograms, EntropyRecord, HISTOGRAM_BINS,
};
use crate::entropy::segment_entropy;
use crate::error::Error;
use crate::model::{CalibrationConfig, Reward, Rollout, Variant};
use crate::objective::{finite_diff_check, random_instance, DEFAULT_STEP};
use crate::simulator::{metrics_csv, train, RunSummary};

use config::{FileConfig, TaskKind};
use records::{think_span_from_offsets, GroupRecord, LogRecord, THINK_OPEN};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_MISSING_CLASS: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EGPO_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "egpo-out";

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::new(EXIT_SCHEMA, format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "egpo", version = env!("CARGO_PKG_VERSION"), about = "Entropy-guided advantage calibration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate advantages for a stream of group records
    Calibrate(CalibrateArgs),
    /// Run the synthetic training simulator
    Train(Box<TrainArgs>),
    /// Entropy gap, TE/AE ROC-AUC and histograms over a rollout log
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of the analytic gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Input JSONL, one group per line
    pub input: PathBuf,
    /// Output JSONL; stdout when omitted
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "egpo")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0.2)]
    pub clip_eps: f64,
    #[arg(long, default_value_t = 0.8)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_h: f64,
}

impl CalibrateArgs {
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            clip_eps: self.clip_eps,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            eps_h: self.eps_h,
            ..CalibrationConfig::for_variant(self.variant)
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML config file
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Metrics CSV path; defaults to $EGPO_OUT_DIR/metrics.csv
    #[arg(short, long)]
    pub metrics: Option<PathBuf>,
    /// Run summary JSON path; defaults to summary.json beside the metrics
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub inner_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub snapshot_period: Option<usize>,
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub gold_depth: Option<f64>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub ratio_mode: Option<String>,
}

impl TrainArgs {
    fn as_overrides(&self) -> FileConfig {
        let mut f = FileConfig {
            seed: self.seed,
            steps: self.steps,
            group_size: self.group_size,
            inner_epochs: self.inner_epochs,
            learning_rate: self.learning_rate,
            snapshot_period: self.snapshot_period,
            ..Default::default()
        };
        f.task.kind = self.task;
        f.task.contexts = self.contexts;
        f.task.vocab = self.vocab;
        f.task.horizon = self.horizon;
        f.task.gold_depth = self.gold_depth;
        f.calibration.variant = self.variant.clone();
        f.calibration.clip_eps = self.clip_eps;
        f.calibration.ratio_mode = self.ratio_mode.clone();
        f
    }
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// Rollout-log JSONL
    pub input: PathBuf,
    /// Output directory; defaults to $EGPO_OUT_DIR
    #[arg(short, long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Seed of the first instance; instance i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    let mut w = create_file(path)?;
    w.write_all(contents.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Calibrates every line of `reader`, writing one record per group.
/// Returns the number of groups written.
pub fn calibrate_stream<R: BufRead, W: Write>(reader: R, mut writer: W, cfg: &CalibrationConfig) -> CliResult<usize> {
    cfg.validate().map_err(|e| CliError::new(EXIT_SCHEMA, e.to_string()))?;
    let mut written = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: schema violation: {e}")))?;
        rec.rewards()
            .map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: schema violation: {e}")))?;
        let out = rec
            .into_group()
            .and_then(|g| calibrate_group(&g, cfg))
            .map_err(|e| CliError::new(EXIT_INVARIANT, format!("line {lineno}: {e}")))?;
        serde_json::to_writer(&mut writer, &out)
            .map_err(io::Error::from)
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| CliError::new(EXIT_SCHEMA, format!("write failed: {e}")))?;
        written += 1;
    }
    writer
        .flush()
        .map_err(|e| CliError::new(EXIT_SCHEMA, format!("write failed: {e}")))?;
    Ok(written)
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<usize> {
    let input = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let reader = BufReader::new(input);
    let cfg = args.calibration();
    match &args.output {
        Some(path) => calibrate_stream(reader, create_file(path)?, &cfg),
        None => calibrate_stream(reader, io::stdout().lock(), &cfg),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: RunSummary,
}

fn train_error(e: Error) -> CliError {
    match &e {
        Error::TrainingAborted { step, source } if matches!(**source, Error::NonFinite(_)) => {
            CliError::new(EXIT_NON_FINITE, format!("non-finite value at step {step}: {source}"))
        }
        Error::InvalidConfig(_) | Error::LengthMismatch { .. } => {
            CliError::new(EXIT_SCHEMA, format!("config error: {e}"))
        }
        _ => CliError::new(EXIT_INVARIANT, e.to_string()),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            FileConfig::parse(&text).map_err(|e| CliError::new(EXIT_SCHEMA, format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let cfg = file
        .overlay(args.as_overrides())
        .resolve()
        .map_err(|e| CliError::new(EXIT_SCHEMA, format!("config error: {e}")))?;
    let run = train(&cfg).map_err(train_error)?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| default_out_dir().join("metrics.csv"));
    let summary_path = args.summary.clone().unwrap_or_else(|| {
        metrics_path
            .parent()
            .map(|p| p.join("summary.json"))
            .unwrap_or_else(|| PathBuf::from("summary.json"))
    });
    write_file(&metrics_path, &metrics_csv(&run.history))?;
    let summary = run.summary();
    write_file(&summary_path, &to_json(&summary))?;
    Ok(TrainOutcome {
        metrics_path,
        summary_path,
        summary,
    })
}

/// Summary written by `diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub records: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub mu_correct: f64,
    pub mu_incorrect: f64,
    pub delta: f64,
    pub auc_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_te: Option<f64>,
    pub auc_ae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

fn log_record_to_entropy(rec: LogRecord) -> crate::error::Result<(EntropyRecord, Option<usize>)> {
    let correct = match (&rec.text, &rec.gold, rec.correct, rec.reward) {
        (Some(text), Some(gold), _, _) => verify_answer(text, gold).is_correct(),
        (_, _, Some(c), _) => c,
        (_, _, None, Some(r)) => Reward::from_int(r)?.is_correct(),
        _ => {
            return Err(Error::InvalidTrajectory(
                "record needs `correct`, `reward`, or `text` with `gold`".into(),
            ))
        }
    };
    if let Some(lps) = rec.token_logprobs {
        let mut span = rec.think_span;
        if span.is_none() {
            if let Some(text) = rec.text.as_deref().filter(|t| t.contains(THINK_OPEN)) {
                let offsets = rec.token_offsets.as_deref().ok_or_else(|| {
                    Error::InvalidTrajectory(
                        "text has <think> markers but no token_offsets; supply think_span or token_offsets".into(),
                    )
                })?;
                if offsets.len() != lps.len() {
                    return Err(Error::LengthMismatch {
                        what: "token_offsets vs token_logprobs",
                        left: offsets.len(),
                        right: lps.len(),
                    });
                }
                span = think_span_from_offsets(text, offsets)?;
            }
        }
        let length = rec.length.unwrap_or(lps.len());
        let reward = if correct { Reward::Correct } else { Reward::Incorrect };
        let mut r = Rollout::new(rec.prompt_id.unwrap_or_default(), lps, reward)?;
        if let Some(s) = span {
            r = r.with_span(s)?;
        }
        let seg = segment_entropy(&r)?;
        return Ok((
            EntropyRecord {
                total: seg.total,
                thinking: seg.thinking,
                answer: seg.answer,
                correct,
                length,
            },
            Some(length),
        ));
    }
    let total = rec
        .entropy
        .ok_or_else(|| Error::InvalidTrajectory("record needs `token_logprobs` or `entropy`".into()))?;
    for h in [Some(total), rec.thinking_entropy, rec.answer_entropy]
        .into_iter()
        .flatten()
    {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::NonFinite(format!("entropy {h}")));
        }
    }
    Ok((
        EntropyRecord {
            total,
            thinking: rec.thinking_entropy,
            answer: rec.answer_entropy.or(Some(total)),
            correct,
            length: rec.length.unwrap_or(0),
        },
        rec.length,
    ))
}

fn missing_class(e: Error) -> CliError {
    match e {
        Error::MissingClass(_) => CliError::new(EXIT_MISSING_CLASS, e.to_string()),
        _ => CliError::new(EXIT_INVARIANT, e.to_string()),
    }
}

fn histogram_rows(out: &mut String, segment: &str, h: &ClassHistograms) {
    for (class, hist) in [("correct", &h.correct), ("incorrect", &h.incorrect)] {
        for (bin, count) in hist.counts.iter().enumerate() {
            let (lo, hi) = hist.bin_edges(bin);
            let _ = writeln!(out, "{segment},{class},{bin},{lo},{hi},{count}");
        }
    }
}

fn roc_rows(out: &mut String, segment: &str, pairs: &[(f64, bool)]) -> CliResult<()> {
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| !p.1).collect();
    for (fpr, tpr) in roc_points(&scores, &labels).map_err(missing_class)? {
        let _ = writeln!(out, "{segment},{fpr},{tpr}");
    }
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> CliResult<DiagnoseSummary> {
    let input = File::open(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let mut records = Vec::new();
    let mut lengths = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: schema violation: {e}")))?;
        let (er, len) = log_record_to_entropy(rec)
            .map_err(|e| CliError::new(EXIT_SCHEMA, format!("line {lineno}: schema violation: {e}")))?;
        if let (Some(len), Some(ae)) = (len, er.answer) {
            lengths.push((len, ae));
        }
        records.push(er);
    }

    let total: Vec<(f64, bool)> = records.iter().map(|r| (r.total, r.correct)).collect();
    let gap = entropy_gap(&total).map_err(missing_class)?;
    let scores: Vec<f64> = total.iter().map(|p| p.0).collect();
    let labels: Vec<bool> = total.iter().map(|p| !p.1).collect();
    let auc_total = roc_auc(&scores, &labels).map_err(missing_class)?;

    let ae: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.answer.map(|h| (h, r.correct)))
        .collect();
    let te: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.thinking.map(|h| (h, r.correct)))
        .collect();
    let (auc_te, auc_ae) = match te_ae_report(&records) {
        Ok(rep) => (Some(rep.auc_te), rep.auc_ae),
        Err(Error::NoSpans) => {
            let s: Vec<f64> = ae.iter().map(|p| p.0).collect();
            let l: Vec<bool> = ae.iter().map(|p| !p.1).collect();
            (None, roc_auc(&s, &l).map_err(missing_class)?)
        }
        Err(e) => return Err(missing_class(e)),
    };
    let spearman = length_entropy_association(&lengths).ok();

    let mut hist = String::from("segment,class,bin,lo,hi,count\n");
    let mut roc = String::from("segment,fpr,tpr\n");
    histogram_rows(&mut hist, "total", &class_histograms(&total, HISTOGRAM_BINS));
    roc_rows(&mut roc, "total", &total)?;
    if auc_te.is_some() {
        histogram_rows(&mut hist, "thinking", &class_histograms(&te, HISTOGRAM_BINS));
        roc_rows(&mut roc, "thinking", &te)?;
    }
    histogram_rows(&mut hist, "answer", &class_histograms(&ae, HISTOGRAM_BINS));
    roc_rows(&mut roc, "answer", &ae)?;

    let correct = total.iter().filter(|p| p.1).count();
    let summary = DiagnoseSummary {
        records: records.len(),
        correct,
        incorrect: records.len() - correct,
        mu_correct: gap.mu_correct,
        mu_incorrect: gap.mu_incorrect,
        delta: gap.delta,
        auc_total,
        auc_te,
        auc_ae,
        spearman,
    };
    let dir = args.out_dir.clone().unwrap_or_else(default_out_dir);
    write_file(&dir.join("histogram.csv"), &hist)?;
    write_file(&dir.join("roc.csv"), &roc)?;
    write_file(&dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub worst_rel_error: f64,
    pub worst_seed: u64,
    pub checked: usize,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<GradcheckOutcome> {
    if args.trials == 0 {
        return Err(CliError::new(EXIT_SCHEMA, "trials must be >= 1"));
    }
    let mut worst = GradcheckOutcome {
        worst_rel_error: 0.0,
        worst_seed: args.seed,
        checked: 0,
    };
    let mut first_failure = None;
    for i in 0..args.trials {
        let seed = args.seed.wrapping_add(i);
        let inst = random_instance(seed);
        let rep = finite_diff_check(
            &inst.policy,
            &inst.groups,
            inst.clip_eps,
            inst.mode,
            args.step,
            args.tol,
        )
        .map_err(|e| CliError::new(EXIT_SCHEMA, e.to_string()))?;
        worst.checked += rep.checked;
        if rep.max_rel_error > worst.worst_rel_error || i == 0 {
            worst.worst_rel_error = rep.max_rel_error;
            worst.worst_seed = seed;
        }
        if !rep.passed && first_failure.is_none() {
            first_failure = Some((seed, rep.max_rel_error));
        }
    }
    match first_failure {
        Some((seed, err)) => Err(CliError::new(
            EXIT_GRADCHECK,
            format!(
                "gradient check failed: seed {seed} has relative error {err:e} >= tol {:e} (worst {:e})",
                args.tol, worst.worst_rel_error
            ),
        )),
        None => Ok(worst),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(&a).map(|_| ()),
        Command::Train(a) => {
            let out = cmd_train(&a)?;
            let delta = out
                .summary
                .final_delta
                .map(|d| d.to_string())
                .unwrap_or_else(|| "undefined".into());
            println!("final accuracy {}", out.summary.final_accuracy);
            println!("final delta {delta}");
            println!("gold probability improvement {}", out.summary.gold_prob_improvement);
            Ok(())
        }
        Command::Diagnose(a) => {
            let s = cmd_diagnose(&a)?;
            println!("{}", to_json(&s).trim_end());
            Ok(())
        }
        Command::Gradcheck(a) => {
            let out = cmd_gradcheck(&a)?;
            println!(
                "worst relative error {:e} (seed {})",
                out.worst_rel_error, out.worst_seed
            );
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("egpo: {e}");
            e.code
        }
    }
}
