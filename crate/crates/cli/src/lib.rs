//! Command-line front end: `decay`, `run`, `compare` and `calibrate`.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 I/O error,
//! 4 calibration non-convergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::{json, Value};
use tdrs_core::distance::calibrate_sigma0;
use tdrs_core::harness::{compare_variants_with, summarize, sweep_decay, DecayCurve, Probe};
use tdrs_core::pipeline::{run, PipelineConfig, Variant};
use tdrs_core::reinforce::calibrate_re;
use tdrs_core::types::build_sequence;
use tdrs_core::{DrsError, DrsHyperParams, RotarySchedule, Segment, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CALIBRATION: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Calibration(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Calibration(_) => EXIT_CALIBRATION,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Calibration(m) => write!(f, "calibration error: {m}"),
        }
    }
}

impl From<DrsError> for CliError {
    fn from(e: DrsError) -> Self {
        match e {
            DrsError::Calibration { .. } => CliError::Calibration(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tdrs", version, about = "RoPE attention decay sweeps, ablations and calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep the RoPE decay envelope and both distance kernels over gaps 0..=max-gap.
    Decay(DecayArgs),
    /// Run one pipeline variant on a synthetic sequence and export every stage.
    Run(RunArgs),
    /// Run all four variants on the same sequence and compare them.
    Compare(RunArgs),
    /// Print the calibrated kernel scalars for a given d_max.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Ones,
    Random,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 512)]
    pub max_gap: usize,
    #[arg(long, default_value_t = 0.01)]
    pub w_min_dc: f64,
    #[arg(long, default_value_t = 0.02)]
    pub w_min_re: f64,
    #[arg(long, value_enum, default_value_t = ProbeKind::Ones)]
    pub probe: ProbeKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random probe vectors (random probe only).
    #[arg(long, default_value_t = 16)]
    pub trials: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 8)]
    pub vision: usize,
    #[arg(long, default_value_t = 8)]
    pub instr: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with the pipeline settings (cannot be combined with the
    /// pipeline flags below).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// baseline | sd | no-rerd | full
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub auto_calibrate: bool,
    #[arg(long)]
    pub w_min_dc: Option<f64>,
    #[arg(long)]
    pub w_min_re: Option<f64>,
    #[arg(long)]
    pub lambda_dc: Option<f64>,
    #[arg(long)]
    pub lambda_re: Option<f64>,
    #[arg(long)]
    pub causal: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub d_max: usize,
    #[arg(long, default_value_t = 0.01)]
    pub w_min_dc: f64,
    #[arg(long, default_value_t = 0.02)]
    pub w_min_re: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Directory for calibration.json; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Decay(a) => cmd_decay(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

/// 17 significant digits, locale independent.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

/// Pretty JSON with sorted keys and a trailing newline.
fn to_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn value_of<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

pub fn decay_csv(curve: &DecayCurve) -> String {
    let mut out = String::from("gap,mean_abs_logit,r_dc,r_re\n");
    for i in 0..curve.gaps.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            curve.gaps[i],
            fmt_f64(curve.mean_abs_logit[i]),
            fmt_f64(curve.r_dc_curve[i]),
            fmt_f64(curve.r_re_curve[i])
        );
    }
    out
}

/// Matrix with one labelled row per query: `query_position,query_segment,k0,k1,...`.
pub fn matrix_csv(values: &Array2<f64>, rows: &[(usize, Segment)]) -> String {
    let mut out = String::from("query_position,query_segment");
    for j in 0..values.ncols() {
        let _ = write!(out, ",k{j}");
    }
    out.push('\n');
    for (row, (pos, seg)) in values.rows().into_iter().zip(rows) {
        let _ = write!(out, "{pos},{seg}");
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

fn cmd_decay(a: &DecayArgs) -> Result<(), CliError> {
    let hyper = DrsHyperParams {
        w_min_dc: a.w_min_dc,
        w_min_re: a.w_min_re,
        ..Default::default()
    };
    let probe = match a.probe {
        ProbeKind::Ones => Probe::Ones,
        ProbeKind::Random => Probe::Random {
            seed: a.seed,
            trials: a.trials,
        },
    };
    let curve = sweep_decay(a.dim, a.max_gap, hyper, probe)?;
    let calibration = json!({
        "alpha_ref": curve.alpha_ref,
        "d_max": a.max_gap,
        "dim": a.dim,
        "iterations": curve.iterations,
        "probe": value_of(&curve.probe),
        "sigma0": curve.sigma0,
        "sigma_re": curve.sigma_re,
        "w_min_dc": a.w_min_dc,
        "w_min_re": a.w_min_re,
    });
    write_file(&a.out, "decay_curve.csv", &decay_csv(&curve))?;
    write_file(&a.out, "calibration.json", &to_json(&calibration))
}

/// Pipeline settings from `--config` or from the explicit flags, never both.
pub fn resolve_config(a: &RunArgs) -> Result<PipelineConfig, CliError> {
    let explicit = a.variant.is_some()
        || a.auto_calibrate
        || a.causal
        || a.w_min_dc.is_some()
        || a.w_min_re.is_some()
        || a.lambda_dc.is_some()
        || a.lambda_re.is_some();
    if let Some(path) = &a.config {
        if explicit {
            return Err(CliError::Usage(
                "--config cannot be combined with explicit pipeline flags".into(),
            ));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return Ok(PipelineConfig::from_json(&text)?);
    }
    let defaults = PipelineConfig::default();
    let variant = match &a.variant {
        Some(v) => v.parse::<Variant>()?,
        None => defaults.variant,
    };
    let hyper = DrsHyperParams {
        w_min_dc: a.w_min_dc.unwrap_or(defaults.hyper.w_min_dc),
        w_min_re: a.w_min_re.unwrap_or(defaults.hyper.w_min_re),
        lambda_dc: a.lambda_dc.unwrap_or(defaults.hyper.lambda_dc),
        lambda_re: a.lambda_re.unwrap_or(defaults.hyper.lambda_re),
        ..defaults.hyper
    };
    Ok(PipelineConfig {
        variant,
        hyper,
        auto_calibrate: a.auto_calibrate,
        causal_mask: a.causal,
        ..defaults
    }
    .validate()?)
}

fn sequence_json(a: &RunArgs) -> Value {
    json!({ "dim": a.dim, "instr": a.instr, "seed": a.seed, "vision": a.vision })
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(a)?;
    let seq = build_sequence(a.vision, a.instr, a.dim, a.seed)?;
    let schedule = RotarySchedule::new(a.dim)?;
    let result = run(&seq, &seq, &seq, &schedule, &cfg)?;
    let baseline = run(
        &seq,
        &seq,
        &seq,
        &schedule,
        &PipelineConfig {
            variant: Variant::Baseline,
            ..cfg
        },
    )?;
    let summary = summarize(&result, baseline.weights.values());

    for stage in [Stage::Base, Stage::Sd, Stage::Dc, Stage::Re, Stage::Combined] {
        let m = result.stage(stage).expect("run populates every stage");
        write_file(
            &a.out,
            &format!("attention_{stage}.csv"),
            &matrix_csv(m.values(), &result.query_labels),
        )?;
    }
    write_file(&a.out, "weights.csv", &matrix_csv(result.weights.values(), &result.query_labels))?;

    let report = json!({
        "calibration": value_of(&result.calibration),
        "causal_mask": result.causal_mask,
        "distant_threshold": tdrs_core::harness::distant_threshold(result.calibration.d_max),
        "sequence": sequence_json(a),
        "statistics": value_of(&summary),
        "variant": result.variant.key(),
    });
    write_file(&a.out, "report.json", &to_json(&report))
}

fn cmd_compare(a: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(a)?;
    let seq = build_sequence(a.vision, a.instr, a.dim, a.seed)?;
    let schedule = RotarySchedule::new(a.dim)?;
    let report = compare_variants_with(&seq, &schedule, &cfg)?;
    let mut v = value_of(&report);
    v["sequence"] = sequence_json(a);
    v["causal_mask"] = json!(cfg.causal_mask);
    write_file(&a.out, "compare.json", &to_json(&v))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let sigma0 = calibrate_sigma0(a.d_max, a.w_min_dc)?;
    if !(a.tol > 0.0) {
        return Err(CliError::Usage(format!("--tol must be > 0, got {}", a.tol)));
    }
    let cal = calibrate_re(a.d_max, a.w_min_re, a.tol, a.max_iters)?;
    let v = json!({
        "alpha_ref": cal.alpha_ref,
        "boundary_residual": cal.residual,
        "d_max": a.d_max,
        "iterations": cal.iterations,
        "sigma0": sigma0,
        "sigma_re": cal.sigma_re,
        "w_min_dc": a.w_min_dc,
        "w_min_re": a.w_min_re,
    });
    match &a.out {
        Some(dir) => write_file(dir, "calibration.json", &to_json(&v)),
        None => {
            print!("{}", to_json(&v));
            Ok(())
        }
    }
}
