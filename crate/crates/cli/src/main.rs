//! `calibaudit`: simulate, calibrate and audit single-camera calibrations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calibaudit_core::bias::{audit_bias, kld_bias_metric, NoiseOptions};
use calibaudit_core::experiments::{guidance_run, model_ladder, uncertainty_benchmark, BenchmarkConfig, Criterion, GuidanceConfig};
use calibaudit_core::sim::{self, Scenario};
use calibaudit_core::uncertainty::{
    approx_bootstrap_covariance, bootstrap_covariance, image_extent, uncertainty_report, BootstrapConfig, BootstrapMode, Grid,
};
use calibaudit_core::{calibrate, standard_covariance, CalibrationOptions, CalibrationResult, Dataset, Error, Family};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "calibaudit", version, about = "Bias and uncertainty audits for target-based camera calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a calibration dataset.
    Simulate(SimulateArgs),
    /// Calibrate a dataset and print the result.
    Calibrate(CalibrateArgs),
    /// Detector noise, systematic error and bias ratio of a calibration.
    Bias(BiasArgs),
    /// Covariance of the intrinsics, EME and maxERE of a calibration.
    Uncertainty(UncertaintyArgs),
    /// Calibrate with models of increasing complexity and audit each.
    Ladder(LadderArgs),
    /// Repeated simulate-calibrate-audit runs against the simulation truth.
    Bench(BenchArgs),
    /// Greedy next-image selection on simulated data.
    Guide(GuideArgs),
}

#[derive(Args)]
struct Output {
    /// Output path; standard output when omitted.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Simulation preset.
    #[arg(long, value_enum, default_value = "ideal")]
    scenario: ScenarioArg,
    /// Number of frames.
    #[arg(long, default_value_t = 25)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Detector noise in pixels, overriding the preset.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Fraction of observations displaced as gross outliers.
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    /// Outlier displacement in pixels.
    #[arg(long, default_value_t = 2.0)]
    outlier_px: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset JSON.
    #[arg(long = "in", short = 'i')]
    input: PathBuf,
    /// Camera model: C3, C5, C6, C7, C8 or a family name.
    #[arg(long, default_value = "C6", value_parser = parse_family)]
    model: Family,
    /// Re-solve with a Cauchy kernel after the plain fit.
    #[arg(long)]
    robust: bool,
    /// Ignore the target's z offsets.
    #[arg(long)]
    planar: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BiasArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Keep virtual targets that contain gross outliers.
    #[arg(long)]
    no_screen: bool,
    /// Also report the median KL-divergence baseline on this grid.
    #[arg(long, value_parser = parse_grid)]
    kld_grid: Option<(usize, usize)>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "abs")]
    cov_method: CovArg,
    #[arg(long, default_value_t = 200)]
    n_bootstrap: usize,
    /// Evaluation grid, e.g. 10x10.
    #[arg(long, default_value = "10x10", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Monte-Carlo draws for maxERE.
    #[arg(long, default_value_t = 1000)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct LadderArgs {
    /// Dataset JSON; a simulated dataset is used when omitted.
    #[arg(long = "in", short = 'i')]
    input: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
    /// Families to fit, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "C3,C5,C6,C7,C8", value_parser = parse_family)]
    models: Vec<Family>,
    #[arg(long, value_enum, default_value = "json")]
    report: ReportFormat,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "ideal")]
    scenario: ScenarioArg,
    /// Frame counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,25,30,35,40,45,50")]
    frames: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Covariance methods to evaluate, comma separated. The standard
    /// estimator always runs.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "std,abs")]
    cov_method: Vec<CovArg>,
    #[arg(long, default_value_t = 200)]
    n_bootstrap: usize,
    #[arg(long, default_value = "10x10", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `csv` prints the aggregates only.
    #[arg(long, value_enum, default_value = "json")]
    report: ReportFormat,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GuideArgs {
    #[arg(long, value_enum, default_value = "eme")]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames before the first selection.
    #[arg(long, default_value_t = 2)]
    initial: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Number of candidate poses.
    #[arg(long, default_value_t = 64)]
    pool: usize,
    /// Factor applied to the focal lengths when scoring candidates.
    #[arg(long, default_value_t = 1.0)]
    focal_scale: f64,
    #[arg(long, default_value = "10x10", value_parser = parse_grid)]
    grid: (usize, usize),
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Ideal,
    Underfit,
    Nonplanar,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Ideal => Scenario::Ideal,
            ScenarioArg::Underfit => Scenario::Underfit,
            ScenarioArg::Nonplanar => Scenario::Nonplanar,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CovArg {
    Std,
    Bs,
    Abs,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Eme,
    Trace,
    Random,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Eme => Criterion::Eme,
            CriterionArg::Trace => Criterion::TraceSigma,
            CriterionArg::Random => Criterion::Random,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid size `{v}`: {e}"));
    let (nx, ny) = (parse(a)?, parse(b)?);
    if nx == 0 || ny == 0 {
        return Err("grid sizes must be positive".into());
    }
    Ok((nx, ny))
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Solver(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    Ok(Dataset::from_json(&text)?)
}

fn emit(out: &Output, text: &str) -> CliResult<()> {
    let io = |e: std::io::Error| Failure::Validation(format!("cannot write output: {e}"));
    match &out.out {
        Some(p) => fs::write(p, text).map_err(io),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(io)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn sim_config(args: &SimArgs) -> CliResult<sim::SimConfig> {
    let mut cfg = Scenario::from(args.scenario).config(args.frames, args.seed);
    if let Some(n) = args.noise {
        cfg.noise_sigma = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fit(args: &FitArgs) -> CliResult<(Dataset, CalibrationResult)> {
    let ds = read_dataset(&args.input)?;
    let opts = CalibrationOptions { robust: args.robust, planar: args.planar, ..Default::default() };
    let res = calibrate(&ds, args.model, &opts)?;
    Ok((ds, res))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => {
            let mut cfg = sim_config(&a.sim)?;
            cfg.outlier_fraction = a.outlier_fraction;
            cfg.outlier_px = a.outlier_px;
            let ds = sim::simulate(&cfg)?;
            emit(&a.output, &to_json(&ds))
        }
        Command::Calibrate(a) => {
            let (_, res) = fit(&a.fit)?;
            emit(&a.output, &to_json(&res.report()))
        }
        Command::Bias(a) => {
            let (ds, res) = fit(&a.fit)?;
            let opts = NoiseOptions { screen_outliers: !a.no_screen, ..Default::default() };
            let report = audit_bias(&res, &ds, &opts)?;
            #[derive(Serialize)]
            struct BiasOut {
                #[serde(flatten)]
                report: calibaudit_core::bias::BiasReportJson,
                #[serde(skip_serializing_if = "Option::is_none")]
                kld_median: Option<f64>,
            }
            let kld_median = a.kld_grid.map(|g| kld_bias_metric(&res, &ds, g)).transpose()?;
            emit(&a.output, &to_json(&BiasOut { report: report.to_json(), kld_median }))
        }
        Command::Uncertainty(a) => {
            let (ds, res) = fit(&a.fit)?;
            let bs = |mode| BootstrapConfig { n_samples: a.n_bootstrap, seed: a.seed, mode };
            let cov = match a.cov_method {
                CovArg::Std => standard_covariance(&res)?,
                CovArg::Bs => bootstrap_covariance(&ds, &res, &bs(BootstrapMode::Full))?,
                CovArg::Abs => approx_bootstrap_covariance(&res, &bs(BootstrapMode::Approximated))?,
            };
            let (w, h) = image_extent(&ds, &res.camera);
            let grid = Grid { nx: a.grid.0, ny: a.grid.1, width: w, height: h };
            let report = uncertainty_report(&res, &cov, &grid, a.n_mc, a.seed)?;
            emit(&a.output, &to_json(&report))
        }
        Command::Ladder(a) => {
            let ds = match &a.input {
                Some(p) => read_dataset(p)?,
                None => sim::simulate(&sim_config(&a.sim)?)?,
            };
            let rows = model_ladder(&ds, &a.models, &CalibrationOptions::default());
            let text = match a.report {
                ReportFormat::Json => to_json(&rows),
                ReportFormat::Csv => to_csv(&rows)?,
            };
            emit(&a.output, &text)
        }
        Command::Bench(a) => {
            let cfg = BenchmarkConfig {
                scenario: a.scenario.into(),
                n_reps: a.reps,
                n_frames: a.frames.clone(),
                n_bootstrap: a.n_bootstrap,
                seed: a.seed,
                full_bootstrap: a.cov_method.contains(&CovArg::Bs),
                approx_bootstrap: a.cov_method.contains(&CovArg::Abs),
                grid: a.grid,
            };
            let run = uncertainty_benchmark(&cfg)?;
            let text = match a.report {
                ReportFormat::Json => to_json(&run),
                ReportFormat::Csv => to_csv(&run.aggregates)?,
            };
            emit(&a.output, &text)
        }
        Command::Guide(a) => {
            if a.initial < 2 || a.pool == 0 || !(a.focal_scale > 0.0) {
                return Err(Failure::Validation("guide needs at least 2 initial frames, a pool and a positive focal scale".into()));
            }
            let cfg = GuidanceConfig {
                seed: a.seed,
                n_initial: a.initial,
                n_steps: a.steps,
                pool_size: a.pool,
                criterion: a.criterion.into(),
                focal_scale: a.focal_scale,
                grid: a.grid,
            };
            emit(&a.output, &to_json(&guidance_run(&cfg)?))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
