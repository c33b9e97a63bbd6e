//! Command-line front end. `run` drives the full pipeline described by a
//! TOML config file (ingest, fit, select, bootstrap, report); `simulate`
//! draws a synthetic dataset from explicit parameters onto the design of an
//! existing data file.

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tpmix::rng::{child_seed, Stream};
use tpmix::{
    bootstrap_se, prepare_with_zero_threshold, read_panel_csv, select_model, simulate,
    write_panel_csv, BootstrapOptions, ColumnMap, QuantileConfig, SelectOptions,
};

/// Pipeline stage a failure is attributed to. Each stage owns one exit code
/// so callers can tell a bad config from bad data from a failed fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Config,
    Data,
    Fit,
    Io,
}

impl Phase {
    fn exit_code(self) -> u8 {
        match self {
            Phase::Config => 2,
            Phase::Data => 3,
            Phase::Fit => 4,
            Phase::Io => 5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Phase::Config => "config",
            Phase::Data => "data",
            Phase::Fit => "fit",
            Phase::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub phase: Phase,
    pub message: String,
}

impl Failure {
    pub fn new(phase: Phase, message: impl Into<String>) -> Self {
        Self {
            phase,
            message: message.into(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a pipeline stage to any displayable error.
pub trait InPhase<T> {
    fn in_phase(self, phase: Phase) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> InPhase<T> for Result<T, E> {
    fn in_phase(self, phase: Phase) -> CliResult<T> {
        self.map_err(|e| Failure::new(phase, e.to_string()))
    }
}

#[derive(Parser)]
#[command(
    name = "tpmix",
    version,
    about = "Two-part mixture quantile regression for longitudinal semicontinuous outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, select, and report models as described by a TOML config file
    Run(Box<RunArgs>),
    /// Draw a synthetic dataset from a parameter file onto a template design
    Simulate(Box<SimulateArgs>),
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file; any flag below overrides the file value
    #[arg(long)]
    config: PathBuf,
    /// Input CSV path
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory the artifacts are written into
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Master seed; every random stream is derived from it
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated quantile levels, each in (0, 1)
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Comma-separated component counts to compare
    #[arg(long, value_delimiter = ',')]
    g_values: Option<Vec<usize>>,
    /// Random starts per fit
    #[arg(long)]
    n_starts: Option<usize>,
    /// EM iteration cap per start
    #[arg(long)]
    max_iter: Option<usize>,
    /// EM convergence tolerance on the objective
    #[arg(long)]
    tol: Option<f64>,
    /// Outcomes at or below this magnitude count as zero
    #[arg(long)]
    zero_threshold: Option<f64>,
    /// Parametric bootstrap replicates per tau; 0 disables
    #[arg(long)]
    bootstrap_replicates: Option<usize>,
    /// Refit bootstrap replicates from fresh multistarts instead of the point estimate
    #[arg(long)]
    bootstrap_multistart: Option<bool>,
    /// Worker threads; 0 keeps the library default
    #[arg(long)]
    threads: Option<usize>,
    /// Penalty mode: off, fixed, or cv
    #[arg(long)]
    penalty: Option<String>,
    /// Penalty strength for --penalty fixed
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated explicit lambda grid for --penalty cv
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Cross-validation folds for --penalty cv
    #[arg(long)]
    n_folds: Option<usize>,
    /// Automatic lambda grid size for --penalty cv
    #[arg(long)]
    grid_size: Option<usize>,
    /// Unit id column name
    #[arg(long)]
    unit_col: Option<String>,
    /// Time column name
    #[arg(long)]
    time_col: Option<String>,
    /// Outcome column name
    #[arg(long)]
    y_col: Option<String>,
    /// Comma-separated occurrence-part covariate columns
    #[arg(long, value_delimiter = ',')]
    binary_cols: Option<Vec<String>>,
    /// Comma-separated positive-part covariate columns
    #[arg(long, value_delimiter = ',')]
    positive_cols: Option<Vec<String>>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// JSON parameter file: tau, gamma, beta, sigma, b0, b1, pi
    #[arg(long)]
    params: PathBuf,
    /// CSV whose units, times, and covariates the draw reuses
    #[arg(long)]
    template: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Simulation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unit id column name in the template
    #[arg(long, default_value = "unit_id")]
    unit_col: String,
    /// Time column name in the template
    #[arg(long, default_value = "time")]
    time_col: String,
    /// Outcome column name in the template
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Comma-separated occurrence-part covariate columns
    #[arg(long, value_delimiter = ',', required = true)]
    binary_cols: Vec<String>,
    /// Comma-separated positive-part covariate columns
    #[arg(long, value_delimiter = ',', required = true)]
    positive_cols: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail(Failure::new(Phase::Config, e.to_string()));
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Simulate(args) => cmd_simulate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

/// Emits a machine-readable error report on stderr and picks the exit code.
fn fail(f: Failure) -> ExitCode {
    let report = serde_json::json!({
        "error": {
            "phase": f.phase.label(),
            "exit_code": f.phase.exit_code(),
            "message": f.message,
        }
    });
    eprintln!("{report}");
    ExitCode::from(f.phase.exit_code())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = config::resolve(args)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .in_phase(Phase::Config)?;
    }
    config::check_columns(&cfg)?;

    let panel = read_panel_csv(&cfg.data, &cfg.columns).in_phase(Phase::Data)?;
    // Surface structural data problems (negative outcomes, duplicate rows,
    // nothing positive) before any fitting starts.
    prepare_with_zero_threshold(&panel, cfg.zero_threshold).in_phase(Phase::Data)?;

    std::fs::create_dir_all(&cfg.output_dir).in_phase(Phase::Io)?;
    report::write_summary(&cfg, &panel).in_phase(Phase::Io)?;

    let options = SelectOptions {
        fit: cfg.fit_options(),
        penalty: cfg.penalty_mode(),
        zero_threshold: cfg.zero_threshold,
    };
    let table = select_model(&panel, &cfg.taus, &cfg.g_values, &options).in_phase(Phase::Fit)?;

    // One bootstrap pass per quantile level, on that level's selected model.
    let mut boots: Vec<report::TauBootstrap> = Vec::with_capacity(cfg.taus.len());
    if cfg.bootstrap_replicates > 0 {
        let selected: Vec<_> = table.selected_rows().collect();
        for (ti, tau) in cfg.taus.iter().enumerate() {
            let row = selected[ti];
            let fit = row.fit.as_ref().expect("selected rows carry their fit");
            let quantile = QuantileConfig::new(*tau).in_phase(Phase::Fit)?;
            let seed = child_seed(cfg.seed, Stream::Bootstrap, ti as u64);
            let boot = bootstrap_se(
                fit,
                &panel,
                &quantile,
                cfg.bootstrap_replicates,
                seed,
                &BootstrapOptions {
                    fit: cfg.fit_options(),
                    multistart: cfg.bootstrap_multistart,
                },
            )
            .in_phase(Phase::Fit)?;
            boots.push(Some((seed, boot)));
        }
    } else {
        boots.resize_with(cfg.taus.len(), || None);
    }

    report::write_selection(&cfg, &table).in_phase(Phase::Io)?;
    report::write_coefficients(&cfg, &table, &boots).in_phase(Phase::Io)?;
    report::write_paths(&cfg, &table, &boots).in_phase(Phase::Io)?;
    report::write_run_log(&cfg, &panel, &table, &boots).in_phase(Phase::Io)?;

    println!(
        "wrote summary.csv, selection.csv, paths.csv, run.log and {} coefficient file(s) to {}",
        cfg.taus.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.params).in_phase(Phase::Config)?;
    let file: config::ParamsFile = serde_json::from_str(&text).in_phase(Phase::Config)?;
    let (params, quantile) = file.into_model().in_phase(Phase::Config)?;

    let map = ColumnMap {
        unit: args.unit_col.clone(),
        time: args.time_col.clone(),
        y: args.y_col.clone(),
        binary: args.binary_cols.clone(),
        positive: args.positive_cols.clone(),
    };
    let template = read_panel_csv(&args.template, &map).in_phase(Phase::Data)?;
    let drawn = simulate(&params, &template, &quantile, args.seed).in_phase(Phase::Fit)?;
    write_panel_csv(&args.out, &drawn).in_phase(Phase::Io)?;

    println!(
        "wrote {} rows for {} units to {}",
        drawn.n_observations(),
        drawn.n_units(),
        args.out.display()
    );
    Ok(())
}
