//! Run configuration: the TOML file schema, flag overrides, and validation.
//! Precedence is defaults < file < command line.

use std::path::PathBuf;

use serde::Deserialize;
use tpmix::{ColumnMap, Error, FitOptions, MixtureParams, PenaltyConfig, PenaltyMode, QuantileConfig};

use crate::{CliResult, Failure, InPhase, Phase, RunArgs};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    taus: Option<Vec<f64>>,
    g_values: Option<Vec<usize>>,
    n_starts: Option<usize>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    zero_threshold: Option<f64>,
    bootstrap_replicates: Option<usize>,
    bootstrap_multistart: Option<bool>,
    threads: Option<usize>,
    columns: Option<FileColumns>,
    penalty: Option<FilePenalty>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileColumns {
    unit: Option<String>,
    time: Option<String>,
    y: Option<String>,
    binary: Option<Vec<String>>,
    positive: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePenalty {
    mode: Option<String>,
    lambda: Option<f64>,
    grid: Option<Vec<f64>>,
    n_folds: Option<usize>,
    grid_size: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum PenaltySpec {
    Off,
    Fixed(f64),
    Cv {
        grid: Option<Vec<f64>>,
        n_folds: usize,
        grid_size: usize,
    },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub g_values: Vec<usize>,
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub zero_threshold: f64,
    pub bootstrap_replicates: usize,
    pub bootstrap_multistart: bool,
    pub threads: usize,
    pub columns: ColumnMap,
    pub penalty: PenaltySpec,
}

impl RunConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            n_starts: self.n_starts,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            ..FitOptions::default()
        }
    }

    pub fn penalty_mode(&self) -> PenaltyMode {
        match &self.penalty {
            PenaltySpec::Off => PenaltyMode::Off,
            PenaltySpec::Fixed(lambda) => PenaltyMode::Fixed(*lambda),
            PenaltySpec::Cv {
                grid,
                n_folds,
                grid_size,
            } => PenaltyMode::CrossValidated(PenaltyConfig {
                lambda_grid: grid.clone(),
                grid_size: *grid_size,
                n_folds: *n_folds,
                zero_threshold: self.zero_threshold,
            }),
        }
    }
}

fn config_err(message: impl Into<String>) -> Failure {
    Failure::new(Phase::Config, message)
}

pub fn resolve(args: &RunArgs) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        config_err(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let file: FileConfig = toml::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", args.config.display())))?;

    let columns_file = file.columns.unwrap_or_default();
    let penalty_file = file.penalty.unwrap_or_default();

    let data = args
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| config_err("data path missing: set `data` in the config or pass --data"))?;
    let output_dir = args.output_dir.clone().or(file.output_dir).ok_or_else(|| {
        config_err("output directory missing: set `output_dir` in the config or pass --output-dir")
    })?;

    let binary = args
        .binary_cols
        .clone()
        .or(columns_file.binary)
        .ok_or_else(|| config_err("occurrence-part covariates missing: set `columns.binary`"))?;
    let positive = args
        .positive_cols
        .clone()
        .or(columns_file.positive)
        .ok_or_else(|| config_err("positive-part covariates missing: set `columns.positive`"))?;
    let columns = ColumnMap {
        unit: args
            .unit_col
            .clone()
            .or(columns_file.unit)
            .unwrap_or_else(|| "unit_id".into()),
        time: args
            .time_col
            .clone()
            .or(columns_file.time)
            .unwrap_or_else(|| "time".into()),
        y: args
            .y_col
            .clone()
            .or(columns_file.y)
            .unwrap_or_else(|| "y".into()),
        binary,
        positive,
    };

    let mode = args
        .penalty
        .clone()
        .or(penalty_file.mode)
        .unwrap_or_else(|| "off".into());
    let penalty = match mode.as_str() {
        "off" => PenaltySpec::Off,
        "fixed" => {
            let lambda = args.lambda.or(penalty_file.lambda).ok_or_else(|| {
                config_err("penalty mode `fixed` needs `penalty.lambda` or --lambda")
            })?;
            PenaltySpec::Fixed(lambda)
        }
        "cv" => PenaltySpec::Cv {
            grid: args.lambda_grid.clone().or(penalty_file.grid),
            n_folds: args.n_folds.or(penalty_file.n_folds).unwrap_or(10),
            grid_size: args.grid_size.or(penalty_file.grid_size).unwrap_or(50),
        },
        other => {
            return Err(config_err(format!(
                "unknown penalty mode `{other}`; expected off, fixed, or cv"
            )))
        }
    };

    let cfg = RunConfig {
        data,
        output_dir,
        seed: args.seed.or(file.seed).unwrap_or(0),
        taus: args
            .taus
            .clone()
            .or(file.taus)
            .unwrap_or_else(|| vec![0.1, 0.25, 0.5, 0.75, 0.9]),
        g_values: args
            .g_values
            .clone()
            .or(file.g_values)
            .unwrap_or_else(|| (1..=6).collect()),
        n_starts: args.n_starts.or(file.n_starts).unwrap_or(20),
        max_iter: args.max_iter.or(file.max_iter).unwrap_or(500),
        tol: args.tol.or(file.tol).unwrap_or(1e-5),
        zero_threshold: args.zero_threshold.or(file.zero_threshold).unwrap_or(0.0),
        bootstrap_replicates: args
            .bootstrap_replicates
            .or(file.bootstrap_replicates)
            .unwrap_or(0),
        bootstrap_multistart: args
            .bootstrap_multistart
            .or(file.bootstrap_multistart)
            .unwrap_or(false),
        threads: args.threads.or(file.threads).unwrap_or(0),
        columns,
        penalty,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    if cfg.taus.is_empty() {
        return Err(config_err("taus must not be empty"));
    }
    for &tau in &cfg.taus {
        QuantileConfig::new(tau).in_phase(Phase::Config)?;
    }
    for (i, &tau) in cfg.taus.iter().enumerate() {
        if cfg.taus[..i].contains(&tau) {
            return Err(config_err(format!("duplicate quantile level {tau}")));
        }
    }
    if cfg.g_values.is_empty() {
        return Err(config_err("g_values must not be empty"));
    }
    for (i, &g) in cfg.g_values.iter().enumerate() {
        if g == 0 {
            return Err(config_err("g_values entries must be at least 1"));
        }
        if cfg.g_values[..i].contains(&g) {
            return Err(config_err(format!("duplicate component count {g}")));
        }
    }
    if cfg.n_starts == 0 {
        return Err(config_err("n_starts must be at least 1"));
    }
    if cfg.max_iter == 0 {
        return Err(config_err("max_iter must be at least 1"));
    }
    if !(cfg.tol > 0.0) || !cfg.tol.is_finite() {
        return Err(config_err(format!(
            "tol must be positive and finite, got {}",
            cfg.tol
        )));
    }
    if !(cfg.zero_threshold >= 0.0) || !cfg.zero_threshold.is_finite() {
        return Err(config_err(format!(
            "zero_threshold must be nonnegative and finite, got {}",
            cfg.zero_threshold
        )));
    }
    if cfg.columns.binary.is_empty() {
        return Err(config_err("columns.binary must list at least one column"));
    }
    if cfg.columns.positive.is_empty() {
        return Err(config_err("columns.positive must list at least one column"));
    }
    match &cfg.penalty {
        PenaltySpec::Off => {}
        PenaltySpec::Fixed(lambda) => {
            if !(*lambda >= 0.0) || !lambda.is_finite() {
                return Err(config_err(format!(
                    "penalty.lambda must be nonnegative and finite, got {lambda}"
                )));
            }
        }
        PenaltySpec::Cv {
            grid,
            n_folds,
            grid_size,
        } => {
            if *n_folds < 2 {
                return Err(config_err("penalty.n_folds must be at least 2"));
            }
            if *grid_size == 0 {
                return Err(config_err("penalty.grid_size must be at least 1"));
            }
            if let Some(grid) = grid {
                if grid.is_empty() {
                    return Err(config_err("penalty.grid must not be empty when given"));
                }
                for &l in grid {
                    if !(l >= 0.0) || !l.is_finite() {
                        return Err(config_err(format!(
                            "penalty.grid entries must be nonnegative and finite, got {l}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Confirms every referenced column exists in the data file's header. A
/// missing column is a configuration mistake, not bad data, so it gets the
/// config exit code; an unreadable file is a data problem.
pub fn check_columns(cfg: &RunConfig) -> CliResult<()> {
    let mut reader = csv::Reader::from_path(&cfg.data).map_err(|e| {
        Failure::new(
            Phase::Data,
            format!("cannot read {}: {e}", cfg.data.display()),
        )
    })?;
    let headers = reader.headers().in_phase(Phase::Data)?.clone();
    let referenced = [&cfg.columns.unit, &cfg.columns.time, &cfg.columns.y]
        .into_iter()
        .chain(&cfg.columns.binary)
        .chain(&cfg.columns.positive);
    for name in referenced {
        if !headers.iter().any(|h| h == name) {
            return Err(config_err(format!(
                "column {name} not found in {}",
                cfg.data.display()
            )));
        }
    }
    Ok(())
}

/// JSON mirror of the model parameters plus the quantile level, the input
/// schema of the simulate command.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub pi: Vec<f64>,
}

impl ParamsFile {
    pub fn into_model(self) -> tpmix::Result<(MixtureParams, QuantileConfig)> {
        let quantile = QuantileConfig::new(self.tau)?;
        let g = self.pi.len();
        let consistent = self.b0.len() == g && self.b1.len() == g;
        if consistent && self.pi.iter().all(|&m| m >= 0.0) && self.pi.iter().any(|&m| m == 0.0) {
            // Zero-mass components contribute nothing to any draw; drop them
            // so a degenerate request like pi = [1, 0] still names a valid
            // model. Negative masses fall through to the usual validation.
            let keep: Vec<usize> = (0..g).filter(|&k| self.pi[k] > 0.0).collect();
            if keep.is_empty() {
                return Err(Error::InvalidArgument(
                    "at least one mixing mass must be positive".into(),
                ));
            }
            let take = |v: &[f64]| keep.iter().map(|&k| v[k]).collect::<Vec<f64>>();
            let params = MixtureParams::new(
                self.gamma.clone(),
                self.beta.clone(),
                self.sigma,
                take(&self.b0),
                take(&self.b1),
                take(&self.pi),
            )?;
            return Ok((params, quantile));
        }
        let params = MixtureParams::new(
            self.gamma, self.beta, self.sigma, self.b0, self.b1, self.pi,
        )?;
        Ok((params, quantile))
    }
}
