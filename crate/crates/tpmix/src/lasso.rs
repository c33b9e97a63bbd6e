//! L1-penalized variant of the fitter.
//!
//! Only the positive-part slopes are penalized; intercepts, the occurrence
//! part, the scale and the masses stay unpenalized. The penalized M-step
//! replaces the weighted least-squares solve with cyclic coordinate descent
//! and soft thresholding on the same weighted quadratic, so the EM objective
//! `loglik - lambda * l1(beta)` keeps its ascent property. The quadratic is
//! divided by `rho2 * sigma` before thresholding: that puts the penalty on
//! the genuine complete-data log-likelihood scale, which makes the
//! data-driven `lambda_max` an exact shut-off point rather than a heuristic.

use crate::data::{prepare_with_zero_threshold, PanelDataset, PreparedData};
use crate::em::{
    engine_fit, n_parameters_unpenalized, positive_quad, update_b1, BetaStepKind, FitOptions,
    FitResult, MixtureParams, PositiveUpdate, PosteriorState,
};
use crate::error::{Error, Result};
use crate::quantile::QuantileConfig;
use crate::rng::{child_seed, stream_rng, Stream};
use rand::seq::SliceRandom;
use rayon::prelude::*;

const CD_TOL: f64 = 1e-8;
const CD_MAX_SWEEPS: usize = 10_000;
const PARTITION_ATTEMPTS: usize = 50;

/// Settings for cross-validated penalty selection.
#[derive(Clone, Debug)]
pub struct PenaltyConfig {
    /// Explicit grid; when absent a log-spaced grid below the data-driven
    /// maximum is used.
    pub lambda_grid: Option<Vec<f64>>,
    /// Size of the default grid.
    pub grid_size: usize,
    pub n_folds: usize,
    /// Outcomes at or below this magnitude count as zero, as in
    /// [`prepare_with_zero_threshold`].
    pub zero_threshold: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            grid_size: 50,
            n_folds: 10,
            zero_threshold: 0.0,
        }
    }
}

/// One grid point of the cross-validation table.
#[derive(Clone, Debug)]
pub struct CvRow {
    pub lambda: f64,
    /// Mean over folds of the held-out check loss per positive observation.
    pub mean_loss: f64,
    /// Standard error of the fold means.
    pub se_loss: f64,
}

/// Outcome of [`cross_validate_lambda`].
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub lambda_opt: f64,
    pub table: Vec<CvRow>,
    /// How many unit partitions were rejected before a usable one was found.
    pub resampled_partitions: u64,
}

/// Penalized M-step of the positive part: cyclic coordinate descent with
/// soft thresholding on the weighted quadratic, warm-started at the current
/// slopes, followed by the usual closed-form intercept update. Slopes shrunk
/// away are exactly zero. A zero penalty delegates to the closed-form solve,
/// which makes the reduction to the unpenalized fitter exact rather than
/// approximate.
pub fn penalized_m_step_positive(
    state: &PosteriorState,
    data: &PreparedData,
    cfg: &QuantileConfig,
    current: &MixtureParams,
    lambda: f64,
) -> Result<PositiveUpdate> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return crate::em::m_step_positive(state, data, cfg, current);
    }
    let quad = positive_quad(state, data, cfg, &current.b1)?;
    let p = data.n_positive;
    let scale = 1.0 / (cfg.rho2() * current.sigma);

    let mut a = quad.a;
    let mut c = quad.c;
    a *= scale;
    c *= scale;

    let mut beta = current.beta.clone();
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..p {
            let ajj = a[(j, j)];
            if ajj <= 0.0 {
                // Covariate carries no weighted mass; it cannot be identified
                // and the penalty removes it.
                if beta[j] != 0.0 {
                    max_change = max_change.max(beta[j].abs());
                    beta[j] = 0.0;
                }
                continue;
            }
            let mut partial = c[j];
            for l in 0..p {
                if l != j {
                    partial -= a[(j, l)] * beta[l];
                }
            }
            let new = soft_threshold(partial, lambda) / ajj;
            let change = (new - beta[j]).abs();
            if change > max_change {
                max_change = change;
            }
            beta[j] = new;
        }
        if max_change < CD_TOL {
            break;
        }
    }

    let (b1, frozen) = update_b1(state, data, cfg, &beta, &current.b1);
    Ok(PositiveUpdate {
        beta,
        b1,
        ridge_repaired: false,
        frozen_intercepts: frozen,
    })
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Fits a `G`-component model under an L1 penalty on the positive-part
/// slopes. The reported trace is the penalized objective; `loglik`, the
/// information criteria and the parameter count use the observed
/// log-likelihood with only the surviving slopes counted.
pub fn fit_penalized(
    data: &PreparedData,
    cfg: &QuantileConfig,
    g: usize,
    lambda: f64,
    options: &FitOptions,
) -> Result<FitResult> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    let engine = engine_fit(data, cfg, g, options, &BetaStepKind::Penalized(lambda))?;
    let out = engine.outcome;
    let mut params = out.params;
    params.canonicalize();
    let nonzero = params.beta.iter().filter(|b| **b != 0.0).count();
    let nu = n_parameters_unpenalized(data.n_binary, 0, g) + nonzero;
    let loglik = out.final_loglik;
    Ok(FitResult {
        params,
        loglik,
        loglik_trace: out.trace,
        n_iterations: out.n_iterations,
        converged: out.converged,
        n_parameters: nu,
        aic: -2.0 * loglik + 2.0 * nu as f64,
        bic: -2.0 * loglik + nu as f64 * (data.n_units as f64).ln(),
        lambda: Some(lambda),
        start_index: engine.start_index,
        diagnostics: out.diagnostics,
    })
}

/// Smallest penalty that keeps every positive-part slope at exactly zero.
///
/// Runs the EM with the slopes pinned at zero over the same starts the
/// penalized fit would use and records the largest zero-point gradient of
/// the scaled quadratic anywhere along those trajectories. A penalized fit
/// at any `lambda` at or above this value starts at zero slopes and, by
/// the soft-threshold rule, retraces the pinned trajectory exactly, so its
/// slopes stay zero for the whole run.
pub fn lambda_max(
    data: &PreparedData,
    cfg: &QuantileConfig,
    g: usize,
    options: &FitOptions,
) -> Result<f64> {
    let mut cold = options.clone();
    cold.warm_start = None;
    let engine = engine_fit(data, cfg, g, &cold, &BetaStepKind::PinnedZero)?;
    Ok(engine.max_zero_gradient)
}

/// Log-spaced grid of `n` penalties from `lambda_max / 1000` up to
/// `lambda_max`, ascending, the top point exact.
pub fn default_lambda_grid(lambda_max: f64, n: usize) -> Vec<f64> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() || n == 0 {
        return vec![0.0];
    }
    if n == 1 {
        return vec![lambda_max];
    }
    let mut grid = Vec::with_capacity(n);
    for i in 0..n {
        let frac = (n - 1 - i) as f64 / (n - 1) as f64;
        grid.push(lambda_max * 10f64.powf(-3.0 * frac));
    }
    grid[n - 1] = lambda_max;
    grid
}

struct FoldPlan {
    /// Unit indices per fold.
    folds: Vec<Vec<usize>>,
    resampled: u64,
}

fn plan_folds(
    panel: &PanelDataset,
    zero_threshold: f64,
    n_folds: usize,
    g: usize,
    seed: u64,
) -> Result<FoldPlan> {
    let n = panel.units.len();
    let positive: Vec<bool> = (0..n)
        .map(|i| {
            panel.units[i]
                .observations
                .iter()
                .any(|o| !(o.y == 0.0 || o.y.abs() < zero_threshold))
        })
        .collect();

    for attempt in 0..PARTITION_ATTEMPTS {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, Stream::FoldAssign, attempt as u64);
        order.shuffle(&mut rng);
        let mut folds: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
        for (pos, &unit) in order.iter().enumerate() {
            folds[pos % n_folds].push(unit);
        }
        let usable = folds.iter().all(|held| {
            let held_ok = held.iter().any(|&i| positive[i]);
            let train_n = n - held.len();
            let train_pos = (0..n)
                .filter(|i| !held.contains(i))
                .any(|i| positive[i]);
            held_ok && train_pos && train_n >= g && !held.is_empty()
        });
        if usable {
            return Ok(FoldPlan {
                folds,
                resampled: attempt as u64,
            });
        }
    }
    Err(Error::Validation(format!(
        "could not find a usable {n_folds}-fold unit partition: too few units with positive outcomes"
    )))
}

fn subset_panel(panel: &PanelDataset, keep: &[bool]) -> PanelDataset {
    PanelDataset {
        units: panel
            .units
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(u, _)| u.clone())
            .collect(),
        binary_names: panel.binary_names.clone(),
        positive_names: panel.positive_names.clone(),
    }
}

/// Held-out check loss of a fitted parameter set on the positive rows of
/// `panel`, covariates standardized by the training scalings. The predicted
/// location pools the component intercepts by their masses.
fn heldout_loss(
    fit: &MixtureParams,
    panel: &PanelDataset,
    train: &PreparedData,
    cfg: &QuantileConfig,
    zero_threshold: f64,
) -> (f64, usize) {
    let pooled_b1: f64 = fit
        .pi
        .iter()
        .zip(&fit.b1)
        .map(|(m, b)| m * b)
        .sum();
    let mut total = 0.0;
    let mut count = 0usize;
    for unit in &panel.units {
        for obs in &unit.observations {
            if obs.y == 0.0 || obs.y.abs() < zero_threshold {
                continue;
            }
            let mut mu = pooled_b1;
            for (j, &x) in obs.x.iter().enumerate() {
                let sc = &train.x_scaling[j];
                mu += fit.beta[j] * (x - sc.mean) / sc.sd;
            }
            total += cfg.check(obs.y.ln() - mu);
            count += 1;
        }
    }
    (total, count)
}

/// Selects the penalty by K-fold cross-validation over units.
///
/// Each fold refits on the training units alone, including their own
/// covariate standardization, and scores the held-out positive rows by
/// check loss. Within a fold the grid is traversed from the largest penalty
/// down, warm-starting each fit at the previous solution; the largest
/// penalty gets the full multi-start search. Ties in the mean loss go to
/// the larger penalty.
pub fn cross_validate_lambda(
    panel: &PanelDataset,
    cfg: &QuantileConfig,
    g: usize,
    penalty: &PenaltyConfig,
    options: &FitOptions,
) -> Result<CvOutcome> {
    if penalty.n_folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 2 folds, got {}",
            penalty.n_folds
        )));
    }
    if panel.units.len() < penalty.n_folds {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} units into {} folds",
            panel.units.len(),
            penalty.n_folds
        )));
    }

    let full = prepare_with_zero_threshold(panel, penalty.zero_threshold)?;
    let mut grid = match &penalty.lambda_grid {
        Some(grid) => {
            if grid.is_empty() {
                return Err(Error::InvalidArgument("the penalty grid is empty".into()));
            }
            if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
                return Err(Error::InvalidArgument(
                    "the penalty grid must contain finite nonnegative values".into(),
                ));
            }
            let mut grid = grid.clone();
            grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            grid.dedup();
            grid
        }
        None => {
            let lmax = lambda_max(&full, cfg, g, options)?;
            default_lambda_grid(lmax, penalty.grid_size)
        }
    };
    grid.shrink_to_fit();

    let plan = plan_folds(panel, penalty.zero_threshold, penalty.n_folds, g, options.seed)?;

    let run_fold = |f: usize| -> Result<Vec<(f64, usize)>> {
        let held = &plan.folds[f];
        let mut keep = vec![true; panel.units.len()];
        for &i in held {
            keep[i] = false;
        }
        let train_panel = subset_panel(panel, &keep);
        let held_panel = subset_panel(panel, &keep.iter().map(|k| !k).collect::<Vec<_>>());
        let train = prepare_with_zero_threshold(&train_panel, penalty.zero_threshold)?;

        let fold_seed = child_seed(options.seed, Stream::Folds, f as u64);
        let mut fold_options = options.clone();
        fold_options.seed = fold_seed;
        fold_options.warm_start = None;

        let mut losses: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); grid.len()];
        let mut previous: Option<MixtureParams> = None;
        for (idx, &lambda) in grid.iter().enumerate().rev() {
            let mut opts = fold_options.clone();
            opts.warm_start = previous.clone();
            let fitted = match fit_penalized(&train, cfg, g, lambda, &opts) {
                Ok(res) => Some(res),
                Err(_) if opts.warm_start.is_some() => {
                    // The warm chain broke; fall back to a cold search.
                    opts.warm_start = None;
                    fit_penalized(&train, cfg, g, lambda, &opts).ok()
                }
                Err(_) => None,
            };
            if let Some(res) = fitted {
                losses[idx] = heldout_loss(
                    &res.params,
                    &held_panel,
                    &train,
                    cfg,
                    penalty.zero_threshold,
                );
                previous = Some(res.params);
            } else {
                previous = None;
            }
        }
        Ok(losses)
    };

    let fold_losses: Vec<Result<Vec<(f64, usize)>>> = if options.parallel && penalty.n_folds > 1 {
        (0..penalty.n_folds).into_par_iter().map(run_fold).collect()
    } else {
        (0..penalty.n_folds).map(run_fold).collect()
    };

    let mut per_fold_means: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for fold in fold_losses {
        let losses = fold?;
        for (idx, (total, count)) in losses.into_iter().enumerate() {
            if count > 0 && total.is_finite() {
                per_fold_means[idx].push(total / count as f64);
            }
        }
    }

    let mut table = Vec::with_capacity(grid.len());
    for (idx, &lambda) in grid.iter().enumerate() {
        let means = &per_fold_means[idx];
        if means.is_empty() {
            table.push(CvRow {
                lambda,
                mean_loss: f64::INFINITY,
                se_loss: f64::NAN,
            });
            continue;
        }
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let se = if means.len() > 1 {
            let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (means.len() as f64 - 1.0);
            (var / means.len() as f64).sqrt()
        } else {
            f64::NAN
        };
        table.push(CvRow {
            lambda,
            mean_loss: m,
            se_loss: se,
        });
    }

    let mut lambda_opt = None;
    let mut best_loss = f64::INFINITY;
    for row in &table {
        // ">=" prefers the larger penalty on exact ties; the grid ascends.
        if row.mean_loss.is_finite() && best_loss >= row.mean_loss {
            best_loss = row.mean_loss;
            lambda_opt = Some(row.lambda);
        }
    }
    let lambda_opt = lambda_opt.ok_or_else(|| {
        Error::Numerical("every penalized fit failed during cross-validation".into())
    })?;

    Ok(CvOutcome {
        lambda_opt,
        table,
        resampled_partitions: plan.resampled,
    })
}
