//! EM estimation of the two-part finite mixture quantile model.
//!
//! Units belong to one of `G` latent components. Component `k` shifts the
//! occurrence logit by `b0[k]` and the positive-part location by `b1[k]`,
//! and has prior mass `pi[k]`. The E-step computes unit-level component
//! responsibilities together with the conditional inverse moments of the
//! latent exponential scales of the asymmetric Laplace; the M-step then has
//! closed forms for the regression coefficients, the component intercepts,
//! the scale and the masses, plus a Newton solve for the logistic part. Each
//! block maximizes the same minorizer, so the observed log-likelihood never
//! decreases from one cycle to the next.

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::quantile::{QuantileConfig, RESIDUAL_FLOOR};
use crate::rng::{child_seed, stream_rng, Stream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Occurrence intercepts are held inside [-B0_CAP, B0_CAP]; hitting the cap
/// flags quasi-separation.
pub const B0_CAP: f64 = 15.0;

/// Lower clamp for the scale update, needed when every weighted residual is
/// zero (e.g. a saturated fit).
pub const SIGMA_FLOOR: f64 = 1e-8;

/// A component whose mass falls below this is treated as degenerate and the
/// run is restarted from a fresh seed.
pub const MASS_FLOOR: f64 = 1e-4;

const DEGENERATE_ATTEMPTS: usize = 3;
const GRAM_RIDGE: f64 = 1e-8;

/// Full parameter set of a `G`-component fit. Components are kept sorted by
/// `b1` ascending; [`MixtureParams::new`] and the fitters enforce that
/// canonical order so labels are comparable across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Occurrence-part slopes.
    pub gamma: Vec<f64>,
    /// Positive-part slopes.
    pub beta: Vec<f64>,
    /// Asymmetric Laplace scale.
    pub sigma: f64,
    /// Occurrence intercept of each component.
    pub b0: Vec<f64>,
    /// Positive-part intercept of each component.
    pub b1: Vec<f64>,
    /// Mixing masses, strictly positive, summing to one.
    pub pi: Vec<f64>,
}

impl MixtureParams {
    /// Validates shapes and domains, renormalizes the masses exactly and
    /// returns the canonically ordered parameter set.
    pub fn new(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        sigma: f64,
        b0: Vec<f64>,
        b1: Vec<f64>,
        pi: Vec<f64>,
    ) -> Result<Self> {
        let mut params = Self {
            gamma,
            beta,
            sigma,
            b0,
            b1,
            pi,
        };
        params.validate()?;
        let total: f64 = params.pi.iter().sum();
        for m in &mut params.pi {
            *m /= total;
        }
        params.canonicalize();
        Ok(params)
    }

    pub fn n_components(&self) -> usize {
        self.b1.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let g = self.b1.len();
        if g == 0 {
            return Err(Error::InvalidArgument(
                "at least one component is required".into(),
            ));
        }
        if self.b0.len() != g || self.pi.len() != g {
            return Err(Error::InvalidArgument(format!(
                "component blocks disagree: {} occurrence intercepts, {} location intercepts, {} masses",
                self.b0.len(),
                g,
                self.pi.len()
            )));
        }
        let all = self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.b0)
            .chain(&self.b1)
            .chain(&self.pi);
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(
                    "parameters must be finite".into(),
                ));
            }
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        if self.pi.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument(
                "mixing masses must be strictly positive".into(),
            ));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "mixing masses must sum to one, got {total}"
            )));
        }
        Ok(())
    }

    /// Sorts the components by `b1` ascending, carrying `b0` and `pi` along.
    pub fn canonicalize(&mut self) {
        let g = self.n_components();
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| self.b1[a].partial_cmp(&self.b1[b]).unwrap());
        self.b0 = order.iter().map(|&k| self.b0[k]).collect();
        self.pi = order.iter().map(|&k| self.pi[k]).collect();
        self.b1 = order.iter().map(|&k| self.b1[k]).collect();
    }

    pub fn is_canonical(&self) -> bool {
        self.b1.windows(2).all(|w| w[0] <= w[1])
    }

    /// Flat parameter vector in the order gamma, beta, sigma, b0, b1, pi.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.gamma.len() + self.beta.len() + 1 + 3 * self.n_components());
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.beta);
        out.push(self.sigma);
        out.extend_from_slice(&self.b0);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.pi);
        out
    }

    /// Names matching [`MixtureParams::flatten`].
    pub fn parameter_names(
        binary_names: &[String],
        positive_names: &[String],
        g: usize,
    ) -> Vec<String> {
        let mut names = Vec::new();
        for n in binary_names {
            names.push(format!("gamma[{n}]"));
        }
        for n in positive_names {
            names.push(format!("beta[{n}]"));
        }
        names.push("sigma".into());
        for k in 1..=g {
            names.push(format!("b0[{k}]"));
        }
        for k in 1..=g {
            names.push(format!("b1[{k}]"));
        }
        for k in 1..=g {
            names.push(format!("pi[{k}]"));
        }
        names
    }
}

/// Posterior quantities from one E-step: unit-by-component
/// responsibilities and the conditional inverse moments per positive
/// observation and component.
#[derive(Clone, Debug)]
pub struct PosteriorState {
    pub n_units: usize,
    pub n_components: usize,
    pub n_rows: usize,
    /// Row-major `n_units x n_components`; rows sum to one.
    pub w: Vec<f64>,
    /// Row-major `n_rows x n_components`; zero on rows whose outcome is zero.
    pub v_inv: Vec<f64>,
    /// How many residuals hit the clamp while inverting.
    pub residual_clamps: u64,
}

impl PosteriorState {
    pub fn from_parts(
        n_units: usize,
        n_components: usize,
        n_rows: usize,
        w: Vec<f64>,
        v_inv: Vec<f64>,
    ) -> Result<Self> {
        if w.len() != n_units * n_components {
            return Err(Error::InvalidArgument(format!(
                "responsibility matrix must be {} x {}, got {} entries",
                n_units,
                n_components,
                w.len()
            )));
        }
        if v_inv.len() != n_rows * n_components {
            return Err(Error::InvalidArgument(format!(
                "inverse-moment matrix must be {} x {}, got {} entries",
                n_rows,
                n_components,
                v_inv.len()
            )));
        }
        Ok(Self {
            n_units,
            n_components,
            n_rows,
            w,
            v_inv,
            residual_clamps: 0,
        })
    }

    pub fn w(&self, unit: usize, k: usize) -> f64 {
        self.w[unit * self.n_components + k]
    }

    pub fn v_inv(&self, row: usize, k: usize) -> f64 {
        self.v_inv[row * self.n_components + k]
    }
}

/// Knobs of the fitter. `tol` is the absolute change in the objective that
/// counts as converged; starts, iteration caps and the inner Newton loop are
/// all configurable. `warm_start` replaces the multi-start search with a
/// single run from the given parameters.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub irls_max_iter: usize,
    pub irls_tol: f64,
    pub seed: u64,
    pub parallel: bool,
    pub warm_start: Option<MixtureParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 20,
            max_iter: 500,
            tol: 1e-5,
            irls_max_iter: 100,
            irls_tol: 1e-8,
            seed: 0,
            parallel: true,
            warm_start: None,
        }
    }
}

/// Counters describing what the numerical safeguards had to do.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub residual_clamps: u64,
    pub ridge_repairs: u64,
    pub b0_cap_hits: u64,
    pub sigma_clamps: u64,
    pub frozen_intercepts: u64,
    pub irls_stalls: u64,
    pub degenerate_restarts: u64,
}

/// A fitted model.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Observed-data log-likelihood at `params`.
    pub loglik: f64,
    /// Objective after every EM cycle (observed log-likelihood, minus the
    /// penalty term for penalized fits). Nondecreasing.
    pub loglik_trace: Vec<f64>,
    /// Number of completed M-step cycles.
    pub n_iterations: usize,
    pub converged: bool,
    /// Effective parameter count used by the information criteria. For
    /// penalized fits only nonzero positive-part slopes are counted.
    pub n_parameters: usize,
    pub aic: f64,
    pub bic: f64,
    /// Penalty the fit was run with, if any.
    pub lambda: Option<f64>,
    /// Which multi-start run produced the result (absent for warm starts).
    pub start_index: Option<usize>,
    pub diagnostics: Diagnostics,
}

fn validate_params_against(params: &MixtureParams, data: &PreparedData) -> Result<()> {
    params.validate()?;
    if params.gamma.len() != data.n_binary || params.beta.len() != data.n_positive {
        return Err(Error::InvalidArgument(format!(
            "parameter/design mismatch: {} occurrence and {} positive slopes vs {} and {} columns",
            params.gamma.len(),
            params.beta.len(),
            data.n_binary,
            data.n_positive
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow at either tail.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

struct LinearParts {
    /// Occurrence linear predictor without the component intercept.
    eta0: Vec<f64>,
    /// Positive-part location without the component intercept.
    mu0: Vec<f64>,
}

fn linear_parts(params: &MixtureParams, data: &PreparedData) -> LinearParts {
    let mut eta0 = Vec::with_capacity(data.n_rows);
    let mut mu0 = Vec::with_capacity(data.n_rows);
    for r in 0..data.n_rows {
        eta0.push(dot(data.s_row(r), &params.gamma));
        mu0.push(dot(data.x_row(r), &params.beta));
    }
    LinearParts { eta0, mu0 }
}

/// Per-unit, per-component complete log density contributions plus log mass:
/// row-major `n_units x g` matrix of `log pi_k + sum_t log f(y_it | k)`.
fn component_logliks(
    params: &MixtureParams,
    data: &PreparedData,
    cfg: &QuantileConfig,
    lin: &LinearParts,
) -> Vec<f64> {
    let g = params.n_components();
    let log_pi: Vec<f64> = params.pi.iter().map(|m| m.ln()).collect();
    let mut out = vec![0.0; data.n_units * g];
    for i in 0..data.n_units {
        for k in 0..g {
            let mut acc = log_pi[k];
            for r in data.unit_rows(i) {
                let eta = lin.eta0[r] + params.b0[k];
                if data.is_zero[r] {
                    acc += log_sigmoid(eta);
                } else {
                    acc += log_sigmoid(-eta)
                        + cfg.log_density(data.y_log[r], lin.mu0[r] + params.b1[k], params.sigma);
                }
            }
            out[i * g + k] = acc;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Observed-data log-likelihood: sum over units of the log mixture density,
/// combined per unit in log space.
pub fn observed_loglik(
    params: &MixtureParams,
    data: &PreparedData,
    cfg: &QuantileConfig,
) -> Result<f64> {
    validate_params_against(params, data)?;
    let lin = linear_parts(params, data);
    let comp = component_logliks(params, data, cfg, &lin);
    let g = params.n_components();
    let mut total = 0.0;
    for i in 0..data.n_units {
        let lse = log_sum_exp(&comp[i * g..(i + 1) * g]);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "likelihood underflow for unit {}",
                data.unit_ids[i]
            )));
        }
        total += lse;
    }
    Ok(total)
}

/// One E-step at the given parameters.
pub fn e_step(
    params: &MixtureParams,
    data: &PreparedData,
    cfg: &QuantileConfig,
) -> Result<PosteriorState> {
    Ok(e_step_with_loglik(params, data, cfg)?.0)
}

fn e_step_with_loglik(
    params: &MixtureParams,
    data: &PreparedData,
    cfg: &QuantileConfig,
) -> Result<(PosteriorState, f64)> {
    validate_params_against(params, data)?;
    let g = params.n_components();
    let lin = linear_parts(params, data);
    let comp = component_logliks(params, data, cfg, &lin);

    let mut w = vec![0.0; data.n_units * g];
    let mut total = 0.0;
    for i in 0..data.n_units {
        let row = &comp[i * g..(i + 1) * g];
        let lse = log_sum_exp(row);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "likelihood underflow for unit {}",
                data.unit_ids[i]
            )));
        }
        total += lse;
        for k in 0..g {
            w[i * g + k] = (row[k] - lse).exp();
        }
    }

    let mut v_inv = vec![0.0; data.n_rows * g];
    let mut clamps = 0u64;
    for r in 0..data.n_rows {
        if data.is_zero[r] {
            continue;
        }
        for k in 0..g {
            let residual = data.y_log[r] - lin.mu0[r] - params.b1[k];
            if residual.abs() < RESIDUAL_FLOOR {
                clamps += 1;
            }
            v_inv[r * g + k] = cfg.inverse_moment(residual);
        }
    }

    let mut state = PosteriorState::from_parts(data.n_units, g, data.n_rows, w, v_inv)?;
    state.residual_clamps = clamps;
    Ok((state, total))
}

/// Result of the positive-part M-step.
#[derive(Clone, Debug)]
pub struct PositiveUpdate {
    pub beta: Vec<f64>,
    pub b1: Vec<f64>,
    /// Whether the Gram matrix needed a ridge repair.
    pub ridge_repaired: bool,
    /// Components whose intercept had no effective weight and kept its value.
    pub frozen_intercepts: u64,
}

pub(crate) struct PositiveQuad {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Weighted quadratic of the positive-part minorizer at the current
/// intercepts: maximizing it over beta means solving `A beta = c`.
pub(crate) fn positive_quad(
    state: &PosteriorState,
    data: &PreparedData,
    cfg: &QuantileConfig,
    b1: &[f64],
) -> Result<PositiveQuad> {
    if data.n_positive_rows() == 0 {
        return Err(Error::Validation(
            "no positive observations: the positive part is not identified".into(),
        ));
    }
    let p = data.n_positive;
    let g = state.n_components;
    let theta = cfg.theta();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut c = DVector::<f64>::zeros(p);
    for r in 0..data.n_rows {
        if data.is_zero[r] {
            continue;
        }
        let i = data.row_unit[r];
        let x_r = data.x_row(r);
        let mut wv = 0.0;
        let mut coef = 0.0;
        for k in 0..g {
            let w = state.w(i, k);
            let v = state.v_inv(r, k);
            wv += w * v;
            coef += w * (v * (data.y_log[r] - b1[k]) - theta);
        }
        for aa in 0..p {
            let xa = x_r[aa];
            c[aa] += coef * xa;
            for bb in 0..p {
                a[(aa, bb)] += wv * xa * x_r[bb];
            }
        }
    }
    Ok(PositiveQuad { a, c })
}

fn solve_gram(a: &DMatrix<f64>, c: &DVector<f64>, what: &str) -> Result<(DVector<f64>, bool)> {
    if a.nrows() == 0 {
        return Ok((DVector::zeros(0), false));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.solve(c), false));
    }
    let mut repaired = a.clone();
    for j in 0..a.nrows() {
        repaired[(j, j)] += GRAM_RIDGE;
    }
    if let Some(ch) = repaired.clone().cholesky() {
        return Ok((ch.solve(c), true));
    }
    if let Some(sol) = repaired.lu().solve(c) {
        return Ok((sol, true));
    }
    Err(Error::Singular(what.to_string()))
}

/// Closed-form update of the positive-part slopes given the current
/// intercepts, then of each component intercept given the fresh slopes.
pub(crate) fn update_b1(
    state: &PosteriorState,
    data: &PreparedData,
    cfg: &QuantileConfig,
    beta: &[f64],
    current_b1: &[f64],
) -> (Vec<f64>, u64) {
    let g = state.n_components;
    let theta = cfg.theta();
    let mut numer = vec![0.0; g];
    let mut denom = vec![0.0; g];
    for r in 0..data.n_rows {
        if data.is_zero[r] {
            continue;
        }
        let i = data.row_unit[r];
        let xb = dot(data.x_row(r), beta);
        for k in 0..g {
            let w = state.w(i, k);
            let v = state.v_inv(r, k);
            denom[k] += w * v;
            numer[k] += w * (v * (data.y_log[r] - xb) - theta);
        }
    }
    let mut frozen = 0;
    let b1 = (0..g)
        .map(|k| {
            if denom[k] > 1e-12 {
                numer[k] / denom[k]
            } else {
                frozen += 1;
                current_b1[k]
            }
        })
        .collect();
    (b1, frozen)
}

/// Closed-form M-step of the positive part: weighted least squares in the
/// slopes with the inverse moments as weights, then the scalar analogue for
/// each component intercept using the fresh slopes.
pub fn m_step_positive(
    state: &PosteriorState,
    data: &PreparedData,
    cfg: &QuantileConfig,
    current: &MixtureParams,
) -> Result<PositiveUpdate> {
    let quad = positive_quad(state, data, cfg, &current.b1)?;
    let (beta_vec, ridge_repaired) = solve_gram(
        &quad.a,
        &quad.c,
        "weighted Gram matrix of the positive part",
    )?;
    let beta: Vec<f64> = beta_vec.iter().cloned().collect();
    let (b1, frozen) = update_b1(state, data, cfg, &beta, &current.b1);
    Ok(PositiveUpdate {
        beta,
        b1,
        ridge_repaired,
        frozen_intercepts: frozen,
    })
}

/// Result of the occurrence-part M-step.
#[derive(Clone, Debug)]
pub struct BinaryUpdate {
    pub gamma: Vec<f64>,
    pub b0: Vec<f64>,
    /// Whether any intercept sits at the cap (quasi-separation).
    pub capped: bool,
    /// Newton iterations used.
    pub n_iterations: usize,
    /// Whether the line search ran out of step halvings.
    pub stalled: bool,
}

struct BinaryWork<'a> {
    state: &'a PosteriorState,
    data: &'a PreparedData,
}

impl BinaryWork<'_> {
    fn objective(&self, gamma: &[f64], b0: &[f64]) -> f64 {
        let g = self.state.n_components;
        let mut total = 0.0;
        for r in 0..self.data.n_rows {
            let i = self.data.row_unit[r];
            let sg = dot(self.data.s_row(r), gamma);
            for k in 0..g {
                let eta = sg + b0[k];
                let ll = if self.data.is_zero[r] {
                    log_sigmoid(eta)
                } else {
                    log_sigmoid(-eta)
                };
                total += self.state.w(i, k) * ll;
            }
        }
        total
    }

    /// Gradient and (positive-definite) curvature of the weighted logistic
    /// block in the stacked coefficients `[gamma, b0]`.
    fn derivatives(&self, gamma: &[f64], b0: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let m = gamma.len();
        let g = self.state.n_components;
        let q = m + g;
        let mut grad = DVector::<f64>::zeros(q);
        let mut hess = DMatrix::<f64>::zeros(q, q);
        for r in 0..self.data.n_rows {
            let i = self.data.row_unit[r];
            let s_r = self.data.s_row(r);
            let sg = dot(s_r, gamma);
            let d = if self.data.is_zero[r] { 1.0 } else { 0.0 };
            for k in 0..g {
                let w = self.state.w(i, k);
                if w == 0.0 {
                    continue;
                }
                let p = sigmoid(sg + b0[k]);
                let resid = w * (d - p);
                let curv = (w * p * (1.0 - p)).max(1e-12 * w);
                for a in 0..m {
                    grad[a] += resid * s_r[a];
                    for b in 0..m {
                        hess[(a, b)] += curv * s_r[a] * s_r[b];
                    }
                    hess[(a, m + k)] += curv * s_r[a];
                    hess[(m + k, a)] += curv * s_r[a];
                }
                grad[m + k] += resid;
                hess[(m + k, m + k)] += curv;
            }
        }
        (grad, hess)
    }
}

/// Newton update of the occurrence part: a weighted logistic regression on
/// the design expanded with one indicator column per component, rows
/// replicated across components with the responsibilities as weights. Steps
/// are halved until the weighted binary log-likelihood does not decrease,
/// and intercepts are clamped at the cap inside the accept test.
pub fn m_step_binary(
    state: &PosteriorState,
    data: &PreparedData,
    current: &MixtureParams,
    options: &FitOptions,
) -> Result<BinaryUpdate> {
    let m = data.n_binary;
    let g = state.n_components;
    let work = BinaryWork { state, data };

    let mut gamma = current.gamma.clone();
    let mut b0: Vec<f64> = current.b0.iter().map(|v| v.clamp(-B0_CAP, B0_CAP)).collect();
    let mut capped = b0
        .iter()
        .zip(&current.b0)
        .any(|(clamped, raw)| clamped != raw);
    let mut obj = work.objective(&gamma, &b0);
    let mut stalled = false;
    let mut iterations = 0;

    for _ in 0..options.irls_max_iter {
        let (grad, hess) = work.derivatives(&gamma, &b0);
        if grad.norm() < options.irls_tol {
            break;
        }
        iterations += 1;
        let (delta, _) = solve_gram(&hess, &grad, "curvature of the occurrence part")?;
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..12 {
            let cand_gamma: Vec<f64> = (0..m).map(|j| gamma[j] + step * delta[j]).collect();
            let mut cand_b0: Vec<f64> = (0..g).map(|k| b0[k] + step * delta[m + k]).collect();
            let mut clamped_here = false;
            for v in &mut cand_b0 {
                let c = v.clamp(-B0_CAP, B0_CAP);
                if c != *v {
                    clamped_here = true;
                }
                *v = c;
            }
            let cand_obj = work.objective(&cand_gamma, &cand_b0);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 {
                gamma = cand_gamma;
                b0 = cand_b0;
                obj = cand_obj;
                capped |= clamped_here;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
    }

    capped |= b0.iter().any(|v| v.abs() >= B0_CAP - 1e-9);
    Ok(BinaryUpdate {
        gamma,
        b0,
        capped,
        n_iterations: iterations,
        stalled,
    })
}

/// Result of the scale/mass M-step.
#[derive(Clone, Debug)]
pub struct ScaleMassUpdate {
    pub sigma: f64,
    pub pi: Vec<f64>,
    pub sigma_clamped: bool,
}

/// Closed-form scale and mass updates: the scale is the responsibility-
/// weighted mean check loss over positive observations at the fresh
/// location parameters; each mass is the average responsibility.
pub fn m_step_scale_and_masses(
    state: &PosteriorState,
    data: &PreparedData,
    cfg: &QuantileConfig,
    beta: &[f64],
    b1: &[f64],
) -> Result<ScaleMassUpdate> {
    if data.n_positive_rows() == 0 {
        return Err(Error::Validation(
            "no positive observations: the scale is not identified".into(),
        ));
    }
    let g = state.n_components;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..data.n_rows {
        if data.is_zero[r] {
            continue;
        }
        let i = data.row_unit[r];
        let xb = dot(data.x_row(r), beta);
        for k in 0..g {
            let w = state.w(i, k);
            num += w * cfg.check(data.y_log[r] - xb - b1[k]);
            den += w;
        }
    }
    let raw = num / den;
    let sigma_clamped = raw < SIGMA_FLOOR;
    let sigma = raw.max(SIGMA_FLOOR);

    let mut pi = vec![0.0; g];
    for i in 0..state.n_units {
        for k in 0..g {
            pi[k] += state.w(i, k);
        }
    }
    let total: f64 = pi.iter().sum();
    for m in &mut pi {
        *m /= total;
    }

    Ok(ScaleMassUpdate {
        sigma,
        pi,
        sigma_clamped,
    })
}

pub(crate) fn n_parameters_unpenalized(m: usize, p: usize, g: usize) -> usize {
    m + p + 1 + 2 * g + (g - 1)
}

/// How the positive-part slopes are updated inside the EM engine.
pub(crate) enum BetaStepKind {
    /// Closed-form weighted least squares.
    ClosedForm,
    /// Coordinate descent with soft thresholding at the given penalty.
    Penalized(f64),
    /// Slopes pinned at zero; records the largest zero-point gradient seen.
    PinnedZero,
}

pub(crate) struct EmOutcome {
    pub params: MixtureParams,
    pub trace: Vec<f64>,
    pub final_loglik: f64,
    pub converged: bool,
    pub n_iterations: usize,
    pub degenerate: bool,
    pub diagnostics: Diagnostics,
    /// Largest `max_j |gradient_j|` at beta = 0 across cycles (pinned runs).
    pub max_zero_gradient: f64,
}

pub(crate) fn run_em(
    data: &PreparedData,
    cfg: &QuantileConfig,
    init: MixtureParams,
    options: &FitOptions,
    kind: &BetaStepKind,
) -> Result<EmOutcome> {
    let mut params = init;
    let mut diagnostics = Diagnostics::default();
    let mut trace: Vec<f64> = Vec::new();
    let mut prev_obj: Option<f64> = None;
    let mut converged = false;
    let mut degenerate = false;
    let mut n_iterations = 0;
    let mut max_zero_gradient = 0.0f64;
    let final_loglik;

    loop {
        let (state, loglik) = e_step_with_loglik(&params, data, cfg)?;
        diagnostics.residual_clamps += state.residual_clamps;
        let objective = match kind {
            BetaStepKind::Penalized(lambda) => {
                loglik - lambda * params.beta.iter().map(|b| b.abs()).sum::<f64>()
            }
            _ => loglik,
        };
        if !objective.is_finite() {
            return Err(Error::Numerical("objective is not finite".into()));
        }
        trace.push(objective);
        if let Some(prev) = prev_obj {
            if (objective - prev).abs() < options.tol {
                converged = true;
                final_loglik = loglik;
                break;
            }
        }
        if n_iterations >= options.max_iter {
            final_loglik = loglik;
            break;
        }
        prev_obj = Some(objective);

        // Positive part: slopes, then intercepts at the fresh slopes.
        let pos = match kind {
            BetaStepKind::ClosedForm => m_step_positive(&state, data, cfg, &params)?,
            BetaStepKind::Penalized(lambda) => {
                crate::lasso::penalized_m_step_positive(&state, data, cfg, &params, *lambda)?
            }
            BetaStepKind::PinnedZero => {
                let quad = positive_quad(&state, data, cfg, &params.b1)?;
                let scale = 1.0 / (cfg.rho2() * params.sigma);
                for j in 0..quad.c.len() {
                    max_zero_gradient = max_zero_gradient.max((quad.c[j] * scale).abs());
                }
                let beta = vec![0.0; data.n_positive];
                let (b1, frozen) = update_b1(&state, data, cfg, &beta, &params.b1);
                PositiveUpdate {
                    beta,
                    b1,
                    ridge_repaired: false,
                    frozen_intercepts: frozen,
                }
            }
        };
        diagnostics.ridge_repairs += pos.ridge_repaired as u64;
        diagnostics.frozen_intercepts += pos.frozen_intercepts;

        let scale = m_step_scale_and_masses(&state, data, cfg, &pos.beta, &pos.b1)?;
        diagnostics.sigma_clamps += scale.sigma_clamped as u64;

        params.beta = pos.beta;
        params.b1 = pos.b1;
        params.sigma = scale.sigma;
        params.pi = scale.pi;

        if params.pi.iter().any(|&m| m < MASS_FLOOR) {
            degenerate = true;
            final_loglik = loglik;
            break;
        }

        let binary = m_step_binary(&state, data, &params, options)?;
        diagnostics.b0_cap_hits += binary.capped as u64;
        diagnostics.irls_stalls += binary.stalled as u64;
        params.gamma = binary.gamma;
        params.b0 = binary.b0;

        n_iterations += 1;
    }

    Ok(EmOutcome {
        params,
        trace,
        final_loglik,
        converged: converged && !degenerate,
        n_iterations,
        degenerate,
        diagnostics,
        max_zero_gradient,
    })
}

fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn kmeans_1d<R: Rng + ?Sized>(values: &[f64], g: usize, rng: &mut R) -> Vec<f64> {
    let mut centers: Vec<f64> = (0..g)
        .map(|_| values[rng.random_range(0..values.len())])
        .collect();
    for round in 0..30 {
        let mut sums = vec![0.0; g];
        let mut counts = vec![0usize; g];
        for &v in values {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &c) in centers.iter().enumerate() {
                let d = (v - c).abs();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            sums[best] += v;
            counts[best] += 1;
        }
        let mut moved = false;
        for k in 0..g {
            let new_c = if counts[k] > 0 {
                sums[k] / counts[k] as f64
            } else {
                values[rng.random_range(0..values.len())]
            };
            if (new_c - centers[k]).abs() > 1e-12 {
                moved = true;
            }
            centers[k] = new_c;
        }
        if !moved && round > 0 {
            break;
        }
    }
    centers
}

/// Data-driven starting values: a one-dimensional k-means split of the
/// per-unit mean log outcomes seeds the location intercepts, group zero
/// rates on the logit scale seed the occurrence intercepts, the scale starts
/// at the empirical check-loss spread, slopes at zero and masses uniform.
/// Jitter from `rng` differentiates the multi-start runs.
pub(crate) fn initial_params<R: Rng + ?Sized>(
    data: &PreparedData,
    cfg: &QuantileConfig,
    g: usize,
    rng: &mut R,
) -> MixtureParams {
    let mut unit_means: Vec<Option<f64>> = Vec::with_capacity(data.n_units);
    let mut all_logs: Vec<f64> = Vec::new();
    for i in 0..data.n_units {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in data.unit_rows(i) {
            if !data.is_zero[r] {
                sum += data.y_log[r];
                all_logs.push(data.y_log[r]);
                n += 1;
            }
        }
        unit_means.push(if n > 0 { Some(sum / n as f64) } else { None });
    }

    let observed: Vec<f64> = unit_means.iter().flatten().cloned().collect();
    let mean_of_means = observed.iter().sum::<f64>() / observed.len() as f64;
    let sd_of_means = if observed.len() > 1 {
        (observed
            .iter()
            .map(|v| (v - mean_of_means) * (v - mean_of_means))
            .sum::<f64>()
            / (observed.len() as f64 - 1.0))
            .sqrt()
    } else {
        0.0
    }
    .max(1e-3);

    let centers = kmeans_1d(&observed, g, rng);
    let jitter = |rng: &mut R, scale: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    };
    let b1: Vec<f64> = centers
        .iter()
        .map(|c| c + jitter(rng, 0.25 * sd_of_means))
        .collect();

    // Assign each unit to the nearest seeded intercept; units with no
    // positive outcome get a random component.
    let assign: Vec<usize> = unit_means
        .iter()
        .map(|m| match m {
            Some(v) => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, c) in b1.iter().enumerate() {
                    let d = (v - c).abs();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best
            }
            None => rng.random_range(0..g),
        })
        .collect();

    let mut zeros = vec![0usize; g];
    let mut totals = vec![0usize; g];
    for i in 0..data.n_units {
        let k = assign[i];
        for r in data.unit_rows(i) {
            totals[k] += 1;
            zeros[k] += data.is_zero[r] as usize;
        }
    }
    let overall_rate = data.is_zero.iter().filter(|z| **z).count() as f64 / data.n_rows as f64;
    let b0: Vec<f64> = (0..g)
        .map(|k| {
            let rate = if totals[k] > 0 {
                zeros[k] as f64 / totals[k] as f64
            } else {
                overall_rate
            };
            let rate = rate.clamp(0.02, 0.98);
            (rate / (1.0 - rate)).ln() + jitter(rng, 0.25)
        })
        .collect();

    all_logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = empirical_quantile(&all_logs, cfg.tau());
    let sigma = (all_logs.iter().map(|v| cfg.check(v - q)).sum::<f64>() / all_logs.len() as f64)
        .max(1e-3);

    let mut params = MixtureParams {
        gamma: vec![0.0; data.n_binary],
        beta: vec![0.0; data.n_positive],
        sigma,
        b0,
        b1,
        pi: vec![1.0 / g as f64; g],
    };
    params.canonicalize();
    params
}

struct StartRun {
    /// Completed non-degenerate run, if the start produced one.
    outcome: Option<Box<EmOutcome>>,
    restarts: u64,
    /// Traces of degenerate or failed attempts.
    traces: Vec<Vec<f64>>,
    max_zero_gradient: f64,
}

pub(crate) struct EngineResult {
    pub outcome: EmOutcome,
    pub start_index: Option<usize>,
    /// Largest zero-point gradient over every executed trajectory, so the
    /// bound covers whatever path a penalized refit would retrace.
    pub max_zero_gradient: f64,
}

pub(crate) fn engine_fit(
    data: &PreparedData,
    cfg: &QuantileConfig,
    g: usize,
    options: &FitOptions,
    kind: &BetaStepKind,
) -> Result<EngineResult> {
    if g == 0 {
        return Err(Error::InvalidArgument(
            "at least one component is required".into(),
        ));
    }
    if g > data.n_units {
        return Err(Error::InvalidArgument(format!(
            "cannot fit {} components with {} units",
            g, data.n_units
        )));
    }
    if data.n_positive_rows() == 0 {
        return Err(Error::Validation(
            "no positive observations: the positive part is not identified".into(),
        ));
    }

    if let Some(warm) = &options.warm_start {
        validate_params_against(warm, data)?;
        if warm.n_components() != g {
            return Err(Error::InvalidArgument(format!(
                "warm start has {} components, requested {}",
                warm.n_components(),
                g
            )));
        }
        let mut start = warm.clone();
        start.canonicalize();
        let out = run_em(data, cfg, start, options, kind)?;
        if out.degenerate {
            return Err(Error::Numerical(
                "a component mass collapsed during the warm-started fit".into(),
            ));
        }
        if !out.converged {
            return Err(Error::NoStartConverged {
                traces: vec![out.trace],
            });
        }
        let max_zero_gradient = out.max_zero_gradient;
        return Ok(EngineResult {
            outcome: out,
            start_index: None,
            max_zero_gradient,
        });
    }

    let run_start = |s: usize| -> StartRun {
        let start_seed = child_seed(options.seed, Stream::Starts, s as u64);
        let mut run = StartRun {
            outcome: None,
            restarts: 0,
            traces: Vec::new(),
            max_zero_gradient: 0.0,
        };
        for attempt in 0..DEGENERATE_ATTEMPTS {
            let mut rng = stream_rng(start_seed, Stream::Init, attempt as u64);
            let init = initial_params(data, cfg, g, &mut rng);
            match run_em(data, cfg, init, options, kind) {
                Ok(out) => {
                    run.max_zero_gradient = run.max_zero_gradient.max(out.max_zero_gradient);
                    if out.degenerate {
                        run.restarts += 1;
                        run.traces.push(out.trace);
                    } else {
                        run.outcome = Some(Box::new(out));
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        run
    };

    let runs: Vec<StartRun> = if options.parallel && options.n_starts > 1 {
        (0..options.n_starts).into_par_iter().map(run_start).collect()
    } else {
        (0..options.n_starts).map(run_start).collect()
    };

    let mut best: Option<(EmOutcome, usize)> = None;
    let mut degenerate_restarts = 0u64;
    let mut max_zero_gradient = 0.0f64;
    let mut all_traces: Vec<Vec<f64>> = Vec::new();
    for (s, run) in runs.into_iter().enumerate() {
        degenerate_restarts += run.restarts;
        max_zero_gradient = max_zero_gradient.max(run.max_zero_gradient);
        all_traces.extend(run.traces);
        if let Some(out) = run.outcome {
            all_traces.push(out.trace.clone());
            if out.converged {
                let score = *out.trace.last().unwrap();
                let better = match &best {
                    Some((current, _)) => score > *current.trace.last().unwrap(),
                    None => true,
                };
                if better {
                    best = Some((*out, s));
                }
            }
        }
    }

    match best {
        Some((mut out, s)) => {
            out.diagnostics.degenerate_restarts = degenerate_restarts;
            Ok(EngineResult {
                outcome: out,
                start_index: Some(s),
                max_zero_gradient,
            })
        }
        None => Err(Error::NoStartConverged { traces: all_traces }),
    }
}

/// Fits a `G`-component model by multi-start EM and returns the best
/// converged run, components sorted by `b1`.
pub fn fit(
    data: &PreparedData,
    cfg: &QuantileConfig,
    g: usize,
    options: &FitOptions,
) -> Result<FitResult> {
    let engine = engine_fit(data, cfg, g, options, &BetaStepKind::ClosedForm)?;
    let (out, start_index) = (engine.outcome, engine.start_index);
    let mut params = out.params;
    params.canonicalize();
    let nu = n_parameters_unpenalized(data.n_binary, data.n_positive, g);
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
        lambda: None,
        start_index,
        diagnostics: out.diagnostics,
    })
}
