//! Two-part finite mixture quantile regression for longitudinal
//! semicontinuous outcomes.
//!
//! The outcome of each unit at each occasion is either exactly zero or a
//! positive amount. The occurrence of a zero follows a logistic model and the
//! log of the positive amount follows an asymmetric Laplace working
//! likelihood whose location is the conditional quantile of interest. Unit
//! level heterogeneity enters through discrete random intercepts in both
//! parts: a finite number of latent components, each with its own pair of
//! intercepts and a mixing mass, estimated jointly with the regression
//! coefficients by an EM algorithm with closed-form M-steps.
//!
//! The crate provides
//!
//! * [`quantile`]: check loss, asymmetric Laplace log density, the inverse
//!   moment that drives the EM weights, and a sampler;
//! * [`data`]: panel containers, validation, zero handling and design
//!   assembly, plus CSV ingestion;
//! * [`em`]: the mixture fitter ([`em::fit`]) and its individual steps;
//! * [`lasso`]: an L1-penalized variant of the positive-part update, a
//!   penalized fitter and cross-validation over the penalty grid;
//! * [`inference`]: a model-based simulator, parametric-bootstrap standard
//!   errors and information-criterion model selection.
//!
//! Fits are deterministic functions of the data and a single `u64` seed;
//! multi-start, bootstrap and cross-validation fan out over named substreams
//! so results do not depend on thread scheduling.

pub mod data;
pub mod em;
pub mod error;
pub mod inference;
pub mod lasso;
pub mod quantile;
pub mod rng;

pub use data::{
    prepare, prepare_with_zero_threshold, read_panel_csv, write_panel_csv, zero_fraction,
    ColumnMap, Observation, PanelDataset, PreparedData, UnitRecord,
};
pub use em::{
    e_step, fit, m_step_binary, m_step_positive, m_step_scale_and_masses, observed_loglik,
    Diagnostics, FitOptions, FitResult, MixtureParams, PosteriorState,
};
pub use error::{Error, Result};
pub use inference::{
    bootstrap_se, select_model, simulate, BootstrapOptions, BootstrapResult, PenaltyMode,
    SelectOptions, SelectionRow, SelectionTable,
};
pub use lasso::{
    cross_validate_lambda, default_lambda_grid, fit_penalized, lambda_max,
    penalized_m_step_positive, CvOutcome, CvRow, PenaltyConfig,
};
pub use quantile::{al_log_density, check_loss, gig_inverse_moment, sample_al, QuantileConfig};
