//! Asymmetric Laplace building blocks.
//!
//! For quantile level tau in (0, 1) the working density on the log scale is
//!
//! ```text
//! g(y; mu, sigma) = tau (1 - tau) / sigma * exp(-rho_tau((y - mu) / sigma))
//! ```
//!
//! with check loss `rho_tau(u) = u (tau - 1{u < 0})`, so that `mu` is the
//! tau-quantile. The density admits a normal-exponential mixture: with
//! `v ~ Exponential(mean sigma)` and `z ~ N(0, 1)`,
//!
//! ```text
//! y = mu + theta v + sqrt(rho2 sigma v) z,
//! theta = (1 - 2 tau) / (tau (1 - tau)),   rho2 = 2 / (tau (1 - tau)).
//! ```
//!
//! Conditional on a residual, `1/v` has a generalized-inverse-Gaussian
//! posterior whose mean is free of sigma; that inverse moment is the weight
//! appearing in the closed-form M-steps.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

/// Residuals below this magnitude are clamped before inverting, keeping the
/// EM weights finite at interpolated observations.
pub const RESIDUAL_FLOOR: f64 = 1e-6;

/// A quantile level together with the mixture constants derived from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileConfig {
    tau: f64,
    theta: f64,
    rho2: f64,
}

impl QuantileConfig {
    /// Errors unless `tau` lies strictly inside (0, 1).
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 || tau >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "tau must lie strictly inside (0, 1), got {tau}"
            )));
        }
        let denom = tau * (1.0 - tau);
        Ok(Self {
            tau,
            theta: (1.0 - 2.0 * tau) / denom,
            rho2: 2.0 / denom,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Skew constant of the normal-exponential representation.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Squared scale constant of the normal-exponential representation.
    /// Always at least 8, with equality only at the median.
    pub fn rho2(&self) -> f64 {
        self.rho2
    }

    /// `sqrt(theta^2 + 2 rho2)`, algebraically `1 / (tau (1 - tau))`.
    pub fn kappa(&self) -> f64 {
        (self.theta * self.theta + 2.0 * self.rho2).sqrt()
    }

    pub(crate) fn check(&self, u: f64) -> f64 {
        if u >= 0.0 {
            self.tau * u
        } else {
            (self.tau - 1.0) * u
        }
    }

    /// Log density assuming `sigma > 0` was already validated.
    pub(crate) fn log_density(&self, y: f64, mu: f64, sigma: f64) -> f64 {
        (self.tau * (1.0 - self.tau) / sigma).ln() - self.check((y - mu) / sigma)
    }

    pub(crate) fn inverse_moment(&self, residual: f64) -> f64 {
        self.kappa() / residual.abs().max(RESIDUAL_FLOOR)
    }
}

/// Check loss `rho_tau(u)`. Errors when `tau` is outside (0, 1).
pub fn check_loss(u: f64, tau: f64) -> Result<f64> {
    Ok(QuantileConfig::new(tau)?.check(u))
}

/// Log of the asymmetric Laplace density at `y` with location `mu` and
/// scale `sigma > 0`.
pub fn al_log_density(y: f64, mu: f64, sigma: f64, tau: f64) -> Result<f64> {
    let cfg = QuantileConfig::new(tau)?;
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(cfg.log_density(y, mu, sigma))
}

/// Posterior mean of `1/v` given a residual: `sqrt(theta^2 + 2 rho2) / |r|`,
/// with `|r|` clamped at [`RESIDUAL_FLOOR`]. The moment does not involve the
/// scale; `sigma` is validated for interface symmetry with the density it is
/// derived from.
pub fn gig_inverse_moment(residual: f64, sigma: f64, cfg: &QuantileConfig) -> Result<f64> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(cfg.inverse_moment(residual))
}

/// One draw from the asymmetric Laplace via its normal-exponential mixture.
/// `sigma = 0` is allowed and collapses the draw to `mu` (the generator is
/// still advanced so streams stay aligned).
pub fn sample_al<R: Rng + ?Sized>(mu: f64, sigma: f64, tau: f64, rng: &mut R) -> Result<f64> {
    let cfg = QuantileConfig::new(tau)?;
    if !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("mu must be finite, got {mu}")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be nonnegative and finite, got {sigma}"
        )));
    }
    let e: f64 = rng.sample(Exp1);
    let z: f64 = rng.sample(StandardNormal);
    let v = sigma * e;
    Ok(mu + cfg.theta * v + (cfg.rho2 * sigma * v).sqrt() * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn check_loss_known_values() {
        assert_eq!(check_loss(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(check_loss(2.0, 0.5).unwrap(), 1.0);
        assert_eq!(check_loss(-1.0, 0.25).unwrap(), 0.75);
    }

    #[test]
    fn check_loss_slopes() {
        let tau = 0.37;
        assert_relative_eq!(check_loss(3.0, tau).unwrap(), 3.0 * tau);
        assert_relative_eq!(check_loss(-3.0, tau).unwrap(), 3.0 * (1.0 - tau));
    }

    #[test]
    fn check_loss_rejects_boundary_tau() {
        for tau in [0.0, 1.0, -0.1, 1.1, f64::NAN] {
            assert!(check_loss(1.0, tau).is_err());
        }
    }

    #[test]
    fn mixture_constants() {
        let cfg = QuantileConfig::new(0.5).unwrap();
        assert_relative_eq!(cfg.theta(), 0.0);
        assert_relative_eq!(cfg.rho2(), 8.0);

        let cfg = QuantileConfig::new(0.25).unwrap();
        assert_relative_eq!(cfg.theta(), 8.0 / 3.0);
        assert_relative_eq!(cfg.rho2(), 32.0 / 3.0);

        // rho2 is minimized at the median.
        for tau in [0.05, 0.2, 0.5, 0.8, 0.95] {
            assert!(QuantileConfig::new(tau).unwrap().rho2() >= 8.0 - 1e-12);
        }
    }

    #[test]
    fn kappa_matches_closed_form() {
        for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let cfg = QuantileConfig::new(tau).unwrap();
            assert_relative_eq!(cfg.kappa(), 1.0 / (tau * (1.0 - tau)), epsilon = 1e-12);
        }
    }

    #[test]
    fn al_log_density_known_values() {
        let at_mode = al_log_density(0.0, 0.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(at_mode, 0.25f64.ln(), epsilon = 1e-15);
        let one_above = al_log_density(1.0, 0.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(one_above, 0.25f64.ln() - 0.5, epsilon = 1e-15);
    }

    #[test]
    fn al_log_density_rejects_bad_scale() {
        assert!(al_log_density(0.0, 0.0, 0.0, 0.5).is_err());
        assert!(al_log_density(0.0, 0.0, -1.0, 0.5).is_err());
        assert!(al_log_density(0.0, 0.0, f64::INFINITY, 0.5).is_err());
    }

    #[test]
    fn gig_inverse_moment_known_values() {
        let cfg = QuantileConfig::new(0.5).unwrap();
        assert_relative_eq!(gig_inverse_moment(2.0, 1.0, &cfg).unwrap(), 2.0);

        let cfg = QuantileConfig::new(0.25).unwrap();
        let want = (64.0f64 / 9.0 + 64.0 / 3.0).sqrt();
        assert_relative_eq!(gig_inverse_moment(1.0, 1.0, &cfg).unwrap(), want, epsilon = 1e-12);
        assert_relative_eq!(want, 16.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gig_inverse_moment_clamps_small_residuals() {
        let cfg = QuantileConfig::new(0.5).unwrap();
        let at_zero = gig_inverse_moment(0.0, 1.0, &cfg).unwrap();
        let at_floor = gig_inverse_moment(RESIDUAL_FLOOR, 1.0, &cfg).unwrap();
        assert_eq!(at_zero, at_floor);
        assert!(at_zero.is_finite());
        // sigma does not enter the moment.
        assert_eq!(
            gig_inverse_moment(0.7, 0.1, &cfg).unwrap(),
            gig_inverse_moment(0.7, 10.0, &cfg).unwrap()
        );
    }

    #[test]
    fn gig_inverse_moment_rejects_bad_scale() {
        let cfg = QuantileConfig::new(0.5).unwrap();
        assert!(gig_inverse_moment(1.0, 0.0, &cfg).is_err());
        assert!(gig_inverse_moment(1.0, -2.0, &cfg).is_err());
    }

    #[test]
    fn sampler_collapses_as_scale_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let y = sample_al(3.0, 1e-10, 0.75, &mut rng).unwrap();
            assert!((y - 3.0).abs() < 1e-4);
        }
        let y = sample_al(-2.0, 0.0, 0.3, &mut rng).unwrap();
        assert_eq!(y, -2.0);
    }

    #[test]
    fn sampler_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_al(0.0, -1.0, 0.5, &mut rng).is_err());
        assert!(sample_al(f64::NAN, 1.0, 0.5, &mut rng).is_err());
        assert!(sample_al(0.0, 1.0, 1.0, &mut rng).is_err());
    }
}
