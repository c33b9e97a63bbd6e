//! Checks the asymmetric Laplace functions against independent numerical
//! oracles: quadrature for the density, its quantile property, its mean and
//! the conditional inverse moment, and Monte Carlo for the sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpmix::{al_log_density, check_loss, gig_inverse_moment, sample_al, QuantileConfig};

/// Composite Simpson rule; `n` intervals, `n` even.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Integration bounds holding the truncated tail mass near 1e-17. The left
/// tail decays at rate (1 - tau) / sigma and the right at tau / sigma.
fn al_bounds(mu: f64, sigma: f64, tau: f64) -> (f64, f64) {
    (mu - 40.0 * sigma / (1.0 - tau), mu + 40.0 * sigma / tau)
}

#[test]
fn al_density_integrates_to_one() {
    for &tau in &[0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95] {
        for &(mu, sigma) in &[(0.0, 1.0), (-2.0, 0.3), (1.5, 2.0)] {
            let (lo, hi) = al_bounds(mu, sigma, tau);
            let f = |y: f64| al_log_density(y, mu, sigma, tau).unwrap().exp();
            // The density has a kink at mu, so integrate each side alone.
            let mass = simpson(&f, lo, mu, 20_000) + simpson(&f, mu, hi, 20_000);
            assert!(
                (mass - 1.0).abs() < 1e-6,
                "tau={tau} mu={mu} sigma={sigma}: mass {mass}"
            );
        }
    }
}

#[test]
fn al_location_is_the_tau_quantile() {
    for &tau in &[0.05, 0.2, 0.5, 0.8, 0.95] {
        for &(mu, sigma) in &[(0.7, 0.5), (-1.0, 1.8)] {
            let (lo, _) = al_bounds(mu, sigma, tau);
            let f = |y: f64| al_log_density(y, mu, sigma, tau).unwrap().exp();
            let below = simpson(&f, lo, mu, 20_000);
            assert!(
                (below - tau).abs() < 1e-6,
                "tau={tau} mu={mu} sigma={sigma}: P(Y <= mu) = {below}"
            );
        }
    }
}

#[test]
fn al_mean_matches_theta_shift() {
    for &tau in &[0.1, 0.5, 0.85] {
        let cfg = QuantileConfig::new(tau).unwrap();
        for &(mu, sigma) in &[(0.0, 1.0), (2.0, 0.4)] {
            let (lo, hi) = al_bounds(mu, sigma, tau);
            let f = |y: f64| y * al_log_density(y, mu, sigma, tau).unwrap().exp();
            let mean = simpson(&f, lo, mu, 40_000) + simpson(&f, mu, hi, 40_000);
            let expected = mu + cfg.theta() * sigma;
            assert!(
                (mean - expected).abs() < 1e-5,
                "tau={tau}: mean {mean} vs {expected}"
            );
        }
    }
}

#[test]
fn al_log_density_is_affine_in_check_loss() {
    for &tau in &[0.15, 0.5, 0.9] {
        for &sigma in &[0.4, 1.0, 3.0] {
            for i in -20..=20 {
                let y = i as f64 * 0.37;
                let mu = 0.9;
                let direct = al_log_density(y, mu, sigma, tau).unwrap();
                let via_loss =
                    (tau * (1.0 - tau) / sigma).ln() - check_loss(y - mu, tau).unwrap() / sigma;
                assert!(
                    (direct - via_loss).abs() < 1e-12,
                    "tau={tau} sigma={sigma} y={y}"
                );
            }
        }
    }
}

#[test]
fn check_loss_argmin_is_the_sample_quantile() {
    // Minimizing total check loss over a location recovers the empirical
    // quantile; scan a fine grid and compare against the order statistics.
    let sample = [3.1, -0.4, 0.9, 2.2, 5.0, 1.1, 0.3, 4.4, -1.7];
    let mut sorted = sample;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &tau in &[0.25, 0.5, 0.75] {
        let total = |m: f64| -> f64 {
            sample.iter().map(|y| check_loss(y - m, tau).unwrap()).sum()
        };
        let mut best = f64::INFINITY;
        let mut arg = 0.0;
        let mut m = -3.0;
        while m <= 6.0 {
            let v = total(m);
            if v < best {
                best = v;
                arg = m;
            }
            m += 1e-3;
        }
        // With n = 9 the minimizer is the order statistic at ceil(9 tau).
        let k = (9.0 * tau).ceil() as usize - 1;
        assert!(
            (arg - sorted[k]).abs() < 2e-3,
            "tau={tau}: argmin {arg} vs order statistic {}",
            sorted[k]
        );
    }
}

/// Conditional expectation of the reciprocal latent scale by quadrature on
/// the log axis. The posterior of the latent exponential variable given a
/// positive observation is proportional to
/// v^(-1/2) exp(-(r - theta v)^2 / (2 rho2 sigma v) - v / sigma).
fn inverse_moment_quadrature(r: f64, sigma: f64, cfg: &QuantileConfig) -> f64 {
    let theta = cfg.theta();
    let rho2 = cfg.rho2();
    let log_q = |u: f64| -> f64 {
        let v = u.exp();
        let dev = r - theta * v;
        -0.5 * u - dev * dev / (2.0 * rho2 * sigma * v) - v / sigma
    };
    let n = 40_000;
    let (a, b) = (-40.0, 40.0);
    let h = (b - a) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|i| log_q(a + i as f64 * h)).collect();
    let peak = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weight = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &lq) in grid.iter().enumerate() {
        let u = a + i as f64 * h;
        let w = weight(i);
        num += w * (lq - peak).exp();
        den += w * (lq - peak + u).exp();
    }
    num / den
}

#[test]
fn gig_inverse_moment_matches_quadrature() {
    for &tau in &[0.1, 0.5, 0.8] {
        let cfg = QuantileConfig::new(tau).unwrap();
        for &r in &[-2.0, -0.5, -0.01, 0.01, 0.7, 3.0] {
            for &sigma in &[0.3, 1.0, 2.5] {
                let oracle = inverse_moment_quadrature(r, sigma, &cfg);
                let value = gig_inverse_moment(r, sigma, &cfg).unwrap();
                assert!(
                    ((value - oracle) / oracle).abs() < 1e-4,
                    "tau={tau} r={r} sigma={sigma}: {value} vs quadrature {oracle}"
                );
            }
        }
    }
}

#[test]
fn sampler_matches_distribution() {
    let n = 200_000;
    for &tau in &[0.25, 0.5, 0.9] {
        let cfg = QuantileConfig::new(tau).unwrap();
        let (mu, sigma) = (0.8, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_al(mu, sigma, tau, &mut rng).unwrap())
            .collect();

        let below = draws.iter().filter(|y| **y <= mu).count() as f64 / n as f64;
        let tol_frac = 4.0 * (tau * (1.0 - tau) / n as f64).sqrt();
        assert!(
            (below - tau).abs() < tol_frac,
            "tau={tau}: P(Y <= mu) estimated {below}"
        );

        let mean = draws.iter().sum::<f64>() / n as f64;
        let expected = mu + cfg.theta() * sigma;
        let sd = sigma * (cfg.theta().powi(2) + cfg.rho2()).sqrt();
        let tol_mean = 5.0 * sd / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() < tol_mean,
            "tau={tau}: mean {mean} vs {expected}"
        );
    }
}
