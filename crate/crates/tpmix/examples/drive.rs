//! End-to-end walk through the public API: simulate a panel, round-trip it
//! through CSV, fit, select, penalize, bootstrap, then poke the error paths.

use tpmix::{
    bootstrap_se, cross_validate_lambda, fit, fit_penalized, lambda_max, prepare, read_panel_csv,
    select_model, simulate, write_panel_csv, zero_fraction, BootstrapOptions, ColumnMap,
    FitOptions, MixtureParams, Observation, PanelDataset, PenaltyConfig, PenaltyMode,
    QuantileConfig, SelectOptions, UnitRecord,
};

fn template(n_units: usize, n_times: usize) -> PanelDataset {
    let mut units = Vec::with_capacity(n_units);
    for i in 0..n_units {
        let group = if i % 2 == 0 { 1.0 } else { 0.0 };
        let mut observations = Vec::with_capacity(n_times);
        for t in 0..n_times {
            let wave = (0.9 * (i as f64) + 0.7 * (t as f64)).sin();
            observations.push(Observation {
                time: t as i64 + 1,
                y: 1.0,
                s: vec![group, t as f64],
                x: vec![group, wave],
            });
        }
        units.push(UnitRecord {
            unit_id: format!("u{i:03}"),
            observations,
        });
    }
    PanelDataset {
        units,
        binary_names: vec!["group".into(), "visit".into()],
        positive_names: vec!["group".into(), "wave".into()],
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = QuantileConfig::new(0.5)?;
    let truth = MixtureParams::new(
        vec![0.6, -0.4],
        vec![1.0, -0.8],
        0.4,
        vec![-1.0, 0.6],
        vec![-1.2, 1.3],
        vec![0.45, 0.55],
    )?;

    let tpl = template(120, 4);
    let panel = simulate(&truth, &tpl, &cfg, 71)?;
    println!(
        "simulated: {} units, {} rows, zero fraction {:.3}",
        panel.n_units(),
        panel.n_observations(),
        zero_fraction(&panel)?
    );

    // CSV round trip through a scratch file.
    let dir = tempfile::tempdir()?;
    let csv_path = dir.path().join("panel.csv");
    write_panel_csv(&csv_path, &panel)?;
    let map = ColumnMap {
        unit: "unit_id".into(),
        time: "time".into(),
        y: "y".into(),
        binary: vec!["group".into(), "visit".into()],
        positive: vec!["group".into(), "wave".into()],
    };
    let reread = read_panel_csv(&csv_path, &map)?;
    println!("csv round trip identical: {}", reread == panel);

    // Plain fit at the truth's component count.
    let prep = prepare(&panel)?;
    let opts = FitOptions {
        max_iter: 3000,
        ..FitOptions::default()
    };
    let fitted = fit(&prep, &cfg, 2, &opts)?;
    println!(
        "fit G=2: converged={} iters={} loglik={:.4} bic={:.2} start={:?}",
        fitted.converged,
        fitted.n_iterations,
        fitted.loglik,
        fitted.bic,
        fitted.start_index
    );
    println!(
        "  gamma={:?}\n  beta={:?}\n  sigma={:.4}\n  b0={:?}\n  b1={:?}\n  pi={:?}",
        fitted.params.gamma,
        fitted.params.beta,
        fitted.params.sigma,
        fitted.params.b0,
        fitted.params.b1,
        fitted.params.pi
    );

    // BIC selection across component counts.
    let sel = select_model(
        &panel,
        &[0.5],
        &[1, 2, 3],
        &SelectOptions {
            fit: opts.clone(),
            penalty: PenaltyMode::Off,
            zero_threshold: 0.0,
        },
    )?;
    for row in &sel.rows {
        println!(
            "selection tau={} G={} loglik={:.3} bic={:.2} selected={}",
            row.tau, row.g, row.loglik, row.bic, row.selected
        );
    }

    // Penalized path: at lambda_max every slope must be exactly zero.
    let lmax = lambda_max(&prep, &cfg, 2, &opts)?;
    let pinned = fit_penalized(&prep, &cfg, 2, lmax, &opts)?;
    let sparse = fit_penalized(&prep, &cfg, 2, lmax / 30.0, &opts)?;
    println!(
        "lambda_max={:.4}: beta at lmax={:?}, beta at lmax/30={:?}",
        lmax, pinned.params.beta, sparse.params.beta
    );

    // Small cross-validation over an explicit grid.
    let cv = cross_validate_lambda(
        &panel,
        &cfg,
        2,
        &PenaltyConfig {
            lambda_grid: Some(vec![0.0, lmax / 100.0, lmax / 10.0, lmax]),
            n_folds: 5,
            ..PenaltyConfig::default()
        },
        &opts,
    )?;
    println!("cv picked lambda={:.5}", cv.lambda_opt);
    for row in &cv.table {
        println!(
            "  lambda={:.5} loss={:.5} se={:.5}",
            row.lambda, row.mean_loss, row.se_loss
        );
    }

    // A few bootstrap replicates, warm-started at the point estimate.
    let boot = bootstrap_se(
        &fitted,
        &panel,
        &cfg,
        12,
        9,
        &BootstrapOptions {
            fit: opts,
            multistart: false,
        },
    )?;
    println!(
        "bootstrap: {} ok, {} failed, warning={:?}",
        boot.n_replicates, boot.n_failed, boot.warning
    );
    for (name, se) in boot.parameter_names.iter().zip(boot.se.iter()).take(5) {
        println!("  se[{name}]={se:.4}");
    }

    // Error paths, as a caller would hit them.
    println!("--- error displays ---");
    println!("tau=1.5     -> {}", QuantileConfig::new(1.5).unwrap_err());
    println!("G=0         -> {}", fit(&prep, &cfg, 0, &FitOptions::default()).unwrap_err());
    println!(
        "G>units     -> {}",
        fit(&prep, &cfg, 999, &FitOptions::default()).unwrap_err()
    );
    let mut bad = panel.clone();
    bad.units[0].observations[0].y = -3.0;
    println!("negative y  -> {}", prepare(&bad).unwrap_err());
    println!(
        "bad masses  -> {}",
        MixtureParams::new(vec![], vec![], 1.0, vec![0.0], vec![0.0], vec![0.7]).unwrap_err()
    );
    let missing = dir.path().join("missing-col.csv");
    std::fs::write(&missing, "unit,time,y\nu1,1,0.5\n")?;
    println!(
        "missing col -> {}",
        read_panel_csv(&missing, &map).unwrap_err()
    );
    Ok(())
}
