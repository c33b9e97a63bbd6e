//! Artifact writers for the run command. Everything here is deterministic:
//! no timestamps, no machine identifiers, shortest-round-trip float
//! formatting, so identical configs produce byte-identical files.

use std::error::Error;

use serde::Serialize;
use tpmix::{BootstrapResult, MixtureParams, PanelDataset, SelectionRow, SelectionTable};

use crate::config::{PenaltySpec, RunConfig};

/// Derived bootstrap seed and result for one quantile level, when enabled.
pub type TauBootstrap = Option<(u64, BootstrapResult)>;

type WriteResult = Result<(), Box<dyn Error>>;

struct Moments {
    mean: f64,
    sd: f64,
    skewness: f64,
    kurtosis: f64,
    zero_fraction: f64,
    maximum: f64,
}

/// Sample mean and SD, moment-ratio skewness m3/m2^(3/2) and kurtosis
/// m4/m2^2, share of values within `zero_tol` of zero, and the maximum.
fn moments(values: &[f64], zero_tol: f64) -> Moments {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let zeros = values.iter().filter(|v| v.abs() <= zero_tol).count();
    Moments {
        mean,
        sd: (m2 * n / (n - 1.0)).sqrt(),
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2),
        zero_fraction: zeros as f64 / n,
        maximum: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Linear-interpolation sample quantile on a sorted slice.
fn quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * tau;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (h - lo as f64)
}

pub fn write_summary(cfg: &RunConfig, panel: &PanelDataset) -> WriteResult {
    // One row for the outcome, then one per distinct covariate column.
    let mut variables: Vec<(String, Vec<f64>)> = Vec::new();
    let collect = |pick: &dyn Fn(&tpmix::Observation) -> f64| -> Vec<f64> {
        panel
            .units
            .iter()
            .flat_map(|u| u.observations.iter().map(pick))
            .collect()
    };
    variables.push((cfg.columns.y.clone(), collect(&|o| o.y)));
    for (j, name) in panel.binary_names.iter().enumerate() {
        variables.push((name.clone(), collect(&move |o| o.s[j])));
    }
    for (j, name) in panel.positive_names.iter().enumerate() {
        if !panel.binary_names.contains(name) {
            variables.push((name.clone(), collect(&move |o| o.x[j])));
        }
    }

    let mut writer = csv::Writer::from_path(cfg.output_dir.join("summary.csv"))?;
    let mut header = vec![
        "variable".to_string(),
        "mean".into(),
        "sd".into(),
        "skewness".into(),
        "kurtosis".into(),
        "zero_fraction".into(),
        "maximum".into(),
    ];
    header.extend(cfg.taus.iter().map(|t| format!("q{t}")));
    writer.write_record(&header)?;

    for (i, (name, values)) in variables.iter().enumerate() {
        // The zero rule of the model applies to the outcome; covariates
        // count exact zeros only.
        let zero_tol = if i == 0 { cfg.zero_threshold } else { 0.0 };
        let m = moments(values, zero_tol);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mut record = vec![
            name.clone(),
            format!("{}", m.mean),
            format!("{}", m.sd),
            format!("{}", m.skewness),
            format!("{}", m.kurtosis),
            format!("{}", m.zero_fraction),
            format!("{}", m.maximum),
        ];
        for &tau in &cfg.taus {
            record.push(format!("{}", quantile_sorted(&sorted, tau)));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_selection(cfg: &RunConfig, table: &SelectionTable) -> WriteResult {
    let mut writer = csv::Writer::from_path(cfg.output_dir.join("selection.csv"))?;
    writer.write_record([
        "tau",
        "g",
        "loglik",
        "n_parameters",
        "aic",
        "bic",
        "lambda",
        "selected",
        "failed",
    ])?;
    for row in &table.rows {
        writer.write_record(&[
            format!("{}", row.tau),
            format!("{}", row.g),
            format!("{}", row.loglik),
            format!("{}", row.n_parameters),
            format!("{}", row.aic),
            format!("{}", row.bic),
            row.lambda.map(|l| format!("{l}")).unwrap_or_default(),
            format!("{}", row.selected),
            format!("{}", row.failed),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Entry {
    name: String,
    estimate: f64,
    se: Option<f64>,
}

#[derive(Serialize)]
struct BinaryPanel {
    coefficients: Vec<Entry>,
    intercepts: Vec<Entry>,
}

#[derive(Serialize)]
struct PositivePanel {
    coefficients: Vec<Entry>,
    intercepts: Vec<Entry>,
    scale: Entry,
}

#[derive(Serialize)]
struct FitSummary {
    loglik: f64,
    n_parameters: usize,
    aic: f64,
    bic: f64,
    lambda: Option<f64>,
    converged: bool,
    n_iterations: usize,
    start_index: Option<usize>,
}

#[derive(Serialize)]
struct CoefficientDoc {
    tau: f64,
    g: usize,
    binary: BinaryPanel,
    positive: PositivePanel,
    masses: Vec<Entry>,
    fit: FitSummary,
}

/// Parameter vector of one selected fit, split into named blocks in
/// [`MixtureParams::flatten`] order, with bootstrap SEs attached where they
/// exist. Positive-part SEs are withheld for penalized fits: resampling
/// around a shrunken estimate does not measure its sampling variability.
struct NamedBlocks {
    gamma: Vec<Entry>,
    beta: Vec<Entry>,
    sigma: Entry,
    b0: Vec<Entry>,
    b1: Vec<Entry>,
    pi: Vec<Entry>,
}

fn named_blocks(cfg: &RunConfig, row: &SelectionRow, boot: &TauBootstrap) -> NamedBlocks {
    let fit = row.fit.as_ref().expect("selected rows carry their fit");
    let params = &fit.params;
    let m = params.gamma.len();
    let p = params.beta.len();
    let g = params.pi.len();
    let names = MixtureParams::parameter_names(&cfg.columns.binary, &cfg.columns.positive, g);
    let values = params.flatten();
    let penalized = row.lambda.is_some_and(|l| l > 0.0);
    let se_at = |i: usize, positive_part: bool| -> Option<f64> {
        if positive_part && penalized {
            return None;
        }
        boot.as_ref().map(|(_, b)| b.se[i])
    };
    let entry = |i: usize, positive_part: bool| Entry {
        name: names[i].clone(),
        estimate: values[i],
        se: se_at(i, positive_part),
    };
    NamedBlocks {
        gamma: (0..m).map(|i| entry(i, false)).collect(),
        beta: (m..m + p).map(|i| entry(i, true)).collect(),
        sigma: entry(m + p, true),
        b0: (m + p + 1..m + p + 1 + g).map(|i| entry(i, false)).collect(),
        b1: (m + p + 1 + g..m + p + 1 + 2 * g)
            .map(|i| entry(i, true))
            .collect(),
        pi: (m + p + 1 + 2 * g..m + p + 1 + 3 * g)
            .map(|i| entry(i, false))
            .collect(),
    }
}

pub fn write_coefficients(
    cfg: &RunConfig,
    table: &SelectionTable,
    boots: &[TauBootstrap],
) -> WriteResult {
    for (row, boot) in table.selected_rows().zip(boots) {
        let fit = row.fit.as_ref().expect("selected rows carry their fit");
        let blocks = named_blocks(cfg, row, boot);
        let doc = CoefficientDoc {
            tau: row.tau,
            g: row.g,
            binary: BinaryPanel {
                coefficients: blocks.gamma,
                intercepts: blocks.b0,
            },
            positive: PositivePanel {
                coefficients: blocks.beta,
                intercepts: blocks.b1,
                scale: blocks.sigma,
            },
            masses: blocks.pi,
            fit: FitSummary {
                loglik: fit.loglik,
                n_parameters: fit.n_parameters,
                aic: fit.aic,
                bic: fit.bic,
                lambda: row.lambda,
                converged: fit.converged,
                n_iterations: fit.n_iterations,
                start_index: fit.start_index,
            },
        };
        let path = cfg.output_dir.join(format!("coefficients_{}.json", row.tau));
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn write_paths(cfg: &RunConfig, table: &SelectionTable, boots: &[TauBootstrap]) -> WriteResult {
    let mut writer = csv::Writer::from_path(cfg.output_dir.join("paths.csv"))?;
    writer.write_record(["tau", "block", "name", "estimate", "se"])?;
    for (row, boot) in table.selected_rows().zip(boots) {
        let blocks = named_blocks(cfg, row, boot);
        let sections: [(&str, &[Entry]); 6] = [
            ("binary", &blocks.gamma),
            ("b0", &blocks.b0),
            ("positive", &blocks.beta),
            ("b1", &blocks.b1),
            ("sigma", std::slice::from_ref(&blocks.sigma)),
            ("pi", &blocks.pi),
        ];
        for (block, entries) in sections {
            for e in entries {
                writer.write_record(&[
                    format!("{}", row.tau),
                    block.to_string(),
                    e.name.clone(),
                    format!("{}", e.estimate),
                    e.se.map(|s| format!("{s}")).unwrap_or_default(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_run_log(
    cfg: &RunConfig,
    panel: &PanelDataset,
    table: &SelectionTable,
    boots: &[TauBootstrap],
) -> WriteResult {
    let mut log = String::new();
    let mut line = |s: String| {
        log.push_str(&s);
        log.push('\n');
    };

    let n_rows = panel.n_observations();
    let zeros = panel
        .units
        .iter()
        .flat_map(|u| u.observations.iter())
        .filter(|o| o.y.abs() <= cfg.zero_threshold)
        .count();
    line("tpmix run".into());
    line(format!("seed: {}", cfg.seed));
    line(format!(
        "data: {} ({} units, {} rows, zero fraction {})",
        cfg.data.display(),
        panel.n_units(),
        n_rows,
        zeros as f64 / n_rows as f64
    ));
    line(format!(
        "columns: unit={} time={} y={}",
        cfg.columns.unit, cfg.columns.time, cfg.columns.y
    ));
    line(format!(
        "binary covariates: {}",
        cfg.columns.binary.join(", ")
    ));
    line(format!(
        "positive covariates: {}",
        cfg.columns.positive.join(", ")
    ));
    line(format!(
        "taus: {}",
        cfg.taus
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    line(format!(
        "g values: {}",
        cfg.g_values
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    match &cfg.penalty {
        PenaltySpec::Off => line("penalty: off".into()),
        PenaltySpec::Fixed(lambda) => line(format!("penalty: fixed lambda={lambda}")),
        PenaltySpec::Cv {
            grid,
            n_folds,
            grid_size,
        } => match grid {
            Some(grid) => line(format!(
                "penalty: cv folds={n_folds} grid=[{}]",
                grid.iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )),
            None => line(format!(
                "penalty: cv folds={n_folds} grid=automatic({grid_size})"
            )),
        },
    }
    if cfg.bootstrap_replicates > 0 {
        line(format!(
            "bootstrap: {} replicates (multistart={})",
            cfg.bootstrap_replicates, cfg.bootstrap_multistart
        ));
    } else {
        line("bootstrap: off".into());
    }
    line(format!(
        "fit options: n_starts={} max_iter={} tol={} zero_threshold={} threads={}",
        cfg.n_starts, cfg.max_iter, cfg.tol, cfg.zero_threshold, cfg.threads
    ));

    for (ti, &tau) in cfg.taus.iter().enumerate() {
        line(String::new());
        line(format!("[tau={tau}]"));
        for row in table.rows.iter().filter(|r| r.tau == tau) {
            if row.failed {
                line(format!("G={}: failed", row.g));
                continue;
            }
            let fit = row.fit.as_ref().expect("non-failed rows carry their fit");
            let mut cell = format!(
                "G={}: loglik={} n_parameters={} aic={} bic={} iterations={} converged={} start={}",
                row.g,
                row.loglik,
                row.n_parameters,
                row.aic,
                row.bic,
                fit.n_iterations,
                fit.converged,
                fit.start_index
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "warm".into()),
            );
            if let Some(lambda) = row.lambda {
                cell.push_str(&format!(" lambda={lambda}"));
            }
            line(cell);
        }
        let row = table
            .selected_rows()
            .find(|r| r.tau == tau)
            .expect("one selected row per tau");
        line(format!("selected: G={}", row.g));
        if let Some(cv) = &row.cv {
            line(format!(
                "cv: lambda_opt={} resampled_partitions={}",
                cv.lambda_opt, cv.resampled_partitions
            ));
            for r in &cv.table {
                line(format!(
                    "cv row: lambda={} mean_loss={} se_loss={}",
                    r.lambda, r.mean_loss, r.se_loss
                ));
            }
        }
        if let Some((seed, boot)) = &boots[ti] {
            line(format!(
                "bootstrap: seed={} requested={} failed={} ambiguous_labels={} warning={}",
                seed,
                boot.n_replicates,
                boot.n_failed,
                boot.ambiguous_label_replicates,
                boot.warning.as_deref().unwrap_or("none")
            ));
        }
        let fit = row.fit.as_ref().expect("selected rows carry their fit");
        let d = &fit.diagnostics;
        line(format!(
            "diagnostics: residual_clamps={} ridge_repairs={} b0_cap_hits={} sigma_clamps={} frozen_intercepts={} irls_stalls={} degenerate_restarts={}",
            d.residual_clamps,
            d.ridge_repairs,
            d.b0_cap_hits,
            d.sigma_clamps,
            d.frozen_intercepts,
            d.irls_stalls,
            d.degenerate_restarts
        ));
        line(format!(
            "trace: {}",
            fit.loglik_trace
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }

    std::fs::write(cfg.output_dir.join("run.log"), log)?;
    Ok(())
}
