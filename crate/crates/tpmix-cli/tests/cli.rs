//! Black-box tests for the command-line binary: artifact shapes, exit codes,
//! the JSON error report on stderr, and byte-level determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tpmix::{
    simulate, write_panel_csv, MixtureParams, Observation, PanelDataset, QuantileConfig,
    UnitRecord,
};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpmix"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("binary should not be killed by a signal")
}

/// Parses the machine-readable error report the binary prints on stderr.
fn error_report(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str::<serde_json::Value>(text.trim())
        .unwrap_or_else(|e| panic!("stderr should be one JSON object, got {e}: {text}"))["error"]
        .clone()
}

fn template(n_units: usize, n_times: usize) -> PanelDataset {
    let mut units = Vec::with_capacity(n_units);
    for i in 0..n_units {
        let group = if i % 2 == 0 { 1.0 } else { 0.0 };
        let mut observations = Vec::with_capacity(n_times);
        for t in 0..n_times {
            let wave = (0.9 * i as f64 + 0.7 * t as f64).sin();
            observations.push(Observation {
                time: t as i64 + 1,
                y: 0.0,
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

/// Simulates a small well-separated two-component panel and writes it to CSV.
fn write_dataset(path: &Path) {
    let truth = MixtureParams::new(
        vec![0.6, -0.4],
        vec![1.0, -0.8],
        0.4,
        vec![-1.0, 0.6],
        vec![-1.2, 1.3],
        vec![0.45, 0.55],
    )
    .unwrap();
    let cfg = QuantileConfig::new(0.5).unwrap();
    let panel = simulate(&truth, &template(40, 3), &cfg, 5).unwrap();
    write_panel_csv(path, &panel).unwrap();
}

fn config_toml(data: &Path, out_dir: &Path, body: &str) -> String {
    format!(
        "data = {data:?}\noutput_dir = {out_dir:?}\nseed = 3\ntaus = [0.5]\n\
         g_values = [1, 2]\nn_starts = 4\nmax_iter = 1500\nbootstrap_replicates = 6\n\
         {body}\n[columns]\nbinary = [\"group\", \"visit\"]\npositive = [\"group\", \"wave\"]\n"
    )
}

/// Sets up a dataset plus config in `dir` and returns the config path.
fn fixture(dir: &Path, body: &str) -> std::path::PathBuf {
    let data = dir.join("panel.csv");
    write_dataset(&data);
    let config = dir.join("run.toml");
    fs::write(&config, config_toml(&data, &dir.join("out"), body)).unwrap();
    config
}

fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn run_writes_all_artifacts_with_consistent_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = bin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("run.log"));

    let art = dir.path().join("out");
    for name in ["summary.csv", "selection.csv", "paths.csv", "run.log", "coefficients_0.5.json"] {
        assert!(art.join(name).exists(), "missing artifact {name}");
    }

    // One selection row per (tau, G) cell, exactly one marked selected.
    let selection = read_lines(&art.join("selection.csv"));
    assert_eq!(selection[0], "tau,g,loglik,n_parameters,aic,bic,lambda,selected,failed");
    assert_eq!(selection.len(), 3);
    let picked: Vec<&String> = selection[1..]
        .iter()
        .filter(|l| l.ends_with(",true,false"))
        .collect();
    assert_eq!(picked.len(), 1);
    let g: usize = picked[0].split(',').nth(1).unwrap().parse().unwrap();

    // Coefficient path rows: gamma and beta slopes, then b0, b1, pi per
    // component, then sigma, for the selected model.
    let paths = read_lines(&art.join("paths.csv"));
    assert_eq!(paths.len(), 1 + 2 + 2 + 3 * g + 1);
    let se_filled = paths[1..]
        .iter()
        .filter(|l| !l.ends_with(','))
        .count();
    assert!(se_filled > 0, "bootstrap was requested, some se cells should be filled");

    // Summary covers the outcome plus the union of covariates.
    let summary = read_lines(&art.join("summary.csv"));
    assert!(summary[0].ends_with(",q0.5"));
    let vars: Vec<&str> = summary[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(vars, ["y", "group", "visit", "wave"]);

    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(art.join("coefficients_0.5.json")).unwrap())
            .unwrap();
    assert_eq!(doc["tau"], 0.5);
    assert_eq!(doc["g"], g as i64);
    assert_eq!(doc["binary"]["coefficients"].as_array().unwrap().len(), 2);
    assert_eq!(doc["positive"]["intercepts"].as_array().unwrap().len(), g);
    let mass: f64 = doc["masses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["estimate"].as_f64().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert!(doc["fit"]["bic"].as_f64().unwrap().is_finite());
}

#[test]
fn run_artifacts_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    write_dataset(&data);
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("out{run}"));
        let config = dir.path().join(format!("run{run}.toml"));
        fs::write(&config, config_toml(&data, &out_dir, "")).unwrap();
        let out = bin(&["run", "--config", config.to_str().unwrap()]);
        assert_eq!(exit_code(&out), 0);
        let artifacts: Vec<Vec<u8>> =
            ["summary.csv", "selection.csv", "paths.csv", "run.log", "coefficients_0.5.json"]
                .iter()
                .map(|n| fs::read(out_dir.join(n)).unwrap())
                .collect();
        bytes.push(artifacts);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn flags_override_file_settings() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = bin(&[
        "run", "--config", config.to_str().unwrap(),
        "--taus", "0.25", "--g-values", "1", "--bootstrap-replicates", "0",
    ]);
    assert_eq!(exit_code(&out), 0);
    let art = dir.path().join("out");
    assert!(art.join("coefficients_0.25.json").exists());
    assert!(!art.join("coefficients_0.5.json").exists());
    assert_eq!(read_lines(&art.join("selection.csv")).len(), 2);
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let out = bin(&["run", "--config", "/no/such/config.toml"]);
    assert_eq!(exit_code(&out), 2);
    let report = error_report(&out);
    assert_eq!(report["phase"], "config");
    assert_eq!(report["exit_code"], 2);
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "data = \"x.csv\"\nbogus = 1\n").unwrap();
    let out = bin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(error_report(&out)["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn invalid_tau_flag_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = bin(&["run", "--config", config.to_str().unwrap(), "--taus", "1.5"]);
    assert_eq!(exit_code(&out), 2);
    assert_eq!(error_report(&out)["phase"], "config");
}

#[test]
fn unknown_flag_exits_with_config_code() {
    let out = bin(&["run", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 2);
    assert_eq!(error_report(&out)["phase"], "config");
}

#[test]
fn missing_referenced_column_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = bin(&["run", "--config", config.to_str().unwrap(), "--binary-cols", "group,nope"]);
    assert_eq!(exit_code(&out), 2);
    let report = error_report(&out);
    assert_eq!(report["phase"], "config");
    assert!(report["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn unreadable_data_file_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        config_toml(&dir.path().join("absent.csv"), &dir.path().join("out"), ""),
    )
    .unwrap();
    let out = bin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
    assert_eq!(error_report(&out)["phase"], "data");
}

#[test]
fn negative_outcome_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    fs::write(
        &data,
        "unit_id,time,y,group,visit,wave\na,1,-1.0,0,0,0.1\na,2,0.5,0,1,0.2\n",
    )
    .unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, config_toml(&data, &dir.path().join("out"), "")).unwrap();
    let out = bin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
    assert_eq!(error_report(&out)["phase"], "data");
}

#[test]
fn impossible_component_count_exits_with_fit_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = bin(&["run", "--config", config.to_str().unwrap(), "--g-values", "200"]);
    assert_eq!(exit_code(&out), 4);
    assert_eq!(error_report(&out)["phase"], "fit");
}

#[test]
fn blocked_output_dir_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("panel.csv");
    write_dataset(&data);
    let wall = dir.path().join("wall");
    fs::write(&wall, "not a directory").unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, config_toml(&data, &wall.join("out"), "")).unwrap();
    let out = bin(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 5);
    assert_eq!(error_report(&out)["phase"], "io");
}

fn write_template_csv(path: &Path) {
    let mut text = String::from("unit_id,time,y,group,visit,wave\n");
    for i in 0..6 {
        for t in 0..2 {
            let wave = (0.9 * i as f64 + 0.7 * t as f64).sin();
            text.push_str(&format!("u{i},{},0.0,{},{t},{wave}\n", t + 1, i % 2));
        }
    }
    fs::write(path, text).unwrap();
}

fn simulate_args<'a>(params: &'a str, template: &'a str, out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "simulate", "--params", params, "--template", template, "--out", out,
        "--seed", seed, "--binary-cols", "group,visit", "--positive-cols", "group,wave",
    ]
}

const TWO_PART_PARAMS: &str = r#"{"tau": 0.5, "gamma": [0.5, -0.4], "beta": [1.0, -0.8],
 "sigma": 0.4, "b0": [-1.0, 0.6], "b1": [-1.2, 1.3], "pi": [0.45, 0.55]}"#;

#[test]
fn simulate_replaces_outcomes_and_keeps_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("template.csv");
    write_template_csv(&template);
    let params = dir.path().join("params.json");
    fs::write(&params, TWO_PART_PARAMS).unwrap();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for (out, seed) in [(&out_a, "4"), (&out_b, "9")] {
        let run = bin(&simulate_args(
            params.to_str().unwrap(),
            template.to_str().unwrap(),
            out.to_str().unwrap(),
            seed,
        ));
        assert_eq!(exit_code(&run), 0, "stderr: {}", String::from_utf8_lossy(&run.stderr));
    }

    let a = read_lines(&out_a);
    let b = read_lines(&out_b);
    assert_eq!(a.len(), 13);
    assert_eq!(a[0], b[0]);
    let y_col = a[0].split(',').position(|h| h == "y").unwrap();
    let strip_y = |line: &String| {
        let mut fields: Vec<&str> = line.split(',').collect();
        fields[y_col] = "";
        fields.join(",")
    };
    let mut any_y_differs = false;
    for (ra, rb) in a[1..].iter().zip(&b[1..]) {
        assert_eq!(strip_y(ra), strip_y(rb), "covariates must not depend on the seed");
        any_y_differs |= ra != rb;
    }
    assert!(any_y_differs, "different seeds should change some outcome");
}

#[test]
fn simulate_ignores_zero_mass_components() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("template.csv");
    write_template_csv(&template);
    let padded = dir.path().join("padded.json");
    let single = dir.path().join("single.json");
    fs::write(
        &padded,
        r#"{"tau": 0.5, "gamma": [0.5, -0.4], "beta": [1.0, -0.8], "sigma": 0.4,
           "b0": [-1.0, 0.6], "b1": [-1.2, 1.3], "pi": [1.0, 0.0]}"#,
    )
    .unwrap();
    fs::write(
        &single,
        r#"{"tau": 0.5, "gamma": [0.5, -0.4], "beta": [1.0, -0.8], "sigma": 0.4,
           "b0": [-1.0], "b1": [-1.2], "pi": [1.0]}"#,
    )
    .unwrap();
    let out_padded = dir.path().join("padded.csv");
    let out_single = dir.path().join("single.csv");
    for (params, out) in [(&padded, &out_padded), (&single, &out_single)] {
        let run = bin(&simulate_args(
            params.to_str().unwrap(),
            template.to_str().unwrap(),
            out.to_str().unwrap(),
            "4",
        ));
        assert_eq!(exit_code(&run), 0, "stderr: {}", String::from_utf8_lossy(&run.stderr));
    }
    assert_eq!(fs::read(&out_padded).unwrap(), fs::read(&out_single).unwrap());
}

#[test]
fn simulate_rejects_bad_masses_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("template.csv");
    write_template_csv(&template);
    let params = dir.path().join("params.json");
    fs::write(
        &params,
        r#"{"tau": 0.5, "gamma": [0.5, -0.4], "beta": [1.0, -0.8], "sigma": 0.4,
           "b0": [-1.0, 0.6], "b1": [-1.2, 1.3], "pi": [0.5, 0.4]}"#,
    )
    .unwrap();
    let out = bin(&simulate_args(
        params.to_str().unwrap(),
        template.to_str().unwrap(),
        dir.path().join("out.csv").to_str().unwrap(),
        "4",
    ));
    assert_eq!(exit_code(&out), 2);
    assert_eq!(error_report(&out)["phase"], "config");
}

#[test]
fn simulate_missing_template_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.json");
    fs::write(&params, TWO_PART_PARAMS).unwrap();
    let out = bin(&simulate_args(
        params.to_str().unwrap(),
        dir.path().join("absent.csv").to_str().unwrap(),
        dir.path().join("out.csv").to_str().unwrap(),
        "4",
    ));
    assert_eq!(exit_code(&out), 3);
    assert_eq!(error_report(&out)["phase"], "data");
}
