//! Panel containers, validation and design assembly.
//!
//! A [`PanelDataset`] is the raw longitudinal table: units observed at one or
//! more occasions, each observation carrying a nonnegative outcome and the
//! covariate vectors of the two model parts. [`prepare`] validates it,
//! splits the outcome into its zero indicator and log-positive value, and
//! standardizes each covariate column; every fitting routine consumes the
//! resulting [`PreparedData`].

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

/// One occasion of one unit. `s` are the covariates of the occurrence
/// (zero/positive) part, `x` those of the positive-amount part.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub time: i64,
    pub y: f64,
    pub s: Vec<f64>,
    pub x: Vec<f64>,
}

/// All observations of one unit, in occasion order.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub observations: Vec<Observation>,
}

/// Raw longitudinal dataset plus the covariate names of both parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub units: Vec<UnitRecord>,
    pub binary_names: Vec<String>,
    pub positive_names: Vec<String>,
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_observations(&self) -> usize {
        self.units.iter().map(|u| u.observations.len()).sum()
    }
}

/// Column mapping for CSV ingestion.
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub unit: String,
    pub time: String,
    pub y: String,
    pub binary: Vec<String>,
    pub positive: Vec<String>,
}

/// Centering and scaling applied to one covariate column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub mean: f64,
    pub sd: f64,
}

/// Validated, design-ready data. Covariate matrices are stored row-major
/// and standardized column by column; `y_log` is NaN exactly where the
/// outcome is zero, so any accidental use of an undefined value surfaces as
/// a non-finite result instead of a silent number.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub n_units: usize,
    pub n_rows: usize,
    /// Occurrence-part design width.
    pub n_binary: usize,
    /// Positive-part design width.
    pub n_positive: usize,
    pub is_zero: Vec<bool>,
    pub y_log: Vec<f64>,
    /// Row-major `n_rows x n_binary`, standardized.
    pub s: Vec<f64>,
    /// Row-major `n_rows x n_positive`, standardized.
    pub x: Vec<f64>,
    /// `n_units + 1` offsets; unit `i` owns rows `unit_offsets[i]..unit_offsets[i+1]`.
    pub unit_offsets: Vec<usize>,
    /// Unit index of each row.
    pub row_unit: Vec<usize>,
    pub unit_ids: Vec<String>,
    pub times: Vec<i64>,
    pub s_scaling: Vec<Scaling>,
    pub x_scaling: Vec<Scaling>,
    pub binary_names: Vec<String>,
    pub positive_names: Vec<String>,
}

impl PreparedData {
    pub fn unit_rows(&self, unit: usize) -> Range<usize> {
        self.unit_offsets[unit]..self.unit_offsets[unit + 1]
    }

    pub fn s_row(&self, row: usize) -> &[f64] {
        &self.s[row * self.n_binary..(row + 1) * self.n_binary]
    }

    pub fn x_row(&self, row: usize) -> &[f64] {
        &self.x[row * self.n_positive..(row + 1) * self.n_positive]
    }

    pub fn n_positive_rows(&self) -> usize {
        self.is_zero.iter().filter(|z| !**z).count()
    }
}

/// Share of exact zeros among all observations (threshold-free: only
/// outcomes equal to 0.0 count).
pub fn zero_fraction(data: &PanelDataset) -> Result<f64> {
    let n = data.n_observations();
    if n == 0 {
        return Err(Error::Validation("dataset has no observations".into()));
    }
    let zeros = data
        .units
        .iter()
        .flat_map(|u| &u.observations)
        .filter(|o| o.y == 0.0)
        .count();
    Ok(zeros as f64 / n as f64)
}

/// [`prepare_with_zero_threshold`] with the default threshold of zero:
/// an observation is a zero exactly when `y == 0.0`.
pub fn prepare(data: &PanelDataset) -> Result<PreparedData> {
    prepare_with_zero_threshold(data, 0.0)
}

/// Validates and assembles the design. Outcomes with `|y| < delta` (or
/// `y == 0.0`) are treated as zeros; remaining outcomes must be positive and
/// are carried on the log scale. Covariate columns are standardized to mean
/// zero and unit sample standard deviation; constant columns are centered
/// and left unscaled.
pub fn prepare_with_zero_threshold(data: &PanelDataset, delta: f64) -> Result<PreparedData> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "zero threshold must be nonnegative and finite, got {delta}"
        )));
    }
    if data.units.is_empty() || data.n_observations() == 0 {
        return Err(Error::Validation("dataset has no observations".into()));
    }
    let m = data.binary_names.len();
    let p = data.positive_names.len();
    let n_rows = data.n_observations();

    let mut is_zero = Vec::with_capacity(n_rows);
    let mut y_log = Vec::with_capacity(n_rows);
    let mut s = Vec::with_capacity(n_rows * m);
    let mut x = Vec::with_capacity(n_rows * p);
    let mut unit_offsets = Vec::with_capacity(data.units.len() + 1);
    let mut row_unit = Vec::with_capacity(n_rows);
    let mut unit_ids = Vec::with_capacity(data.units.len());
    let mut times = Vec::with_capacity(n_rows);

    unit_offsets.push(0);
    for (i, unit) in data.units.iter().enumerate() {
        if unit.observations.is_empty() {
            return Err(Error::Validation(format!(
                "unit {} has no observations",
                unit.unit_id
            )));
        }
        for obs in &unit.observations {
            if obs.y.is_nan() || obs.y < 0.0 {
                return Err(Error::Validation(format!(
                    "outcome must be nonnegative, got {} for unit {} at time {}",
                    obs.y, unit.unit_id, obs.time
                )));
            }
            if obs.s.len() != m || obs.x.len() != p {
                return Err(Error::Validation(format!(
                    "covariate length mismatch for unit {} at time {}: expected {}+{}, got {}+{}",
                    unit.unit_id,
                    obs.time,
                    m,
                    p,
                    obs.s.len(),
                    obs.x.len()
                )));
            }
            for (names, vals) in [(&data.binary_names, &obs.s), (&data.positive_names, &obs.x)] {
                for (name, v) in names.iter().zip(vals.iter()) {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "covariate {} is not finite for unit {} at time {}",
                            name, unit.unit_id, obs.time
                        )));
                    }
                }
            }
            let zero = obs.y == 0.0 || obs.y.abs() < delta;
            is_zero.push(zero);
            y_log.push(if zero { f64::NAN } else { obs.y.ln() });
            s.extend_from_slice(&obs.s);
            x.extend_from_slice(&obs.x);
            row_unit.push(i);
            times.push(obs.time);
        }
        unit_offsets.push(is_zero.len());
        unit_ids.push(unit.unit_id.clone());
    }

    let s_scaling = standardize_columns(&mut s, n_rows, m);
    let x_scaling = standardize_columns(&mut x, n_rows, p);

    Ok(PreparedData {
        n_units: data.units.len(),
        n_rows,
        n_binary: m,
        n_positive: p,
        is_zero,
        y_log,
        s,
        x,
        unit_offsets,
        row_unit,
        unit_ids,
        times,
        s_scaling,
        x_scaling,
        binary_names: data.binary_names.clone(),
        positive_names: data.positive_names.clone(),
    })
}

fn standardize_columns(values: &mut [f64], n_rows: usize, n_cols: usize) -> Vec<Scaling> {
    let mut scalings = Vec::with_capacity(n_cols);
    for j in 0..n_cols {
        let mut mean = 0.0;
        for r in 0..n_rows {
            mean += values[r * n_cols + j];
        }
        mean /= n_rows as f64;
        let mut ss = 0.0;
        for r in 0..n_rows {
            let d = values[r * n_cols + j] - mean;
            ss += d * d;
        }
        let sd = if n_rows > 1 {
            (ss / (n_rows as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for r in 0..n_rows {
            let v = &mut values[r * n_cols + j];
            *v = (*v - mean) / sd;
        }
        scalings.push(Scaling { mean, sd });
    }
    scalings
}

/// Reads a longitudinal CSV with named columns into a [`PanelDataset`].
/// Units are grouped by the id column in order of first appearance; rows
/// keep their file order within each unit.
pub fn read_panel_csv<P: AsRef<Path>>(path: P, map: &ColumnMap) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("column {name} not found in CSV header")))
    };
    let unit_idx = find(&map.unit)?;
    let time_idx = find(&map.time)?;
    let y_idx = find(&map.y)?;
    let binary_idx: Vec<usize> = map.binary.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let positive_idx: Vec<usize> = map.positive.iter().map(|n| find(n)).collect::<Result<_>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_unit: HashMap<String, Vec<Observation>> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2; // header is line 1
        let unit = record
            .get(unit_idx)
            .ok_or_else(|| Error::Validation(format!("row {row}: missing unit id")))?
            .to_string();
        let parse = |idx: usize, what: &str| -> Result<f64> {
            let raw = record
                .get(idx)
                .ok_or_else(|| Error::Validation(format!("row {row}: missing {what}")))?;
            raw.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!("row {row}: cannot parse {what} value {raw:?}"))
            })
        };
        let time_val = parse(time_idx, "time")?;
        if time_val.fract() != 0.0 || !time_val.is_finite() {
            return Err(Error::Validation(format!(
                "row {row}: time must be integer-valued, got {time_val}"
            )));
        }
        let y = parse(y_idx, "outcome")?;
        let s = binary_idx
            .iter()
            .zip(&map.binary)
            .map(|(&idx, name)| parse(idx, name))
            .collect::<Result<Vec<f64>>>()?;
        let x = positive_idx
            .iter()
            .zip(&map.positive)
            .map(|(&idx, name)| parse(idx, name))
            .collect::<Result<Vec<f64>>>()?;
        if !by_unit.contains_key(&unit) {
            order.push(unit.clone());
        }
        by_unit.entry(unit).or_default().push(Observation {
            time: time_val as i64,
            y,
            s,
            x,
        });
    }

    if order.is_empty() {
        return Err(Error::Validation("CSV contains no data rows".into()));
    }

    Ok(PanelDataset {
        units: order
            .into_iter()
            .map(|unit_id| {
                let observations = by_unit.remove(&unit_id).unwrap_or_default();
                UnitRecord {
                    unit_id,
                    observations,
                }
            })
            .collect(),
        binary_names: map.binary.clone(),
        positive_names: map.positive.clone(),
    })
}

/// Writes a dataset in the same schema [`read_panel_csv`] ingests:
/// `unit_id,time,y` followed by the union of the two covariate blocks
/// (occurrence-part names first, then any additional positive-part names).
pub fn write_panel_csv<P: AsRef<Path>>(path: P, data: &PanelDataset) -> Result<()> {
    let mut cov_names: Vec<String> = data.binary_names.clone();
    let mut sources: Vec<(bool, usize)> = (0..data.binary_names.len())
        .map(|j| (true, j))
        .collect();
    for (j, name) in data.positive_names.iter().enumerate() {
        if !cov_names.contains(name) {
            cov_names.push(name.clone());
            sources.push((false, j));
        }
    }

    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["unit_id".to_string(), "time".to_string(), "y".to_string()];
    header.extend(cov_names.iter().cloned());
    writer.write_record(&header)?;
    for unit in &data.units {
        for obs in &unit.observations {
            let mut record = vec![
                unit.unit_id.clone(),
                obs.time.to_string(),
                format!("{}", obs.y),
            ];
            for &(from_s, j) in &sources {
                let v = if from_s { obs.s[j] } else { obs.x[j] };
                record.push(format!("{v}"));
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}
