//! CSV and JSON ingestion and emission.
//!
//! Inputs carry a header row. Numbers are written in shortest round-trip
//! scientific notation so identical runs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coherence::{PulseSequence, VisibilityDataset};
use crate::error::{Error, Result};
use crate::fitters::{ElectronState, Samples, SidebandSpectrum};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Reads a headed numeric CSV. Every malformed data row (1-based) is
/// reported in a single schema error.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv { path: path.display().to_string(), message: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Schema { path: path.display().to_string(), message: "missing header".into(), rows: vec![] });
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let Ok(rec) = rec else {
            bad.push(row);
            continue;
        };
        if rec.len() != headers.len() {
            bad.push(row);
            continue;
        }
        let vals: Option<Vec<f64>> = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match vals {
            Some(v) => rows.push(v),
            None => bad.push(row),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Schema {
            path: path.display().to_string(),
            message: format!("expected {} finite numeric fields per row", headers.len()),
            rows: bad,
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema { path: path.display().to_string(), message: "no data rows".into(), rows: vec![] });
    }
    Ok(Table { headers, rows })
}

fn sigma_column(table: &Table, path: &Path, j: usize, warnings: &mut Vec<String>) -> Result<Option<Vec<f64>>> {
    if table.headers.len() <= j {
        warnings.push(format!("{}: no sigma column; fit is unweighted", path.display()));
        return Ok(None);
    }
    let bad: Vec<usize> = table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r[j] > 0.0))
        .map(|(i, _)| i + 1)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Schema {
            path: path.display().to_string(),
            message: "sigma must be positive".into(),
            rows: bad,
        });
    }
    Ok(Some(table.rows.iter().map(|r| r[j]).collect()))
}

/// Generic `(x, y[, sigma])` series. Column names are free; order matters.
pub fn read_samples(path: &Path) -> Result<(Samples, Vec<String>)> {
    let table = read_table(path)?;
    if !(2..=3).contains(&table.headers.len()) {
        return Err(Error::Schema {
            path: path.display().to_string(),
            message: format!("expected columns x, y[, sigma]; found {:?}", table.headers),
            rows: vec![],
        });
    }
    let mut warnings = Vec::new();
    let sigma = sigma_column(&table, path, 2, &mut warnings)?;
    let x = table.rows.iter().map(|r| r[0]).collect();
    let y = table.rows.iter().map(|r| r[1]).collect();
    Ok((Samples::new(x, y, sigma)?, warnings))
}

/// Sidecar describing a visibility trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilitySidecar {
    pub sequence: PulseSequence,
    pub omega_e_hz: f64,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Visibility trace `tau_s, visibility[, sigma]` plus its `.json` sidecar.
pub fn read_visibility(path: &Path) -> Result<(VisibilityDataset, Vec<String>)> {
    let table = read_table(path)?;
    let expect = ["tau_s", "visibility", "sigma"];
    let n = table.headers.len();
    if !(2..=3).contains(&n) || table.headers.iter().zip(expect).any(|(h, e)| h != e) {
        return Err(Error::Schema {
            path: path.display().to_string(),
            message: format!("expected header tau_s,visibility[,sigma]; found {:?}", table.headers),
            rows: vec![],
        });
    }
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let meta: VisibilitySidecar = serde_json::from_str(&text)?;
    let mut warnings = Vec::new();
    let sigma = sigma_column(&table, path, 2, &mut warnings)?;
    Ok((
        VisibilityDataset {
            omega_e: meta.omega_e_hz,
            sequence: meta.sequence,
            t: table.rows.iter().map(|r| r[0]).collect(),
            w: table.rows.iter().map(|r| r[1]).collect(),
            sigma,
        },
        warnings,
    ))
}

/// Sideband spectrum in long form: `detuning_hz, counts` for a single
/// profile or `detuning_hz, time_s, counts` for a full grid.
pub fn read_spectrum(path: &Path, state: ElectronState) -> Result<SidebandSpectrum> {
    let table = read_table(path)?;
    let schema = |message: String, rows: Vec<usize>| Error::Schema { path: path.display().to_string(), message, rows };
    let h: Vec<&str> = table.headers.iter().map(String::as_str).collect();
    match h.as_slice() {
        ["detuning_hz", "counts"] => {
            let mut rows: Vec<(usize, &Vec<f64>)> = table.rows.iter().enumerate().collect();
            rows.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
            let dup: Vec<usize> = rows.windows(2).filter(|w| w[0].1[0] == w[1].1[0]).map(|w| w[1].0 + 1).collect();
            if !dup.is_empty() {
                return Err(schema("duplicate detuning".into(), dup));
            }
            SidebandSpectrum::from_profile(
                rows.iter().map(|r| r.1[0]).collect(),
                rows.iter().map(|r| r.1[1]).collect(),
                state,
            )
        }
        ["detuning_hz", "time_s", "counts"] => {
            let mut det: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
            let mut times: Vec<f64> = table.rows.iter().map(|r| r[1]).collect();
            det.sort_by(f64::total_cmp);
            det.dedup();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let mut counts = vec![f64::NAN; det.len() * times.len()];
            let mut dup = Vec::new();
            for (i, r) in table.rows.iter().enumerate() {
                let a = det.partition_point(|v| *v < r[0]);
                let b = times.partition_point(|v| *v < r[1]);
                let cell = &mut counts[a * times.len() + b];
                if !cell.is_nan() {
                    dup.push(i + 1);
                }
                *cell = r[2];
            }
            if !dup.is_empty() {
                return Err(schema("duplicate (detuning, time) cell".into(), dup));
            }
            if counts.iter().any(|c| c.is_nan()) {
                return Err(schema("detuning-time grid is incomplete".into(), vec![]));
            }
            SidebandSpectrum::new(det, times, counts, state)
        }
        _ => Err(schema(
            format!("expected header detuning_hz[,time_s],counts; found {:?}", table.headers),
            vec![],
        )),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_csv(path: &Path, headers: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv { path: path.display().to_string(), message: e.to_string() };
    w.write_record(headers).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| fmt(*v))).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv { path: path.display().to_string(), message: e.to_string() })?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// `foo.csv` -> `foo.meta.json`.
pub fn metadata_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}
