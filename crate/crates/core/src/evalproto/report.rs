//! Evaluation report export: one JSON file carrying the full config echo and
//! every curve, plus a flat CSV view of the same points.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured point. `policy` and `seed_count` describe how the point was
/// produced ("none"/1 for plain sweeps, "random"/k for a k-seed average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub value: f64,
    pub policy: String,
    pub seed_count: usize,
}

impl CurvePoint {
    /// A point from a sweep with no rejection policy attached.
    pub fn plain(x: f64, value: f64) -> Self {
        Self {
            x,
            value,
            policy: "none".to_string(),
            seed_count: 1,
        }
    }
}

/// A named series of points over one x axis (e.g. "coverage" or "far").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x_kind: String,
    pub points: Vec<CurvePoint>,
}

/// A full evaluation report: the configuration that produced it and all
/// measured curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub curves: Vec<Curve>,
}

pub const CSV_HEADER: &str = "curve,x_kind,x,value,policy,seed_count";

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid_config(format!("{what} must not be empty")));
    }
    if value.contains([',', '"', '\n', '\r']) {
        return Err(Error::invalid_config(format!(
            "{what} {value:?} contains CSV structure characters"
        )));
    }
    Ok(())
}

fn check_finite(x: f64, what: &str) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::invalid_config(format!("{what} must be finite, got {x}")));
    }
    Ok(())
}

/// Writes `report` as pretty JSON at `json_path` and as CSV rows at
/// `csv_path`. Both files are deterministic functions of the report and end
/// with a single LF.
pub fn export_report(report: &Report, json_path: &Path, csv_path: &Path) -> Result<()> {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for curve in &report.curves {
        check_field(&curve.name, "curve name")?;
        check_field(&curve.x_kind, "x_kind")?;
        for point in &curve.points {
            check_field(&point.policy, "policy")?;
            check_finite(point.x, "x")?;
            check_finite(point.value, "value")?;
            csv.push_str(&format!(
                "{},{},{:.8e},{:.8e},{},{}\n",
                curve.name, curve.x_kind, point.x, point.value, point.policy, point.seed_count
            ));
        }
    }
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(format!("report json: {e}")))?;
    json.push('\n');
    fs::write(json_path, json)?;
    fs::write(csv_path, csv)?;
    Ok(())
}

/// Reads back a JSON report written by [`export_report`].
pub fn read_report(json_path: &Path) -> Result<Report> {
    let raw = fs::read_to_string(json_path)?;
    serde_json::from_str(&raw).map_err(|e| Error::format(format!("report json: {e}")))
}
