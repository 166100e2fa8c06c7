//! The report verb: collects every stored scenario result under one output
//! directory into a readable text summary and a flat CSV of arm means.

use std::fs;
use std::fmt::Write as _;
use std::path::PathBuf;

use cmce_core::Result;

use crate::pipeline::Workspace;
use crate::scenario::{read_scenario_result, ScenarioResult};

#[derive(Debug, Clone)]
pub struct Summary {
    pub scenarios: Vec<ScenarioResult>,
}

/// Reads every `scenarios/<name>/result.json` under the workspace, in
/// scenario name order.
pub fn collect(ws: &Workspace) -> Result<Summary> {
    let dir = ws.root().join("scenarios");
    let mut result_files = Vec::new();
    if dir.exists() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path().join("result.json");
            if path.exists() {
                result_files.push(path);
            }
        }
    }
    result_files.sort();
    let scenarios = result_files
        .iter()
        .map(|p| read_scenario_result(p))
        .collect::<Result<_>>()?;
    Ok(Summary { scenarios })
}

pub fn render_text(summary: &Summary) -> String {
    if summary.scenarios.is_empty() {
        return "no scenario results found\n".to_string();
    }
    let mut out = String::new();
    for sc in &summary.scenarios {
        let replicates = sc.arms.first().map(|a| a.seeds.len()).unwrap_or(0);
        let _ = writeln!(
            out,
            "scenario {} ({} arms, {} replicates, config {})",
            sc.scenario,
            sc.arms.len(),
            replicates,
            &sc.config_hash[..12.min(sc.config_hash.len())]
        );
        for arm in &sc.arms {
            let means: Vec<String> = arm
                .means
                .iter()
                .map(|(k, v)| format!("{k}={v:.6}"))
                .collect();
            let _ = writeln!(out, "  {:<18} {}", arm.arm, means.join("  "));
        }
    }
    out
}

/// Writes `reports/summary.csv`: one row per (scenario, arm, metric) mean.
pub fn write_summary(ws: &Workspace, summary: &Summary) -> Result<PathBuf> {
    let dir = ws.reports_dir()?;
    let path = dir.join("summary.csv");
    let mut out = String::from("scenario,arm,x,metric,mean,replicates\n");
    for sc in &summary.scenarios {
        for arm in &sc.arms {
            for (metric, mean) in &arm.means {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.8e},{}",
                    sc.scenario,
                    arm.arm,
                    arm.x,
                    metric,
                    mean,
                    arm.seeds.len()
                );
            }
        }
    }
    fs::write(&path, out)?;
    Ok(path)
}
