//! Run summaries and their CSV/JSON renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::{nan_from_null, ReplicaSummary, TrendReport, Verdict};

/// One scalar check: an estimate compared with a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub estimate: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub se: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub target: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub z: f64,
    pub pass: bool,
}

impl CheckLine {
    /// Pass when the estimate lies within `n_se` standard errors of the target.
    pub fn z_test(name: impl Into<String>, estimate: f64, se: f64, target: f64, n_se: f64) -> Self {
        let z = if se > 0.0 { (estimate - target) / se } else if estimate == target { 0.0 } else { f64::INFINITY };
        Self { name: name.into(), estimate, se, target, z, pass: z.abs() <= n_se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub model: String,
    pub seed: u64,
    pub replicas: usize,
    pub checkpoints: Vec<f64>,
    pub constants: BTreeMap<String, f64>,
    /// Series the trend and plot data refer to.
    pub primary_series: String,
    pub target: Option<f64>,
    pub summary: Option<ReplicaSummary>,
    pub trend: Option<TrendReport>,
    pub checks: Vec<CheckLine>,
    /// None when no verdict applies (e.g. too few replicas for a trend).
    pub verdict: Option<Verdict>,
    pub notes: Vec<String>,
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Shortest round-trip rendering; `inf` and `NaN` for non-finite values.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// CSV text with a header row.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s += &r.join(",");
        s.push('\n');
    }
    s
}

pub const PLOT_HEADER: &str = "x,series,value";
pub const PLOT_SERIES: [&str; 7] = ["mean", "median", "q05", "q25", "q75", "q95", "target"];

/// Long-format plot data: one row per (checkpoint, series) for the primary
/// series, with the target as a constant series when there is one.
pub fn emit_plot_data(summary: &RunSummary) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    let Some(rs) = &summary.summary else { return out };
    let Some(series) = rs.series.iter().find(|s| s.name == summary.primary_series) else { return out };
    for (x, p) in rs.checkpoints.iter().zip(&series.points) {
        let values = [p.mean, p.median, p.q05, p.q25, p.q75, p.q95, summary.target.unwrap_or(f64::NAN)];
        for (name, v) in PLOT_SERIES.iter().zip(values) {
            if *name == "target" && summary.target.is_none() {
                continue;
            }
            let _ = writeln!(out, "{},{},{}", fmt_f64(*x), name, fmt_f64(v));
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::replica_summary;

    fn sample() -> RunSummary {
        let values = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]];
        RunSummary {
            experiment: "demo".into(),
            model: "m".into(),
            seed: 1,
            replicas: 2,
            checkpoints: vec![1.0, 2.0],
            constants: BTreeMap::new(),
            primary_series: "ratio".into(),
            target: Some(1.0),
            summary: Some(replica_summary(&["ratio"], &[1.0, 2.0], &values).unwrap()),
            trend: None,
            checks: vec![],
            verdict: None,
            notes: vec![],
        }
    }

    #[test]
    fn plot_rows_and_header() {
        let text = emit_plot_data(&sample());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PLOT_HEADER);
        assert_eq!(lines.len(), 1 + 2 * PLOT_SERIES.len());
        let targets: Vec<&str> = lines.iter().filter(|l| l.contains(",target,")).copied().collect();
        assert_eq!(targets, ["1,target,1", "2,target,1"]);
        let mut no_target = sample();
        no_target.target = None;
        assert_eq!(emit_plot_data(&no_target).lines().count(), 1 + 2 * (PLOT_SERIES.len() - 1));
    }

    #[test]
    fn json_round_trip() {
        let s = sample();
        assert_eq!(RunSummary::from_json(&s.to_json().unwrap()).unwrap(), s);
        let mut flagged = sample();
        flagged.checks.push(CheckLine::z_test("nan", f64::NAN, 0.1, 1.0, 3.0));
        let back = RunSummary::from_json(&flagged.to_json().unwrap()).unwrap();
        assert!(back.checks[0].estimate.is_nan() && !back.checks[0].pass);
    }

    #[test]
    fn z_test_edges() {
        assert!(CheckLine::z_test("a", 1.0, 0.0, 1.0, 3.0).pass);
        assert!(!CheckLine::z_test("b", 1.0, 0.0, 2.0, 3.0).pass);
        assert_eq!(CheckLine::z_test("c", 1.3, 0.1, 1.0, 3.0).z, 3.0000000000000004);
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(csv(&["a", "b"], &[vec!["1".into(), "2".into()]]), "a,b\n1,2\n");
    }
}
