//! Per-fold metric reports: JSON summary plus a per-fold CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::fold_ttest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub metric: String,
    pub fold_values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub p_values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let s = if values.len() > 1 {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

impl MetricReport {
    pub fn new(experiment: impl Into<String>, metric: impl Into<String>, fold_values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&fold_values);
        MetricReport {
            experiment: experiment.into(),
            metric: metric.into(),
            fold_values,
            mean,
            std,
            p_values: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Records the fold-level Welch p-value against another arm.
    pub fn compare(&mut self, other: &MetricReport) -> Result<f64> {
        let p = fold_ttest(&self.fold_values, &other.fold_values)?;
        self.p_values.insert(other.experiment.clone(), p);
        Ok(p)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,fold,metric,value\n");
        for (i, v) in self.fold_values.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:?}\n", self.experiment, i, self.metric, v));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Writes several reports as one JSON array and one CSV.
pub fn save_reports(reports: &[MetricReport], json: &Path, csv: &Path) -> Result<()> {
    fs::write(json, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(json, e))?;
    let mut out = String::from("experiment,fold,metric,value\n");
    for r in reports {
        out.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    fs::write(csv, out).map_err(|e| Error::io(csv, e))
}
