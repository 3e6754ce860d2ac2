//! Run reports: one JSON object per line plus a flat CSV summary table.
//!
//! Reports hold only deterministic content. Wall-clock timings are kept in
//! [`Timing`] and written to a separate file so that identical runs produce
//! byte-identical report JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRecord {
    Config {
        command: String,
        seed: u64,
        config: serde_json::Value,
    },
    Fold {
        fold: usize,
        train_size: usize,
        valid_size: usize,
        test_size: usize,
        epochs_run: usize,
        best_epoch: usize,
        best_valid_loss: f64,
        checkpoint: Option<String>,
        history: Option<String>,
    },
    Downstream {
        fold: usize,
        seed_index: usize,
        balanced_accuracy: f64,
    },
    Tc {
        fold: usize,
        tc: f64,
        jitter: f64,
        source: String,
        n_samples: usize,
    },
    Mask {
        dropped: usize,
        n_subsets: usize,
        values: Vec<f64>,
        mean: f64,
        std: f64,
    },
    Sweep {
        k: usize,
        mean: f64,
        std: f64,
        improvement: f64,
    },
    Summary {
        metric: String,
        values: Vec<f64>,
        mean: f64,
        std: f64,
    },
}

/// Mean and sample standard deviation (divisor `n − 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<ReportRecord>,
}

impl RunReport {
    pub fn push(&mut self, r: ReportRecord) {
        self.records.push(r);
    }

    /// Appends a summary record computed from `values`.
    pub fn summarize(&mut self, metric: &str, values: Vec<f64>) -> (f64, f64) {
        let (mean, std) = mean_std(&values);
        self.push(ReportRecord::Summary {
            metric: metric.to_string(),
            values,
            mean,
            std,
        });
        (mean, std)
    }

    pub fn summary(&self, metric: &str) -> Option<(f64, f64)> {
        self.records.iter().find_map(|r| match r {
            ReportRecord::Summary { metric: m, mean, std, .. } if m == metric => Some((*mean, *std)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `kind,key,mean,std,n` rows for summaries, mask rows and sweep rows.
    pub fn write_table_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["kind", "key", "mean", "std", "n"])?;
        for r in &self.records {
            let row = match r {
                ReportRecord::Summary { metric, values, mean, std } => {
                    Some(("summary", metric.clone(), *mean, *std, values.len()))
                }
                ReportRecord::Mask { dropped, values, mean, std, .. } => {
                    Some(("mask", format!("dropped={dropped}"), *mean, *std, values.len()))
                }
                ReportRecord::Sweep { k, mean, std, .. } => Some(("sweep", format!("k={k}"), *mean, *std, 0)),
                _ => None,
            };
            if let Some((kind, key, mean, std, n)) = row {
                w.write_record([kind.to_string(), key, mean.to_string(), std.to_string(), n.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Wall-clock timings, kept out of the deterministic report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub entries: Vec<(String, f64)>,
}

impl Timing {
    pub fn record(&mut self, label: impl Into<String>, seconds: f64) {
        self.entries.push((label.into(), seconds));
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut r = RunReport::default();
        r.push(ReportRecord::Config {
            command: "train".into(),
            seed: 3,
            config: serde_json::json!({"m": 4}),
        });
        r.summarize("balanced_accuracy", vec![0.1, 0.7, 1.0 / 3.0]);
        let text = r.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"kind\":\"config\""));
        assert_eq!(RunReport::from_jsonl(&text).unwrap(), r);
    }
}
