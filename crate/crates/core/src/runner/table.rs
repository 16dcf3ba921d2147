//! Comparison tables rendered from run results. Cells are formatted once,
//! so Markdown, CSV and JSON always carry the same numbers.

use std::path::Path;

use serde_json::{Map, Value};

use super::RunResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `5242880 -> "5.2M"`, `6.7e9 -> "6.7B"`, `4489 -> "4.5K"`.
pub fn format_params(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.1}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        n.to_string()
    }
}

fn acc(x: f64) -> String {
    format!("{x:.4}")
}

fn pp(x: f64) -> String {
    format!("{x:.2}")
}

impl Table {
    fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// One row per run: accounting, accuracies, weighted F1, gap and time.
    /// Failed runs keep their name and carry the error in the status column.
    pub fn comparison(results: &[RunResult]) -> Self {
        let mut t = Self::new(&[
            "Run",
            "Method",
            "Setting",
            "Trainable Params",
            "Best Val Acc",
            "Test Acc",
            "Test F1",
            "Val-Test Gap (pp)",
            "Time (s)",
            "Status",
        ]);
        for r in results {
            let time = r.timing.as_ref().map(|t| format!("{:.1}", t.wall_seconds)).unwrap_or_default();
            let row = match (&r.report, &r.error) {
                (Some(rep), None) => vec![
                    rep.name.clone(),
                    rep.method.clone(),
                    rep.setting.clone(),
                    format!("{} ({:.2}%)", format_params(rep.trainable_params), 100.0 * rep.trainable_fraction),
                    acc(rep.best_val_accuracy),
                    acc(rep.test_accuracy),
                    acc(rep.test_weighted_f1),
                    pp(rep.val_test_gap_pp),
                    time,
                    "ok".into(),
                ],
                (_, err) => {
                    let mut row = vec![r.name.clone()];
                    row.extend(std::iter::repeat_n(String::new(), 7));
                    row.push(time);
                    row.push(format!("failed: {}", err.as_deref().unwrap_or("incomplete run")));
                    row
                }
            };
            t.rows.push(row);
        }
        t
    }

    /// Validation and test accuracy with their difference, for completed
    /// runs.
    pub fn gaps(results: &[RunResult]) -> Self {
        let mut t = Self::new(&["Run", "Method", "Setting", "Val Acc", "Test Acc", "Val-Test Gap (pp)"]);
        for rep in results.iter().filter(|r| r.is_ok()).filter_map(|r| r.report.as_ref()) {
            t.rows.push(vec![
                rep.name.clone(),
                rep.method.clone(),
                rep.setting.clone(),
                acc(rep.val_accuracy),
                acc(rep.test_accuracy),
                pp(rep.val_test_gap_pp),
            ]);
        }
        t
    }

    /// A two-column key/value table.
    pub fn key_values(headers: [&str; 2], rows: Vec<(String, String)>) -> Self {
        let mut t = Self::new(&headers);
        t.rows = rows.into_iter().map(|(k, v)| vec![k, v]).collect();
        t
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|");
        let mut out = format!("| {} |\n", self.headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | "));
        out += &format!("|{}\n", "---|".repeat(self.headers.len()));
        for row in &self.rows {
            out += &format!("| {} |\n", row.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// Array of objects keyed by header.
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let m: Map<String, Value> = self
                        .headers
                        .iter()
                        .zip(row)
                        .map(|(h, c)| (h.clone(), Value::String(c.clone())))
                        .collect();
                    Value::Object(m)
                })
                .collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
