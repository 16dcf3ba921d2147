//! Classification metrics: confusion matrices, per-class and support-weighted
//! precision/recall/F1, class-imbalance ratios, the validation–test gap and
//! inference throughput.
//!
//! Any ratio with a zero denominator is defined as 0.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TensorSet;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Scalar;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Row sums: the number of samples whose true class is `i`.
    pub fn supports(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted_totals(&self) -> Vec<u64> {
        let c = self.num_classes();
        (0..c).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Adds another grid over the same classes; used to combine shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::Data("cannot merge confusion matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Tallies `(label, pred)` pairs. Errors on a length mismatch or an index
/// outside `class_names`.
pub fn confusion(preds: &[usize], labels: &[usize], class_names: &[String]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape("confusion", &[preds.len()], &[labels.len()]));
    }
    let c = class_names.len();
    let mut cm = ConfusionMatrix::zeros(class_names.to_vec());
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= c || t >= c {
            return Err(Error::Index(format!("class index {} with {c} classes", p.max(t))));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

/// `Σ support·value / Σ support`, or 0 when every support is zero.
pub fn weighted_average(values: &[f64], supports: &[u64]) -> f64 {
    let total: u64 = supports.iter().sum();
    let s: f64 = values.iter().zip(supports).map(|(v, &n)| v * n as f64).sum();
    ratio(s, total as f64)
}

impl ClassReport {
    /// Aggregates already-computed per-class rows. Accuracy is taken as the
    /// weighted recall, which is the same quantity for single-label data.
    pub fn from_per_class(per_class: Vec<ClassMetrics>) -> Self {
        let supports: Vec<u64> = per_class.iter().map(|m| m.support).collect();
        let pick = |f: fn(&ClassMetrics) -> f64| -> Vec<f64> { per_class.iter().map(f).collect() };
        let weighted_precision = weighted_average(&pick(|m| m.precision), &supports);
        let weighted_recall = weighted_average(&pick(|m| m.recall), &supports);
        let weighted_f1 = weighted_average(&pick(|m| m.f1), &supports);
        Self {
            per_class,
            accuracy: weighted_recall,
            weighted_precision,
            weighted_recall,
            weighted_f1,
        }
    }
}

pub fn report(cm: &ConfusionMatrix) -> ClassReport {
    let supports = cm.supports();
    let predicted = cm.predicted_totals();
    let per_class = (0..cm.num_classes())
        .map(|i| {
            let tp = cm.counts[i][i] as f64;
            let precision = ratio(tp, predicted[i] as f64);
            let recall = ratio(tp, supports[i] as f64);
            ClassMetrics {
                name: cm.class_names[i].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: supports[i],
            }
        })
        .collect();
    let mut r = ClassReport::from_per_class(per_class);
    r.accuracy = ratio(cm.trace() as f64, cm.total() as f64);
    r
}

/// Each row divided by its sum; rows with no samples stay zero.
pub fn row_normalize(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&v| ratio(v as f64, s as f64)).collect()
        })
        .collect()
}

/// Each support divided by the smallest one.
pub fn imbalance_table(supports: &[u64]) -> Result<Vec<f64>> {
    let min = *supports.iter().min().ok_or_else(|| Error::Data("no class supports given".into()))?;
    if min == 0 {
        return Err(Error::Data("a class has zero support".into()));
    }
    Ok(supports.iter().map(|&s| s as f64 / min as f64).collect())
}

/// Validation minus test accuracy, in percentage points.
pub fn val_test_gap(val_acc: f64, test_acc: f64) -> f64 {
    (val_acc - test_acc) * 100.0
}

/// Rounds half away from zero to `dp` decimal places, the precision used in
/// printed tables (4 for accuracies, 2 for percentage points).
pub fn round_to(x: f64, dp: i32) -> f64 {
    let k = 10f64.powi(dp);
    (x * k).round() / k
}

/// Accuracy of the samples carrying each source tag.
pub fn source_accuracy(preds: &[usize], labels: &[usize], sources: &[String]) -> BTreeMap<String, f64> {
    let mut tally: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for ((p, l), s) in preds.iter().zip(labels).zip(sources) {
        let e = tally.entry(s.clone()).or_default();
        e.0 += u64::from(p == l);
        e.1 += 1;
    }
    tally.into_iter().map(|(k, (c, n))| (k, ratio(c as f64, n as f64))).collect()
}

/// Everything written to a JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub sources: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(preds: &[usize], labels: &[usize], sources: &[String], class_names: &[String]) -> Result<Self> {
        let cm = confusion(preds, labels, class_names)?;
        let r = report(&cm);
        Ok(Self {
            per_class: r.per_class,
            accuracy: r.accuracy,
            weighted_precision: r.weighted_precision,
            weighted_recall: r.weighted_recall,
            weighted_f1: r.weighted_f1,
            confusion: cm.counts,
            sources: source_accuracy(preds, labels, sources),
        })
    }

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            class_names: self.per_class.iter().map(|m| m.name.clone()).collect(),
            counts: self.confusion.clone(),
        }
    }

    /// Long-format `(metric, class, value)` rows carrying the same numbers
    /// as the JSON form. Confusion cells use `true->pred` as the class key.
    pub fn csv_rows(&self) -> Vec<(String, String, String)> {
        let mut rows = Vec::new();
        for m in &self.per_class {
            rows.push(("precision".into(), m.name.clone(), m.precision.to_string()));
            rows.push(("recall".into(), m.name.clone(), m.recall.to_string()));
            rows.push(("f1".into(), m.name.clone(), m.f1.to_string()));
            rows.push(("support".into(), m.name.clone(), m.support.to_string()));
        }
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("weighted_precision", self.weighted_precision),
            ("weighted_recall", self.weighted_recall),
            ("weighted_f1", self.weighted_f1),
        ] {
            rows.push((k.into(), String::new(), v.to_string()));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let key = format!("{}->{}", self.per_class[i].name, self.per_class[j].name);
                rows.push(("confusion".into(), key, v.to_string()));
            }
        }
        for (tag, acc) in &self.sources {
            rows.push(("source_accuracy".into(), tag.clone(), acc.to_string()));
        }
        rows
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["metric", "class", "value"]).map_err(|e| csv_err(path, e))?;
        for (a, b, c) in self.csv_rows() {
            w.write_record([a, b, c]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub samples: usize,
    pub batch_size: usize,
    pub total_seconds: f64,
    /// Images per second.
    pub throughput: f64,
    /// Milliseconds per image.
    pub latency_ms: f64,
}

impl EfficiencyReport {
    pub fn from_timing(samples: usize, batch_size: usize, total_seconds: f64) -> Self {
        let throughput = ratio(samples as f64, total_seconds);
        Self {
            samples,
            batch_size,
            total_seconds,
            throughput,
            latency_ms: ratio(1000.0, throughput),
        }
    }
}

/// Times eval-mode forward passes over all of `set` in batches of `batch`.
///
/// Batches are gathered before the clock starts, so only the model is timed.
/// One untimed batch runs first to warm caches and the thread pool; the
/// timed batches then run in parallel to saturate the machine.
pub fn measure_efficiency<T: Scalar>(model: &Model<T>, set: &TensorSet<T>, batch: usize) -> Result<EfficiencyReport> {
    if set.is_empty() {
        return Err(Error::Data("efficiency measurement needs a non-empty split".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let batches: Vec<_> = idx.chunks(batch).map(|c| set.gather(c)).collect::<Result<_>>()?;
    model.predict(&batches[0])?;
    let start = Instant::now();
    batches.par_iter().try_for_each(|x| model.predict(x).map(drop))?;
    let secs = start.elapsed().as_secs_f64();
    Ok(EfficiencyReport::from_timing(set.len(), batch, secs))
}

#[cfg(test)]
mod tests;
