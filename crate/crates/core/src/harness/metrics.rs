//! Per-epoch metrics, accuracy and the comparison report.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "split", "loss", "accuracy", "wall_time_s"];

/// Writes records sorted by `(epoch, split)`. Floats use Rust's shortest
/// round-trip formatting, so reading the file back is exact.
pub fn write_metrics_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.epoch, r.split));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in &sorted {
        w.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.wall_time_s.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Dataset(format!("{}: unexpected metrics header", path.display())));
    }
    let bad = |what: &str| Error::Dataset(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(MetricsRecord {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            split: rec[1].parse()?,
            loss: rec[2].parse().map_err(|_| bad("loss"))?,
            accuracy: rec[3].parse().map_err(|_| bad("accuracy"))?,
            wall_time_s: rec[4].parse().map_err(|_| bad("wall_time_s"))?,
        });
    }
    Ok(out)
}

/// Predictions for every sample, in sample order.
pub fn predict_all(model: &dyn Classifier, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.par_iter().map(|s| model.predict(&s.image)).collect()
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_accuracy(model: &dyn Classifier, samples: &[Sample]) -> Result<f64> {
    let predicted = predict_all(model, samples)?;
    Ok(accuracy_of(&predicted, samples.iter().map(|s| s.label)))
}

pub fn accuracy_of(predicted: &[usize], labels: impl IntoIterator<Item = usize>) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, l) in predicted.iter().zip(labels) {
        total += 1;
        correct += usize::from(*p == l);
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// `matrix[label][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p < classes && l < classes {
            m[l][p] += 1;
        }
    }
    m
}

/// One row of the comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dataset: String,
    pub classes: usize,
    pub instances: usize,
    pub algorithm: String,
    /// Total training wall time of the run, in seconds.
    pub avg_training_time: f64,
    pub test_accuracy: f64,
}

pub const RESULTS_HEADER: [&str; 6] = [
    "dataset",
    "classes",
    "instances",
    "algorithm",
    "avg_training_time",
    "test_accuracy",
];

/// `0.953 -> "95.3%"`.
pub fn format_accuracy(accuracy: f64) -> String {
    format!("{:.1}%", accuracy * 100.0)
}

pub fn format_duration(seconds: f64) -> String {
    if seconds < 60.0 {
        format!("{seconds:.1} s")
    } else if seconds < 3600.0 {
        format!("{:.1} min", seconds / 60.0)
    } else {
        format!("{:.1} h", seconds / 3600.0)
    }
}

fn row(s: &RunSummary) -> [String; 6] {
    [
        s.dataset.clone(),
        s.classes.to_string(),
        s.instances.to_string(),
        s.algorithm.clone(),
        format_duration(s.avg_training_time),
        format_accuracy(s.test_accuracy),
    ]
}

pub fn write_results_table(runs: &[RunSummary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for s in runs {
        w.write_record(row(s))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// The same table as Markdown, for terminals and READMEs.
pub fn results_markdown(runs: &[RunSummary]) -> String {
    let mut out = format!("| {} |\n|{}\n", RESULTS_HEADER.join(" | "), "---|".repeat(RESULTS_HEADER.len()));
    for s in runs {
        out.push_str(&format!("| {} |\n", row(s).join(" | ")));
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy_of(&[1, 2, 3], [1, 2, 3]), 1.0);
        assert_eq!(accuracy_of(&[0, 1], [0, 0]), 0.5);
        let pred = [0, 1, 1, 2, 2, 0];
        let labels = [0, 1, 2, 2, 1, 0];
        let m = confusion_matrix(&pred, &labels, 3);
        let trace: usize = (0..3).map(|i| m[i][i]).sum();
        assert_eq!(trace as f64 / 6.0, accuracy_of(&pred, labels));
    }

    #[test]
    fn metrics_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "epoch,split,loss,accuracy,wall_time_s\n");
        let recs = vec![
            MetricsRecord { epoch: 2, split: Split::Validation, loss: 0.1 + 0.2, accuracy: 0.75, wall_time_s: 0.0 },
            MetricsRecord { epoch: 1, split: Split::Train, loss: 1.0 / 3.0, accuracy: 0.5, wall_time_s: 1.25 },
            MetricsRecord { epoch: 2, split: Split::Train, loss: 2.5e-9, accuracy: 1.0, wall_time_s: 0.5 },
        ];
        write_metrics_csv(&recs, &path).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, vec![recs[1], recs[2], recs[0]]);
    }

    #[test]
    fn results_table_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let run = RunSummary {
            dataset: "yale".into(),
            classes: 38,
            instances: 5850,
            algorithm: "fisherfaces".into(),
            avg_training_time: 4.2,
            test_accuracy: 0.953,
        };
        write_results_table(&[run], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,classes,instances,algorithm,avg_training_time,test_accuracy");
        assert_eq!(lines[1], "yale,38,5850,fisherfaces,4.2 s,95.3%");
        assert_eq!(format_accuracy(0.9987), "99.9%");
    }
}
