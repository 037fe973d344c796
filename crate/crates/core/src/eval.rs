//! Accuracy, confusion matrix and per-class recall.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: String,
    pub true_label: usize,
    pub predicted: usize,
    pub probs: Vec<f32>,
}

impl Prediction {
    pub fn from_probs(path: impl Into<String>, true_label: usize, probs: Vec<f32>) -> Self {
        Self {
            path: path.into(),
            true_label,
            predicted: argmax(&probs),
            probs,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(invalid(
                "confusion",
                format!("pair ({truth}, {predicted}) outside {} classes", self.classes),
            ));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks_exact(self.classes)
    }
}

/// Accumulates `(true, predicted)` pairs.
pub fn confusion(pairs: impl IntoIterator<Item = (usize, usize)>, classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::zeros(classes);
    for (t, p) in pairs {
        m.add(t, p)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `trace / total`; 0 for an empty matrix.
    pub accuracy: f64,
    /// `diag / row sum` per class; `None` for classes with no samples.
    pub recalls: Vec<Option<f64>>,
}

pub fn summarize(matrix: &ConfusionMatrix) -> Summary {
    let total = matrix.total();
    let accuracy = if total == 0 {
        0.0
    } else {
        matrix.trace() as f64 / total as f64
    };
    let recalls = (0..matrix.classes())
        .map(|i| match matrix.row_sum(i) {
            0 => None,
            n => Some(matrix.get(i, i) as f64 / n as f64),
        })
        .collect();
    Summary { accuracy, recalls }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedSample {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    pub recalls: Vec<Option<f64>>,
    pub matrix: ConfusionMatrix,
    pub sample_count: usize,
    pub misclassified: Vec<String>,
    /// Samples that could not be evaluated; they are not in the matrix.
    pub failed: Vec<FailedSample>,
}

impl EvalReport {
    pub fn from_predictions(
        predictions: &[Prediction],
        failed: Vec<FailedSample>,
        class_names: &[String],
    ) -> Result<Self> {
        let matrix = confusion(
            predictions.iter().map(|p| (p.true_label, p.predicted)),
            class_names.len(),
        )?;
        let Summary { accuracy, recalls } = summarize(&matrix);
        Ok(Self {
            class_names: class_names.to_vec(),
            accuracy,
            recalls,
            sample_count: predictions.len(),
            misclassified: predictions
                .iter()
                .filter(|p| !p.is_correct())
                .map(|p| p.path.clone())
                .collect(),
            matrix,
            failed,
        })
    }

    /// Aligned plain-text rendering: the matrix, then accuracy and recalls,
    /// then misclassified paths one per line.
    pub fn render_text(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .chain(self.matrix.rows().flatten().map(|c| format!("{c}").len()))
            .max()
            .unwrap_or(1)
            .max("true\\pred".len());
        let mut s = String::new();
        let _ = write!(s, "{:>width$}", "true\\pred");
        for name in &self.class_names {
            let _ = write!(s, "  {name:>width$}");
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(self.matrix.rows()) {
            let _ = write!(s, "{name:>width$}");
            for c in row {
                let _ = write!(s, "  {c:>width$}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\naccuracy: {:.4} ({}/{})",
            self.accuracy,
            self.matrix.trace(),
            self.matrix.total()
        );
        for (name, r) in self.class_names.iter().zip(&self.recalls) {
            match r {
                Some(r) => {
                    let _ = writeln!(s, "recall {name}: {r:.4}");
                }
                None => {
                    let _ = writeln!(s, "recall {name}: n/a");
                }
            }
        }
        if !self.misclassified.is_empty() {
            s.push_str("\nmisclassified:\n");
            for p in &self.misclassified {
                s.push_str(p);
                s.push('\n');
            }
        }
        if !self.failed.is_empty() {
            s.push_str("\nfailed:\n");
            for f in &self.failed {
                let _ = writeln!(s, "{}: {}", f.path, f.reason);
            }
        }
        s
    }
}
