use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro metrics from a `[K, K]` confusion matrix (rows are true classes).
pub fn compute_metrics(confusion: &[Vec<u64>], classes: &[String]) -> Result<ClassificationReport> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::shape("compute_metrics", format!("confusion matrix is not square ({k} rows)")));
    }
    if classes.len() != k {
        return Err(Error::ClassMismatch(format!("{} names for {k} classes", classes.len())));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Empty("confusion matrix is all zero".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        classes: classes.to_vec(),
        accuracy: ratio((0..k).map(|c| confusion[c][c]).sum(), total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: confusion.to_vec(),
    })
}

impl ClassificationReport {
    pub fn total(&self) -> u64 {
        self.per_class.iter().map(|m| m.support).sum()
    }

    /// `class,precision,recall,f1,support`, then `macro avg` and `accuracy` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Config(format!("writing report: {e}"));
        out.write_record(["class", "precision", "recall", "f1", "support"]).map_err(csv_err)?;
        for (name, m) in self.classes.iter().zip(&self.per_class) {
            out.write_record([
                name.clone(),
                format!("{:.4}", m.precision),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.f1),
                m.support.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.write_record([
            "macro avg".to_string(),
            format!("{:.4}", self.macro_precision),
            format!("{:.4}", self.macro_recall),
            format!("{:.4}", self.macro_f1),
            self.total().to_string(),
        ])
        .map_err(csv_err)?;
        out.write_record([
            "accuracy".to_string(),
            String::new(),
            String::new(),
            format!("{:.4}", self.accuracy),
            self.total().to_string(),
        ])
        .map_err(csv_err)?;
        out.flush().map_err(|e| Error::Config(format!("writing report: {e}")))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(9);
        writeln!(f, "{:>width$}  precision  recall     f1  support", "")?;
        for (name, m) in self.classes.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{name:>width$}  {:>9.3}  {:>6.3}  {:>5.3}  {:>7}",
                m.precision, m.recall, m.f1, m.support
            )?;
        }
        writeln!(
            f,
            "{:>width$}  {:>9.3}  {:>6.3}  {:>5.3}  {:>7}",
            "macro avg",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.total()
        )?;
        write!(f, "{:>width$}  {:>9}  {:>6}  {:>5.3}  {:>7}", "accuracy", "", "", self.accuracy, self.total())
    }
}
