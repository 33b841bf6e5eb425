//! Classification metrics and the per-epoch metrics table.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "method,fraction,epoch,split,loss,accuracy,macro_f1";

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    if labels.is_empty() {
        return Err(Error::DegenerateInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over `classes` classes. A class whose F1
/// has a zero denominator contributes 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(predictions, labels)?;
    if classes == 0 {
        return Err(Error::Config("macro-F1 needs at least one class".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Index(format!("class {bad} with {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

/// Per-epoch rows of one run, tagged with the method and label fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub method: String,
    pub fraction: Option<f64>,
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn new(method: impl Into<String>, fraction: Option<f64>) -> Self {
        Self {
            method: method.into(),
            fraction,
            rows: Vec::new(),
        }
    }

    /// Appends a row; epochs must not decrease and a split may appear once
    /// per epoch. Non-finite values are rejected.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        let values = [Some(row.loss), row.accuracy, row.macro_f1];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite metric at epoch {}", row.epoch)));
        }
        if let Some(last) = self.rows.last() {
            let ordered = row.epoch > last.epoch
                || (row.epoch == last.epoch && self.rows.iter().all(|r| r.epoch != row.epoch || r.split != row.split));
            if !ordered {
                return Err(Error::Contract(format!(
                    "epoch {} recorded after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows_for(&self, split: Split) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn epochs(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch)
    }

    /// Last row of `split`.
    pub fn last(&self, split: Split) -> Option<&MetricsRow> {
        self.rows_for(split).last()
    }

    pub fn loss_at(&self, epoch: usize, split: Split) -> Option<f64> {
        self.rows_for(split).find(|r| r.epoch == epoch).map(|r| r.loss)
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.method,
                cell(self.fraction),
                r.epoch,
                r.split.as_str(),
                r.loss,
                cell(r.accuracy),
                cell(r.macro_f1)
            );
        }
        out
    }
}

/// Header plus the rows of every run, in order.
pub fn to_csv(runs: &[RunMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in runs {
        out.push_str(&r.csv_rows());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[0, 0], &[0, 0], 3).unwrap(), 1.0 / 3.0);
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn csv_layout() {
        let mut m = RunMetrics::new("probe", Some(0.1));
        m.push(MetricsRow {
            epoch: 1,
            split: Split::Train,
            loss: 0.5,
            accuracy: None,
            macro_f1: None,
        })
        .unwrap();
        m.push(MetricsRow {
            epoch: 1,
            split: Split::Heldout,
            loss: 0.25,
            accuracy: Some(0.75),
            macro_f1: Some(0.7),
        })
        .unwrap();
        assert_eq!(
            to_csv(&[m.clone()]),
            "method,fraction,epoch,split,loss,accuracy,macro_f1\n\
             probe,0.1,1,train,0.5,-,-\n\
             probe,0.1,1,heldout,0.25,0.75,0.7\n"
        );
        let stale = MetricsRow {
            epoch: 1,
            split: Split::Train,
            loss: 0.1,
            accuracy: None,
            macro_f1: None,
        };
        assert!(m.push(stale).is_err());
        let nan = MetricsRow {
            epoch: 2,
            split: Split::Train,
            loss: f64::NAN,
            accuracy: None,
            macro_f1: None,
        };
        assert!(m.push(nan).is_err());
    }
}
