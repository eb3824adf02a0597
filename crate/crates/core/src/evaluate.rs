//! Confusion matrix, one-vs-rest metrics and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::train::Prediction;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("true\\predicted");
        for c in StrokeClass::ALL {
            write!(out, ",{}", c.dir_name()).expect("string write");
        }
        out.push('\n');
        for t in StrokeClass::ALL {
            out.push_str(t.dir_name());
            for p in 0..NUM_CLASSES {
                write!(out, ",{}", self.counts[t.id()][p]).expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(Error::Input(format!("class id out of range: pred {p}, label {t}")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// 0/0 is defined as 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: IndexMap<String, Scores>,
    #[serde(rename = "macro")]
    pub macro_avg: Scores,
    /// Support-weighted averages, reported for comparison.
    pub weighted: Scores,
    /// Micro-averaged scores; all equal accuracy for single-label data.
    pub micro: Scores,
}

pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("empty confusion matrix".into()));
    }
    let mut per_class = IndexMap::new();
    let (mut macro_avg, mut weighted) = (Scores::default(), Scores::default());
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
    for c in StrokeClass::ALL {
        let k = c.id();
        let tp = cm.counts[k][k];
        let fp: u64 = (0..NUM_CLASSES).filter(|&t| t != k).map(|t| cm.counts[t][k]).sum();
        let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != k).map(|p| cm.counts[k][p]).sum();
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let s = Scores {
            precision,
            recall,
            f1: f1(precision, recall),
        };
        let support = (tp + fn_) as f64 / total as f64;
        macro_avg.precision += s.precision / NUM_CLASSES as f64;
        macro_avg.recall += s.recall / NUM_CLASSES as f64;
        macro_avg.f1 += s.f1 / NUM_CLASSES as f64;
        weighted.precision += s.precision * support;
        weighted.recall += s.recall * support;
        weighted.f1 += s.f1 * support;
        per_class.insert(c.dir_name().to_string(), s);
    }
    let mp = ratio(tp_sum, tp_sum + fp_sum);
    let mr = ratio(tp_sum, tp_sum + fn_sum);
    Ok(Metrics {
        accuracy: ratio(cm.trace(), total),
        per_class,
        macro_avg,
        weighted,
        micro: Scores {
            precision: mp,
            recall: mr,
            f1: f1(mp, mr),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub augmentation_tag: String,
    pub cm: ConfusionMatrix,
    pub loss: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl EvalReport {
    pub fn from_predictions(model_tag: &str, augmentation_tag: &str, preds: &[Prediction], loss: f64) -> Result<Self> {
        let p: Vec<usize> = preds.iter().map(|p| p.predicted.id()).collect();
        let l: Vec<usize> = preds.iter().map(|p| p.label.id()).collect();
        let cm = confusion_matrix(&p, &l)?;
        Ok(Self {
            model_tag: model_tag.into(),
            augmentation_tag: augmentation_tag.into(),
            cm,
            loss,
            metrics: metrics_from_cm(&cm)?,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.metrics.accuracy
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
}

/// Markdown table with one row per report (Accuracy, Loss, F1, Recall,
/// Precision; macro averages at four decimals), or the full JSON list.
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)?),
        ReportFormat::Table => {
            let mut out = String::from(
                "| Model | Augmentation | Accuracy | Loss Value | F1-score | Recall | Precision |\n\
                 |---|---|---|---|---|---|---|\n",
            );
            for r in reports {
                let m = &r.metrics;
                writeln!(
                    out,
                    "| {} | {} | {:.4} | {:.4} | {:.2} | {:.2} | {:.2} |",
                    r.model_tag, r.augmentation_tag, m.accuracy, r.loss, m.macro_avg.f1, m.macro_avg.recall, m.macro_avg.precision
                )
                .expect("string write");
            }
            Ok(out)
        }
    }
}
