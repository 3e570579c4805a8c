//! Classification metrics and benchmark reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Difficulty, Granularity, ImageRecord, LabeledPairSets, Split};
use crate::model::{ClassifierModel, Prediction};
use crate::verify::{evaluate_verification, LabeledPair};

fn truth_indices<S: AsRef<str>>(predictions: &[Prediction], truth: &[S]) -> Result<Vec<usize>> {
    if predictions.len() != truth.len() {
        return Err(Error::usage(format!(
            "{} predictions but {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            p.vocabulary()
                .index_of(t.as_ref())
                .ok_or_else(|| Error::usage(format!("label {:?} is not in the vocabulary", t.as_ref())))
        })
        .collect()
}

/// Fraction of samples whose true class is among the `k` best ranked.
pub fn top_k_accuracy<S: AsRef<str>>(predictions: &[Prediction], truth: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    let idx = truth_indices(predictions, truth)?;
    if idx.is_empty() {
        return Err(Error::usage("no samples to score"));
    }
    let hits = predictions
        .iter()
        .zip(&idx)
        .filter(|(p, &t)| p.ranking().iter().take(k).any(|&c| c == t))
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[truth][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Rows are true classes, columns top-1 predictions, both in vocabulary order.
pub fn confusion_matrix<S: AsRef<str>>(predictions: &[Prediction], truth: &[S]) -> Result<ConfusionMatrix> {
    let idx = truth_indices(predictions, truth)?;
    let Some(first) = predictions.first() else {
        return Err(Error::usage("no samples to score"));
    };
    let classes = first.vocabulary().classes().to_vec();
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (p, &t) in predictions.iter().zip(&idx) {
        counts[t][p.top1()] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Top-1 at make-model-year granularity.
    Stanford,
    /// Top-1 and top-5 at make-model granularity.
    CompcarsCls,
    /// Easy, medium and hard pair verification.
    CompcarsVerif,
    /// Top-1 and top-5 on any manifest.
    Generic,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Stanford => "stanford",
            Protocol::CompcarsCls => "compcars_cls",
            Protocol::CompcarsVerif => "compcars_verif",
            Protocol::Generic => "generic",
        }
    }

    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            Protocol::Stanford => &["top1"],
            Protocol::CompcarsCls | Protocol::Generic => &["top1", "top5"],
            Protocol::CompcarsVerif => &["easy", "medium", "hard"],
        }
    }

    fn granularity(&self) -> Option<Granularity> {
        match self {
            Protocol::Stanford => Some(Granularity::MakeModelYear),
            Protocol::CompcarsCls | Protocol::CompcarsVerif => Some(Granularity::MakeModel),
            Protocol::Generic => None,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stanford" => Ok(Protocol::Stanford),
            "compcars_cls" => Ok(Protocol::CompcarsCls),
            "compcars_verif" => Ok(Protocol::CompcarsVerif),
            "generic" => Ok(Protocol::Generic),
            _ => Err(format!(
                "unknown protocol {s:?} (expected stanford, compcars_cls, compcars_verif or generic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `measured` for this run, `published` for literature numbers.
    pub source: String,
    /// Percentages, one per protocol column.
    pub values: Vec<Option<f64>>,
}

fn published(method: &str, values: &[f64]) -> ReportRow {
    ReportRow {
        method: method.into(),
        source: "published".into(),
        values: values.iter().map(|v| Some(*v)).collect(),
    }
}

/// Literature results shipped as static context. They are never recomputed.
pub fn reference_rows(protocol: Protocol) -> Vec<ReportRow> {
    match protocol {
        Protocol::Stanford => vec![
            published("reference system (fine-tuned)", &[93.6]),
            published("Krause et al.", &[92.8]),
            published("Lin et al.", &[91.3]),
            published("Zhang et al.", &[88.4]),
            published("Xie et al.", &[86.3]),
            published("Gosselin et al.", &[82.7]),
        ],
        Protocol::CompcarsCls => vec![
            published("reference system (fine-tuned)", &[95.88, 99.53]),
            published("GoogLeNet", &[91.2, 98.1]),
            published("Overfeat", &[87.9, 96.9]),
            published("AlexNet", &[81.9, 94.0]),
        ],
        Protocol::CompcarsVerif => vec![
            published("reference system (fine-tuned)", &[93.00, 86.18, 80.05]),
            published("reference system (no fine-tuning)", &[92.03, 86.52, 80.17]),
            published("Yang et al.", &[83.3, 82.4, 76.1]),
            published("Sochor et al.", &[85.0, 82.7, 76.8]),
        ],
        Protocol::Generic => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Pairs per verification set, including calibration.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub n_pairs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    pub protocol: Protocol,
    pub model_digest: String,
    pub vocabulary_digest: String,
    pub dataset: DatasetSizes,
    pub columns: Vec<String>,
    /// Measured values as fractions in [0, 1].
    pub metrics: BTreeMap<String, f64>,
    pub threshold: Option<f64>,
    pub rows: Vec<ReportRow>,
}

impl BenchmarkReport {
    fn new(protocol: Protocol, model: &ClassifierModel, dataset: DatasetSizes) -> Self {
        Self {
            schema: "mmcr-eval/1".into(),
            protocol,
            model_digest: model.digest().to_string(),
            vocabulary_digest: model.vocabulary().digest(),
            dataset,
            columns: protocol.columns().iter().map(|c| c.to_string()).collect(),
            metrics: BTreeMap::new(),
            threshold: None,
            rows: Vec::new(),
        }
    }

    /// Plain-text table: measured rows first, then published ones.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "protocol: {}\nmodel: {}\ntrain images: {}  test images: {}  classes: {}\n",
            self.protocol, self.model_digest, self.dataset.n_train, self.dataset.n_test, self.dataset.n_classes
        );
        for (set, n) in &self.dataset.n_pairs {
            out.push_str(&format!("{set} pairs: {n}\n"));
        }
        if let Some(t) = self.threshold {
            out.push_str(&format!("threshold: {t}\n"));
        }
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        out.push('\n');
        out.push_str(&format!("{:<width$}  {:<9}", "method", "source"));
        for c in &self.columns {
            out.push_str(&format!("  {:>8}", c));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:<9}", r.method, r.source));
            for v in &r.values {
                match v {
                    Some(v) => out.push_str(&format!("  {:>7.2}%", v)),
                    None => out.push_str(&format!("  {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn check_granularity(protocol: Protocol, model: &ClassifierModel) -> Result<()> {
    let got = model.vocabulary().granularity();
    match protocol.granularity() {
        Some(want) if want != got => Err(Error::usage(format!(
            "protocol {protocol} needs a {} model, this one predicts {}",
            want.as_str(),
            got.as_str()
        ))),
        _ => Ok(()),
    }
}

/// Classification report over the test split of `records`.
pub fn benchmark_report(model: &ClassifierModel, records: &[ImageRecord], protocol: Protocol) -> Result<BenchmarkReport> {
    if protocol == Protocol::CompcarsVerif {
        return Err(Error::usage("compcars_verif needs pair lists; use verification_report"));
    }
    check_granularity(protocol, model)?;
    let g = model.vocabulary().granularity();
    let test: Vec<ImageRecord> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::usage("the manifest has no test records"));
    }
    let truth: Vec<String> = test
        .iter()
        .map(|r| {
            r.label(g).ok_or_else(|| Error::Label {
                record: r.id.clone(),
                reason: format!("no {} label", g.as_str()),
            })
        })
        .collect::<Result<_>>()?;
    let predictions = model.predict_records(&test)?;
    let mut report = BenchmarkReport::new(
        protocol,
        model,
        DatasetSizes {
            n_train: records.len() - test.len(),
            n_test: test.len(),
            n_classes: model.vocabulary().len(),
            n_pairs: BTreeMap::new(),
        },
    );
    let mut values = Vec::new();
    for col in protocol.columns() {
        let k = if *col == "top1" { 1 } else { 5 };
        let acc = top_k_accuracy(&predictions, &truth, k)?;
        report.metrics.insert(col.to_string(), acc);
        values.push(Some(acc * 100.0));
    }
    report.rows.push(ReportRow {
        method: "this model".into(),
        source: "measured".into(),
        values,
    });
    report.rows.extend(reference_rows(protocol));
    Ok(report)
}

/// Verification report over the easy/medium/hard sets. `frozen` is an
/// optional upstream model evaluated the same way without fine-tuning.
pub fn verification_report(
    model: &ClassifierModel,
    frozen: Option<&ClassifierModel>,
    records: &[ImageRecord],
    calibration: &[LabeledPair],
    sets: &LabeledPairSets,
) -> Result<BenchmarkReport> {
    check_granularity(Protocol::CompcarsVerif, model)?;
    let named: Vec<(String, Vec<LabeledPair>)> = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard]
        .iter()
        .filter_map(|d| sets.get(d).map(|p| (d.as_str().to_string(), p.clone())))
        .collect();
    let mut n_pairs: BTreeMap<String, usize> = named.iter().map(|(n, p)| (n.clone(), p.len())).collect();
    n_pairs.insert("calibration".into(), calibration.len());
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    let mut report = BenchmarkReport::new(
        Protocol::CompcarsVerif,
        model,
        DatasetSizes {
            n_train: records.len() - n_test,
            n_test,
            n_classes: model.vocabulary().len(),
            n_pairs,
        },
    );
    let mut run = |m: &ClassifierModel, label: &str, primary: bool| -> Result<()> {
        let result = evaluate_verification(m, records, calibration, &named)?;
        let values = Protocol::CompcarsVerif
            .columns()
            .iter()
            .map(|c| result.sets.iter().find(|s| s.name == *c).map(|s| s.accuracy * 100.0))
            .collect();
        if primary {
            report.threshold = Some(result.threshold.threshold);
            for s in &result.sets {
                report.metrics.insert(s.name.clone(), s.accuracy);
            }
        } else {
            for s in &result.sets {
                report.metrics.insert(format!("{}_frozen", s.name), s.accuracy);
            }
        }
        report.rows.push(ReportRow {
            method: label.into(),
            source: "measured".into(),
            values,
        });
        Ok(())
    };
    run(model, "this model", true)?;
    if let Some(f) = frozen {
        run(f, "this model (no fine-tuning)", false)?;
    }
    report.rows.extend(reference_rows(Protocol::CompcarsVerif));
    Ok(report)
}
