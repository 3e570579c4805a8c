//! Pair verification: two images show the same make/model when the
//! Euclidean distance between their embeddings is below a threshold
//! calibrated on labeled training pairs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ImageRecord;
use crate::model::ClassifierModel;

/// A pair of record ids with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

impl LabeledPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, same: bool) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            same,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Same,
    Different,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Same => "same",
            Decision::Different => "different",
        }
    }
}

/// Writes `id_a TAB id_b TAB same|different`, one pair per line.
pub fn save_pairs(pairs: &[LabeledPair], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        if p.a.contains(['\t', '\n']) || p.b.contains(['\t', '\n']) {
            return Err(Error::usage(format!("pair ids may not contain TAB or newline: {:?}", p)));
        }
        let label = if p.same { "same" } else { "different" };
        writeln!(w, "{}\t{}\t{}", p.a, p.b, label).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::ingest(format!("{}:{}", path.display(), i + 1), reason);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 TAB-separated columns, got {}", cols.len())));
        }
        let same = match cols[2] {
            "same" => true,
            "different" => false,
            other => return Err(bad(format!("label {other:?} is not same/different"))),
        };
        pairs.push(LabeledPair::new(cols[0], cols[1], same));
    }
    Ok(pairs)
}

/// Euclidean distance between two embeddings.
pub fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `Same` iff the distance is strictly below the threshold.
pub fn decide(distance: f64, threshold: f64) -> Decision {
    if distance < threshold {
        Decision::Same
    } else {
        Decision::Different
    }
}

pub fn verify_pair(a: &[f64], b: &[f64], threshold: f64) -> Result<Decision> {
    Ok(decide(pair_distance(a, b)?, threshold))
}

/// Distance counts per label over equal-width bins on `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub max_distance: f64,
    pub same: Vec<u64>,
    pub different: Vec<u64>,
}

const HISTOGRAM_BINS: usize = 20;

impl DistanceHistogram {
    fn build(samples: &[(f64, bool)], max_distance: f64) -> Self {
        let mut same = vec![0; HISTOGRAM_BINS];
        let mut different = vec![0; HISTOGRAM_BINS];
        for &(d, is_same) in samples {
            let bin = if max_distance > 0.0 {
                ((d / max_distance) * HISTOGRAM_BINS as f64) as usize
            } else {
                0
            };
            let bin = bin.min(HISTOGRAM_BINS - 1);
            if is_same {
                same[bin] += 1;
            } else {
                different[bin] += 1;
            }
        }
        Self {
            max_distance,
            same,
            different,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    /// Accuracy on the calibration pairs at `threshold`.
    pub accuracy: f64,
    pub n_same: usize,
    pub n_different: usize,
    pub histogram: DistanceHistogram,
}

impl ThresholdModel {
    pub fn decide(&self, distance: f64) -> Decision {
        decide(distance, self.threshold)
    }
}

/// Thresholds worth trying for a set of distances: zero, the midpoints
/// between consecutive distinct distances, and just above the largest one.
pub fn candidate_thresholds(distances: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = distances.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(0.0);
    for w in sorted.windows(2) {
        out.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    if let Some(&max) = sorted.last() {
        out.push(max + (max * 1e-9).max(f64::MIN_POSITIVE));
    }
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup();
    out
}

/// Picks the threshold with the highest accuracy on `(distance, same)`
/// samples; ties go to the smallest threshold.
pub fn calibrate_threshold(samples: &[(f64, bool)]) -> Result<ThresholdModel> {
    let n_same = samples.iter().filter(|s| s.1).count();
    let n_different = samples.len() - n_same;
    if n_same == 0 || n_different == 0 {
        return Err(Error::usage(
            "threshold calibration needs at least one same and one different pair",
        ));
    }
    if let Some(bad) = samples.iter().find(|s| !s.0.is_finite() || s.0 < 0.0) {
        return Err(Error::usage(format!("invalid distance {}", bad.0)));
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let distances: Vec<f64> = sorted.iter().map(|s| s.0).collect();
    let candidates = candidate_thresholds(&distances);

    // sweep: `below` counts samples with distance < candidate
    let (mut below, mut same_below, mut diff_below) = (0usize, 0usize, 0usize);
    let mut best = (0usize, f64::NAN);
    for &t in &candidates {
        while below < sorted.len() && sorted[below].0 < t {
            if sorted[below].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            below += 1;
        }
        let correct = same_below + (n_different - diff_below);
        if best.1.is_nan() || correct > best.0 {
            best = (correct, t);
        }
    }
    let max_distance = *distances.last().unwrap();
    Ok(ThresholdModel {
        threshold: best.1,
        accuracy: best.0 as f64 / samples.len() as f64,
        n_same,
        n_different,
        histogram: DistanceHistogram::build(samples, max_distance),
    })
}

/// Fraction of samples decided correctly at `threshold`.
pub fn accuracy_at(samples: &[(f64, bool)], threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|(d, same)| (decide(*d, threshold) == Decision::Same) == *same)
        .count();
    correct as f64 / samples.len() as f64
}

/// Accuracy of one evaluation set at the calibrated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAccuracy {
    pub name: String,
    pub n_pairs: usize,
    pub n_same: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub threshold: ThresholdModel,
    pub sets: Vec<SetAccuracy>,
}

fn distances(features: &HashMap<String, Vec<f64>>, pairs: &[LabeledPair]) -> Result<Vec<(f64, bool)>> {
    let get = |id: &str| {
        features.get(id).ok_or_else(|| Error::Label {
            record: id.to_string(),
            reason: "pair refers to an image without an embedding".into(),
        })
    };
    pairs
        .iter()
        .map(|p| Ok((pair_distance(get(&p.a)?, get(&p.b)?)?, p.same)))
        .collect()
}

/// Calibrates on `calibration` and scores every named set with the result.
pub fn evaluate_with_features(
    features: &HashMap<String, Vec<f64>>,
    calibration: &[LabeledPair],
    sets: &[(String, Vec<LabeledPair>)],
) -> Result<VerificationResult> {
    if let Some((name, _)) = sets.iter().find(|(_, p)| p.is_empty()) {
        return Err(Error::usage(format!("verification set {name} is empty")));
    }
    let threshold = calibrate_threshold(&distances(features, calibration)?)?;
    let sets = sets
        .iter()
        .map(|(name, pairs)| {
            let samples = distances(features, pairs)?;
            Ok(SetAccuracy {
                name: name.clone(),
                n_pairs: pairs.len(),
                n_same: pairs.iter().filter(|p| p.same).count(),
                accuracy: accuracy_at(&samples, threshold.threshold),
            })
        })
        .collect::<Result<_>>()?;
    Ok(VerificationResult { threshold, sets })
}

/// Embeddings for every image referenced by `pairs`, keyed by record id.
pub fn pair_features<'a>(
    model: &ClassifierModel,
    records: &[ImageRecord],
    pairs: impl IntoIterator<Item = &'a LabeledPair>,
) -> Result<HashMap<String, Vec<f64>>> {
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut needed: Vec<&str> = pairs.into_iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();
    needed.sort_unstable();
    needed.dedup();
    let chosen: Vec<ImageRecord> = needed
        .iter()
        .map(|id| {
            by_id.get(id).map(|r| (*r).clone()).ok_or_else(|| Error::Label {
                record: id.to_string(),
                reason: "pair refers to an unknown image".into(),
            })
        })
        .collect::<Result<_>>()?;
    let embeddings = model.embed_records(&chosen)?;
    Ok(chosen.into_iter().map(|r| r.id).zip(embeddings).collect())
}

/// Fraction of `pairs` decided correctly at a fixed threshold.
pub fn score_pairs(features: &HashMap<String, Vec<f64>>, pairs: &[LabeledPair], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::usage("the pair list is empty"));
    }
    Ok(accuracy_at(&distances(features, pairs)?, threshold))
}

/// Embeds every image referenced by a pair with `model` and runs
/// [`evaluate_with_features`]. `records` resolves pair ids to images.
pub fn evaluate_verification(
    model: &ClassifierModel,
    records: &[ImageRecord],
    calibration: &[LabeledPair],
    sets: &[(String, Vec<LabeledPair>)],
) -> Result<VerificationResult> {
    let features = pair_features(model, records, calibration.iter().chain(sets.iter().flat_map(|(_, p)| p)))?;
    evaluate_with_features(&features, calibration, sets)
}

/// Calibrates a threshold on `pairs` with `model`'s embeddings.
pub fn calibrate_with_model(
    model: &ClassifierModel,
    records: &[ImageRecord],
    pairs: &[LabeledPair],
) -> Result<ThresholdModel> {
    let features = pair_features(model, records, pairs)?;
    calibrate_threshold(&distances(&features, pairs)?)
}
