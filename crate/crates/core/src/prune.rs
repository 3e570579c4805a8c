//! Outlier flagging and the human review loop.
//!
//! Each labeled record is scored by how far its embedding lies from its
//! class centroid, relative to the spread of that class. The highest scoring
//! fraction becomes a review queue; annotator verdicts are appended to the
//! queue file and later applied to the manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvline::{Fields, LineWriter};
use crate::manifest::{Granularity, ImageRecord, LabelVocabulary};
use crate::model::ClassifierModel;
use crate::verify::pair_distance;

pub const DEFAULT_FLAG_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub centroid: Vec<f64>,
    pub mean_distance: f64,
    /// Population standard deviation of the distances to the centroid.
    pub std_distance: f64,
    pub count: usize,
}

/// Per-class statistics. Classes with fewer than two members are left out
/// and returned in the second list.
pub fn class_statistics(
    groups: &BTreeMap<String, Vec<&[f64]>>,
) -> Result<(BTreeMap<String, ClassStats>, Vec<String>)> {
    let mut stats = BTreeMap::new();
    let mut singletons = Vec::new();
    for (label, members) in groups {
        if members.len() < 2 {
            singletons.push(label.clone());
            continue;
        }
        let dim = members[0].len();
        let mut centroid = vec![0.0; dim];
        for m in members {
            if m.len() != dim {
                return Err(Error::usage(format!("class {label}: embeddings of different lengths")));
            }
            for (c, v) in centroid.iter_mut().zip(m.iter()) {
                *c += v;
            }
        }
        let n = members.len() as f64;
        for c in &mut centroid {
            *c /= n;
        }
        let dists: Vec<f64> = members
            .iter()
            .map(|m| pair_distance(m, &centroid))
            .collect::<Result<_>>()?;
        let mean = dists.iter().sum::<f64>() / n;
        let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        stats.insert(
            label.clone(),
            ClassStats {
                centroid,
                mean_distance: mean,
                std_distance: var.sqrt(),
                count: members.len(),
            },
        );
    }
    Ok((stats, singletons))
}

/// `(distance - mean) / std`. A class without spread scores 0 at the mean
/// distance and `+inf` anywhere else.
pub fn outlier_score(embedding: &[f64], stats: &ClassStats) -> Result<f64> {
    let d = pair_distance(embedding, &stats.centroid)?;
    let tol = 1e-9 * (1.0 + stats.mean_distance);
    if stats.std_distance <= tol {
        return Ok(if (d - stats.mean_distance).abs() <= tol { 0.0 } else { f64::INFINITY });
    }
    Ok((d - stats.mean_distance) / stats.std_distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
    Relabeled,
}

impl ReviewStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Relabeled => "relabeled",
        }
    }
}

impl fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReviewStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pending" => Ok(ReviewStatus::Pending),
            "accepted" => Ok(ReviewStatus::Accepted),
            "rejected" => Ok(ReviewStatus::Rejected),
            "relabeled" => Ok(ReviewStatus::Relabeled),
            _ => Err(format!("unknown review status {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    /// Id of the manifest record under review.
    pub record: String,
    pub path: PathBuf,
    pub proposed_label: String,
    pub outlier_score: f64,
    pub status: ReviewStatus,
    pub verdict_label: Option<String>,
    pub annotator: Option<String>,
    /// RFC 3339 UTC time of the verdict.
    pub timestamp: Option<String>,
}

impl ReviewItem {
    /// Checks the status-dependent fields.
    pub fn validate(&self, vocabulary: Option<&LabelVocabulary>) -> Result<(), String> {
        if self.status != ReviewStatus::Pending && (self.annotator.is_none() || self.timestamp.is_none()) {
            return Err(format!("item {}: a verdict needs an annotator and a timestamp", self.id));
        }
        match (self.status, &self.verdict_label) {
            (ReviewStatus::Relabeled, None) => Err(format!("item {}: relabel without a label", self.id)),
            (ReviewStatus::Relabeled, Some(l)) => match vocabulary {
                Some(v) if v.index_of(l).is_none() => {
                    Err(format!("item {}: label {l:?} is not in the vocabulary", self.id))
                }
                _ => Ok(()),
            },
            (_, Some(_)) => Err(format!("item {}: only relabel verdicts carry a label", self.id)),
            _ => Ok(()),
        }
    }

    /// Copy of this item carrying a verdict.
    pub fn with_verdict(
        &self,
        status: ReviewStatus,
        verdict_label: Option<String>,
        annotator: &str,
        timestamp: &str,
    ) -> Self {
        Self {
            status,
            verdict_label,
            annotator: Some(annotator.to_string()),
            timestamp: Some(timestamp.to_string()),
            ..self.clone()
        }
    }
}

const QUEUE_KEYS: [&str; 9] = [
    "id",
    "record",
    "path",
    "proposed_label",
    "outlier_score",
    "status",
    "verdict_label",
    "annotator",
    "timestamp",
];

pub fn write_item(item: &ReviewItem) -> Result<String> {
    let path = item
        .path
        .to_str()
        .ok_or_else(|| Error::usage(format!("item {}: path is not valid UTF-8", item.id)))?;
    Ok(LineWriter::new()
        .field("id", &item.id)
        .field("record", &item.record)
        .field("path", path)
        .field("proposed_label", &item.proposed_label)
        .field("outlier_score", item.outlier_score.to_string())
        .field("status", item.status.as_str())
        .opt_field("verdict_label", item.verdict_label.as_deref())
        .opt_field("annotator", item.annotator.as_deref())
        .opt_field("timestamp", item.timestamp.as_deref())
        .finish())
}

pub fn parse_item(line: &str) -> Result<ReviewItem, String> {
    let f = Fields::parse(line, &QUEUE_KEYS)?;
    let score = f.require("outlier_score")?;
    let item = ReviewItem {
        id: f.require("id")?.to_string(),
        record: f.require("record")?.to_string(),
        path: PathBuf::from(f.require("path")?),
        proposed_label: f.require("proposed_label")?.to_string(),
        outlier_score: score
            .parse()
            .map_err(|_| format!("outlier_score {score:?} is not a number"))?,
        status: f.require("status")?.parse()?,
        verdict_label: f.get("verdict_label").map(str::to_string),
        annotator: f.get("annotator").map(str::to_string),
        timestamp: f.get("timestamp").map(str::to_string),
    };
    item.validate(None)?;
    Ok(item)
}

/// Writes a fresh queue file (pending items, one per line).
pub fn save_queue(items: &[ReviewItem], path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&write_item(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Appends one verdict line and syncs it to disk before returning.
pub fn append_verdict(path: &Path, item: &ReviewItem) -> Result<()> {
    item.validate(None).map_err(Error::usage)?;
    let line = write_item(item)? + "\n";
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Reads a queue file and folds appended verdicts into their items. For
/// each id the verdict with the latest timestamp wins (later lines win
/// ties); items keep the order of their first appearance.
pub fn load_queue(path: &Path) -> Result<Vec<ReviewItem>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut current: HashMap<String, ReviewItem> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let item = parse_item(&line).map_err(|reason| Error::ManifestLine { line: i + 1, reason })?;
        match current.get(&item.id) {
            None => {
                order.push(item.id.clone());
                current.insert(item.id.clone(), item);
            }
            Some(prev) => {
                if supersedes(&item, prev) {
                    current.insert(item.id.clone(), item);
                }
            }
        }
    }
    Ok(order.into_iter().map(|id| current.remove(&id).unwrap()).collect())
}

fn supersedes(new: &ReviewItem, old: &ReviewItem) -> bool {
    match (&new.timestamp, &old.timestamp) {
        (None, Some(_)) => false,
        (Some(_), None) | (None, None) => true,
        (Some(a), Some(b)) => match (
            chrono::DateTime::parse_from_rfc3339(a),
            chrono::DateTime::parse_from_rfc3339(b),
        ) {
            (Ok(a), Ok(b)) => a >= b,
            _ => a >= b,
        },
    }
}

/// Current UTC time in the format stored in queue files.
pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub record: String,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueBuild {
    pub items: Vec<ReviewItem>,
    /// Every scored record, in manifest order.
    pub scored: Vec<ScoredRecord>,
    /// Classes with a single member; their records are never flagged.
    pub singleton_classes: Vec<String>,
    /// Records without a label at the model's granularity.
    pub unlabeled: Vec<String>,
}

/// Number of items flagged out of `n`: `ceil(fraction * n)`, at least one.
pub fn flag_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Scores records from precomputed embeddings (one per record) and turns the
/// top `fraction` into pending review items.
pub fn build_queue_from_embeddings(
    records: &[ImageRecord],
    embeddings: &[Vec<f64>],
    granularity: Granularity,
    fraction: f64,
) -> Result<QueueBuild> {
    if records.is_empty() {
        return Err(Error::usage("the manifest is empty"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::usage(format!("flag fraction {fraction} must be in (0, 1]")));
    }
    if records.len() != embeddings.len() {
        return Err(Error::Shape {
            expected: format!("{} embeddings", records.len()),
            actual: embeddings.len().to_string(),
        });
    }
    let mut unlabeled = Vec::new();
    let mut labeled: Vec<(usize, String)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.label(granularity) {
            Some(l) => labeled.push((i, l)),
            None => unlabeled.push(r.id.clone()),
        }
    }
    let mut groups: BTreeMap<String, Vec<&[f64]>> = BTreeMap::new();
    for (i, l) in &labeled {
        groups.entry(l.clone()).or_default().push(&embeddings[*i]);
    }
    let (stats, singleton_classes) = class_statistics(&groups)?;
    let mut scored = Vec::new();
    for (i, l) in labeled {
        if let Some(s) = stats.get(&l) {
            scored.push(ScoredRecord {
                record: records[i].id.clone(),
                label: l,
                score: outlier_score(&embeddings[i], s)?,
            });
        }
    }
    let mut ranked: Vec<usize> = (0..scored.len()).collect();
    ranked.sort_by(|&a, &b| {
        scored[b]
            .score
            .total_cmp(&scored[a].score)
            .then_with(|| scored[a].record.cmp(&scored[b].record))
    });
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let k = if scored.is_empty() { 0 } else { flag_count(scored.len(), fraction) };
    let items = ranked[..k]
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let s = &scored[i];
            ReviewItem {
                id: format!("q{:06}", rank + 1),
                record: s.record.clone(),
                path: by_id[s.record.as_str()].path.clone(),
                proposed_label: s.label.clone(),
                outlier_score: s.score,
                status: ReviewStatus::Pending,
                verdict_label: None,
                annotator: None,
                timestamp: None,
            }
        })
        .collect();
    Ok(QueueBuild {
        items,
        scored,
        singleton_classes,
        unlabeled,
    })
}

/// Embeds the records with `model` and builds the queue at the model's
/// label granularity.
pub fn build_review_queue(records: &[ImageRecord], model: &ClassifierModel, fraction: f64) -> Result<QueueBuild> {
    if records.is_empty() {
        return Err(Error::usage("the manifest is empty"));
    }
    let embeddings = model.embed_records(records)?;
    build_queue_from_embeddings(records, &embeddings, model.vocabulary().granularity(), fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item: String,
    pub record: String,
    /// `removed` or `relabeled`.
    pub action: String,
    pub from_label: String,
    pub to_label: Option<String>,
    pub annotator: Option<String>,
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub records: Vec<ImageRecord>,
    pub audit: Vec<AuditEntry>,
}

impl Applied {
    pub fn audit_json_lines(&self) -> String {
        self.audit
            .iter()
            .map(|a| serde_json::to_string(a).expect("audit serializes") + "\n")
            .collect()
    }
}

/// Applies resolved verdicts: rejected records are dropped, relabeled ones
/// get the verdict label. Everything is validated before anything changes.
pub fn apply_verdicts(
    records: &[ImageRecord],
    items: &[ReviewItem],
    vocabulary: &LabelVocabulary,
) -> Result<Applied> {
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut seen = HashSet::new();
    for item in items {
        item.validate(Some(vocabulary)).map_err(|reason| Error::Label {
            record: item.record.clone(),
            reason,
        })?;
        if !ids.contains(item.record.as_str()) {
            return Err(Error::Label {
                record: item.record.clone(),
                reason: format!("item {} refers to a record missing from the manifest", item.id),
            });
        }
        if item.status != ReviewStatus::Pending && !seen.insert(item.record.as_str()) {
            return Err(Error::Label {
                record: item.record.clone(),
                reason: "more than one verdict targets this record".into(),
            });
        }
    }
    let g = vocabulary.granularity();
    let verdicts: HashMap<&str, &ReviewItem> = items
        .iter()
        .filter(|i| i.status != ReviewStatus::Pending)
        .map(|i| (i.record.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    let mut audit = Vec::new();
    for r in records {
        let Some(item) = verdicts.get(r.id.as_str()) else {
            out.push(r.clone());
            continue;
        };
        let from_label = r.label(g).unwrap_or_default();
        match item.status {
            ReviewStatus::Rejected => audit.push(AuditEntry {
                item: item.id.clone(),
                record: r.id.clone(),
                action: "removed".into(),
                from_label,
                to_label: None,
                annotator: item.annotator.clone(),
                timestamp: item.timestamp.clone(),
            }),
            ReviewStatus::Relabeled => {
                let to = item.verdict_label.clone().expect("validated");
                let mut changed = r.clone();
                changed
                    .set_label(g, &to)
                    .map_err(|reason| Error::Label {
                        record: r.id.clone(),
                        reason,
                    })?;
                audit.push(AuditEntry {
                    item: item.id.clone(),
                    record: r.id.clone(),
                    action: "relabeled".into(),
                    from_label,
                    to_label: Some(to),
                    annotator: item.annotator.clone(),
                    timestamp: item.timestamp.clone(),
                });
                out.push(changed);
            }
            _ => out.push(r.clone()),
        }
    }
    Ok(Applied { records: out, audit })
}
