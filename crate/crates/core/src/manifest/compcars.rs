//! CompCars (web-nature part) adapter.
//!
//! Expects the release's `data/` directory as `annotation_root`:
//!
//! ```text
//! misc/make_model_name.mat                      optional, make/model names
//! label/<make>/<model>/<year>/<image>.txt       viewpoint, box count, box
//! train_test_split/classification/{train,test}.txt
//! train_test_split/verification/verification_train.txt
//! train_test_split/verification/verification_pairs_{easy,medium,hard}.txt
//! ```
//!
//! Image paths in the split files are relative to `images_root`
//! (`data/image/`). Record ids are those relative paths.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat5::{self, MatValue};
use super::{BoundingBox, Granularity, ImageRecord, Ingested, Source, Split};
use crate::error::{Error, Result};
use crate::verify::LabeledPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompCarsTask {
    Classification,
    Verification,
}

impl FromStr for CompCarsTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(CompCarsTask::Classification),
            "verification" => Ok(CompCarsTask::Verification),
            _ => Err(Error::usage(format!(
                "unknown CompCars task {s:?} (expected classification or verification)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(format!("unknown difficulty {s:?}")),
        }
    }
}

/// Evaluation pairs keyed by difficulty.
pub type LabeledPairSets = BTreeMap<Difficulty, Vec<LabeledPair>>;

/// Verification task data: the images referenced by any pair, calibration
/// pairs drawn from the verification training images, and the three
/// evaluation pair sets.
#[derive(Debug, Clone)]
pub struct CompCarsVerification {
    pub records: Vec<ImageRecord>,
    pub missing_images: Vec<String>,
    pub calibration: Vec<LabeledPair>,
    pub sets: LabeledPairSets,
}

#[derive(Debug, Clone)]
pub enum CompCarsData {
    Classification(Ingested),
    Verification(CompCarsVerification),
}

struct Names {
    makes: Vec<String>,
    models: Vec<String>,
}

fn load_names(root: &Path) -> Result<Option<Names>> {
    let p = root.join("misc").join("make_model_name.mat");
    if !p.is_file() {
        return Ok(None);
    }
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let vars = mat5::read_mat(&bytes).map_err(|r| Error::ingest(p.display().to_string(), r))?;
    let cell = |name: &str| -> Result<Vec<String>> {
        mat5::find(&vars, name)
            .and_then(MatValue::cell_items)
            .ok_or_else(|| Error::ingest(p.display().to_string(), format!("no {name} cell array")))?
            .iter()
            .map(|v| v.as_string().map(|s| s.trim().to_string()).unwrap_or_default())
            .map(Ok)
            .collect()
    };
    Ok(Some(Names {
        makes: cell("make_names")?,
        models: cell("model_names")?,
    }))
}

struct Ingest<'a> {
    root: &'a Path,
    images_root: &'a Path,
    names: Option<Names>,
    /// model id -> display model name, disambiguated when two ids share a name
    model_display: HashMap<u32, String>,
}

impl<'a> Ingest<'a> {
    fn new(root: &'a Path, images_root: &'a Path) -> Result<Self> {
        Ok(Self {
            root,
            images_root,
            names: load_names(root)?,
            model_display: HashMap::new(),
        })
    }

    fn parse_rel(&self, rel: &str, entry: &str) -> Result<(u32, u32, Option<i32>)> {
        let parts: Vec<&str> = rel.split('/').collect();
        if parts.len() != 4 {
            return Err(Error::ingest(entry, format!("{rel:?} is not make/model/year/image")));
        }
        let make: u32 = parts[0]
            .parse()
            .map_err(|_| Error::ingest(entry, format!("make id {:?} is not numeric", parts[0])))?;
        let model: u32 = parts[1]
            .parse()
            .map_err(|_| Error::ingest(entry, format!("model id {:?} is not numeric", parts[1])))?;
        Ok((make, model, parts[2].parse().ok()))
    }

    fn make_name(&self, id: u32) -> String {
        self.names
            .as_ref()
            .and_then(|n| n.makes.get((id as usize).checked_sub(1)?))
            .filter(|s| !s.is_empty())
            .map(|s| s.replace('_', " "))
            .unwrap_or_else(|| id.to_string())
    }

    fn raw_model_name(&self, id: u32) -> String {
        self.names
            .as_ref()
            .and_then(|n| n.models.get((id as usize).checked_sub(1)?))
            .filter(|s| !s.is_empty())
            .cloned()
            .unwrap_or_else(|| id.to_string())
    }

    /// Fixes display names for every model id so that distinct ids never
    /// collapse into one class.
    fn assign_model_names(&mut self, ids: &[(u32, u32)]) {
        let mut by_class: HashMap<(String, String), Vec<u32>> = HashMap::new();
        let unique: HashSet<(u32, u32)> = ids.iter().copied().collect();
        for &(make, model) in &unique {
            by_class
                .entry((self.make_name(make), self.raw_model_name(model)))
                .or_default()
                .push(model);
        }
        for ((_, name), models) in by_class {
            for m in &models {
                let display = if models.len() > 1 {
                    format!("{name} #{m}")
                } else {
                    name.clone()
                };
                self.model_display.insert(*m, display);
            }
        }
    }

    fn bbox(&self, rel: &str) -> Result<Option<BoundingBox>> {
        let stem = rel.rsplit_once('.').map(|(s, _)| s).unwrap_or(rel);
        let p = self.root.join("label").join(format!("{stem}.txt"));
        if !p.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let entry = p.display().to_string();
        let coords = lines
            .get(2)
            .ok_or_else(|| Error::ingest(&entry, "expected viewpoint, box count and box lines"))?;
        let v: Vec<u32> = coords
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ingest(&entry, format!("bad box line {coords:?}")))?;
        if v.len() != 4 {
            return Err(Error::ingest(&entry, format!("bad box line {coords:?}")));
        }
        BoundingBox::new(v[0], v[1], v[2], v[3])
            .map(Some)
            .map_err(|e| Error::ingest(&entry, e.to_string()))
    }

    fn record(&self, rel: &str, split: Split, entry: &str) -> Result<ImageRecord> {
        let (make, model, year) = self.parse_rel(rel, entry)?;
        let mut r = ImageRecord::new(rel, self.images_root.join(rel), split, Source::CompCars);
        r.make = Some(self.make_name(make));
        r.model = Some(
            self.model_display
                .get(&model)
                .cloned()
                .unwrap_or_else(|| self.raw_model_name(model)),
        );
        r.year = year;
        r.bbox = self.bbox(rel)?;
        Ok(r)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ingest(path.display().to_string(), e.to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn missing(records: &[ImageRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| !r.path.is_file())
        .map(|r| r.id.clone())
        .collect()
}

pub fn load_compcars_classification(annotation_root: &Path, images_root: &Path) -> Result<Ingested> {
    let mut ing = Ingest::new(annotation_root, images_root)?;
    let split_dir = annotation_root.join("train_test_split").join("classification");
    let mut listed = Vec::new();
    for (file, split) in [("train.txt", Split::Train), ("test.txt", Split::Test)] {
        let p = split_dir.join(file);
        for (i, rel) in read_lines(&p)?.into_iter().enumerate() {
            listed.push((rel, split, format!("{}:{}", p.display(), i + 1)));
        }
    }
    let ids: Vec<(u32, u32)> = listed
        .iter()
        .map(|(rel, _, entry)| ing.parse_rel(rel, entry).map(|(a, b, _)| (a, b)))
        .collect::<Result<_>>()?;
    ing.assign_model_names(&ids);
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(listed.len());
    for (rel, split, entry) in &listed {
        if !seen.insert(rel.clone()) {
            return Err(Error::ingest(entry, format!("{rel} listed twice")));
        }
        records.push(ing.record(rel, *split, entry)?);
    }
    let missing_images = missing(&records);
    Ok(Ingested {
        records,
        missing_images,
    })
}

fn parse_pair(line: &str, entry: &str) -> Result<(String, String, bool)> {
    let t: Vec<&str> = line.split_whitespace().collect();
    if t.len() != 3 {
        return Err(Error::ingest(entry, format!("expected 'image image label', got {line:?}")));
    }
    let same = match t[2] {
        "1" => true,
        "0" => false,
        other => return Err(Error::ingest(entry, format!("pair label {other:?} is not 0 or 1"))),
    };
    Ok((t[0].to_string(), t[1].to_string(), same))
}

/// Seeded same/different pairs over the verification training images: each
/// image is paired once with another image of its model (when one exists)
/// and once with an image of a different model.
fn calibration_pairs(records: &[ImageRecord], seed: u64) -> Vec<LabeledPair> {
    let mut by_class: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in records {
        if let Some(l) = r.label(Granularity::MakeModel) {
            by_class.entry(l).or_default().push(&r.id);
        }
    }
    let classes: Vec<&String> = by_class.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let members = &by_class[*class];
        for &id in members {
            let others: Vec<&&str> = members.iter().filter(|m| **m != id).collect();
            if let Some(&&other) = others.choose(&mut rng) {
                pairs.push(LabeledPair::new(id, other, true));
            }
            if classes.len() > 1 {
                let mut cj = ci;
                while cj == ci {
                    cj = rand::Rng::gen_range(&mut rng, 0..classes.len());
                }
                let pool = &by_class[classes[cj]];
                let &other = pool.choose(&mut rng).unwrap();
                pairs.push(LabeledPair::new(id, other, false));
            }
        }
    }
    pairs
}

pub fn load_compcars_verification(
    annotation_root: &Path,
    images_root: &Path,
    seed: u64,
) -> Result<CompCarsVerification> {
    let mut ing = Ingest::new(annotation_root, images_root)?;
    let dir = annotation_root.join("train_test_split").join("verification");

    let train_path = dir.join("verification_train.txt");
    let train_lines = read_lines(&train_path)?;
    let mut set_lines = Vec::new();
    for d in Difficulty::ALL {
        let p = dir.join(format!("verification_pairs_{d}.txt"));
        set_lines.push((d, p.clone(), read_lines(&p)?));
    }

    // every referenced image, in first-seen order, with its split
    let mut order: Vec<(String, Split, String)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut note = |rel: &str, split: Split, entry: String, order: &mut Vec<(String, Split, String)>| {
        if !index.contains_key(rel) {
            index.insert(rel.to_string(), order.len());
            order.push((rel.to_string(), split, entry));
        }
    };
    let mut explicit_calibration = Vec::new();
    for (i, line) in train_lines.iter().enumerate() {
        let entry = format!("{}:{}", train_path.display(), i + 1);
        if line.split_whitespace().count() == 3 {
            let (a, b, same) = parse_pair(line, &entry)?;
            note(&a, Split::Train, entry.clone(), &mut order);
            note(&b, Split::Train, entry, &mut order);
            explicit_calibration.push(LabeledPair::new(a, b, same));
        } else {
            let rel = line.split_whitespace().next().unwrap_or(line);
            note(rel, Split::Train, entry, &mut order);
        }
    }
    let mut sets = BTreeMap::new();
    for (d, p, lines) in &set_lines {
        let mut pairs = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let entry = format!("{}:{}", p.display(), i + 1);
            let (a, b, same) = parse_pair(line, &entry)?;
            note(&a, Split::Test, entry.clone(), &mut order);
            note(&b, Split::Test, entry, &mut order);
            pairs.push(LabeledPair::new(a, b, same));
        }
        sets.insert(*d, pairs);
    }

    let ids: Vec<(u32, u32)> = order
        .iter()
        .map(|(rel, _, entry)| ing.parse_rel(rel, entry).map(|(a, b, _)| (a, b)))
        .collect::<Result<_>>()?;
    ing.assign_model_names(&ids);
    let records: Vec<ImageRecord> = order
        .iter()
        .map(|(rel, split, entry)| ing.record(rel, *split, entry))
        .collect::<Result<_>>()?;

    let calibration = if explicit_calibration.is_empty() {
        let train: Vec<ImageRecord> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect();
        calibration_pairs(&train, seed)
    } else {
        explicit_calibration
    };
    let missing_images = missing(&records);
    Ok(CompCarsVerification {
        records,
        missing_images,
        calibration,
        sets,
    })
}

pub fn load_compcars(
    annotation_root: &Path,
    images_root: &Path,
    task: CompCarsTask,
    seed: u64,
) -> Result<CompCarsData> {
    Ok(match task {
        CompCarsTask::Classification => {
            CompCarsData::Classification(load_compcars_classification(annotation_root, images_root)?)
        }
        CompCarsTask::Verification => {
            CompCarsData::Verification(load_compcars_verification(annotation_root, images_root, seed)?)
        }
    })
}
