//! Canonical dataset model: labeled image records, label vocabularies, the
//! line-delimited manifest file and adapters for the public benchmarks.

mod compcars;
mod format;
pub mod mat5;
mod stanford;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use compcars::{
    load_compcars, load_compcars_classification, load_compcars_verification, CompCarsTask,
    CompCarsData, CompCarsVerification, Difficulty, LabeledPairSets,
};
pub use format::{load_manifest, parse_record, save_manifest, write_record};
pub use stanford::{load_stanford, parse_stanford_class_name};
pub use synthetic::{generate_synthetic, SynthSpec, SyntheticSet};

/// Result of ingesting a public dataset. Records whose image file does not
/// exist are kept and listed in `missing_images`.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub missing_images: Vec<String>,
}

/// Axis-aligned pixel rectangle. `x_max`/`y_max` are exclusive when the box
/// is used for cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Preprocess(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full_frame(width: u32, height: u32) -> Result<Self> {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl FromStr for BoundingBox {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("bbox {s:?} must have four comma-separated values"));
        }
        let mut v = [0u32; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| format!("bbox {s:?}: {p:?} is not a non-negative integer"))?;
        }
        BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Stanford,
    CompCars,
    Synthetic,
    Custom,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Stanford => "stanford",
            Source::CompCars => "compcars",
            Source::Synthetic => "synthetic",
            Source::Custom => "custom",
        }
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stanford" => Ok(Source::Stanford),
            "compcars" => Ok(Source::CompCars),
            "synthetic" => Ok(Source::Synthetic),
            "custom" => Ok(Source::Custom),
            _ => Err(format!("unknown source {s:?}")),
        }
    }
}

/// The ten vehicle colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Blue,
    Black,
    Beige,
    Red,
    White,
    Yellow,
    Orange,
    Purple,
    Green,
    Gray,
}

impl Color {
    pub const ALL: [Color; 10] = [
        Color::Blue,
        Color::Black,
        Color::Beige,
        Color::Red,
        Color::White,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::Green,
        Color::Gray,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Color::Blue => "blue",
            Color::Black => "black",
            Color::Beige => "beige",
            Color::Red => "red",
            Color::White => "white",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Green => "green",
            Color::Gray => "gray",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Color {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Color::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("{s:?} is not one of the ten vehicle colors"))
    }
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub make: Option<String>,
    pub model: Option<String>,
    pub year: Option<i32>,
    pub color: Option<Color>,
    pub bbox: Option<BoundingBox>,
    pub split: Split,
    pub source: Source,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, split: Split, source: Source) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            make: None,
            model: None,
            year: None,
            color: None,
            bbox: None,
            split,
            source,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.model.is_some() && self.make.is_none() {
            return Err(format!("record {}: model present without make", self.id));
        }
        Ok(())
    }

    /// Class name of this record at the given granularity, if it carries
    /// the needed labels.
    pub fn label(&self, granularity: Granularity) -> Option<String> {
        match granularity {
            Granularity::Make => self.make.clone(),
            Granularity::MakeModel => Some(format!("{}_{}", self.make.as_ref()?, self.model.as_ref()?)),
            Granularity::MakeModelYear => Some(format!(
                "{}_{}_{}",
                self.make.as_ref()?,
                self.model.as_ref()?,
                self.year?
            )),
            Granularity::Color => self.color.map(|c| c.as_str().to_string()),
        }
    }

    /// Overwrites the label fields covered by `granularity` with the parts
    /// decoded from `class_name`.
    pub fn set_label(&mut self, granularity: Granularity, class_name: &str) -> Result<(), String> {
        let parts = LabelParts::decode(granularity, class_name)?;
        match granularity {
            Granularity::Make => self.make = parts.make,
            Granularity::MakeModel => {
                self.make = parts.make;
                self.model = parts.model;
            }
            Granularity::MakeModelYear => {
                self.make = parts.make;
                self.model = parts.model;
                self.year = parts.year;
            }
            Granularity::Color => self.color = parts.color,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Make,
    MakeModel,
    MakeModelYear,
    Color,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Make => "make",
            Granularity::MakeModel => "make_model",
            Granularity::MakeModelYear => "make_model_year",
            Granularity::Color => "color",
        }
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "make" => Ok(Granularity::Make),
            "make_model" => Ok(Granularity::MakeModel),
            "make_model_year" => Ok(Granularity::MakeModelYear),
            "color" => Ok(Granularity::Color),
            _ => Err(format!("unknown granularity {s:?}")),
        }
    }
}

/// Label fields recovered from a class name.
///
/// Class names join their parts with `_`: `make_model` and
/// `make_model_year`. The make is everything before the first underscore and
/// the year everything after the last one, so makes must not contain `_`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelParts {
    pub make: Option<String>,
    pub model: Option<String>,
    pub year: Option<i32>,
    pub color: Option<Color>,
}

impl LabelParts {
    pub fn decode(granularity: Granularity, class_name: &str) -> Result<Self, String> {
        let mut parts = LabelParts::default();
        match granularity {
            Granularity::Make => parts.make = Some(class_name.to_string()),
            Granularity::MakeModel => {
                let (make, model) = class_name
                    .split_once('_')
                    .ok_or_else(|| format!("class {class_name:?} is not make_model"))?;
                parts.make = Some(make.to_string());
                parts.model = Some(model.to_string());
            }
            Granularity::MakeModelYear => {
                let (make, rest) = class_name
                    .split_once('_')
                    .ok_or_else(|| format!("class {class_name:?} is not make_model_year"))?;
                let (model, year) = rest
                    .rsplit_once('_')
                    .ok_or_else(|| format!("class {class_name:?} is not make_model_year"))?;
                parts.make = Some(make.to_string());
                parts.model = Some(model.to_string());
                parts.year = Some(
                    year.parse()
                        .map_err(|_| format!("class {class_name:?}: year {year:?} is not an integer"))?,
                );
            }
            Granularity::Color => parts.color = Some(class_name.parse()?),
        }
        Ok(parts)
    }
}

/// Ordered class names; the position of a class is the model's output index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    classes: Vec<String>,
    granularity: Granularity,
}

impl LabelVocabulary {
    /// Sorts the class names lexicographically. Duplicates are an error.
    pub fn new(mut classes: Vec<String>, granularity: Granularity) -> Result<Self> {
        classes.sort();
        if let Some(w) = classes.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::usage(format!("duplicate class name {:?}", w[0])));
        }
        if classes.is_empty() {
            return Err(Error::usage("vocabulary has no classes"));
        }
        Ok(Self {
            classes,
            granularity,
        })
    }

    /// Every distinct label present in `records` at `granularity`. Records
    /// without such a label are ignored.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a ImageRecord>,
        granularity: Granularity,
    ) -> Result<Self> {
        let mut classes: Vec<String> = records
            .into_iter()
            .filter_map(|r| r.label(granularity))
            .collect();
        classes.sort();
        classes.dedup();
        Self::new(classes, granularity)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class_name: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(class_name))
            .ok()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    /// SHA-256 over the granularity and the ordered class list, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }

    pub fn digest_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.granularity.as_str().as_bytes());
        for c in &self.classes {
            h.update(b"\n");
            h.update(c.as_bytes());
        }
        h.finalize().into()
    }
}

/// Published split sizes of the two public benchmarks.
pub mod published {
    pub const STANFORD_TRAIN: usize = 8_144;
    pub const STANFORD_TEST: usize = 8_041;
    pub const STANFORD_CLASSES: usize = 196;
    pub const COMPCARS_TRAIN: usize = 36_456;
    pub const COMPCARS_TEST: usize = 15_627;
    pub const COMPCARS_CLASSES: usize = 431;
    pub const COMPCARS_PAIRS_PER_SET: usize = 20_000;
}

/// Train/test/class counts of a record set, for comparison against the
/// published numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
}

impl SplitCounts {
    pub fn of(records: &[ImageRecord], granularity: Granularity) -> Self {
        let train = records.iter().filter(|r| r.split == Split::Train).count();
        let mut classes: Vec<String> = records.iter().filter_map(|r| r.label(granularity)).collect();
        classes.sort();
        classes.dedup();
        Self {
            train,
            test: records.len() - train,
            classes: classes.len(),
        }
    }
}
