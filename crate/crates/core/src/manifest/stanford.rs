//! Stanford Cars adapter.
//!
//! Two published layouts are accepted:
//!
//! * `cars_annos.mat`, a single file holding every image with a `test` flag
//!   and paths relative to the image root (`car_ims/000001.jpg`);
//! * the devkit directory with `cars_meta.mat`, `cars_train_annos.mat` and
//!   `cars_test_annos_withlabels.mat`, whose images live in `cars_train/`
//!   and `cars_test/` below the image root.
//!
//! Boxes are copied verbatim from the annotations.

use std::path::Path;

use super::mat5::{self, MatValue};
use super::{BoundingBox, ImageRecord, Ingested, Source, Split};
use crate::error::{Error, Result};

/// Makes whose names span more than one word.
const MULTI_WORD_MAKES: [&str; 3] = ["AM General", "Aston Martin", "Land Rover"];

/// Splits a class name such as `"Aston Martin V8 Vantage Coupe 2012"` into
/// make, model and year.
pub fn parse_stanford_class_name(name: &str) -> (String, String, Option<i32>) {
    let name = name.trim();
    let (make, rest) = MULTI_WORD_MAKES
        .iter()
        .find(|m| name.starts_with(*m) && name[m.len()..].starts_with(' '))
        .map(|m| (m.to_string(), name[m.len()..].trim_start()))
        .unwrap_or_else(|| match name.split_once(' ') {
            Some((make, rest)) => (make.to_string(), rest),
            None => (name.to_string(), ""),
        });
    let (model, year) = match rest.rsplit_once(' ') {
        Some((model, y)) if y.len() == 4 && y.parse::<i32>().is_ok() => {
            (model.to_string(), y.parse().ok())
        }
        _ => match rest.parse::<i32>() {
            Ok(y) if rest.len() == 4 => (String::new(), Some(y)),
            _ => (rest.to_string(), None),
        },
    };
    (make, model, year)
}

fn read_vars(path: &Path) -> Result<Option<Vec<(String, MatValue)>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Ok(None);
    }
    mat5::read_mat(&bytes)
        .map(Some)
        .map_err(|reason| Error::ingest(path.display().to_string(), reason))
}

fn class_names(vars: &[(String, MatValue)], file: &Path) -> Result<Vec<String>> {
    let cell = mat5::find(vars, "class_names")
        .and_then(MatValue::cell_items)
        .ok_or_else(|| Error::ingest(file.display().to_string(), "no class_names cell array"))?;
    cell.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_string()
                .ok_or_else(|| Error::ingest(format!("class_names[{}]", i + 1), "not a string"))
        })
        .collect()
}

struct RawAnno {
    file: String,
    bbox: BoundingBox,
    class: usize,
    test: Option<bool>,
}

fn annotations(vars: &[(String, MatValue)], file: &Path) -> Result<Vec<RawAnno>> {
    let annos = match mat5::find(vars, "annotations") {
        Some(a @ MatValue::Struct { .. }) => a,
        Some(MatValue::Empty) => return Ok(Vec::new()),
        _ => return Err(Error::ingest(file.display().to_string(), "no annotations struct array")),
    };
    let path_field = if annos.field(0, "relative_im_path").is_some() {
        "relative_im_path"
    } else {
        "fname"
    };
    let mut out = Vec::with_capacity(annos.len());
    for i in 0..annos.len() {
        let entry = format!("{}: annotations({})", file.display(), i + 1);
        let num = |f: &str| -> Result<u32> {
            let v = annos
                .field(i, f)
                .and_then(MatValue::as_scalar)
                .ok_or_else(|| Error::ingest(&entry, format!("missing numeric field {f}")))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::ingest(&entry, format!("{f} = {v} is not a pixel index")));
            }
            Ok(v as u32)
        };
        let file_name = annos
            .field(i, path_field)
            .and_then(MatValue::as_string)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::ingest(&entry, format!("missing {path_field}")))?;
        let bbox = BoundingBox::new(num("bbox_x1")?, num("bbox_y1")?, num("bbox_x2")?, num("bbox_y2")?)
            .map_err(|e| Error::ingest(&entry, e.to_string()))?;
        let class = num("class")? as usize;
        let test = match annos.field(i, "test") {
            Some(v) => Some(v.as_scalar().ok_or_else(|| Error::ingest(&entry, "bad test flag"))? != 0.0),
            None => None,
        };
        out.push(RawAnno {
            file: file_name,
            bbox,
            class,
            test,
        });
    }
    Ok(out)
}

fn make_record(
    id: String,
    path: std::path::PathBuf,
    anno: &RawAnno,
    names: &[String],
    split: Split,
    entry: &str,
) -> Result<ImageRecord> {
    let name = anno
        .class
        .checked_sub(1)
        .and_then(|i| names.get(i))
        .ok_or_else(|| Error::ingest(entry, format!("class {} outside 1..={}", anno.class, names.len())))?;
    let (make, model, year) = parse_stanford_class_name(name);
    let mut r = ImageRecord::new(id, path, split, Source::Stanford);
    r.make = Some(make);
    r.model = Some(model);
    r.year = year;
    r.bbox = Some(anno.bbox);
    if r.year.is_none() {
        return Err(Error::ingest(entry, format!("class name {name:?} has no year")));
    }
    Ok(r)
}

/// Loads Stanford Cars annotations. `annotation_path` is either
/// `cars_annos.mat` or a devkit directory.
pub fn load_stanford(annotation_path: &Path, images_root: &Path) -> Result<Ingested> {
    let mut records = Vec::new();
    if annotation_path.is_dir() {
        let meta_path = annotation_path.join("cars_meta.mat");
        let meta = read_vars(&meta_path)?
            .ok_or_else(|| Error::ingest(meta_path.display().to_string(), "empty file"))?;
        let names = class_names(&meta, &meta_path)?;
        for (file, split, sub) in [
            ("cars_train_annos.mat", Split::Train, "cars_train"),
            ("cars_test_annos_withlabels.mat", Split::Test, "cars_test"),
        ] {
            let p = annotation_path.join(file);
            let Some(vars) = read_vars(&p)? else { continue };
            for (i, a) in annotations(&vars, &p)?.iter().enumerate() {
                let entry = format!("{}: annotations({})", p.display(), i + 1);
                let id = format!("{sub}/{}", a.file);
                let path = images_root.join(sub).join(&a.file);
                records.push(make_record(id, path, a, &names, split, &entry)?);
            }
        }
    } else {
        let Some(vars) = read_vars(annotation_path)? else {
            return Ok(Ingested::default());
        };
        let names = class_names(&vars, annotation_path)?;
        for (i, a) in annotations(&vars, annotation_path)?.iter().enumerate() {
            let entry = format!("{}: annotations({})", annotation_path.display(), i + 1);
            let split = match a.test {
                Some(true) => Split::Test,
                Some(false) => Split::Train,
                None => return Err(Error::ingest(&entry, "missing test flag")),
            };
            let path = images_root.join(&a.file);
            records.push(make_record(a.file.clone(), path, a, &names, split, &entry)?);
        }
    }
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::ingest(&r.id, "duplicate image entry"));
        }
    }
    let missing_images = records
        .iter()
        .filter(|r| !r.path.is_file())
        .map(|r| r.id.clone())
        .collect();
    Ok(Ingested {
        records,
        missing_images,
    })
}
