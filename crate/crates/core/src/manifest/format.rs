use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{BoundingBox, ImageRecord};
use crate::error::{Error, Result};
use crate::kvline::{Fields, LineWriter};

const KEYS: [&str; 9] = [
    "id", "path", "make", "model", "year", "color", "bbox", "split", "source",
];

pub fn write_record(record: &ImageRecord) -> Result<String> {
    let path = record.path.to_str().ok_or_else(|| {
        Error::usage(format!("record {}: path is not valid UTF-8", record.id))
    })?;
    Ok(LineWriter::new()
        .field("id", &record.id)
        .field("path", path)
        .opt_field("make", record.make.as_deref())
        .opt_field("model", record.model.as_deref())
        .opt_field("year", record.year.map(|y| y.to_string()))
        .opt_field("color", record.color.map(|c| c.as_str()))
        .opt_field("bbox", record.bbox.map(|b| b.to_string()))
        .field("split", record.split.as_str())
        .field("source", record.source.as_str())
        .finish())
}

pub fn parse_record(line: &str) -> Result<ImageRecord, String> {
    let f = Fields::parse(line, &KEYS)?;
    let record = ImageRecord {
        id: f.require("id")?.to_string(),
        path: PathBuf::from(f.require("path")?),
        make: f.get("make").map(str::to_string),
        model: f.get("model").map(str::to_string),
        year: f
            .get("year")
            .map(|y| y.parse().map_err(|_| format!("year {y:?} is not an integer")))
            .transpose()?,
        color: f.get("color").map(str::parse).transpose()?,
        bbox: f.get("bbox").map(str::parse::<BoundingBox>).transpose()?,
        split: f.require("split")?.parse()?,
        source: f.require("source")?.parse()?,
    };
    record.validate()?;
    Ok(record)
}

/// Writes one record per line. Ids must be unique.
pub fn save_manifest(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate().map_err(Error::usage)?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::usage(format!("duplicate record id {:?}", r.id)));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = write_record(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let record = parse_record(&line).map_err(|reason| Error::ManifestLine {
            line: line_no,
            reason,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::ManifestLine {
                line: line_no,
                reason: format!("duplicate id {:?}", record.id),
            });
        }
        records.push(record);
    }
    Ok(records)
}
