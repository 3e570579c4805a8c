//! Seeded synthetic "vehicle" images for desk-scale runs.
//!
//! Every image shows one object on a noisy neutral background; the object's
//! bounding rectangle is the record's box. In make-model mode the class picks
//! the object's shape family and the fill color is random. In color mode the
//! class picks the fill color and the shape is a random body-like shape.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{save_manifest, BoundingBox, Color, ImageRecord, Source, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub color_mode: bool,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Index of the first class. Lets two calls produce disjoint class sets.
    pub first_class: usize,
}

impl SynthSpec {
    pub fn new(n_classes: usize, n_per_class: usize, color_mode: bool, seed: u64) -> Self {
        Self {
            n_classes,
            n_per_class,
            color_mode,
            seed,
            width: 128,
            height: 96,
            first_class: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::usage("synthetic data needs at least 2 classes"));
        }
        if self.n_per_class < 2 {
            return Err(Error::usage("synthetic data needs at least 2 images per class"));
        }
        if self.color_mode && self.first_class + self.n_classes > Color::ALL.len() {
            return Err(Error::usage(format!(
                "color mode supports at most {} classes",
                Color::ALL.len()
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::usage("synthetic canvas must be at least 16x16"));
        }
        Ok(())
    }

    /// Number of training images per class: floor(0.8 n).
    pub fn train_per_class(&self) -> usize {
        self.n_per_class * 4 / 5
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub records: Vec<ImageRecord>,
    pub manifest_path: PathBuf,
}

pub fn class_name(class: usize) -> String {
    format!("class_{class}")
}

pub fn color_rgb(c: Color) -> [u8; 3] {
    match c {
        Color::Blue => [30, 60, 200],
        Color::Black => [22, 22, 26],
        Color::Beige => [225, 205, 160],
        Color::Red => [200, 30, 30],
        Color::White => [245, 245, 245],
        Color::Yellow => [235, 215, 40],
        Color::Orange => [240, 130, 20],
        Color::Purple => [120, 40, 160],
        Color::Green => [40, 160, 60],
        Color::Gray => [128, 128, 128],
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Ellipse,
    Rectangle,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

const KINDS: [Kind; 6] = [
    Kind::Ellipse,
    Kind::Rectangle,
    Kind::Triangle,
    Kind::Diamond,
    Kind::Cross,
    Kind::Ring,
];

#[derive(Debug, Clone, Copy)]
struct Family {
    kind: Kind,
    /// 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker, 4 diagonal
    pattern: usize,
    /// stripe period as a fraction of the object's size
    period: f64,
}

fn family(class: usize) -> Family {
    let kind = KINDS[class % KINDS.len()];
    let pattern = (class / KINDS.len()) % 5;
    let cycle = class / (KINDS.len() * 5);
    Family {
        kind,
        pattern,
        period: 0.25 / (1.0 + cycle as f64),
    }
}

fn inside(kind: Kind, u: f64, v: f64) -> bool {
    let (du, dv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match kind {
        Kind::Ellipse => du * du + dv * dv <= 1.0,
        Kind::Rectangle => true,
        Kind::Triangle => v >= du.abs(),
        Kind::Diamond => du.abs() + dv.abs() <= 1.0,
        Kind::Cross => du.abs() <= 0.34 || dv.abs() <= 0.34,
        Kind::Ring => {
            let r = du * du + dv * dv;
            (0.3..=1.0).contains(&r)
        }
    }
}

fn pattern_dark(f: &Family, u: f64, v: f64) -> bool {
    let band = |t: f64| ((t / f.period).floor() as i64).rem_euclid(2) == 1;
    match f.pattern {
        1 => band(v),
        2 => band(u),
        3 => band(u) ^ band(v),
        4 => band((u + v) * 0.7),
        _ => false,
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

struct Rendered {
    image: RgbImage,
    bbox: BoundingBox,
    fill: Color,
}

fn render(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Rendered {
    let (w, h) = (spec.width, spec.height);
    let bg_tint: [f64; 3] = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];

    let bw = rng.gen_range((w as f64 * 0.55)..(w as f64 * 0.85)).round() as u32;
    let bh = rng.gen_range((h as f64 * 0.5)..(h as f64 * 0.8)).round() as u32;
    let x0 = rng.gen_range(0..=(w - bw));
    let y0 = rng.gen_range(0..=(h - bh));
    let bbox = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("non-empty synthetic box");

    let (fill, fam) = if spec.color_mode {
        let fill = Color::ALL[class];
        let kind = if rng.gen_bool(0.5) { Kind::Ellipse } else { Kind::Rectangle };
        (fill, Family { kind, pattern: 0, period: 1.0 })
    } else {
        (Color::ALL[rng.gen_range(0..Color::ALL.len())], family(class))
    };
    // keep the background well away from the fill's brightness
    let rgb = color_rgb(fill);
    let luma = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    let bg = if luma > 110.0 {
        rng.gen_range(25.0..60.0)
    } else {
        rng.gen_range(175.0..215.0)
    };
    let gain = rng.gen_range(0.92..1.08);
    let base = color_rgb(fill).map(|c| c as f64 * gain);

    let mut image = RgbImage::new(w, h);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let noise = rng.gen_range(-6.0..6.0);
        let in_box = x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh;
        let u = (x as f64 - x0 as f64 + 0.5) / bw as f64;
        let v = (y as f64 - y0 as f64 + 0.5) / bh as f64;
        let c = if in_box && inside(fam.kind, u, v) {
            let k = if pattern_dark(&fam, u, v) { 0.45 } else { 1.0 };
            [base[0] * k + noise, base[1] * k + noise, base[2] * k + noise]
        } else {
            [bg + bg_tint[0] + noise, bg + bg_tint[1] + noise, bg + bg_tint[2] + noise]
        };
        *px = Rgb(c.map(clamp_u8));
    }
    Rendered { image, bbox, fill }
}

/// Renders the images under `out_dir/images/`, writes `out_dir/manifest.tsv`
/// and returns the records. Output depends only on `spec` and `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SyntheticSet> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let train_n = spec.train_per_class();
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.n_per_class).map(move |i| (spec.first_class + c, i)))
        .collect();

    let records = jobs
        .par_iter()
        .map(|&(class, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((class as u64) << 32) | i as u64);
            let r = render(spec, class, &mut rng);
            let id = format!("syn_{class:03}_{i:04}");
            let path = image_dir.join(format!("{id}.png"));
            r.image
                .save(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            let split = if i < train_n { Split::Train } else { Split::Test };
            let mut rec = ImageRecord::new(id, path, split, Source::Synthetic);
            rec.make = Some("synthetic".into());
            rec.model = Some(class_name(class));
            rec.color = Some(if spec.color_mode { Color::ALL[class] } else { r.fill });
            rec.bbox = Some(r.bbox);
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = out_dir.join("manifest.tsv");
    save_manifest(&records, &manifest_path)?;
    Ok(SyntheticSet {
        records,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_split_for_color_set() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_synthetic(&SynthSpec::new(10, 20, true, 7), dir.path()).unwrap();
        assert_eq!(set.records.len(), 200);
        let train = set.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!((train, 200 - train), (160, 40));
        let mut colors: Vec<_> = set.records.iter().map(|r| r.color.unwrap()).collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 10);
    }

    #[test]
    fn two_per_class_splits_one_one() {
        // floor(0.8 * 2) = 1 train image per class
        let dir = tempfile::tempdir().unwrap();
        let set = generate_synthetic(&SynthSpec::new(2, 2, false, 1), dir.path()).unwrap();
        assert_eq!(set.records.len(), 4);
        let train = set.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 2);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(3, 4, false, 42);
        let a = generate_synthetic(&spec, dir.path()).unwrap();
        let manifest_a = std::fs::read(&a.manifest_path).unwrap();
        let img_a = std::fs::read(&a.records[5].path).unwrap();
        let b = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest_a, std::fs::read(&b.manifest_path).unwrap());
        assert_eq!(img_a, std::fs::read(&b.records[5].path).unwrap());
    }

    #[test]
    fn boxes_lie_inside_the_canvas() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(4, 5, false, 3);
        let set = generate_synthetic(&spec, dir.path()).unwrap();
        for r in &set.records {
            assert!(r.bbox.unwrap().fits_within(spec.width, spec.height));
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [
            SynthSpec::new(11, 2, true, 0),
            SynthSpec::new(1, 5, false, 0),
            SynthSpec::new(3, 1, false, 0),
        ] {
            let err = generate_synthetic(&spec, dir.path()).unwrap_err();
            assert_eq!(err.kind(), crate::error::ErrorKind::Usage);
        }
    }

    #[test]
    fn families_are_distinct_for_thirty_classes() {
        let sigs: std::collections::HashSet<String> =
            (0..30).map(|c| format!("{:?}", family(c))).collect();
        assert_eq!(sigs.len(), 30);
    }
}
