//! Alignment and normalization of vehicle crops.
//!
//! The pipeline for one image is: pick a box (record annotation, then
//! detector, then full frame), expand it by a margin proportional to its own
//! size, crop, resample to a square with bilinear interpolation, and
//! optionally blank everything outside the inscribed ellipse.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{BoundingBox, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Confidence in [0, 1].
    pub score: f32,
}

/// Anything that can propose vehicle boxes for an image. `hint` is the
/// record id when one is known.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &RgbImage, hint: Option<&str>) -> Vec<Detection>;
}

/// Serves boxes from a lookup table keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthDetector {
    boxes: HashMap<String, BoundingBox>,
}

impl GroundTruthDetector {
    pub fn new(boxes: HashMap<String, BoundingBox>) -> Self {
        Self { boxes }
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Self {
        Self {
            boxes: records
                .into_iter()
                .filter_map(|r| r.bbox.map(|b| (r.id.clone(), b)))
                .collect(),
        }
    }
}

impl Detector for GroundTruthDetector {
    fn detect(&self, image: &RgbImage, hint: Option<&str>) -> Vec<Detection> {
        hint.and_then(|id| self.boxes.get(id))
            .filter(|b| b.fits_within(image.width(), image.height()))
            .map(|b| vec![Detection { bbox: *b, score: 1.0 }])
            .unwrap_or_default()
    }
}

/// Treats the whole frame as the vehicle.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullFrameDetector;

impl Detector for FullFrameDetector {
    fn detect(&self, image: &RgbImage, _hint: Option<&str>) -> Vec<Detection> {
        BoundingBox::full_frame(image.width(), image.height())
            .map(|bbox| vec![Detection { bbox, score: 1.0 }])
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    Black,
    /// Mean color of the pixels inside the ellipse.
    CropMean,
}

impl FromStr for MaskFill {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "black" => Ok(MaskFill::Black),
            "mean" | "crop_mean" => Ok(MaskFill::CropMean),
            _ => Err(format!("unknown mask fill {s:?} (expected black or mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub margin_fraction: f64,
    pub target_size: u32,
    pub mask_fill: MaskFill,
    pub apply_mask: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            margin_fraction: 0.10,
            target_size: 224,
            mask_fill: MaskFill::Black,
            apply_mask: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin_fraction) {
            return Err(Error::usage(format!(
                "margin fraction {} must be in [0, 1)",
                self.margin_fraction
            )));
        }
        if self.target_size < 8 {
            return Err(Error::usage(format!(
                "target size {} must be at least 8",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// Moves each side outward by `margin_fraction` of the box's own width
/// (left/right) or height (top/bottom), rounded to whole pixels, then clamps
/// to the image.
pub fn expand_box(
    bbox: &BoundingBox,
    margin_fraction: f64,
    image_width: u32,
    image_height: u32,
) -> Result<BoundingBox> {
    if bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max {
        return Err(Error::Preprocess(format!("degenerate box {bbox}")));
    }
    if !bbox.fits_within(image_width, image_height) {
        return Err(Error::Preprocess(format!(
            "box {bbox} exceeds image {image_width}x{image_height}"
        )));
    }
    if !(0.0..1.0).contains(&margin_fraction) {
        return Err(Error::usage(format!("margin fraction {margin_fraction} must be in [0, 1)")));
    }
    let dx = (margin_fraction * bbox.width() as f64).round() as i64;
    let dy = (margin_fraction * bbox.height() as f64).round() as i64;
    let clamp = |v: i64, hi: u32| v.clamp(0, hi as i64) as u32;
    BoundingBox::new(
        clamp(bbox.x_min as i64 - dx, image_width),
        clamp(bbox.y_min as i64 - dy, image_height),
        clamp(bbox.x_max as i64 + dx, image_width),
        clamp(bbox.y_max as i64 + dy, image_height),
    )
}

/// Source coordinate sampled by output index `i` when `src_len` pixels
/// starting at `src_start` are stretched over `dst_len` pixels
/// (pixel-center alignment, clamped to the crop).
fn source_coord(i: u32, dst_len: u32, src_start: u32, src_len: u32) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    let s = (i as f64 + 0.5) * scale - 0.5;
    src_start as f64 + s.clamp(0.0, (src_len - 1) as f64)
}

/// Crops `bbox` and resamples it to `target_size` x `target_size` with
/// bilinear interpolation. Aspect ratio is not preserved.
pub fn crop_and_resize(image: &RgbImage, bbox: &BoundingBox, target_size: u32) -> Result<RgbImage> {
    if target_size == 0 {
        return Err(Error::usage("target size must be positive"));
    }
    if !bbox.fits_within(image.width(), image.height()) {
        return Err(Error::Preprocess(format!(
            "box {bbox} exceeds image {}x{}",
            image.width(),
            image.height()
        )));
    }
    let xs: Vec<(u32, u32, f64)> = (0..target_size)
        .map(|u| {
            let x = source_coord(u, target_size, bbox.x_min, bbox.width());
            let x0 = x.floor() as u32;
            let x1 = (x0 + 1).min(bbox.x_max - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect();
    let mut out = RgbImage::new(target_size, target_size);
    for v in 0..target_size {
        let y = source_coord(v, target_size, bbox.y_min, bbox.height());
        let y0 = y.floor() as u32;
        let y1 = (y0 + 1).min(bbox.y_max - 1);
        let fy = y - y0 as f64;
        for (u, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = image.get_pixel(x0, y0).0;
            let p10 = image.get_pixel(x1, y0).0;
            let p01 = image.get_pixel(x0, y1).0;
            let p11 = image.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(u as u32, v, Rgb(px));
        }
    }
    Ok(out)
}

/// Whether pixel `(x, y)` of a `width` x `height` image lies in the
/// inscribed ellipse, testing the pixel center.
pub fn inside_ellipse(x: u32, y: u32, width: u32, height: u32) -> bool {
    let (a, b) = (width as f64 / 2.0, height as f64 / 2.0);
    let dx = (x as f64 + 0.5 - a) / a;
    let dy = (y as f64 + 0.5 - b) / b;
    dx * dx + dy * dy <= 1.0
}

/// Replaces every pixel outside the inscribed ellipse with the fill value.
pub fn elliptical_mask(image: &RgbImage, fill: MaskFill) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w != h || w == 0 {
        return Err(Error::Preprocess(format!("elliptical mask needs a square crop, got {w}x{h}")));
    }
    let fill_px = match fill {
        MaskFill::Black => Rgb([0, 0, 0]),
        MaskFill::CropMean => {
            let mut sum = [0u64; 3];
            let mut n = 0u64;
            for (x, y, p) in image.enumerate_pixels() {
                if inside_ellipse(x, y, w, h) {
                    for c in 0..3 {
                        sum[c] += p.0[c] as u64;
                    }
                    n += 1;
                }
            }
            let n = n.max(1);
            Rgb(sum.map(|s| ((s as f64) / n as f64).round() as u8))
        }
    };
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if !inside_ellipse(x, y, w, h) {
            *p = fill_px;
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(img.to_rgb8())
}

/// Where the crop box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Annotation,
    Detector,
    /// No box was available; the whole frame was used.
    Unaligned,
}

impl Alignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alignment::Annotation => "annotation",
            Alignment::Detector => "detector",
            Alignment::Unaligned => "unaligned",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub aligned: RgbImage,
    pub masked: Option<RgbImage>,
    pub alignment: Alignment,
    /// Box before margin expansion.
    pub source_box: BoundingBox,
    /// Box actually cropped.
    pub crop_box: BoundingBox,
}

impl Preprocessed {
    /// The masked crop when masking was requested, otherwise the aligned one.
    pub fn output(&self) -> &RgbImage {
        self.masked.as_ref().unwrap_or(&self.aligned)
    }

    pub fn into_output(self) -> RgbImage {
        self.masked.unwrap_or(self.aligned)
    }
}

fn clamp_to_image(b: &BoundingBox, w: u32, h: u32) -> Option<BoundingBox> {
    BoundingBox::new(b.x_min.min(w), b.y_min.min(h), b.x_max.min(w), b.y_max.min(h)).ok()
}

/// Runs the alignment pipeline on an already decoded image.
pub fn preprocess_image(
    image: &RgbImage,
    annotated: Option<BoundingBox>,
    hint: Option<&str>,
    config: &PreprocessConfig,
    detector: &dyn Detector,
) -> Result<Preprocessed> {
    config.validate()?;
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Preprocess("empty image".into()));
    }
    let (source_box, alignment) = match annotated {
        Some(b) => {
            let b = clamp_to_image(&b, w, h).ok_or_else(|| {
                Error::Preprocess(format!("annotated box {b} lies outside the {w}x{h} image"))
            })?;
            (b, Alignment::Annotation)
        }
        None => {
            let best = detector
                .detect(image, hint)
                .into_iter()
                .filter(|d| d.bbox.fits_within(w, h) && d.score.is_finite())
                .fold(None::<Detection>, |best, d| match best {
                    Some(b) if b.score >= d.score => Some(b),
                    _ => Some(d),
                });
            match best {
                Some(d) => (d.bbox, Alignment::Detector),
                None => (BoundingBox::full_frame(w, h)?, Alignment::Unaligned),
            }
        }
    };
    let crop_box = expand_box(&source_box, config.margin_fraction, w, h)?;
    let aligned = crop_and_resize(image, &crop_box, config.target_size)?;
    let masked = if config.apply_mask {
        Some(elliptical_mask(&aligned, config.mask_fill)?)
    } else {
        None
    };
    Ok(Preprocessed {
        aligned,
        masked,
        alignment,
        source_box,
        crop_box,
    })
}

/// Loads the record's image and runs the alignment pipeline. The record's
/// own box takes precedence; the detector is only consulted without one.
pub fn preprocess_record(
    record: &ImageRecord,
    config: &PreprocessConfig,
    detector: &dyn Detector,
) -> Result<Preprocessed> {
    let image = load_image(&record.path)?;
    preprocess_image(&image, record.bbox, Some(&record.id), config, detector)
}
