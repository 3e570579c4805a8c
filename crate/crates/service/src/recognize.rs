use image::RgbImage;
use mmcr::manifest::{BoundingBox, LabelParts};
use mmcr::model::{ClassifierModel, Prediction};
use mmcr::preprocess::{preprocess_image, Alignment, Detector};
use serde::{Deserialize, Serialize};

pub const RECOGNITION_SCHEMA: &str = "mmcr-recognition/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MakeModelEntry {
    pub class: String,
    pub make: Option<String>,
    pub model: Option<String>,
    pub year: Option<i32>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorEntry {
    pub color: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Vehicle {
    pub bounding_box: BoundingBox,
    pub alignment: Alignment,
    pub make_models: Option<Vec<MakeModelEntry>>,
    pub color: Option<Vec<ColorEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelDigests {
    pub make_model: Option<String>,
    pub color: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Recognition {
    pub schema: String,
    pub image_width: u32,
    pub image_height: u32,
    pub vehicles: Vec<Vehicle>,
    pub models: ModelDigests,
}

fn classify(
    image: &RgbImage,
    model: &ClassifierModel,
    detector: &dyn Detector,
) -> mmcr::Result<(Prediction, BoundingBox, Alignment)> {
    let p = preprocess_image(image, None, None, model.preprocess(), detector)?;
    let pred = model.predict(p.output())?;
    Ok((pred, p.source_box, p.alignment))
}

/// Runs the detector-aligned pipeline with each available model. One
/// vehicle is reported: the detector's best box, or the full frame.
pub fn recognize_image(
    image: &RgbImage,
    make_model: Option<&ClassifierModel>,
    color: Option<&ClassifierModel>,
    detector: &dyn Detector,
    top_k: usize,
) -> mmcr::Result<Recognition> {
    let mut bbox = None;
    let mut make_models = None;
    let mut colors = None;
    if let Some(m) = make_model {
        let (pred, b, a) = classify(image, m, detector)?;
        bbox = Some((b, a));
        let g = m.vocabulary().granularity();
        make_models = Some(
            pred.top(top_k)
                .into_iter()
                .map(|(class, confidence)| {
                    let parts = LabelParts::decode(g, class).unwrap_or_default();
                    MakeModelEntry {
                        class: class.to_string(),
                        make: parts.make,
                        model: parts.model,
                        year: parts.year,
                        confidence,
                    }
                })
                .collect(),
        );
    }
    if let Some(m) = color {
        let (pred, b, a) = classify(image, m, detector)?;
        bbox.get_or_insert((b, a));
        colors = Some(
            pred.top(top_k)
                .into_iter()
                .map(|(c, confidence)| ColorEntry {
                    color: c.to_string(),
                    confidence,
                })
                .collect(),
        );
    }
    let (bounding_box, alignment) = bbox.ok_or_else(|| mmcr::Error::Usage("no model is loaded".into()))?;
    Ok(Recognition {
        schema: RECOGNITION_SCHEMA.into(),
        image_width: image.width(),
        image_height: image.height(),
        vehicles: vec![Vehicle {
            bounding_box,
            alignment,
            make_models,
            color: colors,
        }],
        models: ModelDigests {
            make_model: make_model.map(|m| m.digest().to_string()),
            color: color.map(|m| m.digest().to_string()),
        },
    })
}
