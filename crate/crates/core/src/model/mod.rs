//! Image classifiers: architecture, training, batch inference, embeddings
//! and the model file format.
//!
//! A [`ClassifierModel`] maps a square RGB crop to a probability
//! distribution over its [`LabelVocabulary`]. The activations of the stage
//! just before the output layer are exposed as the image's embedding.

mod gemm;
mod io;
mod net;
mod train;

use std::sync::{Arc, OnceLock};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};
pub use net::{gradient_check, Architecture, GradientProbe, Preset};
pub use train::{fine_tune, train, Dataset, EpochLog, TrainConfig, TrainLog};

use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, LabelVocabulary};
use crate::preprocess::{preprocess_record, FullFrameDetector, PreprocessConfig};
use net::Network;

/// Images per inference chunk.
pub const INFERENCE_CHUNK: usize = 4;
const RECORD_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// Free-form task tag, e.g. `make_model` or `color`.
    pub task: String,
    /// SHA-256 of the training configuration.
    pub config_digest: String,
    pub vocabulary_digest: String,
    /// Digest of the model this one was fine-tuned from.
    pub parent_digest: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    net: Network,
    vocabulary: Arc<LabelVocabulary>,
    params: Vec<f64>,
    stats: Vec<f64>,
    preprocess: PreprocessConfig,
    metadata: ModelMetadata,
    digest: OnceLock<String>,
}

impl ClassifierModel {
    pub(crate) fn from_parts(
        arch: &Architecture,
        vocabulary: Arc<LabelVocabulary>,
        params: Vec<f64>,
        stats: Vec<f64>,
        preprocess: PreprocessConfig,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        let net = Network::new(arch)?;
        if arch.n_classes != vocabulary.len() {
            return Err(Error::Shape {
                expected: format!("{} output classes", vocabulary.len()),
                actual: format!("{}", arch.n_classes),
            });
        }
        if params.len() != net.n_params || stats.len() != net.n_stats {
            return Err(Error::Shape {
                expected: format!("{} parameters and {} statistics", net.n_params, net.n_stats),
                actual: format!("{} and {}", params.len(), stats.len()),
            });
        }
        if preprocess.target_size as usize != arch.input_size {
            return Err(Error::Shape {
                expected: format!("preprocess target size {}", arch.input_size),
                actual: format!("{}", preprocess.target_size),
            });
        }
        Ok(Self {
            net,
            vocabulary,
            params,
            stats,
            preprocess,
            metadata,
            digest: OnceLock::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.net.arch
    }

    pub fn vocabulary(&self) -> &Arc<LabelVocabulary> {
        &self.vocabulary
    }

    pub fn input_size(&self) -> u32 {
        self.net.arch.input_size as u32
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.arch.embedding_dim
    }

    /// Preprocessing that raw images must go through before inference.
    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Learned parameters in layout order.
    pub fn weights(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn stats(&self) -> &[f64] {
        &self.stats
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn digest(&self) -> &str {
        self.digest.get_or_init(|| io::content_digest(self))
    }

    fn check_input(&self, image: &RgbImage) -> Result<()> {
        let s = self.input_size();
        if image.dimensions() != (s, s) {
            return Err(Error::Shape {
                expected: format!("{s}x{s} image"),
                actual: format!("{}x{}", image.width(), image.height()),
            });
        }
        Ok(())
    }

    /// Embeddings and probabilities for one chunk, sequentially.
    fn infer(&self, images: &[&RgbImage]) -> (Vec<f64>, Vec<f64>) {
        let n = images.len();
        let side = self.net.arch.input_size;
        let mut x = vec![0.0; n * self.net.input_len()];
        for (i, img) in images.iter().enumerate() {
            write_input(img, &mut x, i, n, side, false, 1.0);
        }
        self.net.infer(&self.params, &self.stats, &x, n)
    }

    fn infer_all(&self, images: &[RgbImage]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        for img in images {
            self.check_input(img)?;
        }
        Ok(images
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&RgbImage> = chunk.iter().collect();
                self.infer(&refs)
            })
            .collect())
    }

    /// One prediction per image, in input order. Chunks run in parallel.
    pub fn predict_batch(&self, images: &[RgbImage]) -> Result<Vec<Prediction>> {
        let k = self.vocabulary.len();
        let mut out = Vec::with_capacity(images.len());
        for (_, probs) in self.infer_all(images)? {
            for row in probs.chunks(k) {
                out.push(Prediction::new(self.vocabulary.clone(), row.to_vec()));
            }
        }
        Ok(out)
    }

    /// Single-image inference.
    pub fn predict(&self, image: &RgbImage) -> Result<Prediction> {
        self.check_input(image)?;
        let (_, probs) = self.infer(&[image]);
        Ok(Prediction::new(self.vocabulary.clone(), probs))
    }

    /// Penultimate-stage activations, one vector of `embedding_dim` per image.
    pub fn extract_features(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let e = self.embedding_dim();
        let mut out = Vec::with_capacity(images.len());
        for (hidden, _) in self.infer_all(images)? {
            out.extend(hidden.chunks(e).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Decodes and aligns records with this model's preprocessing. Crops
    /// that already went through the same preprocessing pass unchanged.
    pub fn load_inputs(&self, records: &[ImageRecord]) -> Result<Vec<RgbImage>> {
        records
            .par_iter()
            .map(|r| Ok(preprocess_record(r, &self.preprocess, &FullFrameDetector)?.into_output()))
            .collect()
    }

    /// [`Self::predict_batch`] over records, decoding a block at a time.
    pub fn predict_records(&self, records: &[ImageRecord]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(records.len());
        for block in records.chunks(RECORD_BLOCK) {
            out.extend(self.predict_batch(&self.load_inputs(block)?)?);
        }
        Ok(out)
    }

    /// [`Self::extract_features`] over records.
    pub fn embed_records(&self, records: &[ImageRecord]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for block in records.chunks(RECORD_BLOCK) {
            out.extend(self.extract_features(&self.load_inputs(block)?)?);
        }
        Ok(out)
    }

    /// Runs the stored output stage on an embedding.
    pub fn classify_embedding(&self, embedding: &[f64]) -> Result<Prediction> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Shape {
                expected: format!("embedding of length {}", self.embedding_dim()),
                actual: embedding.len().to_string(),
            });
        }
        let probs = self.net.classify(&self.params, embedding, 1);
        Ok(Prediction::new(self.vocabulary.clone(), probs))
    }
}

/// Writes image `i` of `n` into a `3 x n x side x side` input tensor.
pub(crate) fn write_input(
    img: &RgbImage,
    x: &mut [f64],
    i: usize,
    n: usize,
    side: usize,
    flip: bool,
    brightness: f64,
) {
    for (px, py, p) in img.enumerate_pixels() {
        let (px, py) = (px as usize, py as usize);
        let col = if flip { side - 1 - px } else { px };
        for c in 0..3 {
            let v = (p.0[c] as f64 * brightness).min(255.0);
            x[(c * n + i) * side * side + py * side + col] = (v / 255.0 - 0.5) / 0.25;
        }
    }
}

/// Class distribution for one image, ranked by confidence.
#[derive(Debug, Clone)]
pub struct Prediction {
    vocabulary: Arc<LabelVocabulary>,
    probabilities: Vec<f64>,
    ranking: Vec<usize>,
}

impl Prediction {
    fn new(vocabulary: Arc<LabelVocabulary>, probabilities: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..probabilities.len()).collect();
        ranking.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
        Self {
            vocabulary,
            probabilities,
            ranking,
        }
    }

    /// Builds a prediction from per-class confidences in vocabulary order.
    pub fn from_probabilities(vocabulary: Arc<LabelVocabulary>, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() != vocabulary.len() {
            return Err(Error::Shape {
                expected: format!("{} confidences", vocabulary.len()),
                actual: probabilities.len().to_string(),
            });
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::usage("confidences must lie in [0, 1]"));
        }
        Ok(Self::new(vocabulary, probabilities))
    }

    pub fn vocabulary(&self) -> &Arc<LabelVocabulary> {
        &self.vocabulary
    }

    /// Confidences in vocabulary order.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Class indices, most confident first; ties by vocabulary index.
    pub fn ranking(&self) -> &[usize] {
        &self.ranking
    }

    pub fn top1(&self) -> usize {
        self.ranking[0]
    }

    /// `(class name, confidence)` for the `k` best classes.
    pub fn top(&self, k: usize) -> Vec<(&str, f64)> {
        self.ranking
            .iter()
            .take(k)
            .map(|&i| (self.vocabulary.name(i), self.probabilities[i]))
            .collect()
    }

    /// Zero-based rank of a class.
    pub fn rank_of(&self, class: usize) -> Option<usize> {
        self.ranking.iter().position(|&c| c == class)
    }
}
