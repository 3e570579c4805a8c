//! Mini-batch SGD training and fine-tuning.
//!
//! Normalization statistics are not tracked as running averages. After every
//! epoch they are recomputed exactly over the (unaugmented) training set,
//! stage by stage, so a model's statistics depend only on its weights and
//! its training data.

use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Architecture, Network, Preset};
use super::{write_input, ClassifierModel, ModelMetadata, INFERENCE_CHUNK};
use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, LabelVocabulary, Split};
use crate::preprocess::{load_image, preprocess_record, FullFrameDetector, PreprocessConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub flip: bool,
    /// Brightness factors are drawn from `[1 - j, 1 + j]`; 0 disables.
    pub brightness_jitter: f64,
    pub preset: Preset,
    pub embedding_dim: usize,
    pub pool_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step: 6,
            lr_decay: 0.3,
            seed: 0,
            flip: true,
            brightness_jitter: 0.1,
            preset: Preset::Tiny,
            embedding_dim: 256,
            pool_grid: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("lr_step", self.lr_step),
            ("embedding_dim", self.embedding_dim),
            ("pool_grid", self.pool_grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("{name} must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::usage("learning_rate must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::usage("weight_decay must be non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::usage("lr_decay must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::usage("brightness_jitter must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: String,
    pub fine_tune: bool,
    pub parent_digest: Option<String>,
    pub config_digest: String,
    pub n_train: usize,
    pub n_heldout: usize,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per line: a run header then one line per epoch.
    pub fn to_json_lines(&self) -> String {
        let mut head = serde_json::to_value(self).expect("log serializes");
        head.as_object_mut().unwrap().remove("epochs");
        let mut out = head.to_string();
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

struct Sample {
    image: RgbImage,
    label: usize,
}

/// Decoded, model-sized training and held-out images.
pub struct Dataset {
    vocabulary: Arc<LabelVocabulary>,
    preprocess: PreprocessConfig,
    train: Vec<Sample>,
    heldout: Vec<Sample>,
}

impl Dataset {
    /// Loads every record of the train and test splits. With `preprocessed`
    /// the images must already be `target_size` squares; otherwise each one
    /// goes through the alignment pipeline described by `preprocess`.
    ///
    /// Train records must carry a label inside the vocabulary. Test records
    /// whose label is missing or unknown are skipped.
    pub fn from_records(
        records: &[ImageRecord],
        vocabulary: Arc<LabelVocabulary>,
        preprocess: PreprocessConfig,
        preprocessed: bool,
    ) -> Result<Self> {
        preprocess.validate()?;
        let g = vocabulary.granularity();
        let mut jobs = Vec::new();
        for r in records {
            let label = r.label(g).and_then(|l| vocabulary.index_of(&l));
            match (r.split, label) {
                (Split::Train, None) => {
                    return Err(Error::Label {
                        record: r.id.clone(),
                        reason: match r.label(g) {
                            Some(l) => format!("label {l:?} is not in the vocabulary"),
                            None => format!("no {} label", g.as_str()),
                        },
                    })
                }
                (split, Some(label)) => jobs.push((r, split, label)),
                (Split::Test, None) => {}
            }
        }
        let side = preprocess.target_size;
        let loaded: Vec<(Split, Sample)> = jobs
            .par_iter()
            .map(|&(r, split, label)| {
                let image = if preprocessed {
                    let img = load_image(&r.path)?;
                    if img.dimensions() != (side, side) {
                        return Err(Error::Shape {
                            expected: format!("{side}x{side} image for {}", r.id),
                            actual: format!("{}x{}", img.width(), img.height()),
                        });
                    }
                    img
                } else {
                    preprocess_record(r, &preprocess, &FullFrameDetector)?.into_output()
                };
                Ok((split, Sample { image, label }))
            })
            .collect::<Result<_>>()?;
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for (split, s) in loaded {
            match split {
                Split::Train => train.push(s),
                Split::Test => heldout.push(s),
            }
        }
        Ok(Self {
            vocabulary,
            preprocess,
            train,
            heldout,
        })
    }

    /// Builds a dataset from images already at the model's input size.
    pub fn from_images(
        vocabulary: Arc<LabelVocabulary>,
        preprocess: PreprocessConfig,
        train: Vec<(RgbImage, usize)>,
        heldout: Vec<(RgbImage, usize)>,
    ) -> Result<Self> {
        let side = preprocess.target_size;
        for (img, label) in train.iter().chain(&heldout) {
            if img.dimensions() != (side, side) {
                return Err(Error::Shape {
                    expected: format!("{side}x{side} image"),
                    actual: format!("{}x{}", img.width(), img.height()),
                });
            }
            if *label >= vocabulary.len() {
                return Err(Error::usage(format!("label index {label} outside the vocabulary")));
            }
        }
        let wrap = |v: Vec<(RgbImage, usize)>| v.into_iter().map(|(image, label)| Sample { image, label }).collect();
        Ok(Self {
            vocabulary,
            preprocess,
            train: wrap(train),
            heldout: wrap(heldout),
        })
    }

    pub fn vocabulary(&self) -> &Arc<LabelVocabulary> {
        &self.vocabulary
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_heldout(&self) -> usize {
        self.heldout.len()
    }

    /// Writes the named samples into a `3 x n x side x side` tensor.
    fn tensor(samples: &[&Sample], side: usize, aug: Option<&[(bool, f64)]>) -> Vec<f64> {
        let n = samples.len();
        let mut x = vec![0.0; n * 3 * side * side];
        for (i, s) in samples.iter().enumerate() {
            let (flip, b) = aug.map_or((false, 1.0), |a| a[i]);
            write_input(&s.image, &mut x, i, n, side, flip, b);
        }
        x
    }
}

/// Trains a fresh model on the dataset's train split.
pub fn train(data: &Dataset, config: &TrainConfig, task: &str) -> Result<(ClassifierModel, TrainLog)> {
    config.validate()?;
    let arch = Architecture {
        preset: config.preset,
        input_size: data.preprocess.target_size as usize,
        embedding_dim: config.embedding_dim,
        n_classes: data.vocabulary.len(),
        pool_grid: config.pool_grid,
    };
    let net = Network::new(&arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; net.n_params];
    for c in &net.convs {
        fill_normal(&mut params[c.weight..c.gamma], (2.0 / (c.cin * 9) as f64).sqrt(), &mut rng);
        params[c.gamma..c.beta].fill(1.0);
    }
    fill_normal(&mut params[net.fc1_w..net.fc1_b], (2.0 / net.feat_dim as f64).sqrt(), &mut rng);
    init_output_stage(&net, &mut params, &mut rng);
    run(net, params, data, config, task.to_string(), None, rng)
}

/// Continues training from `parent`. The feature stages are kept; the output
/// stage is re-initialized when the dataset's vocabulary differs from the
/// parent's.
pub fn fine_tune(
    parent: &ClassifierModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    config.validate()?;
    let parent_arch = parent.architecture();
    if data.preprocess.target_size != parent.input_size() {
        return Err(Error::Shape {
            expected: format!("{0}x{0} inputs for the parent model", parent.input_size()),
            actual: format!("{0}x{0}", data.preprocess.target_size),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let same_vocab = **parent.vocabulary() == *data.vocabulary;
    let arch = Architecture {
        n_classes: data.vocabulary.len(),
        ..parent_arch.clone()
    };
    let net = Network::new(&arch)?;
    let mut params = parent.params().to_vec();
    if !same_vocab {
        params.truncate(net.fc2_w);
        params.resize(net.n_params, 0.0);
        init_output_stage(&net, &mut params, &mut rng);
    }
    run(
        net,
        params,
        data,
        config,
        parent.metadata().task.clone(),
        Some(parent.digest().to_string()),
        rng,
    )
}

fn fill_normal(dst: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in dst {
        *v = dist.sample(rng);
    }
}

fn init_output_stage(net: &Network, params: &mut [f64], rng: &mut ChaCha8Rng) {
    let std = (1.0 / net.arch.embedding_dim as f64).sqrt();
    fill_normal(&mut params[net.fc2_w..net.fc2_b], std, rng);
    params[net.fc2_b..].fill(0.0);
}

fn run(
    net: Network,
    mut params: Vec<f64>,
    data: &Dataset,
    config: &TrainConfig,
    task: String,
    parent_digest: Option<String>,
    mut rng: ChaCha8Rng,
) -> Result<(ClassifierModel, TrainLog)> {
    if data.train.is_empty() {
        return Err(Error::usage("the train split is empty"));
    }
    let side = net.arch.input_size;
    let mut decay = vec![0.0; net.n_params];
    for r in net.weight_ranges() {
        decay[r].fill(config.weight_decay);
    }
    let mut velocity = vec![0.0; net.n_params];
    let mut grad = vec![0.0; net.n_params];
    let mut stats = initial_stats(&net);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let aug: Vec<(bool, f64)> = batch
                .iter()
                .map(|_| {
                    let flip = config.flip && rng.gen_bool(0.5);
                    let j = config.brightness_jitter;
                    let b = if j > 0.0 { rng.gen_range(1.0 - j..=1.0 + j) } else { 1.0 };
                    (flip, b)
                })
                .collect();
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let x = Dataset::tensor(&samples, side, Some(&aug));
            let loss = net.loss_and_grad(&params, &x, batch.len(), &labels, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Internal(format!(
                    "training diverged at epoch {} (loss {loss}); lower the learning rate",
                    epoch + 1
                )));
            }
            loss_sum += loss * batch.len() as f64;
            for i in 0..params.len() {
                velocity[i] = config.momentum * velocity[i] + grad[i] + decay[i] * params[i];
                params[i] -= lr * velocity[i];
            }
        }
        recompute_stats(&net, &params, &mut stats, &data.train);
        let heldout_accuracy = (!data.heldout.is_empty()).then(|| accuracy(&net, &params, &stats, &data.heldout));
        epochs.push(EpochLog {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: loss_sum / data.train.len() as f64,
            heldout_accuracy,
        });
    }

    let metadata = ModelMetadata {
        task: task.clone(),
        config_digest: config.digest(),
        vocabulary_digest: data.vocabulary.digest(),
        parent_digest: parent_digest.clone(),
    };
    let model = ClassifierModel::from_parts(
        &net.arch,
        data.vocabulary.clone(),
        params,
        stats,
        data.preprocess,
        metadata,
    )?;
    let log = TrainLog {
        task,
        fine_tune: parent_digest.is_some(),
        parent_digest,
        config_digest: config.digest(),
        n_train: data.train.len(),
        n_heldout: data.heldout.len(),
        epochs,
    };
    Ok((model, log))
}

fn initial_stats(net: &Network) -> Vec<f64> {
    let mut s = vec![0.0; net.n_stats];
    for c in &net.convs {
        s[c.var..c.var + c.cout].fill(1.0);
    }
    s
}

/// Population mean and variance of every stage's pre-normalization output,
/// computed in stage order so each stage sees its predecessors' new values.
fn recompute_stats(net: &Network, params: &[f64], stats: &mut [f64], samples: &[Sample]) {
    let side = net.arch.input_size;
    let refs: Vec<&Sample> = samples.iter().collect();
    for (l, layer) in net.convs.iter().enumerate() {
        let frozen: &[f64] = stats;
        let partial: Vec<Vec<(f64, f64)>> = refs
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let x = Dataset::tensor(chunk, side, None);
                let z = net.trunk(params, frozen, &x, chunk.len(), Some(l));
                let m = chunk.len() * layer.side_out * layer.side_out;
                (0..layer.cout)
                    .map(|c| {
                        let zc = &z[c * m..(c + 1) * m];
                        (zc.iter().sum(), zc.iter().map(|v| v * v).sum())
                    })
                    .collect()
            })
            .collect();
        let count = (samples.len() * layer.side_out * layer.side_out) as f64;
        for c in 0..layer.cout {
            let (mut s, mut ss) = (0.0, 0.0);
            for p in &partial {
                s += p[c].0;
                ss += p[c].1;
            }
            let mean = s / count;
            stats[layer.mean + c] = mean;
            stats[layer.var + c] = (ss / count - mean * mean).max(0.0);
        }
    }
}

fn accuracy(net: &Network, params: &[f64], stats: &[f64], samples: &[Sample]) -> f64 {
    let side = net.arch.input_size;
    let k = net.arch.n_classes;
    let refs: Vec<&Sample> = samples.iter().collect();
    let correct: usize = refs
        .par_chunks(INFERENCE_CHUNK)
        .map(|chunk| {
            let x = Dataset::tensor(chunk, side, None);
            let (_, probs) = net.infer(params, stats, &x, chunk.len());
            chunk
                .iter()
                .zip(probs.chunks(k))
                .filter(|(s, row)| argmax(row) == s.label)
                .count()
        })
        .sum();
    correct as f64 / samples.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

