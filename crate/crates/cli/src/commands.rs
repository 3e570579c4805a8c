use std::path::{Path, PathBuf};
use std::sync::Arc;

use mmcr::eval::{benchmark_report, verification_report, BenchmarkReport, Protocol};
use mmcr::manifest::{
    generate_synthetic, load_compcars_classification, load_compcars_verification, load_manifest, load_stanford,
    published, save_manifest, CompCarsTask, Difficulty, Granularity, ImageRecord, Ingested, LabelVocabulary,
    LabeledPairSets, SplitCounts, SynthSpec,
};
use mmcr::model::{fine_tune, load_model, save_model, train, ClassifierModel, Dataset, TrainConfig, TrainLog};
use mmcr::preprocess::{load_image, preprocess_image, preprocess_record, Alignment, FullFrameDetector, PreprocessConfig};
use mmcr::prune::{apply_verdicts, build_review_queue, load_queue, save_queue, DEFAULT_FLAG_FRACTION};
use mmcr::verify::{calibrate_with_model, load_pairs, pair_features, save_pairs, score_pairs, ThresholdModel};
use mmcr_service::{AppState, ServiceConfig, SystemClock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Flags, Layers};
use crate::{CliError, Command, PrepFlags, PruneCommand, TrainFlags, VerifyCommand};

type Result<T> = std::result::Result<T, CliError>;

/// Written next to a preprocessed manifest so later steps reuse the settings.
const PREPROCESS_FILE: &str = "preprocess.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSection {
    classes: usize,
    per_class: usize,
    color: bool,
    seed: u64,
    width: u32,
    height: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::new(6, 20, false, 0);
        Self {
            classes: s.n_classes,
            per_class: s.n_per_class,
            color: s.color_mode,
            seed: s.seed,
            width: s.width,
            height: s.height,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PruneSection {
    fraction: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            fraction: DEFAULT_FLAG_FRACTION,
        }
    }
}

fn prep_flags(f: &PrepFlags) -> toml::Table {
    Flags::default()
        .set("margin_fraction", f.margin)
        .set("target_size", f.size.map(i64::from))
        .set("apply_mask", f.mask.then_some(true))
        .set("mask_fill", f.fill.as_deref().map(fill_key))
        .table()
}

/// Accepts the short `mean` spelling on the command line.
fn fill_key(s: &str) -> String {
    match s {
        "mean" => "crop_mean".into(),
        other => other.into(),
    }
}

fn train_flags(f: &TrainFlags) -> toml::Table {
    Flags::default()
        .set("epochs", f.epochs)
        .set("batch_size", f.batch_size)
        .set("learning_rate", f.learning_rate)
        .set("momentum", f.momentum)
        .set("weight_decay", f.weight_decay)
        .set("lr_step", f.lr_step)
        .set("lr_decay", f.lr_decay)
        .set("seed", f.seed)
        .set("preset", f.preset.clone())
        .table()
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| data_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| data_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse<T: std::str::FromStr>(flag: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| usage(format!("--{flag}: {e}")))
}

/// Preprocessing settings recorded by `preprocess` for this manifest, if any.
fn recorded_preprocess(manifest: &Path) -> Result<PreprocessConfig> {
    let p = manifest.parent().unwrap_or(Path::new(".")).join(PREPROCESS_FILE);
    if p.is_file() {
        read_json(&p)
    } else {
        Ok(PreprocessConfig::default())
    }
}

pub(crate) fn run(command: Command, layers: &Layers) -> Result<Value> {
    match command {
        Command::Ingest {
            format,
            annotations,
            images,
            task,
            seed,
            out,
        } => ingest(&format, &annotations, &images, &task, seed, &out),
        Command::Synth {
            out,
            classes,
            per_class,
            color,
            seed,
        } => {
            let flags = Flags::default()
                .set("classes", classes)
                .set("per_class", per_class)
                .set("color", color.then_some(true))
                .set("seed", seed)
                .table();
            let s: SynthSection = layers.section("synth", &SynthSection::default(), flags)?;
            synth(&s, &out)
        }
        Command::Preprocess { manifest, out, prep } => {
            let cfg = layers.section("preprocess", &PreprocessConfig::default(), prep_flags(&prep))?;
            preprocess(&manifest, &out, &cfg)
        }
        Command::Train {
            manifest,
            out,
            task,
            log,
            prep,
            train,
        } => {
            let prep_base = recorded_preprocess(&manifest)?;
            let prep = layers.section("preprocess", &prep_base, prep_flags(&prep))?;
            let cfg = layers.section("train", &TrainConfig::default(), train_flags(&train))?;
            let g: Granularity = parse("task", &task)?;
            train_cmd(&manifest, &out, g, log.as_deref(), prep, &cfg)
        }
        Command::Finetune {
            model,
            manifest,
            out,
            log,
            train,
        } => {
            let cfg = layers.section("train", &TrainConfig::default(), train_flags(&train))?;
            finetune(&model, &manifest, &out, log.as_deref(), &cfg)
        }
        Command::Predict {
            model,
            manifest,
            image,
            top_k,
            out,
        } => predict(&model, manifest.as_deref(), image.as_deref(), top_k, out.as_deref()),
        Command::Eval {
            model,
            manifest,
            protocol,
            out,
            pairs_dir,
            frozen,
        } => eval(&model, &manifest, &protocol, &out, pairs_dir.as_deref(), frozen.as_deref()),
        Command::Verify(VerifyCommand::Calibrate {
            model,
            manifest,
            pairs,
            out,
        }) => {
            let m = load_model(&model)?;
            let records = load_manifest(&manifest)?;
            let pairs = load_pairs(&pairs)?;
            let t = calibrate_with_model(&m, &records, &pairs)?;
            write_json(&out, &t)?;
            Ok(json!({
                "command": "verify calibrate",
                "threshold": t.threshold,
                "accuracy": t.accuracy,
                "n_same": t.n_same,
                "n_different": t.n_different,
                "out": out,
            }))
        }
        Command::Verify(VerifyCommand::Evaluate {
            model,
            manifest,
            pairs,
            threshold,
            out,
        }) => {
            let m = load_model(&model)?;
            let records = load_manifest(&manifest)?;
            let pairs = load_pairs(&pairs)?;
            let t: ThresholdModel = read_json(&threshold)?;
            let features = pair_features(&m, &records, &pairs)?;
            let accuracy = score_pairs(&features, &pairs, t.threshold)?;
            let summary = json!({
                "command": "verify evaluate",
                "threshold": t.threshold,
                "n_pairs": pairs.len(),
                "accuracy": accuracy,
            });
            if let Some(out) = out {
                write_json(&out, &summary)?;
            }
            Ok(summary)
        }
        Command::Prune(PruneCommand::Build {
            manifest,
            model,
            fraction,
            out,
        }) => {
            let s: PruneSection = layers.section(
                "prune",
                &PruneSection::default(),
                Flags::default().set("fraction", fraction).table(),
            )?;
            let m = load_model(&model)?;
            let records = load_manifest(&manifest)?;
            let q = build_review_queue(&records, &m, s.fraction)?;
            save_queue(&q.items, &out)?;
            Ok(json!({
                "command": "prune build",
                "scored": q.scored.len(),
                "flagged": q.items.len(),
                "fraction": s.fraction,
                "singleton_classes": q.singleton_classes,
                "unlabeled": q.unlabeled.len(),
                "out": out,
            }))
        }
        Command::Prune(PruneCommand::Apply {
            manifest,
            queue,
            model,
            out,
            audit,
        }) => {
            let m = load_model(&model)?;
            let records = load_manifest(&manifest)?;
            let items = load_queue(&queue)?;
            let applied = apply_verdicts(&records, &items, m.vocabulary())?;
            save_manifest(&applied.records, &out)?;
            let audit = audit.unwrap_or_else(|| with_suffix(&out, ".audit.jsonl"));
            write_text(&audit, &applied.audit_json_lines())?;
            let count = |a: &str| applied.audit.iter().filter(|e| e.action == a).count();
            Ok(json!({
                "command": "prune apply",
                "records": applied.records.len(),
                "removed": count("removed"),
                "relabeled": count("relabeled"),
                "out": out,
                "audit": audit,
            }))
        }
        Command::Serve {
            listen,
            make_model_model,
            color_model,
            queue,
            lease_seconds,
        } => {
            let flags = Flags::default()
                .set("listen", listen)
                .set_str("make_model_model", make_model_model.map(|p| p.display().to_string()))
                .set_str("color_model", color_model.map(|p| p.display().to_string()))
                .set_str("queue", queue.map(|p| p.display().to_string()))
                .set("lease_seconds", lease_seconds)
                .table();
            let cfg: ServiceConfig = layers.section("service", &ServiceConfig::default(), flags)?;
            serve(cfg)
        }
    }
}

fn split_summary(c: SplitCounts, published: (usize, usize, usize)) -> Value {
    json!({
        "train": c.train,
        "test": c.test,
        "classes": c.classes,
        "published": {"train": published.0, "test": published.1, "classes": published.2},
    })
}

fn save_ingested(ing: &Ingested, out: &Path) -> Result<()> {
    create_dir(out)?;
    save_manifest(&ing.records, &out.join("manifest.tsv"))?;
    write_text(&out.join("missing.txt"), &ing.missing_images.iter().map(|m| format!("{m}\n")).collect::<String>())
}

fn ingest(format: &str, annotations: &Path, images: &Path, task: &str, seed: u64, out: &Path) -> Result<Value> {
    let task: CompCarsTask = task.parse()?;
    match format {
        "stanford" => {
            if task != CompCarsTask::Classification {
                return Err(usage("--task verification only applies to --format compcars"));
            }
            let ing = load_stanford(annotations, images)?;
            save_ingested(&ing, out)?;
            let counts = SplitCounts::of(&ing.records, Granularity::MakeModelYear);
            Ok(json!({
                "command": "ingest",
                "format": "stanford",
                "records": ing.records.len(),
                "missing_images": ing.missing_images.len(),
                "counts": split_summary(counts, (published::STANFORD_TRAIN, published::STANFORD_TEST, published::STANFORD_CLASSES)),
                "out": out,
            }))
        }
        "compcars" => match task {
            CompCarsTask::Classification => {
                let ing = load_compcars_classification(annotations, images)?;
                save_ingested(&ing, out)?;
                let counts = SplitCounts::of(&ing.records, Granularity::MakeModel);
                Ok(json!({
                    "command": "ingest",
                    "format": "compcars",
                    "task": "classification",
                    "records": ing.records.len(),
                    "missing_images": ing.missing_images.len(),
                    "counts": split_summary(counts, (published::COMPCARS_TRAIN, published::COMPCARS_TEST, published::COMPCARS_CLASSES)),
                    "out": out,
                }))
            }
            CompCarsTask::Verification => {
                let v = load_compcars_verification(annotations, images, seed)?;
                save_ingested(
                    &Ingested {
                        records: v.records.clone(),
                        missing_images: v.missing_images.clone(),
                    },
                    out,
                )?;
                save_pairs(&v.calibration, &out.join("calibration.tsv"))?;
                let mut sets = serde_json::Map::new();
                for (d, pairs) in &v.sets {
                    save_pairs(pairs, &out.join(format!("pairs_{d}.tsv")))?;
                    sets.insert(d.to_string(), json!(pairs.len()));
                }
                Ok(json!({
                    "command": "ingest",
                    "format": "compcars",
                    "task": "verification",
                    "records": v.records.len(),
                    "missing_images": v.missing_images.len(),
                    "calibration_pairs": v.calibration.len(),
                    "pairs": sets,
                    "published_pairs_per_set": published::COMPCARS_PAIRS_PER_SET,
                    "out": out,
                }))
            }
        },
        other => Err(usage(format!("unknown --format {other:?} (expected stanford or compcars)"))),
    }
}

fn synth(s: &SynthSection, out: &Path) -> Result<Value> {
    let mut spec = SynthSpec::new(s.classes, s.per_class, s.color, s.seed);
    spec.width = s.width;
    spec.height = s.height;
    let set = generate_synthetic(&spec, out)?;
    let g = if s.color { Granularity::Color } else { Granularity::MakeModel };
    let c = SplitCounts::of(&set.records, g);
    Ok(json!({
        "command": "synth",
        "records": set.records.len(),
        "train": c.train,
        "test": c.test,
        "classes": c.classes,
        "manifest": set.manifest_path,
    }))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn preprocess(manifest: &Path, out: &Path, cfg: &PreprocessConfig) -> Result<Value> {
    cfg.validate()?;
    let records = load_manifest(manifest)?;
    let image_dir = out.join("images");
    create_dir(&image_dir)?;
    let done: Vec<(ImageRecord, Alignment)> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let p = preprocess_record(r, cfg, &FullFrameDetector)?;
            let path = image_dir.join(format!("{i:06}_{}.png", sanitize(&r.id)));
            p.output().save(&path).map_err(|e| data_err(&path, e))?;
            let mut rec = r.clone();
            rec.path = path;
            rec.bbox = None;
            Ok((rec, p.alignment))
        })
        .collect::<Result<_>>()?;
    let count = |a: Alignment| done.iter().filter(|(_, x)| *x == a).count();
    let alignment = json!({
        "annotation": count(Alignment::Annotation),
        "detector": count(Alignment::Detector),
        "unaligned": count(Alignment::Unaligned),
    });
    let (out_records, _): (Vec<ImageRecord>, Vec<Alignment>) = done.into_iter().unzip();
    let out_manifest = out.join("manifest.tsv");
    save_manifest(&out_records, &out_manifest)?;
    write_json(&out.join(PREPROCESS_FILE), cfg)?;
    Ok(json!({
        "command": "preprocess",
        "records": out_records.len(),
        "alignment": alignment,
        "manifest": out_manifest,
    }))
}

fn train_summary(command: &str, model: &ClassifierModel, log: &TrainLog, out: &Path, log_path: &Path) -> Value {
    json!({
        "command": command,
        "model": out,
        "digest": model.digest(),
        "classes": model.vocabulary().len(),
        "n_train": log.n_train,
        "n_heldout": log.n_heldout,
        "final_loss": log.epochs.last().map(|e| e.train_loss),
        "heldout_accuracy": log.epochs.last().and_then(|e| e.heldout_accuracy),
        "log": log_path,
    })
}

fn train_cmd(
    manifest: &Path,
    out: &Path,
    g: Granularity,
    log: Option<&Path>,
    prep: PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<Value> {
    let records = load_manifest(manifest)?;
    let vocab = Arc::new(LabelVocabulary::from_records(&records, g)?);
    let data = Dataset::from_records(&records, vocab, prep, false)?;
    let (model, train_log) = train(&data, cfg, g.as_str())?;
    save_model(&model, out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".log.jsonl"));
    write_text(&log_path, &train_log.to_json_lines())?;
    Ok(train_summary("train", &model, &train_log, out, &log_path))
}

fn finetune(parent: &Path, manifest: &Path, out: &Path, log: Option<&Path>, cfg: &TrainConfig) -> Result<Value> {
    let parent = load_model(parent)?;
    let records = load_manifest(manifest)?;
    let g = parent.vocabulary().granularity();
    let vocab = Arc::new(LabelVocabulary::from_records(&records, g)?);
    let data = Dataset::from_records(&records, vocab, *parent.preprocess(), false)?;
    let (model, train_log) = fine_tune(&parent, &data, cfg)?;
    save_model(&model, out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".log.jsonl"));
    write_text(&log_path, &train_log.to_json_lines())?;
    Ok(train_summary("finetune", &model, &train_log, out, &log_path))
}

fn ranked(p: &mmcr::model::Prediction, k: usize) -> Value {
    p.top(k)
        .into_iter()
        .map(|(class, confidence)| json!({"class": class, "confidence": confidence}))
        .collect()
}

fn predict(model: &Path, manifest: Option<&Path>, image: Option<&Path>, top_k: usize, out: Option<&Path>) -> Result<Value> {
    if top_k == 0 {
        return Err(usage("--top-k must be positive"));
    }
    let m = load_model(model)?;
    let g = m.vocabulary().granularity();
    let (lines, n_labeled, n_correct) = match (manifest, image) {
        (_, Some(image)) => {
            let img = load_image(image)?;
            let aligned = preprocess_image(&img, None, None, m.preprocess(), &FullFrameDetector)?.into_output();
            let p = m.predict(&aligned)?;
            (vec![json!({"image": image, "top": ranked(&p, top_k)})], 0, 0)
        }
        (Some(manifest), None) => {
            let records = load_manifest(manifest)?;
            let preds = m.predict_records(&records)?;
            let mut labeled = 0;
            let mut correct = 0;
            let lines = records
                .iter()
                .zip(&preds)
                .map(|(r, p)| {
                    let truth = r.label(g);
                    if let Some(t) = &truth {
                        labeled += 1;
                        if m.vocabulary().name(p.top1()) == t {
                            correct += 1;
                        }
                    }
                    json!({"id": r.id, "truth": truth, "top": ranked(p, top_k)})
                })
                .collect();
            (lines, labeled, correct)
        }
        (None, None) => return Err(usage("one of --manifest or --image is required")),
    };
    if let Some(out) = out {
        write_text(out, &lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    }
    let mut summary = json!({
        "command": "predict",
        "predictions": lines.len(),
        "top1_accuracy": (n_labeled > 0).then(|| n_correct as f64 / n_labeled as f64),
        "out": out,
    });
    if out.is_none() && lines.len() == 1 {
        summary["top"] = lines[0]["top"].clone();
    }
    Ok(summary)
}

fn load_pair_sets(dir: &Path) -> Result<(Vec<mmcr::verify::LabeledPair>, LabeledPairSets)> {
    let calibration = load_pairs(&dir.join("calibration.tsv"))?;
    let mut sets = LabeledPairSets::new();
    for d in Difficulty::ALL {
        let p = dir.join(format!("pairs_{d}.tsv"));
        if p.is_file() {
            sets.insert(d, load_pairs(&p)?);
        }
    }
    if sets.is_empty() {
        return Err(CliError::Data(format!("{}: no pairs_{{easy,medium,hard}}.tsv files", dir.display())));
    }
    Ok((calibration, sets))
}

fn eval(
    model: &Path,
    manifest: &Path,
    protocol: &str,
    out: &Path,
    pairs_dir: Option<&Path>,
    frozen: Option<&Path>,
) -> Result<Value> {
    let protocol: Protocol = parse("protocol", protocol)?;
    let m = load_model(model)?;
    let records = load_manifest(manifest)?;
    let report: BenchmarkReport = if protocol == Protocol::CompcarsVerif {
        let dir = pairs_dir.ok_or_else(|| usage("--pairs-dir is required for --protocol compcars_verif"))?;
        let (calibration, sets) = load_pair_sets(dir)?;
        let frozen = frozen.map(load_model).transpose()?;
        verification_report(&m, frozen.as_ref(), &records, &calibration, &sets)?
    } else {
        if pairs_dir.is_some() || frozen.is_some() {
            return Err(usage("--pairs-dir and --frozen only apply to --protocol compcars_verif"));
        }
        benchmark_report(&m, &records, protocol)?
    };
    let json_path = with_suffix(out, ".json");
    let txt_path = with_suffix(out, ".txt");
    write_json(&json_path, &report)?;
    write_text(&txt_path, &report.to_table())?;
    Ok(json!({
        "command": "eval",
        "protocol": protocol.as_str(),
        "metrics": report.metrics,
        "threshold": report.threshold,
        "report": json_path,
        "table": txt_path,
    }))
}

fn serve(cfg: ServiceConfig) -> Result<Value> {
    let state = AppState::from_config(&cfg, Arc::new(SystemClock))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(mmcr_service::serve(&cfg, state, |addr| {
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{}", json!({"command": "serve", "listening": addr.to_string()}));
        let _ = out.flush();
    }))?;
    Ok(json!({"command": "serve", "stopped": true}))
}
