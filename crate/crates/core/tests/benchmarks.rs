//! Adapters and report shapes against the miniature trees under
//! `tests/fixtures` (regenerate with `make_fixtures.py`).

use std::path::PathBuf;
use std::sync::Arc;

use mmcr::eval::{benchmark_report, reference_rows, verification_report, Protocol};
use mmcr::manifest::*;
use mmcr::model::{train, ClassifierModel, Dataset, TrainConfig};
use mmcr::preprocess::PreprocessConfig;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn quick_model(records: &[ImageRecord], g: Granularity) -> ClassifierModel {
    let vocab = Arc::new(LabelVocabulary::from_records(records, g).unwrap());
    let prep = PreprocessConfig {
        target_size: 16,
        ..Default::default()
    };
    let data = Dataset::from_records(records, vocab, prep, false).unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    train(&data, &config, "make_model").unwrap().0
}

#[test]
fn stanford_single_file_layout() {
    let root = fixtures().join("stanford/all");
    let ing = load_stanford(&root.join("cars_annos.mat"), &root).unwrap();
    assert!(ing.missing_images.is_empty());
    let counts = SplitCounts::of(&ing.records, Granularity::MakeModelYear);
    assert_eq!(counts, SplitCounts { train: 6, test: 6, classes: 3 });
    let r = &ing.records[1];
    assert_eq!(r.id, "car_ims/000002.jpg");
    assert_eq!(r.make.as_deref(), Some("Aston Martin"));
    assert_eq!(r.model.as_deref(), Some("V8 Vantage Coupe"));
    assert_eq!(r.year, Some(2012));
    assert_eq!(r.bbox, Some(BoundingBox::new(6, 5, 42, 28).unwrap()));
    assert_eq!(ing.records[0].make.as_deref(), Some("AM General"));
}

#[test]
fn stanford_devkit_layout() {
    let root = fixtures().join("stanford/devkit");
    let ing = load_stanford(&root.join("devkit"), &root).unwrap();
    assert!(ing.missing_images.is_empty());
    let counts = SplitCounts::of(&ing.records, Granularity::MakeModelYear);
    assert_eq!(counts, SplitCounts { train: 6, test: 3, classes: 3 });
    assert_eq!(ing.records[0].id, "cars_train/00001.jpg");
    assert_eq!(ing.records[6].id, "cars_test/00001.jpg");
    assert_eq!(ing.records[6].split, Split::Test);
}

#[test]
fn compcars_classification_tree() {
    let root = fixtures().join("compcars/data");
    let ing = load_compcars_classification(&root, &root.join("image")).unwrap();
    assert!(ing.missing_images.is_empty());
    let counts = SplitCounts::of(&ing.records, Granularity::MakeModel);
    assert_eq!(counts, SplitCounts { train: 12, test: 6, classes: 3 });
    let r = ing.records.iter().find(|r| r.id == "2/11/2014/11000.jpg").unwrap();
    assert_eq!(r.label(Granularity::MakeModel).as_deref(), Some("Audi_A4"));
    assert_eq!(r.year, Some(2014));
    assert_eq!(r.bbox, Some(BoundingBox::new(6, 5, 42, 28).unwrap()));
}

#[test]
fn compcars_verification_tree() {
    let root = fixtures().join("compcars/data");
    let v = load_compcars_verification(&root, &root.join("image"), 0).unwrap();
    assert!(v.missing_images.is_empty());
    assert_eq!(v.sets.len(), 3);
    assert!(v.sets.values().all(|p| p.len() == 4));
    // 12 listed training images, 6 test images referenced by the pairs
    assert_eq!(v.records.len(), 18);
    assert!(v.calibration.iter().any(|p| p.same) && v.calibration.iter().any(|p| !p.same));
}

#[test]
fn published_counts_are_the_benchmark_sizes() {
    assert_eq!((published::STANFORD_TRAIN, published::STANFORD_TEST), (8_144, 8_041));
    assert_eq!(published::STANFORD_CLASSES, 196);
    assert_eq!((published::COMPCARS_TRAIN, published::COMPCARS_TEST), (36_456, 15_627));
    assert_eq!(published::COMPCARS_CLASSES, 431);
    assert_eq!(published::COMPCARS_PAIRS_PER_SET, 20_000);
}

#[test]
fn reports_have_the_table_shapes() {
    let root = fixtures().join("stanford/all");
    let ing = load_stanford(&root.join("cars_annos.mat"), &root).unwrap();
    let m = quick_model(&ing.records, Granularity::MakeModelYear);
    let r = benchmark_report(&m, &ing.records, Protocol::Stanford).unwrap();
    assert_eq!(r.columns, vec!["top1"]);
    assert_eq!(r.rows.len(), 1 + reference_rows(Protocol::Stanford).len());
    assert_eq!(r.rows[0].source, "measured");
    assert!(r.rows[1..].iter().all(|row| row.source == "published" && row.values.len() == 1));
    assert!(r.to_table().contains("top1"));
    // a make/model model does not fit the year-level protocol
    let cc = fixtures().join("compcars/data");
    let cls = load_compcars_classification(&cc, &cc.join("image")).unwrap();
    let mm = quick_model(&cls.records, Granularity::MakeModel);
    assert!(benchmark_report(&mm, &cls.records, Protocol::Stanford).is_err());

    let r = benchmark_report(&mm, &cls.records, Protocol::CompcarsCls).unwrap();
    assert_eq!(r.columns, vec!["top1", "top5"]);
    assert_eq!(r.metrics["top5"], 1.0);
    assert_eq!(r.dataset.n_test, 6);

    let v = load_compcars_verification(&cc, &cc.join("image"), 0).unwrap();
    let r = verification_report(&mm, Some(&mm), &v.records, &v.calibration, &v.sets).unwrap();
    assert_eq!(r.columns, vec!["easy", "medium", "hard"]);
    assert_eq!(r.rows.iter().filter(|row| row.source == "measured").count(), 2);
    assert!(r.rows.iter().all(|row| row.values.len() == 3));
    assert!(r.threshold.is_some());
    assert_eq!(r.dataset.n_pairs["easy"], 4);
}
