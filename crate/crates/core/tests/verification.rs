use std::collections::HashMap;
use std::sync::Arc;

use mmcr::manifest::{generate_synthetic, Granularity, ImageRecord, LabelVocabulary, Split, SynthSpec};
use mmcr::model::{train, Dataset, TrainConfig};
use mmcr::preprocess::{preprocess_record, FullFrameDetector, PreprocessConfig};
use mmcr::verify::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(vs: &[(&str, Vec<f64>)]) -> HashMap<String, Vec<f64>> {
    vs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn self_pairs_are_always_same() {
    let f = features(&[("a", vec![0.0, 1.0]), ("b", vec![3.0, 5.0]), ("c", vec![9.0, 9.0])]);
    let calibration = vec![LabeledPair::new("a", "a", true), LabeledPair::new("a", "c", false)];
    let set = vec![
        LabeledPair::new("a", "a", true),
        LabeledPair::new("b", "b", true),
        LabeledPair::new("c", "c", true),
    ];
    let r = evaluate_with_features(&f, &calibration, &[("easy".into(), set)]).unwrap();
    assert!(r.threshold.threshold > 0.0);
    assert_eq!(r.sets[0].accuracy, 1.0);
    assert_eq!(r.sets[0].n_pairs, 3);
}

#[test]
fn empty_set_and_unknown_image_are_errors() {
    let f = features(&[("a", vec![0.0]), ("b", vec![1.0])]);
    let cal = vec![LabeledPair::new("a", "a", true), LabeledPair::new("a", "b", false)];
    assert!(evaluate_with_features(&f, &cal, &[("hard".into(), vec![])]).is_err());
    let bad = vec![LabeledPair::new("a", "nope", true)];
    assert!(evaluate_with_features(&f, &cal, &[("hard".into(), bad)]).is_err());
}

proptest! {
    #[test]
    fn calibrated_decisions_are_scale_equivariant(
        raw in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), any::<bool>()), 4..30),
        scale in 0.01f64..100.0,
    ) {
        let mut pts: HashMap<String, Vec<f64>> = HashMap::new();
        for (i, (v, _)) in raw.iter().enumerate() {
            pts.insert(format!("p{i}"), v.clone());
        }
        let mut pairs: Vec<LabeledPair> = (1..raw.len())
            .map(|i| LabeledPair::new(format!("p{}", i - 1), format!("p{i}"), raw[i].1))
            .collect();
        pairs.push(LabeledPair::new("p0", "p0", true));
        pairs.push(LabeledPair::new("p0", "p1", false));
        let scaled: HashMap<String, Vec<f64>> =
            pts.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x * scale).collect())).collect();
        let sets = [("s".to_string(), pairs.clone())];
        let a = evaluate_with_features(&pts, &pairs, &sets).unwrap();
        let b = evaluate_with_features(&scaled, &pairs, &sets).unwrap();
        prop_assert_eq!(a.sets[0].accuracy, b.sets[0].accuracy);
        for p in &pairs {
            let da = pair_distance(&pts[&p.a], &pts[&p.b]).unwrap();
            let db = pair_distance(&scaled[&p.a], &scaled[&p.b]).unwrap();
            prop_assert_eq!(a.threshold.decide(da), b.threshold.decide(db));
        }
    }
}

fn random_pairs(ids: &[(String, usize)], n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledPair> {
    (0..n)
        .map(|i| {
            let want_same = i % 2 == 0;
            loop {
                let a = ids.choose(rng).unwrap();
                let b = ids.choose(rng).unwrap();
                if a.0 != b.0 && (a.1 == b.1) == want_same {
                    return LabeledPair::new(a.0.clone(), b.0.clone(), want_same);
                }
            }
        })
        .collect()
}

#[test]
fn two_class_synthetic_verification() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(&SynthSpec::new(2, 30, true, 8), dir.path()).unwrap();
    let prep = PreprocessConfig {
        target_size: 32,
        apply_mask: true,
        ..Default::default()
    };
    let vocab = Arc::new(LabelVocabulary::from_records(&set.records, Granularity::MakeModel).unwrap());
    let label = |r: &ImageRecord| vocab.index_of(&r.label(Granularity::MakeModel).unwrap()).unwrap();

    // separability oracle: nearest pixel-mean centroid over the masked crops
    let mean_rgb = |r: &ImageRecord| {
        let img = preprocess_record(r, &prep, &FullFrameDetector).unwrap().into_output();
        let mut s = [0.0; 3];
        for p in img.pixels() {
            for c in 0..3 {
                s[c] += p.0[c] as f64;
            }
        }
        s.map(|v| v / (img.width() * img.height()) as f64)
    };
    let mut centroids = [[0.0; 3]; 2];
    let mut counts = [0.0; 2];
    for r in set.records.iter().filter(|r| r.split == Split::Train) {
        let m = mean_rgb(r);
        let l = label(r);
        for c in 0..3 {
            centroids[l][c] += m[c];
        }
        counts[l] += 1.0;
    }
    for l in 0..2 {
        for c in 0..3 {
            centroids[l][c] /= counts[l];
        }
    }
    let test: Vec<&ImageRecord> = set.records.iter().filter(|r| r.split == Split::Test).collect();
    for r in &test {
        let m = mean_rgb(r);
        let d = |k: usize| (0..3).map(|c| (m[c] - centroids[k][c]).powi(2)).sum::<f64>();
        let guess = if d(0) <= d(1) { 0 } else { 1 };
        assert_eq!(guess, label(r), "oracle misclassifies {}", r.id);
    }

    let data = Dataset::from_records(&set.records, vocab.clone(), prep, false).unwrap();
    let (model, _) = train(&data, &TrainConfig::default(), "make_model").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train_ids: Vec<(String, usize)> = set
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (r.id.clone(), label(r)))
        .collect();
    let test_ids: Vec<(String, usize)> = test.iter().map(|r| (r.id.clone(), label(r))).collect();
    let calibration = random_pairs(&train_ids, 100, &mut rng);
    let pairs = random_pairs(&test_ids, 100, &mut rng);
    let result = evaluate_verification(&model, &set.records, &calibration, &[("synthetic".into(), pairs)]).unwrap();
    assert!(result.sets[0].accuracy >= 0.9, "accuracy {}", result.sets[0].accuracy);
}
