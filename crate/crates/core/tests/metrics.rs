use std::sync::Arc;

use mmcr::eval::{confusion_matrix, top_k_accuracy};
use mmcr::manifest::{Granularity, LabelVocabulary};
use mmcr::model::Prediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    preds: Vec<Prediction>,
    probs: Vec<Vec<f64>>,
    truth: Vec<String>,
    truth_idx: Vec<usize>,
    n_classes: usize,
}

/// Quantized confidences so that ties are common.
fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let n_classes = rng.gen_range(2..12);
    let vocab = Arc::new(
        LabelVocabulary::new((0..n_classes).map(|i| format!("c{i:02}")).collect(), Granularity::Color).unwrap(),
    );
    let n = rng.gen_range(1..40);
    let mut preds = Vec::new();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    let mut truth_idx = Vec::new();
    for _ in 0..n {
        let raw: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(0..5) as f64 + 0.5).collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let t = rng.gen_range(0..n_classes);
        preds.push(Prediction::from_probabilities(vocab.clone(), p.clone()).unwrap());
        probs.push(p);
        truth.push(format!("c{t:02}"));
        truth_idx.push(t);
    }
    Case {
        preds,
        probs,
        truth,
        truth_idx,
        n_classes,
    }
}

/// Rank of the truth counted directly: classes strictly more confident, plus
/// equally confident classes with a smaller index.
fn oracle_top_k(c: &Case, k: usize) -> f64 {
    let mut hits = 0;
    for (p, &t) in c.probs.iter().zip(&c.truth_idx) {
        let ahead = (0..p.len()).filter(|&j| p[j] > p[t] || (p[j] == p[t] && j < t)).count();
        if ahead < k {
            hits += 1;
        }
    }
    hits as f64 / c.probs.len() as f64
}

fn oracle_confusion(c: &Case) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; c.n_classes]; c.n_classes];
    for (p, &t) in c.probs.iter().zip(&c.truth_idx) {
        let mut best = 0;
        for j in 1..p.len() {
            if p[j] > p[best] {
                best = j;
            }
        }
        m[t][best] += 1;
    }
    m
}

#[test]
fn top_k_and_confusion_match_oracles_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let c = random_case(&mut rng);
        let mut prev = 0.0;
        for k in 1..=c.n_classes + 1 {
            let got = top_k_accuracy(&c.preds, &c.truth, k).unwrap();
            assert_eq!(got, oracle_top_k(&c, k));
            assert!(got >= prev);
            prev = got;
        }
        assert_eq!(top_k_accuracy(&c.preds, &c.truth, c.n_classes).unwrap(), 1.0);
        let m = confusion_matrix(&c.preds, &c.truth).unwrap();
        assert_eq!(m.counts, oracle_confusion(&c));
        assert_eq!(m.trace() as f64 / m.total() as f64, top_k_accuracy(&c.preds, &c.truth, 1).unwrap());
        let mut per_class = vec![0u64; c.n_classes];
        for &t in &c.truth_idx {
            per_class[t] += 1;
        }
        assert_eq!(m.row_sums(), per_class);
    }
}

#[test]
fn perfect_predictions_give_a_diagonal_matrix() {
    let vocab = Arc::new(LabelVocabulary::new(vec!["a".into(), "b".into(), "c".into()], Granularity::Color).unwrap());
    let preds: Vec<Prediction> = (0..3)
        .map(|i| {
            let mut p = vec![0.1; 3];
            p[i] = 0.8;
            Prediction::from_probabilities(vocab.clone(), p).unwrap()
        })
        .collect();
    let truth = ["a", "b", "c"];
    let m = confusion_matrix(&preds, &truth).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.counts[i][j], u64::from(i == j));
        }
    }
    for k in 1..=3 {
        assert_eq!(top_k_accuracy(&preds, &truth, k).unwrap(), 1.0);
    }
}
