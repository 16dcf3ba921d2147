use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{synthesize_dataset, SyntheticSpec, IMAGENET_MEAN, IMAGENET_STD};
use crate::nn::{ArchSpec, HeadSpec};
use crate::rng::{stream, Purpose, SeedTree};

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

const Q4_BEHAVIORS: [&str; 9] = [
    "drinking",
    "eating_head_down",
    "eating_head_up",
    "lying",
    "standing",
    "walking",
    "frontal_pushing",
    "gallop",
    "leap",
];
// Per-class test metrics of the best configuration, to two decimals.
const Q4_SUPPORT: [u64; 9] = [3011, 30952, 18783, 83509, 69807, 3819, 600, 575, 744];
const Q4_PRECISION: [f64; 9] = [0.42, 0.88, 0.75, 0.99, 0.79, 0.17, 0.62, 0.82, 0.65];
const Q4_RECALL: [f64; 9] = [0.79, 0.55, 0.58, 0.99, 0.85, 0.52, 0.87, 0.50, 0.67];
const Q4_F1: [f64; 9] = [0.55, 0.68, 0.66, 0.99, 0.82, 0.26, 0.73, 0.62, 0.66];

// ------------------------------------------------------------- confusion

#[test]
fn perfect_predictions_give_a_diagonal() {
    let labels = [0, 1, 2, 2, 1, 0, 2];
    let cm = confusion(&labels, &labels, &names(3)).unwrap();
    assert_eq!(cm.counts, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
    assert_eq!(cm.trace(), cm.total());
}

#[test]
fn constant_predictions_fill_one_column() {
    let labels = [0, 1, 2, 2, 1];
    let cm = confusion(&[0; 5], &labels, &names(3)).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![2, 0, 0], vec![2, 0, 0]]);
    assert_eq!(cm.supports(), vec![1, 2, 2]);
}

#[test]
fn confusion_matches_a_tally() {
    let mut rng = stream(5, Purpose::Eval, 0);
    let c = 7;
    let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..c)).collect();
    let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..c)).collect();
    let mut tally: HashMap<(usize, usize), u64> = HashMap::new();
    for (&t, &p) in labels.iter().zip(&preds) {
        *tally.entry((t, p)).or_default() += 1;
    }
    let cm = confusion(&preds, &labels, &names(c)).unwrap();
    for t in 0..c {
        for p in 0..c {
            assert_eq!(cm.counts[t][p], tally.get(&(t, p)).copied().unwrap_or(0));
        }
    }
    assert_eq!(cm.total(), 200);
}

#[test]
fn confusion_errors() {
    assert!(matches!(confusion(&[0, 1], &[0], &names(2)), Err(Error::Shape { .. })));
    assert!(matches!(confusion(&[2], &[0], &names(2)), Err(Error::Index(_))));
    assert!(matches!(confusion(&[0], &[5], &names(2)), Err(Error::Index(_))));
}

#[test]
fn sharded_confusion_merges_to_the_whole() {
    let labels = [0, 1, 2, 1, 1, 0, 2, 2];
    let preds = [0, 2, 2, 1, 0, 0, 1, 2];
    let whole = confusion(&preds, &labels, &names(3)).unwrap();
    let mut a = confusion(&preds[..3], &labels[..3], &names(3)).unwrap();
    a.merge(&confusion(&preds[3..], &labels[3..], &names(3)).unwrap()).unwrap();
    assert_eq!(a, whole);
    assert!(a.merge(&ConfusionMatrix::zeros(names(2))).is_err());
}

// ---------------------------------------------------------------- report

#[test]
fn two_class_perfect_report() {
    let cm = ConfusionMatrix {
        class_names: names(2),
        counts: vec![vec![5, 0], vec![0, 5]],
    };
    let r = report(&cm);
    for m in &r.per_class {
        assert_eq!((m.precision, m.recall, m.f1, m.support), (1.0, 1.0, 1.0, 5));
    }
    assert_eq!((r.accuracy, r.weighted_precision, r.weighted_recall, r.weighted_f1), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn zero_denominators_give_zero() {
    // Class 1 is never predicted and class 2 never occurs.
    let cm = ConfusionMatrix {
        class_names: names(3),
        counts: vec![vec![3, 0, 1], vec![2, 0, 0], vec![0, 0, 0]],
    };
    let r = report(&cm);
    assert_eq!(r.per_class[1].precision, 0.0);
    assert_eq!(r.per_class[1].f1, 0.0);
    assert_eq!(r.per_class[2].recall, 0.0);
    assert_eq!(r.per_class[2].precision, 0.0);
    assert_eq!(r.per_class[2].support, 0);
}

#[test]
fn weighted_aggregates_reproduce_published_per_class_rows() {
    let rows: Vec<ClassMetrics> = (0..9)
        .map(|i| ClassMetrics {
            name: Q4_BEHAVIORS[i].into(),
            precision: Q4_PRECISION[i],
            recall: Q4_RECALL[i],
            f1: Q4_F1[i],
            support: Q4_SUPPORT[i],
        })
        .collect();
    let r = ClassReport::from_per_class(rows);
    assert!((r.weighted_f1 - 0.838).abs() <= 0.002, "{}", r.weighted_f1);
    assert!((r.weighted_recall - 0.8316).abs() <= 0.010, "{}", r.weighted_recall);
    assert_eq!(round_to(r.weighted_f1, 2), 0.84);
    assert_eq!(round_to(r.weighted_precision, 2), 0.86);
    assert_eq!(Q4_SUPPORT.iter().sum::<u64>(), 211_800);
}

fn random_cm(seed: u64, c: usize, n: usize) -> (Vec<usize>, Vec<usize>, ConfusionMatrix) {
    let mut rng = stream(seed, Purpose::Eval, 1);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    // Mostly correct, with some skew toward class 0.
    let preds: Vec<usize> = labels
        .iter()
        .map(|&l| match rng.gen_range(0..10) {
            0..=5 => l,
            6 => 0,
            _ => rng.gen_range(0..c),
        })
        .collect();
    let cm = confusion(&preds, &labels, &names(c)).unwrap();
    (preds, labels, cm)
}

proptest! {
    #[test]
    fn report_matches_brute_force(seed in 0u64..10_000, c in 2usize..8, n in 1usize..300) {
        let (preds, labels, cm) = random_cm(seed, c, n);
        let r = report(&cm);
        let mut wf1 = 0.0;
        for k in 0..c {
            let tp = preds.iter().zip(&labels).filter(|(p, l)| **p == k && **l == k).count() as f64;
            let pp = preds.iter().filter(|p| **p == k).count() as f64;
            let sup = labels.iter().filter(|l| **l == k).count() as f64;
            let p = if pp > 0.0 { tp / pp } else { 0.0 };
            let rc = if sup > 0.0 { tp / sup } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            prop_assert!((r.per_class[k].precision - p).abs() <= 1e-12);
            prop_assert!((r.per_class[k].recall - rc).abs() <= 1e-12);
            prop_assert!((r.per_class[k].f1 - f).abs() <= 1e-12);
            prop_assert_eq!(r.per_class[k].support as f64, sup);
            wf1 += sup * f;
        }
        prop_assert!((r.weighted_f1 - wf1 / n as f64).abs() <= 1e-12);
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64;
        prop_assert!((r.accuracy - correct / n as f64).abs() <= 1e-15);
        prop_assert!((r.accuracy - cm.trace() as f64 / cm.total() as f64).abs() <= 1e-15);
        // Weighted recall is accuracy for single-label data.
        prop_assert!((r.weighted_recall - r.accuracy).abs() <= 1e-12);
    }

    #[test]
    fn row_normalization_sums_and_conserves(seed in 0u64..10_000, c in 2usize..8, n in 1usize..300) {
        let (_, _, cm) = random_cm(seed, c, n);
        let norm = row_normalize(&cm);
        let sup = cm.supports();
        for (i, row) in norm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if sup[i] == 0 {
                prop_assert!(row.iter().all(|v| *v == 0.0));
            } else {
                prop_assert!((s - 1.0).abs() <= 1e-12);
                for (j, v) in row.iter().enumerate() {
                    prop_assert!((v * sup[i] as f64 - cm.counts[i][j] as f64).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn row_normalize_examples() {
    let diag = ConfusionMatrix {
        class_names: names(3),
        counts: vec![vec![4, 0, 0], vec![0, 1, 0], vec![0, 0, 9]],
    };
    assert_eq!(row_normalize(&diag), vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let cm = ConfusionMatrix {
        class_names: names(3),
        counts: vec![vec![2, 2, 0], vec![0, 0, 0], vec![1, 1, 2]],
    };
    let n = row_normalize(&cm);
    assert_eq!(n[0], vec![0.5, 0.5, 0.0]);
    assert_eq!(n[1], vec![0.0, 0.0, 0.0]);
    assert_eq!(n[2], vec![0.25, 0.25, 0.5]);
}

// ----------------------------------------------------- imbalance and gaps

#[test]
fn imbalance_ratios_match_the_published_table() {
    let r = imbalance_table(&Q4_SUPPORT).unwrap();
    assert_eq!(round_to(r[3], 1), 145.2);
    assert_eq!(round_to(r[4], 1), 121.4);
    assert_eq!(round_to(r[1], 1), 53.8);
    assert_eq!(round_to(r[2], 1), 32.7);
    assert_eq!(r[7], 1.0);
    assert_eq!(imbalance_table(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
    assert!(matches!(imbalance_table(&[3, 0]), Err(Error::Data(_))));
    assert!(matches!(imbalance_table(&[]), Err(Error::Data(_))));
}

#[test]
fn val_test_gaps_in_percentage_points() {
    assert_eq!(round_to(val_test_gap(0.9056, 0.7838), 2), 12.18);
    assert_eq!(round_to(val_test_gap(0.9130, 0.8316), 2), 8.14);
    assert!((val_test_gap(0.9056, 0.7838) - 12.18).abs() < 1e-9);
    assert_eq!(val_test_gap(0.75, 0.75), 0.0);
}

#[test]
fn source_accuracy_groups_by_tag() {
    let src: Vec<String> = ["a", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
    let acc = source_accuracy(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1], &src);
    assert_eq!(acc["a"], 0.5);
    assert!((acc["b"] - 2.0 / 3.0).abs() < 1e-15);
}

// ---------------------------------------------------------------- output

#[test]
fn eval_report_json_and_csv_agree() {
    let (preds, labels, _) = random_cm(11, 4, 60);
    let sources: Vec<String> = labels.iter().map(|l| if *l < 2 { "x" } else { "y" }.to_string()).collect();
    let rep = EvalReport::new(&preds, &labels, &sources, &names(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let jp = dir.path().join("r.json");
    let cp = dir.path().join("r.csv");
    rep.write_json(&jp).unwrap();
    rep.write_csv(&cp).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&jp).unwrap()).unwrap();
    assert_eq!(back, rep);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&jp).unwrap()).unwrap();
    for key in ["per_class", "accuracy", "weighted_precision", "weighted_recall", "weighted_f1", "confusion", "sources"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let mut rd = csv::Reader::from_path(&cp).unwrap();
    let rows: Vec<(String, String, f64)> = rd
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[2].parse().unwrap())
        })
        .collect();
    let get = |m: &str, c: &str| rows.iter().find(|r| r.0 == m && r.1 == c).unwrap().2;
    assert_eq!(get("weighted_f1", ""), rep.weighted_f1);
    assert_eq!(get("f1", "c2"), rep.per_class[2].f1);
    assert_eq!(get("confusion", "c1->c3"), rep.confusion[1][3] as f64);
    assert_eq!(get("source_accuracy", "y"), rep.sources["y"]);
    assert_eq!(rows.len(), 4 * 4 + 4 + 16 + 2);
    assert_eq!(rep.confusion_matrix().class_names, names(4));
}

// ------------------------------------------------------------ efficiency

#[test]
fn efficiency_report_is_self_consistent() {
    let spec = SyntheticSpec {
        train_per_class: 2,
        val_per_class: 1,
        ..SyntheticSpec::default()
    }
    .scaled_test(2000);
    let ds = synthesize_dataset(&spec, 1).unwrap();
    let set = TensorSet::<f32>::from_split(&ds.train, 16, IMAGENET_MEAN, IMAGENET_STD).unwrap();
    let model = Model::<f32>::build(ArchSpec::toy_vit(9), HeadSpec::toy(), &SeedTree::new(0)).unwrap();
    let e = measure_efficiency(&model, &set, 4).unwrap();
    assert_eq!((e.samples, e.batch_size), (18, 4));
    assert!(e.total_seconds > 0.0);
    assert!((e.throughput * e.total_seconds - 18.0).abs() < 1e-6);
    assert!((e.latency_ms * e.throughput - 1000.0).abs() < 1e-6);
    let empty = set.subset(&[]).unwrap();
    assert!(matches!(measure_efficiency(&model, &empty, 4), Err(Error::Data(_))));
    assert!(matches!(measure_efficiency(&model, &set, 0), Err(Error::Config(_))));
}
