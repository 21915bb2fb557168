use edos_core::metrics::{
    confusion, error_report, macro_f1, macro_f1_from_labels, macro_f1_with, per_class_report,
    ConfusionMatrix,
};
use proptest::prelude::*;

fn binary() -> ConfusionMatrix {
    ConfusionMatrix::from_rows(vec![vec![2909, 121], vec![346, 624]]).unwrap()
}

fn category() -> ConfusionMatrix {
    ConfusionMatrix::from_csv(
        "62,11,12,4\n\
         16,303,107,28\n\
         11,112,199,11\n\
         9,27,12,46",
    )
    .unwrap()
}

// Per-class F1 as 2TP / (2TP + FP + FN).
fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    2.0 * tp / (2.0 * tp + fp + fn_)
}

#[test]
fn binary_matrix_scores() {
    let cm = binary();
    let not_sexist = f1_from_counts(2909.0, 346.0, 121.0);
    let sexist = f1_from_counts(624.0, 121.0, 346.0);
    let want = (not_sexist + sexist) / 2.0;
    assert!((macro_f1(&cm) - want).abs() < 1e-12);
    assert!((macro_f1(&cm) - 0.8267).abs() < 1e-4);

    let s = &per_class_report(&cm)[1];
    assert!((s.precision - 624.0 / 745.0).abs() < 1e-12);
    assert!((s.recall - 624.0 / 970.0).abs() < 1e-12);
    assert!((s.precision - 0.8376).abs() < 1e-4);
    assert!((s.recall - 0.6433).abs() < 1e-4);
    assert!((s.f1 - 0.7277).abs() < 1e-4);
    assert_eq!(s.support, 970);
}

#[test]
fn binary_error_rates() {
    let rep = error_report(&binary());
    assert_eq!(rep.rates.len(), 2);
    let top = &rep.rates[0];
    assert_eq!(
        (top.actual, top.predicted, top.count, top.row_total),
        (1, 0, 346, 970)
    );
    assert!((top.rate - 0.3567).abs() < 1e-4);
    assert!(rep.omitted.is_empty());
}

#[test]
fn category_matrix_scores() {
    let cm = category();
    let f1s: Vec<f64> = (0..4)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let row: f64 = (0..4).map(|j| cm.get(c, j) as f64).sum();
            let col: f64 = (0..4).map(|i| cm.get(i, c) as f64).sum();
            f1_from_counts(tp, col - tp, row - tp)
        })
        .collect();
    let want = f1s.iter().sum::<f64>() / 4.0;
    assert!((macro_f1(&cm) - want).abs() < 1e-12);
    assert!((macro_f1(&cm) - 0.6085).abs() < 1e-4);
}

#[test]
fn category_error_rates() {
    let rep = error_report(&category());
    let find = |a: usize, p: usize| {
        rep.rates
            .iter()
            .find(|r| r.actual == a && r.predicted == p)
            .unwrap()
            .clone()
    };
    let r = find(1, 2);
    assert_eq!((r.count, r.row_total), (107, 454));
    assert!((r.rate - 0.2357).abs() < 1e-4);
    let r = find(2, 1);
    assert_eq!((r.count, r.row_total), (112, 333));
    assert!((r.rate - 0.3363).abs() < 1e-4);
    assert_eq!((rep.rates[0].actual, rep.rates[0].predicted), (2, 1));
    assert_eq!(rep.rates.len(), 12);
    assert!(rep.rates.windows(2).all(|w| w[0].rate >= w[1].rate));
}

#[test]
fn published_error_ratios() {
    for (n, d, want) in [(346, 970, 0.3567), (112, 333, 0.3363), (107, 454, 0.2357)] {
        let cm = ConfusionMatrix::from_rows(vec![vec![d - n, n], vec![0, 1]]).unwrap();
        let r = &error_report(&cm).rates[0];
        assert_eq!((r.actual, r.predicted), (0, 1));
        assert!((r.rate - want).abs() < 1e-4, "{n}/{d}");
    }
}

#[test]
fn small_label_lists() {
    let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
    assert_eq!(cm.rows(), &[vec![1, 1], vec![0, 1]]);
    assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-12);
    assert!((macro_f1_from_labels(&[0, 0, 1], &[0, 1, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn degenerate_ratios_are_zero() {
    let cm = confusion(&[0, 0], &[0, 0], 2).unwrap();
    assert_eq!(cm.precision(1), 0.0);
    assert_eq!(cm.f1(1), 0.0);
    assert_eq!(macro_f1(&cm), 0.5);
    assert_eq!(macro_f1_with(&cm, true), 1.0);
    let rep = error_report(&cm);
    assert_eq!(rep.omitted, vec![1]);
}

#[test]
fn malformed_input_is_rejected() {
    assert!(ConfusionMatrix::from_csv("1,2,3\n4,5,6").is_err());
    assert!(ConfusionMatrix::from_csv("1,-2\n3,4").is_err());
    assert!(ConfusionMatrix::from_csv("1,x\n3,4").is_err());
    assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    assert!(confusion(&[0], &[0, 1], 2).is_err());
}

fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..200).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
    })
}

proptest! {
    #[test]
    fn matrix_and_direct_paths_agree((g, p) in labels(5)) {
        let cm = confusion(&g, &p, 5).unwrap();
        let direct = macro_f1_from_labels(&g, &p, 5).unwrap();
        prop_assert!((macro_f1(&cm) - direct).abs() < 1e-12);
        prop_assert_eq!(cm.total(), g.len() as u64);
    }

    #[test]
    fn relabelling_classes_keeps_macro_f1(
        (g, p) in labels(4),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cm = confusion(&g, &p, 4).unwrap();
        let gp: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
        let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let moved = confusion(&gp, &pp, 4).unwrap();
        prop_assert_eq!(&moved, &cm.permuted(&perm));
        prop_assert!((macro_f1(&moved) - macro_f1(&cm)).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_unit_interval((g, p) in labels(11)) {
        let cm = confusion(&g, &p, 11).unwrap();
        let m = macro_f1(&cm);
        prop_assert!((0.0..=1.0).contains(&m));
        for s in per_class_report(&cm) {
            prop_assert!((0.0..=1.0).contains(&s.f1));
            prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_score_one(g in prop::collection::vec(0usize..4, 1..100)) {
        let cm = confusion(&g, &g, 4).unwrap();
        prop_assert!((macro_f1_with(&cm, true) - 1.0).abs() < 1e-12);
        prop_assert!(error_report(&cm).rates.iter().all(|r| r.count == 0));
    }

    #[test]
    fn error_rates_sum_to_row_miss_fraction((g, p) in labels(4)) {
        let cm = confusion(&g, &p, 4).unwrap();
        let rep = error_report(&cm);
        for a in 0..4 {
            let total = cm.row_sum(a);
            if total == 0 {
                prop_assert!(rep.omitted.contains(&a));
                continue;
            }
            let s: f64 = rep.rates.iter().filter(|r| r.actual == a).map(|r| r.rate).sum();
            prop_assert!((s - (1.0 - cm.recall(a))).abs() < 1e-12);
        }
    }
}
