use crfix_core::classify::*;
use proptest::prelude::*;

fn labels() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..60).prop_flat_map(|n| (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn metrics_are_bounded((pred, gold) in labels()) {
        let m = eval_classifier(&pred, &gold).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        prop_assert_eq!(m.counts.total() as usize, pred.len());
    }

    #[test]
    fn permutation_invariant((pred, gold) in labels(), rot in 0usize..60) {
        let k = rot % pred.len();
        let mut p2 = pred.clone();
        let mut g2 = gold.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(eval_classifier(&pred, &gold).unwrap(), eval_classifier(&p2, &g2).unwrap());
    }

    #[test]
    fn class_swap_exchanges_scores((pred, gold) in labels()) {
        let m = eval_classifier(&pred, &gold).unwrap();
        let np: Vec<bool> = pred.iter().map(|b| !b).collect();
        let ng: Vec<bool> = gold.iter().map(|b| !b).collect();
        let s = eval_classifier(&np, &ng).unwrap();
        prop_assert_eq!(m.per_class["true"], s.per_class["false"]);
        prop_assert_eq!(m.per_class["false"], s.per_class["true"]);
        prop_assert_eq!(m.accuracy, s.accuracy);
    }
}

#[test]
fn degenerate_inputs() {
    assert!(matches!(eval_classifier(&[], &[]), Err(ClassifyError::EmptyInput)));
    assert!(matches!(eval_classifier(&[true], &[]), Err(ClassifyError::LengthMismatch { .. })));
    let m = eval_classifier(&[false, false], &[false, false]).unwrap();
    assert!(m.precision_undefined && m.recall_undefined && m.f1_undefined);
    assert_eq!(m.accuracy, 1.0);
}

#[test]
fn rule_baseline_on_typical_comments() {
    let cases = [
        ("Rename `tmp` to `buffer`.", true),
        ("Please add a null check here.", true),
        ("Why do we need this?", false),
        ("Looks good to me!", false),
        ("Could you explain the reasoning?", false),
        ("nit: use `Vec::with_capacity`", true),
    ];
    for (text, want) in cases {
        assert_eq!(RuleActionability::label(text).actionable, want, "{text}");
    }
}
