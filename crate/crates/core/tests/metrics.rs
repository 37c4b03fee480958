mod common;

use proptest::prelude::*;
use turbo_core::autodiff::Tensor;
use turbo_core::config::EvalSection;
use turbo_core::metrics::{evaluate_run, ks_distance, mode_coverage};
use turbo_core::train::build_run;

// Direct supremum over every observed point of |F_a - F_b|.
fn ks_by_definition(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], t: f64| s.iter().filter(|v| **v <= t).count() as f64 / s.len() as f64;
    a.iter().chain(b).map(|&t| (cdf(a, t) - cdf(b, t)).abs()).fold(0.0, f64::max)
}

#[test]
fn hand_enumerated_case() {
    // a: 1 2 3 4 5, b: 3.5 4.5 6; at t = 3 F_a = 3/5 and F_b = 0
    let d = ks_distance(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.5, 4.5, 6.0]).unwrap();
    assert!((d - 0.6).abs() < 1e-15);
}

#[test]
fn ties_are_counted_together() {
    assert_eq!(ks_distance(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 1.0 / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ks_matches_definition_and_is_symmetric(
        a in prop::collection::vec(-3i32..3, 1..30),
        b in prop::collection::vec(-3i32..3, 1..30),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let d = ks_distance(&a, &b).unwrap();
        prop_assert!((d - ks_by_definition(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn ks_ignores_monotone_maps(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let f = |v: &f64| (0.3 * v).exp() + v;
        let fa: Vec<f64> = a.iter().map(f).collect();
        let fb: Vec<f64> = b.iter().map(f).collect();
        prop_assert_eq!(ks_distance(&a, &b).unwrap(), ks_distance(&fa, &fb).unwrap());
    }
}

#[test]
fn coverage_fractions() {
    let centers = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
    let t = Tensor::from_rows(&[vec![1.05, 0.0], vec![-0.98, 0.02], vec![0.9, 0.0], vec![0.5, 0.5]]).unwrap();
    let c = mode_coverage(&t, &centers, 0.15).unwrap();
    assert_eq!(c, vec![0.5, 0.25, 0.0]);
}

#[test]
fn evaluation_is_reproducible_and_seed_sensitive() {
    let state = build_run(&common::small("TURBO_FULL", 3, "")).unwrap();
    let eval = EvalSection {
        samples: 400,
        ..EvalSection::default()
    };
    let a = evaluate_run(&state, &eval).unwrap();
    assert_eq!(a, evaluate_run(&state, &eval).unwrap());
    let other = EvalSection { seed: eval.seed + 1, ..eval };
    assert_ne!(a, evaluate_run(&state, &other).unwrap());
    for k in ["x_tilde", "z_tilde", "x_hat", "z_hat"] {
        assert_eq!(a.ks[k].len(), 2, "{k}");
    }
    for k in ["paired_z", "paired_x", "cycle_x", "cycle_z"] {
        assert!(a.mse[k].is_finite(), "{k}");
    }
}

#[test]
fn flow_and_ring_report_their_extras() {
    let flow = build_run(&common::small("FLOW", 1, "")).unwrap();
    let rec = evaluate_run(&flow, &EvalSection { samples: 300, ..EvalSection::default() }).unwrap();
    assert!(rec.nll.is_some() && rec.nll_gap.is_some());

    let mut ring = common::shipped("gan_ring.toml");
    ring.model.hidden = vec![4];
    let state = build_run(&ring).unwrap();
    let rec = evaluate_run(&state, &EvalSection { samples: 300, ..EvalSection::default() }).unwrap();
    assert_eq!(rec.coverage.as_ref().unwrap().len(), 8);
    assert_eq!(rec.coverage_radius, Some(3.0 * 0.05));
    assert!(!rec.mse.contains_key("cycle_x"));
}
