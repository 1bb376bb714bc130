use masktune::selective::{self, EnsembleScores};
use proptest::prelude::*;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(1u32..1_000_000, 1..300)
        .prop_map(|s| s.into_iter().map(|v| f64::from(v) / 1e6).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ensemble_matches_softmax_product(
        a in prop::collection::vec(-8.0f64..8.0, 12),
        b in prop::collection::vec(-8.0f64..8.0, 12),
    ) {
        let e = selective::ensemble_scores(&a, &b, 3).unwrap();
        for i in 0..4 {
            let pa = softmax(&a[i * 3..i * 3 + 3]);
            let pb = softmax(&b[i * 3..i * 3 + 3]);
            let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let best = prod.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((e.scores[i] - best).abs() <= 1e-12);
            prop_assert!(e.scores[i] <= 1.0 && e.scores[i] > 0.0);
            prop_assert_eq!(prod[e.predictions[i]], best);
        }
    }

    #[test]
    fn calibration_hits_coverage_on_its_own_scores(scores in distinct_scores(), c in 0.05f64..=1.0) {
        let gamma = selective::calibrate_gamma(&scores, c).unwrap();
        let ens = EnsembleScores { predictions: vec![0; scores.len()], scores: scores.clone() };
        let r = selective::selective_eval(&ens, &vec![0; scores.len()], gamma).unwrap();
        prop_assert!(r.coverage >= c - 1e-12);
        prop_assert!(r.coverage - c <= 1.0 / scores.len() as f64 + 1e-12);
        prop_assert_eq!(r.covered + r.abstained.len(), scores.len());
        prop_assert_eq!(r.selective_error, Some(0.0));
    }

    #[test]
    fn lower_coverage_never_lowers_gamma(scores in distinct_scores(), a in 0.05f64..=1.0, b in 0.05f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let g_lo = selective::calibrate_gamma(&scores, lo).unwrap();
        let g_hi = selective::calibrate_gamma(&scores, hi).unwrap();
        prop_assert!(g_lo >= g_hi);
    }
}

#[test]
fn full_coverage_predicts_everything() {
    let ens = EnsembleScores {
        predictions: vec![0, 1, 1],
        scores: vec![0.3, 0.9, 0.26],
    };
    let g = selective::calibrate_gamma(&ens.scores, 1.0).unwrap();
    assert_eq!(g, 0.0);
    let r = selective::selective_eval(&ens, &[0, 0, 1], g).unwrap();
    assert_eq!(r.covered, 3);
    assert!((r.selective_error.unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn curve_rows_follow_targets() {
    let val = EnsembleScores {
        predictions: vec![0; 10],
        scores: (1..=10).map(|i| f64::from(i) / 10.0).collect(),
    };
    let pts = selective::coverage_curve(&val, &val, &[0; 10], &[1.0, 0.9, 0.5]).unwrap();
    let cov: Vec<f64> = pts.iter().map(|p| p.report.coverage).collect();
    assert_eq!(cov, vec![1.0, 0.9, 0.5]);
    let mut out = Vec::new();
    selective::write_curve_csv(&mut out, &pts).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("target,gamma,coverage,selective_error\n"));
}

#[test]
fn bad_coverage_rejected() {
    for c in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(selective::calibrate_gamma(&[0.5], c).is_err());
    }
    assert!(selective::calibrate_gamma(&[], 0.9).is_err());
    assert!(selective::calibrate_gamma(&[f64::INFINITY], 0.9).is_err());
}
