use masktune::masking::{self, KeepMask, RandomMaskMode, ThresholdPolicy};
use masktune::saliency::Heatmap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn heatmap() -> impl Strategy<Value = Heatmap> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..10.0, h * w).prop_map(move |v| Heatmap::new(h, w, v).unwrap())
    })
}

fn policy() -> impl Strategy<Value = ThresholdPolicy> {
    prop_oneof![
        (0u8..4).prop_map(ThresholdPolicy::MeanPlusKSigma),
        (1usize..5).prop_map(ThresholdPolicy::TopK),
        Just(ThresholdPolicy::GlobalMean),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn binary_masks_zero_exactly_and_are_idempotent(map in heatmap(), pol in policy(), seed in any::<u64>()) {
        let pol = match pol {
            ThresholdPolicy::TopK(k) => ThresholdPolicy::TopK(k.min(map.values.len())),
            p => p,
        };
        let (m, _) = masking::keep_mask(&map, pol, Some(4.0)).unwrap();
        prop_assert!(m.is_binary());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..3 * map.values.len()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let once = masking::apply_mask(&x, &m).unwrap();
        let twice = masking::apply_mask(&once, &m).unwrap();
        prop_assert_eq!(&once, &twice);
        let plane = map.values.len();
        for (i, v) in once.iter().enumerate() {
            if m.values[i % plane] == 0.0 {
                prop_assert_eq!(v.to_bits(), 0.0f64.to_bits());
            } else {
                prop_assert_eq!(v.to_bits(), x[i].to_bits());
            }
        }
    }

    #[test]
    fn two_sigma_masks_at_most_a_quarter(map in heatmap()) {
        let (m, _) = masking::keep_mask(&map, ThresholdPolicy::MeanPlusKSigma(2), None).unwrap();
        prop_assert!(m.masked_fraction() <= 0.25);
    }

    #[test]
    fn accumulation_only_removes(a in heatmap(), pol in (0u8..3), shift in 0.0f64..5.0) {
        let b = Heatmap::new(a.h, a.w, a.values.iter().rev().map(|v| v + shift).collect()).unwrap();
        let (ma, _) = masking::keep_mask(&a, ThresholdPolicy::MeanPlusKSigma(pol), None).unwrap();
        let (mb, _) = masking::keep_mask(&b, ThresholdPolicy::MeanPlusKSigma(pol), None).unwrap();
        let both = masking::accumulate(&ma, &mb).unwrap();
        prop_assert!(both.kept() <= ma.kept().min(mb.kept()));
        prop_assert!(both.values.iter().zip(&ma.values).all(|(x, y)| x <= y));
        prop_assert_eq!(masking::accumulate(&both, &mb).unwrap(), both.clone());
        prop_assert_eq!(masking::accumulate(&both, &KeepMask::keep_all(a.h, a.w)).unwrap(), both);
    }

    #[test]
    fn soft_weights_stay_in_unit_interval(map in heatmap()) {
        let (m, tau) = masking::keep_mask(&map, ThresholdPolicy::Soft, None).unwrap();
        prop_assert!(tau.is_none());
        prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn random_window_area_matches_expectation() {
    // Sides 2..=14 uniformly: E[side²] = 78 of 784 pixels.
    let expected = (2..=14).map(|s: usize| (s * s) as f64).sum::<f64>() / 13.0 / 784.0;
    assert!((expected - 78.0 / 784.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 20_000;
    let total: f64 = (0..n)
        .map(|_| masking::random_mask(28, 28, &mut rng, RandomMaskMode::RandomWindow).unwrap().masked_fraction())
        .sum();
    let mean = total / n as f64;
    // Side² has standard deviation ≈ 57 pixels.
    let se = 57.0 / 784.0 / (n as f64).sqrt();
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean} vs {expected}");
}

#[test]
fn fixed_area_windows_have_the_requested_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let m = masking::random_mask(28, 28, &mut rng, RandomMaskMode::FixedArea(16.0)).unwrap();
        assert_eq!(m.masked_area(), 16.0);
    }
}
