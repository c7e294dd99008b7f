mod common;

use femurseg::inference::{cascade_segment, histogram, otsu_boundary, otsu_threshold, plan_windows, predict_volume, CascadeConfig, FnModel, InferenceError};
use femurseg::volgrid::{mask_subset, Spacing3, Volume3};
use proptest::prelude::*;

use common::otsu_oracle;

fn sp() -> Spacing3 {
    Spacing3::isotropic(1.0).unwrap()
}

#[test]
fn otsu_two_occupied_bins_tie_to_lowest_boundary() {
    // Every boundary between the two bins scores the same.
    let mut h = [0u64; 256];
    h[10] = 5;
    h[200] = 7;
    assert_eq!(otsu_boundary(&h).unwrap(), 11);
    assert_eq!(otsu_oracle(&h), Some(11));
}

#[test]
fn otsu_symmetric_histogram_ties_between_mirrored_splits() {
    // Bins 0, 1, 2 with counts 1, 2, 1: splits at 1 and 2 score equally.
    let mut h = [0u64; 256];
    h[0] = 1;
    h[1] = 2;
    h[2] = 1;
    assert_eq!(otsu_oracle(&h), Some(1));
    assert_eq!(otsu_boundary(&h).unwrap(), 1);
}

#[test]
fn otsu_degenerate_histograms() {
    let mut h = [0u64; 256];
    assert!(matches!(otsu_boundary(&h), Err(InferenceError::DegenerateHistogram)));
    h[42] = 1000;
    assert!(matches!(otsu_boundary(&h), Err(InferenceError::DegenerateHistogram)));
    assert_eq!(otsu_oracle(&h), None);
}

fn sparse_histogram() -> impl Strategy<Value = [u64; 256]> {
    prop::collection::vec((0usize..256, 1u64..50), 2..8).prop_map(|entries| {
        let mut h = [0u64; 256];
        for (b, c) in entries {
            h[b] += c;
        }
        h
    })
}

fn mirrored_histogram() -> impl Strategy<Value = [u64; 256]> {
    prop::collection::vec((0usize..128, 1u64..20), 1..6).prop_map(|entries| {
        let mut h = [0u64; 256];
        for (b, c) in entries {
            h[b] += c;
            h[255 - b] += c;
        }
        h
    })
}

proptest! {
    #[test]
    fn otsu_matches_exhaustive_oracle(h in sparse_histogram()) {
        prop_assert_eq!(otsu_boundary(&h).ok(), otsu_oracle(&h));
    }

    #[test]
    fn otsu_matches_oracle_on_mirrored_histograms(h in mirrored_histogram()) {
        prop_assert_eq!(otsu_boundary(&h).ok(), otsu_oracle(&h));
    }

    #[test]
    fn otsu_threshold_of_probabilities(values in prop::collection::vec(0.0f32..=1.0, 8..300)) {
        let n = values.len();
        let vol = Volume3::new([n, 1, 1], sp(), values).unwrap();
        let h = histogram(vol.data());
        match otsu_oracle(&h) {
            Some(k) => prop_assert_eq!(otsu_threshold(&vol).unwrap(), k as f64 / 256.0),
            None => prop_assert!(otsu_threshold(&vol).is_err()),
        }
    }

    #[test]
    fn window_count_and_coverage(slices in 1usize..300, depth in 1usize..80) {
        let p = plan_windows(slices, depth);
        prop_assert_eq!(p.window_count(), p.padded_slices() - depth + 1);
        prop_assert!(p.padded_slices() >= depth);
        if slices >= depth {
            prop_assert_eq!(p.window_count(), slices - depth + 1);
            for (z, &c) in p.coverage().iter().enumerate() {
                let expected = (z + 1).min(depth).min(slices - z).min(slices - depth + 1);
                prop_assert_eq!(c, expected);
            }
        } else {
            prop_assert!(p.coverage().iter().all(|&c| c == 1));
            prop_assert!(p.pad_after - p.pad_before <= 1);
        }
    }

    #[test]
    fn aggregation_is_the_mean_of_covering_windows(
        slices in 1usize..24,
        depth in 1usize..12,
        outputs in prop::collection::vec(0.0f32..=1.0, 24),
    ) {
        let vol = Volume3::filled([2, 2, slices], sp(), 0.0);
        let plan = plan_windows(slices, depth);
        let mut call = 0;
        let mut model = FnModel(|w: &Volume3| {
            let v = outputs[call];
            call += 1;
            vec![v; w.len()]
        });
        let p = predict_volume(&mut model, &vol, &plan).unwrap();
        for z in 0..slices {
            let covering: Vec<f64> = plan.starts.iter().enumerate()
                .filter(|(_, &s)| s <= z + plan.pad_before && z + plan.pad_before < s + depth)
                .map(|(i, _)| outputs[i] as f64)
                .collect();
            let mean = covering.iter().sum::<f64>() / covering.len() as f64;
            let lo = covering.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = covering.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = p.get(0, 0, z) as f64;
            prop_assert!((got - mean).abs() < 1e-6);
            prop_assert!(got >= lo - 1e-6 && got <= hi + 1e-6);
        }
    }

    #[test]
    fn cascade_endosteal_stays_inside_periosteal(seed in any::<u64>(), margin in 0usize..3) {
        let mut rng = femurseg::rng::SeededRng::new(seed, 1);
        let vol = Volume3::from_fn([6, 5, 7], sp(), |_, _, _| rng.uniform() as f32);
        let mut state = seed;
        let mut noise = move |w: &Volume3| -> Vec<f32> {
            w.data().iter().map(|&v| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (v + (state >> 40) as f32 / (1u64 << 24) as f32) / 2.0
            }).collect()
        };
        let mut peri = FnModel(|w: &Volume3| w.data().to_vec());
        let mut endo = FnModel(&mut noise);
        let r = cascade_segment(&mut peri, &mut endo, &vol, &CascadeConfig { window_depth: 4, dilation_margin: margin }).unwrap();
        prop_assert!(mask_subset(&r.endosteal.mask, &r.periosteal.mask).unwrap());
        prop_assert!(r.periosteal.probability.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
