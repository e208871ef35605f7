mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::preprocess::{
    apply_minmax, bin_index, discretize_bins, fit_minmax, segment_sequences, vanilla_tokenize, winsorize_percentile,
};
use sensorformer::{SensorFrame, SequenceBatch};

use common::bin_oracle;

const KS: [usize; 4] = [2, 7, 100, 1000];

/// Uniform draws plus every edge `j / k` and its two neighbouring floats.
fn probe_values(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
    for j in 0..=k {
        let e = j as f64 / k as f64;
        v.push(e);
        if e > 0.0 {
            v.push(f64::from_bits(e.to_bits() - 1));
        }
        if e < 1.0 {
            v.push(f64::from_bits(e.to_bits() + 1));
        }
    }
    v
}

#[test]
fn binning_matches_rational_edge_search_f64() {
    for k in KS {
        let values = probe_values(k, k as u64);
        let batch = SequenceBatch::new(values.clone(), 1, values.len(), 1).unwrap();
        let labels = discretize_bins(&batch, k).unwrap();
        for (x, &got) in values.iter().zip(&labels.labels) {
            assert_eq!(got, bin_oracle(*x, k), "k = {k}, x = {x:e}");
        }
    }
}

#[test]
fn binning_matches_rational_edge_search_f32() {
    for k in KS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let mut values: Vec<f32> = (0..100_000).map(|_| rng.random::<f32>()).collect();
        for j in 0..=k {
            let e = j as f32 / k as f32;
            values.extend([e, f32::from_bits(e.to_bits().saturating_sub(1)), f32::from_bits(e.to_bits() + 1)]);
        }
        values.retain(|x| (0.0..=1.0).contains(x));
        for &x in &values {
            assert_eq!(bin_index(x, k), bin_oracle(x as f64, k), "k = {k}, x = {x:e}");
        }
    }
}

#[test]
fn spot_values() {
    assert_eq!(bin_index(0.0f64, 100), 0);
    assert_eq!(bin_index(1.0f64, 100), 99);
    assert_eq!(bin_index(0.555f64, 100), 55);
    assert_eq!(bin_oracle(0.555, 100), 55);
    assert!(discretize_bins(&SequenceBatch::new(vec![0.5f64], 1, 1, 1).unwrap(), 1).is_err());
}

#[test]
fn vanilla_tokens_for_a_full_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let window: Vec<f64> = (0..900).map(|_| rng.random()).collect();
    let ids = vanilla_tokenize(&window, 3, 10_000).unwrap();
    assert_eq!(ids.len(), 900);
    assert!(ids.iter().all(|&i| i < 10_000));
    assert_eq!(vanilla_tokenize(&[0.5f64], 1, 10_000).unwrap(), vec![5000]);
    assert_eq!(vanilla_tokenize(&[1.0f64], 1, 10_000).unwrap(), vec![9999]);
}

#[test]
fn winsorize_hand_case() {
    let series: Vec<f64> = (1..=100).map(f64::from).collect();
    let out = winsorize_percentile(&series, 0.05).unwrap();
    // brute force: sort, drop five from each end, clip to what remains
    let mut sorted = series.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[5], sorted[94]);
    let expect: Vec<f64> = series.iter().map(|v| v.max(lo).min(hi)).collect();
    assert_eq!(out, expect);
    assert_eq!(out[..6], [6.0; 6]);
    assert_eq!(out[94..], [95.0; 6]);
}

fn frame_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..4).prop_flat_map(|dims| (prop::collection::vec(-50.0f64..50.0, dims * 8..dims * 60), Just(dims))).prop_map(
        |(mut v, dims)| {
            v.truncate(v.len() / dims * dims);
            (v, dims)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bins_stay_in_range(x in 0.0f64..=1.0, k in 2usize..5000) {
        let b = bin_index(x, k);
        prop_assert!(b < k);
        prop_assert_eq!(b, bin_oracle(x, k));
    }

    #[test]
    fn winsorize_is_idempotent(series in prop::collection::vec(-1e3f64..1e3, 1..200), fraction in 0.0f64..0.49) {
        let once = winsorize_percentile(&series, fraction).unwrap();
        let twice = winsorize_percentile(&once, fraction).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn minmax_maps_fit_data_onto_unit_interval((values, dims) in frame_strategy()) {
        let frame = SensorFrame::new(values.clone(), dims, None).unwrap();
        let Ok(scaler) = fit_minmax(&frame, 0.0) else { return Ok(()); };
        let scaled = apply_minmax(&values, &scaler).unwrap();
        for d in 0..dims {
            let col: Vec<f64> = scaled.iter().skip(d).step_by(dims).copied().collect();
            prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo.abs() < 1e-7 && (hi - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn segments_concatenate_to_the_kept_prefix((values, dims) in frame_strategy(), len in 1usize..9) {
        let rows = values.len() / dims;
        prop_assume!(rows >= len);
        let seg = segment_sequences::<f64>(&values, dims, None, len).unwrap();
        prop_assert_eq!(seg.windows.batch(), rows / len);
        prop_assert_eq!(seg.dropped, rows % len);
        let kept = rows / len * len * dims;
        prop_assert_eq!(common::bits(seg.windows.data()), common::bits(&values[..kept]));
    }

    #[test]
    fn vanilla_ids_invert_within_one_step(window in prop::collection::vec(0.0f64..=1.0, 3..60), vocab in 2usize..20_000) {
        let dims = 3;
        let window = &window[..window.len() / dims * dims];
        let ids = vanilla_tokenize(window, dims, vocab).unwrap();
        let len = window.len() / dims;
        for (i, &id) in ids.iter().enumerate() {
            prop_assert!((id as usize) < vocab);
            let (d, t) = (i / len, i % len);
            let back = id as f64 / vocab as f64;
            prop_assert!((window[t * dims + d] - back).abs() <= 1.0 / vocab as f64);
        }
    }
}
