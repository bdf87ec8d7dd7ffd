mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use wlas::features::*;
use wlas::NdArray;

fn empirical_snr(clean: &[f64], noisy: &[f64]) -> f64 {
    let noise: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    10.0 * (mean_power(clean) / mean_power(&noise)).log10()
}

#[test]
fn awgn_hits_target_snr_over_100_seeds() {
    for target in [0.0, 10.0] {
        for seed in 0..100u64 {
            let mut g = rng(seed);
            let clean: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.01).sin() + g.gen_range(-0.2..0.2)).collect();
            let noisy = add_awgn(&clean, &NoiseConfig::at_db(target, seed)).unwrap();
            let snr = empirical_snr(&clean, &noisy);
            assert!((snr - target).abs() <= 0.5, "target {target} seed {seed}: {snr}");
        }
    }
}

#[test]
fn feature_noise_keeps_shape_and_clean_is_identity() {
    let f = AudioFeatures::new(random_array(&mut rng(1), &[40, MFCC_DIM], 3.0)).unwrap();
    let clean = add_awgn_features(&f, &NoiseConfig::clean()).unwrap();
    assert_eq!(clean, f);
    let noisy = add_awgn_features(&f, &NoiseConfig::at_db(0.0, 4)).unwrap();
    assert_eq!(noisy.len(), 40);
    assert_ne!(noisy, f);
    assert_eq!(noisy, add_awgn_features(&f, &NoiseConfig::at_db(0.0, 4)).unwrap());
}

#[test]
fn noise_rejects_degenerate_signals() {
    assert!(add_awgn(&[], &NoiseConfig::at_db(0.0, 1)).is_err());
    assert!(add_awgn(&[0.0; 8], &NoiseConfig::at_db(0.0, 1)).is_err());
    assert!(add_awgn(&[1.0; 8], &NoiseConfig::at_db(f64::INFINITY, 1)).is_err());
}

#[test]
fn snr_labels_roundtrip() {
    for s in [Snr::Clean, Snr::Db(0.0), Snr::Db(10.0), Snr::Db(-5.0)] {
        assert_eq!(s.label().parse::<Snr>().unwrap(), s);
    }
    assert!("loud".parse::<Snr>().is_err());
}

#[test]
fn windows_stack_five_frames() {
    let raw = RawVideo::new(7, 2, 2, (0..28).map(|i| f64::from(i) / 100.0).collect()).unwrap();
    let w = window_frames(&raw).unwrap();
    assert_eq!(w.len(), 3);
    let first = w.window(0);
    assert_eq!(first.shape(), &[WINDOW_FRAMES, 2, 2]);
    assert_eq!(first.data()[..4], [0.0, 0.01, 0.02, 0.03]);
    assert_eq!(w.window(2).data()[0], 0.08);
    assert!(window_frames(&RawVideo::zeros(4, 2, 2)).is_err());
}

#[test]
fn mfcc_frame_count_and_finiteness() {
    let wave: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.05).sin()).collect();
    let f = compute_mfcc(&wave, 16_000, &MfccConfig::default()).unwrap();
    assert_eq!(f.len(), 98);
    assert_eq!(f.frames().cols(), MFCC_DIM);
    assert!(f.frames().is_finite());
}

#[test]
fn mel_scale_inverts() {
    for hz in [0.0, 100.0, 1000.0, 8000.0] {
        assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
    }
    assert!((hz_to_mel(1000.0) - 999.985).abs() < 0.01);
}

proptest! {
    #[test]
    fn snr_tracks_target(target in -5.0f64..20.0, seed in any::<u64>()) {
        let clean: Vec<f64> = (0..16_000).map(|i| ((i % 97) as f64 / 50.0) - 1.0).collect();
        let noisy = add_awgn(&clean, &NoiseConfig::at_db(target, seed)).unwrap();
        prop_assert!((empirical_snr(&clean, &noisy) - target).abs() < 0.5);
    }

    #[test]
    fn audio_features_reject_wrong_width(cols in 1usize..30) {
        prop_assume!(cols != MFCC_DIM);
        prop_assert!(AudioFeatures::new(NdArray::zeros(&[3, cols])).is_err());
    }
}
