mod common;

use common::*;
use eegfmri::dsp::*;
use eegfmri::{Error, Tensor64};
use proptest::prelude::*;

/// O(n²) DFT magnitude of each Hann-windowed frame.
fn naive_stft(x: &[f64], frame: usize, hop: usize) -> Vec<Vec<f64>> {
    let w: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
        .collect();
    let frames = (x.len() - frame) / hop + 1;
    (0..frames)
        .map(|f| {
            (0..=frame / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..frame {
                        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / frame as f64;
                        let v = x[f * hop + n] * w[n];
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect()
        })
        .collect()
}

fn recording(channels: usize, len: usize, fs: f64, seed: u64) -> EegRecording<f64> {
    let mut r = rng(seed);
    let chans = (0..channels).map(|_| random(&[len], -50.0, 50.0, &mut r).to_vec()).collect();
    EegRecording::new(chans, fs, "s01").unwrap()
}

#[test]
fn segment_window_examples() {
    assert_eq!(window_len(250.0, 2.16), 540);
    let w = segment_windows(&recording(2, 1000, 250.0, 1), 2.16).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0][0].len(), 540);
    let rec = recording(1, 540, 250.0, 2);
    let w = segment_windows(&rec, 2.16).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0][0], rec.channels()[0]);
    assert!(matches!(segment_windows(&recording(1, 539, 250.0, 3), 2.16), Err(Error::Empty(_))));
}

#[test]
fn recording_invariants() {
    assert!(EegRecording::new(vec![vec![0.0; 3], vec![0.0; 4]], 250.0, "x").is_err());
    assert!(EegRecording::new(vec![vec![0.0; 3]], 0.0, "x").is_err());
}

#[test]
fn lag_window_examples() {
    let rec = recording(2, 250 * 40, 250.0, 4);
    let w = lag_aligned_window(&rec, 0, 30.0, 20.0, 6.0).unwrap();
    assert_eq!(w[1], rec.channels()[1][1000..6000].to_vec());
    let w = lag_aligned_window(&rec, 0, 26.0, 20.0, 6.0).unwrap();
    assert_eq!(w[0], rec.channels()[0][0..5000].to_vec());
    match lag_aligned_window(&rec, 12, 25.0, 20.0, 6.0) {
        Err(Error::Alignment { index, .. }) => assert_eq!(index, 12),
        other => panic!("expected alignment error, got {other:?}"),
    }
    let msg = lag_aligned_window(&rec, 12, 25.0, 20.0, 6.0).unwrap_err().to_string();
    assert!(msg.contains("BOLD volume 12"), "{msg}");
}

#[test]
fn stft_matches_dft_oracle_on_random_window() {
    let x = random(&[540], -1.0, 1.0, &mut rng(5)).to_vec();
    let spec = stft(&x, StftParams { frame_len: 64, hop: 32 }).unwrap();
    let want = naive_stft(&x, 64, 32);
    assert_eq!(spec.shape(), &[(540 - 64) / 32 + 1, 33]);
    assert_close(&spec.to_vec(), &want.concat(), 1e-8);
}

#[test]
fn stft_bin_centre_sinusoid_peaks_at_its_bin() {
    let (fs, frame) = (1000.0, 100);
    for k in [1usize, 7, 25, 49] {
        let f = k as f64 * fs / frame as f64;
        let x: Vec<f64> = (0..1000).map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / fs).sin()).collect();
        let spec = stft(&x, StftParams { frame_len: frame, hop: 50 }).unwrap();
        for row in spec.to_vec().chunks(frame / 2 + 1) {
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn stft_equals_dft_for_frames_up_to_256(frame in 2usize..=256, hop in 1usize..64, extra in 0usize..200, seed in 0u64..100) {
        let x = random(&[frame + extra], -1.0, 1.0, &mut rng(seed)).to_vec();
        let spec = stft(&x, StftParams { frame_len: frame, hop }).unwrap();
        let want = naive_stft(&x, frame, hop).concat();
        for (a, b) in spec.to_vec().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn band_limit_drops_dc_and_is_pure(fs in 100.0f64..6000.0, frame in 4usize..600, cutoff in 1.0f64..400.0) {
        let keep = retained_bins(fs, frame, cutoff);
        prop_assert!(*keep.start() == 1);
        prop_assert_eq!(keep.clone(), retained_bins(fs, frame, cutoff));
        for k in keep {
            prop_assert!(k as f64 * fs / frame as f64 <= cutoff + 1e-9);
        }
    }

    #[test]
    fn minmax_is_idempotent(vals in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let t = Tensor64::new(&[vals.len()], vals).unwrap();
        let once = minmax_normalize(&t);
        let (lo, hi) = once.min_max();
        prop_assume!(hi > lo);
        prop_assert_eq!(lo, 0.0);
        prop_assert_eq!(hi, 1.0);
        let twice = minmax_normalize(&once);
        prop_assert!(twice.max_abs_diff(&once).unwrap() <= 1e-15);
    }

    #[test]
    fn dct_round_trip_at_equal_size(d in 1usize..6, h in 1usize..9, w in 1usize..9, seed in 0u64..100) {
        let v = random(&[d, h, w], 0.0, 1.0, &mut rng(seed));
        let back = dct_downsample(&v, [d, h, w]).unwrap();
        prop_assert!(back.max_abs_diff(&v).unwrap() <= 1e-10);
    }
}

#[test]
fn band_limit_examples() {
    let spec = stft(&vec![1.0; 250], StftParams { frame_len: 50, hop: 25 }).unwrap();
    let lim = band_limit(&spec, 250.0, 50, 250.0).unwrap();
    assert_eq!(lim.shape(), &[spec.shape()[0], 25]);
    assert_eq!(lim.get(&[0, 0]), spec.get(&[0, 1]));
    let spec = stft(&vec![1.0; 500], StftParams { frame_len: 100, hop: 50 }).unwrap();
    assert_eq!(band_limit(&spec, 1000.0, 100, 250.0).unwrap().shape()[1], 25);
    let spec = stft(&vec![1.0; 500], StftParams { frame_len: 500, hop: 50 }).unwrap();
    assert_eq!(band_limit(&spec, 5000.0, 500, 250.0).unwrap().shape()[1], 25);
}

#[test]
fn minmax_examples() {
    let t = Tensor64::from_f64(&[3], &[2., 4., 6.]).unwrap();
    assert_eq!(minmax_normalize(&t).to_vec(), vec![0.0, 0.5, 1.0]);
    let t = Tensor64::from_f64(&[3], &[5., 5., 5.]).unwrap();
    assert_eq!(minmax_normalize(&t).to_vec(), vec![0.0; 3]);
}

#[test]
fn dct_downsample_examples() {
    for target in [[2, 3, 4], [5, 6, 7], [1, 1, 1]] {
        let v = Tensor64::full(&[5, 6, 7], 0.3);
        let out = dct_downsample(&v, target).unwrap();
        assert_eq!(out.shape(), &target);
        assert!(out.values().iter().all(|&x| (x - 0.3).abs() <= 1e-12), "{target:?}");
    }
    let v = Tensor64::full(&[54, 108, 108], 0.7);
    let out = dct_downsample(&v, [30, 64, 64]).unwrap();
    assert_eq!(out.shape(), &[30, 64, 64]);
    assert!(out.values().iter().all(|&x| (x - 0.7).abs() <= 1e-12));
    assert!(matches!(dct_downsample(&v, [60, 64, 64]), Err(Error::Dimension(_))));
}

#[test]
fn dct_downsample_keeps_low_frequencies() {
    // A single low cosine mode survives resampling as the same mode on the
    // coarser grid.
    let (n, m) = (16, 8);
    let mode = |len: usize, i: usize| (std::f64::consts::PI * (2 * i + 1) as f64 / (2 * len) as f64).cos();
    let v = Tensor64::new(&[1, 1, n], (0..n).map(|i| mode(n, i)).collect()).unwrap();
    let out = dct_downsample(&v, [1, 1, m]).unwrap().to_vec();
    let scale = (m as f64 / n as f64).sqrt() * (2.0 / n as f64).sqrt().recip() * (2.0 / m as f64).sqrt();
    for (i, o) in out.iter().enumerate() {
        assert!((o - scale * mode(m, i)).abs() < 1e-12);
    }
}

#[test]
fn build_pairs_counts() {
    // 100 volumes, TR 2 s, EEG covering all of them.
    let fs = 100.0;
    let rec = recording(3, (fs * 2.0 * 100.0) as usize, fs, 6);
    let vols: Vec<Tensor64> = (0..100).map(|k| random(&[2, 4, 4], 0.0, k as f64 + 1.0, &mut rng(k))).collect();
    let mut opts = PreprocessOptions::new(fs, 2.0);
    let pairs = build_pairs(&rec, &vols, &opts).unwrap();
    assert_eq!(pairs.len(), segment_windows(&rec, 2.0).unwrap().len().min(100));
    assert_eq!(pairs.len(), 100);

    opts.pairing = PairingMode::LagAligned;
    let pairs = build_pairs(&rec, &vols, &opts).unwrap();
    // Volume k starts at 2k s; the window needs 2k >= 26.
    assert_eq!(pairs.len(), 100 - 13);
    assert_eq!(pairs[0].bold_index, 13);
    assert_eq!(pairs[0].spectrogram.window_end_offset_s, 6.0);
    for p in &pairs {
        let (lo, hi) = p.spectrogram.data.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        let (lo, hi) = p.volume.data.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    let short = recording(1, 500, fs, 7);
    assert!(matches!(build_pairs(&short, &vols, &opts), Err(Error::Empty(_))));
}

#[test]
fn noddi_window_geometry() {
    let rec = recording(64, 540, 250.0, 8);
    let opts = PreprocessOptions::new(250.0, 2.16);
    let vols = vec![Tensor64::zeros(&[30, 64, 64])];
    let pairs = build_pairs(&rec, &vols, &opts).unwrap();
    assert_eq!(pairs[0].spectrogram.data.shape(), &[64, 20, 25]);
}
