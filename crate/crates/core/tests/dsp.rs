//! Preprocessing chain against independent oracles.

mod common;

use std::f64::consts::PI;

use aad_core::dsp::{
    apply_filter, common_average_reference, pca_fit, preprocess_eeg, resample, EegPipelineConfig, FirFilter,
};
use aad_core::FeatureTensor;
use common::{covariance, dtft_magnitude, jacobi_eigen, rng, sine_fit, uniform};
use nalgebra::DMatrix;
use rand::Rng;

fn db(x: f64) -> f64 {
    20.0 * x.log10()
}

fn sine(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f32> {
    (0..n)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / fs).sin()) as f32)
        .collect()
}

#[test]
fn eeg_band_response_at_10khz() {
    let f = FirFilter::bandpass(0.5, 32.0, 10_000.0).unwrap();
    for k in 0..=26 {
        let freq = 2.0 + k as f64;
        let g = db(dtft_magnitude(&f.taps, freq, 10_000.0));
        assert!(g.abs() <= 1.0, "{freq} Hz: {g:.3} dB");
    }
    assert!(db(dtft_magnitude(&f.taps, 0.0, 10_000.0)) <= -20.0);
    assert!(db(dtft_magnitude(&f.taps, 0.05, 10_000.0)) <= -20.0);
    assert!(db(dtft_magnitude(&f.taps, 48.0, 10_000.0)) <= -20.0);
    // the crate's own evaluation agrees with the oracle
    assert!((f.magnitude(10.0) - dtft_magnitude(&f.taps, 10.0, 10_000.0)).abs() < 1e-9);
}

#[test]
fn ten_hz_sine_passes_without_phase_shift() {
    let fs = 256.0;
    let n = 60 * 256;
    let x = FeatureTensor::new(1, n, sine(10.0, fs, n, 1.0), fs).unwrap();
    let f = FirFilter::bandpass(0.5, 32.0, fs).unwrap();
    let y = apply_filter(&x, &f).unwrap();
    let edge = f.len();
    let mid: Vec<f64> = y.row(0)[edge..n - edge].iter().map(|&v| v as f64).collect();
    let (amp, phase) = sine_fit(&mid, 10.0, fs, edge);
    assert!(db(amp).abs() <= 1.0, "amplitude {amp}");
    assert!(phase.to_degrees().abs() < 1.0, "phase {} deg", phase.to_degrees());
}

#[test]
fn slow_drift_is_attenuated() {
    let fs = 128.0;
    let n = 400 * 128;
    let x = FeatureTensor::new(1, n, sine(0.01, fs, n, 1.0), fs).unwrap();
    let f = FirFilter::bandpass(0.5, 32.0, fs).unwrap();
    let y = apply_filter(&x, &f).unwrap();
    let edge = f.len();
    let peak_in = x.row(0)[edge..n - edge].iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let peak_out = y.row(0)[edge..n - edge].iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(db(peak_out as f64 / peak_in as f64) <= -20.0);
}

fn random_eeg(c: usize, t: usize, fs: f64, seed: u64) -> FeatureTensor {
    let mut r = rng(seed);
    FeatureTensor::new(c, t, uniform(&mut r, c * t, 50.0), fs).unwrap()
}

#[test]
fn car_is_zero_mean_idempotent_and_linear() {
    let x = random_eeg(32, 500, 64.0, 1);
    let y = common_average_reference(&x).unwrap();
    for t in 0..500 {
        let mean: f64 = (0..32).map(|c| y.at(c, t) as f64).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
    }
    let yy = common_average_reference(&y).unwrap();
    for (a, b) in y.data().iter().zip(yy.data()) {
        assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
    }
    let x2 = random_eeg(32, 500, 64.0, 2);
    let sum = x.with_data(32, 500, x.data().iter().zip(x2.data()).map(|(a, b)| 2.0 * a + b).collect()).unwrap();
    let lhs = common_average_reference(&sum).unwrap();
    let y2 = common_average_reference(&x2).unwrap();
    for ((l, a), b) in lhs.data().iter().zip(y.data()).zip(y2.data()) {
        assert!((l - (2.0 * a + b)).abs() < 1e-4);
    }
}

#[test]
fn filtering_and_car_commute() {
    let x = random_eeg(8, 2000, 128.0, 3);
    let f = FirFilter::bandpass(0.5, 32.0, 128.0).unwrap();
    let a = common_average_reference(&apply_filter(&x, &f).unwrap()).unwrap();
    let b = apply_filter(&common_average_reference(&x).unwrap(), &f).unwrap();
    let scale = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() / scale < 1e-5);
    }
}

#[test]
fn resample_10khz_sine_to_64hz() {
    let fs = 10_000.0;
    let n = 640_000;
    let x = FeatureTensor::new(1, n, sine(10.0, fs, n, 1.0), fs).unwrap();
    let y = resample(&x, 64.0).unwrap();
    assert_eq!(y.cols(), 4096);
    let ideal = sine(10.0, 64.0, 4096, 1.0);
    let (a, b): (Vec<f64>, Vec<f64>) = y.row(0)[32..4096 - 32]
        .iter()
        .zip(&ideal[32..4096 - 32])
        .map(|(&p, &q)| (p as f64, q as f64))
        .unzip();
    assert!(pearson(&a, &b) > 0.999);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn resample_round_trip_is_stable() {
    // band-limited: a few low harmonics of the record length
    let n = 1000;
    let fs = 100.0;
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            ((2.0 * PI * 3.0 * t).sin() + 0.5 * (2.0 * PI * 7.0 * t).cos()) as f32
        })
        .collect();
    let x = FeatureTensor::new(1, n, data, fs).unwrap();
    let down = resample(&x, 64.0).unwrap();
    let up = resample(&down, 100.0).unwrap();
    let down2 = resample(&up, 64.0).unwrap();
    let rms = (down
        .data()
        .iter()
        .zip(down2.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / down.cols() as f64)
        .sqrt();
    assert!(rms < 1e-3, "rms {rms}");
}

#[test]
fn pipeline_is_deterministic_and_lands_at_64hz() {
    let mut r = rng(4);
    let fs = 256.0;
    let raw: Vec<f32> = (0..4 * 2560).map(|_| r.random_range(-50e-6..50e-6)).collect();
    let x = FeatureTensor::new(4, 2560, raw, fs).unwrap();
    let cfg = EegPipelineConfig::default();
    let a = preprocess_eeg(&x, &cfg).unwrap();
    let b = preprocess_eeg(&x, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.sample_rate_hz, 64.0);
    assert_eq!(a.cols(), 640);
    assert_eq!(a.unit, "uV");
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    for (n, d, k, seed) in [(20, 6, 3, 5u64), (50, 12, 4, 6)] {
        let mut r = rng(seed);
        // correlated columns so the spectrum is not flat
        let mix = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0)) * mix;
        let model = pca_fit(&x, k).unwrap();
        let (values, vectors) = jacobi_eigen(&covariance(&rows_of(&x)));
        for i in 0..k {
            assert!(
                (model.explained_variance[i] - values[i]).abs() < 1e-6,
                "component {i}: {} vs {}",
                model.explained_variance[i],
                values[i]
            );
            let dot: f64 = (0..d).map(|j| model.components[(i, j)] * vectors[i][j]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-6);
        }
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(k, k)).abs().max() < 1e-5);
        for w in model.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }

        // reconstruction residual equals the optimal rank-k residual
        let recon = model.inverse_transform(&model.transform(&x).unwrap());
        let residual = (&x - recon).norm_squared();
        let optimal: f64 = values[k..].iter().sum::<f64>() * (n - 1) as f64;
        assert!((residual - optimal).abs() < 1e-5 * optimal.max(1.0));
    }
}
