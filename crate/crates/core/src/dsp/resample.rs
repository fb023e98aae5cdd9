//! Fourier-domain resampling.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;

/// Output length for `len` samples taken from `fs_in` to `fs_out`.
pub fn resampled_len(len: usize, fs_in: f64, fs_out: f64) -> usize {
    (len as f64 * fs_out / fs_in).round() as usize
}

/// Resamples one periodic-extended signal to `out_len` samples by truncating
/// or zero-padding its spectrum. The Nyquist bin of an even-length spectrum
/// is split or merged so real signals stay real.
pub fn resample_signal(x: &[f64], out_len: usize) -> Vec<f64> {
    let n_in = x.len();
    if n_in == 0 || out_len == 0 {
        return vec![0.0; out_len];
    }
    if out_len == n_in {
        return x.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n_in).process(&mut spec);

    let mut out = vec![Complex::new(0.0, 0.0); out_len];
    let n = n_in.min(out_len);
    let nyq = n / 2 + 1;
    out[..nyq].copy_from_slice(&spec[..nyq]);
    let neg = n - nyq;
    if neg > 0 {
        out[out_len - neg..].copy_from_slice(&spec[n_in - neg..]);
    }
    if n % 2 == 0 {
        if out_len < n_in {
            out[n / 2] += spec[n_in - n / 2];
        } else {
            let half = out[n / 2] * 0.5;
            out[n / 2] = half;
            out[out_len - n / 2] = half;
        }
    }
    planner.plan_fft_inverse(out_len).process(&mut out);
    let scale = 1.0 / n_in as f64;
    out.iter().map(|c| c.re * scale).collect()
}

/// Resamples every row of `x` to `fs_out_hz`.
///
/// The caller is responsible for band-limiting the input below
/// `fs_out_hz / 2`.
pub fn resample(x: &FeatureTensor, fs_out_hz: f64) -> Result<FeatureTensor> {
    if !(fs_out_hz > 0.0 && fs_out_hz.is_finite()) {
        return Err(Error::invalid(format!("output rate must be positive, got {fs_out_hz}")));
    }
    let out_len = resampled_len(x.cols(), x.sample_rate_hz, fs_out_hz);
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
            resample_signal(&row, out_len).into_iter().map(|v| v as f32).collect()
        })
        .collect();
    let mut out = x.with_data(x.rows(), out_len, rows.concat())?;
    out.sample_rate_hz = fs_out_hz;
    Ok(out)
}
