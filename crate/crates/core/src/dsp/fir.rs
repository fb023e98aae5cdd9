//! Linear-phase FIR bandpass design (Hamming-windowed sinc) and zero-phase
//! application by FFT convolution.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub sample_rate_hz: f64,
    pub band: (f64, f64),
}

/// Transition widths for a `low..high` passband: `min(max(low / 4, 2), low)`
/// below the band and `min(max(high / 4, 2), fs / 2 - high)` above it.
pub fn default_transitions(low_hz: f64, high_hz: f64, fs_hz: f64) -> (f64, f64) {
    let below = (0.25 * low_hz).max(2.0).min(low_hz);
    let above = (0.25 * high_hz).max(2.0).min(fs_hz / 2.0 - high_hz);
    (below, above)
}

/// Number of Hamming taps for a transition of `width_hz`: `ceil(3.3 fs / width)`,
/// bumped to the next odd number.
pub fn hamming_length(width_hz: f64, fs_hz: f64) -> usize {
    let n = (3.3 * fs_hz / width_hz).ceil() as usize;
    n | 1
}

pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    fs_hz: f64,
    transition_low_hz: f64,
    transition_high_hz: f64,
) -> Result<FirFilter> {
    let nyquist = fs_hz / 2.0;
    if !(fs_hz > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(Error::invalid(format!(
            "invalid band {low_hz}..{high_hz} Hz at fs {fs_hz} Hz"
        )));
    }
    if !(transition_low_hz > 0.0 && transition_high_hz > 0.0) {
        return Err(Error::invalid("transition widths must be positive"));
    }
    if transition_low_hz > low_hz || high_hz + transition_high_hz > nyquist {
        return Err(Error::invalid(format!(
            "transition bands ({transition_low_hz}, {transition_high_hz}) Hz do not fit the band"
        )));
    }
    let n = hamming_length(transition_low_hz.min(transition_high_hz), fs_hz);
    // -6 dB points sit in the middle of each transition band.
    let f1 = (low_hz - transition_low_hz / 2.0) / fs_hz;
    let f2 = (high_hz + transition_high_hz / 2.0) / fs_hz;
    let center = (n - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..=n / 2)
        .map(|i| {
            let m = i as f64 - center;
            let ideal = 2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m);
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            ideal * window
        })
        .collect();
    // mirror so the taps are exactly symmetric
    for i in (0..n / 2).rev() {
        taps.push(taps[i]);
    }
    Ok(FirFilter {
        taps,
        sample_rate_hz: fs_hz,
        band: (low_hz, high_hz),
    })
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl FirFilter {
    /// Designs the band with [`default_transitions`].
    pub fn bandpass(low_hz: f64, high_hz: f64, fs_hz: f64) -> Result<Self> {
        let (tl, th) = default_transitions(low_hz, high_hz, fs_hz);
        design_bandpass(low_hz, high_hz, fs_hz, tl, th)
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Magnitude of the frequency response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, h) in self.taps.iter().enumerate() {
            re += h * (w * i as f64).cos();
            im -= h * (w * i as f64).sin();
        }
        (re * re + im * im).sqrt()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.magnitude(freq_hz).max(1e-300).log10()
    }
}

/// Filters every row of `x` with `filter`, compensating the group delay so
/// the output is aligned with the input. Samples outside the recording are
/// treated as zero.
pub fn apply_filter(x: &FeatureTensor, filter: &FirFilter) -> Result<FeatureTensor> {
    if (x.sample_rate_hz - filter.sample_rate_hz).abs() > 1e-9 * filter.sample_rate_hz {
        return Err(Error::invalid(format!(
            "signal is sampled at {} Hz but the filter was designed for {} Hz",
            x.sample_rate_hz, filter.sample_rate_hz
        )));
    }
    let t = x.cols();
    let n = filter.len();
    if t == 0 {
        return Ok(x.clone());
    }
    let size = (t + n - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut spectrum: Vec<Complex<f64>> = filter
        .taps
        .iter()
        .map(|&h| Complex::new(h, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fwd.process(&mut spectrum);
    let delay = (n - 1) / 2;
    let scale = 1.0 / size as f64;
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .into_par_iter()
        .map(|r| {
            let mut buf: Vec<Complex<f64>> = x
                .row(r)
                .iter()
                .map(|&v| Complex::new(v as f64, 0.0))
                .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
                .take(size)
                .collect();
            fwd.process(&mut buf);
            buf.iter_mut().zip(&spectrum).for_each(|(b, h)| *b *= h);
            inv.process(&mut buf);
            buf[delay..delay + t].iter().map(|c| (c.re * scale) as f32).collect()
        })
        .collect();
    x.with_data(x.rows(), t, rows.concat())
}
