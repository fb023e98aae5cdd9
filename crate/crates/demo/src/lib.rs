//! Browser bindings for three pieces of the decoder: the EEG band-pass
//! filter, the temperature-scaled stream decision and the synthetic
//! attention effect. Every export also runs natively.

use aad_core::dsp::FirFilter;
use aad_core::model::{argmax, cross_entropy, temperature_softmax};
use aad_core::synthetic::{closed_form_check, generate_session, subject_model, SynthConfig};
use wasm_bindgen::prelude::*;

/// Frequency response of the band-pass filter used on the EEG, in dB at
/// `n_points` frequencies evenly spaced from 0 to Nyquist. The last element
/// is the number of taps.
#[wasm_bindgen]
pub fn filter_response(low_hz: f64, high_hz: f64, fs_hz: f64, n_points: usize) -> Result<Vec<f64>, String> {
    if n_points < 2 {
        return Err("need at least two frequency points".into());
    }
    let filter = FirFilter::bandpass(low_hz, high_hz, fs_hz).map_err(|e| e.to_string())?;
    let nyquist = fs_hz / 2.0;
    let mut out: Vec<f64> = (0..n_points)
        .map(|i| filter.magnitude_db(nyquist * i as f64 / (n_points - 1) as f64).max(-120.0))
        .collect();
    out.push(filter.len() as f64);
    Ok(out)
}

/// Softmax of similarity scores at `temperature`, followed by the index of
/// the chosen stream and the loss if stream 0 were the attended one.
#[wasm_bindgen]
pub fn decide(scores: Vec<f32>, temperature: f32) -> Result<Vec<f32>, String> {
    if scores.len() < 2 {
        return Err("need at least two candidate scores".into());
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(format!("temperature must be positive, got {temperature}"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be finite".into());
    }
    let mut out = temperature_softmax(&scores, temperature);
    out.push(argmax(&scores) as f32);
    out.push(cross_entropy(&scores, temperature, 0));
    Ok(out)
}

/// Simulates one 60 s session and returns how well a least-squares
/// forward model recovers the attended and the unattended stream from the
/// EEG, as `[attended_r, unattended_r, attended_index]`.
#[wasm_bindgen]
pub fn synthetic_coupling(gain: f64, unattended_gain: f64, noise_sd: f64, seed: u64) -> Result<Vec<f64>, String> {
    let cfg = SynthConfig {
        n_subjects: 1,
        sessions_per_subject: 1,
        duration_s: 60.0,
        eeg_channels: 8,
        feature_dim: 4,
        coupling_gain: gain,
        unattended_gain,
        noise_sd,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let subject = cfg.subject_id(0);
    let model = subject_model(&cfg, &subject);
    let rec = generate_session(&cfg, &subject, &cfg.session_id(0), &model).map_err(|e| e.to_string())?;
    let r = closed_form_check(&cfg, &rec).map_err(|e| e.to_string())?;
    Ok(vec![r.attended_r, r.unattended_r, rec.attended as f64 + 1.0])
}
