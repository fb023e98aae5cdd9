//! EEG preprocessing and speech-feature post-processing.
//!
//! The EEG chain runs in a fixed order: volts to microvolts, 0.5-32 Hz FIR
//! bandpass, common average reference, resampling to 64 Hz.

mod fir;
mod pca;
mod resample;

pub use fir::{apply_filter, default_transitions, design_bandpass, hamming_length, FirFilter};
pub use pca::{feature_rows, pca_fit, PcaModel};
pub use resample::{resample, resample_signal, resampled_len};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;

/// Rate every model input is brought to.
pub const MODEL_RATE_HZ: f64 = 64.0;

pub fn volts_to_microvolts(x: &FeatureTensor) -> FeatureTensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * 1e6) as f32);
    out.unit = "uV".into();
    out
}

/// Subtracts the instantaneous mean over channels from every channel.
pub fn common_average_reference(x: &FeatureTensor) -> Result<FeatureTensor> {
    let (c, t) = (x.rows(), x.cols());
    if c < 2 {
        return Err(Error::invalid(format!(
            "common average reference needs at least 2 channels, got {c}"
        )));
    }
    let mut mean = vec![0.0f64; t];
    for r in 0..c {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut out = x.clone();
    for r in 0..c {
        for (v, m) in out.row_mut(r).iter_mut().zip(&mean) {
            *v = (*v as f64 - m) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EegPipelineConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    /// `None` picks [`default_transitions`].
    pub transition_low_hz: Option<f64>,
    pub transition_high_hz: Option<f64>,
    pub output_rate_hz: f64,
    /// Input is in volts and is scaled to microvolts first.
    pub input_in_volts: bool,
}

impl Default for EegPipelineConfig {
    fn default() -> Self {
        Self {
            low_hz: 0.5,
            high_hz: 32.0,
            transition_low_hz: None,
            transition_high_hz: None,
            output_rate_hz: MODEL_RATE_HZ,
            input_in_volts: true,
        }
    }
}

impl EegPipelineConfig {
    pub fn filter_for(&self, fs_hz: f64) -> Result<FirFilter> {
        let (tl, th) = default_transitions(self.low_hz, self.high_hz, fs_hz);
        design_bandpass(
            self.low_hz,
            self.high_hz,
            fs_hz,
            self.transition_low_hz.unwrap_or(tl),
            self.transition_high_hz.unwrap_or(th),
        )
    }
}

/// Full EEG preprocessing for one recording (`channels x samples`).
pub fn preprocess_eeg(raw: &FeatureTensor, cfg: &EegPipelineConfig) -> Result<FeatureTensor> {
    let x = if cfg.input_in_volts {
        volts_to_microvolts(raw)
    } else {
        raw.clone()
    };
    let filter = cfg.filter_for(x.sample_rate_hz)?;
    let x = apply_filter(&x, &filter)?;
    let x = common_average_reference(&x)?;
    let mut x = resample(&x, cfg.output_rate_hz)?;
    x.extra.insert(
        "preprocessing".into(),
        serde_json::json!({
            "band_hz": [cfg.low_hz, cfg.high_hz],
            "taps": filter.len(),
            "reference": "average",
        }),
    );
    Ok(x)
}
