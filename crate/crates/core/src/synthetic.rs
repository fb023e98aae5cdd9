//! Synthetic EEG and speech-feature sessions with a known attention coupling.
//!
//! Per session two independent smooth feature streams are drawn. Per subject a
//! mixing matrix `M` and a temporal response kernel `h` are fixed. The EEG is
//! `g M (h * S_att) + u M (h * S_unatt) + noise`.
//!
//! Each `M` blends a mixing matrix common to the whole dataset with an
//! individual one, so a decoder trained on some subjects can transfer to
//! others.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{session_seed, Dataset, ManifestEntry, Recording, RecordingManifest};
use crate::dsp::MODEL_RATE_HZ;
use crate::error::{Error, Result};
use crate::feature::{write_feature_file, FeatureTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub sessions_per_subject: usize,
    pub duration_s: f64,
    pub eeg_channels: usize,
    pub feature_dim: usize,
    /// Gain of the attended stream, `g`.
    pub coupling_gain: f64,
    /// Gain of the unattended stream, `u`.
    pub unattended_gain: f64,
    pub noise_sd: f64,
    /// Length of `h` in samples.
    pub response_kernel_len: usize,
    /// Weight in `[0, 1]` of the individual part of each subject's mixing
    /// matrix; 0 gives every subject the same matrix.
    pub subject_variability: f64,
    /// Standard deviation, in samples, of the Gaussian smoother applied to
    /// the white noise that makes up each feature stream.
    pub smoothing_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 28,
            sessions_per_subject: 10,
            duration_s: 64.0,
            eeg_channels: 32,
            feature_dim: 64,
            coupling_gain: 1.0,
            unattended_gain: 0.0,
            noise_sd: 1.0,
            response_kernel_len: 8,
            subject_variability: 0.3,
            smoothing_sd: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coupling_gain < 0.0 || self.unattended_gain < 0.0 || self.noise_sd < 0.0 {
            return Err(Error::invalid("gains and noise_sd must be non-negative"));
        }
        if self.n_subjects == 0 || self.sessions_per_subject == 0 || self.eeg_channels == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("synthetic dataset dimensions must be positive"));
        }
        if self.response_kernel_len == 0 || (self.n_samples() as f64) < self.response_kernel_len as f64 {
            return Err(Error::invalid(format!(
                "duration {} s is shorter than the {}-sample response kernel",
                self.duration_s, self.response_kernel_len
            )));
        }
        if !(0.0..=1.0).contains(&self.subject_variability) {
            return Err(Error::invalid("subject_variability must lie in [0, 1]"));
        }
        if !(self.smoothing_sd >= 0.0) {
            return Err(Error::invalid("smoothing_sd must be non-negative"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * MODEL_RATE_HZ).round() as usize
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("S{:02}", i + 1)
    }

    pub fn session_id(&self, j: usize) -> String {
        format!("{:02}", j + 1)
    }
}

/// Fixed per-subject forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectModel {
    /// `eeg_channels x feature_dim`.
    pub mixing: DMatrix<f64>,
    /// Causal response kernel, unit norm.
    pub kernel: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn subject_model(cfg: &SynthConfig, subject: &str) -> SubjectModel {
    let mut shared = ChaCha8Rng::seed_from_u64(session_seed(cfg.seed, "", "", "synth-shared"));
    let common = gaussian_matrix(&mut shared, cfg.eeg_channels, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed(cfg.seed, subject, "", "synth-subject"));
    let own = gaussian_matrix(&mut rng, cfg.eeg_channels, cfg.feature_dim);
    let v = cfg.subject_variability;
    let mixing = common * (1.0 - v * v).sqrt() + own * v;
    let decay = cfg.response_kernel_len as f64 / 3.0;
    let mut kernel: Vec<f64> = (0..cfg.response_kernel_len)
        .map(|k| (1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)) * (-(k as f64) / decay).exp())
        .collect();
    let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
    kernel.iter_mut().for_each(|v| *v /= norm);
    SubjectModel { mixing, kernel }
}

/// Causal convolution of every row of `x` (`rows x t`, row-major) with `h`.
pub fn convolve_rows(x: &[f64], rows: usize, h: &[f64]) -> Vec<f64> {
    let t = x.len() / rows;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let (src, dst) = (&x[r * t..(r + 1) * t], &mut out[r * t..(r + 1) * t]);
        for (i, o) in dst.iter_mut().enumerate() {
            *o = h.iter().take(i + 1).enumerate().map(|(k, hk)| hk * src[i - k]).sum();
        }
    }
    out
}

fn gaussian_smoother(sd: f64) -> Vec<f64> {
    if sd == 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * sd).ceil() as i64;
    let k: Vec<f64> = (-half..=half).map(|i| (-0.5 * (i as f64 / sd).powi(2)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Smoothed white noise, each row scaled to unit variance.
fn smooth_stream(rng: &mut ChaCha8Rng, rows: usize, t: usize, sd: f64) -> Vec<f64> {
    let k = gaussian_smoother(sd);
    let half = k.len() / 2;
    let mut out = Vec::with_capacity(rows * t);
    for _ in 0..rows {
        let white: Vec<f64> = (0..t + 2 * half).map(|_| rng.sample(StandardNormal)).collect();
        let row: Vec<f64> = (0..t)
            .map(|i| k.iter().enumerate().map(|(j, kj)| kj * white[i + j]).sum())
            .collect();
        let mean = row.iter().sum::<f64>() / t as f64;
        let sdv = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt().max(1e-12);
        out.extend(row.into_iter().map(|v| (v - mean) / sdv));
    }
    out
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// One generated session.
pub fn generate_session(cfg: &SynthConfig, subject: &str, session: &str, model: &SubjectModel) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed(cfg.seed, subject, session, "synth-session"));
    let (c, f, t) = (cfg.eeg_channels, cfg.feature_dim, cfg.n_samples());
    let attended = usize::from(rng.random::<bool>());
    let streams = [
        smooth_stream(&mut rng, f, t, cfg.smoothing_sd),
        smooth_stream(&mut rng, f, t, cfg.smoothing_sd),
    ];
    let att = convolve_rows(&streams[attended], f, &model.kernel);
    let unatt = convolve_rows(&streams[1 - attended], f, &model.kernel);
    let drive = DMatrix::from_fn(f, t, |r, s| {
        cfg.coupling_gain * att[r * t + s] + cfg.unattended_gain * unatt[r * t + s]
    });
    let mixed = &model.mixing * drive;
    let eeg: Vec<f64> = (0..c * t)
        .map(|i| mixed[(i / t, i % t)] + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let tag = |what: &str| format!("synthetic:{subject}/{session}:{what}");
    let eeg = FeatureTensor::new(c, t, to_f32(&eeg), MODEL_RATE_HZ)?
        .with_unit("uV")
        .with_source(tag("eeg"));
    let [s0, s1] = streams;
    let s0 = FeatureTensor::new(f, t, to_f32(&s0), MODEL_RATE_HZ)?.with_unit("").with_source(tag("stream1"));
    let s1 = FeatureTensor::new(f, t, to_f32(&s1), MODEL_RATE_HZ)?.with_unit("").with_source(tag("stream2"));
    Ok(Recording {
        subject_id: subject.to_string(),
        session_id: session.to_string(),
        eeg,
        streams: [s0, s1],
        attended,
    })
}

fn channel_names(n: usize) -> Vec<String> {
    crate::dataset::channel_names(&[], n)
}

/// Whole dataset in memory. Sessions are generated in parallel and are
/// independent of scheduling.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let keys: Vec<(usize, usize)> = (0..cfg.n_subjects)
        .flat_map(|i| (0..cfg.sessions_per_subject).map(move |j| (i, j)))
        .collect();
    let models: Vec<SubjectModel> = (0..cfg.n_subjects)
        .map(|i| subject_model(cfg, &cfg.subject_id(i)))
        .collect();
    let recordings = keys
        .par_iter()
        .map(|&(i, j)| generate_session(cfg, &cfg.subject_id(i), &cfg.session_id(j), &models[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(channel_names(cfg.eeg_channels), recordings))
}

fn entry_paths(subject: &str, session: &str) -> (PathBuf, [PathBuf; 2]) {
    let dir = PathBuf::from(subject);
    (
        dir.join(format!("ses-{session}_eeg.ftf")),
        [
            dir.join(format!("ses-{session}_stream1.ftf")),
            dir.join(format!("ses-{session}_stream2.ftf")),
        ],
    )
}

/// Writes every session and `manifest.json` under `root`.
pub fn generate(cfg: &SynthConfig, root: &Path) -> Result<RecordingManifest> {
    let dataset = generate_dataset(cfg)?;
    let mut entries = Vec::with_capacity(dataset.recordings.len());
    for rec in &dataset.recordings {
        let (eeg_path, stream_paths) = entry_paths(&rec.subject_id, &rec.session_id);
        write_feature_file(root.join(&eeg_path), &rec.eeg)?;
        for (p, s) in stream_paths.iter().zip(&rec.streams) {
            write_feature_file(root.join(p), s)?;
        }
        entries.push(ManifestEntry {
            subject_id: rec.subject_id.clone(),
            session_id: rec.session_id.clone(),
            eeg_path,
            stream_paths,
            attended_index: rec.attended as u8 + 1,
            duration_s: rec.common_len() as f64 / MODEL_RATE_HZ,
        });
    }
    let manifest = RecordingManifest {
        channel_names: dataset.channel_names.clone(),
        entries,
    };
    manifest.save(root.join("manifest.json"))?;
    let cfg_path = root.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingCorrelation {
    pub attended_r: f64,
    pub unattended_r: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

/// Correlates `pinv(M) EEG` with `h * S_att` and `h * S_unatt`, pooled over
/// every feature row.
pub fn closed_form_check(cfg: &SynthConfig, rec: &Recording) -> Result<CouplingCorrelation> {
    let model = subject_model(cfg, &rec.subject_id);
    let pinv = model
        .mixing
        .clone()
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))?;
    let (c, t) = (rec.eeg.rows(), rec.common_len());
    if c != cfg.eeg_channels {
        return Err(Error::invalid(format!("recording has {c} channels, config {}", cfg.eeg_channels)));
    }
    let eeg = DMatrix::from_fn(c, t, |r, s| rec.eeg.at(r, s) as f64);
    let projected = pinv * eeg;
    let flat: Vec<f64> = (0..projected.nrows())
        .flat_map(|r| (0..t).map(move |s| (r, s)))
        .map(|(r, s)| projected[(r, s)])
        .collect();
    let f = cfg.feature_dim;
    let stream = |i: usize| -> Vec<f64> {
        let s = &rec.streams[i];
        let x: Vec<f64> = (0..f).flat_map(|r| s.row(r)[..t].iter().map(|&v| v as f64)).collect();
        convolve_rows(&x, f, &model.kernel)
    };
    Ok(CouplingCorrelation {
        attended_r: pearson(&flat, &stream(rec.attended)),
        unattended_r: pearson(&flat, &stream(1 - rec.attended)),
    })
}
