use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, Recording};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which stream a match-mismatch model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Attended,
    Unattended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Which of two streams is attended.
    Aad,
    /// Which of two segments of one stream is aligned with the EEG.
    MatchMismatch(StreamKind),
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Aad => "aad",
            Task::MatchMismatch(StreamKind::Attended) => "mmm-att",
            Task::MatchMismatch(StreamKind::Unattended) => "mmm-unatt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aad" => Some(Task::Aad),
            "mmm-att" => Some(Task::MatchMismatch(StreamKind::Attended)),
            "mmm-unatt" => Some(Task::MatchMismatch(StreamKind::Unattended)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fixed-length span of a recording, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

/// Non-overlapping consecutive windows from the start of the recording; a
/// trailing remainder shorter than a window is dropped.
pub fn segment(rec: &Recording, window_s: f64) -> Result<Vec<Window>> {
    let len = window_len(window_s, rec.sample_rate_hz())?;
    let total = rec.common_len();
    if len > total {
        return Err(Error::Dataset(format!(
            "{}/{}: {window_s} s window is longer than the {:.2} s recording",
            rec.subject_id,
            rec.session_id,
            total as f64 / rec.sample_rate_hz()
        )));
    }
    Ok((0..total / len).map(|i| Window { start: i * len, len }).collect())
}

pub fn window_len(window_s: f64, fs: f64) -> Result<usize> {
    let len = (window_s * fs).round() as usize;
    if !(window_s > 0.0) || len == 0 {
        return Err(Error::invalid(format!("window length {window_s} s is not positive")));
    }
    Ok(len)
}

/// A span of one speech stream offered to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub stream: usize,
    pub start: usize,
}

/// One classification instance: an EEG window, two candidate speech
/// windows and the index of the correct candidate.
///
/// Samples reference their recording rather than copying it; the tensors
/// are cut on demand.
#[derive(Debug, Clone)]
pub struct Sample {
    pub recording: Arc<Recording>,
    pub eeg_window: Window,
    pub candidates: [Candidate; 2],
    /// Index into `candidates` of the correct one (0 = first).
    pub target: usize,
    pub task: Task,
}

impl Sample {
    pub fn eeg(&self) -> Tensor {
        self.recording
            .eeg
            .window(self.eeg_window.start, self.eeg_window.len)
            .expect("sample window inside recording")
    }

    pub fn candidate(&self, i: usize) -> Tensor {
        let c = self.candidates[i];
        self.recording.streams[c.stream]
            .window(c.start, self.eeg_window.len)
            .expect("sample window inside recording")
    }

    pub fn candidates(&self) -> [Tensor; 2] {
        [self.candidate(0), self.candidate(1)]
    }

    /// 1-based label as used in reports.
    pub fn label(&self) -> usize {
        self.target + 1
    }

    pub fn t_start_s(&self) -> f64 {
        self.eeg_window.start as f64 / self.recording.sample_rate_hz()
    }

    pub fn subject(&self) -> &str {
        &self.recording.subject_id
    }

    pub fn session(&self) -> &str {
        &self.recording.session_id
    }
}

/// Seed of the RNG stream owned by one session.
pub fn session_seed(seed: u64, subject: &str, session: &str, salt: &str) -> u64 {
    // FNV-1a over the identifying strings, then mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in salt.bytes().chain([0]).chain(subject.bytes()).chain([0]).chain(session.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One AAD sample per window of every recording of `subjects`. The order of
/// the two streams is randomized per sample.
pub fn make_aad_samples(dataset: &Dataset, subjects: &[String], window_s: f64, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in dataset.for_subjects(subjects) {
        let mut rng = ChaCha8Rng::seed_from_u64(session_seed(seed, &rec.subject_id, &rec.session_id, "aad"));
        let att = rec.attended;
        for w in segment(rec, window_s)? {
            let swap: bool = rng.random();
            let attended = Candidate { stream: att, start: w.start };
            let other = Candidate { stream: 1 - att, start: w.start };
            let (candidates, target) = if swap {
                ([other, attended], 1)
            } else {
                ([attended, other], 0)
            };
            out.push(Sample {
                recording: Arc::clone(rec),
                eeg_window: w,
                candidates,
                target,
                task: Task::Aad,
            });
        }
    }
    Ok(out)
}

/// Match-mismatch samples: the chosen stream at the EEG window's time versus
/// the same stream at a non-overlapping time `t'` drawn uniformly from every
/// valid start position in the same session.
pub fn make_mmm_samples(
    dataset: &Dataset,
    subjects: &[String],
    window_s: f64,
    kind: StreamKind,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in dataset.for_subjects(subjects) {
        let salt = match kind {
            StreamKind::Attended => "mmm-att",
            StreamKind::Unattended => "mmm-unatt",
        };
        let mut rng = ChaCha8Rng::seed_from_u64(session_seed(seed, &rec.subject_id, &rec.session_id, salt));
        let stream = match kind {
            StreamKind::Attended => rec.attended,
            StreamKind::Unattended => 1 - rec.attended,
        };
        let total = rec.common_len();
        for w in segment(rec, window_s)? {
            let Some(mismatch) = mismatch_start(&mut rng, w, total) else {
                log::warn!(
                    "{}/{}: no disjoint mismatch window for t = {} samples, skipped",
                    rec.subject_id,
                    rec.session_id,
                    w.start
                );
                continue;
            };
            let matched = Candidate { stream, start: w.start };
            let other = Candidate { stream, start: mismatch };
            let swap: bool = rng.random();
            let (candidates, target) = if swap {
                ([other, matched], 1)
            } else {
                ([matched, other], 0)
            };
            out.push(Sample {
                recording: Arc::clone(rec),
                eeg_window: w,
                candidates,
                target,
                task: Task::MatchMismatch(kind),
            });
        }
    }
    Ok(out)
}

/// Uniform draw from the starts `s` with `s + len <= total` and
/// `|s - w.start| >= len`.
pub(crate) fn mismatch_start(rng: &mut impl Rng, w: Window, total: usize) -> Option<usize> {
    let last = total.checked_sub(w.len)?;
    // valid starts: [0, w.start - len] and [w.start + len, last]
    let left = if w.start >= w.len { w.start - w.len + 1 } else { 0 };
    let right_lo = w.start + w.len;
    let right = if right_lo <= last { last - right_lo + 1 } else { 0 };
    let n = left + right;
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    Some(if k < left { k } else { right_lo + (k - left) })
}
