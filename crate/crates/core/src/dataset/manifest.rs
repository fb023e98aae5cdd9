use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{read_feature_file, FeatureTensor};

/// One listening session: an EEG recording, the two concurrently presented
/// speech streams and which of them the listener attended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub session_id: String,
    pub eeg_path: PathBuf,
    pub stream_paths: [PathBuf; 2],
    /// 1 or 2.
    pub attended_index: u8,
    pub duration_s: f64,
}

/// Dataset catalogue. Paths are relative to a dataset root directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingManifest {
    #[serde(default)]
    pub channel_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl RecordingManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_slice(&text)?;
        manifest.check_labels()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn check_labels(&self) -> Result<()> {
        for e in &self.entries {
            if !matches!(e.attended_index, 1 | 2) {
                return Err(Error::Dataset(format!(
                    "{}/{}: attended_index must be 1 or 2, got {}",
                    e.subject_id, e.session_id, e.attended_index
                )));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated subject ids.
    pub fn subjects(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks that every referenced file exists and parses. Returns one error
    /// per failing entry.
    pub fn validate(&self, root: &Path) -> Vec<Error> {
        let mut errors = Vec::new();
        if let Err(e) = self.check_labels() {
            errors.push(e);
        }
        for entry in &self.entries {
            if let Err(e) = load_recording(root, entry) {
                errors.push(e);
            }
        }
        errors
    }
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: String,
    pub session_id: String,
    /// `channels x samples`.
    pub eeg: FeatureTensor,
    /// Each `features x samples`.
    pub streams: [FeatureTensor; 2],
    /// Index into `streams` of the attended stream.
    pub attended: usize,
}

impl Recording {
    /// Samples shared by the EEG and both streams.
    pub fn common_len(&self) -> usize {
        self.eeg
            .cols()
            .min(self.streams[0].cols())
            .min(self.streams[1].cols())
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.eeg.sample_rate_hz
    }
}

pub fn load_recording(root: &Path, entry: &ManifestEntry) -> Result<Recording> {
    let eeg = read_feature_file(root.join(&entry.eeg_path))?;
    let s0 = read_feature_file(root.join(&entry.stream_paths[0]))?;
    let s1 = read_feature_file(root.join(&entry.stream_paths[1]))?;
    let tag = format!("{}/{}", entry.subject_id, entry.session_id);
    for s in [&s0, &s1] {
        if (s.sample_rate_hz - eeg.sample_rate_hz).abs() > 1e-6 {
            return Err(Error::Dataset(format!(
                "{tag}: stream at {} Hz but EEG at {} Hz",
                s.sample_rate_hz, eeg.sample_rate_hz
            )));
        }
    }
    if s0.rows() != s1.rows() {
        return Err(Error::Dataset(format!(
            "{tag}: streams have {} and {} features",
            s0.rows(),
            s1.rows()
        )));
    }
    if !matches!(entry.attended_index, 1 | 2) {
        return Err(Error::Dataset(format!("{tag}: attended_index {}", entry.attended_index)));
    }
    Ok(Recording {
        subject_id: entry.subject_id.clone(),
        session_id: entry.session_id.clone(),
        eeg,
        streams: [s0, s1],
        attended: entry.attended_index as usize - 1,
    })
}

/// Recordings held in memory, shared read-only between samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub channel_names: Vec<String>,
    pub recordings: Vec<Arc<Recording>>,
}

impl Dataset {
    pub fn new(channel_names: Vec<String>, recordings: Vec<Recording>) -> Self {
        Self {
            channel_names,
            recordings: recordings.into_iter().map(Arc::new).collect(),
        }
    }

    /// Loads every entry of `manifest`. Entries that fail are reported in the
    /// returned error list and left out.
    pub fn load(root: &Path, manifest: &RecordingManifest) -> (Self, Vec<Error>) {
        let mut recordings = Vec::new();
        let mut errors = Vec::new();
        for entry in &manifest.entries {
            match load_recording(root, entry) {
                Ok(r) => recordings.push(Arc::new(r)),
                Err(e) => errors.push(e),
            }
        }
        (
            Self {
                channel_names: manifest.channel_names.clone(),
                recordings,
            },
            errors,
        )
    }

    pub fn subjects(&self) -> Vec<String> {
        self.recordings
            .iter()
            .map(|r| r.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Recordings of the listed subjects, in dataset order.
    pub fn for_subjects<'a>(&'a self, subjects: &'a [String]) -> impl Iterator<Item = &'a Arc<Recording>> + 'a {
        self.recordings
            .iter()
            .filter(move |r| subjects.iter().any(|s| s == &r.subject_id))
    }

    pub fn eeg_channels(&self) -> Option<usize> {
        self.recordings.first().map(|r| r.eeg.rows())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.recordings.first().map(|r| r.streams[0].rows())
    }
}
