//! Dataset catalogue, segmentation, sample construction for the attention
//! (AAD) and match-mismatch (M-MM) tasks, and subject-wise folds.

mod manifest;
mod samples;
mod splits;

pub use manifest::{load_recording, Dataset, ManifestEntry, Recording, RecordingManifest};
pub use samples::{
    make_aad_samples, make_mmm_samples, segment, session_seed, window_len, Candidate, Sample, StreamKind, Task,
    Window,
};
pub use splits::{make_fold_splits, rotating_splits, FoldSplit, N_FOLDS, N_SUBJECTS};

/// Names for a 32-channel 10-20 cap, used when a manifest carries none.
pub const DEFAULT_CHANNEL_NAMES: [&str; 32] = [
    "Fp1", "Fz", "F3", "F7", "FT9", "FC5", "FC1", "C3", "T7", "TP9", "CP5", "CP1", "Pz", "P3", "P7", "O1", "Oz",
    "O2", "P4", "P8", "TP10", "CP6", "CP2", "Cz", "C4", "T8", "FT10", "FC6", "FC2", "F4", "F8", "Fp2",
];

/// Channel labels for `n` channels: the manifest's, the default cap, or
/// `ch1..chN`.
pub fn channel_names(manifest_names: &[String], n: usize) -> Vec<String> {
    if manifest_names.len() == n {
        manifest_names.to_vec()
    } else if n == DEFAULT_CHANNEL_NAMES.len() {
        DEFAULT_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=n).map(|i| format!("ch{i}")).collect()
    }
}
