use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use aad_core::attribution::{attribute_samples, baseline_pool, channel_csv, channel_importance, difference_map, AttributionMap};
use aad_core::dataset::{
    channel_names, make_fold_splits, rotating_splits, Dataset, FoldSplit, ManifestEntry, RecordingManifest, StreamKind,
    Task, N_FOLDS, N_SUBJECTS,
};
use aad_core::dsp::{feature_rows, pca_fit, preprocess_eeg, resample, MODEL_RATE_HZ};
use aad_core::model::ModelParams;
use aad_core::synthetic::generate;
use aad_core::training::{cross_validate, make_samples, run_fold, FoldOutcome};
use aad_core::{read_feature_file, write_feature_file};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

type Result<T> = std::result::Result<T, String>;

#[derive(Debug, Clone, Serialize)]
pub struct ErrorEntry {
    pub stage: String,
    pub item: String,
    pub message: String,
}

/// Non-fatal failures collected during a run; written to `errors.json`.
#[derive(Debug, Default)]
pub struct ErrorLog {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorLog {
    pub fn push(&mut self, stage: &str, item: impl Display, message: impl Display) {
        self.entries.push(ErrorEntry {
            stage: stage.into(),
            item: item.to_string(),
            message: message.to_string(),
        });
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(&out.join("errors.json"), &self.entries)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Creates the output directory and echoes the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out()?.to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    write_json(&out.join("run_config.json"), cfg)?;
    Ok(out)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn load_manifest(root: &Path) -> Result<RecordingManifest> {
    RecordingManifest::load(root.join("manifest.json")).map_err(|e| e.to_string())
}

/// Loads every recording; unreadable ones are logged and skipped.
fn load_dataset(cfg: &RunConfig, log: &mut ErrorLog) -> Result<Dataset> {
    let root = cfg.dataset_root()?;
    let manifest = load_manifest(root)?;
    let (dataset, errors) = Dataset::load(root, &manifest);
    for e in errors {
        log.push("load", root.display(), e);
    }
    if dataset.recordings.is_empty() {
        return Err(format!("no readable recordings under {}", root.display()));
    }
    Ok(dataset)
}

/// The standard seven folds for 28 subjects, or the same rotation for any
/// multiple of seven.
fn splits(subjects: &[String], seed: u64) -> Result<Vec<FoldSplit>> {
    let s = if subjects.len() == N_SUBJECTS {
        make_fold_splits(subjects, seed)
    } else {
        rotating_splits(subjects, N_FOLDS, seed)
    };
    s.map_err(|e| e.to_string())
}

fn split_for(subjects: &[String], cfg: &RunConfig) -> Result<FoldSplit> {
    splits(subjects, cfg.seed)?
        .into_iter()
        .nth(cfg.fold)
        .ok_or_else(|| format!("fold {} out of range 0..{N_FOLDS}", cfg.fold))
}

fn check_model_fits(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let (c, f) = (dataset.eeg_channels(), dataset.feature_dim());
    if c != Some(cfg.model.eeg_channels) {
        return Err(format!(
            "dataset has {c:?} EEG channels but model.eeg_channels is {}",
            cfg.model.eeg_channels
        ));
    }
    if f != Some(cfg.model.latent_dim) {
        return Err(format!(
            "dataset has {f:?} speech features but model.latent_dim is {}",
            cfg.model.latent_dim
        ));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn synth(cfg: &RunConfig, _log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let manifest = generate(&cfg.synth, &out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} sessions of {} subjects to {}",
        manifest.entries.len(),
        manifest.subjects().len(),
        out.display()
    );
    Ok(())
}

const PREPROCESS_CACHE: &str = ".cache/preprocess.json";

/// Preprocesses every EEG file. Outputs whose input bytes and pipeline
/// settings are unchanged since the last run are reused.
pub fn preprocess(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let root = absolute(cfg.dataset_root()?)?;
    let manifest = load_manifest(&root)?;
    let cache_path = out.join(PREPROCESS_CACHE);
    let cache: BTreeMap<String, String> = std::fs::read(&cache_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let settings = serde_json::to_vec(&cfg.preprocess).map_err(|e| e.to_string())?;

    struct Done {
        entry: ManifestEntry,
        key: String,
        hash: String,
        reused: bool,
    }
    let results: Vec<std::result::Result<Done, (String, String)>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let tag = format!("{}/{}", entry.subject_id, entry.session_id);
            let fail = |e: &dyn Display| (tag.clone(), e.to_string());
            let src = root.join(&entry.eeg_path);
            let bytes = std::fs::read(&src).map_err(|e| fail(&format!("{}: {e}", src.display())))?;
            let hash = hex(&Sha256::new().chain_update(&settings).chain_update(&bytes).finalize());
            let rel = Path::new("eeg").join(&entry.eeg_path);
            let key = rel.to_string_lossy().into_owned();
            let dst = out.join(&rel);
            let reused = cache.get(&key) == Some(&hash) && dst.exists();
            let duration_s = if reused {
                read_feature_file(&dst).map_err(|e| fail(&e))?.duration_s()
            } else {
                let raw = aad_core::FeatureTensor::from_bytes(&bytes, &src).map_err(|e| fail(&e))?;
                let clean = preprocess_eeg(&raw, &cfg.preprocess).map_err(|e| fail(&e))?;
                write_feature_file(&dst, &clean).map_err(|e| fail(&e))?;
                clean.duration_s()
            };
            Ok(Done {
                entry: ManifestEntry {
                    eeg_path: rel,
                    stream_paths: [root.join(&entry.stream_paths[0]), root.join(&entry.stream_paths[1])],
                    duration_s,
                    ..entry.clone()
                },
                key,
                hash,
                reused,
            })
        })
        .collect();

    let mut entries = Vec::new();
    let mut new_cache = BTreeMap::new();
    let mut reused = 0;
    for r in results {
        match r {
            Ok(d) => {
                reused += d.reused as usize;
                new_cache.insert(d.key, d.hash);
                entries.push(d.entry);
            }
            Err((item, msg)) => log.push("preprocess", item, msg),
        }
    }
    write_json(&cache_path, &new_cache)?;
    let done = entries.len();
    RecordingManifest {
        channel_names: manifest.channel_names.clone(),
        entries,
    }
    .save(out.join("manifest.json"))
    .map_err(|e| e.to_string())?;
    println!("preprocessed {done} recordings ({reused} up to date), {} failed", log.entries.len());
    Ok(())
}

#[derive(Serialize)]
struct PcaSummary<'a> {
    fit_subjects: &'a [String],
    input_dim: usize,
    n_components: usize,
    explained_variance: &'a [f64],
    output_rate_hz: f64,
}

/// Fits PCA on the training subjects' speech features, then projects every
/// stream and resamples it to the model rate.
pub fn pca(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let root = absolute(cfg.dataset_root()?)?;
    let manifest = load_manifest(&root)?;
    let subjects = manifest.subjects();
    let fit_subjects = if cfg.pca.all_subjects {
        subjects.clone()
    } else {
        split_for(&subjects, cfg)?.train_subjects
    };

    let mut streams = Vec::new();
    for entry in &manifest.entries {
        let pair: std::result::Result<Vec<_>, _> =
            entry.stream_paths.iter().map(|p| read_feature_file(root.join(p))).collect();
        match pair {
            Ok(pair) => streams.push((entry, pair)),
            Err(e) => log.push("pca", format!("{}/{}", entry.subject_id, entry.session_id), e),
        }
    }
    let fit: Vec<_> = streams
        .iter()
        .filter(|(e, _)| fit_subjects.contains(&e.subject_id))
        .flat_map(|(_, pair)| pair.iter())
        .collect();
    let d = fit.first().map(|s| s.rows()).ok_or("no readable streams for the fitting subjects")?;
    if let Some(bad) = fit.iter().find(|s| s.rows() != d) {
        return Err(format!("streams have {} and {d} feature rows", bad.rows()));
    }
    let frames: usize = fit.iter().map(|s| s.cols()).sum();
    let mut x = DMatrix::<f64>::zeros(frames, d);
    let mut at = 0;
    for s in &fit {
        x.rows_mut(at, s.cols()).copy_from(&feature_rows(s));
        at += s.cols();
    }
    let model = pca_fit(&x, cfg.pca.n_components).map_err(|e| e.to_string())?;
    model.save(&out.join("pca")).map_err(|e| e.to_string())?;

    let mut entries = Vec::new();
    for (entry, pair) in &streams {
        let tag = format!("{}/{}", entry.subject_id, entry.session_id);
        let mut paths = Vec::new();
        for (k, s) in pair.iter().enumerate() {
            let rel = Path::new("features")
                .join(&entry.subject_id)
                .join(format!("ses-{}_stream{}.ftf", entry.session_id, k + 1));
            let projected = model.transform_features(s).and_then(|p| {
                if (p.sample_rate_hz - MODEL_RATE_HZ).abs() > 1e-9 {
                    resample(&p, MODEL_RATE_HZ)
                } else {
                    Ok(p)
                }
            });
            let written = projected.and_then(|p| write_feature_file(out.join(&rel), &p.with_source("pca")));
            match written {
                Ok(()) => paths.push(rel),
                Err(e) => log.push("pca", &tag, e),
            }
        }
        if let Ok(stream_paths) = <[PathBuf; 2]>::try_from(paths) {
            entries.push(ManifestEntry {
                eeg_path: root.join(&entry.eeg_path),
                stream_paths,
                ..(*entry).clone()
            });
        }
    }
    RecordingManifest {
        channel_names: manifest.channel_names.clone(),
        entries,
    }
    .save(out.join("manifest.json"))
    .map_err(|e| e.to_string())?;
    write_json(
        &out.join("pca").join("fit.json"),
        &PcaSummary {
            fit_subjects: &fit_subjects,
            input_dim: d,
            n_components: model.n_components(),
            explained_variance: &model.explained_variance,
            output_rate_hz: MODEL_RATE_HZ,
        },
    )?;
    println!(
        "pca: {d} -> {} components fitted on {} subjects",
        model.n_components(),
        fit_subjects.len()
    );
    Ok(())
}

fn save_outcome(dir: &Path, outcome: &FoldOutcome, cfg: &RunConfig, task: Task) -> Result<()> {
    outcome.model.save(&dir.join("model")).map_err(|e| e.to_string())?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    let acc = outcome.report.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
    write_text(
        &dir.join("summary.csv"),
        &format!("fold,window_s,task,accuracy\n{},{},{},{acc}\n", outcome.fold_index, cfg.window_s, task),
    )
}

fn train_task(cfg: &RunConfig, log: &mut ErrorLog, task: Task, dir: &Path) -> Result<()> {
    let dataset = load_dataset(cfg, log)?;
    check_model_fits(cfg, &dataset)?;
    let split = split_for(&dataset.subjects(), cfg)?;
    let outcome =
        run_fold(&dataset, &split, cfg.window_s, task, &cfg.model, &cfg.train).map_err(|e| e.to_string())?;
    save_outcome(dir, &outcome, cfg, task)?;
    let r = &outcome.report;
    println!(
        "{task} fold {} window {} s: test accuracy {:.4} (best epoch {} of {}, {:?})",
        split.fold_index,
        cfg.window_s,
        r.test_accuracy.unwrap_or(f64::NAN),
        r.best_epoch,
        r.epochs.len(),
        r.stop_reason
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    train_task(cfg, log, cfg.task()?, &out)
}

pub fn mmm(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let kind = match cfg.stream.as_str() {
        "attended" => StreamKind::Attended,
        _ => StreamKind::Unattended,
    };
    let task = Task::MatchMismatch(kind);
    train_task(cfg, log, task, &out.join(task.name()))
}

pub fn crossval(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let task = cfg.task()?;
    let dataset = load_dataset(cfg, log)?;
    check_model_fits(cfg, &dataset)?;
    let all = splits(&dataset.subjects(), cfg.seed)?;
    if let Some(bad) = cfg.folds.iter().find(|&&k| k >= all.len()) {
        return Err(format!("fold {bad} out of range 0..{}", all.len()));
    }
    let chosen: Vec<FoldSplit> = all
        .into_iter()
        .filter(|s| cfg.folds.is_empty() || cfg.folds.contains(&s.fold_index))
        .collect();
    let save = |o: &FoldOutcome| {
        save_outcome(&out.join(format!("fold_{}", o.fold_index)), o, cfg, task)
            .map_err(aad_core::Error::InvalidArgument)
    };
    let report = cross_validate(&dataset, &chosen, cfg.window_s, task, &cfg.model, &cfg.train, &save);
    for f in &report.folds {
        if let Some(e) = &f.error {
            log.push("crossval", format!("fold {}", f.fold_index), e);
        }
    }
    write_json(&out.join("crossval.json"), &report)?;
    write_text(&out.join("crossval.csv"), &report.to_csv())?;
    println!(
        "{task} window {} s: accuracy {:.2} ± {:.2} % over {} folds",
        cfg.window_s,
        100.0 * report.mean_accuracy,
        100.0 * report.sd_accuracy,
        report.accuracies().len()
    );
    Ok(())
}

fn attribution_map(cfg: &RunConfig, dataset: &Dataset, model_dir: &Path, task: Task) -> Result<AttributionMap> {
    let model = ModelParams::load(model_dir).map_err(|e| e.to_string())?;
    if model.config.eeg_channels != dataset.eeg_channels().unwrap_or(0) {
        return Err(format!(
            "{}: model expects {} EEG channels",
            model_dir.display(),
            model.config.eeg_channels
        ));
    }
    let split = split_for(&dataset.subjects(), cfg)?;
    let test = make_samples(dataset, &split.test_subjects, cfg.window_s, task, cfg.seed).map_err(|e| e.to_string())?;
    let train = make_samples(dataset, &split.train_subjects, cfg.window_s, task, cfg.seed).map_err(|e| e.to_string())?;
    let baselines: Vec<_> = baseline_pool(&train, cfg.attribution.baseline_pool, cfg.seed)
        .iter()
        .map(|b| model.prepare_eeg(b))
        .collect();
    let attrs = attribute_samples(&model, &test, &baselines, &cfg.attribution).map_err(|e| e.to_string())?;
    let names = channel_names(&dataset.channel_names, model.config.eeg_channels);
    channel_importance(&attrs, &names, task.name()).map_err(|e| e.to_string())
}

fn write_map(out: &Path, map: &AttributionMap) -> Result<()> {
    let stem = format!("attribution_{}", map.task);
    write_text(&out.join(format!("{stem}.csv")), &map.to_csv())?;
    write_json(&out.join(format!("{stem}.json")), map)?;
    map.write_feature_file(&out.join(format!("{stem}.ftf")), MODEL_RATE_HZ)
        .map_err(|e| e.to_string())
}

pub fn attribute(cfg: &RunConfig, log: &mut ErrorLog) -> Result<()> {
    let out = prepare_out(cfg)?;
    let model_dir = cfg.model_dir.as_deref().ok_or("--model is required")?;
    let task = cfg.task()?;
    let dataset = load_dataset(cfg, log)?;
    let map = attribution_map(cfg, &dataset, model_dir, task)?;
    write_map(&out, &map)?;
    println!("{task}: per-channel importance written for {} channels", map.per_channel.len());
    if let Some(other_dir) = &cfg.compare_model_dir {
        let other_task = cfg
            .compare_task
            .as_deref()
            .ok_or("--compare-task is required with --compare-model")?;
        let other_task = Task::parse(other_task).ok_or_else(|| format!("unknown task {other_task}"))?;
        let other = attribution_map(cfg, &dataset, other_dir, other_task)?;
        write_map(&out, &other)?;
        let diff = difference_map(&map, &other).map_err(|e| e.to_string())?;
        write_text(
            &out.join(format!("difference_{}_minus_{}.csv", task, other_task)),
            &channel_csv(&map.channel_names, &diff),
        )?;
        println!("difference map {task} - {other_task} written");
    }
    Ok(())
}
