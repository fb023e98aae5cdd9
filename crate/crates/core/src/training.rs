//! Adam optimisation with early stopping, evaluation and subject-wise
//! cross-validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_aad_samples, make_mmm_samples, session_seed, Dataset, FoldSplit, Sample, Task};
use crate::error::{Error, Result};
use crate::model::{argmax, cross_entropy, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.early_stop_patience > 0
            && self.epsilon > 0.0;
        if !positive {
            return Err(Error::invalid("training hyperparameters must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u32,
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = cfg.learning_rate as f64;
    let eps = cfg.epsilon as f64;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Stops once validation loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records `val_loss` for `epoch` and returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub test_accuracy: Option<f64>,
    pub wall_clock_s: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub model_fingerprint: String,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Loss and parameter gradients of one sample.
fn sample_grads(model: &ModelParams, s: &Sample) -> Result<(f32, Vec<Tensor>)> {
    model.loss_and_grads(&s.eeg(), &s.candidates(), s.target)
}

/// Mean loss and mean gradient over `batch`. Per-sample work runs in
/// parallel; the reduction is sequential so results do not depend on
/// scheduling.
pub fn batch_gradients(model: &ModelParams, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<(f32, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sample_grads(model, s))
        .collect::<Result<_>>()?;
    let n = per.len() as f32;
    let mut iter = per.into_iter();
    let (first_loss, mut total) = iter.next().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut loss = first_loss as f64;
    for (l, g) in iter {
        loss += l as f64;
        for (acc, gi) in total.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n as f64, total))
}

/// Mean cross-entropy and accuracy over `samples`.
pub fn loss_and_accuracy(model: &ModelParams, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let scores = model.scores(&s.eeg(), &s.candidates())?;
            let loss = cross_entropy(&scores, model.config.temperature, s.target) as f64;
            Ok((loss, argmax(&scores) == s.target))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let correct = per.iter().filter(|p| p.1).count() as f64;
    Ok((loss, correct / n))
}

/// Fraction of samples whose predicted candidate is the correct one.
pub fn evaluate(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let correct: usize = samples
        .par_iter()
        .map(|s| {
            let scores = model.scores(&s.eeg(), &s.candidates())?;
            Ok(usize::from(argmax(&scores) == s.target))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / samples.len() as f64)
}

/// Minibatch Adam with a seeded shuffle per epoch. Returns the parameters of
/// the epoch with the lowest validation loss.
pub fn train(
    model: ModelParams,
    train_samples: &[Sample],
    val_samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    let start = Instant::now();
    let mut model = model;
    let mut best = model.clone();
    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let (loss, grads) = match batch_gradients(&model, &batch) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam_step(&mut model.tree.leaves_mut(), &grads, &mut state, cfg)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let (val_loss, val_accuracy) = match loss_and_accuracy(&model, val_samples) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
            other => other?,
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let train_loss = loss_sum / n_batches as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}, val acc {val_accuracy:.3}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let report = TrainReport {
        epochs,
        best_epoch: stopper.best_epoch.expect("at least one epoch ran"),
        stop_reason,
        test_accuracy: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
        n_train: train_samples.len(),
        n_val: val_samples.len(),
        model_fingerprint: best.fingerprint(),
    };
    Ok((best, report))
}

/// Samples of `task` for the given subjects.
pub fn make_samples(dataset: &Dataset, subjects: &[String], window_s: f64, task: Task, seed: u64) -> Result<Vec<Sample>> {
    match task {
        Task::Aad => make_aad_samples(dataset, subjects, window_s, seed),
        Task::MatchMismatch(kind) => make_mmm_samples(dataset, subjects, window_s, kind, seed),
    }
}

/// Trained model and report of one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold_index: usize,
    pub model: ModelParams,
    pub report: TrainReport,
}

/// Trains on the fold's train subjects, selects by its validation subjects
/// and scores its test subjects.
pub fn run_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    window_s: f64,
    task: Task,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let train_s = make_samples(dataset, &split.train_subjects, window_s, task, cfg.seed)?;
    let val_s = make_samples(dataset, &split.val_subjects, window_s, task, cfg.seed)?;
    let test_s = make_samples(dataset, &split.test_subjects, window_s, task, cfg.seed)?;
    if test_s.is_empty() {
        return Err(Error::Dataset(format!("fold {}: no test samples", split.fold_index)));
    }
    let init_seed = session_seed(cfg.seed, task.name(), &split.fold_index.to_string(), "init");
    let model = ModelParams::init(model_cfg.clone(), init_seed)?;
    let fold_cfg = TrainConfig {
        seed: session_seed(cfg.seed, task.name(), &split.fold_index.to_string(), "shuffle"),
        ..cfg.clone()
    };
    let (model, mut report) = train(model, &train_s, &val_s, &fold_cfg)?;
    report.test_accuracy = Some(evaluate(&model, &test_s)?);
    Ok(FoldOutcome {
        fold_index: split.fold_index,
        model,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub accuracy: Option<f64>,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub task: String,
    pub window_s: f64,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over folds (`n - 1` denominator).
    pub sd_accuracy: f64,
}

impl CrossValReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.accuracy).collect()
    }

    pub fn failed(&self) -> bool {
        self.folds.iter().any(|f| f.error.is_some())
    }

    /// `fold,window_s,task,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,window_s,task,accuracy\n");
        for f in &self.folds {
            let acc = f.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", f.fold_index, self.window_s, self.task, acc));
        }
        out
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every fold in parallel. A failing fold is recorded and the rest
/// continue. `on_fold` receives each successful outcome, e.g. to write its
/// checkpoint.
pub fn cross_validate(
    dataset: &Dataset,
    splits: &[FoldSplit],
    window_s: f64,
    task: Task,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_fold: &(dyn Fn(&FoldOutcome) -> Result<()> + Sync),
) -> CrossValReport {
    let folds: Vec<FoldResult> = splits
        .par_iter()
        .map(|split| {
            let outcome = run_fold(dataset, split, window_s, task, model_cfg, cfg).and_then(|o| {
                on_fold(&o)?;
                Ok(o)
            });
            match outcome {
                Ok(o) => FoldResult {
                    fold_index: split.fold_index,
                    accuracy: o.report.test_accuracy,
                    report: Some(o.report),
                    error: None,
                },
                Err(e) => {
                    log::error!("fold {}: {e}", split.fold_index);
                    FoldResult {
                        fold_index: split.fold_index,
                        accuracy: None,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let accs: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
    let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
    CrossValReport {
        task: task.name().to_string(),
        window_s,
        folds,
        mean_accuracy,
        sd_accuracy,
    }
}

/// One match-mismatch model for the chosen stream, trained and tested on a
/// single split.
pub fn train_mmm(
    dataset: &Dataset,
    split: &FoldSplit,
    window_s: f64,
    kind: crate::dataset::StreamKind,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    run_fold(dataset, split, window_s, Task::MatchMismatch(kind), model_cfg, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::default();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros([2]);
        let mut st = AdamState::default();
        let r = adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, &TrainConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn patience_one_stops_after_second_worse_epoch() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(1, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 1.1));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch, Some(1));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            early_stop_patience: 60,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }
}
