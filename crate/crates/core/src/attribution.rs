//! Expected-gradients attribution of the EEG input and per-channel
//! importance maps.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::feature::{write_feature_file, FeatureTensor};
use crate::model::{similarity_scores, ModelParams};
use crate::tensor::{Tape, Tensor};

/// A scalar function of the EEG input that can report its gradient.
pub trait InputFunction: Sync {
    fn value_and_grad(&self, eeg: &Tensor) -> Result<(f32, Tensor)>;
}

/// `(s_target - s_other) / temperature` for fixed candidate streams: the
/// logit difference of the correct class.
pub struct LogitDifference<'a> {
    pub model: &'a ModelParams,
    pub streams: [Tensor; 2],
    pub target: usize,
}

impl<'a> LogitDifference<'a> {
    pub fn for_sample(model: &'a ModelParams, sample: &Sample) -> Self {
        Self {
            model,
            streams: sample.candidates(),
            target: sample.target,
        }
    }
}

impl InputFunction for LogitDifference<'_> {
    fn value_and_grad(&self, eeg: &Tensor) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, false);
        let e = tape.param(eeg.clone());
        let s: Vec<_> = self.streams.iter().map(|s| tape.constant(s.clone())).collect();
        let scores = similarity_scores(&mut tape, &p, e, &s)?;
        let hit = tape.index(scores, self.target)?;
        let miss = tape.index(scores, 1 - self.target)?;
        let diff = tape.sub(hit, miss)?;
        let logit = tape.scale(diff, 1.0 / self.model.config.temperature)?;
        let value = tape.value(logit).item();
        let mut g = tape.backward(logit)?;
        Ok((value, g.take(e).expect("input is differentiable")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub baseline_pool: usize,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            baseline_pool: 64,
            n_draws: 32,
            seed: 0,
        }
    }
}

/// Mean over `n_draws` of `(E - B) * grad f(B + a (E - B))`, with `B` drawn
/// uniformly from `baselines`. The path positions `a` are stratified: draw
/// `i` takes `a` uniform in `[i / n, (i + 1) / n)`, which keeps the estimate
/// unbiased and lowers its variance. Draw `i` uses its own RNG, so the result
/// depends only on `seed`.
pub fn expected_gradients(
    f: &dyn InputFunction,
    eeg: &Tensor,
    baselines: &[Tensor],
    n_draws: usize,
    seed: u64,
) -> Result<Tensor> {
    if baselines.is_empty() {
        return Err(Error::invalid("baseline pool is empty"));
    }
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be at least 1"));
    }
    if let Some(b) = baselines.iter().find(|b| b.shape() != eeg.shape()) {
        return Err(Error::Shape {
            op: "expected_gradients baseline",
            lhs: eeg.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let draws: Vec<Vec<f32>> = (0..n_draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let b = &baselines[rng.random_range(0..baselines.len())];
            let u: f64 = rng.random();
            let alpha = ((i as f64 + u) / n_draws as f64).max(f64::from(f32::EPSILON)) as f32;
            let point: Vec<f32> = eeg.data().iter().zip(b.data()).map(|(e, b)| b + alpha * (e - b)).collect();
            let (_, g) = f.value_and_grad(&Tensor::new(eeg.shape().to_vec(), point)?)?;
            Ok(eeg
                .data()
                .iter()
                .zip(b.data())
                .zip(g.data())
                .map(|((e, b), g)| (e - b) * g)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0f64; eeg.len()];
    for d in &draws {
        acc.iter_mut().zip(d).for_each(|(a, v)| *a += *v as f64);
    }
    Tensor::new(
        eeg.shape().to_vec(),
        acc.into_iter().map(|v| (v / n_draws as f64) as f32).collect(),
    )
}

/// Up to `size` EEG windows drawn without replacement from `samples`.
pub fn baseline_pool(samples: &[Sample], size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .choose_multiple(&mut rng, size.min(samples.len()))
        .map(|s| s.eeg())
        .collect()
}

/// Attributions of every sample, in sample order.
pub fn attribute_samples(
    model: &ModelParams,
    samples: &[Sample],
    baselines: &[Tensor],
    cfg: &AttributionConfig,
) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = LogitDifference::for_sample(model, s);
            let eeg = model.prepare_eeg(&s.eeg());
            expected_gradients(&f, &eeg, baselines, cfg.n_draws, cfg.seed.wrapping_add(i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionMap {
    /// `channels x T` mean absolute attribution.
    pub per_channel_time: Tensor,
    /// Time- and sample-averaged absolute attribution, normalised to sum 1.
    pub per_channel: Vec<f64>,
    pub channel_names: Vec<String>,
    pub task: String,
}

/// Mean absolute attribution per channel. All-zero attributions give an
/// all-zero map rather than a normalised one.
pub fn channel_importance(attributions: &[Tensor], channel_names: &[String], task: &str) -> Result<AttributionMap> {
    let first = attributions.first().ok_or_else(|| Error::invalid("no attributions"))?;
    let (c, t) = (first.rows(), first.cols());
    if channel_names.len() != c {
        return Err(Error::invalid(format!("{} channel names for {c} channels", channel_names.len())));
    }
    let mut sum = vec![0.0f64; c * t];
    for a in attributions {
        if a.shape() != first.shape() {
            return Err(Error::Shape {
                op: "channel_importance",
                lhs: first.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        sum.iter_mut().zip(a.data()).for_each(|(s, v)| *s += v.abs() as f64);
    }
    let n = attributions.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let raw: Vec<f64> = (0..c).map(|r| mean[r * t..(r + 1) * t].iter().sum::<f64>() / t as f64).collect();
    let total: f64 = raw.iter().sum();
    let per_channel = if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        log::warn!("attributions are identically zero; importance map left at zero");
        vec![0.0; c]
    };
    Ok(AttributionMap {
        per_channel_time: Tensor::new([c, t], mean.iter().map(|&v| v as f32).collect())?,
        per_channel,
        channel_names: channel_names.to_vec(),
        task: task.to_string(),
    })
}

/// `aad - mmm` per channel.
pub fn difference_map(aad: &AttributionMap, mmm: &AttributionMap) -> Result<Vec<f64>> {
    if aad.channel_names != mmm.channel_names {
        return Err(Error::invalid("attribution maps use different channel orderings"));
    }
    Ok(aad.per_channel.iter().zip(&mmm.per_channel).map(|(a, b)| a - b).collect())
}

/// `channel,value` rows.
pub fn channel_csv(names: &[String], values: &[f64]) -> String {
    let mut out = String::from("channel,value\n");
    for (n, v) in names.iter().zip(values) {
        out.push_str(&format!("{n},{v:.9}\n"));
    }
    out
}

impl AttributionMap {
    pub fn to_csv(&self) -> String {
        channel_csv(&self.channel_names, &self.per_channel)
    }

    /// The `channels x T` map as a feature file; names and the normalised
    /// per-channel vector go into the header.
    pub fn write_feature_file(&self, path: &Path, sample_rate_hz: f64) -> Result<()> {
        let t = &self.per_channel_time;
        let mut ft = FeatureTensor::new(t.rows(), t.cols(), t.data().to_vec(), sample_rate_hz)?
            .with_unit("")
            .with_source(format!("attribution:{}", self.task));
        ft.extra.insert("channel_names".into(), serde_json::json!(self.channel_names));
        ft.extra.insert("per_channel".into(), serde_json::json!(self.per_channel));
        write_feature_file(path, &ft)
    }
}
