//! Dual-encoder classifier.
//!
//! The EEG encoder is a learned spatial attention over channels followed by
//! an input convolution and a stack of pre-activation residual blocks. The
//! speech encoder is a two-layer 1-D CNN. Both latents are scaled row-wise by
//! one shared weight vector, flattened and compared by cosine similarity;
//! the similarities divided by the temperature are the class logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature::{read_feature_file, write_feature_file, FeatureTensor};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub eeg_channels: usize,
    /// Latent feature dimension; also the speech feature dimension.
    pub latent_dim: usize,
    /// Rows of the spatial attention matrix.
    pub virtual_channels: usize,
    pub n_res_blocks: usize,
    pub kernel_size: usize,
    pub temperature: f32,
    /// Z-score every EEG channel of a segment over time before encoding.
    pub standardize_eeg: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            eeg_channels: 32,
            latent_dim: 64,
            virtual_channels: 64,
            n_res_blocks: 5,
            kernel_size: 3,
            temperature: 0.05,
            standardize_eeg: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.eeg_channels == 0 || self.latent_dim == 0 || self.virtual_channels == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, used to version checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub kernel: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub scale: T,
    pub shift: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub norm1: Norm<T>,
    pub conv1: Conv<T>,
    pub norm2: Norm<T>,
    pub conv2: Conv<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoder<T> {
    pub conv1: Conv<T>,
    pub norm: Norm<T>,
    pub conv2: Conv<T>,
}

/// Every learnable quantity of the classifier. `T` is [`Tensor`] for stored
/// weights and [`Var`] once they are bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTree<T> {
    /// `[virtual_channels, eeg_channels]` logits; each row is softmaxed.
    pub attention: T,
    pub input_conv: Conv<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub speech: SpeechEncoder<T>,
    /// `[latent_dim]`, shared by both modalities.
    pub feature_weight: T,
}

impl<T> ParamTree<T> {
    /// Applies `f` to every leaf in canonical order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> ParamTree<U> {
        let conv = |name: &str, c: &'a Conv<T>, f: &mut dyn FnMut(&str, &'a T) -> U| Conv {
            kernel: f(&format!("{name}.kernel"), &c.kernel),
            bias: f(&format!("{name}.bias"), &c.bias),
        };
        let norm = |name: &str, n: &'a Norm<T>, f: &mut dyn FnMut(&str, &'a T) -> U| Norm {
            scale: f(&format!("{name}.scale"), &n.scale),
            shift: f(&format!("{name}.shift"), &n.shift),
        };
        let attention = f("attention", &self.attention);
        let input_conv = conv("input_conv", &self.input_conv, f);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ResBlock {
                norm1: norm(&format!("block{i}.norm1"), &b.norm1, f),
                conv1: conv(&format!("block{i}.conv1"), &b.conv1, f),
                norm2: norm(&format!("block{i}.norm2"), &b.norm2, f),
                conv2: conv(&format!("block{i}.conv2"), &b.conv2, f),
            })
            .collect();
        let speech = SpeechEncoder {
            conv1: conv("speech.conv1", &self.speech.conv1, f),
            norm: norm("speech.norm", &self.speech.norm, f),
            conv2: conv("speech.conv2", &self.speech.conv2, f),
        };
        let feature_weight = f("feature_weight", &self.feature_weight);
        ParamTree {
            attention,
            input_conv,
            blocks,
            speech,
            feature_weight,
        }
    }

    /// Leaves in the same canonical order as [`ParamTree::map`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.attention, &mut self.input_conv.kernel, &mut self.input_conv.bias];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1.scale,
                &mut b.norm1.shift,
                &mut b.conv1.kernel,
                &mut b.conv1.bias,
                &mut b.norm2.scale,
                &mut b.norm2.shift,
                &mut b.conv2.kernel,
                &mut b.conv2.bias,
            ]);
        }
        out.extend([
            &mut self.speech.conv1.kernel,
            &mut self.speech.conv1.bias,
            &mut self.speech.norm.scale,
            &mut self.speech.norm.shift,
            &mut self.speech.conv2.kernel,
            &mut self.speech.conv2.bias,
            &mut self.feature_weight,
        ]);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.map(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |name, _| out.push(name.to_string()));
        out
    }
}

/// Stored model: configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tree: ParamTree<Tensor>,
}

/// Output of [`ModelParams::classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub scores: Vec<f32>,
    pub probs: Vec<f32>,
    /// 0-based index of the predicted stream; ties go to the lower index.
    pub predicted: usize,
}

/// First index of the maximum.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(scores / temperature)[target]` via log-sum-exp.
pub fn cross_entropy(scores: &[f32], temperature: f32, target: usize) -> f32 {
    let z: Vec<f64> = scores.iter().map(|&s| s as f64 / temperature as f64).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - z[target]) as f32
}

/// `softmax(scores / temperature)`.
pub fn temperature_softmax(scores: &[f32], temperature: f32) -> Vec<f32> {
    let z: Vec<f64> = scores.iter().map(|&s| s as f64 / temperature as f64).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| (v / total) as f32).collect()
}

pub fn spatial_attention(tape: &mut Tape, eeg: Var, logits: Var) -> Result<Var> {
    let weights = tape.softmax_rows(logits, 1.0)?;
    tape.matmul(weights, eeg)
}

fn conv(tape: &mut Tape, x: Var, c: &Conv<Var>) -> Result<Var> {
    tape.conv1d(x, c.kernel, c.bias)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var> {
    tape.channel_norm(x, n.scale, n.shift)
}

/// `[channels, T]` to `[latent_dim, T]`.
pub fn eeg_encode(tape: &mut Tape, p: &ParamTree<Var>, eeg: Var) -> Result<Var> {
    let h = spatial_attention(tape, eeg, p.attention)?;
    let h = conv(tape, h, &p.input_conv)?;
    let mut h = tape.gelu(h)?;
    for b in &p.blocks {
        let r = norm(tape, h, &b.norm1)?;
        let r = tape.gelu(r)?;
        let r = conv(tape, r, &b.conv1)?;
        let r = norm(tape, r, &b.norm2)?;
        let r = tape.gelu(r)?;
        let r = conv(tape, r, &b.conv2)?;
        h = tape.add(h, r)?;
    }
    Ok(h)
}

/// `[latent_dim, T]` to `[latent_dim, T]`.
pub fn speech_encode(tape: &mut Tape, p: &ParamTree<Var>, speech: Var) -> Result<Var> {
    let h = conv(tape, speech, &p.speech.conv1)?;
    let h = norm(tape, h, &p.speech.norm)?;
    let h = tape.gelu(h)?;
    conv(tape, h, &p.speech.conv2)
}

/// `flatten(diag(w) z)`, row-major.
pub fn weight_and_flatten(tape: &mut Tape, z: Var, w: Var) -> Result<Var> {
    let scaled = tape.scale_rows(z, w)?;
    tape.flatten(scaled)
}

/// Cosine similarity between the weighted EEG latent and each weighted
/// speech latent, as a vector.
pub fn similarity_scores(tape: &mut Tape, p: &ParamTree<Var>, eeg: Var, streams: &[Var]) -> Result<Var> {
    let ze = eeg_encode(tape, p, eeg)?;
    let ve = weight_and_flatten(tape, ze, p.feature_weight)?;
    let mut scores = Vec::with_capacity(streams.len());
    for &s in streams {
        let zs = speech_encode(tape, p, s)?;
        let vs = weight_and_flatten(tape, zs, p.feature_weight)?;
        scores.push(tape.cosine(ve, vs)?);
    }
    tape.concat(&scores)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

impl ModelParams {
    /// Attention logits zero, convolution weights and biases uniform in
    /// `±sqrt(1 / (c_in k))`, norms the identity, feature weights one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let f = config.latent_dim;
        let mut conv = |cin: usize, cout: usize| {
            let bound = (1.0 / (cin * k) as f32).sqrt();
            Conv {
                kernel: uniform_tensor(&mut rng, &[cout, cin, k], bound),
                bias: uniform_tensor(&mut rng, &[cout], bound),
            }
        };
        let norm = || Norm {
            scale: Tensor::full([f], 1.0),
            shift: Tensor::zeros([f]),
        };
        let input_conv = conv(config.virtual_channels, f);
        let blocks = (0..config.n_res_blocks)
            .map(|_| ResBlock {
                norm1: norm(),
                conv1: conv(f, f),
                norm2: norm(),
                conv2: conv(f, f),
            })
            .collect();
        let speech = SpeechEncoder {
            conv1: conv(f, f),
            norm: norm(),
            conv2: conv(f, f),
        };
        Ok(Self {
            tree: ParamTree {
                attention: Tensor::zeros([config.virtual_channels, config.eeg_channels]),
                input_conv,
                blocks,
                speech,
                feature_weight: Tensor::full([f], 1.0),
            },
            config,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.tree.leaves().iter().map(|t| t.len()).sum()
    }

    /// Registers every weight on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamTree<Var> {
        self.tree.map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// The EEG tensor as seen by the encoder.
    pub fn prepare_eeg(&self, eeg: &Tensor) -> Tensor {
        if !self.config.standardize_eeg {
            return eeg.clone();
        }
        let (c, t) = (eeg.rows(), eeg.cols());
        let mut out = eeg.clone();
        for r in 0..c {
            let row = &mut out.data_mut()[r * t..(r + 1) * t];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
            let inv = 1.0 / (var.sqrt() + 1e-8);
            row.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
        }
        out
    }

    fn check_inputs(&self, eeg: &Tensor, streams: &[Tensor]) -> Result<()> {
        let c = &self.config;
        if eeg.shape().len() != 2 || eeg.rows() != c.eeg_channels {
            return Err(Error::Shape {
                op: "eeg input",
                lhs: eeg.shape().to_vec(),
                rhs: vec![c.eeg_channels, eeg.cols()],
            });
        }
        for s in streams {
            if s.shape() != [c.latent_dim, eeg.cols()] {
                return Err(Error::Shape {
                    op: "speech input",
                    lhs: s.shape().to_vec(),
                    rhs: vec![c.latent_dim, eeg.cols()],
                });
            }
        }
        Ok(())
    }

    /// Similarity score of every candidate stream.
    pub fn scores(&self, eeg: &Tensor, streams: &[Tensor]) -> Result<Vec<f32>> {
        self.check_inputs(eeg, streams)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let e = tape.constant(self.prepare_eeg(eeg));
        let s: Vec<Var> = streams.iter().map(|s| tape.constant(s.clone())).collect();
        let scores = similarity_scores(&mut tape, &p, e, &s)?;
        Ok(tape.value(scores).data().to_vec())
    }

    pub fn classify(&self, eeg: &Tensor, streams: &[Tensor]) -> Result<Classification> {
        let scores = self.scores(eeg, streams)?;
        let probs = temperature_softmax(&scores, self.config.temperature);
        let predicted = argmax(&scores);
        Ok(Classification {
            scores,
            probs,
            predicted,
        })
    }

    /// Cross-entropy of the correct candidate and the gradient of every
    /// weight, in canonical leaf order.
    pub fn loss_and_grads(&self, eeg: &Tensor, streams: &[Tensor], target: usize) -> Result<(f32, Vec<Tensor>)> {
        self.check_inputs(eeg, streams)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, true);
        let e = tape.constant(self.prepare_eeg(eeg));
        let s: Vec<Var> = streams.iter().map(|s| tape.constant(s.clone())).collect();
        let scores = similarity_scores(&mut tape, &p, e, &s)?;
        let loss = tape.cross_entropy(scores, self.config.temperature, target)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = p
            .leaves()
            .into_iter()
            .map(|v| grads.take(*v).expect("trainable leaf has a gradient"))
            .collect();
        Ok((value, out))
    }

    /// SHA-256 over the configuration and every weight's bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.hash().as_bytes());
        for t in self.tree.leaves() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Writes `model.json` and one feature file per weight into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.tree.names().into_iter().zip(self.tree.leaves()) {
            let file = format!("{name}.ftf");
            let rows = t.shape().first().copied().unwrap_or(1);
            let cols = t.len() / rows.max(1);
            let (rows, cols) = if t.shape().len() == 1 { (1, t.len()) } else { (rows, cols) };
            let ft = FeatureTensor::new(rows, cols, t.data().to_vec(), 1.0)?.with_source(format!("param:{name}"));
            write_feature_file(dir.join(&file), &ft)?;
            entries.push(serde_json::json!({ "name": name, "shape": t.shape(), "file": file }));
        }
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": self.config.hash(),
            "fingerprint": self.fingerprint(),
            "tensors": entries,
        });
        let path = dir.join("model.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        if meta["config_hash"].as_str() != Some(config.hash().as_str()) {
            return Err(Error::invalid(format!("{}: config hash mismatch", path.display())));
        }
        let mut params = Self::init(config, 0)?;
        let names = params.tree.names();
        for (name, slot) in names.iter().zip(params.tree.leaves_mut()) {
            let ft = read_feature_file(dir.join(format!("{name}.ftf")))?;
            if ft.data().len() != slot.len() {
                return Err(Error::invalid(format!(
                    "{name}: checkpoint has {} values, model needs {}",
                    ft.data().len(),
                    slot.len()
                )));
            }
            slot.data_mut().copy_from_slice(ft.data());
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            eeg_channels: 4,
            latent_dim: 6,
            virtual_channels: 5,
            n_res_blocks: 2,
            kernel_size: 3,
            temperature: 0.05,
            standardize_eeg: false,
        }
    }

    #[test]
    fn leaf_orders_agree() {
        let mut p = ModelParams::init(tiny(), 1).unwrap();
        for (i, t) in p.tree.leaves_mut().into_iter().enumerate() {
            t.data_mut()[0] = i as f32;
        }
        for (i, t) in p.tree.leaves().into_iter().enumerate() {
            assert_eq!(t.data()[0], i as f32);
        }
        assert_eq!(p.tree.names().len(), 3 + 8 * 2 + 7);
    }

    #[test]
    fn initial_values() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        assert!(p.tree.attention.data().iter().all(|&v| v == 0.0));
        assert!(p.tree.feature_weight.data().iter().all(|&v| v == 1.0));
        let bound = (1.0f32 / 15.0).sqrt();
        assert!(p.tree.input_conv.kernel.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.3, 0.3]), 0);
        assert_eq!(argmax(&[0.1, 0.3]), 1);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((cross_entropy(&[0.2, 0.2], 0.05, 1) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(cross_entropy(&[1.0, -1.0], 0.001, 0) < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.temperature = 0.0;
        assert!(ModelParams::init(c.clone(), 0).is_err());
        c.temperature = 0.05;
        c.kernel_size = 4;
        assert!(ModelParams::init(c, 0).is_err());
    }

    #[test]
    fn wrong_input_shapes_are_rejected() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        let e = Tensor::zeros([3, 10]);
        let s = Tensor::zeros([6, 10]);
        assert!(p.scores(&e, &[s.clone(), s.clone()]).is_err());
        let e = Tensor::zeros([4, 10]);
        let short = Tensor::zeros([6, 9]);
        assert!(p.scores(&e, &[s, short]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let p = ModelParams::init(tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = ModelParams::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }
}
