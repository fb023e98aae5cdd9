//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::time::Instant;

use aad_core::attribution::{
    attribute_samples, channel_importance, difference_map, expected_gradients, AttributionConfig, InputFunction,
    LogitDifference,
};
use aad_core::dataset::{
    make_aad_samples, make_fold_splits, make_mmm_samples, Dataset, RecordingManifest, StreamKind, Task,
};
use aad_core::dsp::{common_average_reference, pca_fit, resample, FirFilter};
use aad_core::model::{argmax, cross_entropy, temperature_softmax, ModelConfig, ModelParams};
use aad_core::synthetic::{generate_dataset, SynthConfig};
use aad_core::training::{cross_validate, train_mmm, TrainConfig};
use aad_core::{FeatureTensor, Result, Tape, Tensor};
use common::{covariance, dtft_magnitude, jacobi_eigen, numeric_grad, rel_err, rng, uniform};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn reduced_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        eeg_channels: 4,
        latent_dim: 8,
        virtual_channels: 4,
        n_res_blocks: 2,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    for t in p.tree.leaves_mut() {
        let noise = uniform(&mut r, t.len(), 0.5);
        t.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += e);
    }
    p
}

fn reduced_inputs(seed: u64) -> (Tensor, [Tensor; 2]) {
    let mut r = rng(seed);
    let mut t = |rows: usize| Tensor::new([rows, 16], uniform(&mut r, rows * 16, 1.0)).unwrap();
    (t(4), [t(8), t(8)])
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let p = reduced_model(21);
    let (e, s) = reduced_inputs(22);
    let (_, grads) = p.loss_and_grads(&e, &s, 0).unwrap();
    let names = p.tree.names();
    let mut worst = (0.0f64, String::new());
    for (i, name) in names.iter().enumerate() {
        let base = p.tree.leaves()[i].data().to_vec();
        let numeric = numeric_grad(&base, |x| {
            let mut q = p.clone();
            q.tree.leaves_mut()[i].data_mut().copy_from_slice(x);
            cross_entropy(&q.scores(&e, &s).unwrap(), q.config.temperature, 0) as f64
        });
        let err = rel_err(grads[i].data(), &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-3 && secs < 60.0,
        format!(
            "{} tensors, worst relative error {:.2e} ({}) < 1e-3, {secs:.1} s < 60 s",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

// ------------------------------------------------------- classifier invariants

fn classifier_invariants() -> Outcome {
    const CASES: u32 = 128;
    let runner = || {
        TestRunner::new_with_rng(
            Config {
                cases: CASES,
                failure_persistence: None,
                ..Config::default()
            },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        )
    };
    let mut failures = Vec::new();

    let r = runner().run(&(prop::collection::vec(-1.0f32..1.0, 2..6), 0.01f32..10.0), |(s, tau)| {
        let p = temperature_softmax(&s, tau);
        let total: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "sum {total}");
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("normalization: {e}"));
    }

    let r = runner().run(&(-1.0f32..1.0, -1.0f32..1.0), |(a, b)| {
        let reference = argmax(&[a, b]);
        for tau in [0.01f32, 0.05, 1.0, 10.0] {
            let p = temperature_softmax(&[a, b], tau);
            if p[0] != p[1] || a == b {
                prop_assert_eq!(argmax(&p), reference, "tau {}", tau);
            }
        }
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("argmax invariance: {e}"));
    }

    let r = runner().run(&(any::<u64>(), 0.01f32..100.0, 2usize..256), |(seed, alpha, n)| {
        let mut g = rng(seed);
        let a = uniform(&mut g, n, 1.0);
        let b = uniform(&mut g, n, 1.0);
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::new([n], a.clone()).unwrap());
        let vs = tape.constant(Tensor::new([n], a.iter().map(|v| v * alpha).collect()).unwrap());
        let vb = tape.constant(Tensor::new([n], b).unwrap());
        let c1 = tape.cosine(va, vb).unwrap();
        let c2 = tape.cosine(vs, vb).unwrap();
        let d = (tape.value(c1).item() - tape.value(c2).item()).abs();
        prop_assert!(d < 1e-6, "difference {d}");
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("cosine scale: {e}"));
    }

    let model = reduced_model(31);
    let r = runner().run(&any::<u64>(), |seed| {
        let (e, s) = reduced_inputs(seed);
        let ab = model.classify(&e, &[s[0].clone(), s[1].clone()]).unwrap();
        let ba = model.classify(&e, &[s[1].clone(), s[0].clone()]).unwrap();
        prop_assert_eq!(ab.probs[0], ba.probs[1]);
        prop_assert_eq!(ab.probs[1], ba.probs[0]);
        if ab.scores[0] != ab.scores[1] {
            prop_assert_eq!(ab.predicted, 1 - ba.predicted);
        }
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("permutation: {e}"));
    }

    if failures.is_empty() {
        Outcome::Pass(format!(
            "normalization, argmax under tau in {{0.01,0.05,1,10}}, cosine scale, permutation: {CASES} cases each"
        ))
    } else {
        Outcome::Fail(failures.join("; "))
    }
}

// ---------------------------------------------------------------------- DSP

fn db(x: f64) -> f64 {
    20.0 * x.max(1e-300).log10()
}

fn dsp() -> Outcome {
    let f = FirFilter::bandpass(0.5, 32.0, 10_000.0).unwrap();
    let passband: Vec<f64> = (0..=104)
        .map(|k| db(dtft_magnitude(&f.taps, 2.0 + 0.25 * k as f64, 10_000.0)))
        .collect();
    let ripple = passband.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let at_005 = db(dtft_magnitude(&f.taps, 0.05, 10_000.0));
    let at_48 = db(dtft_magnitude(&f.taps, 48.0, 10_000.0));

    let mut r = rng(40);
    let raw = FeatureTensor::new(32, 2000, uniform(&mut r, 64_000, 50.0), 256.0).unwrap();
    let car = common_average_reference(&raw).unwrap();
    let col_mean = (0..car.cols())
        .map(|t| ((0..32).map(|c| car.at(c, t) as f64).sum::<f64>() / 32.0).abs())
        .fold(0.0f64, f64::max);

    let n = 64 * 10_000;
    let long = FeatureTensor::new(
        1,
        n,
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / 10_000.0).sin() as f32)
            .collect(),
        10_000.0,
    )
    .unwrap();
    let out_len = resample(&long, 64.0).unwrap().cols();

    verdict(
        ripple <= 1.0 && at_005 <= -20.0 && at_48 <= -20.0 && col_mean < 1e-6 && out_len == 4096,
        format!(
            "{} taps, passband max |gain| {ripple:.3} dB <= 1, {at_005:.1} dB at 0.05 Hz and {at_48:.1} dB at 48 Hz <= -20, \
             CAR max |column mean| {col_mean:.1e} < 1e-6, 64 s @ 10 kHz -> {out_len} samples",
            f.len()
        ),
    )
}

// ---------------------------------------------------------------------- PCA

fn pca_oracle() -> Outcome {
    let (mut worst_var, mut worst_orth) = (0.0f64, 0.0f64);
    const TRIALS: u64 = 20;
    for seed in 0..TRIALS {
        let mut r = rng(500 + seed);
        let mix = DMatrix::from_fn(12, 12, |_, _| r.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(50, 12, |_, _| r.random_range(-1.0..1.0)) * mix;
        let m = pca_fit(&x, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..50).map(|i| x.row(i).iter().copied().collect()).collect();
        let (values, _) = jacobi_eigen(&covariance(&rows));
        for i in 0..4 {
            worst_var = worst_var.max((m.explained_variance[i] - values[i]).abs());
        }
        let gram = &m.components * m.components.transpose();
        worst_orth = worst_orth.max((gram - DMatrix::<f64>::identity(4, 4)).abs().max());
    }
    verdict(
        worst_var < 1e-6 && worst_orth < 1e-5,
        format!(
            "{TRIALS} random 50x12 matrices, k=4: max variance error {worst_var:.1e} < 1e-6, \
             max |C C^T - I| {worst_orth:.1e} < 1e-5"
        ),
    )
}

// ------------------------------------------------------------ synthetic runs

/// Model and optimiser sizes for the desk-scale synthetic runs.
fn synth_model() -> ModelConfig {
    ModelConfig {
        eeg_channels: 32,
        latent_dim: 8,
        virtual_channels: 8,
        n_res_blocks: 1,
        ..ModelConfig::default()
    }
}

fn synth_data(g: f64, u: f64, noise: f64, seed: u64) -> Dataset {
    generate_dataset(&SynthConfig {
        feature_dim: 8,
        coupling_gain: g,
        unattended_gain: u,
        noise_sd: noise,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn train_cfg(lr: f32, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        early_stop_patience: epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn cv_mean(d: &Dataset, window_s: f64, cfg: &TrainConfig) -> (f64, f64, bool) {
    let splits = make_fold_splits(&d.subjects(), cfg.seed).unwrap();
    let r = cross_validate(d, &splits, window_s, Task::Aad, &synth_model(), cfg, &|_| Ok(()));
    (r.mean_accuracy, r.sd_accuracy, !r.failed() && r.accuracies().len() == 7)
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = train_cfg(1e-3, 2, 0);
    let strong = synth_data(1.0, 0.0, 1.0, 0);
    let (acc, sd, ok_strong) = cv_mean(&strong, 5.0, &cfg);
    drop(strong);
    let control = synth_data(0.0, 0.0, 1.0, 0);
    let (ctrl, ctrl_sd, ok_ctrl) = cv_mean(&control, 5.0, &cfg);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    verdict(
        ok_strong && ok_ctrl && acc >= 0.85 && (0.45..=0.55).contains(&ctrl) && mins <= 30.0,
        format!(
            "7-fold 5 s: coupled {acc:.4} +/- {sd:.4} >= 0.85, control {ctrl:.4} +/- {ctrl_sd:.4} in [0.45, 0.55], \
             {mins:.1} min <= 30"
        ),
    )
}

fn segment_length_trend() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [1u64, 2, 3] {
        let d = synth_data(1.0, 0.0, 48.0, seed);
        let cfg = train_cfg(2e-3, 4, seed);
        let (one, _, ok1) = cv_mean(&d, 1.0, &cfg);
        let (five, _, ok5) = cv_mean(&d, 5.0, &cfg);
        ok &= ok1 && ok5 && five >= one;
        lines.push(format!("seed {seed}: 1 s {one:.4}, 5 s {five:.4}"));
    }
    verdict(ok, format!("5 s >= 1 s for every seed ({})", lines.join("; ")))
}

fn mmm_late_selection() -> Outcome {
    let d = synth_data(1.0, 1.0, 1.0, 7);
    let split = &make_fold_splits(&d.subjects(), 7).unwrap()[0];
    let cfg = train_cfg(1e-3, 2, 7);
    let run = |kind| train_mmm(&d, split, 5.0, kind, &synth_model(), &cfg);
    match (run(StreamKind::Attended), run(StreamKind::Unattended)) {
        (Ok(a), Ok(u)) => {
            let (aa, ua) = (a.report.test_accuracy.unwrap(), u.report.test_accuracy.unwrap());
            verdict(
                aa > 0.80 && ua > 0.80 && (aa - ua).abs() < 0.05,
                format!(
                    "g = u = 1: attended-trained {aa:.4}, unattended-trained {ua:.4}, both > 0.80, |diff| {:.4} < 0.05",
                    (aa - ua).abs()
                ),
            )
        }
        (a, u) => Outcome::Fail(format!("training failed: {:?} / {:?}", a.err(), u.err())),
    }
}

// -------------------------------------------------------------- attribution

struct Linear(Tensor);

impl InputFunction for Linear {
    fn value_and_grad(&self, eeg: &Tensor) -> Result<(f32, Tensor)> {
        Ok((eeg.data().iter().zip(self.0.data()).map(|(a, b)| a * b).sum(), self.0.clone()))
    }
}

fn wired(channels: &[usize], seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        eeg_channels: 8,
        latent_dim: 4,
        virtual_channels: 4,
        n_res_blocks: 1,
        ..ModelConfig::default()
    };
    let mut m = ModelParams::init(cfg, seed).unwrap();
    for r in 0..4 {
        for ch in 0..8 {
            let on = channels[r % channels.len()] == ch;
            m.tree.attention.data_mut()[r * 8 + ch] = if on { 30.0 } else { -30.0 };
        }
    }
    m
}

fn attribution() -> Outcome {
    let mut r = rng(60);
    let mut t = |shape: [usize; 2]| Tensor::new(shape, uniform(&mut r, shape[0] * shape[1], 1.0)).unwrap();
    let (m, e, b) = (t([8, 20]), t([8, 20]), t([8, 20]));
    let lin = expected_gradients(&Linear(m.clone()), &e, &[b.clone()], 16, 3).unwrap();
    let lin_err = (0..lin.len())
        .map(|i| (lin.data()[i] - m.data()[i] * (e.data()[i] - b.data()[i])).abs())
        .fold(0.0f32, f32::max);

    let d = generate_dataset(&SynthConfig {
        n_subjects: 1,
        sessions_per_subject: 2,
        duration_s: 10.0,
        eeg_channels: 8,
        feature_dim: 4,
        noise_sd: 0.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let subjects = d.subjects();
    let aad_s = make_aad_samples(&d, &subjects, 1.0, 0).unwrap();
    let mmm_s = make_mmm_samples(&d, &subjects, 1.0, StreamKind::Attended, 0).unwrap();

    let model = wired(&[0, 1, 2, 3, 4, 5, 6, 7], 8);
    let f = LogitDifference::for_sample(&model, &aad_s[0]);
    let x = aad_s[0].eeg();
    let zero = Tensor::zeros(x.shape().to_vec());
    let a = expected_gradients(&f, &x, &[zero.clone()], 256, 1).unwrap();
    let total: f64 = a.data().iter().map(|&v| v as f64).sum();
    let gap = (f.value_and_grad(&x).unwrap().0 - f.value_and_grad(&zero).unwrap().0) as f64;
    let completeness = (total - gap).abs() / gap.abs();

    let pool: Vec<Tensor> = aad_s.iter().step_by(3).map(|s| s.eeg()).collect();
    let cfg = AttributionConfig {
        n_draws: 16,
        ..AttributionConfig::default()
    };
    let names: Vec<String> = (1..=8).map(|i| format!("ch{i}")).collect();
    let aad = attribute_samples(&wired(&[0, 1], 1), &aad_s[..8], &pool, &cfg).unwrap();
    let mmm = attribute_samples(&wired(&[2, 3], 2), &mmm_s[..8], &pool, &cfg).unwrap();
    let diff = difference_map(
        &channel_importance(&aad, &names, "aad").unwrap(),
        &channel_importance(&mmm, &names, "mmm-att").unwrap(),
    )
    .unwrap();
    let signs = diff[0] > 0.0 && diff[1] > 0.0 && diff[2] < 0.0 && diff[3] < 0.0;

    verdict(
        lin_err < 1e-5 && completeness < 0.05 && signs,
        format!(
            "linear max error {lin_err:.1e} < 1e-5, completeness {:.2}% < 5% (f(E)-f(0) = {gap:.3}), \
             difference map {:+.3} {:+.3} {:+.3} {:+.3} on channels 1-4 (want + + - -)",
            100.0 * completeness,
            diff[0],
            diff[1],
            diff[2],
            diff[3]
        ),
    )
}

// ---------------------------------------------------------- full reproduction

fn full_reproduction() -> Outcome {
    let Ok(root) = std::env::var("AAD_DATASET_ROOT") else {
        return Outcome::Skip("AAD_DATASET_ROOT not set; needs the public diotic dataset and extracted features".into());
    };
    let root = std::path::PathBuf::from(root);
    let manifest = match RecordingManifest::load(root.join("manifest.json")) {
        Ok(m) => m,
        Err(e) => return Outcome::Fail(format!("cannot load manifest: {e}")),
    };
    let (d, errors) = Dataset::load(&root, &manifest);
    if !errors.is_empty() {
        return Outcome::Fail(format!("{} recordings failed to load", errors.len()));
    }
    let splits = match make_fold_splits(&d.subjects(), 0) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let r = cross_validate(
        &d,
        &splits,
        5.0,
        Task::Aad,
        &ModelConfig::default(),
        &TrainConfig::default(),
        &|_| Ok(()),
    );
    let pct = 100.0 * r.mean_accuracy;
    verdict(
        !r.failed() && (pct - 72.70).abs() <= 5.0,
        format!("5 s cross-validated accuracy {pct:.2}% vs 72.70% +/- 5"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("classifier invariants", classifier_invariants),
        ("dsp", dsp),
        ("pca oracle equivalence", pca_oracle),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("segment-length trend", segment_length_trend),
        ("m-mm late selection", mmm_late_selection),
        ("attribution", attribution),
        ("optional full reproduction", full_reproduction),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {name}: {detail} [{secs:.1} s]");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
