//! Test-only oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Central difference with one Richardson extrapolation step, so truncation
/// error is fourth order and a fairly large step can be used with `f32`
/// function evaluations.
pub fn numeric_grad(x: &[f32], mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut central = |i: usize, h: f64, probe: &mut Vec<f32>| {
        let base = x[i];
        let up = (base as f64 + h) as f32;
        let down = (base as f64 - h) as f32;
        probe[i] = up;
        let fu = f(probe);
        probe[i] = down;
        let fd = f(probe);
        probe[i] = base;
        (fu - fd) / (up as f64 - down as f64)
    };
    (0..x.len())
        .map(|i| {
            let h = 1e-2 * (x[i].abs() as f64).max(1.0);
            let coarse = central(i, h, &mut probe);
            let fine = central(i, h / 2.0, &mut probe);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

/// `|a - n| / max(|n|, floor)` measured in the Euclidean norm.
pub fn rel_err(auto: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = auto
        .iter()
        .zip(numeric)
        .map(|(a, n)| (*a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-6)
}

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix by cyclic
/// Jacobi rotations, sorted by decreasing eigenvalue.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Sample covariance (`n - 1` denominator) of the rows of `x`.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    c.iter_mut()
        .for_each(|row| row.iter_mut().for_each(|v| *v /= (n - 1) as f64));
    c
}

/// Magnitude of the discrete-time Fourier transform of `taps` at `freq / fs`.
pub fn dtft_magnitude(taps: &[f64], freq: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, h)| {
        (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin())
    });
    (re * re + im * im).sqrt()
}

/// Amplitude and phase (radians) of the `freq` component of `x`, by least
/// squares against a sine/cosine pair.
pub fn sine_fit(x: &[f64], freq: f64, fs: f64, offset: usize) -> (f64, f64) {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    let (mut ss, mut cc, mut sc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let t = (i + offset) as f64;
        let (s, c) = (w * t).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    ((a * a + b * b).sqrt(), b.atan2(a))
}
