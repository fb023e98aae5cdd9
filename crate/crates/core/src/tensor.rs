//! Dense `f32` tensors and a recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the recorded
//! operations in reverse and returns the gradient of a scalar with respect to
//! every leaf that was registered with `requires_grad`.
//!
//! A tape belongs to a single worker. Independent tapes can be driven from
//! different threads at the same time.

use crate::error::{Error, Result};

/// Row-major dense array of 32-bit floats.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Gelu(Var),
    ChannelNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    SoftmaxRows {
        x: Var,
        temperature: f32,
    },
    ScaleRows {
        z: Var,
        w: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        // 1 / (|a| |b|) and the similarity; zero when degenerate.
        inv_norms: f64,
        sim: f64,
        norm_a_sq: f64,
        norm_b_sq: f64,
    },
    CrossEntropy {
        scores: Var,
        temperature: f32,
        target: usize,
        probs: Vec<f32>,
    },
    Concat(Vec<Var>),
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, `None` when `v` is not a differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape.as_slice() {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

const SQRT_2: f32 = std::f32::consts::SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable `exp(x_i / t) / sum_j exp(x_j / t)`, written into `out`.
fn softmax_into(x: &[f32], temperature: f32, out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (((v - max) / temperature) as f64).exp();
        *o = e as f32;
        total += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / total) as f32;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data.iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total as f32), Op::Sum(a), rg, "sum")
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Row-major flatten to one dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, ka) = match ta.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(Error::Shape { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() }),
        };
        let (kb, nb) = match tb.shape.as_slice() {
            [r, c] if *r == ka => (*r, *c),
            _ => return Err(Error::Shape { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() }),
        };
        let mut out = vec![0.0f32; ma * nb];
        matmul_into(&ta.data, &tb.data, &mut out, ma, kb, nb);
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor {
                shape: vec![ma, nb],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
            "matmul",
        )
    }

    /// Same-padded, stride-1 1-D cross-correlation.
    ///
    /// `x` is `[c_in, t]`, `kernel` is `[c_out, c_in, k]` with odd `k`, `bias`
    /// is `[c_out]`. The output is `[c_out, t]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (cin, t) = match tx.shape.as_slice() {
            [c, t] => (*c, *t),
            _ => return Err(Error::Shape { op: "conv1d", lhs: tx.shape.clone(), rhs: tk.shape.clone() }),
        };
        let (cout, kcin, k) = match tk.shape.as_slice() {
            [o, i, k] => (*o, *i, *k),
            _ => return Err(Error::Shape { op: "conv1d", lhs: tx.shape.clone(), rhs: tk.shape.clone() }),
        };
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d: kernel size {k} must be odd")));
        }
        if kcin != cin {
            return Err(Error::Shape { op: "conv1d", lhs: tx.shape.clone(), rhs: tk.shape.clone() });
        }
        if tb.shape.as_slice() != [cout] {
            return Err(Error::Shape { op: "conv1d bias", lhs: tk.shape.clone(), rhs: tb.shape.clone() });
        }
        let pad = k / 2;
        let mut out = vec![0.0f32; cout * t];
        for co in 0..cout {
            let orow = &mut out[co * t..(co + 1) * t];
            orow.fill(tb.data[co]);
            for ci in 0..cin {
                let xrow = &tx.data[ci * t..(ci + 1) * t];
                for j in 0..k {
                    let w = tk.data[(co * cin + ci) * k + j];
                    // out[i] += w * x[i + j - pad]
                    let (lo, hi) = valid_range(t, j, pad);
                    let shift = j as isize - pad as isize;
                    let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (o, &xv) in orow[lo..hi].iter_mut().zip(src) {
                        *o += w * xv;
                    }
                }
            }
        }
        let rg = self.needs(&[x, kernel, bias]);
        self.push(
            Tensor {
                shape: vec![cout, t],
                data: out,
            },
            Op::Conv1d { x, kernel, bias },
            rg,
            "conv1d",
        )
    }

    /// Gaussian error linear unit, exact `erf` form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| gelu(v)).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    /// Normalizes every column of `x` (`[f, t]`) to zero mean and unit
    /// variance over the `f` features, then applies a per-feature affine map.
    pub fn channel_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, ts, tsh) = (self.value(x), self.value(scale), self.value(shift));
        let (f, t) = match tx.shape.as_slice() {
            [f, t] if *t >= 1 => (*f, *t),
            _ => return Err(Error::Shape { op: "channel_norm", lhs: tx.shape.clone(), rhs: ts.shape.clone() }),
        };
        if ts.shape.as_slice() != [f] || tsh.shape.as_slice() != [f] {
            return Err(Error::Shape { op: "channel_norm", lhs: tx.shape.clone(), rhs: ts.shape.clone() });
        }
        let mut mean = vec![0.0f64; t];
        for r in 0..f {
            for (m, &v) in mean.iter_mut().zip(&tx.data[r * t..(r + 1) * t]) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f as f64);
        let mut var = vec![0.0f64; t];
        for r in 0..f {
            for ((s, &v), m) in var.iter_mut().zip(&tx.data[r * t..(r + 1) * t]).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|s| (1.0 / (s / f as f64 + EPS).sqrt()) as f32)
            .collect();
        let mut xhat = vec![0.0f32; f * t];
        let mut out = vec![0.0f32; f * t];
        for r in 0..f {
            let (g, b) = (ts.data[r], tsh.data[r]);
            for c in 0..t {
                let i = r * t + c;
                let h = ((tx.data[i] as f64 - mean[c]) as f32) * inv_std[c];
                xhat[i] = h;
                out[i] = h * g + b;
            }
        }
        let rg = self.needs(&[x, scale, shift]);
        self.push(
            Tensor {
                shape: vec![f, t],
                data: out,
            },
            Op::ChannelNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
            "channel_norm",
        )
    }

    /// Temperature softmax over a vector `[n]`.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if self.value(x).shape.len() != 1 {
            return Err(Error::Shape { op: "softmax", lhs: self.value(x).shape.clone(), rhs: vec![] });
        }
        self.softmax_rows(x, temperature)
    }

    /// Temperature softmax applied independently to each row of `[r, n]`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let tx = self.value(x);
        let (r, n) = as_matrix(tx).ok_or_else(|| Error::Shape {
            op: "softmax_rows",
            lhs: tx.shape.clone(),
            rhs: vec![],
        })?;
        let mut out = vec![0.0f32; r * n];
        for i in 0..r {
            softmax_into(&tx.data[i * n..(i + 1) * n], temperature, &mut out[i * n..(i + 1) * n]);
        }
        let shape = tx.shape.clone();
        let rg = self.needs(&[x]);
        self.push(
            Tensor { shape, data: out },
            Op::SoftmaxRows { x, temperature },
            rg,
            "softmax",
        )
    }

    /// `diag(w) * z` for `z` of shape `[f, t]` and `w` of shape `[f]`.
    pub fn scale_rows(&mut self, z: Var, w: Var) -> Result<Var> {
        let (tz, tw) = (self.value(z), self.value(w));
        let (f, t) = match tz.shape.as_slice() {
            [f, t] if tw.shape.as_slice() == [*f] => (*f, *t),
            _ => return Err(Error::Shape { op: "scale_rows", lhs: tz.shape.clone(), rhs: tw.shape.clone() }),
        };
        let mut out = tz.data.clone();
        for r in 0..f {
            let g = tw.data[r];
            out[r * t..(r + 1) * t].iter_mut().for_each(|v| *v *= g);
        }
        let rg = self.needs(&[z, w]);
        self.push(
            Tensor {
                shape: vec![f, t],
                data: out,
            },
            Op::ScaleRows { z, w },
            rg,
            "scale_rows",
        )
    }

    /// Cosine similarity of two equally sized tensors, as a scalar.
    ///
    /// When either norm is below `1e-12` the similarity is defined as zero and
    /// no gradient flows.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Shape { op: "cosine", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ta.data.iter().zip(&tb.data) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (norm_a, norm_b) = (na.sqrt(), nb.sqrt());
        let (sim, inv_norms) = if norm_a < 1e-12 || norm_b < 1e-12 {
            log::warn!("cosine similarity of a zero-norm vector, defined as 0");
            (0.0, 0.0)
        } else {
            let inv = 1.0 / (norm_a * norm_b);
            ((dot * inv).clamp(-1.0, 1.0), inv)
        };
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor::scalar(sim as f32),
            Op::Cosine {
                a,
                b,
                inv_norms,
                sim,
                norm_a_sq: na,
                norm_b_sq: nb,
            },
            rg,
            "cosine",
        )
    }

    /// `-log softmax(scores / temperature)[target]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, scores: Var, temperature: f32, target: usize) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let ts = self.value(scores);
        if ts.shape.len() != 1 || target >= ts.len() {
            return Err(Error::invalid(format!(
                "cross_entropy: target {target} out of range for scores {:?}",
                ts.shape
            )));
        }
        let logits: Vec<f64> = ts.data.iter().map(|&s| s as f64 / temperature as f64).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - logits[target];
        let probs = logits.iter().map(|z| (z - lse).exp() as f32).collect();
        let rg = self.needs(&[scores]);
        self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                scores,
                temperature,
                target,
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Concatenates scalars or vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let n = data.len();
        let rg = self.needs(parts);
        self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::Concat(parts.to_vec()),
            rg,
            "concat",
        )
    }

    /// Selects one element as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        let v = *ta.data.get(i).ok_or_else(|| {
            Error::invalid(format!("index {i} out of range for shape {:?}", ta.shape))
        })?;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(v), Op::Index(a, i), rg, "index")
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Operations are visited in exact reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => Some(Tensor {
                    shape: n.value.shape.clone(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            s[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T * dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av != 0.0 {
                                for (s, &gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *s += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
                let (cin, t) = (tx.shape[0], tx.shape[1]);
                let (cout, k) = (tk.shape[0], tk.shape[2]);
                let pad = k / 2;
                if let Some(s) = self.slot(grads, *bias) {
                    for co in 0..cout {
                        s[co] += g[co * t..(co + 1) * t].iter().sum::<f32>();
                    }
                }
                if let Some(s) = self.slot(grads, *kernel) {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let xrow = &tx.data[ci * t..(ci + 1) * t];
                            for j in 0..k {
                                let (lo, hi) = valid_range(t, j, pad);
                                let shift = j as isize - pad as isize;
                                let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                s[(co * cin + ci) * k + j] += dot(&grow[lo..hi], src);
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let srow = &mut s[ci * t..(ci + 1) * t];
                            for j in 0..k {
                                let w = tk.data[(co * cin + ci) * k + j];
                                let (lo, hi) = valid_range(t, j, pad);
                                let shift = j as isize - pad as isize;
                                let dst = &mut srow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                for (d, &gv) in dst.iter_mut().zip(&grow[lo..hi]) {
                                    *d += w * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[x.0].value.data;
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(tx) {
                        *s += g * gelu_grad(v);
                    }
                }
            }
            Op::ChannelNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let shape = &self.nodes[x.0].value.shape;
                let (f, t) = (shape[0], shape[1]);
                let gamma = &self.nodes[scale.0].value.data;
                if let Some(s) = self.slot(grads, *scale) {
                    for r in 0..f {
                        s[r] += dot(&g[r * t..(r + 1) * t], &xhat[r * t..(r + 1) * t]);
                    }
                }
                if let Some(s) = self.slot(grads, *shift) {
                    for r in 0..f {
                        s[r] += g[r * t..(r + 1) * t].iter().sum::<f32>();
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut sum_d = vec![0.0f32; t];
                    let mut sum_dx = vec![0.0f32; t];
                    for r in 0..f {
                        for c in 0..t {
                            let d = g[r * t + c] * gamma[r];
                            sum_d[c] += d;
                            sum_dx[c] += d * xhat[r * t + c];
                        }
                    }
                    let nf = f as f32;
                    for r in 0..f {
                        for c in 0..t {
                            let i = r * t + c;
                            let d = g[i] * gamma[r];
                            s[i] += inv_std[c] / nf * (nf * d - sum_d[c] - xhat[i] * sum_dx[c]);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, temperature } => {
                let y = &node.value;
                let (r, n) = as_matrix(y).expect("softmax output shape");
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..r {
                        let (yr, gr) = (&y.data[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let inner = dot(yr, gr);
                        for j in 0..n {
                            s[i * n + j] += yr[j] * (gr[j] - inner) / temperature;
                        }
                    }
                }
            }
            Op::ScaleRows { z, w } => {
                let (tz, tw) = (&self.nodes[z.0].value, &self.nodes[w.0].value);
                let (f, t) = (tz.shape[0], tz.shape[1]);
                if let Some(s) = self.slot(grads, *w) {
                    for r in 0..f {
                        s[r] += dot(&g[r * t..(r + 1) * t], &tz.data[r * t..(r + 1) * t]);
                    }
                }
                if let Some(s) = self.slot(grads, *z) {
                    for r in 0..f {
                        let wr = tw.data[r];
                        for (s, gv) in s[r * t..(r + 1) * t].iter_mut().zip(&g[r * t..(r + 1) * t]) {
                            *s += wr * gv;
                        }
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                inv_norms,
                sim,
                norm_a_sq,
                norm_b_sq,
            } => {
                if *inv_norms == 0.0 {
                    return;
                }
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let g0 = g[0] as f64;
                // d sim / d a = b / (|a||b|) - sim * a / |a|^2
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &x), &y) in s.iter_mut().zip(va).zip(vb) {
                        *s += (g0 * (y as f64 * inv_norms - sim * x as f64 / norm_a_sq)) as f32;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, &x), &y) in s.iter_mut().zip(va).zip(vb) {
                        *s += (g0 * (x as f64 * inv_norms - sim * y as f64 / norm_b_sq)) as f32;
                    }
                }
            }
            Op::CrossEntropy {
                scores,
                temperature,
                target,
                probs,
            } => {
                if let Some(s) = self.slot(grads, *scores) {
                    for (j, (s, p)) in s.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *s += g[0] * (p - onehot) / temperature;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[offset..offset + n]).for_each(|(s, g)| *s += g);
                    }
                    offset += n;
                }
            }
            Op::Index(a, i) => {
                if let Some(s) = self.slot(grads, *a) {
                    s[*i] += g[0];
                }
            }
        }
    }
}

/// Output indices `lo..hi` whose tap `j` reads inside `0..t`.
fn valid_range(t: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (t + pad).saturating_sub(j).min(t);
    (lo, hi.max(lo))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}
