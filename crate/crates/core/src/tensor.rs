//! Dense math shared by every network: a three-layer perceptron with a
//! softmax or sigmoid head, the matching losses, plain SGD and a central
//! finite-difference checker.
//!
//! Row-vector convention: `hidden = relu(x · W1 + b1)`, `logits = hidden · W2 + b2`.
//! `backward` takes the gradient of the loss with respect to the logits, which
//! is what the loss helpers below return.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

/// Probability clamp used by the log losses.
pub const LOG_EPS: f64 = 1e-12;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub head: Head,
    // bumped on every parameter update so stale caches are caught
    generation: u64,
}

impl PartialEq for Mlp3 {
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head
            && self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
    }
}

/// Activations kept from a single-sample forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vector,
    pub pre_hidden: Vector,
    pub hidden: Vector,
    pub logits: Vector,
    generation: u64,
}

/// Activations kept from a batched forward pass (one row per sample).
#[derive(Clone, Debug)]
pub struct BatchCache {
    pub input: Matrix,
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
    generation: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3Grads {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl Mlp3Grads {
    pub fn zeros_like(net: &Mlp3) -> Self {
        Self {
            w1: Matrix::zeros(net.w1.raw_dim()),
            b1: Vector::zeros(net.b1.len()),
            w2: Matrix::zeros(net.w2.raw_dim()),
            b2: Vector::zeros(net.b2.len()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        (self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .map(|g| g * g)
            .sum::<f64>())
        .sqrt()
    }

    /// Rescales so the norm is at most `max`.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if n > max {
            self.scale(max / n);
        }
    }

    pub fn add_assign(&mut self, other: &Mlp3Grads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    /// Flattened in the same order as [`Mlp3::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

impl Mlp3 {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_h: usize,
        d_out: usize,
        head: Head,
        rng: &mut R,
    ) -> Self {
        let init = |rows: usize, cols: usize, rng: &mut R| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
        };
        let w1 = init(d_in, d_h, rng);
        let w2 = init(d_h, d_out, rng);
        Self::from_parts(w1, Vector::zeros(d_h), w2, Vector::zeros(d_out), head)
            .expect("shapes built consistently")
    }

    pub fn zeros(d_in: usize, d_h: usize, d_out: usize, head: Head) -> Self {
        Self::from_parts(
            Matrix::zeros((d_in, d_h)),
            Vector::zeros(d_h),
            Matrix::zeros((d_h, d_out)),
            Vector::zeros(d_out),
            head,
        )
        .expect("shapes built consistently")
    }

    pub fn from_parts(w1: Matrix, b1: Vector, w2: Matrix, b2: Vector, head: Head) -> Result<Self> {
        let (d_in, d_h) = w1.dim();
        if d_in == 0 || d_h == 0 || w2.ncols() == 0 {
            return Err(Error::shape(
                "positive dimensions",
                format!("{:?} / {:?}", w1.dim(), w2.dim()),
            ));
        }
        if b1.len() != d_h || w2.nrows() != d_h || b2.len() != w2.ncols() {
            return Err(Error::shape(
                format!("chain {d_in}->{d_h}->{}", w2.ncols()),
                format!("b1 {}, w2 {:?}, b2 {}", b1.len(), w2.dim(), b2.len()),
            ));
        }
        let all_finite = w1
            .iter()
            .chain(b1.iter())
            .chain(w2.iter())
            .chain(b2.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            head,
            generation: next_generation(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::shape(
                format!("input of length {}", self.d_in()),
                x.len(),
            ));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Pre-head outputs for a single input.
    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        self.check_input(x.view())?;
        let mut h = affine(x, &self.w1, &self.b1);
        h.mapv_inplace(relu);
        Ok(affine(&h, &self.w2, &self.b2))
    }

    pub fn forward(&self, x: &Vector) -> Result<(Vector, ForwardCache)> {
        self.check_input(x.view())?;
        let pre_hidden = affine(x, &self.w1, &self.b1);
        let hidden = pre_hidden.mapv(relu);
        let logits = affine(&hidden, &self.w2, &self.b2);
        let output = apply_head(self.head, &logits)?;
        Ok((
            output,
            ForwardCache {
                input: x.clone(),
                pre_hidden,
                hidden,
                logits,
                generation: self.generation,
            },
        ))
    }

    /// Forward pass over a batch, one sample per row.
    pub fn forward_batch(&self, xs: &Matrix) -> Result<(Matrix, BatchCache)> {
        if xs.ncols() != self.d_in() {
            return Err(Error::shape(
                format!("{} input columns", self.d_in()),
                xs.ncols(),
            ));
        }
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let pre_hidden = xs.dot(&self.w1) + &self.b1;
        let hidden = pre_hidden.mapv(relu);
        let logits = hidden.dot(&self.w2) + &self.b2;
        let mut output = logits.clone();
        for mut row in output.rows_mut() {
            let y = apply_head(self.head, &row.to_owned())?;
            row.assign(&y);
        }
        Ok((
            output,
            BatchCache {
                input: xs.clone(),
                pre_hidden,
                hidden,
                logits,
                generation: self.generation,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, d_logits: &Vector) -> Result<Mlp3Grads> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if d_logits.len() != self.d_out() {
            return Err(Error::shape(
                format!("upstream gradient of length {}", self.d_out()),
                d_logits.len(),
            ));
        }
        let w2 = outer(&cache.hidden, d_logits);
        let mut d_hidden = self.w2.dot(d_logits);
        d_hidden.zip_mut_with(&cache.pre_hidden, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = outer(&cache.input, &d_hidden);
        Ok(Mlp3Grads {
            w1,
            b1: d_hidden,
            w2,
            b2: d_logits.clone(),
        })
    }

    /// Gradients summed over the batch rows.
    pub fn backward_batch(&self, cache: &BatchCache, d_logits: &Matrix) -> Result<Mlp3Grads> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if d_logits.dim() != cache.logits.dim() {
            return Err(Error::shape(
                format!("{:?}", cache.logits.dim()),
                format!("{:?}", d_logits.dim()),
            ));
        }
        let w2 = cache.hidden.t().dot(d_logits);
        let b2 = d_logits.sum_axis(Axis(0));
        let mut d_hidden = d_logits.dot(&self.w2.t());
        d_hidden.zip_mut_with(&cache.pre_hidden, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = cache.input.t().dot(&d_hidden);
        let b1 = d_hidden.sum_axis(Axis(0));
        Ok(Mlp3Grads { w1, b1, w2, b2 })
    }

    /// `p ← p − lr · g` on every parameter.
    pub fn apply_sgd(&mut self, grads: &Mlp3Grads, lr: f64) -> Result<()> {
        if grads.w1.dim() != self.w1.dim()
            || grads.b1.len() != self.b1.len()
            || grads.w2.dim() != self.w2.dim()
            || grads.b2.len() != self.b2.len()
        {
            return Err(Error::shape(
                "gradients shaped like the network",
                "mismatched gradients",
            ));
        }
        check_lr(lr)?;
        let mut next = self.clone();
        next.w1.scaled_add(-lr, &grads.w1);
        next.b1.scaled_add(-lr, &grads.b1);
        next.w2.scaled_add(-lr, &grads.w2);
        next.b2.scaled_add(-lr, &grads.b2);
        let finite = next
            .w1
            .iter()
            .chain(next.b1.iter())
            .chain(next.w2.iter())
            .chain(next.b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("network parameters after update"));
        }
        next.generation = next_generation();
        *self = next;
        Ok(())
    }

    /// Parameters flattened as `w1 (row-major) ‖ b1 ‖ w2 (row-major) ‖ b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    /// Inverse of [`Mlp3::to_flat`] for a network of this shape.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(self.n_params(), flat.len()));
        }
        let (d_in, d_h, d_out) = (self.d_in(), self.d_hidden(), self.d_out());
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s.to_vec()
        };
        let w1 = Matrix::from_shape_vec((d_in, d_h), take(d_in * d_h)).expect("sized");
        let b1 = Vector::from(take(d_h));
        let w2 = Matrix::from_shape_vec((d_h, d_out), take(d_h * d_out)).expect("sized");
        let b2 = Vector::from(take(d_out));
        Self::from_parts(w1, b1, w2, b2, self.head)
    }
}

#[inline]
/// `x·W + b`, accumulated row by row so `W` is read contiguously.
fn affine(x: &Vector, w: &Matrix, b: &Vector) -> Vector {
    let mut out = b.clone();
    for (&xi, row) in x.iter().zip(w.rows()) {
        if xi != 0.0 {
            out.scaled_add(xi, &row);
        }
    }
    out
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn outer(a: &Vector, b: &Vector) -> Matrix {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn apply_head(head: Head, logits: &Vector) -> Result<Vector> {
    match head {
        Head::Softmax => softmax(logits),
        Head::Sigmoid => Ok(logits.mapv(sigmoid)),
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &Vector) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let z = out.sum();
    out /= z;
    Ok(out)
}

/// `log softmax` via log-sum-exp.
pub fn log_softmax(logits: &Vector) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.mapv(|v| v - lse))
}

/// `−log probs[target]`, with the probability clamped at [`LOG_EPS`].
pub fn cross_entropy_softmax(probs: &Vector, target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or(Error::OutOfRange {
        index: target,
        len: probs.len(),
    })?;
    Ok(-p.max(LOG_EPS).ln())
}

/// Gradient of softmax cross-entropy with respect to the logits: `probs − onehot`.
pub fn cross_entropy_softmax_grad(probs: &Vector, target: usize) -> Result<Vector> {
    if target >= probs.len() {
        return Err(Error::OutOfRange {
            index: target,
            len: probs.len(),
        });
    }
    let mut g = probs.clone();
    g[target] -= 1.0;
    Ok(g)
}

pub fn binary_cross_entropy(p: f64, y: bool) -> f64 {
    let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Gradient of the sigmoid-head BCE with respect to the logit: `p − y`.
pub fn binary_cross_entropy_grad(p: f64, y: bool) -> f64 {
    p - if y { 1.0 } else { 0.0 }
}

/// Elementwise `p ← p − lr · g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(params.len(), grads.len()));
    }
    check_lr(lr)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares analytic gradients with central differences.
///
/// Returns `max_i |fd_i − an_i| / max(1, |fd_i|, |an_i|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(params.len(), analytic.len()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {h}"
        )));
    }
    let first = f(params);
    let second = f(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic[i];
        let err = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
