//! Minimal differentiable numerics.
//!
//! Dense transforms, activations, inverted dropout, MSE loss, Adam and a
//! central-difference gradient checker. Everything runs in `f64`; the layer
//! and model code builds on the row-major [`Tensor2`] and the three GEMM
//! kernels below.
//!
//! The GEMM kernels accumulate every output element over the inner dimension
//! in a fixed order, independent of how many rows are in the batch. A batched
//! forward pass therefore reproduces single-sample results bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor2::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Tensor2::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        self.expect_shape("Tensor2::add_assign", other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::dim(
                op,
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

/// Dense `d0 x d1 x d2` array, row-major. Used for a single
/// per-node input window (`T x N_n x F`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_vec(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(Error::dim(
                "Tensor3::from_vec",
                d0 * d1 * d2,
                data.len(),
            ));
        }
        Ok(Self {
            dims: [d0, d1, d2],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k] = value;
    }

    /// The `d1 x d2` slab at index `i` of the first axis.
    pub fn slab(&self, i: usize) -> Tensor2 {
        let n = self.dims[1] * self.dims[2];
        Tensor2 {
            rows: self.dims[1],
            cols: self.dims[2],
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM kernels. Slices are row-major; dimensions are trusted (callers check).
// ---------------------------------------------------------------------------

/// `out += A * B` for strided row-major views; `(rows, cols)` strides per
/// operand.
#[allow(clippy::too_many_arguments)]
fn gemm(out: &mut [f64], a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the asserted bounds cover every element dgemm touches, and
    // `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert!(out.len() == m * n && a.len() == m * k && b.len() == k * n, "gemm_acc shape");
    gemm(out, a, (k, 1), b, (n, 1), m, k, n);
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub(crate) fn gemm_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert!(out.len() == k * n && a.len() == m * k && b.len() == m * n, "gemm_at_b_acc shape");
    gemm(out, a, (1, k), b, (n, 1), k, m, n);
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
pub(crate) fn gemm_a_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    assert!(out.len() == m * k && a.len() == m * n && b.len() == k * n, "gemm_a_bt_acc shape");
    gemm(out, a, (n, 1), b, (1, n), m, n, k);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorise without reassociating
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Adds the row vector `bias` to every row of `out`.
pub(crate) fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of `g[m x n]` accumulated into `out[n]`.
pub(crate) fn col_sum_acc(out: &mut [f64], g: &[f64]) {
    let n = out.len();
    for row in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{} rows on the right", a.cols),
            b.rows,
        ));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    gemm_acc(&mut out.data, &a.data, &b.data, a.rows, a.cols, b.cols);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// `x W + b`, batched over the rows of `x`.
pub fn dense_forward(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if x.cols != w.rows {
        return Err(Error::dim("dense_forward", format!("{} input columns", w.rows), x.cols));
    }
    if b.len() != w.cols {
        return Err(Error::dim("dense_forward", format!("bias of {}", w.cols), b.len()));
    }
    let mut out = Tensor2::zeros(x.rows, w.cols);
    add_row_bias(&mut out.data, b);
    gemm_acc(&mut out.data, &x.data, &w.data, x.rows, x.cols, w.cols);
    Ok(out)
}

/// Gradients of [`dense_forward`]: `(dx, dW, db)`.
pub fn dense_backward(x: &Tensor2, w: &Tensor2, grad_out: &Tensor2) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    grad_out.expect_shape("dense_backward", (x.rows, w.cols))?;
    if x.cols != w.rows {
        return Err(Error::dim("dense_backward", format!("{} input columns", w.rows), x.cols));
    }
    let mut dx = Tensor2::zeros(x.rows, x.cols);
    gemm_a_bt_acc(&mut dx.data, &grad_out.data, &w.data, x.rows, w.cols, w.rows);
    let mut dw = Tensor2::zeros(w.rows, w.cols);
    gemm_at_b_acc(&mut dw.data, &x.data, &grad_out.data, x.rows, x.cols, w.cols);
    let mut db = vec![0.0; w.cols];
    col_sum_acc(&mut db, &grad_out.data);
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Elementwise nonlinearities. Leaky ReLU carries its negative-side slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu { slope: f64 },
}

/// Default negative slope for the attention LeakyReLU.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor2, kind: Activation) -> Tensor2 {
    x.map(|v| kind.apply(v))
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout mask of `len` entries: each is `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() >= rate {
                keep
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies inverted dropout. Eval mode is the identity; train mode draws a
/// mask from a generator seeded with `spec.seed`.
pub fn dropout_apply(x: &Tensor2, spec: &DropoutSpec) -> Result<Tensor2> {
    spec.validate()?;
    match spec.mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mask = dropout_mask(x.len(), spec.rate, &mut rng);
            let mut out = x.clone();
            for (o, m) in out.data.iter_mut().zip(mask) {
                *o *= m;
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error and its gradient with respect to `y_pred`.
pub fn mse_loss(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y_true.is_empty() {
        return Err(Error::Domain("mse_loss on empty input".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("mse_loss", y_true.len(), y_pred.len()));
    }
    let n = y_true.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_true.len());
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let r = p - t;
        loss += r * r;
        grad.push(2.0 * r / n);
    }
    Ok((loss / n, grad))
}

/// Derives an independent 64-bit seed from a base seed and a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor2,
    pub v: Tensor2,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, cfg: AdamConfig) -> Self {
        Self {
            m: Tensor2::zeros(rows, cols),
            v: Tensor2::zeros(rows, cols),
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn for_param(param: &Tensor2, cfg: AdamConfig) -> Self {
        Self::new(param.rows, param.cols, cfg)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Tensor2, grads: &Tensor2, state: &mut AdamState) -> Result<()> {
    grads.expect_shape("adam_step", params.shape())?;
    state.m.expect_shape("adam_step (moments)", params.shape())?;
    state.v.expect_shape("adam_step (moments)", params.shape())?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(state.m.data.iter_mut())
        .zip(state.v.data.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Returns the worst relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim("grad_check", params.len(), analytic.len()));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around parameter {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
