//! Dense tensors, the handful of layers the translation model needs, their
//! reverse-mode gradients, and a central-difference gradient checker.
//!
//! Layers keep explicit per-step caches instead of a general tape: a forward
//! call returns whatever its backward call needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Real = f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn uniform(shape: &[usize], scale: Real, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> Real {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, s: Real) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// Named-tensor traversal shared by parameters and their gradients. The
/// order is stable: it defines serialization and reduction order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn sum_sq(&self) -> Real {
        self.tensors().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    fn scale_all(&mut self, s: Real) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    fn zero_all(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
    }
}

/// `acc += other`, tensor by tensor. Both must share a layout.
pub fn accumulate<P: ParamSet>(acc: &mut P, other: &P) {
    let src = other.tensors();
    for (dst, (_, t)) in acc.tensors_mut().into_iter().zip(src) {
        dst.add_assign(t);
    }
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// y += a * x
#[inline]
pub fn axpy(a: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// y = W x (+ b)
pub fn matvec(w: &Tensor, x: &[Real], bias: Option<&[Real]>, y: &mut [Real]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), y.len());
    for (r, yr) in y.iter_mut().enumerate() {
        *yr = dot(w.row(r), x) + bias.map_or(0.0, |b| b[r]);
    }
}

/// dx += Wᵀ dy
pub fn matvec_t_acc(w: &Tensor, dy: &[Real], dx: &mut [Real]) {
    debug_assert_eq!(w.rows(), dy.len());
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, w.row(r), dx);
        }
    }
}

/// dW += dy xᵀ
pub fn outer_acc(dw: &mut Tensor, dy: &[Real], x: &[Real]) {
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, dw.row_mut(r));
        }
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[Real]) -> Vec<Real> {
    let m = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut p: Vec<Real> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: Real = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

pub fn log_softmax(logits: &[Real]) -> Vec<Real> {
    let m = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<Real>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Cross-entropy of a softmax over `logits` against `target`, with the
/// gradient `softmax - onehot`.
pub fn softmax_xent(logits: &[Real], target: usize) -> Result<(Real, Vec<Real>)> {
    if target >= logits.len() {
        return Err(Error::Range(format!("target {target} outside {} classes", logits.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::numeric("softmax logits"));
    }
    let ls = log_softmax(logits);
    let loss = -ls[target];
    let mut grad: Vec<Real> = ls.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(n: usize, p: Real, rng: &mut impl Rng) -> Vec<Real> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<Real>() < p { 0.0 } else { keep })
        .collect()
}

pub fn dropout(x: &Tensor, p: Real, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::from_vec(x.shape(), data)
}

/// One LSTM layer's weights. Gate rows are stacked in the order
/// input, forget, cell, output; columns are `[x; h_prev]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w: Tensor,
    pub b: Tensor,
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: Tensor::zeros(&[4 * hidden, input + hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform weights in `[-scale, scale]`, forget-gate bias 1.
    pub fn init(input: usize, hidden: usize, scale: Real, rng: &mut impl Rng) -> Self {
        let w = Tensor::uniform(&[4 * hidden, input + hidden], scale, rng);
        let mut b = Tensor::uniform(&[4 * hidden], scale, rng);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        LstmCellParams { w, b }
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input(&self) -> usize {
        self.w.cols() - self.hidden()
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl ParamSet for LstmCellParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.named("lstm", &mut v);
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        self.push_mut(&mut v);
        v
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub xh: Vec<Real>,
    pub c_prev: Vec<Real>,
    /// Activated gates i, f, g, o.
    pub gates: Vec<Real>,
    pub tanh_c: Vec<Real>,
}

pub fn lstm_forward(p: &LstmCellParams, x: &[Real], h_prev: &[Real], c_prev: &[Real]) -> (Vec<Real>, Vec<Real>, LstmCache) {
    let hd = p.hidden();
    let mut xh = Vec::with_capacity(x.len() + hd);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);
    let mut gates = vec![0.0; 4 * hd];
    matvec(&p.w, &xh, Some(p.b.data()), &mut gates);
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if k / hd == 2 { z.tanh() } else { sigmoid(*z) };
    }
    let mut c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    let cache = LstmCache {
        xh,
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    (h, c, cache)
}

/// Single step with a finiteness check on every gate.
pub fn lstm_cell(p: &LstmCellParams, x: &[Real], h_prev: &[Real], c_prev: &[Real]) -> Result<(Vec<Real>, Vec<Real>)> {
    if x.len() != p.input() || h_prev.len() != p.hidden() || c_prev.len() != p.hidden() {
        return Err(Error::Invalid(format!(
            "lstm cell expects input {} and state {}, got {}/{}/{}",
            p.input(),
            p.hidden(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let (h, c, cache) = lstm_forward(p, x, h_prev, c_prev);
    let hd = p.hidden();
    for (k, name) in GATE_NAMES.iter().enumerate() {
        if cache.gates[k * hd..(k + 1) * hd].iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("lstm {name} gate")));
        }
    }
    if h.iter().chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::numeric("lstm state"));
    }
    Ok((h, c))
}

/// Backward through one step. `dh`/`dc` are gradients w.r.t. this step's
/// outputs; returns gradients w.r.t. `x`, `h_prev`, `c_prev`.
pub fn lstm_backward(
    p: &LstmCellParams,
    cache: &LstmCache,
    dh: &[Real],
    dc: &[Real],
    grads: &mut LstmCellParams,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let hd = p.hidden();
    let g = &cache.gates;
    let mut da = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
        let tc = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        da[j] = dct * gg * i * (1.0 - i);
        da[hd + j] = dct * cache.c_prev[j] * f * (1.0 - f);
        da[2 * hd + j] = dct * i * (1.0 - gg * gg);
        da[3 * hd + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dct * f;
    }
    outer_acc(&mut grads.w, &da, &cache.xh);
    axpy(1.0, &da, grads.b.data_mut());
    let mut dxh = vec![0.0; cache.xh.len()];
    matvec_t_acc(&p.w, &da, &mut dxh);
    let dh_prev = dxh.split_off(cache.xh.len() - hd);
    (dxh, dh_prev, dc_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: Real,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: Real,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> Real {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, Real::max)
    }
}

/// Relative error with a 1e-6 floor on the denominator so that components
/// whose true gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `loss_and_grad`'s analytic gradient against central differences
/// on every scalar of every group.
pub fn grad_check<P, F>(params: &P, loss_and_grad: F, epsilon: Real, tolerance: Real) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: Fn(&P) -> (Real, P),
{
    let (_, analytic) = loss_and_grad(params);
    let analytic_flat: Vec<(String, Vec<Real>)> = analytic
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();

    let mut entries = Vec::new();
    for (g, (name, grad)) in analytic_flat.iter().enumerate() {
        let mut worst = (0.0, 0);
        for k in 0..grad.len() {
            let perturbed = |delta: Real| {
                let mut q = params.clone();
                q.tensors_mut()[g].data_mut()[k] += delta;
                loss_and_grad(&q).0
            };
            let numeric = (perturbed(epsilon) - perturbed(-epsilon)) / (2.0 * epsilon);
            let err = relative_error(grad[k], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, k);
            }
        }
        entries.push(GradCheckEntry {
            group: name.clone(),
            checked: grad.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 < tolerance,
        });
    }
    GradCheckReport { tolerance, entries }
}
