//! Fully connected feed-forward networks with hand-written backpropagation.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases. Hidden layers apply the
//! configured activation; the last layer emits raw logits.
//!
//! Besides the usual loss gradient this module exposes two vector-Jacobian
//! products used by the distillation protocols:
//!
//! * [`backprop_output_grads`]: `sum_s d<pbar_s, softmax(z_s / T)>/dw`
//! * [`backprop_jacobian_grads`]: `sum_s d<E_s, J_s>/dw`, where `J_s` is the
//!   input Jacobian of the temperature softmax. This one differentiates
//!   through a forward-mode tangent pass, so it needs second derivatives of
//!   the activation.

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Sigmoid => sigmoid(a),
        }
    }

    #[inline]
    fn d1(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }

    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Layer widths `[d, h_1, ..., L]` plus the hidden activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    inp: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = ModelSpec { layer_widths, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(invalid("layer_widths needs at least an input and an output width"));
        }
        if self.layer_widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.output_dim() < 2 {
            return Err(invalid("output width must be at least 2"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Same architecture with every hidden layer resized to `width`.
    pub fn with_hidden_width(&self, width: usize) -> ModelSpec {
        let n = self.layer_widths.len();
        let layer_widths = self
            .layer_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| if i == 0 || i == n - 1 { w } else { width })
            .collect();
        ModelSpec { layer_widths, activation: self.activation }
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape { inp: w[0], out: w[1], w_off: off, b_off: off + w[0] * w[1] };
                off += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }
}

/// Flat parameter vector tied to the architecture it parameterizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.param_count(), values.len())?;
        Ok(ParamVector { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let n = spec.param_count();
        ParamVector { spec, values: vec![0.0; n] }
    }

    /// Uniform fan-based initialization, biases zero.
    pub fn glorot<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Self {
        let mut values = vec![0.0; spec.param_count()];
        for layer in spec.layers() {
            let limit = (6.0 / (layer.inp + layer.out) as f64).sqrt();
            for v in &mut values[layer.w_off..layer.b_off] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        ParamVector { spec, values }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pre-activation network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl Deref for LogitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major `n x d` inputs with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if dim == 0 {
            return Err(invalid("batch input dimension must be positive"));
        }
        check_dim(labels.len() * dim, inputs.len())?;
        Ok(Batch { inputs, dim, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("batch"))?;
        check_dim(rows.len(), labels.len())?;
        let mut inputs = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            inputs.extend_from_slice(r);
        }
        Batch::new(inputs, dim, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        check_dim(spec.input_dim(), self.dim)?;
        let l = spec.output_dim();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= l) {
            return Err(invalid(format!("label {bad} outside [0, {l})")));
        }
        Ok(())
    }
}

/// Per-label table of averaged vectors. Labels with no contributing samples
/// are absent rather than zero-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    row_len: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl LabelTable {
    pub fn empty(label_count: usize, row_len: usize) -> Self {
        LabelTable { row_len, rows: vec![None; label_count] }
    }

    pub fn from_rows(rows: Vec<Option<Vec<f64>>>, row_len: usize) -> Result<Self> {
        for r in rows.iter().flatten() {
            check_dim(row_len, r.len())?;
        }
        Ok(LabelTable { row_len, rows })
    }

    pub fn label_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn row(&self, label: usize) -> Option<&[f64]> {
        self.rows.get(label).and_then(|r| r.as_deref())
    }

    pub fn set_row(&mut self, label: usize, row: Option<Vec<f64>>) -> Result<()> {
        if let Some(r) = &row {
            check_dim(self.row_len, r.len())?;
        }
        self.rows[label] = row;
        Ok(())
    }

    pub fn rows(&self) -> &[Option<Vec<f64>>] {
        &self.rows
    }

    pub fn present_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    /// Scalars carried by the present rows.
    pub fn element_count(&self) -> usize {
        self.present_count() * self.row_len
    }

    pub fn present_values(&self) -> impl Iterator<Item = &f64> {
        self.rows.iter().flatten().flat_map(|r| r.iter())
    }

    pub fn present_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.rows.iter_mut().flatten().flat_map(|r| r.iter_mut())
    }

    /// Mean over samples grouped by label.
    pub fn group_mean<'a>(
        label_count: usize,
        row_len: usize,
        items: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) -> Result<Self> {
        let mut sums = vec![vec![0.0; row_len]; label_count];
        let mut counts = vec![0usize; label_count];
        for (label, v) in items {
            check_dim(row_len, v.len())?;
            if label >= label_count {
                return Err(invalid(format!("label {label} outside [0, {label_count})")));
            }
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(v) {
                *s += x;
            }
        }
        let rows = sums
            .into_iter()
            .zip(counts)
            .map(|(mut s, c)| {
                (c > 0).then(|| {
                    let c = c as f64;
                    s.iter_mut().for_each(|x| *x /= c);
                    s
                })
            })
            .collect();
        Ok(LabelTable { row_len, rows })
    }
}

// ---------------------------------------------------------------------------
// Kernels over (spec, flat weights).

struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (activated for hidden layers, raw logits for the last).
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward_trace(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Trace {
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pre = Vec::with_capacity(layers.len());
    acts.push(x.to_vec());
    for (l, shape) in layers.iter().enumerate() {
        let input = &acts[l];
        let mut a = w[shape.b_off..shape.b_off + shape.out].to_vec();
        for (o, ao) in a.iter_mut().enumerate() {
            let row = &w[shape.w_off + o * shape.inp..shape.w_off + (o + 1) * shape.inp];
            *ao += row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
        let h = if l == last { a.clone() } else { a.iter().map(|&v| spec.activation.apply(v)).collect() };
        pre.push(a);
        acts.push(h);
    }
    Trace { acts, pre }
}

/// Accumulates `scale * d<zbar, z>/dw` into `grad`.
fn backprop(spec: &ModelSpec, w: &[f64], trace: &Trace, zbar: &[f64], scale: f64, grad: &mut [f64]) {
    let layers = spec.layers();
    let mut abar: Vec<f64> = zbar.iter().map(|v| v * scale).collect();
    for (l, shape) in layers.iter().enumerate().rev() {
        let input = &trace.acts[l];
        for o in 0..shape.out {
            let g = abar[o];
            if g != 0.0 {
                let row = &mut grad[shape.w_off + o * shape.inp..shape.w_off + (o + 1) * shape.inp];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += g * xi;
                }
            }
            grad[shape.b_off + o] += g;
        }
        if l > 0 {
            let prev_pre = &trace.pre[l - 1];
            let mut hbar = vec![0.0; shape.inp];
            for (o, &g) in abar.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &w[shape.w_off + o * shape.inp..shape.w_off + (o + 1) * shape.inp];
                for (hb, wi) in hbar.iter_mut().zip(row) {
                    *hb += g * wi;
                }
            }
            abar = hbar.iter().zip(prev_pre).map(|(hb, &a)| hb * spec.activation.d1(a)).collect();
        }
    }
}

fn softmax_unchecked(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - m) / t).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// `dz` for a given `dp` through `p = softmax(z / t)`.
fn softmax_vjp(p: &[f64], pbar: &[f64], t: f64) -> Vec<f64> {
    let dot: f64 = p.iter().zip(pbar).map(|(a, b)| a * b).sum();
    p.iter().zip(pbar).map(|(pi, bi)| pi * (bi - dot) / t).collect()
}

struct JacTrace {
    trace: Trace,
    /// `u[l]`: `out x d` tangent of layer `l`'s pre-activation.
    u: Vec<Vec<f64>>,
    /// `tan[l]`: `width_l x d` tangent of `acts[l]`; `tan[0]` is the identity.
    tan: Vec<Vec<f64>>,
}

fn jacobian_trace(spec: &ModelSpec, w: &[f64], x: &[f64]) -> JacTrace {
    let trace = forward_trace(spec, w, x);
    let layers = spec.layers();
    let d = spec.input_dim();
    let mut tan = Vec::with_capacity(layers.len());
    let mut eye = vec![0.0; d * d];
    for k in 0..d {
        eye[k * d + k] = 1.0;
    }
    tan.push(eye);
    let mut u = Vec::with_capacity(layers.len());
    for (l, shape) in layers.iter().enumerate() {
        let t_in = &tan[l];
        let mut ul = vec![0.0; shape.out * d];
        for o in 0..shape.out {
            let row = &w[shape.w_off + o * shape.inp..shape.w_off + (o + 1) * shape.inp];
            let dst = &mut ul[o * d..(o + 1) * d];
            for (i, &wi) in row.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                for (dk, tk) in dst.iter_mut().zip(&t_in[i * d..(i + 1) * d]) {
                    *dk += wi * tk;
                }
            }
        }
        if l + 1 < layers.len() {
            let mut t = ul.clone();
            for o in 0..shape.out {
                let s = spec.activation.d1(trace.pre[l][o]);
                t[o * d..(o + 1) * d].iter_mut().for_each(|v| *v *= s);
            }
            tan.push(t);
        }
        u.push(ul);
    }
    JacTrace { trace, u, tan }
}

/// Input Jacobian (`L x d`, row-major) from a trace; `t = None` gives the raw
/// logit Jacobian, `Some(T)` the temperature-softmax Jacobian.
fn jacobian_from_trace(spec: &ModelSpec, jt: &JacTrace, t: Option<f64>) -> Vec<f64> {
    let d = spec.input_dim();
    let ul = jt.u.last().expect("at least one layer");
    match t {
        None => ul.clone(),
        Some(t) => {
            let z = jt.trace.acts.last().expect("trace has output");
            let p = softmax_unchecked(z, t);
            let l = p.len();
            let mut mix = vec![0.0; d];
            for j in 0..l {
                for k in 0..d {
                    mix[k] += p[j] * ul[j * d + k];
                }
            }
            let mut jac = vec![0.0; l * d];
            for i in 0..l {
                for k in 0..d {
                    jac[i * d + k] = p[i] * (ul[i * d + k] - mix[k]) / t;
                }
            }
            jac
        }
    }
}

/// Accumulates `scale * d<ebar, J>/dw` into `grad`.
fn jacobian_vjp(
    spec: &ModelSpec,
    w: &[f64],
    jt: &JacTrace,
    t: Option<f64>,
    ebar: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let layers = spec.layers();
    let d = spec.input_dim();
    let last = layers.len() - 1;
    let ul = &jt.u[last];
    let lw = layers[last].out;

    let (mut ubar, mut abar) = match t {
        None => (ebar.iter().map(|v| v * scale).collect::<Vec<_>>(), vec![0.0; lw]),
        Some(t) => {
            let z = jt.trace.acts.last().expect("trace has output");
            let p = softmax_unchecked(z, t);
            // ubar = S E with S = (diag p - p p^T) / T
            let mut pe = vec![0.0; d];
            for j in 0..lw {
                for k in 0..d {
                    pe[k] += p[j] * ebar[j * d + k];
                }
            }
            let mut ubar = vec![0.0; lw * d];
            for i in 0..lw {
                for k in 0..d {
                    ubar[i * d + k] = scale * p[i] * (ebar[i * d + k] - pe[k]) / t;
                }
            }
            // sbar = E U^T, then pbar from dS/dp
            let mut sbar = vec![0.0; lw * lw];
            for i in 0..lw {
                for j in 0..lw {
                    sbar[i * lw + j] =
                        (0..d).map(|k| ebar[i * d + k] * ul[j * d + k]).sum::<f64>();
                }
            }
            let mut pbar = vec![0.0; lw];
            for i in 0..lw {
                let mut row = 0.0;
                let mut col = 0.0;
                for j in 0..lw {
                    row += sbar[i * lw + j] * p[j];
                    col += sbar[j * lw + i] * p[j];
                }
                pbar[i] = scale * (sbar[i * lw + i] - row - col) / t;
            }
            (ubar, softmax_vjp(&p, &pbar, t))
        }
    };

    for (l, shape) in layers.iter().enumerate().rev() {
        let t_in = &jt.tan[l];
        let h_in = &jt.trace.acts[l];
        for o in 0..shape.out {
            let urow = &ubar[o * d..(o + 1) * d];
            let g = abar[o];
            for i in 0..shape.inp {
                let tin = &t_in[i * d..(i + 1) * d];
                let dot: f64 = urow.iter().zip(tin).map(|(a, b)| a * b).sum();
                grad[shape.w_off + o * shape.inp + i] += dot + g * h_in[i];
            }
            grad[shape.b_off + o] += g;
        }
        if l == 0 {
            break;
        }
        let mut tbar = vec![0.0; shape.inp * d];
        let mut hbar = vec![0.0; shape.inp];
        for o in 0..shape.out {
            let row = &w[shape.w_off + o * shape.inp..shape.w_off + (o + 1) * shape.inp];
            let urow = &ubar[o * d..(o + 1) * d];
            let g = abar[o];
            for (i, &wi) in row.iter().enumerate() {
                hbar[i] += wi * g;
                for (tb, uo) in tbar[i * d..(i + 1) * d].iter_mut().zip(urow) {
                    *tb += wi * uo;
                }
            }
        }
        let prev_pre = &jt.trace.pre[l - 1];
        let prev_u = &jt.u[l - 1];
        let mut next_ubar = vec![0.0; shape.inp * d];
        let mut next_abar = vec![0.0; shape.inp];
        for i in 0..shape.inp {
            let a = prev_pre[i];
            let d1 = spec.activation.d1(a);
            let d2 = spec.activation.d2(a);
            let tb = &tbar[i * d..(i + 1) * d];
            for (nu, t) in next_ubar[i * d..(i + 1) * d].iter_mut().zip(tb) {
                *nu = d1 * t;
            }
            let curv: f64 = tb.iter().zip(&prev_u[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
            next_abar[i] = hbar[i] * d1 + d2 * curv;
        }
        ubar = next_ubar;
        abar = next_abar;
    }
}

// ---------------------------------------------------------------------------
// Public operations.

pub fn forward(params: &ParamVector, x: &[f64]) -> Result<LogitVector> {
    check_dim(params.spec.input_dim(), x.len())?;
    Ok(LogitVector(forward_raw(&params.spec, &params.values, x)))
}

pub(crate) fn forward_raw(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    forward_trace(spec, w, x).acts.pop().expect("trace has output")
}

/// `exp(z_i / T) / sum_j exp(z_j / T)`, evaluated with max subtraction.
pub fn softmax_temperature(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("temperature must be positive and finite, got {t}")));
    }
    if z.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(softmax_unchecked(z, t))
}

/// Mean cross-entropy of `softmax(z)` and its parameter gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    batch.check_against(&params.spec)?;
    let (loss, grad) = loss_grad_raw(&params.spec, &params.values, batch);
    Ok((loss, ParamVector { spec: params.spec.clone(), values: grad }))
}

pub(crate) fn loss_grad_raw(spec: &ModelSpec, w: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for s in 0..batch.len() {
        let trace = forward_trace(spec, w, batch.input(s));
        let z = trace.acts.last().expect("trace has output");
        let mut p = softmax_unchecked(z, 1.0);
        let y = batch.label(s);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        p[y] -= 1.0;
        backprop(spec, w, &trace, &p, 1.0 / n, &mut grad);
    }
    (loss / n, grad)
}

pub(crate) fn loss_raw(spec: &ModelSpec, w: &[f64], batch: &Batch) -> f64 {
    let mut loss = 0.0;
    for s in 0..batch.len() {
        let z = forward_raw(spec, w, batch.input(s));
        let p = softmax_unchecked(&z, 1.0);
        loss -= p[batch.label(s)].max(f64::MIN_POSITIVE).ln();
    }
    loss / batch.len() as f64
}

/// Mean cross-entropy and accuracy.
pub fn evaluate(params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
    batch.check_against(&params.spec)?;
    Ok(evaluate_raw(&params.spec, &params.values, batch))
}

pub(crate) fn evaluate_raw(spec: &ModelSpec, w: &[f64], batch: &Batch) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in 0..batch.len() {
        let z = forward_raw(spec, w, batch.input(s));
        let p = softmax_unchecked(&z, 1.0);
        let y = batch.label(s);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let arg = argmax(&z);
        if arg == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    (loss / n, correct as f64 / n)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `params - eta * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.spec != grad.spec {
        return Err(invalid("gradient was computed for a different architecture"));
    }
    check_dim(params.len(), grad.len())?;
    if !(eta >= 0.0) {
        return Err(invalid(format!("learning rate must be nonnegative, got {eta}")));
    }
    let values = params.values.iter().zip(&grad.values).map(|(w, g)| w - eta * g).collect();
    Ok(ParamVector { spec: params.spec.clone(), values })
}

/// Per-label mean of `softmax(z / T)` over the batch.
pub fn logit_table(params: &ParamVector, batch: &Batch, t: f64) -> Result<LabelTable> {
    batch.check_against(&params.spec)?;
    let probs = softmax_outputs(params, batch, t)?;
    let l = params.spec.output_dim();
    LabelTable::group_mean(l, l, batch.labels().iter().copied().zip(probs.iter().map(Vec::as_slice)))
}

/// Input Jacobian of the logits (`t = None`) or of the temperature softmax,
/// `L x d` row-major.
pub fn input_jacobian(params: &ParamVector, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
    check_dim(params.spec.input_dim(), x.len())?;
    if let Some(t) = t {
        if !(t > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {t}")));
        }
    }
    let jt = jacobian_trace(&params.spec, &params.values, x);
    Ok(jacobian_from_trace(&params.spec, &jt, t))
}

/// Per-label mean of the softmax input Jacobian, rows of length `L * d`.
pub fn input_jacobian_table(params: &ParamVector, batch: &Batch, t: f64) -> Result<LabelTable> {
    batch.check_against(&params.spec)?;
    let jacs = jacobian_outputs(params, batch, t)?;
    let l = params.spec.output_dim();
    let d = params.spec.input_dim();
    LabelTable::group_mean(l, l * d, batch.labels().iter().copied().zip(jacs.iter().map(Vec::as_slice)))
}

/// Per-sample `softmax(z / T)`.
pub fn softmax_outputs(params: &ParamVector, batch: &Batch, t: f64) -> Result<Vec<Vec<f64>>> {
    batch.check_against(&params.spec)?;
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    Ok((0..batch.len())
        .map(|s| softmax_unchecked(&forward_raw(&params.spec, &params.values, batch.input(s)), t))
        .collect())
}

/// Per-sample softmax input Jacobians, `L x d` row-major.
pub fn jacobian_outputs(params: &ParamVector, batch: &Batch, t: f64) -> Result<Vec<Vec<f64>>> {
    batch.check_against(&params.spec)?;
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    Ok((0..batch.len())
        .map(|s| {
            let jt = jacobian_trace(&params.spec, &params.values, batch.input(s));
            jacobian_from_trace(&params.spec, &jt, Some(t))
        })
        .collect())
}

/// `sum_s d<pbar_s, softmax(z_s / T)>/dw`.
pub fn backprop_output_grads(
    params: &ParamVector,
    batch: &Batch,
    t: f64,
    pbars: &[Vec<f64>],
) -> Result<ParamVector> {
    batch.check_against(&params.spec)?;
    check_dim(batch.len(), pbars.len())?;
    let spec = &params.spec;
    let mut grad = vec![0.0; params.len()];
    for (s, pbar) in pbars.iter().enumerate() {
        check_dim(spec.output_dim(), pbar.len())?;
        if pbar.iter().all(|v| *v == 0.0) {
            continue;
        }
        let trace = forward_trace(spec, &params.values, batch.input(s));
        let p = softmax_unchecked(trace.acts.last().expect("output"), t);
        let zbar = softmax_vjp(&p, pbar, t);
        backprop(spec, &params.values, &trace, &zbar, 1.0, &mut grad);
    }
    Ok(ParamVector { spec: spec.clone(), values: grad })
}

/// `sum_s d<E_s, J_s>/dw` with `J_s` the temperature-softmax input Jacobian
/// (or the raw logit Jacobian when `t` is `None`).
pub fn backprop_jacobian_grads(
    params: &ParamVector,
    batch: &Batch,
    t: Option<f64>,
    ebars: &[Vec<f64>],
) -> Result<ParamVector> {
    batch.check_against(&params.spec)?;
    check_dim(batch.len(), ebars.len())?;
    let spec = &params.spec;
    let size = spec.output_dim() * spec.input_dim();
    let mut grad = vec![0.0; params.len()];
    for (s, ebar) in ebars.iter().enumerate() {
        check_dim(size, ebar.len())?;
        if ebar.iter().all(|v| *v == 0.0) {
            continue;
        }
        let jt = jacobian_trace(spec, &params.values, batch.input(s));
        jacobian_vjp(spec, &params.values, &jt, t, ebar, 1.0, &mut grad);
    }
    Ok(ParamVector { spec: spec.clone(), values: grad })
}
