//! Dense networks with exact backpropagation, softmax, Adam, and a central
//! finite-difference gradient oracle.
//!
//! Everything is `f64`. Weight blocks are stored `[fan_in, fan_out]`
//! row-major, so the forward pass of a row is a sequence of axpy updates over
//! contiguous memory.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named block of trainable parameters with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamBlock { name: name.into(), shape, values: vec![0.0; n], grads: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_consistent(&self) -> bool {
        let n: usize = self.shape.iter().product();
        n == self.values.len() && n == self.grads.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: Activation::Tanh,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!("MLP dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn check_params(&self, params: &[ParamBlock]) -> Result<()> {
        let dims = self.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::config(format!(
                "expected {} parameter blocks, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            if w.shape != [fan_in, fan_out] || b.shape != [fan_out] || !w.is_consistent() || !b.is_consistent() {
                return Err(Error::config(format!(
                    "layer {l}: expected weight [{fan_in}, {fan_out}] and bias [{fan_out}], got {:?} and {:?}",
                    w.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// How to initialise a freshly built network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    ScaledUniform,
    /// Like `ScaledUniform`, but the output layer is all zeros.
    ZeroOutput,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activation: Activation,
    /// `layer_inputs[l]` is the input to dense layer `l`; the last entry is the output.
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.layer_inputs.last().expect("cache holds at least input and output")
    }

    pub fn batch_size(&self) -> usize {
        self.output().rows()
    }
}

/// Dense forward pass. The output layer is linear.
pub fn mlp_forward(spec: &MlpSpec, params: &[ParamBlock], input: &Matrix) -> Result<(Matrix, ForwardCache)> {
    spec.check_params(params)?;
    if input.cols() != spec.input_dim {
        return Err(Error::config(format!(
            "input has {} columns, network expects {}",
            input.cols(),
            spec.input_dim
        )));
    }
    if !input.is_finite() {
        return Err(Error::numeric("non-finite network input"));
    }
    let dims = spec.layer_dims();
    let batch = input.rows();
    let mut layer_inputs = Vec::with_capacity(dims.len() + 1);
    let mut pre_activations = Vec::with_capacity(dims.len() - 1);
    layer_inputs.push(input.clone());
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params[2 * l].values;
        let b = &params[2 * l + 1].values;
        let x = layer_inputs.last().unwrap();
        let mut z = Matrix::zeros(batch, fan_out);
        for r in 0..batch {
            let xr = x.row(r);
            let zr = z.row_mut(r);
            zr.copy_from_slice(b);
            for (i, &xi) in xr.iter().enumerate().take(fan_in) {
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * fan_out..(i + 1) * fan_out];
                for (zj, &wij) in zr.iter_mut().zip(wi) {
                    *zj += xi * wij;
                }
            }
        }
        if l + 1 < dims.len() {
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = spec.hidden_activation.apply(*v));
            pre_activations.push(z);
            layer_inputs.push(a);
        } else {
            layer_inputs.push(z);
        }
    }
    let out = layer_inputs.last().unwrap().clone();
    if !out.is_finite() {
        return Err(Error::numeric("non-finite network output"));
    }
    Ok((out, ForwardCache { activation: spec.hidden_activation, layer_inputs, pre_activations }))
}

/// Backpropagates `output_grad` through the pass recorded in `cache`,
/// adding parameter gradients into `params[..].grads`. Returns the gradient
/// with respect to the network input.
pub fn mlp_backward(params: &mut [ParamBlock], cache: &ForwardCache, output_grad: &Matrix) -> Result<Matrix> {
    let n_layers = cache.layer_inputs.len() - 1;
    if params.len() != 2 * n_layers {
        return Err(Error::config("parameter blocks do not match the forward cache"));
    }
    let out = cache.output();
    if output_grad.rows() != out.rows() || output_grad.cols() != out.cols() {
        return Err(Error::config(format!(
            "output gradient is {}x{}, forward output was {}x{}",
            output_grad.rows(),
            output_grad.cols(),
            out.rows(),
            out.cols()
        )));
    }
    let batch = out.rows();
    let mut delta = output_grad.clone();
    for l in (0..n_layers).rev() {
        let x = &cache.layer_inputs[l];
        let (fan_in, fan_out) = (x.cols(), delta.cols());
        if params[2 * l].shape != [fan_in, fan_out] {
            return Err(Error::config(format!("layer {l} weight shape does not match the forward cache")));
        }
        {
            let (wb, bb) = params.split_at_mut(2 * l + 1);
            let dw = &mut wb[2 * l].grads;
            let db = &mut bb[0].grads;
            for r in 0..batch {
                let dr = delta.row(r);
                for (dbj, &d) in db.iter_mut().zip(dr) {
                    *dbj += d;
                }
                for (i, &xi) in x.row(r).iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let dwi = &mut dw[i * fan_out..(i + 1) * fan_out];
                    for (g, &d) in dwi.iter_mut().zip(dr) {
                        *g += xi * d;
                    }
                }
            }
        }
        let w = &params[2 * l].values;
        let mut dx = Matrix::zeros(batch, fan_in);
        for r in 0..batch {
            let dr = delta.row(r);
            let dxr = dx.row_mut(r);
            for (i, dxi) in dxr.iter_mut().enumerate() {
                let wi = &w[i * fan_out..(i + 1) * fan_out];
                *dxi = wi.iter().zip(dr).map(|(a, b)| a * b).sum();
            }
        }
        if l > 0 {
            let z = &cache.pre_activations[l - 1];
            for ((d, &zv), &av) in dx.data.iter_mut().zip(&z.data).zip(&x.data) {
                *d *= cache.activation.derivative(zv, av);
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<ParamBlock>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, init: Init, name: &str, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let mut params = Vec::with_capacity(2 * dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let mut w = ParamBlock::zeros(format!("{name}/w{l}"), vec![fan_in, fan_out]);
            let zero = init == Init::ZeroOutput && l + 1 == dims.len();
            if !zero {
                let bound = 1.0 / (fan_in as f64).sqrt();
                w.values.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
            params.push(w);
            params.push(ParamBlock::zeros(format!("{name}/b{l}"), vec![fan_out]));
        }
        Ok(Mlp { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<ParamBlock>) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamBlock] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.params
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        mlp_forward(&self.spec, &self.params, input)
    }

    pub fn backward(&mut self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Matrix> {
        mlp_backward(&mut self.params, cache, output_grad)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(ParamBlock::len).sum()
    }

    /// All parameter values, concatenated in block order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grads.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// A normalised probability vector over a finite action set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution(Vec<f64>);

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::config("empty distribution"));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!("not a probability vector: {probs:?}")));
        }
        Ok(ActionDistribution(probs))
    }

    pub fn uniform(n: usize) -> Self {
        ActionDistribution(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Round-off left `u` above the running total: last action with mass.
        self.0.iter().rposition(|&p| p > 0.0).unwrap_or(self.0.len() - 1)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ActionDistribution> {
    if logits.is_empty() {
        return Err(Error::config("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    Ok(ActionDistribution(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Gradient with respect to the logits, given the gradient with respect to
/// `log softmax(logits)`.
pub(crate) fn log_softmax_backward(probs: &[f64], grad_log_probs: &[f64], out: &mut [f64]) {
    let total: f64 = grad_log_probs.iter().sum();
    for ((o, &g), &p) in out.iter_mut().zip(grad_log_probs).zip(probs) {
        *o = g - p * total;
    }
}

/// Adam moments and hyperparameters for one list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with the usual defaults (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    pub fn new(blocks: &[ParamBlock], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            v: blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn matches(&self, blocks: &[ParamBlock]) -> bool {
        self.m.len() == blocks.len()
            && self.v.len() == blocks.len()
            && blocks.iter().zip(&self.m).zip(&self.v).all(|((b, m), v)| b.len() == m.len() && b.len() == v.len())
    }
}

/// One bias-corrected Adam update. Gradients are zeroed afterwards. If any
/// gradient is non-finite nothing is modified and an error is returned.
pub fn adam_step(blocks: &mut [ParamBlock], state: &mut AdamState) -> Result<()> {
    if !state.matches(blocks) {
        return Err(Error::config("optimizer state does not match parameter blocks"));
    }
    for b in blocks.iter() {
        if let Some(i) = b.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in {}[{i}]", b.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let step = state.lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for ((b, m), v) in blocks.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..b.values.len() {
            let g = b.grads[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let denom = v[i].sqrt() / bc2_sqrt + state.eps;
            b.values[i] -= step * m[i] / denom;
        }
        b.zero_grad();
    }
    Ok(())
}

/// Central differences of `loss` around `point`.
pub fn central_differences<F: FnMut(&[f64]) -> f64>(mut loss: F, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = loss(&x);
            x[i] = orig - h;
            let down = loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares `params.grads` against central differences of `loss_fn` taken
/// over `params.values`.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(loss_fn: F, params: &ParamBlock, h: f64) -> f64 {
    let numeric = central_differences(loss_fn, &params.values, h);
    max_relative_error(&params.grads, &numeric)
}
