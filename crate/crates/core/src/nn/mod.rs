//! Fixed-topology feed-forward networks with exact reverse-mode gradients.
//!
//! Every learned object in the system (policy, critics, skill dynamics) is a
//! small multilayer perceptron over flat `f64` parameter vectors. Hidden
//! activations are rectified-linear; the output layer is affine and heads
//! apply their own squashing. Gradients come from the tape in [`tape`],
//! restricted to the primitive set the losses actually need.

pub mod dist;
pub mod gradcheck;
pub mod tape;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::{Error, Result};

/// Bounds applied to log-standard-deviation heads before exponentiation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Margin by which squashed actions are kept inside (-1, 1) before the
/// change-of-variables log term.
pub const TANH_MARGIN: f64 = 1e-6;

/// Dimensions of one affine layer: `rows` outputs, `cols` inputs, bias of
/// length `rows`. Parameters are stored flat as `[W row-major, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn param_len(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

/// Named layer dimensions of a fixed-topology network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTable {
    layers: Vec<LayerShape>,
}

impl ShapeTable {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dim("shape table needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Dim(format!(
                    "layer {} outputs {} but layer {} expects {} inputs",
                    i,
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Shape table for an MLP `input -> hidden... -> output`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| LayerShape { rows: w[1], cols: w[0] })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    /// Total number of parameters across all layers.
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(LayerShape::param_len).sum()
    }

    /// Offset of layer `i`'s weight block in the flat vector.
    pub fn weight_offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(LayerShape::param_len).sum()
    }

    /// Offset of layer `i`'s bias block in the flat vector.
    pub fn bias_offset(&self, layer: usize) -> usize {
        let l = self.layers[layer];
        self.weight_offset(layer) + l.rows * l.cols
    }
}

/// Flat parameter vector plus the shape table that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shape: ShapeTable,
}

impl ParamVector {
    pub fn zeros(shape: ShapeTable) -> Self {
        let n = shape.total_len();
        Self { values: vec![0.0; n], shape }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, biases zero.
    pub fn init_uniform<R: Rng>(shape: ShapeTable, rng: &mut R) -> Self {
        let mut pv = Self::zeros(shape);
        for i in 0..pv.shape.num_layers() {
            let l = pv.shape.layers[i];
            let limit = 1.0 / (l.cols as f64).sqrt();
            let off = pv.shape.weight_offset(i);
            for w in &mut pv.values[off..off + l.rows * l.cols] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        pv
    }

    pub fn from_values(shape: ShapeTable, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.total_len() {
            return Err(Error::Dim(format!(
                "parameter vector length {} does not match shape table total {}",
                values.len(),
                shape.total_len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { values, shape })
    }

    pub fn shape(&self) -> &ShapeTable {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row-major weight block of layer `i`.
    pub fn weight(&self, layer: usize) -> &[f64] {
        let l = self.shape.layers[layer];
        let off = self.shape.weight_offset(layer);
        &self.values[off..off + l.rows * l.cols]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = self.shape.layers[layer];
        let off = self.shape.bias_offset(layer);
        &self.values[off..off + l.rows]
    }

    /// Weight block of layer `i` as a `(rows, cols)` matrix view.
    pub fn weight_view(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.shape.layers[layer];
        ArrayView2::from_shape((l.rows, l.cols), self.weight(layer)).expect("layout")
    }
}

/// Applies one affine layer to a batch: `y = x W^T + b`.
fn affine_batch(params: &ParamVector, layer: usize, x: &ArrayView2<f64>) -> Array2<f64> {
    let w = params.weight_view(layer);
    let b = params.bias(layer);
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    y
}

/// Forward pass for a batch of inputs, rectified-linear hidden layers and an
/// affine output layer. Rows of `x` are independent samples.
pub fn mlp_forward_batch(params: &ParamVector, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != params.shape.input_dim() {
        return Err(Error::Dim(format!(
            "input width {} does not match network input {}",
            x.ncols(),
            params.shape.input_dim()
        )));
    }
    let last = params.shape.num_layers() - 1;
    let mut h = affine_batch(params, 0, &x);
    for layer in 1..=last {
        h.mapv_inplace(|v| v.max(0.0));
        h = affine_batch(params, layer, &h.view());
    }
    Ok(h)
}

/// Forward pass for a single input vector.
pub fn mlp_forward(params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| Error::Dim(e.to_string()))?;
    let y = mlp_forward_batch(params, x)?;
    Ok(y.into_raw_vec_and_offset().0)
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Restores a state captured by a checkpoint.
    pub fn restore(m: Vec<f64>, v: Vec<f64>, t: u64, lr: f64) -> Self {
        Self { m, v, t, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction. Increments the step counter.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dim(format!(
            "adam: gradient length {} / moment length {} vs parameter length {}",
            grad.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let lr = state.lr;
    let eps = state.eps;
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Polyak average `target <- tau * source + (1 - tau) * target`.
pub fn polyak_update(target: &mut ParamVector, source: &ParamVector, tau: f64) {
    debug_assert_eq!(target.len(), source.len());
    for (t, s) in target.values.iter_mut().zip(source.values.iter()) {
        *t = tau * s + (1.0 - tau) * *t;
    }
}
