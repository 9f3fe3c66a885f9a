//! Minimal layered feed-forward network: dense layers with ReLU hidden
//! activations, softmax cross-entropy loss, manual backpropagation and plain
//! SGD. Every layer is one `ParameterLayer` (weight matrix plus bias), which is
//! the unit the aggregation rules select and average.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("model must have at least one layer")]
    NoLayers,
    #[error("layer {layer}: input dim {found} does not chain with previous output dim {expected}")]
    BrokenChain {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("non-finite value produced in layer {0}")]
    NonFinite(usize),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::DimensionMismatch {
                what: "matrix buffer",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NnError::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// One layer block: `weights` is `out_dim x in_dim`, `bias` has `out_dim`
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ParameterLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self, NnError> {
        if bias.len() != weights.rows() {
            return Err(NnError::DimensionMismatch {
                what: "bias length",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`.
    pub fn init_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// All parameters in canonical order: weights row-major, then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }

    pub fn same_shape(&self, other: &ParameterLayer) -> bool {
        self.in_dim() == other.in_dim() && self.out_dim() == other.out_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.params().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
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

/// Ordered stack of layers. Hidden layers use `activation`; the last layer
/// produces raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    layers: Vec<ParameterLayer>,
    activation: Activation,
}

/// Gradient with one block per model layer; shape-congruent with its model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGradient {
    pub layers: Vec<ParameterLayer>,
}

impl LayeredGradient {
    pub fn zeros_like(model: &LayeredModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| ParameterLayer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.squared_norm().sqrt()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(ParameterLayer::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two congruent gradients.
    pub fn distance(&self, other: &LayeredGradient) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.params().zip(b.params()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &LayeredGradient) -> LayeredGradient {
        let mut out = self.clone();
        for (a, b) in out.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.params_mut().zip(b.params()) {
                *x += y;
            }
        }
        out
    }
}

/// Inputs (`batch_size x in_dim`) and their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self, NnError> {
        if labels.is_empty() || inputs.rows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if labels.len() != inputs.rows() {
            return Err(NnError::DimensionMismatch {
                what: "label count",
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LayeredModel {
    pub fn new(layers: Vec<ParameterLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::NoLayers);
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::BrokenChain {
                    layer: i + 1,
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    /// Builds a model for `dims = [in, h1, ..., classes]` with uniform
    /// fan-in-scaled initialization.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::NoLayers);
        }
        let layers = dims
            .windows(2)
            .map(|w| ParameterLayer::init_uniform(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::NoLayers);
        }
        Self::new(
            dims.windows(2)
                .map(|w| ParameterLayer::zeros(w[0], w[1]))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[ParameterLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ParameterLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(ParameterLayer::out_dim))
            .collect()
    }

    /// Parameter count (weights plus bias) of every layer.
    pub fn layer_param_count(&self) -> Vec<usize> {
        self.layers.iter().map(ParameterLayer::param_count).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(ParameterLayer::param_count).sum()
    }

    pub fn same_shape(&self, other: &LayeredModel) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(ParameterLayer::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params().copied())
            .collect()
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &LayeredModel) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.params().zip(b.params()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if batch.inputs.cols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                what: "batch input dim",
                expected: self.input_dim(),
                found: batch.inputs.cols(),
            });
        }
        let classes = self.class_count();
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn pre_activations(&self, inputs: &Matrix) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(inputs.rows(), layer.out_dim());
            for r in 0..inputs.rows() {
                let prev_z = if l == 0 { None } else { Some(out[l - 1].row(r)) };
                let zrow = z.row_mut(r);
                for (o, zo) in zrow.iter_mut().enumerate() {
                    let w = layer.weights.row(o);
                    let mut acc = layer.bias[o];
                    match prev_z {
                        None => {
                            for (wi, xi) in w.iter().zip(inputs.row(r)) {
                                acc += wi * xi;
                            }
                        }
                        Some(pz) => {
                            for (wi, zi) in w.iter().zip(pz) {
                                acc += wi * self.activation.apply(*zi);
                            }
                        }
                    }
                    *zo = acc;
                }
            }
            out.push(z);
        }
        out
    }

    /// Logits (`batch_size x class_count`).
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix, NnError> {
        if inputs.cols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                what: "batch input dim",
                expected: self.input_dim(),
                found: inputs.cols(),
            });
        }
        Ok(self.pre_activations(inputs).pop().expect("at least one layer"))
    }

    /// Mean softmax cross-entropy over the batch and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, LayeredGradient), NnError> {
        self.check_batch(batch)?;
        let zs = self.pre_activations(&batch.inputs);
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let last = self.layers.len() - 1;

        let logits = &zs[last];
        let mut delta = Matrix::zeros(n, self.class_count());
        let mut loss = 0.0;
        for r in 0..n {
            let (sample_loss, probs) = softmax_xent(logits.row(r), batch.labels[r]);
            loss += sample_loss;
            let drow = delta.row_mut(r);
            for (d, p) in drow.iter_mut().zip(&probs) {
                *d = p * inv_n;
            }
            drow[batch.labels[r]] -= inv_n;
        }
        loss *= inv_n;

        let mut grad = LayeredGradient::zeros_like(self);
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            for r in 0..n {
                let drow = delta.row(r);
                for (o, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let grow = g.weights.row_mut(o);
                    if l == 0 {
                        for (gw, x) in grow.iter_mut().zip(batch.inputs.row(r)) {
                            *gw += d * x;
                        }
                    } else {
                        for (gw, z) in grow.iter_mut().zip(zs[l - 1].row(r)) {
                            *gw += d * self.activation.apply(*z);
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut next = Matrix::zeros(n, layer.in_dim());
            for r in 0..n {
                let drow = delta.row(r);
                let zprev = zs[l - 1].row(r);
                let nrow = next.row_mut(r);
                for (o, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (acc, w) in nrow.iter_mut().zip(layer.weights.row(o)) {
                        *acc += d * w;
                    }
                }
                for (acc, z) in nrow.iter_mut().zip(zprev) {
                    *acc *= self.activation.derivative(*z);
                }
            }
            delta = next;
        }
        if let Some(l) = grad.layers.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFinite(l));
        }
        Ok((loss, grad))
    }

    /// In-place `p <- p - lr * g`. Callers are responsible for shape checks.
    pub(crate) fn apply_gradient(&mut self, grad: &LayeredGradient, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (p, gv) in layer.params_mut().zip(g.params()) {
                *p -= lr * gv;
            }
        }
    }

    fn check_gradient_shape(&self, grad: &LayeredGradient) -> Result<(), NnError> {
        if grad.layers.len() != self.layers.len() {
            return Err(NnError::DimensionMismatch {
                what: "gradient layer count",
                expected: self.layers.len(),
                found: grad.layers.len(),
            });
        }
        for (a, b) in self.layers.iter().zip(&grad.layers) {
            if !a.same_shape(b) || b.bias.len() != a.bias.len() {
                return Err(NnError::DimensionMismatch {
                    what: "gradient layer shape",
                    expected: a.param_count(),
                    found: b.param_count(),
                });
            }
        }
        Ok(())
    }
}

/// One plain SGD step; returns the updated model.
pub fn sgd_step(
    model: &LayeredModel,
    grad: &LayeredGradient,
    lr: f64,
) -> Result<LayeredModel, NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidLearningRate(lr));
    }
    model.check_gradient_shape(grad)?;
    let mut out = model.clone();
    out.apply_gradient(grad, lr);
    if let Some(l) = out.layers.iter().position(|l| !l.is_finite()) {
        return Err(NnError::NonFinite(l));
    }
    Ok(out)
}

/// Cross-entropy of one logit row and the softmax probabilities.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    ((max - logits[label]) + sum.ln(), probs)
}

/// Index of the largest logit; ties go to the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
