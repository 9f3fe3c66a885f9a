//! Reference computations written independently of the library's forward and
//! backward passes. Shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use fedldf_core::nn::{Batch, LayeredModel, Matrix};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|a|, |b|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-3;
/// Cases with a pre-activation this close to the ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn layer_params(model: &LayeredModel) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    model
        .layers()
        .iter()
        .map(|l| {
            let w = (0..l.out_dim())
                .map(|o| (0..l.in_dim()).map(|i| l.weights.get(o, i)).collect())
                .collect();
            (w, l.bias.clone())
        })
        .collect()
}

/// Pre-activations of every layer for one input row.
pub fn reference_preactivations(model: &LayeredModel, x: &[f64]) -> Vec<Vec<f64>> {
    let params = layer_params(model);
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for (l, (w, b)) in params.iter().enumerate() {
        let z: Vec<f64> = w
            .iter()
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        h = if l + 1 < params.len() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        out.push(z);
    }
    out
}

/// Mean softmax cross-entropy, via log-sum-exp.
pub fn reference_loss(model: &LayeredModel, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.len() {
        let zs = reference_preactivations(model, batch.inputs.row(r));
        let logits = zs.last().unwrap();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - logits[batch.labels[r]];
    }
    total / batch.len() as f64
}

pub fn min_abs_preactivation(model: &LayeredModel, batch: &Batch) -> f64 {
    let hidden = model.layer_count() - 1;
    (0..batch.len())
        .flat_map(|r| {
            reference_preactivations(model, batch.inputs.row(r))
                .into_iter()
                .take(hidden)
                .flatten()
        })
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

/// Largest relative disagreement between backprop and central differences
/// over every parameter.
pub fn max_fd_relative_error(model: &LayeredModel, batch: &Batch) -> f64 {
    let (_, grad) = model.loss_and_gradient(batch).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..model.layer_count() {
        let analytic: Vec<f64> = grad.layers[l].params().copied().collect();
        for (p, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            *plus.layers_mut()[l].params_mut().nth(p).unwrap() += FD_STEP;
            let mut minus = model.clone();
            *minus.layers_mut()[l].params_mut().nth(p).unwrap() -= FD_STEP;
            let numeric =
                (reference_loss(&plus, batch) - reference_loss(&minus, batch)) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// A model with 1 to 3 layers and widths up to 8, plus a batch of up to 16
/// samples, kept away from ReLU kinks.
pub fn random_case<R: Rng>(rng: &mut R) -> (LayeredModel, Batch) {
    loop {
        let layers = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=layers).map(|i| {
            if i == layers { rng.random_range(2..=8) } else { rng.random_range(1..=8) }
        }).collect();
        let model = LayeredModel::init(&dims, rng).unwrap();
        let n = rng.random_range(1..=16);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..dims[layers])).collect();
        let batch = Batch::new(Matrix::from_rows(&inputs).unwrap(), labels).unwrap();
        if layers == 1 || min_abs_preactivation(&model, &batch) > KINK_MARGIN {
            return (model, batch);
        }
    }
}
