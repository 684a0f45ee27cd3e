//! Fully-connected rectifier network with hand-written backpropagation.
//!
//! Training uses mean cross-entropy as a differentiable surrogate; all risk
//! and information estimates use [`zero_one_loss`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tasks::LabeledExample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} outputs")]
    InvalidLabel { label: usize, classes: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("non-finite loss at example {index}")]
    NonFiniteLoss { index: usize },

    #[error("layer sizes must name at least an input and an output width")]
    BadArchitecture,
}

/// Activation applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
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
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Parameters of a multilayer perceptron. Also used for gradients, which
/// share the exact shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    /// All-zero parameters for the given layer widths (`[input, hidden.., output]`).
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self, ModelError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ModelError::BadArchitecture);
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation,
        })
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut params = Self::zeros(sizes, activation)?;
        for layer in &mut params.layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
        }
        Ok(params)
    }

    /// Default architecture: `layers` affine maps, hidden width `hidden`, ReLU.
    pub fn standard<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        layers: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let sizes = layer_sizes(input, hidden, layers, outputs);
        Self::init(&sizes, Activation::Relu, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Overwrites the parameters from a flat vector in [`to_flat`](Self::to_flat) order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat length mismatch");
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    /// Adds isotropic Gaussian noise of standard deviation `sigma`.
    pub fn add_noise<R: Rng + ?Sized>(&mut self, sigma: f64, rng: &mut R) {
        if sigma == 0.0 {
            return;
        }
        for v in self.values_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&h);
            if k < last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grad<'a, I>(&self, batch: I) -> Result<(f64, MlpParams), ModelError>
    where
        I: IntoIterator<Item = &'a LabeledExample>,
    {
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let mut count = 0usize;
        for (index, ex) in batch.into_iter().enumerate() {
            let loss = self.accumulate_example(ex, &mut grad)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { index });
            }
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(ModelError::EmptyBatch);
        }
        grad.scale(1.0 / count as f64);
        Ok((total / count as f64, grad))
    }

    /// Mean cross-entropy only.
    pub fn loss<'a, I>(&self, batch: I) -> Result<f64, ModelError>
    where
        I: IntoIterator<Item = &'a LabeledExample>,
    {
        let mut total = 0.0;
        let mut count = 0usize;
        for (index, ex) in batch.into_iter().enumerate() {
            let logits = self.forward(&ex.features)?;
            let loss = cross_entropy(&logits, ex.label)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { index });
            }
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(ModelError::EmptyBatch);
        }
        Ok(total / count as f64)
    }

    /// Backpropagates one example, adding its (unscaled) gradient into `grad`.
    fn accumulate_example(&self, ex: &LabeledExample, grad: &mut MlpParams) -> Result<f64, ModelError> {
        let x = &ex.features;
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        // activations[k] is the input to layer k; pre[k] its pre-activation output.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&h);
            let next = if k < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            activations.push(h);
            pre.push(z);
            h = next;
        }
        let logits = h;
        let loss = cross_entropy(&logits, ex.label)?;

        let mut delta = softmax(&logits);
        delta[ex.label] -= 1.0;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grad.layers[k];
            let input = &activations[k];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if k == 0 {
                break;
            }
            let below = &pre[k - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            for (n, &z) in next.iter_mut().zip(below) {
                *n *= self.activation.derivative(z);
            }
            delta = next;
        }
        Ok(loss)
    }
}

/// Widths `[input, hidden, .., hidden, outputs]` for `layers` affine maps.
pub fn layer_sizes(input: usize, hidden: usize, layers: usize, outputs: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
    sizes.push(outputs);
    sizes
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Index of the largest logit, ties resolved toward the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = k;
        }
    }
    best
}

/// Binary misclassification loss.
pub fn zero_one_loss(params: &MlpParams, example: &LabeledExample) -> Result<f64, ModelError> {
    let logits = params.forward(&example.features)?;
    Ok(if argmax(&logits) == example.label { 0.0 } else { 1.0 })
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences of the mean loss.
///
/// Relative error per coordinate is `|a - f| / max(|a|, |f|, 1e-6)`, so
/// coordinates whose gradient vanishes are compared absolutely.
pub fn grad_check<'a, I>(params: &MlpParams, batch: I, eps: f64) -> Result<f64, ModelError>
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let batch: Vec<&LabeledExample> = batch.into_iter().collect();
    let (_, grad) = params.loss_and_grad(batch.iter().copied())?;
    compare_with_finite_differences(params, &batch, &grad.to_flat(), eps)
}

pub(crate) fn compare_with_finite_differences(
    params: &MlpParams,
    batch: &[&LabeledExample],
    analytic: &[f64],
    eps: f64,
) -> Result<f64, ModelError> {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        flat[k] = base[k] + eps;
        probe.set_flat(&flat);
        let up = probe.loss(batch.iter().copied())?;
        flat[k] = base[k] - eps;
        probe.set_flat(&flat);
        let down = probe.loss(batch.iter().copied())?;
        flat[k] = base[k];
        let fd = (up - down) / (2.0 * eps);
        let denom = a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}
