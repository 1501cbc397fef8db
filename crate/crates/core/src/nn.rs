//! A small multilayer perceptron with explicit gradients.
//!
//! Parameters live in one flat `f32` vector so they can be shipped between
//! devices as-is. The canonical layout is, per layer in order, the weight
//! matrix (`fan_out` rows of `fan_in` entries, row-major) followed by the bias
//! vector. All arithmetic runs in `f64`; only storage is single precision.
//!
//! Hidden layers use ReLU, the output layer a softmax, and the loss is mean
//! cross-entropy over the batch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const PARAM_MAGIC: &[u8; 4] = b"OFLW";
pub const PARAM_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Layer widths of a fully connected ReLU network with a softmax head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the weight block; biases follow immediately.
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = MlpArchitecture {
            input_dim,
            hidden_dims,
            output_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// The two-hidden-layer MNIST network (784-200-200-10).
    pub fn mnist_2nn() -> Self {
        MlpArchitecture {
            input_dim: 784,
            hidden_dims: vec![200, 200],
            output_dim: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::param("all layer widths must be at least 1"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }

    fn layers(&self) -> Vec<LayerShape> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Bytes on the wire for one model (or one gradient): 4 per parameter.
    pub fn serialized_size_bytes(&self) -> u64 {
        serialized_size_for_params(self.param_count())
    }

    /// Ranges `(weights, biases)` of each layer inside the flat vector.
    pub fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.layers()
            .iter()
            .map(|l| {
                (
                    l.offset..l.bias_offset(),
                    l.bias_offset()..l.bias_offset() + l.fan_out,
                )
            })
            .collect()
    }
}

pub fn serialized_size_for_params(params: usize) -> u64 {
    params as u64 * 4
}

/// Flat model parameters in canonical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f32>);

impl ParameterVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("parameters must be finite"));
        }
        Ok(ParameterVector(values))
    }

    pub fn zeros(arch: &MlpArchitecture) -> Self {
        ParameterVector(vec![0.0; arch.param_count()])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    /// Elementwise mean of two parameter vectors.
    pub fn mean(&self, other: &ParameterVector) -> Result<ParameterVector> {
        Error::check_len(self.len(), other.len())?;
        Ok(ParameterVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| ((*a as f64 + *b as f64) * 0.5) as f32)
                .collect(),
        ))
    }

    /// 16-byte header (`OFLW`, version, count, reserved) then little-endian `f32`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.0.len());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(format(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != PARAM_MAGIC {
            return Err(format(0, "bad magic, expected OFLW"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != PARAM_FORMAT_VERSION {
            return Err(format(4, "unsupported version"));
        }
        let count = word(8) as usize;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() != expected {
            return Err(format(
                bytes.len().min(expected),
                &format!(
                    "payload holds {} bytes, header declares {count} parameters",
                    bytes.len() - HEADER_LEN
                ),
            ));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParameterVector::new(values)
    }
}

/// Flat gradient in the same layout as [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("gradient must be finite"));
        }
        Ok(GradientVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Samples with features in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    input_dim: usize,
    inputs: Vec<f32>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(input_dim: usize, inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::param("input dimension must be at least 1"));
        }
        Error::check_len(labels.len() * input_dim, inputs.len())?;
        Ok(LabeledBatch {
            input_dim,
            inputs,
            labels,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        LabeledBatch {
            input_dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the selected rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            input_dim: self.input_dim,
            inputs,
            labels,
        }
    }

    /// Concatenates `other` after `self`.
    pub fn concat(&self, other: &LabeledBatch) -> Result<LabeledBatch> {
        Error::check_len(self.input_dim, other.input_dim)?;
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_parameters(arch: &MlpArchitecture, seed: u64) -> ParameterVector {
    let mut rng = rng_from_seed(seed);
    let mut values = vec![0.0f32; arch.param_count()];
    for layer in arch.layers() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for v in &mut values[layer.offset..layer.bias_offset()] {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    ParameterVector(values)
}

fn check_shapes(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<()> {
    Error::check_len(arch.param_count(), params.len())?;
    Error::check_len(arch.input_dim, batch.input_dim)?;
    if let Some(&l) = batch.labels.iter().find(|l| **l >= arch.output_dim) {
        return Err(Error::param(format!(
            "label {l} outside output dimension {}",
            arch.output_dim
        )));
    }
    Ok(())
}

/// Layer activations for one sample; `acts[0]` is the input.
fn forward_sample(w: &[f64], layers: &[LayerShape], x: &[f32], acts: &mut [Vec<f64>]) {
    for (a, &xi) in acts[0].iter_mut().zip(x) {
        *a = xi as f64;
    }
    let last = layers.len() - 1;
    for (k, layer) in layers.iter().enumerate() {
        let (prev, next) = acts.split_at_mut(k + 1);
        let input = &prev[k];
        let out = &mut next[0];
        let weights = &w[layer.offset..layer.bias_offset()];
        let biases = &w[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
        for (o, z) in out.iter_mut().enumerate() {
            let row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            let pre = dot + biases[o];
            *z = if k == last { pre } else { pre.max(0.0) };
        }
    }
}

/// In-place log-softmax using the row maximum for stability; returns log-probs.
fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for z in logits.iter_mut() {
        *z -= lse;
    }
}

fn activation_buffers(arch: &MlpArchitecture) -> Vec<Vec<f64>> {
    arch.widths().into_iter().map(|n| vec![0.0; n]).collect()
}

/// Output of [`forward`]: row-major class probabilities and mean loss.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub num_classes: usize,
    pub probabilities: Vec<f64>,
    pub loss: f64,
}

impl ForwardOutput {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probabilities[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

pub fn forward(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<ForwardOutput> {
    check_shapes(params, arch, batch)?;
    let w = params.to_f64();
    let layers = arch.layers();
    let mut acts = activation_buffers(arch);
    let mut probabilities = Vec::with_capacity(batch.len() * arch.output_dim);
    let mut loss = 0.0;
    for i in 0..batch.len() {
        forward_sample(&w, &layers, batch.row(i), &mut acts);
        let out = acts.last_mut().unwrap();
        log_softmax(out);
        loss -= out[batch.labels[i]];
        probabilities.extend(out.iter().map(|lp| lp.exp()));
    }
    if !batch.is_empty() {
        loss /= batch.len() as f64;
    }
    Ok(ForwardOutput {
        num_classes: arch.output_dim,
        probabilities,
        loss,
    })
}

/// Samples per gradient work unit. Partial sums are combined in chunk order,
/// so the result does not depend on how many threads ran the chunks.
pub const GRADIENT_CHUNK: usize = 256;

/// Mean cross-entropy and its full-batch gradient.
pub fn loss_and_gradient(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<(f64, GradientVector)> {
    check_shapes(params, arch, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyData("gradient needs at least one sample"));
    }
    let w = params.to_f64();
    let layers = arch.layers();
    let starts: Vec<usize> = (0..batch.len()).step_by(GRADIENT_CHUNK).collect();
    let partials: Vec<(f64, Vec<f64>)> = starts
        .par_iter()
        .map(|&s| {
            accumulate(
                &w,
                &layers,
                arch,
                batch,
                s..(s + GRADIENT_CHUNK).min(batch.len()),
            )
        })
        .collect();

    let mut parts = partials.into_iter();
    let (mut loss, mut grad) = parts.next().unwrap();
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, GradientVector(grad)))
}

/// Summed loss and gradient over `rows`.
fn accumulate(
    w: &[f64],
    layers: &[LayerShape],
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
    rows: std::ops::Range<usize>,
) -> (f64, Vec<f64>) {
    let mut acts = activation_buffers(arch);
    let mut deltas = activation_buffers(arch);
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;

    for i in rows {
        forward_sample(w, layers, batch.row(i), &mut acts);
        let out = acts.last_mut().unwrap();
        log_softmax(out);
        let label = batch.labels[i];
        loss -= out[label];

        // dL/dz at the output is softmax - onehot.
        let top = deltas.last_mut().unwrap();
        for (d, lp) in top.iter_mut().zip(out.iter()) {
            *d = lp.exp();
        }
        top[label] -= 1.0;

        for (k, layer) in layers.iter().enumerate().rev() {
            let (below, above) = deltas.split_at_mut(k + 1);
            let delta = &above[0];
            let input = &acts[k];
            let weights = &w[layer.offset..layer.bias_offset()];
            {
                let (gw, gb) = grad[layer.offset..layer.bias_offset() + layer.fan_out]
                    .split_at_mut(layer.fan_in * layer.fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, x) in gw[o * layer.fan_in..(o + 1) * layer.fan_in]
                        .iter_mut()
                        .zip(input)
                    {
                        *g += d * x;
                    }
                }
            }
            if k > 0 {
                let back = &mut below[k];
                back.iter_mut().for_each(|v| *v = 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (b, wv) in back
                        .iter_mut()
                        .zip(&weights[o * layer.fan_in..(o + 1) * layer.fan_in])
                    {
                        *b += d * wv;
                    }
                }
                // ReLU derivative.
                for (b, a) in back.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
        }
    }
    (loss, grad)
}

pub fn gradient(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<GradientVector> {
    loss_and_gradient(params, arch, batch).map(|(_, g)| g)
}

/// `params - rate * grad`, rounded back to storage precision.
pub fn apply_step(
    params: &ParameterVector,
    grad: &GradientVector,
    rate: f64,
) -> Result<ParameterVector> {
    Error::check_len(params.len(), grad.len())?;
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::param(format!(
            "learning rate must be non-negative, got {rate}"
        )));
    }
    ParameterVector::new(
        params
            .0
            .iter()
            .zip(&grad.0)
            .map(|(p, g)| (*p as f64 - rate * g) as f32)
            .collect(),
    )
}

pub fn l2_distance(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    Error::check_len(a.len(), b.len())?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Argmax class per sample; ties go to the lowest label id.
pub fn predict(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<Vec<usize>> {
    check_shapes(params, arch, batch)?;
    let w = params.to_f64();
    let layers = arch.layers();
    let mut acts = activation_buffers(arch);
    Ok((0..batch.len())
        .map(|i| {
            forward_sample(&w, &layers, batch.row(i), &mut acts);
            argmax(acts.last().unwrap())
        })
        .collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy on a batch.
pub fn accuracy(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &LabeledBatch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("accuracy of an empty batch is undefined"));
    }
    let predicted = predict(params, arch, batch)?;
    let hits = predicted
        .iter()
        .zip(batch.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}
