//! Classical target networks whose weights arrive as one flat vector.
//!
//! Flat layout: layers in order, each contributing its weight tensor then its
//! bias, both row-major. Dense weights are shaped `(inputs, outputs)`, so the
//! low-order index bits select the output unit. Convolution kernels are shaped
//! `(out_channels, in_channels, kernel, kernel)`.
//!
//! Images are `channels x height x width`, row-major. Convolutions use valid
//! padding; max-pooling uses non-overlapping windows and drops the remainder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::mapping::WeightVector;

/// Examples per parallel work item; partial gradients are summed in order.
const EXAMPLE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One layer of a target architecture.
///
/// A missing `activation` means ReLU, except on the final layer where it means
/// identity (the final layer produces logits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<Activation>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<Activation>,
    },
    #[serde(rename = "maxpool")]
    MaxPool { kernel: usize },
    Flatten,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture of a target model with softmax cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNetworkSpec {
    /// `[channels, height, width]` of one input example.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Dense { inputs: usize, outputs: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    Pool { channels: usize, kernel: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
struct ResolvedLayer {
    op: Op,
    activation: Activation,
    /// Offset of this layer's weights in the flat vector.
    offset: usize,
    weight_len: usize,
    bias_len: usize,
    out_len: usize,
}

impl TargetNetworkSpec {
    /// `784 → 8 → class_count` on 28x28 grayscale images.
    pub fn mnist_dense(class_count: usize) -> Self {
        Self {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 784, outputs: 8, activation: Some(Activation::Relu) },
                LayerSpec::Dense { inputs: 8, outputs: class_count, activation: Some(Activation::Identity) },
            ],
            class_count,
        }
    }

    /// One 3x3 convolution with 4 channels, 2x2 max-pool, dense classifier.
    pub fn mnist_cnn(class_count: usize) -> Self {
        Self {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, activation: Some(Activation::Relu) },
                LayerSpec::MaxPool { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 4 * 13 * 13, outputs: class_count, activation: Some(Activation::Identity) },
            ],
            class_count,
        }
    }

    pub fn preset(name: &str, class_count: usize) -> Result<Self> {
        match name {
            "mnist-dense" => Ok(Self::mnist_dense(class_count)),
            "mnist-cnn" => Ok(Self::mnist_cnn(class_count)),
            other => Err(config_err!(
                "unknown target preset '{other}' (known: mnist-dense, mnist-cnn)"
            )),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(config_err!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.class_count < 2 {
            return Err(config_err!("class_count must be at least 2"));
        }
        if self.layers.is_empty() {
            return Err(config_err!("target network has no layers"));
        }
        let mut shape = Shape::Image { channels: c, height: h, width: w };
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let default_act = if idx == last { Activation::Identity } else { Activation::Relu };
            let (op, activation, weight_len, bias_len, next) = match *layer {
                LayerSpec::Dense { inputs, outputs, activation } => {
                    if shape != Shape::Flat(inputs) {
                        return Err(config_err!(
                            "layer {idx}: dense expects flat input of {inputs}, got {shape:?}"
                        ));
                    }
                    if outputs == 0 {
                        return Err(config_err!("layer {idx}: dense layer with zero outputs"));
                    }
                    (
                        Op::Dense { inputs, outputs },
                        activation.unwrap_or(default_act),
                        inputs * outputs,
                        outputs,
                        Shape::Flat(outputs),
                    )
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, activation } => {
                    let Shape::Image { channels, height, width } = shape else {
                        return Err(config_err!("layer {idx}: conv2d needs an image input, got {shape:?}"));
                    };
                    if channels != in_channels {
                        return Err(config_err!(
                            "layer {idx}: conv2d expects {in_channels} channels, got {channels}"
                        ));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 || kernel > height || kernel > width {
                        return Err(config_err!(
                            "layer {idx}: conv2d kernel {kernel} stride {stride} does not fit {height}x{width}"
                        ));
                    }
                    let out_h = (height - kernel) / stride + 1;
                    let out_w = (width - kernel) / stride + 1;
                    (
                        Op::Conv { in_ch: in_channels, out_ch: out_channels, kernel, stride, in_h: height, in_w: width, out_h, out_w },
                        activation.unwrap_or(default_act),
                        out_channels * in_channels * kernel * kernel,
                        out_channels,
                        Shape::Image { channels: out_channels, height: out_h, width: out_w },
                    )
                }
                LayerSpec::MaxPool { kernel } => {
                    let Shape::Image { channels, height, width } = shape else {
                        return Err(config_err!("layer {idx}: maxpool needs an image input, got {shape:?}"));
                    };
                    if kernel == 0 || kernel > height || kernel > width {
                        return Err(config_err!(
                            "layer {idx}: maxpool kernel {kernel} does not fit {height}x{width}"
                        ));
                    }
                    let (out_h, out_w) = (height / kernel, width / kernel);
                    (
                        Op::Pool { channels, kernel, in_h: height, in_w: width, out_h, out_w },
                        Activation::Identity,
                        0,
                        0,
                        Shape::Image { channels, height: out_h, width: out_w },
                    )
                }
                LayerSpec::Flatten => (Op::Flatten, Activation::Identity, 0, 0, Shape::Flat(shape.len())),
            };
            out.push(ResolvedLayer { op, activation, offset, weight_len, bias_len, out_len: next.len() });
            offset += weight_len + bias_len;
            shape = next;
        }
        if shape != Shape::Flat(self.class_count) {
            return Err(config_err!(
                "final layer produces {shape:?} but class_count is {}",
                self.class_count
            ));
        }
        Ok(out)
    }

    /// Validates the architecture without building anything.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }
}

/// Total number of weights and biases.
pub fn param_count(spec: &TargetNetworkSpec) -> Result<usize> {
    Ok(spec
        .resolve()?
        .iter()
        .map(|l| l.weight_len + l.bias_len)
        .sum())
}

/// Which tensor of a layer a flat slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

/// Position of one flat parameter inside the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub layer: usize,
    pub tensor: TensorKind,
    pub index: Vec<usize>,
}

/// The bijection between flat indices and parameter slots.
#[derive(Debug, Clone)]
pub struct FlattenLayout {
    layers: Vec<ResolvedLayer>,
    total: usize,
}

impl FlattenLayout {
    pub fn new(spec: &TargetNetworkSpec) -> Result<Self> {
        let layers = spec.resolve()?;
        let total = layers.iter().map(|l| l.weight_len + l.bias_len).sum();
        Ok(Self { layers, total })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn weight_dims(op: &Op) -> Vec<usize> {
        match *op {
            Op::Dense { inputs, outputs } => vec![inputs, outputs],
            Op::Conv { in_ch, out_ch, kernel, .. } => vec![out_ch, in_ch, kernel, kernel],
            _ => Vec::new(),
        }
    }

    pub fn slot(&self, flat: usize) -> Option<Slot> {
        let (layer, l) = self
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| flat >= l.offset && flat < l.offset + l.weight_len + l.bias_len)?;
        let local = flat - l.offset;
        if local >= l.weight_len {
            return Some(Slot { layer, tensor: TensorKind::Bias, index: vec![local - l.weight_len] });
        }
        let dims = Self::weight_dims(&l.op);
        let mut index = vec![0; dims.len()];
        let mut rem = local;
        for (slot, &d) in index.iter_mut().zip(&dims).rev() {
            *slot = rem % d;
            rem /= d;
        }
        Some(Slot { layer, tensor: TensorKind::Weight, index })
    }

    pub fn flat_index(&self, slot: &Slot) -> Option<usize> {
        let l = self.layers.get(slot.layer)?;
        match slot.tensor {
            TensorKind::Bias => {
                let [i] = slot.index[..] else { return None };
                (i < l.bias_len).then_some(l.offset + l.weight_len + i)
            }
            TensorKind::Weight => {
                let dims = Self::weight_dims(&l.op);
                if dims.len() != slot.index.len() || slot.index.iter().zip(&dims).any(|(i, d)| i >= d) {
                    return None;
                }
                let local = slot.index.iter().zip(&dims).fold(0, |acc, (i, d)| acc * d + i);
                Some(l.offset + local)
            }
        }
    }
}

/// A target network with concrete weights.
#[derive(Debug, Clone)]
pub struct Network {
    spec: TargetNetworkSpec,
    layers: Vec<ResolvedLayer>,
    weights: Vec<f64>,
}

/// Inputs and labels of a mini-batch. Inputs are borrowed flat examples.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f32]>,
    pub labels: Vec<usize>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean loss and accuracy over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn assign_weights(spec: &TargetNetworkSpec, omega: &WeightVector) -> Result<Network> {
    let layers = spec.resolve()?;
    let m: usize = layers.iter().map(|l| l.weight_len + l.bias_len).sum();
    if omega.len() != m {
        return Err(config_err!(
            "target network has {m} parameters but {} weights were supplied",
            omega.len()
        ));
    }
    Ok(Network { spec: spec.clone(), layers, weights: omega.0.clone() })
}

struct Trace {
    /// outputs[0] is the input; outputs[k + 1] is layer k's post-activation output.
    outputs: Vec<Vec<f64>>,
    /// per pooling layer, the input position chosen for each output
    argmax: Vec<Vec<usize>>,
}

impl Network {
    pub fn spec(&self) -> &TargetNetworkSpec {
        &self.spec
    }

    /// The flat weight vector; inverse of [`assign_weights`].
    pub fn flatten(&self) -> WeightVector {
        WeightVector(self.weights.clone())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.len() != batch.labels.len() {
            return Err(Error::Data(format!(
                "batch has {} inputs but {} labels",
                batch.inputs.len(),
                batch.labels.len()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let want = self.spec.input_len();
        if let Some(i) = batch.inputs.iter().position(|x| x.len() != want) {
            return Err(Error::Data(format!(
                "example {i} has {} values, the network expects {want}",
                batch.inputs[i].len()
            )));
        }
        if let Some(i) = batch.labels.iter().position(|&y| y >= self.spec.class_count) {
            return Err(Error::Data(format!(
                "label {} of example {i} is outside [0, {})",
                batch.labels[i], self.spec.class_count
            )));
        }
        Ok(())
    }

    /// Output of one layer before its activation; pooling layers also report
    /// the input position chosen for each output.
    fn layer_pre(&self, layer: &ResolvedLayer, x: &[f64]) -> (Vec<f64>, Option<Vec<usize>>) {
        let w = &self.weights[layer.offset..layer.offset + layer.weight_len];
        let b = &self.weights[layer.offset + layer.weight_len..layer.offset + layer.weight_len + layer.bias_len];
        match layer.op {
            Op::Dense { inputs, outputs } => {
                let mut y = b.to_vec();
                for i in 0..inputs {
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &w[i * outputs..(i + 1) * outputs];
                    for (yo, wo) in y.iter_mut().zip(row) {
                        *yo += xi * wo;
                    }
                }
                (y, None)
            }
            Op::Conv { in_ch, out_ch, kernel, stride, in_h, in_w, out_h, out_w } => {
                let mut y = vec![0.0; out_ch * out_h * out_w];
                for oc in 0..out_ch {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let mut acc = b[oc];
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let xrow = (ic * in_h + oy * stride + ky) * in_w + ox * stride;
                                    let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                    for kx in 0..kernel {
                                        acc += w[wrow + kx] * x[xrow + kx];
                                    }
                                }
                            }
                            y[(oc * out_h + oy) * out_w + ox] = acc;
                        }
                    }
                }
                (y, None)
            }
            Op::Pool { channels, kernel, in_h, in_w, out_h, out_w } => {
                let mut y = vec![0.0; channels * out_h * out_w];
                let mut arg = vec![0; y.len()];
                for c in 0..channels {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = 0;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let at = (c * in_h + oy * kernel + ky) * in_w + ox * kernel + kx;
                                    if x[at] > best {
                                        best = x[at];
                                        best_at = at;
                                    }
                                }
                            }
                            let o = (c * out_h + oy) * out_w + ox;
                            y[o] = best;
                            arg[o] = best_at;
                        }
                    }
                }
                (y, Some(arg))
            }
            Op::Flatten => (x.to_vec(), None),
        }
    }

    fn forward_trace(&self, input: &[f32]) -> Trace {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(input.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
        let mut argmax = Vec::new();
        for layer in &self.layers {
            let (mut y, arg) = self.layer_pre(layer, outputs.last().expect("input present"));
            argmax.extend(arg);
            if layer.activation != Activation::Identity {
                y.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            }
            outputs.push(y);
        }
        Trace { outputs, argmax }
    }

    pub fn logits(&self, input: &[f32]) -> Vec<f64> {
        self.forward_trace(input).outputs.pop().expect("at least one layer")
    }

    /// Mean softmax cross-entropy and argmax accuracy.
    pub fn forward_loss(&self, batch: &Batch) -> Result<Evaluation> {
        self.check_batch(batch)?;
        let per_example: Vec<(f64, bool)> = batch
            .inputs
            .par_iter()
            .zip(batch.labels.par_iter())
            .map(|(x, &y)| {
                let z = self.logits(x);
                let (loss, _) = softmax_cross_entropy(&z, y);
                (loss, argmax(&z) == y)
            })
            .collect();
        Ok(summarise(&per_example))
    }

    /// Mean loss, accuracy and the gradient of the mean loss with respect to
    /// the flat weight vector.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(Evaluation, Vec<f64>)> {
        self.check_batch(batch)?;
        let m = self.weights.len();
        let partials: Vec<(Vec<f64>, Vec<(f64, bool)>)> = batch
            .inputs
            .par_chunks(EXAMPLE_CHUNK)
            .zip(batch.labels.par_chunks(EXAMPLE_CHUNK))
            .map(|(xs, ys)| {
                let mut grad = vec![0.0; m];
                let stats = xs
                    .iter()
                    .zip(ys)
                    .map(|(x, &y)| self.backward_one(x, y, &mut grad))
                    .collect();
                (grad, stats)
            })
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; m];
        let mut stats = Vec::with_capacity(batch.len());
        for (g, s) in partials {
            grad.iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
            stats.extend(s);
        }
        grad.iter_mut().for_each(|v| *v *= scale);
        Ok((summarise(&stats), grad))
    }

    /// Gradient of the mean loss with respect to the flat weights.
    pub fn backward(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.loss_and_gradient(batch).map(|(_, g)| g)
    }

    fn backward_one(&self, input: &[f32], label: usize, grad: &mut [f64]) -> (f64, bool) {
        let trace = self.forward_trace(input);
        let logits = trace.outputs.last().expect("at least one layer");
        let (loss, mut delta) = softmax_cross_entropy(logits, label);
        let correct = argmax(logits) == label;
        let mut pool_idx = trace.argmax.len();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.outputs[k + 1];
            let x = &trace.outputs[k];
            if layer.activation != Activation::Identity {
                for (d, &yo) in delta.iter_mut().zip(y) {
                    *d *= layer.activation.derivative_from_output(yo);
                }
            }
            let (wg, bg) = grad[layer.offset..layer.offset + layer.weight_len + layer.bias_len].split_at_mut(layer.weight_len);
            let w = &self.weights[layer.offset..layer.offset + layer.weight_len];
            let need_input_grad = k > 0;
            delta = match layer.op {
                Op::Dense { inputs, outputs } => {
                    bg.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
                    let mut dx = vec![0.0; if need_input_grad { inputs } else { 0 }];
                    for i in 0..inputs {
                        let xi = x[i];
                        let row = &w[i * outputs..(i + 1) * outputs];
                        let grow = &mut wg[i * outputs..(i + 1) * outputs];
                        if xi != 0.0 {
                            for (g, d) in grow.iter_mut().zip(&delta) {
                                *g += xi * d;
                            }
                        }
                        if need_input_grad {
                            dx[i] = row.iter().zip(&delta).map(|(wo, d)| wo * d).sum();
                        }
                    }
                    dx
                }
                Op::Conv { in_ch, out_ch, kernel, stride, in_h, in_w, out_h, out_w } => {
                    let mut dx = vec![0.0; if need_input_grad { in_ch * in_h * in_w } else { 0 }];
                    for oc in 0..out_ch {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let d = delta[(oc * out_h + oy) * out_w + ox];
                                if d == 0.0 {
                                    continue;
                                }
                                bg[oc] += d;
                                for ic in 0..in_ch {
                                    for ky in 0..kernel {
                                        let xrow = (ic * in_h + oy * stride + ky) * in_w + ox * stride;
                                        let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                        for kx in 0..kernel {
                                            wg[wrow + kx] += d * x[xrow + kx];
                                            if need_input_grad {
                                                dx[xrow + kx] += d * w[wrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                }
                Op::Pool { channels, in_h, in_w, .. } => {
                    pool_idx -= 1;
                    let mut dx = vec![0.0; channels * in_h * in_w];
                    for (o, &at) in trace.argmax[pool_idx].iter().enumerate() {
                        dx[at] += delta[o];
                    }
                    dx
                }
                Op::Flatten => delta,
            };
        }
        (loss, correct)
    }

    /// Smallest |pre-activation| feeding any ReLU over the batch. Finite
    /// difference checks use it to avoid sampling across a kink.
    pub fn relu_margin(&self, batch: &Batch) -> f64 {
        let mut margin = f64::INFINITY;
        for x in &batch.inputs {
            let trace = self.forward_trace(x);
            for (k, layer) in self.layers.iter().enumerate() {
                if layer.activation == Activation::Relu {
                    let (pre, _) = self.layer_pre(layer, &trace.outputs[k]);
                    margin = pre.iter().fold(margin, |m, z| m.min(z.abs()));
                }
            }
        }
        margin
    }
}

fn summarise(stats: &[(f64, bool)]) -> Evaluation {
    let n = stats.len() as f64;
    let loss = stats.iter().map(|s| s.0).sum::<f64>() / n;
    let correct = stats.iter().filter(|s| s.1).count() as f64;
    Evaluation { loss, accuracy: correct / n }
}

/// Loss `logsumexp(z) − z_y` and its gradient `softmax(z) − e_y`.
fn softmax_cross_entropy(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - z[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}
