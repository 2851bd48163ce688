//! Dense feed-forward networks: construction, Glorot initialization, forward
//! passes with optional activation capture, backpropagation and SGD training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::nn::activation::Activation;
use crate::nn::loss::LossFn;
use crate::nn::profile::ActivationProfile;

/// Shape and nonlinearity of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_size: usize, output_size: usize, activation: Activation) -> Self {
        LayerSpec {
            input_size,
            output_size,
            activation,
        }
    }
}

/// Hyperparameters for one SGD training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Seeds the per-epoch shuffling; the same config on the same data
    /// reproduces the exact same weights.
    pub seed: u64,
}

/// Per-epoch statistics from a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    /// Loss of the last epoch, if any epoch ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// One dense layer's parameters: a row-major `output_size x input_size`
/// weight matrix and a bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    spec: LayerSpec,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(spec: LayerSpec, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if spec.input_size == 0 || spec.output_size == 0 {
            return Err(Error::Shape(format!(
                "layer dimensions must be positive, got {}x{}",
                spec.output_size, spec.input_size
            )));
        }
        if weights.len() != spec.input_size * spec.output_size {
            return Err(Error::Shape(format!(
                "layer {}x{} needs {} weights, got {}",
                spec.output_size,
                spec.input_size,
                spec.input_size * spec.output_size,
                weights.len()
            )));
        }
        if bias.len() != spec.output_size {
            return Err(Error::Shape(format!(
                "layer with {} outputs needs {} biases, got {}",
                spec.output_size,
                spec.output_size,
                bias.len()
            )));
        }
        Ok(DenseLayer {
            spec,
            weights,
            bias,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Row `o` of the weight matrix (the fan-in of output unit `o`).
    fn weight_row(&self, o: usize) -> &[f32] {
        &self.weights[o * self.spec.input_size..(o + 1) * self.spec.input_size]
    }

    /// Forward one batch through this layer, applying the activation.
    fn forward_batch(&self, input: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(input.rows(), self.spec.output_size);
        for b in 0..input.rows() {
            let x = input.row(b);
            let row = out.row_mut(b);
            for (o, slot) in row.iter_mut().enumerate() {
                *slot = dot(self.weight_row(o), x) + self.bias[o];
            }
            self.spec.activation.apply(row);
        }
        out
    }
}

/// A full network: a chain of dense layers with compatible shapes.
///
/// Softmax is only permitted on the final layer; backpropagation handles it
/// fused with the cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    layers: Vec<DenseLayer>,
}

impl WeightSet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].spec.output_size != pair[1].spec.input_size {
                return Err(Error::Shape(format!(
                    "layer with {} outputs feeds a layer expecting {} inputs",
                    pair[0].spec.output_size, pair[1].spec.input_size
                )));
            }
        }
        let last = layers.len() - 1;
        if let Some(pos) = layers[..last]
            .iter()
            .position(|l| l.spec.activation == Activation::Softmax)
        {
            return Err(Error::Shape(format!(
                "softmax on hidden layer {pos}; it is only supported as the output layer"
            )));
        }
        Ok(WeightSet { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input_size
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_size
    }

    pub fn head_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].spec.activation
    }

    /// Output width of every layer, in order. The sum is the length of an
    /// activation profile for this network.
    pub fn layer_output_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.spec.output_size).collect()
    }

    /// Total number of parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters as one flat vector: per layer, weights then biases, in
    /// layer order. This is the canonical coordinate layout used by the
    /// aggregation rules.
    pub fn flatten(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    /// Rebuild a network from [`WeightSet::flatten`] output.
    pub fn from_flat(specs: &[LayerSpec], flat: &[f32]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut cursor = 0usize;
        for spec in specs {
            let n_w = spec.input_size * spec.output_size;
            let end = cursor + n_w + spec.output_size;
            if end > flat.len() {
                return Err(Error::Shape(format!(
                    "flat parameter vector of length {} is too short for the given specs",
                    flat.len()
                )));
            }
            let weights = flat[cursor..cursor + n_w].to_vec();
            let bias = flat[cursor + n_w..end].to_vec();
            layers.push(DenseLayer::new(*spec, weights, bias)?);
            cursor = end;
        }
        if cursor != flat.len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, specs need {cursor}",
                flat.len()
            )));
        }
        WeightSet::new(layers)
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_size() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                inputs.cols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Post-activation outputs of every layer for the batch.
    pub(crate) fn forward_all(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(inputs)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = inputs;
        for layer in &self.layers {
            acts.push(layer.forward_batch(current));
            current = acts.last().expect("just pushed");
        }
        Ok(acts)
    }

    /// Forward the batch, returning final outputs plus one activation profile
    /// per input row (the concatenated post-activation values of all layers,
    /// output layer included).
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, Vec<ActivationProfile>)> {
        let mut acts = self.forward_all(inputs)?;
        let slices = ActivationProfile::layout(&self.layer_output_sizes());
        let total: usize = slices.iter().map(|s| s.len).sum();
        let mut profiles = Vec::with_capacity(inputs.rows());
        for b in 0..inputs.rows() {
            let mut values = Vec::with_capacity(total);
            for a in &acts {
                values.extend_from_slice(a.row(b));
            }
            profiles.push(ActivationProfile::new(values, slices.clone())?);
        }
        let outputs = acts.pop().expect("at least one layer");
        Ok((outputs, profiles))
    }

    /// Forward the batch keeping only the final outputs.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut current = self.layers[0].forward_batch(inputs);
        for layer in &self.layers[1..] {
            current = layer.forward_batch(&current);
        }
        Ok(current)
    }

    /// `self -= learning_rate * grads`, elementwise.
    pub fn apply_gradients(&mut self, grads: &GradientSet, learning_rate: f32) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(&mut layer.weights, -learning_rate, &g.d_weights);
            axpy(&mut layer.bias, -learning_rate, &g.d_bias);
        }
    }
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub d_weights: Vec<f32>,
    pub d_bias: Vec<f32>,
}

/// Gradients for every layer of a network, in layer order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    layers: Vec<LayerGradient>,
}

impl GradientSet {
    fn zeros_like(weights: &WeightSet) -> Self {
        GradientSet {
            layers: weights
                .layers
                .iter()
                .map(|l| LayerGradient {
                    d_weights: vec![0.0; l.weights.len()],
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGradient] {
        &self.layers
    }

    /// Multiply every entry by `factor`.
    pub fn scale(&mut self, factor: f32) {
        for l in &mut self.layers {
            for v in l.d_weights.iter_mut().chain(l.d_bias.iter_mut()) {
                *v *= factor;
            }
        }
    }

    /// Same flat layout as [`WeightSet::flatten`].
    pub fn flatten(&self) -> Vec<f32> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.d_weights);
            flat.extend_from_slice(&l.d_bias);
        }
        flat
    }
}

/// Glorot-initialize a network: weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero. Weights are drawn row-major
/// layer by layer from a ChaCha stream, so the result is a pure function of
/// `(specs, seed)`.
pub fn init_weights(specs: &[LayerSpec], seed: u64) -> Result<WeightSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.input_size == 0 || spec.output_size == 0 {
            return Err(Error::Shape(format!(
                "layer dimensions must be positive, got {}x{}",
                spec.output_size, spec.input_size
            )));
        }
        let limit = (6.0 / (spec.input_size + spec.output_size) as f64).sqrt() as f32;
        let weights = (0..spec.input_size * spec.output_size)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        layers.push(DenseLayer::new(
            *spec,
            weights,
            vec![0.0; spec.output_size],
        )?);
    }
    WeightSet::new(layers)
}

/// Batch-mean loss of the network on the given inputs.
pub fn loss(weights: &WeightSet, inputs: &Matrix, loss_fn: &LossFn) -> Result<f64> {
    loss_fn.validate(weights, inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let outputs = weights.predict(inputs)?;
    Ok(loss_fn.value(&outputs))
}

/// Gradient of the batch-mean loss with respect to every parameter.
pub fn gradient(weights: &WeightSet, inputs: &Matrix, loss_fn: &LossFn) -> Result<GradientSet> {
    Ok(gradient_with_loss(weights, inputs, loss_fn)?.0)
}

/// Gradient plus the loss value from the same forward pass.
pub fn gradient_with_loss(
    weights: &WeightSet,
    inputs: &Matrix,
    loss_fn: &LossFn,
) -> Result<(GradientSet, f64)> {
    loss_fn.validate(weights, inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let acts = weights.forward_all(inputs)?;
    let (value, d_head) = loss_fn.value_and_head_gradient(acts.last().expect("nonempty"));
    let grads = backprop(weights, inputs, &acts, d_head);
    Ok((grads, value))
}

/// Backpropagate from the head gradient. `d_head` is the gradient with
/// respect to the final layer's pre-softmax logits for cross-entropy (the
/// loss provides it fused) or its raw outputs for an identity head.
fn backprop(weights: &WeightSet, inputs: &Matrix, acts: &[Matrix], d_head: Matrix) -> GradientSet {
    let batch = inputs.rows();
    let mut grads = GradientSet::zeros_like(weights);
    let mut d_z = d_head;
    for l in (0..weights.layers.len()).rev() {
        let layer = &weights.layers[l];
        let a_prev: &Matrix = if l == 0 { inputs } else { &acts[l - 1] };
        let in_size = layer.spec.input_size;
        let lg = &mut grads.layers[l];
        for o in 0..layer.spec.output_size {
            let w_row = &mut lg.d_weights[o * in_size..(o + 1) * in_size];
            let mut db = 0.0f32;
            for b in 0..batch {
                let s = d_z.row(b)[o];
                if s != 0.0 {
                    axpy(w_row, s, a_prev.row(b));
                    db += s;
                }
            }
            lg.d_bias[o] = db;
        }
        if l > 0 {
            let mut d_prev = Matrix::zeros(batch, in_size);
            for b in 0..batch {
                let dzb = d_z.row(b);
                let dp = d_prev.row_mut(b);
                for o in 0..layer.spec.output_size {
                    let s = dzb[o];
                    if s != 0.0 {
                        axpy(dp, s, layer.weight_row(o));
                    }
                }
                weights.layers[l - 1]
                    .spec
                    .activation
                    .mask_gradient(acts[l - 1].row(b), dp);
            }
            d_z = d_prev;
        }
    }
    grads
}

/// Train a classifier copy by mini-batch SGD under softmax cross-entropy.
///
/// Each epoch visits every sample once in a freshly shuffled order drawn from
/// `cfg.seed`; the final short batch is kept. Returns the trained weights,
/// leaving the input untouched. A non-finite epoch loss aborts with
/// [`Error::Diverged`].
pub fn train(
    weights: &WeightSet,
    samples: &Matrix,
    labels: &[u32],
    cfg: &TrainConfig,
) -> Result<WeightSet> {
    Ok(train_with_report(weights, samples, labels, cfg)?.0)
}

/// [`train`], also returning per-epoch mean losses.
pub fn train_with_report(
    weights: &WeightSet,
    samples: &Matrix,
    labels: &[u32],
    cfg: &TrainConfig,
) -> Result<(WeightSet, TrainReport)> {
    if samples.rows() == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if samples.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning_rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }

    let mut w = weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.rows()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = samples.gather_rows(chunk);
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (grads, batch_loss) = gradient_with_loss(
                &w,
                &batch,
                &LossFn::CrossEntropy {
                    labels: &batch_labels,
                },
            )?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            w.apply_gradients(&grads, cfg.learning_rate);
            weighted += batch_loss * chunk.len() as f64;
        }
        report.epoch_losses.push(weighted / samples.rows() as f64);
    }
    Ok((w, report))
}
