//! Client-side federated learning simulator.
//!
//! Simulates an MLP with ReLU activations and produces the gradient (or
//! update) observations an honest-but-curious server would see under FedSGD,
//! FedAvg and DP-SGD, together with sealed ground truth for evaluation.

mod capture_io;
mod dataset;

pub use capture_io::{load_capture, save_capture};
pub use dataset::{load_cifar_file, load_dataset, save_matrix_file, DatasetSource};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One fully-connected layer: `z = W a + bias`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// MLP with ReLU on every hidden layer and a linear output layer.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Builds a model from explicit layers, checking that shapes compose.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias has {} entries but weight has {} rows",
                    layer.bias.len(),
                    layer.weight.nrows()
                )));
            }
            if k > 0 && layers[k - 1].weight.nrows() != layer.weight.ncols() {
                return Err(Error::Shape(format!(
                    "layer {k}: expects {} inputs but layer {} emits {}",
                    layer.weight.ncols(),
                    k - 1,
                    layers[k - 1].weight.nrows()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Fresh model with `hidden_layers` ReLU layers of width `hidden_width`
    /// and a linear head, Kaiming-style uniform init scaled by fan-in.
    pub fn random(
        input_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        assert!(input_dim > 0 && hidden_width > 0 && hidden_layers > 0 && classes > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        dims.push(classes);

        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let w_bound = (6.0 / fan_in as f64).sqrt();
                let b_bound = 1.0 / (fan_in as f64).sqrt();
                DenseLayer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.gen_range(-w_bound..w_bound)
                    }),
                    bias: DVector::from_fn(fan_out, |_, _| rng.gen_range(-b_bound..b_bound)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn first_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }
}

/// A batch of vectorized datapoints: `inputs` holds one column per datum.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(Error::Config("batch must contain at least one column".into()));
        }
        if labels.len() != inputs.ncols() {
            return Err(Error::Shape(format!(
                "batch has {} columns but {} labels",
                inputs.ncols(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_datapoints(points: &[(DVector<f64>, usize)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("batch must contain at least one column".into()));
        }
        let dim = points[0].0.len();
        let inputs = DMatrix::from_fn(dim, points.len(), |i, j| points[j].0[i]);
        let labels = points.iter().map(|(_, label)| *label).collect();
        Self::new(inputs, labels)
    }

    pub fn size(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Per-layer pre-activations and activations from one forward pass.
/// `activations[0]` is the input; `pre_activations.last()` holds the logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre_activations: Vec<DMatrix<f64>>,
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.pre_activations.last().unwrap()
    }
}

/// Runs the model on `inputs` (one column per datum), recording every
/// pre-activation `Z_k = W_k A_{k-1} + (bias | ... | bias)`.
pub fn forward(model: &MlpModel, inputs: &DMatrix<f64>) -> Result<ForwardTrace> {
    if inputs.nrows() != model.input_dim() {
        return Err(Error::Shape(format!(
            "layer 0: expects {} inputs but batch has {} rows",
            model.input_dim(),
            inputs.nrows()
        )));
    }
    let depth = model.layers.len();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);
    activations.push(inputs.clone());

    for (k, layer) in model.layers.iter().enumerate() {
        let prev = &activations[k];
        let mut z = &layer.weight * prev;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        let act = if k + 1 < depth {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre_activations.push(z);
        activations.push(act);
    }
    Ok(ForwardTrace {
        pre_activations,
        activations,
    })
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let b = logits.ncols();
    assert_eq!(labels.len(), b);
    let mut total = 0.0;
    for (j, col) in logits.column_iter().enumerate() {
        let max = col.max();
        let log_sum: f64 = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - col[labels[j]];
    }
    total / b as f64
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(softmax - onehot)/b`.
fn logit_gradient(logits: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let b = logits.ncols();
    let mut grad = logits.clone();
    for (j, mut col) in grad.column_iter_mut().enumerate() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum: f64 = col.iter().sum();
        col /= sum;
        col[labels[j]] -= 1.0;
        col /= b as f64;
    }
    grad
}

/// Backprop deltas `dL/dZ_k` for every layer, last to first, returned in
/// forward order. The ReLU derivative at exactly zero is taken as zero, so
/// `dL/dZ` is exactly zero wherever `Z <= 0`.
fn backward_deltas(model: &MlpModel, trace: &ForwardTrace, labels: &[usize]) -> Vec<DMatrix<f64>> {
    let depth = model.layers.len();
    let mut deltas = vec![DMatrix::zeros(0, 0); depth];
    deltas[depth - 1] = logit_gradient(trace.logits(), labels);
    for k in (0..depth - 1).rev() {
        let mut delta = model.layers[k + 1].weight.transpose() * &deltas[k + 1];
        delta.zip_apply(&trace.pre_activations[k], |d, z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        deltas[k] = delta;
    }
    deltas
}

/// Weight/bias gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

fn assemble_layer_grads(trace: &ForwardTrace, deltas: &[DMatrix<f64>]) -> Vec<LayerGrads> {
    deltas
        .iter()
        .enumerate()
        .map(|(k, delta)| LayerGrads {
            weight: delta * trace.activations[k].transpose(),
            bias: delta.column_sum(),
        })
        .collect()
}

/// Full-batch gradients of the mean loss for every layer, plus the
/// first-layer activation gradient `dL/dZ_1`.
pub fn batch_gradients(
    model: &MlpModel,
    batch: &Batch,
) -> Result<(Vec<LayerGrads>, DMatrix<f64>)> {
    check_labels(model, batch)?;
    let trace = forward(model, &batch.inputs)?;
    let deltas = backward_deltas(model, &trace, &batch.labels);
    let grads = assemble_layer_grads(&trace, &deltas);
    let first_dz = deltas.into_iter().next().unwrap();
    Ok((grads, first_dz))
}

fn check_labels(model: &MlpModel, batch: &Batch) -> Result<()> {
    let classes = model.classes();
    if let Some(bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// How the observed gradient was produced, with the parameters the attacker
/// learns from protocol metadata.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    FedSgd,
    FedAvg {
        epochs: u32,
        mini_batch: u32,
        learning_rate: f64,
    },
    DpSgd {
        clip: f64,
        noise_std: f64,
    },
}

impl Protocol {
    /// Noise standard deviation carried by the protocol, if any.
    pub fn noise_std(&self) -> f64 {
        match self {
            Protocol::DpSgd { noise_std, .. } => *noise_std,
            _ => 0.0,
        }
    }
}

/// Sealed ground truth for evaluation: the batch, the first-layer
/// pre-activations and the first-layer activation gradient.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub inputs: DMatrix<f64>,
    pub pre_activations: DMatrix<f64>,
    pub activation_gradient: DMatrix<f64>,
}

/// Everything the attacker observes for one round, plus optional sealed truth.
#[derive(Debug, Clone)]
pub struct GradientCapture {
    pub weight_gradient: DMatrix<f64>,
    pub bias_gradient: DVector<f64>,
    pub layer_weight: DMatrix<f64>,
    pub layer_bias: DVector<f64>,
    pub protocol: Protocol,
    pub seed: u64,
    pub batch_size: usize,
    pub truth: Option<GroundTruth>,
}

impl GradientCapture {
    pub fn width(&self) -> usize {
        self.weight_gradient.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight_gradient.ncols()
    }
}

/// One FedSGD round: the client sends the full-batch gradient.
pub fn capture_fedsgd(model: &MlpModel, batch: &Batch, seed: u64) -> Result<GradientCapture> {
    check_labels(model, batch)?;
    let trace = forward(model, &batch.inputs)?;
    let deltas = backward_deltas(model, &trace, &batch.labels);
    let grads = assemble_layer_grads(&trace, &deltas);
    Ok(capture_from_first_layer(
        model,
        grads.into_iter().next().unwrap(),
        Protocol::FedSgd,
        seed,
        batch.size(),
        GroundTruth {
            inputs: batch.inputs.clone(),
            pre_activations: trace.pre_activations[0].clone(),
            activation_gradient: deltas.into_iter().next().unwrap(),
        },
    ))
}

fn capture_from_first_layer(
    model: &MlpModel,
    first: LayerGrads,
    protocol: Protocol,
    seed: u64,
    batch_size: usize,
    truth: GroundTruth,
) -> GradientCapture {
    GradientCapture {
        weight_gradient: first.weight,
        bias_gradient: first.bias,
        layer_weight: model.layers[0].weight.clone(),
        layer_bias: model.layers[0].bias.clone(),
        protocol,
        seed,
        batch_size,
        truth: Some(truth),
    }
}

/// One DP-SGD round: per-example gradients clipped to l2 norm `clip` over the
/// concatenation of all layers, averaged, then Gaussian noise of standard
/// deviation `noise_std` added per coordinate.
pub fn capture_dpsgd(
    model: &MlpModel,
    batch: &Batch,
    clip: f64,
    noise_std: f64,
    seed: u64,
) -> Result<GradientCapture> {
    if clip <= 0.0 {
        return Err(Error::Config("dp-sgd clip norm must be positive".into()));
    }
    if noise_std < 0.0 {
        return Err(Error::Config("dp-sgd noise std must be nonnegative".into()));
    }
    check_labels(model, batch)?;
    let b = batch.size();
    let trace = forward(model, &batch.inputs)?;
    let mut deltas = backward_deltas(model, &trace, &batch.labels);

    // Per-example gradient of layer k is the outer product
    // delta_k[:, i] * act_{k-1}[:, i]^T, so its squared norm (weights plus
    // bias) factors as |delta|^2 * (1 + |act|^2). The deltas carry the 1/b of
    // the mean loss, hence the rescale by b to get per-example loss norms.
    let mut scales = vec![1.0_f64; b];
    for i in 0..b {
        let mut sq = 0.0;
        for (k, delta) in deltas.iter().enumerate() {
            let d2 = delta.column(i).norm_squared();
            let a2 = trace.activations[k].column(i).norm_squared();
            sq += d2 * (1.0 + a2);
        }
        let norm = b as f64 * sq.sqrt();
        if norm > clip {
            scales[i] = clip / norm;
        }
    }
    for delta in deltas.iter_mut() {
        for (i, mut col) in delta.column_iter_mut().enumerate() {
            col *= scales[i];
        }
    }
    let grads = assemble_layer_grads(&trace, &deltas);
    let mut first = grads.into_iter().next().unwrap();

    // Only the first layer is emitted, so noise is drawn for it alone.
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        first
            .weight
            .apply(|v| *v += noise_std * rng.sample::<f64, _>(StandardNormal));
        first
            .bias
            .apply(|v| *v += noise_std * rng.sample::<f64, _>(StandardNormal));
    }

    Ok(capture_from_first_layer(
        model,
        first,
        Protocol::DpSgd { clip, noise_std },
        seed,
        b,
        GroundTruth {
            inputs: batch.inputs.clone(),
            pre_activations: trace.pre_activations[0].clone(),
            activation_gradient: deltas.into_iter().next().unwrap(),
        },
    ))
}

/// One FedAvg round: `epochs` epochs of local SGD in minibatches of
/// `mini_batch`, observed as the first-layer parameter difference divided by
/// the learning rate. Minibatch order is reshuffled every epoch from `seed`;
/// a short trailing minibatch is kept.
pub fn capture_fedavg(
    model: &MlpModel,
    batch: &Batch,
    epochs: u32,
    mini_batch: u32,
    learning_rate: f64,
    seed: u64,
) -> Result<GradientCapture> {
    if epochs < 1 {
        return Err(Error::Config("fedavg epochs must be >= 1".into()));
    }
    if mini_batch < 1 {
        return Err(Error::Config("fedavg mini-batch size must be >= 1".into()));
    }
    if learning_rate <= 0.0 {
        return Err(Error::Config("fedavg learning rate must be positive".into()));
    }
    check_labels(model, batch)?;

    // Ground truth at the initial parameters; this is what the attack
    // approximately reconstructs.
    let init_trace = forward(model, &batch.inputs)?;
    let init_deltas = backward_deltas(model, &init_trace, &batch.labels);

    let mut local = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch.size();
    let mut order: Vec<usize> = (0..b).collect();

    for _ in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(mini_batch as usize) {
            let inputs = batch.inputs.select_columns(chunk.iter());
            let labels: Vec<usize> = chunk.iter().map(|&i| batch.labels[i]).collect();
            let trace = forward(&local, &inputs)?;
            let deltas = backward_deltas(&local, &trace, &labels);
            let grads = assemble_layer_grads(&trace, &deltas);
            for (layer, grad) in local.layers.iter_mut().zip(grads) {
                layer.weight -= learning_rate * grad.weight;
                layer.bias -= learning_rate * grad.bias;
            }
        }
    }

    let pseudo_weight = (&model.layers[0].weight - &local.layers[0].weight) / learning_rate;
    let pseudo_bias = (&model.layers[0].bias - &local.layers[0].bias) / learning_rate;

    Ok(GradientCapture {
        weight_gradient: pseudo_weight,
        bias_gradient: pseudo_bias,
        layer_weight: model.layers[0].weight.clone(),
        layer_bias: model.layers[0].bias.clone(),
        protocol: Protocol::FedAvg {
            epochs,
            mini_batch,
            learning_rate,
        },
        seed,
        batch_size: b,
        truth: Some(GroundTruth {
            inputs: batch.inputs.clone(),
            pre_activations: init_trace.pre_activations[0].clone(),
            activation_gradient: init_deltas.into_iter().next().unwrap(),
        }),
    })
}
