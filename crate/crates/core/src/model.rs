//! Fixed-structure multilayer perceptron with manual backpropagation.
//!
//! A network is a chain of dense layers. The trailing `head_len` layers form
//! the classification head (one dense layer for a pretrained model, two after
//! low-rank replacement); everything before it is the feature extractor.
//! The head outputs two logits; class index 0 encodes label −1 and index 1
//! encodes label +1.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};

pub const NUM_CLASSES: usize = 2;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim × out_dim`.
    pub weight: Matrix,
    /// `None` for bias-free layers.
    pub bias: Option<Vec<f64>>,
    pub frozen: bool,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::shape(
                    "DenseLayer::new",
                    format!("bias of length {} for {} outputs", b.len(), weight.cols()),
                ));
            }
        }
        Ok(DenseLayer {
            weight,
            bias,
            frozen: false,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..=limit));
        DenseLayer {
            weight,
            bias: Some(vec![0.0; out_dim]),
            frozen: false,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = matmul(input, &self.weight)?;
        if let Some(b) = &self.bias {
            for i in 0..z.rows() {
                for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        Ok(z)
    }
}

/// Gradients aligned with a network's layers. Frozen layers hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl GradientSet {
    pub fn zeros_like(net: &NeuralNet) -> Self {
        GradientSet {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()]))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().flatten().all(|&v| v == 0.0)
    }
}

/// Fairness constraint used both as a training penalty and to pick the
/// matching evaluation metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    /// Demographic parity.
    Dp,
    /// Equalized odds.
    Eo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessPenalty {
    pub constraint: Constraint,
    pub intensity: f64,
}

/// Objective: `scale · (mean cross-entropy + intensity · R)`.
///
/// `R` is the soft positive-probability gap between groups: over the whole
/// batch for DP, and summed over the `y = +1` and `y = −1` subsets for EO.
/// A term whose subset lacks one of the groups contributes zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub penalty: Option<FairnessPenalty>,
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            penalty: None,
            scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn with_penalty(constraint: Constraint, intensity: f64) -> Self {
        LossConfig {
            penalty: Some(FairnessPenalty {
                constraint,
                intensity,
            }),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 30,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    layers: Vec<DenseLayer>,
    head_len: usize,
}

struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`.
    inputs: Vec<Matrix>,
    /// Pre-activations of every layer.
    pre: Vec<Matrix>,
}

#[inline]
pub(crate) fn class_index(label: i8) -> usize {
    usize::from(label > 0)
}

pub(crate) fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
    let sum = e0 + e1;
    [e0 / sum, e1 / sum]
}

impl NeuralNet {
    /// Builds a network from layers, the last `head_len` of which form the
    /// classification head.
    pub fn from_layers(layers: Vec<DenseLayer>, head_len: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("network needs at least one layer".into()));
        }
        if head_len == 0 || head_len > layers.len() {
            return Err(Error::Input(format!(
                "head length {head_len} for {} layers",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "NeuralNet::from_layers",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        let last = layers.last().expect("non-empty");
        if last.out_dim() != NUM_CLASSES || last.activation != Activation::Identity {
            return Err(Error::Input(
                "last layer must be an identity layer with 2 outputs".into(),
            ));
        }
        Ok(NeuralNet { layers, head_len })
    }

    /// MLP `input_dim → hidden… → 2` with ReLU hidden layers, Glorot init.
    pub fn mlp(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(NUM_CLASSES);
        if dims.contains(&0) {
            return Err(Error::Input(format!("zero-width layer in {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        NeuralNet::from_layers(layers, 1)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn head_len(&self) -> usize {
        self.head_len
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the representation fed into the classification head.
    pub fn representation_dim(&self) -> usize {
        self.layers[self.layers.len() - self.head_len].in_dim()
    }

    pub fn final_layer(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty")
    }

    /// Feature-extractor layers followed by `head`, which replaces the
    /// current head.
    pub fn with_head(&self, head: Vec<DenseLayer>) -> Result<Self> {
        let head_len = head.len();
        let mut layers = self.layers[..self.layers.len() - self.head_len].to_vec();
        layers.extend(head);
        NeuralNet::from_layers(layers, head_len)
    }

    /// Freezes every layer except the classification head.
    pub fn freeze_extractor(&mut self) {
        let split = self.layers.len() - self.head_len;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.frozen = i < split;
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            layer.frozen = frozen;
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(DenseLayer::param_count)
            .sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("{} features for a network expecting {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let z = layer.forward(&current)?;
            let mut a = z.clone();
            if layer.activation != Activation::Identity {
                for v in a.as_mut_slice() {
                    *v = layer.activation.apply(*v);
                }
            }
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Returns `(logits, representation)` where the representation is the
    /// input of the classification head.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut cache = self.forward_cached(x)?;
        let logits = cache.pre.pop().expect("non-empty");
        let rep = cache.inputs.swap_remove(self.layers.len() - self.head_len);
        Ok((logits, rep))
    }

    /// `(logits, input of the last layer)`. Equals `forward` for a
    /// single-layer head.
    pub fn final_layer_io(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut cache = self.forward_cached(x)?;
        let logits = cache.pre.pop().expect("non-empty");
        let input = cache.inputs.pop().expect("non-empty");
        Ok((logits, input))
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Positive-class probability per row.
    pub fn positive_probability(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|i| softmax2(z[(i, 0)], z[(i, 1)])[1])
            .collect())
    }

    /// Objective value without gradients.
    pub fn loss(&self, batch: &Dataset, cfg: &LossConfig) -> Result<f64> {
        let z = self.logits(&batch.x)?;
        Ok(objective(&z, &batch.y, &batch.s, cfg)?.0)
    }

    /// Objective and gradients for every unfrozen parameter.
    pub fn loss_and_grad(&self, batch: &Dataset, cfg: &LossConfig) -> Result<(f64, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::Input("loss_and_grad on an empty batch".into()));
        }
        let mut grads = GradientSet::zeros_like(self);
        let Some(lowest_trainable) = self.layers.iter().position(|l| !l.frozen) else {
            return Ok((self.loss(batch, cfg)?, grads));
        };
        let cache = self.forward_cached(&batch.x)?;
        let logits = cache.pre.last().expect("non-empty");
        let (loss, mut delta) = objective(logits, &batch.y, &batch.s, cfg)?;

        for l in (lowest_trainable..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if !layer.frozen {
                grads.weights[l] = matmul(&cache.inputs[l].transpose(), &delta)?;
                if let Some(gb) = &mut grads.biases[l] {
                    for i in 0..delta.rows() {
                        for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            if l == lowest_trainable {
                break;
            }
            let mut upstream = matmul(&delta, &layer.weight.transpose())?;
            let below = &self.layers[l - 1];
            if below.activation != Activation::Identity {
                let z = &cache.pre[l - 1];
                for (u, &zv) in upstream.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *u *= below.activation.derivative(zv);
                }
            }
            delta = upstream;
        }
        Ok((loss, grads))
    }

    /// `θ ← θ − lr · g` on unfrozen layers.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Input(format!("learning rate must be >= 0, got {lr}")));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::shape("sgd_step", "gradient set does not match network"));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if layer.frozen {
                continue;
            }
            let gw = &grads.weights[l];
            if gw.rows() != layer.weight.rows() || gw.cols() != layer.weight.cols() {
                return Err(Error::shape("sgd_step", format!("layer {l} weight gradient")));
            }
            for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * g;
            }
            if let (Some(b), Some(gb)) = (&mut layer.bias, &grads.biases[l]) {
                for (bv, g) in b.iter_mut().zip(gb) {
                    *bv -= lr * g;
                }
            }
        }
        Ok(())
    }

    /// Gradient of one sample's cross-entropy with respect to the final
    /// layer's weight (`d × k`) and bias.
    pub fn per_sample_grad_final_layer(&self, x: &[f64], y: i8) -> Result<(Matrix, Vec<f64>)> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let cache = self.forward_cached(&xm)?;
        let last = self.layers.len() - 1;
        let h = cache.inputs[last].row(0);
        let z = cache.pre[last].row(0);
        Ok(final_layer_grad(h, z, y))
    }

    /// Minibatch SGD. Returns the full-data objective before training
    /// followed by its value after each epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        loss_cfg: &LossConfig,
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if train.is_empty() {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        if cfg.batch == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        let mut history = vec![self.loss(train, loss_cfg)?];
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch) {
                let batch = train.select(chunk);
                let (loss, grads) = self.loss_and_grad(&batch, loss_cfg)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                self.sgd_step(&grads, cfg.lr)?;
            }
            let loss = self.loss(train, loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            history.push(loss);
        }
        Ok(history)
    }

    pub fn save_checkpoint(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            provenance,
            head_len: self.head_len,
            layers: self.layers.iter().map(LayerRecord::from).collect(),
        };
        let text = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            detail: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.into(),
                detail: format!(
                    "checkpoint format version {} (supported: {CHECKPOINT_FORMAT_VERSION})",
                    ckpt.format_version
                ),
            });
        }
        let layers = ckpt
            .layers
            .into_iter()
            .map(|r| {
                let weight = Matrix::from_vec(r.in_dim, r.out_dim, r.weight)?;
                let mut layer = DenseLayer::new(weight, r.bias, r.activation)?;
                layer.frozen = r.frozen;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format {
                path: path.into(),
                detail: e.to_string(),
            })?;
        NeuralNet::from_layers(layers, ckpt.head_len)
    }
}

/// Cross-entropy gradient of the final layer given its input `h` and
/// logits `z`: `(h ⊗ (p − t), p − t)`.
pub(crate) fn final_layer_grad(h: &[f64], z: &[f64], y: i8) -> (Matrix, Vec<f64>) {
    let p = softmax2(z[0], z[1]);
    let mut r = p.to_vec();
    r[class_index(y)] -= 1.0;
    let gw = Matrix::from_fn(h.len(), NUM_CLASSES, |i, j| h[i] * r[j]);
    (gw, r)
}

/// Objective value and its gradient with respect to the logits.
fn objective(z: &Matrix, y: &[i8], s: &[u8], cfg: &LossConfig) -> Result<(f64, Matrix)> {
    let n = z.rows();
    if n == 0 || y.len() != n || s.len() != n {
        return Err(Error::shape("objective", "logits, labels and groups disagree"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, NUM_CLASSES);
    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let (z0, z1) = (z[(i, 0)], z[(i, 1)]);
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let t = class_index(y[i]);
        loss += lse - z[(i, t)];
        let p = softmax2(z0, z1);
        grad[(i, 0)] = (p[0] - if t == 0 { 1.0 } else { 0.0 }) * inv_n;
        grad[(i, 1)] = (p[1] - if t == 1 { 1.0 } else { 0.0 }) * inv_n;
        q.push(p[1]);
    }
    loss *= inv_n;

    if let Some(pen) = cfg.penalty {
        if pen.intensity != 0.0 {
            let mut dq = vec![0.0; n];
            let subsets: Vec<Option<i8>> = match pen.constraint {
                Constraint::Dp => vec![None],
                Constraint::Eo => vec![Some(1), Some(-1)],
            };
            let mut reg = 0.0;
            for label in subsets {
                let member = |i: usize| label.is_none_or(|l| y[i] == l);
                let (mut sum1, mut n1, mut sum2, mut n2) = (0.0, 0usize, 0.0, 0usize);
                for i in (0..n).filter(|&i| member(i)) {
                    if s[i] == 1 {
                        sum1 += q[i];
                        n1 += 1;
                    } else {
                        sum2 += q[i];
                        n2 += 1;
                    }
                }
                if n1 == 0 || n2 == 0 {
                    continue;
                }
                let gap = sum1 / n1 as f64 - sum2 / n2 as f64;
                reg += gap.abs();
                let sign = if gap > 0.0 {
                    1.0
                } else if gap < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for i in (0..n).filter(|&i| member(i)) {
                    dq[i] += if s[i] == 1 {
                        sign / n1 as f64
                    } else {
                        -sign / n2 as f64
                    };
                }
            }
            loss += pen.intensity * reg;
            for i in 0..n {
                // dq/dz1 = q(1 − q), dq/dz0 = −q(1 − q)
                let g = pen.intensity * dq[i] * q[i] * (1.0 - q[i]);
                grad[(i, 1)] += g;
                grad[(i, 0)] -= g;
            }
        }
    }

    if cfg.scale != 1.0 {
        loss *= cfg.scale;
        for v in grad.as_mut_slice() {
            *v *= cfg.scale;
        }
    }
    Ok((loss, grad))
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    frozen: bool,
    /// Row-major `in_dim × out_dim`.
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl From<&DenseLayer> for LayerRecord {
    fn from(l: &DenseLayer) -> Self {
        LayerRecord {
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            activation: l.activation,
            frozen: l.frozen,
            weight: l.weight.as_slice().to_vec(),
            bias: l.bias.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    provenance: serde_json::Value,
    head_len: usize,
    layers: Vec<LayerRecord>,
}
