//! Gated networks: every prunable channel's output is multiplied by a gate.
//!
//! A gate of `1` leaves the channel untouched and a gate of `0` makes the
//! network compute exactly what it would compute with the channel (its
//! producing filter, bias and consuming weight slices) physically removed.
//! Gates are continuous leaves of the tape, so `∂L/∂m` is well defined for
//! every channel. Gates are applied to the linear layer's output, before
//! any activation.
//!
//! Layers form a sequence; `ResidualAdd { from }` adds the output of an
//! earlier layer to the running activation.

pub mod checkpoint;
mod data;
mod train;

pub use data::{Batch, Dataset};
pub use train::{evaluate, sgd_step, train, EpochRecord, SgdState, TrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::autograd::{GatedObjective, LossGrad, Role, Tape, Var};
use crate::error::{Error, Result};
use crate::ndtensor::{SeededRng, Tensor};
use crate::{Tape64, Tensor64};

const INIT_STREAM: u64 = 0x1A17;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, gated: bool },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, gated: bool },
    Relu,
    AvgPool { size: usize },
    Flatten,
    ResidualAdd { from: usize },
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn is_gated(&self) -> bool {
        matches!(self, LayerSpec::Dense { gated: true, .. } | LayerSpec::Conv2d { gated: true, .. })
    }

    /// (weight shape, bias shape) of a linear layer.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some((vec![inputs, outputs], vec![outputs])),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }
}

/// A prunable channel: output channel `channel` of layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl std::fmt::Display for ChannelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.layer, self.channel)
    }
}

/// Weight and bias of a linear layer. Dense weights are `[in, out]`, conv kernels `OIHW`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor64,
    pub bias: Tensor64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedModel {
    pub arch: String,
    /// Shape of one sample, e.g. `[2]` or `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Option<LayerParams>>,
    pub gates: Vec<Option<Vec<f64>>>,
}

/// Whether gate leaves are shared across the batch or replicated per sample.
///
/// Per-sample gates have identical values but their gradients separate the
/// contribution of every sample, which is what Fisher-style scores need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Shared,
    PerSample,
}

/// Vars produced by recording a forward pass.
pub struct Recorded {
    pub logits: Var,
    pub weight_leaves: Vec<Var>,
    pub gate_leaves: Vec<Var>,
    pub activations: Vec<Var>,
}

fn mlp_layers(dims: &[usize]) -> Result<Vec<LayerSpec>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::UnknownArch(format!("mlp dims {dims:?}")));
    }
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let last = i + 2 == dims.len();
        layers.push(LayerSpec::Dense { inputs: pair[0], outputs: pair[1], gated: !last });
        if !last {
            layers.push(LayerSpec::Relu);
        }
    }
    Ok(layers)
}

fn conv(in_channels: usize, out_channels: usize, gated: bool) -> LayerSpec {
    LayerSpec::Conv2d { in_channels, out_channels, kernel: 3, stride: 1, pad: 1, gated }
}

/// Stem, shortcut source, then two identity-shortcut blocks of width `w` on 8×8 inputs.
fn res_layers(w: usize, classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        conv(1, w, false),
        Relu,
        conv(w, w, true),
        Relu, // 3: block-1 input
        conv(w, w, true),
        Relu,
        conv(w, w, true),
        ResidualAdd { from: 3 },
        Relu, // 8: block-2 input
        conv(w, w, true),
        Relu,
        conv(w, w, true),
        ResidualAdd { from: 8 },
        Relu,
        AvgPool { size: 2 },
        Flatten,
        Dense { inputs: w * 16, outputs: classes, gated: false },
    ]
}

fn vgg_layers(classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        conv(1, 8, false),
        Relu,
        conv(8, 16, true),
        Relu,
        AvgPool { size: 2 },
        conv(16, 16, true),
        Relu,
        AvgPool { size: 2 },
        Flatten,
        Dense { inputs: 64, outputs: 32, gated: true },
        Relu,
        Dense { inputs: 32, outputs: classes, gated: false },
    ]
}

/// Parses `mlp:2-16-8-2` style custom MLP names.
fn parse_mlp(arch: &str) -> Option<Vec<usize>> {
    let dims = arch.strip_prefix("mlp:")?;
    dims.split('-').map(|d| d.parse().ok()).collect()
}

/// Builds one of the named architectures with deterministic He-normal weights.
///
/// - `mlp-tiny`: 2-64-32-2 MLP, both hidden layers gated.
/// - `vgg-tiny`: three 3×3 convs with pooling on `[1, 8, 8]` inputs, 4 classes.
/// - `res-tiny`: stem + shortcut source + two width-8 identity-shortcut blocks, 4 classes.
/// - `mlp:a-b-...-z`: custom MLP, every hidden layer gated.
///
/// The first layer of a CNN (the stem convolution) is never gated.
pub fn build_model(arch: &str, seed: u64) -> Result<GatedModel> {
    let (input_shape, layers) = match arch {
        "mlp-tiny" => (vec![2], mlp_layers(&[2, 64, 32, 2])?),
        "vgg-tiny" => (vec![1, 8, 8], vgg_layers(4)),
        "res-tiny" => (vec![1, 8, 8], res_layers(8, 4)),
        other => match parse_mlp(other) {
            Some(dims) => (vec![dims[0]], mlp_layers(&dims)?),
            None => return Err(Error::UnknownArch(other.to_string())),
        },
    };
    GatedModel::from_layers(arch, input_shape, layers, seed)
}

impl GatedModel {
    /// Fresh model with He-normal weights, zero biases and all gates at 1.
    pub fn from_layers(arch: &str, input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed).split(INIT_STREAM);
        let mut params = Vec::with_capacity(layers.len());
        let mut gates = Vec::with_capacity(layers.len());
        for layer in &layers {
            match layer.param_shapes() {
                Some((wshape, bshape)) => {
                    let fan_in: usize = match layer {
                        LayerSpec::Dense { inputs, .. } => *inputs,
                        _ => wshape[1..].iter().product(),
                    };
                    let std = (2.0 / fan_in as f64).sqrt();
                    params.push(Some(LayerParams { weight: rng.normal(&wshape, 0.0, std), bias: Tensor::zeros(&bshape) }));
                }
                None => params.push(None),
            }
            gates.push(layer.is_gated().then(|| vec![1.0; layer.out_channels().unwrap_or(0)]));
        }
        let model = Self { arch: arch.to_string(), input_shape, layers, params, gates };
        model.validate()?;
        Ok(model)
    }

    /// Per-sample output shape of every layer: `[C]` for vectors, `[C, H, W]` for maps.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if cur != [*inputs] {
                        return Err(Error::Graph(format!("layer {i}: dense expects [{inputs}], got {cur:?}")));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, .. } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::Graph(format!("layer {i}: conv expects [C,H,W], got {cur:?}")));
                    };
                    if c != *in_channels {
                        return Err(Error::Graph(format!("layer {i}: conv expects {in_channels} channels, got {c}")));
                    }
                    let oh = crate::ndtensor::conv_output_extent(h, *kernel, *stride, *pad)?;
                    let ow = crate::ndtensor::conv_output_extent(w, *kernel, *stride, *pad)?;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Relu => cur,
                LayerSpec::AvgPool { size } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::Graph(format!("layer {i}: pooling expects [C,H,W], got {cur:?}")));
                    };
                    if *size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::Graph(format!("layer {i}: pool {size} does not divide {h}x{w}")));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::ResidualAdd { from } => {
                    if *from >= i {
                        return Err(Error::Graph(format!("layer {i}: residual source {from} is not earlier")));
                    }
                    if shapes[*from] != cur {
                        return Err(Error::Graph(format!(
                            "layer {i}: residual shapes {:?} and {cur:?} differ",
                            shapes[*from]
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.layers.len() || self.gates.len() != self.layers.len() {
            return Err(Error::Graph("params/gates do not align with layers".into()));
        }
        let shapes = self.layer_shapes()?;
        if shapes.last().map(|s| s.len()) != Some(1) {
            return Err(Error::Graph("final layer must produce class logits".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer.param_shapes(), &self.params[i]) {
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws.as_slice() && p.bias.shape() == bs.as_slice() => {}
                (None, None) => {}
                _ => return Err(Error::Graph(format!("layer {i}: parameter shapes do not match spec"))),
            }
            let expect = layer.is_gated().then(|| layer.out_channels().unwrap_or(0));
            if self.gates[i].as_ref().map(Vec::len) != expect {
                return Err(Error::Graph(format!("layer {i}: gate vector does not match spec")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layer_shapes().ok().and_then(|s| s.last().map(|l| l[0])).unwrap_or(0)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn num_gates(&self) -> usize {
        self.gates.iter().flatten().map(Vec::len).sum()
    }

    /// Gated channels in flat-gate order.
    pub fn gate_ids(&self) -> Vec<ChannelId> {
        self.gates
            .iter()
            .enumerate()
            .flat_map(|(layer, g)| g.iter().flat_map(move |g| (0..g.len()).map(move |channel| ChannelId { layer, channel })))
            .collect()
    }

    pub fn gate(&self, id: ChannelId) -> Option<f64> {
        self.gates.get(id.layer)?.as_ref()?.get(id.channel).copied()
    }

    pub fn set_gate(&mut self, id: ChannelId, value: f64) -> Result<()> {
        let slot = self
            .gates
            .get_mut(id.layer)
            .and_then(|g| g.as_mut())
            .and_then(|g| g.get_mut(id.channel))
            .ok_or_else(|| Error::Graph(format!("no gated channel {id}")))?;
        *slot = value;
        Ok(())
    }

    pub fn weights_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_weights());
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_weights_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_weights() {
            return Err(Error::Shape(format!("expected {} weights, got {}", self.num_weights(), flat.len())));
        }
        let mut off = 0;
        for p in self.params.iter_mut().flatten() {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn gates_flat(&self) -> Vec<f64> {
        self.gates.iter().flatten().flatten().copied().collect()
    }

    pub fn set_gates_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_gates() {
            return Err(Error::Shape(format!("expected {} gates, got {}", self.num_gates(), flat.len())));
        }
        let mut off = 0;
        for g in self.gates.iter_mut().flatten() {
            let n = g.len();
            g.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Flat ranges `(weight, bias)` of each linear layer inside [`Self::weights_flat`].
    pub fn param_offsets(&self) -> Vec<Option<(std::ops::Range<usize>, std::ops::Range<usize>)>> {
        let mut off = 0;
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    let w = off..off + p.weight.len();
                    let b = w.end..w.end + p.bias.len();
                    off = b.end;
                    (w, b)
                })
            })
            .collect()
    }

    fn check_input(&self, inputs: &Tensor64) -> Result<()> {
        if inputs.shape().len() != self.input_shape.len() + 1 || inputs.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects samples of shape {:?}, got batch {:?}",
                self.input_shape,
                inputs.shape()
            )));
        }
        Ok(())
    }

    /// Records a forward pass with `weights` and `gates` (flat) as tape leaves.
    pub fn record(
        &self,
        tape: &mut Tape64,
        weights: &[f64],
        gates: &[f64],
        inputs: &Tensor64,
        mode: GateMode,
    ) -> Result<Recorded> {
        self.check_input(inputs)?;
        if weights.len() != self.num_weights() || gates.len() != self.num_gates() {
            return Err(Error::Shape("flat weight/gate vectors do not match the model".into()));
        }
        let n = inputs.shape()[0];
        let mut x = tape.constant(inputs.clone());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut weight_leaves = Vec::new();
        let mut gate_leaves = Vec::new();
        let (mut woff, mut goff) = (0, 0);
        let take = |off: &mut usize, src: &[f64], shape: Vec<usize>| -> Result<Tensor64> {
            let len: usize = shape.iter().product();
            let t = Tensor::new(shape, src[*off..*off + len].to_vec())?;
            *off += len;
            Ok(t)
        };
        for layer in &self.layers {
            x = match *layer {
                LayerSpec::Dense { inputs: din, outputs, gated } => {
                    let w = tape.leaf(take(&mut woff, weights, vec![din, outputs])?, Role::Weight);
                    let b = tape.leaf(take(&mut woff, weights, vec![outputs])?, Role::Weight);
                    weight_leaves.extend([w, b]);
                    let z = tape.matmul(x, w)?;
                    let z = tape.add(z, b)?;
                    if gated {
                        let g = take(&mut goff, gates, vec![outputs])?;
                        let g = match mode {
                            GateMode::Shared => g,
                            GateMode::PerSample => Tensor::new(vec![n, outputs], repeat(g.data(), n))?,
                        };
                        let gv = tape.leaf(g, Role::Mask);
                        gate_leaves.push(gv);
                        tape.mul(z, gv)?
                    } else {
                        z
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad, gated } => {
                    let k = tape.leaf(
                        take(&mut woff, weights, vec![out_channels, in_channels, kernel, kernel])?,
                        Role::Weight,
                    );
                    let b = tape.leaf(take(&mut woff, weights, vec![out_channels, 1, 1])?, Role::Weight);
                    weight_leaves.extend([k, b]);
                    let z = tape.conv2d(x, k, stride, pad)?;
                    let z = tape.add(z, b)?;
                    if gated {
                        let g = take(&mut goff, gates, vec![out_channels, 1, 1])?;
                        let g = match mode {
                            GateMode::Shared => g,
                            GateMode::PerSample => Tensor::new(vec![n, out_channels, 1, 1], repeat(g.data(), n))?,
                        };
                        let gv = tape.leaf(g, Role::Mask);
                        gate_leaves.push(gv);
                        tape.mul(z, gv)?
                    } else {
                        z
                    }
                }
                LayerSpec::Relu => tape.relu(x),
                LayerSpec::AvgPool { size } => tape.avg_pool2d(x, size)?,
                LayerSpec::Flatten => {
                    let len: usize = tape.value(x).shape()[1..].iter().product();
                    tape.reshape(x, &[n, len])?
                }
                LayerSpec::ResidualAdd { from } => tape.add(x, activations[from])?,
            };
            activations.push(x);
        }
        Ok(Recorded { logits: x, weight_leaves, gate_leaves, activations })
    }

    /// Class logits `[N, K]` with the model's own weights and gates.
    pub fn logits(&self, inputs: &Tensor64) -> Result<Tensor64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &self.weights_flat(), &self.gates_flat(), inputs, GateMode::Shared)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Mean cross-entropy of the batch.
    pub fn forward_loss(&self, batch: &Batch) -> Result<f64> {
        ModelObjective::new(self, batch).loss(&self.weights_flat(), &self.gates_flat())
    }

    /// Per-sample gradients `∂L_n/∂m` for every gate, as `[N][num_gates]`.
    pub fn per_sample_gate_grads(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &self.weights_flat(), &self.gates_flat(), &batch.inputs, GateMode::PerSample)?;
        let loss = tape.softmax_cross_entropy(rec.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        let n = batch.len();
        let mut out = vec![Vec::with_capacity(self.num_gates()); n];
        for gv in rec.gate_leaves {
            let g = grads.wrt(gv);
            let c = g.len() / n;
            for (s, row) in out.iter_mut().enumerate() {
                // mean loss: the per-sample leaf sees ∂L_n/∂m / N
                row.extend(g.data()[s * c..(s + 1) * c].iter().map(|v| v * n as f64));
            }
        }
        Ok(out)
    }
}

fn repeat(values: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * times);
    for _ in 0..times {
        out.extend_from_slice(values);
    }
    out
}

/// Cross-entropy of a model's architecture on a fixed batch, as a function of flat `(W, M)`.
///
/// The model's own parameter values are ignored; only its structure is used.
/// `l2` adds `½·l2·‖W‖²` (zero by default).
pub struct ModelObjective<'a> {
    pub model: &'a GatedModel,
    pub batch: &'a Batch,
    pub l2: f64,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a GatedModel, batch: &'a Batch) -> Self {
        Self { model, batch, l2: 0.0 }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }
}

impl GatedObjective<f64> for ModelObjective<'_> {
    fn num_weights(&self) -> usize {
        self.model.num_weights()
    }

    fn num_gates(&self) -> usize {
        self.model.num_gates()
    }

    fn eval(&self, weights: &[f64], gates: &[f64]) -> Result<LossGrad<f64>> {
        let mut tape = Tape::new();
        let rec = self.model.record(&mut tape, weights, gates, &self.batch.inputs, GateMode::Shared)?;
        let loss_var = tape.softmax_cross_entropy(rec.logits, &self.batch.labels)?;
        let grads = tape.backward(loss_var)?;
        let mut grad_w = Vec::with_capacity(weights.len());
        for v in &rec.weight_leaves {
            grad_w.extend_from_slice(grads.wrt(*v).data());
        }
        let mut grad_m = Vec::with_capacity(gates.len());
        for v in &rec.gate_leaves {
            grad_m.extend_from_slice(grads.wrt(*v).data());
        }
        let mut loss = tape.value(loss_var).item()?;
        if self.l2 > 0.0 {
            loss += 0.5 * self.l2 * weights.iter().map(|w| w * w).sum::<f64>();
            for (g, w) in grad_w.iter_mut().zip(weights) {
                *g += self.l2 * w;
            }
        }
        if !loss.is_finite() {
            return Err(Error::non_finite("loss"));
        }
        Ok(LossGrad { loss, grad_w, grad_m })
    }
}
