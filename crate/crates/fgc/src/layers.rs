//! Network building blocks: the gating module, gated conv/fc blocks, and
//! small configurable classifiers.
//!
//! A gated block computes its ungated feature `f = relu(bn(conv(x)))`, asks a
//! lightweight two-layer gating module (fed the *input* feature) for a
//! per-instance, per-channel gate, and multiplies the two channel-wise. In
//! training the gate is a stretched hard-concrete sample, so gradients flow
//! to the gating module through the reparameterization; at evaluation the
//! gate is a deterministic 0/1 threshold on the open probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops::{self, RunningStats};
use crate::tensor::{Mode, Tape, Tensor};

// ---------------------------------------------------------------------------
// Hard-concrete gate activation
// ---------------------------------------------------------------------------

/// Relaxation temperature of the binary-concrete gate.
pub const GATE_TEMPERATURE: f64 = 2.0 / 3.0;
/// Lower bound of the stretch interval.
pub const STRETCH_LO: f64 = -0.1;
/// Upper bound of the stretch interval.
pub const STRETCH_HI: f64 = 1.1;
/// Initial bias of the gate head; positive so training starts near
/// fully-open and sparsity pressure comes from the L0 term alone.
pub const GATE_BIAS_INIT: f64 = 2.0;

/// Logit shift mapping raw gate logits to the probability that the stretched
/// sample lands strictly above zero: `sigma(logits + shift)`.
pub fn open_prob_shift() -> f64 {
    GATE_TEMPERATURE * (STRETCH_HI / -STRETCH_LO).ln()
}

/// Expected-open probability of each gate: bounded, comparable across
/// instances, and the differentiable stand-in for the binary mask.
pub fn open_probability(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    ops::sigmoid(tape, &ops::add_scalar(tape, logits, open_prob_shift())?)
}

/// Logistic noise for the reparameterized sample: `ln u - ln(1 - u)`.
pub fn sample_gate_noise(rng: &mut Rng, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u = rng.uniform_open();
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Stretched hard-concrete sample, differentiable w.r.t. `logits`:
///
/// ```text
/// s    = sigma((noise + logits) / temperature)
/// sbar = s * (hi - lo) + lo
/// gate = clamp(sbar, 0, 1)
/// ```
pub fn hard_concrete_sample(tape: &Tape, logits: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let shifted = ops::add(tape, logits, noise)?;
    let s = ops::sigmoid(tape, &ops::scale(tape, &shifted, 1.0 / GATE_TEMPERATURE)?)?;
    let stretched = ops::add_scalar(tape, &ops::scale(tape, &s, STRETCH_HI - STRETCH_LO)?, STRETCH_LO)?;
    ops::clamp_unit(tape, &stretched)
}

// ---------------------------------------------------------------------------
// Gating module
// ---------------------------------------------------------------------------

/// Per-layer gate head: two fully connected layers on the pooled input
/// feature (`c_in -> hidden -> c_out`).
pub struct GatingModule {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

/// Hidden width: a quarter of the gated channel count, floor 8.
pub fn gating_hidden_width(out_channels: usize) -> usize {
    (out_channels / 4).max(8)
}

impl GatingModule {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> GatingModule {
        let hidden = gating_hidden_width(out_channels);
        let w1: Vec<f64> = (0..hidden * in_channels)
            .map(|_| rng.normal() * (2.0 / in_channels as f64).sqrt())
            .collect();
        let w2: Vec<f64> = (0..out_channels * hidden)
            .map(|_| rng.normal() * (2.0 / hidden as f64).sqrt())
            .collect();
        GatingModule {
            fc1_w: Tensor::param(&[hidden, in_channels], w1).expect("fc1"),
            fc1_b: Tensor::param(&[hidden], vec![0.0; hidden]).expect("fc1_b"),
            fc2_w: Tensor::param(&[out_channels, hidden], w2).expect("fc2"),
            fc2_b: Tensor::param(&[out_channels], vec![GATE_BIAS_INIT; out_channels]).expect("fc2_b"),
            in_channels,
            hidden,
            out_channels,
        }
    }
}

/// Logits, open probabilities and the applied gate of one layer for a batch.
pub struct GateState {
    /// Pre-activation of the gate head, `[n, c]`.
    pub logits: Tensor,
    /// Gating probability per channel, in (0, 1), `[n, c]`.
    pub open_prob: Tensor,
    /// Gate actually applied: relaxed in `[0, 1]` during training, exactly
    /// {0, 1} at evaluation.
    pub gate: Tensor,
}

impl GateState {
    /// Hard 0/1 masks per instance (eval semantics: open iff prob >= 0.5).
    pub fn hard_masks(&self) -> Vec<Vec<bool>> {
        let shape = self.open_prob.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let data = self.open_prob.data();
        (0..n)
            .map(|i| (0..c).map(|j| data[i * c + j] >= 0.5).collect())
            .collect()
    }
}

/// Run the gating module on the layer input.
///
/// Training mode draws one reparameterized hard-concrete sample per gate;
/// evaluation thresholds the open probability at 0.5 (ties resolve open).
pub fn gating_forward(
    tape: &Tape,
    x_prev: &Tensor,
    params: &GatingModule,
    mode: Mode,
    rng: &mut Rng,
) -> Result<GateState> {
    let pooled = ops::global_avg_pool(tape, x_prev)?;
    if pooled.shape()[1] != params.in_channels {
        return Err(Error::ShapeMismatch {
            op: "gating_forward",
            lhs: pooled.shape().to_vec(),
            rhs: vec![params.in_channels],
        });
    }
    let h = ops::relu(tape, &ops::linear(tape, &pooled, &params.fc1_w, &params.fc1_b)?)?;
    let logits = ops::linear(tape, &h, &params.fc2_w, &params.fc2_b)?;
    let open_prob = open_probability(tape, &logits)?;
    let gate = match mode {
        Mode::Train => {
            let noise = Tensor::new(
                logits.shape(),
                sample_gate_noise(rng, logits.numel()),
            )?;
            hard_concrete_sample(tape, &logits, &noise)?
        }
        Mode::Eval => {
            let hard: Vec<f64> = open_prob
                .data()
                .iter()
                .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            Tensor::new(logits.shape(), hard)?
        }
    };
    Ok(GateState {
        logits,
        open_prob,
        gate,
    })
}

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Defaults to `kernel / 2` (same-padding for odd kernels).
        #[serde(default)]
        padding: Option<usize>,
    },
    Fc {
        features: usize,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub gated: bool,
    /// Whether the coupling regularizer watches this layer. Implies `gated`.
    #[serde(default)]
    pub fgc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    /// Square input images of this height/width.
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// Static per-layer geometry derived from a [`NetworkSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
    /// Kernel extent; 0 marks a fully-connected layer.
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl NetworkSpec {
    /// Walk the layer list, checking that every output extent is integral and
    /// that fully-connected layers never precede convolutions. Returns the
    /// geometry of every layer.
    pub fn shape_walk(&self) -> Result<Vec<LayerShape>> {
        if self.classes < 2 {
            return Err(Error::config("network needs at least 2 classes"));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::config("network input must be non-empty"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut channels = self.input_channels;
        let mut size = self.input_size;
        let mut seen_fc = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.fgc && !layer.gated {
                return Err(Error::config(format!(
                    "layer {i}: coupling requires the layer to be gated"
                )));
            }
            match layer.kind {
                LayerKind::Conv {
                    channels: out,
                    kernel,
                    stride,
                    padding,
                } => {
                    if seen_fc {
                        return Err(Error::config(format!(
                            "layer {i}: conv after fully-connected is not supported"
                        )));
                    }
                    if out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::config(format!("layer {i}: zero extent")));
                    }
                    let padding = padding.unwrap_or(kernel / 2);
                    let padded = size + 2 * padding;
                    if padded < kernel || (padded - kernel) % stride != 0 {
                        return Err(Error::config(format!(
                            "layer {i}: output extent not integral (input {size}, kernel {kernel}, stride {stride}, padding {padding})"
                        )));
                    }
                    let out_size = (padded - kernel) / stride + 1;
                    shapes.push(LayerShape {
                        in_channels: channels,
                        out_channels: out,
                        in_size: size,
                        out_size,
                        kernel,
                        stride,
                        padding,
                    });
                    channels = out;
                    size = out_size;
                }
                LayerKind::Fc { features } => {
                    if features == 0 {
                        return Err(Error::config(format!("layer {i}: zero extent")));
                    }
                    seen_fc = true;
                    shapes.push(LayerShape {
                        in_channels: channels,
                        out_channels: features,
                        in_size: size,
                        out_size: 1,
                        kernel: 0,
                        stride: 1,
                        padding: 0,
                    });
                    channels = features;
                    size = 1;
                }
            }
        }
        Ok(shapes)
    }

    pub fn gated_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.gated)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fgc_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.fgc)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Concrete network
// ---------------------------------------------------------------------------

struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
}

impl BatchNorm {
    fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("gamma"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("beta"),
            running: RunningStats::new(channels),
        }
    }
}

enum BlockOp {
    Conv {
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    Fc {
        weight: Tensor,
        zero_bias: Tensor,
    },
}

/// One gated (or plain) layer: conv/fc + batchnorm + relu, optionally
/// multiplied by the gating module's channel gate.
pub struct Block {
    op: BlockOp,
    bn: BatchNorm,
    pub gating: Option<GatingModule>,
    pub fgc: bool,
    pub out_channels: usize,
}

/// Per-layer products of a forward pass.
pub struct BlockOutput {
    /// Gated output handed to the next layer.
    pub out: Tensor,
    /// Ungated feature `relu(bn(conv(x)))`.
    pub ungated: Tensor,
    pub gate: Option<GateState>,
}

impl Block {
    fn new(spec: &LayerSpec, shape: LayerShape, rng: &mut Rng) -> Block {
        let op = match spec.kind {
            LayerKind::Conv { kernel, .. } => {
                let fan_in = (shape.in_channels * kernel * kernel) as f64;
                let data: Vec<f64> = (0..shape.out_channels * shape.in_channels * kernel * kernel)
                    .map(|_| rng.normal() * (2.0 / fan_in).sqrt())
                    .collect();
                BlockOp::Conv {
                    weight: Tensor::param(
                        &[shape.out_channels, shape.in_channels, kernel, kernel],
                        data,
                    )
                    .expect("conv weight"),
                    stride: shape.stride,
                    padding: shape.padding,
                }
            }
            LayerKind::Fc { .. } => {
                let data: Vec<f64> = (0..shape.out_channels * shape.in_channels)
                    .map(|_| rng.normal() * (2.0 / shape.in_channels as f64).sqrt())
                    .collect();
                BlockOp::Fc {
                    weight: Tensor::param(&[shape.out_channels, shape.in_channels], data)
                        .expect("fc weight"),
                    zero_bias: Tensor::new(&[shape.out_channels], vec![0.0; shape.out_channels])
                        .expect("fc zero bias"),
                }
            }
        };
        let gating = spec
            .gated
            .then(|| GatingModule::new(shape.in_channels, shape.out_channels, rng));
        Block {
            op,
            bn: BatchNorm::new(shape.out_channels),
            gating,
            fgc: spec.fgc,
            out_channels: shape.out_channels,
        }
    }

    /// Forward one block. `force_open` replaces the applied gate with an
    /// all-ones constant while still reporting the computed [`GateState`].
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
        force_open: bool,
    ) -> Result<BlockOutput> {
        let pre = match &self.op {
            BlockOp::Conv {
                weight,
                stride,
                padding,
            } => ops::conv2d(tape, x, weight, *stride, *padding)?,
            BlockOp::Fc { weight, zero_bias } => ops::linear(tape, x, weight, zero_bias)?,
        };
        let normed = ops::batchnorm(tape, &pre, &self.bn.gamma, &self.bn.beta, &self.bn.running, mode)?;
        let ungated = ops::relu(tape, &normed)?;
        match &self.gating {
            None => Ok(BlockOutput {
                out: ungated.clone(),
                ungated,
                gate: None,
            }),
            Some(gating) => {
                let state = gating_forward(tape, x, gating, mode, rng)?;
                let applied = if force_open {
                    Tensor::full(state.gate.shape(), 1.0)
                } else {
                    state.gate.clone()
                };
                let out = ops::channel_mul(tape, &applied, &ungated)?;
                Ok(BlockOutput {
                    out,
                    ungated,
                    gate: Some(state),
                })
            }
        }
    }
}

/// Pooled feature and gate state reported per layer by a network forward.
pub struct LayerOutput {
    /// Present for every gated layer.
    pub gate: Option<GateState>,
    /// Pooled *ungated* feature; present for every coupling-enabled layer.
    pub pooled: Option<Tensor>,
}

pub struct Network {
    pub spec: NetworkSpec,
    pub shapes: Vec<LayerShape>,
    pub blocks: Vec<Block>,
    head_w: Tensor,
    head_b: Tensor,
}

/// A named parameter plus whether it belongs to a gating module (gating
/// parameters are exempt from weight decay).
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub gating: bool,
}

impl Network {
    pub fn new(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network> {
        let shapes = spec.shape_walk()?;
        let blocks: Vec<Block> = spec
            .layers
            .iter()
            .zip(shapes.iter())
            .map(|(l, s)| Block::new(l, *s, rng))
            .collect();
        let last_channels = shapes
            .last()
            .map(|s| s.out_channels)
            .unwrap_or(spec.input_channels);
        let head_data: Vec<f64> = (0..spec.classes * last_channels)
            .map(|_| rng.normal() * (1.0 / last_channels as f64).sqrt())
            .collect();
        Ok(Network {
            spec: spec.clone(),
            shapes,
            blocks,
            head_w: Tensor::param(&[spec.classes, last_channels], head_data)?,
            head_b: Tensor::param(&[spec.classes], vec![0.0; spec.classes])?,
        })
    }

    /// Classifier logits plus per-layer gate states and pooled features.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
        force_open: bool,
    ) -> Result<(Tensor, Vec<LayerOutput>)> {
        let expected = [
            usize::MAX, // batch: anything
            self.spec.input_channels,
            self.spec.input_size,
            self.spec.input_size,
        ];
        let sh = x.shape();
        if sh.len() != 4 || sh[1..] != expected[1..] {
            return Err(Error::ShapeMismatch {
                op: "network_forward",
                lhs: sh.to_vec(),
                rhs: vec![
                    0,
                    self.spec.input_channels,
                    self.spec.input_size,
                    self.spec.input_size,
                ],
            });
        }
        let mut cur = x.clone();
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            // Fully-connected blocks consume the pooled feature vector.
            if matches!(block.op, BlockOp::Fc { .. }) && cur.shape().len() == 4 {
                cur = ops::global_avg_pool(tape, &cur)?;
            }
            let BlockOutput { out, ungated, gate } = block.forward(tape, &cur, mode, rng, force_open)?;
            let pooled = if block.fgc {
                Some(ops::global_avg_pool(tape, &ungated)?)
            } else {
                None
            };
            outputs.push(LayerOutput { gate, pooled });
            cur = out;
        }
        let pooled = ops::global_avg_pool(tape, &cur)?;
        let logits = ops::linear(tape, &pooled, &self.head_w, &self.head_b)?;
        Ok((logits, outputs))
    }

    /// Parameters in a stable, documented order (blocks first, head last).
    pub fn named_params(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor, gating: bool| {
            out.push(ParamEntry {
                name,
                tensor: tensor.clone(),
                gating,
            });
        };
        for (i, b) in self.blocks.iter().enumerate() {
            match &b.op {
                BlockOp::Conv { weight, .. } => push(format!("block{i}.conv.w"), weight, false),
                BlockOp::Fc { weight, .. } => push(format!("block{i}.fc.w"), weight, false),
            }
            push(format!("block{i}.bn.gamma"), &b.bn.gamma, false);
            push(format!("block{i}.bn.beta"), &b.bn.beta, false);
            if let Some(g) = &b.gating {
                push(format!("block{i}.gate.fc1.w"), &g.fc1_w, true);
                push(format!("block{i}.gate.fc1.b"), &g.fc1_b, true);
                push(format!("block{i}.gate.fc2.w"), &g.fc2_w, true);
                push(format!("block{i}.gate.fc2.b"), &g.fc2_b, true);
            }
        }
        push("head.w".to_string(), &self.head_w, false);
        push("head.b".to_string(), &self.head_b, false);
        out
    }

    /// Non-trainable state (batchnorm running statistics), name -> snapshot.
    pub fn named_buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), b.bn.running.mean.borrow().clone()));
            out.push((format!("block{i}.bn.running_var"), b.bn.running.var.borrow().clone()));
        }
        out
    }

    pub fn restore_buffers(&self, buffers: &[(String, Vec<f64>)]) -> Result<()> {
        let mut map: std::collections::BTreeMap<&str, &Vec<f64>> = std::collections::BTreeMap::new();
        for (name, data) in buffers {
            map.insert(name.as_str(), data);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, slot) in [
                ("running_mean", &b.bn.running.mean),
                ("running_var", &b.bn.running.var),
            ] {
                let name = format!("block{i}.bn.{suffix}");
                let data = map
                    .get(name.as_str())
                    .ok_or_else(|| Error::contract(format!("missing buffer {name}")))?;
                let mut dst = slot.borrow_mut();
                if dst.len() != data.len() {
                    return Err(Error::contract(format!("buffer {name} length mismatch")));
                }
                dst.copy_from_slice(data);
            }
        }
        Ok(())
    }

    /// Apply a coupling layer set: flags exactly the given layers, which must
    /// all be gated.
    pub fn set_fgc_layers(&mut self, layers: &[usize]) -> Result<()> {
        for &l in layers {
            if l >= self.blocks.len() {
                return Err(Error::config(format!(
                    "coupling layer index {l} out of range ({} layers)",
                    self.blocks.len()
                )));
            }
            if self.blocks[l].gating.is_none() {
                return Err(Error::config(format!(
                    "coupling layer {l} is not gated"
                )));
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.fgc = layers.contains(&i);
            self.spec.layers[i].fgc = b.fgc;
        }
        Ok(())
    }
}
