//! The residual 1D CNN: one stem convolution followed by three residual
//! blocks of three convolutions each (ten conv layers total), then a
//! single dense layer and softmax.
//!
//! The network splits into a *backbone* (all conv/BN stages), frozen after
//! deployment, and a *classifier* (dense weights and bias), the only part
//! the streaming engine may update. Each convolution uses kernel 3,
//! stride 1, padding 1, so every intermediate activation keeps shape
//! `(hidden, input_width)` after the stem.
//!
//! `forward` returns both the class probabilities and the flattened
//! backbone output (the dense-layer input), which the streaming engine
//! needs for weight gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::StreamRng;
use crate::tensor::{
    argmax, batch_norm_infer_inplace, conv1d_into, dense_into, dropout_train_inplace,
    quantize_roundtrip, relu_inplace, softmax_inplace, ConvSpec, NumericMode, Tensor,
};
use crate::Result;

/// Hidden channel count of every backbone stage.
pub const HIDDEN_CHANNELS: usize = 32;
/// Residual blocks in the canonical topology.
pub const NUM_BLOCKS: usize = 3;
/// Dropout rate used throughout the backbone.
pub const DROPOUT_RATE: f32 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPSILON: f32 = 1e-5;

/// Structural description of a network instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Topology {
    pub input_channels: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub hidden_channels: usize,
    pub num_blocks: usize,
    pub dropout_rate: f32,
}

impl Topology {
    /// Canonical topology: 32 hidden channels, 3 residual blocks,
    /// dropout 0.1.
    pub fn new(input_channels: usize, input_width: usize, num_classes: usize) -> Self {
        Topology {
            input_channels,
            input_width,
            num_classes,
            hidden_channels: HIDDEN_CHANNELS,
            num_blocks: NUM_BLOCKS,
            dropout_rate: DROPOUT_RATE,
        }
    }

    /// Reduced-depth variant (used by small-scale gradient checks).
    pub fn with_blocks(mut self, num_blocks: usize) -> Self {
        self.num_blocks = num_blocks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.input_width == 0
            || self.num_classes == 0
            || self.hidden_channels == 0
            || self.num_blocks == 0
        {
            return Err(Error::domain("topology counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::domain("dropout rate outside [0, 1)"));
        }
        Ok(())
    }

    /// Length of the flattened backbone output.
    pub fn dense_input_len(&self) -> usize {
        self.hidden_channels * self.input_width
    }

    /// Conv layers in the backbone: one stem plus three per block.
    pub fn num_conv_layers(&self) -> usize {
        1 + 3 * self.num_blocks
    }

    /// Classifier parameter count: dense weights plus bias.
    pub fn classifier_param_count(&self) -> usize {
        self.num_classes * self.dense_input_len() + self.num_classes
    }
}

/// One convolution stage: weights `[out][in][3]` flattened, plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-channel batch-norm parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormLayer {
    fn identity(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// A conv stage with its batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneLayer {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

/// The trainable head: dense weights `[C][D]` row-major, plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Full parameter set. Backbone layer order is: stem, then the three
/// stages of each block in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub topology: Topology,
    pub backbone: Vec<BackboneLayer>,
    pub classifier: Classifier,
    pub numeric_mode: NumericMode,
}

/// Execution mode for a forward pass.
pub enum ExecMode<'a> {
    /// Dropout active (seeded), batch norm normalizes with statistics of
    /// the sample itself (per channel over width). Running statistics are
    /// not touched; batch-statistics training lives in [`crate::train`].
    Train(&'a mut StreamRng),
    /// Dropout skipped, batch norm uses running statistics. Deterministic.
    Infer,
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Softmax output, length `num_classes`.
    pub probabilities: Vec<f32>,
    /// Flattened backbone output `x`, length `hidden * width` — the
    /// dense-input capture needed for streaming weight gradients.
    pub dense_input: Vec<f32>,
}

/// Reusable activation buffers so steady-state forward passes allocate
/// nothing.
#[derive(Debug, Clone)]
pub struct ForwardWorkspace {
    a: Tensor,
    b: Tensor,
    skip: Tensor,
    logits: Vec<f32>,
    probs: Vec<f32>,
}

impl ForwardWorkspace {
    pub fn new(topology: &Topology) -> Self {
        let (h, w) = (topology.hidden_channels, topology.input_width);
        ForwardWorkspace {
            a: Tensor::zeros(h, w),
            b: Tensor::zeros(h, w),
            skip: Tensor::zeros(h, w),
            logits: vec![0.0; topology.num_classes],
            probs: vec![0.0; topology.num_classes],
        }
    }

    /// Flattened backbone output of the last forward pass.
    pub fn dense_input(&self) -> &[f32] {
        self.a.data()
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f32] {
        &self.probs
    }
}

impl ModelParams {
    /// Construct a fresh parameter set: conv/dense weights uniform in
    /// `±sqrt(6 / fan_in)`, all biases zero, batch norms at identity
    /// (gamma 1, beta 0, mean 0, var 1). Deterministic given `seed`.
    pub fn build(topology: Topology, seed: u64) -> Result<ModelParams> {
        topology.validate()?;
        let root = StreamRng::seed(seed);
        let h = topology.hidden_channels;

        let mut backbone = Vec::with_capacity(topology.num_conv_layers());
        for layer_idx in 0..topology.num_conv_layers() {
            let in_ch = if layer_idx == 0 {
                topology.input_channels
            } else {
                h
            };
            let spec = ConvSpec::new(in_ch, h);
            let mut rng = root.derive_path(&[1, layer_idx as u64]);
            let bound = libm::sqrtf(6.0 / (in_ch * spec.kernel_size) as f32);
            let weights = (0..spec.weight_len())
                .map(|_| rng.next_symmetric(bound))
                .collect();
            backbone.push(BackboneLayer {
                conv: ConvLayer {
                    spec,
                    weights,
                    bias: vec![0.0; h],
                },
                bn: BatchNormLayer::identity(h),
            });
        }

        let d = topology.dense_input_len();
        let mut rng = root.derive_path(&[2, 0]);
        let bound = libm::sqrtf(6.0 / d as f32);
        let classifier = Classifier {
            weights: (0..topology.num_classes * d)
                .map(|_| rng.next_symmetric(bound))
                .collect(),
            bias: vec![0.0; topology.num_classes],
        };

        Ok(ModelParams {
            topology,
            backbone,
            classifier,
            numeric_mode: NumericMode::Full32,
        })
    }

    /// Total scalar parameter count (backbone plus classifier).
    pub fn param_count(&self) -> usize {
        let backbone: usize = self
            .backbone
            .iter()
            .map(|l| {
                l.conv.weights.len()
                    + l.conv.bias.len()
                    + l.bn.gamma.len()
                    + l.bn.beta.len()
                    + l.bn.running_mean.len()
                    + l.bn.running_var.len()
            })
            .sum();
        backbone + self.classifier.weights.len() + self.classifier.bias.len()
    }

    /// Copy of the model with every parameter narrowed to `mode` storage
    /// and the mode tag set. Narrowing to `Full32` is the identity.
    pub fn deployed(&self, mode: NumericMode) -> ModelParams {
        let mut out = self.clone();
        out.numeric_mode = mode;
        if mode == NumericMode::Truncated16 {
            for layer in &mut out.backbone {
                narrow_all(&mut layer.conv.weights);
                narrow_all(&mut layer.conv.bias);
                narrow_all(&mut layer.bn.gamma);
                narrow_all(&mut layer.bn.beta);
                narrow_all(&mut layer.bn.running_mean);
                narrow_all(&mut layer.bn.running_var);
            }
            narrow_all(&mut out.classifier.weights);
            narrow_all(&mut out.classifier.bias);
        }
        out
    }

    /// FNV-1a over the bit patterns of all backbone parameters, in
    /// network order. Used to verify the backbone stays frozen.
    pub fn backbone_checksum(&self) -> u64 {
        let mut hash = 0xCBF2_9CE4_8422_2325u64;
        let mut eat = |values: &[f32]| {
            for v in values {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        };
        for layer in &self.backbone {
            eat(&layer.conv.weights);
            eat(&layer.conv.bias);
            eat(&layer.bn.gamma);
            eat(&layer.bn.beta);
            eat(&layer.bn.running_mean);
            eat(&layer.bn.running_var);
        }
        hash
    }

    /// Run the backbone only, leaving the flattened output (and nothing
    /// else of interest) in the workspace.
    pub fn backbone_forward_into(
        &self,
        input: &Tensor,
        mode: &mut ExecMode,
        ws: &mut ForwardWorkspace,
    ) -> Result<()> {
        let topo = &self.topology;
        if input.channels() != topo.input_channels || input.width() != topo.input_width {
            return Err(Error::shape(format!(
                "forward: input is {}x{}, topology expects {}x{}",
                input.channels(),
                input.width(),
                topo.input_channels,
                topo.input_width
            )));
        }
        if self.backbone.len() != topo.num_conv_layers() {
            return Err(Error::shape(format!(
                "forward: {} backbone layers, topology expects {}",
                self.backbone.len(),
                topo.num_conv_layers()
            )));
        }
        let nm = self.numeric_mode;
        let rate = topo.dropout_rate;
        let ForwardWorkspace { a, b, skip, .. } = ws;

        // Stem: conv -> BN -> ReLU -> dropout.
        let stem = &self.backbone[0];
        conv1d_into(input, &stem.conv.spec, &stem.conv.weights, &stem.conv.bias, nm, a)?;
        apply_bn(a, &stem.bn, mode, nm)?;
        relu_inplace(a);
        apply_dropout(a, rate, mode, nm)?;

        for block in 0..topo.num_blocks {
            let base = 1 + 3 * block;
            skip.copy_from(a);

            // Stage 1: conv -> BN -> ReLU -> dropout.
            let l1 = &self.backbone[base];
            conv1d_into(a, &l1.conv.spec, &l1.conv.weights, &l1.conv.bias, nm, b)?;
            apply_bn(b, &l1.bn, mode, nm)?;
            relu_inplace(b);
            apply_dropout(b, rate, mode, nm)?;

            // Stage 2: conv -> BN -> ReLU -> dropout.
            let l2 = &self.backbone[base + 1];
            conv1d_into(b, &l2.conv.spec, &l2.conv.weights, &l2.conv.bias, nm, a)?;
            apply_bn(a, &l2.bn, mode, nm)?;
            relu_inplace(a);
            apply_dropout(a, rate, mode, nm)?;

            // Stage 3: conv -> BN, then the skip connection merges the
            // block input, then ReLU -> dropout.
            let l3 = &self.backbone[base + 2];
            conv1d_into(a, &l3.conv.spec, &l3.conv.weights, &l3.conv.bias, nm, b)?;
            apply_bn(b, &l3.bn, mode, nm)?;
            for (dst, src) in b.data_mut().iter_mut().zip(skip.data()) {
                *dst = nm.store(*dst + *src);
            }
            relu_inplace(b);
            apply_dropout(b, rate, mode, nm)?;

            core::mem::swap(a, b);
        }
        Ok(())
    }

    /// Full forward pass into a caller-held workspace; allocation-free in
    /// steady state. The workspace then exposes dense input, logits and
    /// probabilities.
    pub fn forward_into(
        &self,
        input: &Tensor,
        mut mode: ExecMode,
        ws: &mut ForwardWorkspace,
    ) -> Result<()> {
        self.backbone_forward_into(input, &mut mode, ws)?;
        let nm = self.numeric_mode;
        dense_into(
            ws.a.data(),
            &self.classifier.weights,
            &self.classifier.bias,
            nm,
            &mut ws.logits,
        )?;
        ws.probs.copy_from_slice(&ws.logits);
        softmax_inplace(&mut ws.probs, nm)?;
        Ok(())
    }

    /// Convenience forward pass that allocates its own workspace and
    /// returns owned outputs.
    pub fn forward(&self, input: &Tensor, mode: ExecMode) -> Result<ForwardOutput> {
        let mut ws = ForwardWorkspace::new(&self.topology);
        self.forward_into(input, mode, &mut ws)?;
        Ok(ForwardOutput {
            probabilities: ws.probs.clone(),
            dense_input: ws.a.data().to_vec(),
        })
    }

    /// Predicted class in inference mode; ties resolve to the lowest
    /// index.
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.forward(input, ExecMode::Infer)?.probabilities))
    }
}

fn narrow_all(values: &mut [f32]) {
    for v in values {
        *v = quantize_roundtrip(*v);
    }
}

fn apply_bn(
    t: &mut Tensor,
    bn: &BatchNormLayer,
    mode: &mut ExecMode,
    nm: NumericMode,
) -> Result<()> {
    match mode {
        ExecMode::Infer => batch_norm_infer_inplace(
            t,
            &bn.gamma,
            &bn.beta,
            &bn.running_mean,
            &bn.running_var,
            BN_EPSILON,
            nm,
        ),
        ExecMode::Train(_) => batch_norm_single_sample(t, &bn.gamma, &bn.beta, nm),
    }
}

// Training-mode normalization for a batch of one: statistics per channel
// over the width axis.
fn batch_norm_single_sample(
    t: &mut Tensor,
    gamma: &[f32],
    beta: &[f32],
    nm: NumericMode,
) -> Result<()> {
    let (c, width) = (t.channels(), t.width());
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: parameter arrays must all have length {c}"
        )));
    }
    for ch in 0..c {
        let mut mean = 0.0f32;
        for w in 0..width {
            mean += t.at(ch, w);
        }
        mean /= width as f32;
        let mut var = 0.0f32;
        for w in 0..width {
            let d = t.at(ch, w) - mean;
            var += d * d;
        }
        var /= width as f32;
        let inv_std = 1.0 / libm::sqrtf(var + BN_EPSILON);
        for w in 0..width {
            let x_hat = (t.at(ch, w) - mean) * inv_std;
            t.set(ch, w, nm.store(gamma[ch] * x_hat + beta[ch]));
        }
    }
    Ok(())
}

fn apply_dropout(t: &mut Tensor, rate: f32, mode: &mut ExecMode, nm: NumericMode) -> Result<()> {
    match mode {
        ExecMode::Infer => Ok(()),
        ExecMode::Train(rng) => dropout_train_inplace(t, rate, rng, nm),
    }
}
