//! Streaming last-layer training.
//!
//! After deployment the backbone is frozen; only the dense classifier
//! learns. Each labeled sample is consumed exactly once: run the backbone
//! in inference mode, capture the flattened dense input `x` and the
//! probabilities `P`, form the cross-entropy gradients
//!
//! ```text
//! g_b[i]    = P[i] - I(y == i)
//! g_w[i][j] = x[j] * (P[i] - I(y == i))
//! ```
//!
//! fold them into exponential moving averages (`ema <- momentum * ema + g`),
//! and step the parameters (`w <- w - lr * ema`). The engine allocates all
//! working buffers once at construction; `learn_one` performs no further
//! allocation.
//!
//! The tiled path streams the `[C][D]` weight/EMA arrays through a bounded
//! scratch buffer of at most `tile_size` entries, modeling an L1-resident
//! update loop; its results are bit-identical to the whole-layer path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::model::{ExecMode, ForwardWorkspace, ModelParams};
use crate::tensor::{argmax, dense_into, softmax_inplace, NumericMode, Tensor};
use crate::Result;

/// Update granularity for the parameter/EMA arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileSize {
    /// Process the whole classifier in one pass.
    WholeLayer,
    /// Process in contiguous tiles of at most this many entries.
    Entries(usize),
}

/// Streaming-update hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdtlConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub tile_size: TileSize,
}

impl OdtlConfig {
    pub fn new(learning_rate: f32, momentum: f32) -> Self {
        OdtlConfig {
            learning_rate,
            momentum,
            tile_size: TileSize::WholeLayer,
        }
    }

    pub fn with_tile_size(mut self, tile_size: TileSize) -> Self {
        self.tile_size = tile_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum outside [0, 1)"));
        }
        if let TileSize::Entries(0) = self.tile_size {
            return Err(Error::domain("tile size must be positive"));
        }
        Ok(())
    }
}

/// Classifier parameters plus the gradient EMA buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OdtlState {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub ema_weights: Vec<f32>,
    pub ema_bias: Vec<f32>,
    pub step_count: u64,
    num_classes: usize,
    dense_len: usize,
}

impl OdtlState {
    /// Start from classifier parameters; EMA buffers zero, step count 0.
    pub fn new(num_classes: usize, dense_len: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != num_classes * dense_len || bias.len() != num_classes {
            return Err(Error::shape(format!(
                "odtl state: classifier is {}x{} but got {} weights / {} biases",
                num_classes,
                dense_len,
                weights.len(),
                bias.len()
            )));
        }
        Ok(OdtlState {
            ema_weights: vec![0.0; weights.len()],
            ema_bias: vec![0.0; bias.len()],
            weights,
            bias,
            step_count: 0,
            num_classes,
            dense_len,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dense_len(&self) -> usize {
        self.dense_len
    }
}

/// Cross-entropy gradients of the classifier for one sample.
pub fn classifier_gradients(x: &[f32], p: &[f32], y: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if y >= p.len() {
        return Err(Error::domain(format!(
            "label {y} out of range for {} classes",
            p.len()
        )));
    }
    let mut g_w = vec![0.0; p.len() * x.len()];
    let mut g_b = vec![0.0; p.len()];
    for i in 0..p.len() {
        let pd = p[i] - if i == y { 1.0 } else { 0.0 };
        g_b[i] = pd;
        let row = &mut g_w[i * x.len()..(i + 1) * x.len()];
        for (g, &xj) in row.iter_mut().zip(x) {
            *g = xj * pd;
        }
    }
    Ok((g_w, g_b))
}

/// Fold fresh gradients into the EMA buffers: `ema <- momentum * ema + g`.
/// No other state is touched.
pub fn ema_update(state: &mut OdtlState, g_w: &[f32], g_b: &[f32], momentum: f32) -> Result<()> {
    if g_w.len() != state.ema_weights.len() || g_b.len() != state.ema_bias.len() {
        return Err(Error::shape("ema_update: gradient shapes do not match state"));
    }
    for (ema, &g) in state.ema_weights.iter_mut().zip(g_w) {
        *ema = momentum * *ema + g;
    }
    for (ema, &g) in state.ema_bias.iter_mut().zip(g_b) {
        *ema = momentum * *ema + g;
    }
    Ok(())
}

/// Step the parameters against the EMA buffers and advance the step
/// counter. In `Truncated16` the stored parameters are narrowed on write;
/// the EMA buffers always stay 32-bit.
pub fn apply_update(state: &mut OdtlState, learning_rate: f32, mode: NumericMode) {
    for (w, &ema) in state.weights.iter_mut().zip(&state.ema_weights) {
        *w = mode.store(*w - learning_rate * ema);
    }
    for (b, &ema) in state.bias.iter_mut().zip(&state.ema_bias) {
        *b = mode.store(*b - learning_rate * ema);
    }
    state.step_count += 1;
}

/// Single-writer streaming trainer. One engine instance serializes its
/// own `learn_one` calls; distinct instances share nothing.
#[derive(Debug, Clone)]
pub struct OdtlEngine {
    state: OdtlState,
    config: OdtlConfig,
    mode: NumericMode,
    ws: ForwardWorkspace,
    logits: Vec<f32>,
    probs: Vec<f32>,
    scratch: Vec<f32>,
    scratch_peak: usize,
}

impl OdtlEngine {
    /// Capture the model's classifier into engine-owned state and
    /// allocate every working buffer. The model's own parameters are
    /// never modified afterwards; use [`OdtlEngine::write_back`] to
    /// publish trained parameters.
    pub fn new(model: &ModelParams, config: OdtlConfig) -> Result<Self> {
        config.validate()?;
        let topo = &model.topology;
        let state = OdtlState::new(
            topo.num_classes,
            topo.dense_input_len(),
            model.classifier.weights.clone(),
            model.classifier.bias.clone(),
        )?;
        let scratch_len = match config.tile_size {
            TileSize::WholeLayer => 0,
            TileSize::Entries(n) => n.min(state.weights.len()),
        };
        Ok(OdtlEngine {
            ws: ForwardWorkspace::new(topo),
            logits: vec![0.0; topo.num_classes],
            probs: vec![0.0; topo.num_classes],
            scratch: vec![0.0; scratch_len],
            scratch_peak: 0,
            mode: model.numeric_mode,
            state,
            config,
        })
    }

    pub fn state(&self) -> &OdtlState {
        &self.state
    }

    pub fn config(&self) -> &OdtlConfig {
        &self.config
    }

    /// Largest number of scratch entries touched by any tile so far.
    pub fn scratch_peak(&self) -> usize {
        self.scratch_peak
    }

    /// Consume one labeled sample: backbone inference, gradients, EMA
    /// update, parameter step. The sample is not retained.
    pub fn learn_one(&mut self, model: &ModelParams, window: &Tensor, label: usize) -> Result<()> {
        let state = &mut self.state;
        if label >= state.num_classes {
            return Err(Error::domain(format!(
                "label {label} out of range for {} classes",
                state.num_classes
            )));
        }
        model.backbone_forward_into(window, &mut ExecMode::Infer, &mut self.ws)?;
        let x = self.ws.dense_input();
        dense_into(x, &state.weights, &state.bias, self.mode, &mut self.logits)?;
        self.probs.copy_from_slice(&self.logits);
        softmax_inplace(&mut self.probs, self.mode)?;

        let (lr, momentum) = (self.config.learning_rate, self.config.momentum);
        match self.config.tile_size {
            TileSize::WholeLayer => {
                update_whole(state, x, &self.probs, label, momentum, lr, self.mode);
            }
            TileSize::Entries(tile) => {
                update_tiled(
                    state,
                    x,
                    &self.probs,
                    label,
                    momentum,
                    lr,
                    self.mode,
                    tile,
                    &mut self.scratch,
                    &mut self.scratch_peak,
                );
            }
        }
        state.step_count += 1;
        Ok(())
    }

    /// Probabilities the engine's current classifier assigns to a window.
    pub fn probabilities(&mut self, model: &ModelParams, window: &Tensor) -> Result<&[f32]> {
        model.backbone_forward_into(window, &mut ExecMode::Infer, &mut self.ws)?;
        dense_into(
            self.ws.dense_input(),
            &self.state.weights,
            &self.state.bias,
            self.mode,
            &mut self.logits,
        )?;
        self.probs.copy_from_slice(&self.logits);
        softmax_inplace(&mut self.probs, self.mode)?;
        Ok(&self.probs)
    }

    /// Predicted class under the engine's current classifier; ties go to
    /// the lowest index.
    pub fn predict(&mut self, model: &ModelParams, window: &Tensor) -> Result<usize> {
        Ok(argmax(self.probabilities(model, window)?))
    }

    /// Publish the trained classifier back into a model. EMA buffers are
    /// engine-local and are not persisted.
    pub fn write_back(&self, model: &mut ModelParams) -> Result<()> {
        if model.classifier.weights.len() != self.state.weights.len()
            || model.classifier.bias.len() != self.state.bias.len()
        {
            return Err(Error::shape("write_back: classifier shape mismatch"));
        }
        model.classifier.weights.copy_from_slice(&self.state.weights);
        model.classifier.bias.copy_from_slice(&self.state.bias);
        Ok(())
    }
}

// Fused per-entry update. For each entry the arithmetic sequence is
// exactly: g = x[j] * (p[i] - I), ema' = momentum * ema + g,
// w' = w - lr * ema'; this pins bit-equality with the split op pipeline
// and with the tiled path.
fn update_whole(
    state: &mut OdtlState,
    x: &[f32],
    probs: &[f32],
    label: usize,
    momentum: f32,
    lr: f32,
    mode: NumericMode,
) {
    let d = state.dense_len;
    for i in 0..state.num_classes {
        let pd = probs[i] - if i == label { 1.0 } else { 0.0 };
        let row = i * d;
        for j in 0..d {
            let k = row + j;
            let g = x[j] * pd;
            let ema = momentum * state.ema_weights[k] + g;
            state.ema_weights[k] = ema;
            state.weights[k] = mode.store(state.weights[k] - lr * ema);
        }
        let ema = momentum * state.ema_bias[i] + pd;
        state.ema_bias[i] = ema;
        state.bias[i] = mode.store(state.bias[i] - lr * ema);
    }
}

// Tiled variant: the [C][D] arrays pass through `scratch` in contiguous
// tiles of at most `tile` entries, two sweeps per tile (EMA in/out, then
// weights in/out). The bias vector is small and updated directly.
#[allow(clippy::too_many_arguments)]
fn update_tiled(
    state: &mut OdtlState,
    x: &[f32],
    probs: &[f32],
    label: usize,
    momentum: f32,
    lr: f32,
    mode: NumericMode,
    tile: usize,
    scratch: &mut [f32],
    scratch_peak: &mut usize,
) {
    let d = state.dense_len;
    let total = state.weights.len();
    let mut start = 0;
    while start < total {
        let len = tile.min(total - start);
        *scratch_peak = (*scratch_peak).max(len);

        // EMA sweep: load tile, update, store back.
        scratch[..len].copy_from_slice(&state.ema_weights[start..start + len]);
        for (idx, ema) in scratch[..len].iter_mut().enumerate() {
            let k = start + idx;
            let (i, j) = (k / d, k % d);
            let pd = probs[i] - if i == label { 1.0 } else { 0.0 };
            *ema = momentum * *ema + x[j] * pd;
        }
        state.ema_weights[start..start + len].copy_from_slice(&scratch[..len]);

        // Weight sweep against the freshly stored EMA tile.
        scratch[..len].copy_from_slice(&state.weights[start..start + len]);
        for (idx, w) in scratch[..len].iter_mut().enumerate() {
            *w = mode.store(*w - lr * state.ema_weights[start + idx]);
        }
        state.weights[start..start + len].copy_from_slice(&scratch[..len]);

        start += len;
    }

    for i in 0..state.num_classes {
        let pd = probs[i] - if i == label { 1.0 } else { 0.0 };
        let ema = momentum * state.ema_bias[i] + pd;
        state.ema_bias[i] = ema;
        state.bias[i] = mode.store(state.bias[i] - lr * ema);
    }
}
