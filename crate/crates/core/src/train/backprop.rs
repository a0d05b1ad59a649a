//! Batched forward/backward passes through the full network.
//!
//! Training-mode batch norm normalizes each channel with statistics over
//! (batch x width); backward uses the standard batch-norm gradient with
//! those statistics. Dropout masks are explicit inputs so a loss
//! evaluation is a pure function of (parameters, batch, weights, masks) —
//! which is what finite-difference checking needs.
//!
//! All trainable parameters live in one flat vector (see [`ParamLayout`]):
//! per stage `[conv W, conv b, gamma, beta]` in network order, then the
//! dense weights and bias. Running statistics are not trainable; they are
//! updated from batch statistics by the training loop.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::model::{ModelParams, Topology, BN_EPSILON};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::Result;

/// A `(batch, channels, width)` activation buffer, sample-major.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub n: usize,
    pub channels: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn zeros(n: usize, channels: usize, width: usize) -> Self {
        Batch {
            n,
            channels,
            width,
            data: vec![0.0; n * channels * width],
        }
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, w: usize) -> usize {
        (b * self.channels + c) * self.width + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, w: usize) -> f32 {
        self.data[self.idx(b, c, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, w: usize, v: f32) {
        let i = self.idx(b, c, w);
        self.data[i] = v;
    }

    fn from_windows(windows: &[&Tensor]) -> Self {
        let (c, w) = (windows[0].channels(), windows[0].width());
        let mut out = Batch::zeros(windows.len(), c, w);
        for (b, t) in windows.iter().enumerate() {
            let start = out.idx(b, 0, 0);
            out.data[start..start + c * w].copy_from_slice(t.data());
        }
        out
    }
}

/// Offsets of every trainable parameter group in the flat vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    stages: Vec<StageOffsets>,
    dense_w: usize,
    dense_b: usize,
    total: usize,
}

#[derive(Debug, Clone, Copy)]
struct StageOffsets {
    conv_w: usize,
    conv_w_len: usize,
    conv_b: usize,
    gamma: usize,
    beta: usize,
    channels: usize,
}

impl ParamLayout {
    pub fn new(topo: &Topology) -> Self {
        let h = topo.hidden_channels;
        let mut off = 0;
        let mut stages = Vec::with_capacity(topo.num_conv_layers());
        for s in 0..topo.num_conv_layers() {
            let in_ch = if s == 0 { topo.input_channels } else { h };
            let w_len = h * in_ch * 3;
            let so = StageOffsets {
                conv_w: off,
                conv_w_len: w_len,
                conv_b: off + w_len,
                gamma: off + w_len + h,
                beta: off + w_len + 2 * h,
                channels: h,
            };
            off += w_len + 3 * h;
            stages.push(so);
        }
        let dense_w = off;
        let d = topo.dense_input_len();
        let dense_b = off + topo.num_classes * d;
        ParamLayout {
            stages,
            dense_w,
            dense_b,
            total: dense_b + topo.num_classes,
        }
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Copy all trainable parameters into one flat vector.
pub fn pack_trainable(model: &ModelParams) -> Vec<f32> {
    let layout = ParamLayout::new(&model.topology);
    let mut flat = vec![0.0; layout.len()];
    for (layer, so) in model.backbone.iter().zip(&layout.stages) {
        flat[so.conv_w..so.conv_w + so.conv_w_len].copy_from_slice(&layer.conv.weights);
        flat[so.conv_b..so.conv_b + so.channels].copy_from_slice(&layer.conv.bias);
        flat[so.gamma..so.gamma + so.channels].copy_from_slice(&layer.bn.gamma);
        flat[so.beta..so.beta + so.channels].copy_from_slice(&layer.bn.beta);
    }
    flat[layout.dense_w..layout.dense_w + model.classifier.weights.len()]
        .copy_from_slice(&model.classifier.weights);
    flat[layout.dense_b..].copy_from_slice(&model.classifier.bias);
    flat
}

/// Write a flat vector of trainable parameters back into the model.
pub fn unpack_trainable(model: &mut ModelParams, flat: &[f32]) {
    let layout = ParamLayout::new(&model.topology);
    assert_eq!(flat.len(), layout.len());
    for (layer, so) in model.backbone.iter_mut().zip(&layout.stages) {
        layer
            .conv
            .weights
            .copy_from_slice(&flat[so.conv_w..so.conv_w + so.conv_w_len]);
        layer
            .conv
            .bias
            .copy_from_slice(&flat[so.conv_b..so.conv_b + so.channels]);
        layer
            .bn
            .gamma
            .copy_from_slice(&flat[so.gamma..so.gamma + so.channels]);
        layer
            .bn
            .beta
            .copy_from_slice(&flat[so.beta..so.beta + so.channels]);
    }
    let dw = model.classifier.weights.len();
    model
        .classifier
        .weights
        .copy_from_slice(&flat[layout.dense_w..layout.dense_w + dw]);
    model.classifier.bias.copy_from_slice(&flat[layout.dense_b..]);
}

/// Scaled dropout masks (0 or `1/(1-rate)`), one per dropout site, each
/// covering the whole batch. Masks are sampled once per step and reused
/// by the backward pass.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    sites: Vec<Vec<f32>>,
}

impl DropoutMasks {
    /// Sample masks for a batch. Sites are ordered: stem, then the three
    /// stages of each block.
    pub fn sample(topo: &Topology, batch: usize, rng: &mut StreamRng) -> Self {
        let per_site = batch * topo.hidden_channels * topo.input_width;
        let rate = topo.dropout_rate;
        let scale = 1.0 / (1.0 - rate);
        let sites = (0..1 + 3 * topo.num_blocks)
            .map(|_| {
                (0..per_site)
                    .map(|_| if rng.next_f32() < rate { 0.0 } else { scale })
                    .collect()
            })
            .collect();
        DropoutMasks { sites }
    }

    /// All-pass masks (dropout disabled); useful for deterministic
    /// optimization tests.
    pub fn identity(topo: &Topology, batch: usize) -> Self {
        let per_site = batch * topo.hidden_channels * topo.input_width;
        DropoutMasks {
            sites: vec![vec![1.0; per_site]; 1 + 3 * topo.num_blocks],
        }
    }

    /// Mask of one dropout site, flat over `[sample][channel][width]`.
    pub fn site(&self, idx: usize) -> &[f32] {
        &self.sites[idx]
    }
}

/// Per-stage batch statistics, for the running-average update.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Everything backward needs from the forward pass.
pub(crate) struct ForwardCaches {
    stages: Vec<StageCache>,
    dense_in: Vec<f32>,
    probs: Vec<f32>,
}

#[cfg(test)]
impl ForwardCaches {
    pub(crate) fn x_hats(&self) -> Vec<&Batch> {
        self.stages.iter().map(|s| &s.x_hat).collect()
    }
}

struct StageCache {
    conv_in: Batch,
    x_hat: Batch,
    inv_std: Vec<f32>,
    post_relu: Batch,
}

/// Result of one loss-and-gradients evaluation.
pub struct BackpropOutput {
    /// Weighted mean cross-entropy over the batch.
    pub loss: f32,
    /// Gradient for every trainable parameter, in [`ParamLayout`] order.
    pub gradients: Vec<f32>,
    /// Batch statistics of every batch-norm stage, in network order.
    pub batch_stats: Vec<BnBatchStats>,
}

fn validate_batch(
    model: &ModelParams,
    windows: &[&Tensor],
    labels: &[usize],
    sample_weights: &[f32],
) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::domain("backprop: empty batch"));
    }
    if windows.len() != labels.len() || windows.len() != sample_weights.len() {
        return Err(Error::shape("backprop: windows/labels/weights lengths differ"));
    }
    let topo = &model.topology;
    for t in windows {
        if t.channels() != topo.input_channels || t.width() != topo.input_width {
            return Err(Error::shape("backprop: window shape does not match topology"));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= topo.num_classes) {
        return Err(Error::domain(alloc::format!(
            "backprop: label {bad} out of range"
        )));
    }
    Ok(())
}

// Convolution forward on a batch (kernel 3, stride 1, zero padding 1).
fn conv_forward(input: &Batch, weights: &[f32], bias: &[f32], out_channels: usize) -> Batch {
    let (n, in_ch, width) = (input.n, input.channels, input.width);
    let mut out = Batch::zeros(n, out_channels, width);
    let k = 3usize;
    for b in 0..n {
        for o in 0..out_channels {
            for ow in 0..width {
                let mut acc = bias[o];
                let origin = ow as isize - 1;
                for i in 0..in_ch {
                    let w_base = (o * in_ch + i) * k;
                    for t in 0..k {
                        let x = origin + t as isize;
                        if x >= 0 && (x as usize) < width {
                            acc += weights[w_base + t] * input.at(b, i, x as usize);
                        }
                    }
                }
                out.set(b, o, ow, acc);
            }
        }
    }
    out
}

// Batch-norm forward with batch statistics; returns (y, x_hat, inv_std,
// stats).
fn bn_forward_train(
    input: &Batch,
    gamma: &[f32],
    beta: &[f32],
) -> (Batch, Batch, Vec<f32>, BnBatchStats) {
    let (n, c, width) = (input.n, input.channels, input.width);
    let m = (n * width) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f32;
        for b in 0..n {
            for w in 0..width {
                acc += input.at(b, ch, w);
            }
        }
        mean[ch] = acc / m;
        let mut sq = 0.0f32;
        for b in 0..n {
            for w in 0..width {
                let d = input.at(b, ch, w) - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / m;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / libm::sqrtf(v + BN_EPSILON)).collect();
    let mut x_hat = Batch::zeros(n, c, width);
    let mut y = Batch::zeros(n, c, width);
    for b in 0..n {
        for ch in 0..c {
            for w in 0..width {
                let xh = (input.at(b, ch, w) - mean[ch]) * inv_std[ch];
                x_hat.set(b, ch, w, xh);
                y.set(b, ch, w, gamma[ch] * xh + beta[ch]);
            }
        }
    }
    (y, x_hat, inv_std, BnBatchStats { mean, var })
}

fn relu_forward(batch: &mut Batch) {
    for v in &mut batch.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn apply_mask(batch: &mut Batch, mask: &[f32]) {
    for (v, &m) in batch.data.iter_mut().zip(mask) {
        *v *= m;
    }
}

// One conv+bn+relu+dropout stage; `skip` (if given) is added after batch
// norm, before the ReLU.
#[allow(clippy::too_many_arguments)]
fn stage_forward(
    input: Batch,
    weights: &[f32],
    bias: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out_channels: usize,
    skip: Option<&Batch>,
    mask: &[f32],
    stats_out: &mut Vec<BnBatchStats>,
) -> (StageCache, Batch) {
    let conv_out = conv_forward(&input, weights, bias, out_channels);
    let (mut y, x_hat, inv_std, stats) = bn_forward_train(&conv_out, gamma, beta);
    stats_out.push(stats);
    if let Some(s) = skip {
        for (dst, &src) in y.data.iter_mut().zip(&s.data) {
            *dst += src;
        }
    }
    relu_forward(&mut y);
    let post_relu = y.clone();
    apply_mask(&mut y, mask);
    (
        StageCache {
            conv_in: input,
            x_hat,
            inv_std,
            post_relu,
        },
        y,
    )
}

// Full training-mode forward; returns caches, per-sample probabilities
// and the weighted mean loss.
pub(crate) fn forward_train(
    model: &ModelParams,
    windows: &[&Tensor],
    labels: &[usize],
    sample_weights: &[f32],
    masks: &DropoutMasks,
) -> Result<(ForwardCaches, Vec<BnBatchStats>, f32)> {
    validate_batch(model, windows, labels, sample_weights)?;
    let topo = &model.topology;
    let h = topo.hidden_channels;
    let n = windows.len();

    let mut stats = Vec::with_capacity(topo.num_conv_layers());
    let mut stages = Vec::with_capacity(topo.num_conv_layers());

    let mut cur = Batch::from_windows(windows);
    // Stem.
    {
        let layer = &model.backbone[0];
        let (cache, out) = stage_forward(
            cur,
            &layer.conv.weights,
            &layer.conv.bias,
            &layer.bn.gamma,
            &layer.bn.beta,
            h,
            None,
            &masks.sites[0],
            &mut stats,
        );
        stages.push(cache);
        cur = out;
    }

    for block in 0..topo.num_blocks {
        let base = 1 + 3 * block;
        // Stage 1 consumes the block input (which backward also uses as
        // the skip source, via its conv_in cache).
        for stage in 0..3 {
            let layer = &model.backbone[base + stage];
            let skip_owned;
            let skip = if stage == 2 {
                skip_owned = stages[base].conv_in.clone();
                Some(&skip_owned)
            } else {
                None
            };
            let (cache, out) = stage_forward(
                cur,
                &layer.conv.weights,
                &layer.conv.bias,
                &layer.bn.gamma,
                &layer.bn.beta,
                h,
                skip,
                &masks.sites[base + stage],
                &mut stats,
            );
            stages.push(cache);
            cur = out;
        }
    }

    // Flatten (sample-major layout is already [b][c][w]) and classify.
    let d = topo.dense_input_len();
    let c = topo.num_classes;
    let dense_in = cur.data;
    let mut probs = vec![0.0f32; n * c];
    let mut weight_total = 0.0f64;
    let mut loss_acc = 0.0f64;
    for b in 0..n {
        let x = &dense_in[b * d..(b + 1) * d];
        let mut logits = vec![0.0f32; c];
        for i in 0..c {
            let row = &model.classifier.weights[i * d..(i + 1) * d];
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += row[j] * x[j];
            }
            logits[i] = acc + model.classifier.bias[i];
        }
        let mut max = logits[0];
        for &v in &logits {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for v in logits.iter_mut() {
            *v = libm::expf(*v - max);
            sum += *v;
        }
        for (i, v) in logits.iter().enumerate() {
            probs[b * c + i] = v / sum;
        }
        // Clamp away from zero only when finite; NaN must propagate so a
        // diverged run aborts instead of silently continuing.
        let p_raw = probs[b * c + labels[b]];
        let p_true = if p_raw.is_finite() {
            p_raw.max(f32::MIN_POSITIVE)
        } else {
            p_raw
        };
        loss_acc += f64::from(sample_weights[b]) * f64::from(-libm::logf(p_true));
        weight_total += f64::from(sample_weights[b]);
    }
    let loss = (loss_acc / weight_total) as f32;

    Ok((
        ForwardCaches {
            stages,
            dense_in,
            probs,
        },
        stats,
        loss,
    ))
}

/// Loss of a batch under fixed dropout masks. Pure; used by the training
/// loop and by finite-difference checks.
pub fn batch_loss(
    model: &ModelParams,
    windows: &[&Tensor],
    labels: &[usize],
    sample_weights: &[f32],
    masks: &DropoutMasks,
) -> Result<f32> {
    forward_train(model, windows, labels, sample_weights, masks).map(|(_, _, loss)| loss)
}

// Batch-norm backward. Returns dL/dx and accumulates dgamma/dbeta.
fn bn_backward(
    d_y: &Batch,
    x_hat: &Batch,
    inv_std: &[f32],
    gamma: &[f32],
    d_gamma: &mut [f32],
    d_beta: &mut [f32],
) -> Batch {
    let (n, c, width) = (d_y.n, d_y.channels, d_y.width);
    let m = (n * width) as f32;
    let mut d_x = Batch::zeros(n, c, width);
    for ch in 0..c {
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for b in 0..n {
            for w in 0..width {
                let dy = d_y.at(b, ch, w);
                sum_dy += dy;
                sum_dy_xhat += dy * x_hat.at(b, ch, w);
            }
        }
        d_gamma[ch] += sum_dy_xhat;
        d_beta[ch] += sum_dy;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        let scale = gamma[ch] * inv_std[ch];
        for b in 0..n {
            for w in 0..width {
                let dy = d_y.at(b, ch, w);
                let dx = scale * (dy - mean_dy - x_hat.at(b, ch, w) * mean_dy_xhat);
                d_x.set(b, ch, w, dx);
            }
        }
    }
    d_x
}

// Convolution backward: accumulates dW/db, returns dL/dinput.
fn conv_backward(
    d_out: &Batch,
    input: &Batch,
    weights: &[f32],
    d_weights: &mut [f32],
    d_bias: &mut [f32],
) -> Batch {
    let (n, out_ch, width) = (d_out.n, d_out.channels, d_out.width);
    let in_ch = input.channels;
    let k = 3usize;
    let mut d_in = Batch::zeros(n, in_ch, width);
    for b in 0..n {
        for o in 0..out_ch {
            for ow in 0..width {
                let g = d_out.at(b, o, ow);
                d_bias[o] += g;
                let origin = ow as isize - 1;
                for i in 0..in_ch {
                    let w_base = (o * in_ch + i) * k;
                    for t in 0..k {
                        let x = origin + t as isize;
                        if x >= 0 && (x as usize) < width {
                            d_weights[w_base + t] += g * input.at(b, i, x as usize);
                            let di = d_in.idx(b, i, x as usize);
                            d_in.data[di] += g * weights[w_base + t];
                        }
                    }
                }
            }
        }
    }
    d_in
}

fn relu_backward(d_y: &mut Batch, post_relu: &Batch) {
    for (g, &y) in d_y.data.iter_mut().zip(&post_relu.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

// Backward through one stage; returns dL/d(stage input). If the stage has
// a skip connection, the gradient at the post-addition point is also
// returned so the caller can route it to the block input.
#[allow(clippy::too_many_arguments)]
fn stage_backward(
    model: &ModelParams,
    layout: &ParamLayout,
    stage_idx: usize,
    cache: &StageCache,
    mut d_out: Batch,
    mask: &[f32],
    grads: &mut [f32],
    has_skip: bool,
) -> (Batch, Option<Batch>) {
    apply_mask(&mut d_out, mask);
    relu_backward(&mut d_out, &cache.post_relu);
    let d_skip = if has_skip { Some(d_out.clone()) } else { None };

    let so = layout.stages[stage_idx];
    let layer = &model.backbone[stage_idx];
    let (g_gamma, rest) = grads[so.gamma..].split_at_mut(so.channels);
    let g_beta = &mut rest[..so.channels];
    let d_bn_in = bn_backward(
        &d_out,
        &cache.x_hat,
        &cache.inv_std,
        &layer.bn.gamma,
        g_gamma,
        g_beta,
    );

    let (g_w, rest) = grads[so.conv_w..].split_at_mut(so.conv_w_len);
    let g_b = &mut rest[..so.channels];
    let d_in = conv_backward(&d_bn_in, &cache.conv_in, &layer.conv.weights, g_w, g_b);
    (d_in, d_skip)
}

/// Exact reverse-mode gradients of the weighted batch loss for every
/// trainable parameter.
pub fn backprop_full(
    model: &ModelParams,
    windows: &[&Tensor],
    labels: &[usize],
    sample_weights: &[f32],
    masks: &DropoutMasks,
) -> Result<BackpropOutput> {
    let (caches, batch_stats, loss) =
        forward_train(model, windows, labels, sample_weights, masks)?;
    let topo = &model.topology;
    let layout = ParamLayout::new(topo);
    let mut grads = vec![0.0f32; layout.len()];

    let n = windows.len();
    let d = topo.dense_input_len();
    let c = topo.num_classes;
    let weight_total: f32 = sample_weights.iter().sum();

    // Head: d(loss)/d(logits) = weight/total * (P - onehot); then the
    // dense layer.
    let mut d_dense_in = vec![0.0f32; n * d];
    {
        let (g_w, rest) = grads[layout.dense_w..].split_at_mut(c * d);
        let g_b = &mut rest[..c];
        for b in 0..n {
            let scale = sample_weights[b] / weight_total;
            let x = &caches.dense_in[b * d..(b + 1) * d];
            for i in 0..c {
                let mut dl = caches.probs[b * c + i];
                if i == labels[b] {
                    dl -= 1.0;
                }
                dl *= scale;
                g_b[i] += dl;
                let row = &mut g_w[i * d..(i + 1) * d];
                let w_row = &model.classifier.weights[i * d..(i + 1) * d];
                let dx = &mut d_dense_in[b * d..(b + 1) * d];
                for j in 0..d {
                    row[j] += dl * x[j];
                    dx[j] += dl * w_row[j];
                }
            }
        }
    }

    // Unflatten to (batch, hidden, width) and walk the blocks backwards.
    let mut d_cur = Batch {
        n,
        channels: topo.hidden_channels,
        width: topo.input_width,
        data: d_dense_in,
    };

    for block in (0..topo.num_blocks).rev() {
        let base = 1 + 3 * block;
        let (d_stage3_in, d_skip) = stage_backward(
            model,
            &layout,
            base + 2,
            &caches.stages[base + 2],
            d_cur,
            &masks.sites[base + 2],
            &mut grads,
            true,
        );
        let (d_stage2_in, _) = stage_backward(
            model,
            &layout,
            base + 1,
            &caches.stages[base + 1],
            d_stage3_in,
            &masks.sites[base + 1],
            &mut grads,
            false,
        );
        let (mut d_block_in, _) = stage_backward(
            model,
            &layout,
            base,
            &caches.stages[base],
            d_stage2_in,
            &masks.sites[base],
            &mut grads,
            false,
        );
        // Merge the skip-path gradient into the block input gradient.
        if let Some(skip) = d_skip {
            for (a, b) in d_block_in.data.iter_mut().zip(&skip.data) {
                *a += b;
            }
        }
        d_cur = d_block_in;
    }

    let _ = stage_backward(
        model,
        &layout,
        0,
        &caches.stages[0],
        d_cur,
        &masks.sites[0],
        &mut grads,
        false,
    );

    Ok(BackpropOutput {
        loss,
        gradients: grads,
        batch_stats,
    })
}
