//! Shared oracles for integration tests: independent straight-line
//! reimplementations of the network math, kept deliberately separate from
//! the production code paths they check.

#![allow(dead_code)]
// Index-order loops mirror the documented kernel contracts.
#![allow(clippy::needless_range_loop)]

use odtl_core::model::{ModelParams, BN_EPSILON};
use odtl_core::rng::StreamRng;
use odtl_core::tensor::Tensor;
use odtl_core::train::DropoutMasks;

/// `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

// ---------------------------------------------------------------------
// f64 oracle of the training-mode loss
// ---------------------------------------------------------------------

/// Straight-line f64 evaluation of the weighted batch loss with
/// training-mode batch statistics and explicit dropout masks. Mirrors the
/// network definition, not the production implementation.
pub struct OracleNet {
    // Per conv stage: weights [out][in][3], bias, gamma, beta.
    pub stages: Vec<OracleStage>,
    pub dense_w: Vec<Vec<f64>>,
    pub dense_b: Vec<f64>,
    pub hidden: usize,
    pub blocks: usize,
}

pub struct OracleStage {
    pub w: Vec<Vec<[f64; 3]>>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl OracleNet {
    pub fn from_model(model: &ModelParams) -> Self {
        let topo = &model.topology;
        let h = topo.hidden_channels;
        let stages = model
            .backbone
            .iter()
            .enumerate()
            .map(|(s, layer)| {
                let in_ch = if s == 0 { topo.input_channels } else { h };
                let mut w = vec![vec![[0.0f64; 3]; in_ch]; h];
                for (o, row) in w.iter_mut().enumerate() {
                    for (i, taps) in row.iter_mut().enumerate() {
                        for (t, tap) in taps.iter_mut().enumerate() {
                            *tap = f64::from(layer.conv.weights[(o * in_ch + i) * 3 + t]);
                        }
                    }
                }
                OracleStage {
                    w,
                    b: layer.conv.bias.iter().map(|&v| f64::from(v)).collect(),
                    gamma: layer.bn.gamma.iter().map(|&v| f64::from(v)).collect(),
                    beta: layer.bn.beta.iter().map(|&v| f64::from(v)).collect(),
                }
            })
            .collect();
        let d = topo.dense_input_len();
        let dense_w = (0..topo.num_classes)
            .map(|i| {
                model.classifier.weights[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect()
            })
            .collect();
        OracleNet {
            stages,
            dense_w,
            dense_b: model.classifier.bias.iter().map(|&v| f64::from(v)).collect(),
            hidden: h,
            blocks: topo.num_blocks,
        }
    }
}

// Activations as [sample][channel][width] of f64.
type Acts = Vec<Vec<Vec<f64>>>;

fn oracle_conv(input: &Acts, stage: &OracleStage) -> Acts {
    let width = input[0][0].len();
    let in_ch = input[0].len();
    input
        .iter()
        .map(|sample| {
            (0..stage.w.len())
                .map(|o| {
                    (0..width)
                        .map(|ow| {
                            let mut acc = stage.b[o];
                            for i in 0..in_ch {
                                for t in 0..3usize {
                                    let x = ow as isize + t as isize - 1;
                                    if x >= 0 && (x as usize) < width {
                                        acc += stage.w[o][i][t] * sample[i][x as usize];
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn oracle_bn_train(input: &Acts, stage: &OracleStage) -> Acts {
    let n = input.len();
    let c = input[0].len();
    let width = input[0][0].len();
    let m = (n * width) as f64;
    let mut out = input.clone();
    for ch in 0..c {
        let mut mean = 0.0;
        for s in input {
            for &v in &s[ch] {
                mean += v;
            }
        }
        mean /= m;
        let mut var = 0.0;
        for s in input {
            for &v in &s[ch] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= m;
        let inv = 1.0 / (var + f64::from(BN_EPSILON)).sqrt();
        for (b, s) in out.iter_mut().enumerate() {
            for (w, v) in s[ch].iter_mut().enumerate() {
                *v = stage.gamma[ch] * ((input[b][ch][w] - mean) * inv) + stage.beta[ch];
            }
        }
    }
    out
}

fn oracle_relu(acts: &mut Acts) {
    for s in acts {
        for ch in s {
            for v in ch {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

// Masks are stored flat per site as [b][c][w]; values 0 or 1/(1-rate).
fn oracle_mask(acts: &mut Acts, mask: &[f32]) {
    let c = acts[0].len();
    let width = acts[0][0].len();
    for (b, s) in acts.iter_mut().enumerate() {
        for (ch, row) in s.iter_mut().enumerate() {
            for (w, v) in row.iter_mut().enumerate() {
                *v *= f64::from(mask[(b * c + ch) * width + w]);
            }
        }
    }
}

/// Weighted mean cross-entropy of a batch in f64, training semantics.
pub fn oracle_loss(
    net: &OracleNet,
    windows: &[&Tensor],
    labels: &[usize],
    sample_weights: &[f32],
    masks: &DropoutMasks,
) -> f64 {
    let mut acts: Acts = windows
        .iter()
        .map(|t| {
            (0..t.channels())
                .map(|c| (0..t.width()).map(|w| f64::from(t.at(c, w))).collect())
                .collect()
        })
        .collect();

    // Stem.
    acts = oracle_conv(&acts, &net.stages[0]);
    acts = oracle_bn_train(&acts, &net.stages[0]);
    oracle_relu(&mut acts);
    oracle_mask(&mut acts, masks.site(0));

    for block in 0..net.blocks {
        let base = 1 + 3 * block;
        let block_in = acts.clone();
        for stage in 0..3 {
            acts = oracle_conv(&acts, &net.stages[base + stage]);
            acts = oracle_bn_train(&acts, &net.stages[base + stage]);
            if stage == 2 {
                for (s, skip) in acts.iter_mut().zip(&block_in) {
                    for (ch, skip_ch) in s.iter_mut().zip(skip) {
                        for (v, &sv) in ch.iter_mut().zip(skip_ch) {
                            *v += sv;
                        }
                    }
                }
            }
            oracle_relu(&mut acts);
            oracle_mask(&mut acts, masks.site(base + stage));
        }
    }

    let mut loss = 0.0;
    let mut total_w = 0.0;
    for (b, sample) in acts.iter().enumerate() {
        let x: Vec<f64> = sample.iter().flat_map(|ch| ch.iter().copied()).collect();
        let logits: Vec<f64> = net
            .dense_w
            .iter()
            .zip(&net.dense_b)
            .map(|(row, &bias)| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + bias)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let log_p = logits[labels[b]] - max - sum.ln();
        loss += f64::from(sample_weights[b]) * -log_p;
        total_w += f64::from(sample_weights[b]);
    }
    loss / total_w
}

// ---------------------------------------------------------------------
// Straight-line f32 inference reference
// ---------------------------------------------------------------------

// One conv+BN(+skip)+ReLU stage in plain nested loops.
fn reference_stage(
    cur: &[Vec<f32>],
    layer: &odtl_core::model::BackboneLayer,
    out_channels: usize,
    skip: Option<&[Vec<f32>]>,
) -> Vec<Vec<f32>> {
    let in_ch = cur.len();
    let width = cur[0].len();
    let mut out = vec![vec![0.0f32; width]; out_channels];
    for (o, out_row) in out.iter_mut().enumerate() {
        for (ow, slot) in out_row.iter_mut().enumerate() {
            let mut acc = layer.conv.bias[o];
            for (i, in_row) in cur.iter().enumerate() {
                for t in 0..3usize {
                    let x = ow as isize + t as isize - 1;
                    if x >= 0 && (x as usize) < width {
                        acc += layer.conv.weights[(o * in_ch + i) * 3 + t] * in_row[x as usize];
                    }
                }
            }
            *slot = acc;
        }
    }
    for (c, row) in out.iter_mut().enumerate() {
        let inv = 1.0 / (layer.bn.running_var[c] + BN_EPSILON).sqrt();
        for v in row.iter_mut() {
            *v = layer.bn.gamma[c] * ((*v - layer.bn.running_mean[c]) * inv) + layer.bn.beta[c];
        }
    }
    if let Some(s) = skip {
        for (row, srow) in out.iter_mut().zip(s) {
            for (v, &sv) in row.iter_mut().zip(srow) {
                *v += sv;
            }
        }
    }
    for row in &mut out {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Inference-mode forward in plain nested loops over the model's own
/// parameter vectors; returns (probabilities, dense input).
pub fn reference_infer_forward(model: &ModelParams, input: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let topo = &model.topology;
    let h = topo.hidden_channels;

    let mut cur: Vec<Vec<f32>> = (0..input.channels())
        .map(|c| (0..input.width()).map(|w| input.at(c, w)).collect())
        .collect();

    cur = reference_stage(&cur, &model.backbone[0], h, None);
    for block in 0..topo.num_blocks {
        let base = 1 + 3 * block;
        let block_in = cur.clone();
        cur = reference_stage(&cur, &model.backbone[base], h, None);
        cur = reference_stage(&cur, &model.backbone[base + 1], h, None);
        cur = reference_stage(&cur, &model.backbone[base + 2], h, Some(&block_in));
    }

    let dense_input: Vec<f32> = cur.iter().flat_map(|row| row.iter().copied()).collect();
    let c = topo.num_classes;
    let d = dense_input.len();
    let mut logits = vec![0.0f32; c];
    for (i, slot) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for j in 0..d {
            acc += model.classifier.weights[i * d + j] * dense_input[j];
        }
        *slot = acc + model.classifier.bias[i];
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut probs: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    (probs, dense_input)
}

// ---------------------------------------------------------------------
// Counting kernels: padded convolution with an explicit MAC counter
// ---------------------------------------------------------------------

/// Convolution over an explicitly zero-padded buffer, counting every
/// multiply-accumulate (padding taps included, as an embedded kernel
/// performs them).
pub fn conv_padded_counting(
    input: &[Vec<f32>],
    weights: &[f32],
    bias: &[f32],
    out_channels: usize,
    macs: &mut u64,
) -> Vec<Vec<f32>> {
    let in_ch = input.len();
    let width = input[0].len();
    let padded: Vec<Vec<f32>> = input
        .iter()
        .map(|row| {
            let mut p = vec![0.0f32];
            p.extend_from_slice(row);
            p.push(0.0);
            p
        })
        .collect();
    let mut out = vec![vec![0.0f32; width]; out_channels];
    for (o, out_row) in out.iter_mut().enumerate() {
        for (ow, slot) in out_row.iter_mut().enumerate() {
            let mut acc = bias[o];
            for (i, p_row) in padded.iter().enumerate() {
                for t in 0..3usize {
                    acc += weights[(o * in_ch + i) * 3 + t] * p_row[ow + t];
                    *macs += 1;
                }
            }
            *slot = acc;
        }
    }
    out
}

/// Full inference forward that counts conv and dense MACs the way an
/// embedded kernel executes them (padding included, batch norm and
/// activations excluded).
pub fn counting_forward(model: &ModelParams, input: &Tensor) -> (Vec<f32>, u64) {
    let topo = &model.topology;
    let mut macs = 0u64;
    let mut cur: Vec<Vec<f32>> = (0..input.channels())
        .map(|c| (0..input.width()).map(|w| input.at(c, w)).collect())
        .collect();

    let run_stage = |cur: &Vec<Vec<f32>>,
                     layer: &odtl_core::model::BackboneLayer,
                     skip: Option<&Vec<Vec<f32>>>,
                     macs: &mut u64| {
        let mut out = conv_padded_counting(
            cur,
            &layer.conv.weights,
            &layer.conv.bias,
            topo.hidden_channels,
            macs,
        );
        for (c, row) in out.iter_mut().enumerate() {
            let inv = 1.0 / (layer.bn.running_var[c] + BN_EPSILON).sqrt();
            for v in row.iter_mut() {
                *v = layer.bn.gamma[c] * ((*v - layer.bn.running_mean[c]) * inv)
                    + layer.bn.beta[c];
            }
        }
        if let Some(s) = skip {
            for (row, srow) in out.iter_mut().zip(s) {
                for (v, &sv) in row.iter_mut().zip(srow) {
                    *v += sv;
                }
            }
        }
        for row in &mut out {
            for v in row.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    };

    cur = run_stage(&cur, &model.backbone[0], None, &mut macs);
    for block in 0..topo.num_blocks {
        let base = 1 + 3 * block;
        let block_in = cur.clone();
        cur = run_stage(&cur, &model.backbone[base], None, &mut macs);
        cur = run_stage(&cur, &model.backbone[base + 1], None, &mut macs);
        cur = run_stage(&cur, &model.backbone[base + 2], Some(&block_in), &mut macs);
    }

    let x: Vec<f32> = cur.iter().flat_map(|row| row.iter().copied()).collect();
    let c = topo.num_classes;
    let d = x.len();
    let mut logits = vec![0.0f32; c];
    for (i, slot) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for j in 0..d {
            acc += model.classifier.weights[i * d + j] * x[j];
            macs += 1;
        }
        *slot = acc + model.classifier.bias[i];
    }
    (logits, macs)
}

// ---------------------------------------------------------------------
// Independent batch-size-1 SGD-with-momentum reference
// ---------------------------------------------------------------------

/// Plain nested-vector SGD-with-momentum over precomputed features,
/// following the canonical accumulation orders (dense sums ascending,
/// bias last; softmax subtracts the max).
pub struct SgdMomentumReference {
    pub w: Vec<Vec<f32>>,
    pub b: Vec<f32>,
    pub vel_w: Vec<Vec<f32>>,
    pub vel_b: Vec<f32>,
    pub lr: f32,
    pub momentum: f32,
}

impl SgdMomentumReference {
    pub fn new(w: Vec<Vec<f32>>, b: Vec<f32>, lr: f32, momentum: f32) -> Self {
        let vel_w = w.iter().map(|row| vec![0.0; row.len()]).collect();
        let vel_b = vec![0.0; b.len()];
        SgdMomentumReference {
            w,
            b,
            vel_w,
            vel_b,
            lr,
            momentum,
        }
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f32> {
        let mut logits: Vec<f32> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(row, &bias)| {
                let mut acc = 0.0f32;
                for (wj, xj) in row.iter().zip(x) {
                    acc += wj * xj;
                }
                acc + bias
            })
            .collect();
        let mut max = logits[0];
        for &z in &logits {
            if z > max {
                max = z;
            }
        }
        let mut sum = 0.0f32;
        for z in logits.iter_mut() {
            *z = libm::expf(*z - max);
            sum += *z;
        }
        for z in logits.iter_mut() {
            *z /= sum;
        }
        logits
    }

    pub fn step(&mut self, x: &[f32], label: usize) {
        let p = self.probabilities(x);
        for i in 0..self.b.len() {
            let residual = p[i] - if i == label { 1.0 } else { 0.0 };
            for j in 0..x.len() {
                let g = x[j] * residual;
                self.vel_w[i][j] = self.momentum * self.vel_w[i][j] + g;
                self.w[i][j] -= self.lr * self.vel_w[i][j];
            }
            self.vel_b[i] = self.momentum * self.vel_b[i] + residual;
            self.b[i] -= self.lr * self.vel_b[i];
        }
    }
}

// ---------------------------------------------------------------------
// Bit-level round-to-nearest-even oracle for the 16-bit truncated format
// ---------------------------------------------------------------------

/// Slow field-by-field round-to-nearest-even narrowing of an f32 bit
/// pattern to the upper-half 16-bit format, widened back.
pub fn slow_rne_narrow(x: f32) -> f32 {
    let bits = x.to_bits();
    let exp = (bits >> 23) & 0xFF;
    if exp == 0xFF {
        // Infinity and NaN keep their class.
        if bits & 0x007F_FFFF == 0 {
            return x;
        }
        return f32::from_bits((bits & 0xFFFF_0000) | 0x0040_0000);
    }
    let low = bits & 0xFFFF;
    let mut kept = bits & 0xFFFF_0000;
    match low.cmp(&0x8000) {
        core::cmp::Ordering::Greater => kept = kept.wrapping_add(0x1_0000),
        core::cmp::Ordering::Equal => {
            if kept & 0x1_0000 != 0 {
                kept = kept.wrapping_add(0x1_0000);
            }
        }
        core::cmp::Ordering::Less => {}
    }
    f32::from_bits(kept)
}

// ---------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------

pub fn random_window(channels: usize, width: usize, seed: u64, scale: f32) -> Tensor {
    let mut rng = StreamRng::seed(seed);
    let data = (0..channels * width)
        .map(|_| rng.next_symmetric(scale))
        .collect();
    Tensor::from_vec(channels, width, data).unwrap()
}
