//! Fixed-shape tensors and the numeric kernels.
//!
//! A [`Tensor`] is a `(channels, width)` array stored row-major
//! (channel-major): element `(c, w)` lives at `data[c * width + w]`.
//! Flattening is therefore just exposing the backing slice.
//!
//! All kernels accumulate in 32-bit arithmetic. In
//! [`NumericMode::Truncated16`] every stored value is rounded once
//! (round-to-nearest-even) to the 16-bit format with 8 exponent and
//! 7 mantissa bits — the upper half of the 32-bit layout — and then
//! widened back, so the in-memory `f32` values are exactly the values a
//! 16-bit store would hold.
//!
//! Accumulation order is part of each kernel's contract (it pins
//! bit-exact reproducibility): conv starts from the bias and adds
//! products in (in-channel, tap) order; dense sums products in ascending
//! input index and adds the bias last; softmax subtracts the maximum,
//! exponentiates, and sums in ascending index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::StreamRng;
use crate::Result;

/// Numeric storage mode for kernel outputs and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    /// Standard 32-bit binary floating point.
    Full32,
    /// 16-bit storage (8 exponent / 7 mantissa bits), 32-bit accumulation,
    /// round-to-nearest-even on store.
    Truncated16,
}

impl NumericMode {
    /// Round a freshly computed value as a store into this mode would.
    #[inline]
    pub fn store(self, x: f32) -> f32 {
        match self {
            NumericMode::Full32 => x,
            NumericMode::Truncated16 => quantize_roundtrip(x),
        }
    }
}

/// Round a 32-bit value to the nearest 16-bit truncated value (ties to
/// even) and widen back. Idempotent; the low 16 mantissa bits of the
/// result are zero.
#[inline]
pub fn quantize_roundtrip(x: f32) -> f32 {
    let bits = x.to_bits();
    if bits & 0x7FFF_FFFF > 0x7F80_0000 {
        // NaN: keep sign and top mantissa bits, force a quiet payload so
        // the narrowed pattern is still a NaN.
        return f32::from_bits((bits & 0xFFFF_0000) | 0x0040_0000);
    }
    let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
    f32::from_bits(rounded & 0xFFFF_0000)
}

/// A `(channels, width)` array of 32-bit scalars, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    /// Zero-filled tensor. Counts must be positive.
    pub fn zeros(channels: usize, width: usize) -> Self {
        assert!(channels > 0 && width > 0, "tensor dims must be positive");
        Tensor {
            channels,
            width,
            data: vec![0.0; channels * width],
        }
    }

    /// Build from a flat channel-major buffer.
    pub fn from_vec(channels: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || width == 0 {
            return Err(Error::domain("tensor dims must be positive"));
        }
        if data.len() != channels * width {
            return Err(Error::shape(format!(
                "data length {} != {}x{}",
                data.len(),
                channels,
                width
            )));
        }
        Ok(Tensor {
            channels,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat channel-major view; this is also the flatten kernel.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, w: usize) -> f32 {
        self.data[c * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, w: usize, v: f32) {
        self.data[c * self.width + w] = v;
    }

    /// Copy contents of `src` (same shape required).
    pub fn copy_from(&mut self, src: &Tensor) {
        assert_eq!(self.channels, src.channels);
        assert_eq!(self.width, src.width);
        self.data.copy_from_slice(&src.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every element as a store in `mode` would.
    pub fn narrow(&mut self, mode: NumericMode) {
        if mode == NumericMode::Truncated16 {
            for v in &mut self.data {
                *v = quantize_roundtrip(*v);
            }
        }
    }
}

/// Geometry of one convolution layer. Every layer in this artifact uses
/// kernel 3, stride 1, padding 1, so output width equals input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
        }
    }

    /// Number of weight scalars: `out * in * kernel`.
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size
    }

    pub fn output_width(&self, input_width: usize) -> usize {
        (input_width + 2 * self.padding - self.kernel_size) / self.stride + 1
    }
}

/// 1D convolution with zero padding. Weights are `[out][in][k]` flattened.
pub fn conv1d(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &[f32],
    bias: &[f32],
    mode: NumericMode,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(spec.out_channels, spec.output_width(input.width()));
    conv1d_into(input, spec, weights, bias, mode, &mut out)?;
    Ok(out)
}

/// In-place destination form of [`conv1d`]. `out` must already have shape
/// `(out_channels, output_width)`; `out` must not alias `input`.
pub fn conv1d_into(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &[f32],
    bias: &[f32],
    mode: NumericMode,
    out: &mut Tensor,
) -> Result<()> {
    if input.channels() != spec.in_channels {
        return Err(Error::shape(format!(
            "conv1d: input has {} channels, spec expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::shape(format!(
            "conv1d: {} weights, expected {}",
            weights.len(),
            spec.weight_len()
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::shape(format!(
            "conv1d: {} biases, expected {}",
            bias.len(),
            spec.out_channels
        )));
    }
    let out_w = spec.output_width(input.width());
    if out.channels() != spec.out_channels || out.width() != out_w {
        return Err(Error::shape(format!(
            "conv1d: output buffer is {}x{}, expected {}x{}",
            out.channels(),
            out.width(),
            spec.out_channels,
            out_w
        )));
    }

    let width = input.width();
    let k = spec.kernel_size;
    for o in 0..spec.out_channels {
        for ow in 0..out_w {
            let mut acc = bias[o];
            let origin = (ow * spec.stride) as isize - spec.padding as isize;
            for i in 0..spec.in_channels {
                let w_base = (o * spec.in_channels + i) * k;
                for t in 0..k {
                    let x = origin + t as isize;
                    if x >= 0 && (x as usize) < width {
                        acc += weights[w_base + t] * input.at(i, x as usize);
                    }
                }
            }
            out.set(o, ow, mode.store(acc));
        }
    }
    Ok(())
}

/// Inference batch normalization using running statistics:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batch_norm_infer(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    epsilon: f32,
    mode: NumericMode,
) -> Result<Tensor> {
    let mut out = input.clone();
    batch_norm_infer_inplace(&mut out, gamma, beta, running_mean, running_var, epsilon, mode)?;
    Ok(out)
}

pub fn batch_norm_infer_inplace(
    t: &mut Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    epsilon: f32,
    mode: NumericMode,
) -> Result<()> {
    let c = t.channels();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: parameter arrays must all have length {c}"
        )));
    }
    if let Some(v) = running_var.iter().find(|v| **v < 0.0) {
        return Err(Error::domain(format!("batch_norm: negative variance {v}")));
    }
    let width = t.width();
    for ch in 0..c {
        let inv_std = 1.0 / libm::sqrtf(running_var[ch] + epsilon);
        let (g, b, m) = (gamma[ch], beta[ch], running_mean[ch]);
        for w in 0..width {
            let x = t.at(ch, w);
            t.set(ch, w, mode.store(g * ((x - m) * inv_std) + b));
        }
    }
    Ok(())
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_inplace(&mut out);
    out
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Inverted dropout for training-mode execution: each element is zeroed
/// with probability `rate`, survivors scaled by `1 / (1 - rate)`. The
/// inference path omits this op entirely.
pub fn dropout_train(
    input: &Tensor,
    rate: f32,
    rng: &mut StreamRng,
    mode: NumericMode,
) -> Result<Tensor> {
    let mut out = input.clone();
    dropout_train_inplace(&mut out, rate, rng, mode)?;
    Ok(out)
}

pub fn dropout_train_inplace(
    t: &mut Tensor,
    rate: f32,
    rng: &mut StreamRng,
    mode: NumericMode,
) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    let scale = 1.0 / (1.0 - rate);
    for v in t.data_mut() {
        if rng.next_f32() < rate {
            *v = 0.0;
        } else {
            *v = mode.store(*v * scale);
        }
    }
    Ok(())
}

/// Affine map `out[i] = sum_j w[i][j] * x[j] + b[i]`; `w` is `[C][D]`
/// row-major. Products are summed in ascending `j`, bias added last.
pub fn dense(x: &[f32], w: &[f32], b: &[f32], mode: NumericMode) -> Result<Vec<f32>> {
    let mut out = vec![0.0; b.len()];
    dense_into(x, w, b, mode, &mut out)?;
    Ok(out)
}

pub fn dense_into(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    mode: NumericMode,
    out: &mut [f32],
) -> Result<()> {
    let c = b.len();
    let d = x.len();
    if w.len() != c * d {
        return Err(Error::shape(format!(
            "dense: weight matrix has {} entries, expected {c}x{d}",
            w.len()
        )));
    }
    if out.len() != c {
        return Err(Error::shape(format!(
            "dense: output buffer has length {}, expected {c}",
            out.len()
        )));
    }
    for i in 0..c {
        let row = &w[i * d..(i + 1) * d];
        let mut acc = 0.0f32;
        for j in 0..d {
            acc += row[j] * x[j];
        }
        out[i] = mode.store(acc + b[i]);
    }
    Ok(())
}

/// Numerically stable softmax: subtract the maximum, exponentiate, and
/// normalize. Rejects non-finite logits.
pub fn softmax(logits: &[f32], mode: NumericMode) -> Result<Vec<f32>> {
    let mut out = logits.to_vec();
    softmax_inplace(&mut out, mode)?;
    Ok(out)
}

pub fn softmax_inplace(z: &mut [f32], mode: NumericMode) -> Result<()> {
    if z.is_empty() {
        return Err(Error::domain("softmax: empty logit vector"));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("softmax: non-finite logit {v}")));
    }
    let mut max = z[0];
    for &v in z.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in z.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v = mode.store(*v / sum);
    }
    Ok(())
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    const F32: NumericMode = NumericMode::Full32;

    fn tensor(channels: usize, width: usize, data: &[f32]) -> Tensor {
        Tensor::from_vec(channels, width, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = tensor(1, 3, &[1.0, 2.0, 3.0]);
        let spec = ConvSpec::new(1, 1);
        let out = conv1d(&input, &spec, &[0.0, 1.0, 0.0], &[0.0], F32).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_box_kernel_matches_hand_unrolled_values() {
        let input = tensor(1, 3, &[1.0, 2.0, 3.0]);
        let spec = ConvSpec::new(1, 1);
        let out = conv1d(&input, &spec, &[1.0, 1.0, 1.0], &[0.0], F32).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_zero_input_passes_bias() {
        let input = Tensor::zeros(2, 2);
        let spec = ConvSpec::new(2, 3);
        let weights: Vec<f32> = (0..spec.weight_len()).map(|i| i as f32).collect();
        let out = conv1d(&input, &spec, &weights, &[0.5, 0.5, 0.5], F32).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(2, 4);
        let spec = ConvSpec::new(3, 1);
        let err = conv1d(&input, &spec, &[0.0; 9], &[0.0], F32).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn conv_preserves_width_with_same_padding() {
        for width in [1, 2, 5, 9] {
            let input = Tensor::zeros(2, width);
            let spec = ConvSpec::new(2, 4);
            let out = conv1d(&input, &spec, &vec![0.1; spec.weight_len()], &[0.0; 4], F32).unwrap();
            assert_eq!(out.width(), width);
        }
    }

    #[test]
    fn batch_norm_identity_stats_pass_through() {
        let input = tensor(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, -0.5]);
        let out = batch_norm_infer(
            &input,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
            0.0,
            F32,
        )
        .unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn batch_norm_matches_scalar_hand_evaluation() {
        let input = tensor(1, 1, &[4.0]);
        let out = batch_norm_infer(&input, &[3.0], &[1.0], &[2.0], &[4.0], 0.0, F32).unwrap();
        assert!((out.at(0, 0) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_zero_gamma_yields_beta() {
        let input = tensor(1, 4, &[5.0, -1.0, 2.0, 9.0]);
        let out = batch_norm_infer(&input, &[0.0], &[7.0], &[1.0], &[2.0], 1e-5, F32).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn batch_norm_rejects_negative_variance() {
        let input = Tensor::zeros(1, 2);
        let err =
            batch_norm_infer(&input, &[1.0], &[0.0], &[0.0], &[-0.1], 1e-5, F32).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let out = relu(&tensor(1, 3, &[-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);

        let all_neg = relu(&tensor(1, 3, &[-5.0, -0.1, -2.0]));
        assert!(all_neg.data().iter().all(|&v| v == 0.0));

        let nonneg = tensor(1, 3, &[0.0, 1.5, 7.0]);
        assert_eq!(relu(&nonneg).data(), nonneg.data());
    }

    #[test]
    fn dropout_rate_zero_is_bit_exact_identity() {
        let input = tensor(2, 4, &[0.1, -0.2, 0.3, 1e-20, 5.0, -7.5, 0.0, 42.0]);
        let mut rng = StreamRng::seed(1);
        let out = dropout_train(&input, 0.0, &mut rng, F32).unwrap();
        assert_eq!(
            out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            input.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dropout_mask_mean_is_near_one_after_scaling() {
        // Monte Carlo: mean of the scaled mask over 1e5 ones.
        let input = Tensor::from_vec(1, 100_000, vec![1.0; 100_000]).unwrap();
        let mut rng = StreamRng::seed(42);
        let out = dropout_train(&input, 0.1, &mut rng, F32).unwrap();
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_same_seed_twice_is_identical() {
        let input = tensor(1, 64, &[1.0; 64]);
        let a = dropout_train(&input, 0.3, &mut StreamRng::seed(9), F32).unwrap();
        let b = dropout_train(&input, 0.3, &mut StreamRng::seed(9), F32).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let input = Tensor::zeros(1, 1);
        for rate in [1.0, 1.5, -0.1] {
            let err = dropout_train(&input, rate, &mut StreamRng::seed(0), F32).unwrap_err();
            assert!(matches!(err, Error::Domain(_)));
        }
    }

    #[test]
    fn dense_identity_matrix_passes_through() {
        let x = [1.0, 2.0, 3.0];
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let out = dense(&x, &w, &[0.0; 3], F32).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_matches_hand_evaluation() {
        let out = dense(&[4.0, 5.0], &[1.0, 2.0], &[3.0], F32).unwrap();
        assert_eq!(out, vec![17.0]);
    }

    #[test]
    fn dense_zero_input_yields_bias() {
        let out = dense(&[0.0, 0.0], &[1.0, 2.0, 3.0, 4.0], &[5.0, -6.0], F32).unwrap();
        assert_eq!(out, vec![5.0, -6.0]);
    }

    #[test]
    fn dense_rejects_dimension_mismatch() {
        let err = dense(&[1.0, 2.0, 3.0], &[1.0, 2.0], &[0.0], F32).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let out = softmax(&[0.0, 0.0, 0.0], F32).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let out = softmax(&[1000.0, 0.0], F32).unwrap();
        assert!(out[0] > 0.999_999);
        assert!(out[1] < 1e-6);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_exact_exponentials() {
        let logits = [1.0f32.ln(), 2.0f32.ln(), 3.0f32.ln()];
        let out = softmax(&logits, F32).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_logits() {
        for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            let err = softmax(&[0.0, bad], F32).unwrap_err();
            assert!(matches!(err, Error::Domain(_)));
        }
    }

    #[test]
    fn quantize_exact_values_are_preserved() {
        assert_eq!(quantize_roundtrip(1.0), 1.0);
        assert_eq!(quantize_roundtrip(-2.5), -2.5);
        assert_eq!(quantize_roundtrip(0.0).to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn quantize_rounds_just_above_one_back_down() {
        let x = f32::from_bits(0x3F80_0001);
        assert_eq!(quantize_roundtrip(x), 1.0);
    }

    #[test]
    fn quantize_ties_go_to_even() {
        // 0x3F80_8000 is exactly halfway between 0x3F80 and 0x3F81; the
        // even pattern 0x3F80 wins.
        assert_eq!(quantize_roundtrip(f32::from_bits(0x3F80_8000)).to_bits(), 0x3F80_0000);
        // 0x3F81_8000 is halfway between 0x3F81 and 0x3F82; 0x3F82 is even.
        assert_eq!(quantize_roundtrip(f32::from_bits(0x3F81_8000)).to_bits(), 0x3F82_0000);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn truncated_mode_rounds_kernel_outputs() {
        let input = tensor(1, 2, &[1.0, 1.0]);
        let spec = ConvSpec::new(1, 1);
        // 0.3 is not representable in the truncated format.
        let out = conv1d(&input, &spec, &[0.0, 0.3, 0.0], &[0.0], NumericMode::Truncated16).unwrap();
        for &v in out.data() {
            assert_eq!(v.to_bits() & 0xFFFF, 0, "low bits must be clear, got {v:?}");
        }
    }
}
