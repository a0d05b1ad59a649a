//! Cross-checks of the production kernels against independent
//! straight-line references, plus numeric-format properties.

#![allow(clippy::needless_range_loop)]

mod common;

use odtl_core::model::{ExecMode, ModelParams, Topology};
use odtl_core::rng::StreamRng;
use odtl_core::tensor::{conv1d, quantize_roundtrip, softmax, ConvSpec, NumericMode, Tensor};

use common::{close, conv_padded_counting, random_window, reference_infer_forward, slow_rne_narrow};

use proptest::prelude::*;

#[test]
fn forward_matches_straight_line_reference() {
    for seed in 0..10u64 {
        let topo = Topology::new(1 + (seed as usize % 4), 4 + (seed as usize % 9), 2 + (seed as usize % 5));
        let mut model = ModelParams::build(topo, seed).unwrap();
        // Random running stats and biases so batch norm actually works.
        let mut rng = StreamRng::seed(900 + seed);
        for layer in &mut model.backbone {
            for v in &mut layer.bn.running_mean {
                *v = rng.next_symmetric(0.3);
            }
            for v in &mut layer.bn.running_var {
                *v = 0.5 + rng.next_f32();
            }
            for v in &mut layer.conv.bias {
                *v = rng.next_symmetric(0.2);
            }
        }
        let window = random_window(topo.input_channels, topo.input_width, 7000 + seed, 1.0);

        let out = model.forward(&window, ExecMode::Infer).unwrap();
        let (ref_probs, ref_dense) = reference_infer_forward(&model, &window);

        for (a, b) in out.dense_input.iter().zip(&ref_dense) {
            assert!(
                close(f64::from(*a), f64::from(*b), 1e-5, 1e-6),
                "dense input {a} vs {b}"
            );
        }
        for (a, b) in out.probabilities.iter().zip(&ref_probs) {
            assert!(
                close(f64::from(*a), f64::from(*b), 1e-5, 1e-7),
                "probability {a} vs {b}"
            );
        }
    }
}

#[test]
fn truncated_mode_probabilities_stay_close_to_full_precision() {
    // Well-conditioned random models: the 16-bit storage path must stay
    // within 0.05 of the 32-bit probabilities in max norm.
    let mut worst = 0.0f32;
    for seed in 0..12u64 {
        let topo = Topology::new(2 + (seed as usize % 3), 6 + (seed as usize % 7), 3 + (seed as usize % 4));
        let model = ModelParams::build(topo, 100 + seed).unwrap();
        let window = random_window(topo.input_channels, topo.input_width, 8000 + seed, 1.0);

        let full = model.forward(&window, ExecMode::Infer).unwrap();
        let narrowed = model.deployed(NumericMode::Truncated16);
        let t16 = narrowed.forward(&window, ExecMode::Infer).unwrap();

        for (a, b) in full.probabilities.iter().zip(&t16.probabilities) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 0.05, "max probability deviation {worst}");
}

#[test]
fn quantize_matches_slow_rounding_oracle_on_edge_patterns() {
    let cases: Vec<u32> = vec![
        0x0000_0000, // +0
        0x8000_0000, // -0
        0x3F80_0000, // 1.0
        0x3F80_0001, // just above 1.0
        0x3F80_8000, // tie at 1.0 boundary
        0x3F81_8000, // tie rounding up to even
        0xC020_0000, // -2.5
        0x7F7F_FFFF, // f32::MAX
        0x0000_0001, // smallest subnormal
        0x007F_FFFF, // largest subnormal
        0x7F80_0000, // +inf
    ];
    for bits in cases {
        let x = f32::from_bits(bits);
        let fast = quantize_roundtrip(x);
        let slow = slow_rne_narrow(x);
        assert_eq!(fast.to_bits(), slow.to_bits(), "pattern {bits:#010X}");
    }
}

proptest! {
    #[test]
    fn quantize_matches_slow_rounding_oracle(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(!x.is_nan());
        prop_assert_eq!(
            quantize_roundtrip(x).to_bits(),
            slow_rne_narrow(x).to_bits()
        );
    }

    #[test]
    fn quantize_is_idempotent(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(!x.is_nan());
        let once = quantize_roundtrip(x);
        let twice = quantize_roundtrip(once);
        prop_assert_eq!(once.to_bits(), twice.to_bits());
    }

    #[test]
    fn conv_matches_padded_reference(
        in_ch in 1usize..=8,
        out_ch in 1usize..=8,
        width in 1usize..=8,
        seed in 0u64..5000,
    ) {
        let mut rng = StreamRng::seed(seed);
        let input_rows: Vec<Vec<f32>> = (0..in_ch)
            .map(|_| (0..width).map(|_| rng.next_symmetric(2.0)).collect())
            .collect();
        let spec = ConvSpec::new(in_ch, out_ch);
        let weights: Vec<f32> = (0..spec.weight_len()).map(|_| rng.next_symmetric(1.0)).collect();
        let bias: Vec<f32> = (0..out_ch).map(|_| rng.next_symmetric(0.5)).collect();

        let flat: Vec<f32> = input_rows.iter().flatten().copied().collect();
        let input = Tensor::from_vec(in_ch, width, flat).unwrap();
        let out = conv1d(&input, &spec, &weights, &bias, NumericMode::Full32).unwrap();

        let mut macs = 0u64;
        let reference = conv_padded_counting(&input_rows, &weights, &bias, out_ch, &mut macs);
        prop_assert_eq!(out.width(), width);
        for o in 0..out_ch {
            for w in 0..width {
                let (a, b) = (f64::from(out.at(o, w)), f64::from(reference[o][w]));
                prop_assert!(close(a, b, 1e-6, 1e-7), "({o},{w}): {a} vs {b}");
            }
        }
        prop_assert_eq!(macs, (3 * in_ch * out_ch * width) as u64);
    }

    #[test]
    fn softmax_sums_to_one_for_wide_logits(
        len in 1usize..=8,
        seed in 0u64..5000,
    ) {
        let mut rng = StreamRng::seed(seed);
        let logits: Vec<f32> = (0..len).map(|_| rng.next_symmetric(50.0)).collect();
        let probs = softmax(&logits, NumericMode::Full32).unwrap();
        let sum: f32 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(probs.iter().all(|&p| p >= 0.0 && p.is_finite()));
    }

    // Shift invariance is a statement about an exact shift; integer
    // logits and shifts keep `z + c` exactly representable, so the
    // max-subtraction must make the two computations identical.
    #[test]
    fn softmax_is_invariant_under_exact_shifts(
        len in 1usize..=8,
        seed in 0u64..5000,
        shift in -50i32..=50,
    ) {
        let mut rng = StreamRng::seed(seed);
        let logits: Vec<f32> = (0..len)
            .map(|_| (rng.next_below(101) as i32 - 50) as f32)
            .collect();
        let shifted: Vec<f32> = logits.iter().map(|&z| z + shift as f32).collect();
        let probs = softmax(&logits, NumericMode::Full32).unwrap();
        let probs2 = softmax(&shifted, NumericMode::Full32).unwrap();
        for (a, b) in probs.iter().zip(&probs2) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        prop_assert_eq!(
            odtl_core::tensor::argmax(&probs),
            odtl_core::tensor::argmax(&probs2)
        );
    }
}
