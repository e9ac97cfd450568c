mod common;

use common::{conv2d_loops, conv_transpose2d_loops, op_cases, rng, uniform};
use proptest::prelude::*;
use v2l_core::numerics::{kernels, Adam, AdamConfig, ConvParams, Graph, LrSchedule, Tensor, WarmupCosine};

#[test]
fn identity_1x1_kernel_is_identity() {
    let mut r = rng(1);
    let x = uniform(&[2, 3, 5, 4], &mut r);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let y = kernels::conv2d(&x, &w, None, ConvParams::new(1, 0)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn zero_linear_gives_zero() {
    let mut r = rng(2);
    let x = uniform(&[4, 6], &mut r);
    let y = kernels::linear(&x, &Tensor::zeros(&[3, 6]), Some(&Tensor::zeros(&[3]))).unwrap();
    assert_eq!(y.shape(), &[4, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_4x4_matches_loop_nest() {
    let mut r = rng(3);
    let x = uniform(&[1, 1, 4, 4], &mut r);
    let w = uniform(&[1, 1, 3, 3], &mut r);
    let y = kernels::conv2d(&x, &w, None, ConvParams::new(1, 1)).unwrap();
    let want = conv2d_loops(&x, &w, None, 1, 1);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_eq!(y.data(), want.data());
}

#[test]
fn conv_shape_errors_are_diagnosed() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 4, 3, 3]);
    let msg = kernels::conv2d(&x, &w, None, ConvParams::new(1, 1))
        .unwrap_err()
        .to_string();
    assert!(
        msg.contains("conv2d") && msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"),
        "{msg}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_bitwise_equals_loop_nest(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 1usize..9, w in 1usize..9, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..3, bias in any::<bool>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = uniform(&[n, c, h, w], &mut r);
        let wt = uniform(&[o, c, k, k], &mut r);
        let b = uniform(&[o], &mut r);
        let b = bias.then_some(&b);
        let fast = kernels::conv2d(&x, &wt, b, ConvParams::new(stride, pad)).unwrap();
        let slow = conv2d_loops(&x, &wt, b, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.data().iter().zip(slow.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn conv_transpose2d_bitwise_equals_loop_nest(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 1usize..6, w in 1usize..6, k in 1usize..5,
        stride in 1usize..3, pad in 0usize..2, bias in any::<bool>(),
    ) {
        prop_assume!((h - 1) * stride + k > 2 * pad && (w - 1) * stride + k > 2 * pad);
        let mut r = rng(seed);
        let x = uniform(&[n, c, h, w], &mut r);
        let wt = uniform(&[c, o, k, k], &mut r);
        let b = uniform(&[o], &mut r);
        let b = bias.then_some(&b);
        let fast = kernels::conv_transpose2d(&x, &wt, b, ConvParams::new(stride, pad)).unwrap();
        let slow = conv_transpose2d_loops(&x, &wt, b, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.data().iter().zip(slow.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, case) in op_cases() {
        for seed in 0..3 {
            let err = case(seed);
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(77);
        let mut g = Graph::new();
        let x = g.param(uniform(&[1, 2, 6, 6], &mut r));
        let w = g.param(uniform(&[3, 2, 3, 3], &mut r));
        let h = g.conv2d(x, w, None, ConvParams::new(1, 1)).unwrap();
        let h = g.silu(h).unwrap();
        let t = g.constant(uniform(&[1, 3, 6, 6], &mut r));
        let loss = g.mse(h, t).unwrap();
        let grads = g.backward(loss).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

#[test]
fn adam_converges_on_quadratic() {
    // scalar reference: f(w) = (w - 3)^2, constant lr 0.1, 100 steps from 0
    let mut w = Tensor::scalar(0.0);
    let mut adam = Adam::new(AdamConfig::default(), LrSchedule::Constant { lr: 0.1 }, [&w]);
    for _ in 0..100 {
        let g = Tensor::scalar(2.0 * (w.item() - 3.0));
        adam.step(&["w"], &mut [&mut w], &[&g]).unwrap();
    }
    assert!((w.item() - 3.0).abs() < 0.05, "w = {}", w.item());
}

#[test]
fn lr_is_continuous_across_warmup() {
    let s = WarmupCosine {
        base_lr: 5e-4,
        warmup_steps: 500,
        total_steps: 10_000,
    };
    // the ramp's limit at the boundary is base_lr; the cosine branch starts there
    let ramp_limit = s.base_lr * 500.0 / 500.0;
    assert_eq!(s.lr_at(500).unwrap(), ramp_limit);
    let jump_left = ramp_limit - s.lr_at(499).unwrap();
    let jump_right = ramp_limit - s.lr_at(501).unwrap();
    assert!(jump_left <= s.base_lr / 500.0 + 1e-18);
    assert!(jump_right < 1e-10);
}
