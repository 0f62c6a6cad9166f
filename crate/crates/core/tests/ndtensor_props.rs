mod common;

use common::*;
use proptest::prelude::*;
use segens::ndtensor::{adam_step, conv2d_forward, finite_diff_grad, AdamConfig, AdamState, ConvKernel, Tensor3};
use segens::Error;

fn conv_case() -> impl Strategy<Value = (u64, usize, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3, 5]), 1usize..9, 1usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_direct_summation((seed, c, o, k, h, w) in conv_case()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, c, h, w, 1.0);
        let kern = random_kernel(&mut r, o, c, k, 1.0);
        let got = conv2d_forward(&x, &kern).unwrap();
        prop_assert_eq!(got.dims(), (o, h, w));
        let f64s = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let want = conv_ref(&f64s(x.data()), c, h, w, &f64s(kern.weights()), &f64s(kern.bias()), o, k, k);
        for (g, e) in got.data().iter().zip(&want) {
            prop_assert!(rel_err(*g as f64, *e, 1e-3) < 1e-5, "{} vs {}", g, e);
        }
    }

    #[test]
    fn identity_kernel_is_identity((seed, c, _o, k, h, w) in conv_case()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, c, h, w, 10.0);
        let mut weights = vec![0.0f32; c * c * k * k];
        for ch in 0..c {
            weights[((ch * c + ch) * k + k / 2) * k + k / 2] = 1.0;
        }
        let kern = ConvKernel::new(c, c, k, k, weights, vec![0.0; c]).unwrap();
        prop_assert_eq!(conv2d_forward(&x, &kern).unwrap(), x);
    }

    #[test]
    fn forward_is_linear((seed, c, o, k, h, w) in conv_case(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, c, h, w, 1.0);
        let y = random_tensor(&mut r, c, h, w, 1.0);
        let mut kern = random_kernel(&mut r, o, c, k, 1.0);
        kern.bias_mut().iter_mut().for_each(|v| *v = 0.0);
        let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv2d_forward(&Tensor3::from_vec(c, h, w, mix).unwrap(), &kern).unwrap();
        let (cx, cy) = (conv2d_forward(&x, &kern).unwrap(), conv2d_forward(&y, &kern).unwrap());
        let scale = cx.data().iter().chain(cy.data()).fold(1e-3f64, |m, v| m.max(v.abs() as f64));
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            let rhs = a as f64 * *p as f64 + b as f64 * *q as f64;
            prop_assert!((*l as f64 - rhs).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn forward_is_bit_deterministic((seed, c, o, k, h, w) in conv_case()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, c, h, w, 1.0);
        let kern = random_kernel(&mut r, o, c, k, 1.0);
        let a = conv2d_forward(&x, &kern).unwrap();
        let b = conv2d_forward(&x, &kern).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters(seed in any::<u64>(), steps in 1usize..40, lr in 1e-5f64..1.0) {
        let mut r = rng(seed);
        let start: Vec<f32> = random_tensor(&mut r, 1, 1, 17, 3.0).into_vec();
        let mut params = start.clone();
        let mut state = AdamState::new(params.len(), AdamConfig { lr, ..AdamConfig::default() });
        for t in 1..=steps {
            adam_step(&mut params, &vec![0.0; start.len()], &mut state).unwrap();
            prop_assert_eq!(state.step_count(), t as u64);
        }
        prop_assert_eq!(params, start);
    }

    #[test]
    fn adam_moments_keep_shape_and_sign(seed in any::<u64>(), steps in 1usize..20) {
        let mut r = rng(seed);
        let mut params = random_tensor(&mut r, 1, 1, 9, 1.0).into_vec();
        let mut state = AdamState::new(params.len(), AdamConfig::default());
        for _ in 0..steps {
            let g: Vec<f64> = random_tensor(&mut r, 1, 1, 9, 5.0).data().iter().map(|&v| v as f64).collect();
            adam_step(&mut params, &g, &mut state).unwrap();
            prop_assert_eq!(state.first_moment().len(), params.len());
            prop_assert!(state.second_moment().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn adam_moves_against_the_gradient() {
    let mut params = vec![1.0f32, -1.0];
    let mut state = AdamState::new(2, AdamConfig { lr: 0.1, ..AdamConfig::default() });
    adam_step(&mut params, &[2.0, -3.0], &mut state).unwrap();
    // the first bias-corrected step has magnitude lr in every coordinate
    assert!((params[0] - 0.9).abs() < 1e-6 && (params[1] + 0.9).abs() < 1e-6, "{params:?}");
}

#[test]
fn adam_rejects_mismatched_or_nonfinite_gradients() {
    let mut params = vec![0.0f32; 3];
    let mut state = AdamState::new(3, AdamConfig::default());
    assert!(adam_step(&mut params, &[0.0; 2], &mut state).is_err());
    assert!(matches!(adam_step(&mut params, &[0.0, f64::NAN, 0.0], &mut state), Err(Error::NonFiniteGradient { .. })));
}

#[test]
fn channel_mismatch_names_both_counts() {
    let x = Tensor3::zeros(2, 4, 4);
    let kern = ConvKernel::zeros(1, 3, 3, 3).unwrap();
    match conv2d_forward(&x, &kern) {
        Err(Error::ChannelMismatch { expected, found }) => assert_eq!((expected, found), (3, 2)),
        other => panic!("expected channel mismatch, got {other:?}"),
    }
}

#[test]
fn even_kernels_are_rejected() {
    assert!(ConvKernel::zeros(1, 1, 2, 3).is_err());
    assert!(ConvKernel::new(1, 1, 3, 3, vec![0.0; 8], vec![0.0]).is_err());
}

#[test]
fn nonfinite_tensor_values_are_rejected() {
    assert!(Tensor3::from_vec(1, 1, 2, vec![0.0, f32::INFINITY]).is_err());
    assert!(Tensor3::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
}

#[test]
fn finite_difference_helper_on_a_cubic() {
    let g = finite_diff_grad(|p| p[0].powi(3) + 2.0 * p[0] * p[1], &[1.5, -0.5], 1e-5).unwrap();
    assert!((g[0] - (3.0 * 2.25 - 1.0)).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8, "{g:?}");
}
