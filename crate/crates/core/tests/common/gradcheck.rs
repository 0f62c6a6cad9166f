//! Finite-difference gradient checks. Each returns the worst relative error
//! over its randomized instances together with the instance count.

use rand::Rng;
use segens::ensemble::MetaLearner;
use segens::losses::{focal_tversky_slices, ft_bu_loss, TverskyConfig};
use segens::morpho::BoundaryUncertaintyConfig;
use segens::ndtensor::{conv2d_backward, relu_forward_backward, sigmoid_forward_backward, sigmoid_scalar, Tensor3};

use super::*;

pub struct Outcome {
    pub worst: f64,
    pub instances: usize,
}

/// Gradients of `sum(G * conv(x))` with respect to weights, bias and input.
pub fn conv(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = r.gen_range(1..4);
        let o = r.gen_range(1..4);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
        let x = random_tensor(&mut r, c, h, w, 1.0);
        let kern = random_kernel(&mut r, o, c, k, 1.0);
        let g = random_tensor(&mut r, o, h, w, 1.0);
        let grads = conv2d_backward(&x, &kern, &g).unwrap();
        let g64: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let w64: Vec<f64> = kern.weights().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = kern.bias().iter().map(|&v| v as f64).collect();
        let dot = |y: Vec<f64>| y.iter().zip(&g64).map(|(a, b)| a * b).sum::<f64>();
        let step = 1e-4;

        let mut p = w64.clone();
        let mut f = |p: &[f64]| dot(conv_ref(&x64, c, h, w, p, &b64, o, k, k));
        for i in 0..p.len() {
            worst = worst.max(rel_err(grads.weights[i], central_diff(&mut f, &mut p, i, step), 1e-8));
        }
        let mut p = b64.clone();
        let mut f = |p: &[f64]| dot(conv_ref(&x64, c, h, w, &w64, p, o, k, k));
        for i in 0..p.len() {
            worst = worst.max(rel_err(grads.bias[i], central_diff(&mut f, &mut p, i, step), 1e-8));
        }
        let mut p = x64.clone();
        let mut f = |p: &[f64]| dot(conv_ref(p, c, h, w, &w64, &b64, o, k, k));
        for i in 0..p.len() {
            let a = grads.input.data()[i] as f64;
            worst = worst.max(rel_err(a, central_diff(&mut f, &mut p, i, step), 1e-6));
        }
    }
    Outcome { worst, instances }
}

/// ReLU and sigmoid local derivatives against differences of the activations.
pub fn activations(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.gen_range(1..32);
        let vals: Vec<f32> = (0..n)
            .map(|_| {
                let v: f32 = r.gen_range(-6.0..6.0);
                // keep clear of the ReLU kink
                if v.abs() < 1e-2 { 0.5 } else { v }
            })
            .collect();
        let x = Tensor3::from_vec(1, 1, n, vals.clone()).unwrap();
        let (_, d_relu) = relu_forward_backward(&x);
        let (_, d_sig) = sigmoid_forward_backward(&x);
        for (i, &v) in vals.iter().enumerate() {
            let v = v as f64;
            let h = 1e-5;
            let relu_fd = ((v + h).max(0.0) - (v - h).max(0.0)) / (2.0 * h);
            let sig = |t: f64| sigmoid_scalar(t).0;
            let sig_fd = (sig(v + h) - sig(v - h)) / (2.0 * h);
            worst = worst.max(rel_err(d_relu.data()[i] as f64, relu_fd, 1e-8));
            worst = worst.max(rel_err(d_sig.data()[i] as f64, sig_fd, 1e-8));
            worst = worst.max(rel_err(sigmoid_scalar(v).1, sig_fd, 1e-8));
        }
    }
    Outcome { worst, instances }
}

fn random_tversky(r: &mut impl Rng) -> TverskyConfig {
    TverskyConfig {
        lambda: r.gen_range(0.1..0.9),
        gamma: r.gen_range(0.5..2.0),
        smooth: 1e-6,
    }
}

/// Focal Tversky gradient with respect to the predictions.
pub fn focal_tversky(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let n = r.gen_range(4..64);
        let gt: Vec<f64> = if inst % 2 == 0 {
            (0..n).map(|_| r.gen_bool(0.4) as u8 as f64).collect()
        } else {
            (0..n).map(|_| r.gen::<f64>()).collect()
        };
        let mut pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let cfg = random_tversky(&mut r);
        let lg = focal_tversky_slices(&gt, &pred, &cfg).unwrap();
        let floor = 1e-6 * lg.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut f = |p: &[f64]| focal_tversky_ref(&gt, p, cfg.lambda, cfg.gamma, cfg.smooth);
        for i in 0..n {
            let fd = five_point_diff(&mut f, &mut pred, i, 1e-3);
            worst = worst.max(rel_err(lg.grad[i], fd, floor));
        }
    }
    Outcome { worst, instances }
}

/// Focal Tversky against boundary-softened masks.
pub fn focal_tversky_bu(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (w, h) = (r.gen_range(3..10), r.gen_range(3..10));
        let mask = random_mask(&mut r, w, h, 0.4);
        let zeta = r.gen_range(0.5..1.0);
        let omega = r.gen_range(0.0..0.5);
        let bu = BoundaryUncertaintyConfig::new(zeta, omega, 1).unwrap();
        let cfg = random_tversky(&mut r);
        let mut pred: Vec<f64> = (0..w * h).map(|_| r.gen_range(0.01..0.99)).collect();
        let pm = segens::imageio::ProbMap::new(w, h, pred.clone()).unwrap();
        let lg = ft_bu_loss(&mask, &pm, &cfg, &bu).unwrap();
        let soft = soft_labels_ref(&mask, zeta, omega);
        let floor = 1e-6 * lg.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut f = |p: &[f64]| focal_tversky_ref(&soft, p, cfg.lambda, cfg.gamma, cfg.smooth);
        for i in 0..w * h {
            let fd = five_point_diff(&mut f, &mut pred, i, 1e-3);
            worst = worst.max(rel_err(lg.grad[i], fd, floor));
        }
    }
    Outcome { worst, instances }
}

/// Whole-network gradient through the boundary-softened focal Tversky loss,
/// at `coords` random parameter coordinates. Errors are relative to
/// `max(|analytic|, |numeric|, 1e-2 * rms(gradient))`, since activations are
/// stored in single precision.
pub fn metalearner(coords: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (c, h, w) = (2, 6, 6);
    let net = MetaLearner::build(c, seed).unwrap();
    let x = random_tensor(&mut r, c, h, w, 1.0);
    let mask = segens::imageio::BinaryMask::from_fn(w, h, |x, y| (1..4).contains(&x) && (2..5).contains(&y));
    let soft = soft_labels_ref(&mask, 0.9, 0.1);
    let cfg = TverskyConfig::default();
    let (_, grad) = net.loss_and_grad(&x, &soft, &cfg).unwrap();
    let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len() as f64).sqrt();

    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut params: Vec<f64> = net.params().iter().map(|&v| v as f64).collect();
    let mut f = |p: &[f64]| {
        let probs = metalearner_ref(p, &x64, c, h, w);
        focal_tversky_ref(&soft, &probs, cfg.lambda, cfg.gamma, cfg.smooth)
    };
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = r.gen_range(0..params.len());
        let fd = central_diff(&mut f, &mut params, i, 1e-6);
        worst = worst.max(rel_err(grad[i], fd, 1e-2 * rms));
    }
    Outcome { worst, instances: coords }
}
