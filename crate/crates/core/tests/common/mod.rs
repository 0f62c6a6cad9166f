//! Test-only oracles and fixtures. Everything here is written independently of
//! the library kernels: naive loops, `f64` throughout.

#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segens::ensemble::StackingSample;
use segens::imageio::{BinaryMask, ProbMap};
use segens::ndtensor::{ConvKernel, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(r: &mut impl Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |_, _| r.gen_bool(density))
}

pub fn random_probmap(r: &mut impl Rng, w: usize, h: usize) -> ProbMap {
    ProbMap::new(w, h, (0..w * h).map(|_| r.gen::<f64>()).collect()).unwrap()
}

/// Probabilities quantized to multiples of 1/255, as decoded from 8-bit files.
pub fn random_probmap_8bit(r: &mut impl Rng, w: usize, h: usize) -> ProbMap {
    ProbMap::new(w, h, (0..w * h).map(|_| r.gen_range(0..=255u8) as f64 / 255.0).collect()).unwrap()
}

pub fn random_tensor(r: &mut impl Rng, c: usize, h: usize, w: usize, scale: f32) -> Tensor3 {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_kernel(r: &mut impl Rng, o: usize, c: usize, k: usize, scale: f32) -> ConvKernel {
    let w = (0..o * c * k * k).map(|_| r.gen_range(-scale..scale)).collect();
    let b = (0..o).map(|_| r.gen_range(-scale..scale)).collect();
    ConvKernel::new(o, c, k, k, w, b).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Same-padded stride-1 convolution by direct summation.
/// `w` is `o x c x kh x kw`, `x` is `c x h x wd`, both row-major.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(x: &[f64], c: usize, h: usize, wd: usize, w: &[f64], b: &[f64], o: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; o * h * wd];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize + ky as isize - ph;
                            let sx = xx as isize + kx as isize - pw;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            s += w[((oc * c + ic) * kh + ky) * kw + kx] * x[(ic * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(oc * h + y) * wd + xx] = s;
            }
        }
    }
    out
}

/// Layer shapes `(in, out, k)` of the stacking network for `c` input channels.
pub fn metalearner_shapes(c: usize) -> [(usize, usize, usize); 5] {
    [(c, 256, 3), (256, 128, 3), (128, 64, 3), (64, 32, 3), (32, 1, 1)]
}

/// Forward pass of the stacking network from a flat parameter vector
/// (per layer: weights, then bias). ReLU after the first four layers,
/// logistic after the last.
pub fn metalearner_ref(params: &[f64], x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut act = x.to_vec();
    let mut off = 0;
    let shapes = metalearner_shapes(c);
    for (li, &(cin, cout, k)) in shapes.iter().enumerate() {
        let nw = cout * cin * k * k;
        let weights = &params[off..off + nw];
        let bias = &params[off + nw..off + nw + cout];
        off += nw + cout;
        let mut z = conv_ref(&act, cin, h, w, weights, bias, cout, k, k);
        if li < 4 {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        }
        act = z;
    }
    assert_eq!(off, params.len());
    act
}

/// `(1 - TI)^gamma` with `TI = (TP + s) / (TP + s + lambda FN + (1 - lambda) FP)`.
pub fn focal_tversky_ref(gt: &[f64], pred: &[f64], lambda: f64, gamma: f64, smooth: f64) -> f64 {
    let tp: f64 = gt.iter().zip(pred).map(|(g, p)| g * p).sum();
    let fp: f64 = gt.iter().zip(pred).map(|(g, p)| (1.0 - g) * p).sum();
    let fn_: f64 = gt.iter().zip(pred).map(|(g, p)| g * (1.0 - p)).sum();
    let ti = (tp + smooth) / (tp + smooth + lambda * fn_ + (1.0 - lambda) * fp);
    (1.0 - ti).max(0.0).powf(gamma)
}

/// Eight 32x32 samples with three channels: the ground-truth mask itself, a
/// noisy copy of it, and uniform noise. Targets are random ellipses.
pub fn overfit_fixture(seed: u64) -> Vec<StackingSample> {
    let mut r = rng(seed);
    (0..8)
        .map(|_| {
            let cx = r.gen_range(8.0..24.0);
            let cy = r.gen_range(8.0..24.0);
            let rx = r.gen_range(3.0..9.0);
            let ry = r.gen_range(3.0..9.0);
            let target = BinaryMask::from_fn(32, 32, |x, y| {
                ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0
            });
            let mut data: Vec<f32> = target.data().iter().map(|&v| v as f32).collect();
            data.extend(target.data().iter().map(|&v| 0.6 * v as f32 + 0.4 * r.gen::<f32>()));
            data.extend((0..1024).map(|_| r.gen::<f32>()));
            StackingSample {
                input: Tensor3::from_vec(3, 32, 32, data).unwrap(),
                target,
            }
        })
        .collect()
}

/// Flat 3x3 neighbourhood max (dilation) and min (erosion) by enumeration;
/// pixels outside the image are background.
pub fn flat3_ref(mask: &BinaryMask) -> (Vec<u8>, Vec<u8>) {
    let (w, h) = mask.dims();
    let at = |x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            mask.get(x as usize, y as usize) as u8
        }
    };
    let mut dil = vec![0u8; w * h];
    let mut ero = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hi = 0;
            let mut lo = 1;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    hi = hi.max(at(x + dx, y + dy));
                    lo = lo.min(at(x + dx, y + dy));
                }
            }
            dil[y as usize * w + x as usize] = hi;
            ero[y as usize * w + x as usize] = lo;
        }
    }
    (dil, ero)
}

/// Boundary-softened labels from the enumerated 3x3 rings.
pub fn soft_labels_ref(mask: &BinaryMask, zeta: f64, omega: f64) -> Vec<f64> {
    let (dil, ero) = flat3_ref(mask);
    mask.data()
        .iter()
        .zip(dil.iter().zip(&ero))
        .map(|(&v, (&d, &e))| match (v, d, e) {
            (1, _, 1) => 1.0,
            (1, _, _) => zeta,
            (_, 1, _) => omega,
            _ => 0.0,
        })
        .collect()
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, p: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = p[i];
    p[i] = orig + h;
    let up = f(p);
    p[i] = orig - h;
    let down = f(p);
    p[i] = orig;
    (up - down) / (2.0 * h)
}

/// Five-point central stencil along coordinate `i`; fourth-order accurate,
/// so a wide step keeps cancellation small for smooth `f`.
pub fn five_point_diff(f: &mut impl FnMut(&[f64]) -> f64, p: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = p[i];
    let mut at = |d: f64, p: &mut [f64]| {
        p[i] = orig + d;
        f(p)
    };
    let v = [at(-2.0 * h, p), at(-h, p), at(h, p), at(2.0 * h, p)];
    p[i] = orig;
    (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h)
}
