//! Dense channel-major tensors, same-padded 2-D convolution with its backward
//! pass, pointwise activations, Adam, and a central-difference gradient helper.
//!
//! Storage is `f32`; every reduction accumulates in `f64` and runs in a fixed
//! order (channel, kernel row, kernel column), so results are bit-reproducible.

use crate::error::{Error, Result};

/// A `C x H x W` tensor stored channel-major, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "tensor data",
                expected: format!("{expected} values ({channels}x{height}x{width})"),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor value at index {i}"),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel-wise concatenation. All parts must share spatial dims.
    pub fn concat(parts: &[Tensor3]) -> Result<Tensor3> {
        let first = parts.first().ok_or(Error::Empty { what: "tensor list" })?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::dims("tensor concatenation", (w, h), (p.width, p.height)));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor3 {
            channels,
            height: h,
            width: w,
            data,
        })
    }
}

/// Convolution weights `O x C x kH x kW` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::invalid(
                "kernel size",
                format!("{kernel_h}x{kernel_w} must be odd in both dimensions"),
            ));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::invalid("kernel channels", "must be positive"));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "kernel weights",
                expected: format!("{expected} values"),
                found: format!("{} values", weights.len()),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch {
                context: "kernel bias",
                expected: format!("{out_channels} values"),
                found: format!("{} values", bias.len()),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "kernel parameters".into(),
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            vec![0.0; out_channels],
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor3,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_channels(input: &Tensor3, kernel: &ConvKernel) -> Result<()> {
    if input.channels != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_channels,
            found: input.channels,
        });
    }
    Ok(())
}

/// Unfold zero-padded patches into a `(C*kH*kW) x (H*W)` matrix, as `f64`.
fn im2col(input: &Tensor3, kh: usize, kw: usize) -> Vec<f64> {
    let (c_n, h, w) = input.dims();
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0f64; c_n * kh * kw * hw];
    for c in 0..c_n {
        let plane = input.plane(c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = pw.saturating_sub(kx);
                    let x1 = (w + pw).saturating_sub(kx).min(w);
                    for x in x0..x1 {
                        dst[y * w + x] = src[x + kx - pw] as f64;
                    }
                }
            }
        }
    }
    cols
}

/// Accumulate `c[m x n] += a[m x k] * b[k x n]`.
///
/// Each output element sums its products in ascending `k`, starting from the
/// value already in `c`, so the result does not depend on the tiling or on
/// which instruction set runs the kernel.
fn gemm(m: usize, n: usize, k: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    debug_assert!(a.fits(m, k) && b.fits(k, n));
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(m, n, k, a, b, c) };
            return;
        }
    }
    gemm_blocked(m, n, k, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(m: usize, n: usize, k: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    gemm_blocked(m, n, k, a, b, c);
}

/// Read-only strided matrix view; element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;

#[inline(always)]
fn gemm_blocked(m: usize, n: usize, k: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    let m_panels = m.div_ceil(MR);
    let n_panels = n.div_ceil(NR);
    let mut a_pack = vec![0.0f64; m_panels * MR * KC.min(k)];
    let mut b_pack = vec![0.0f64; NR * KC.min(k)];

    for p0 in (0..k).step_by(KC) {
        let kc = KC.min(k - p0);
        // A panels, zero padded past row m: a_pack[ib][p * MR + r]
        for ib in 0..m_panels {
            let panel = &mut a_pack[ib * MR * kc..(ib + 1) * MR * kc];
            for r in 0..MR {
                let i = ib * MR + r;
                if i < m {
                    for p in 0..kc {
                        panel[p * MR + r] = a.at(i, p0 + p);
                    }
                } else {
                    for p in 0..kc {
                        panel[p * MR + r] = 0.0;
                    }
                }
            }
        }
        for jb in 0..n_panels {
            let j = jb * NR;
            let nr = NR.min(n - j);
            let bp = &mut b_pack[..kc * NR];
            for p in 0..kc {
                let dst = &mut bp[p * NR..(p + 1) * NR];
                for (s, d) in dst[..nr].iter_mut().enumerate() {
                    *d = b.at(p0 + p, j + s);
                }
                dst[nr..].fill(0.0);
            }
            for ib in 0..m_panels {
                let i = ib * MR;
                let mr = MR.min(m - i);
                let mut acc = [[0.0f64; NR]; MR];
                for r in 0..mr {
                    acc[r][..nr].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + nr]);
                }
                micro_kernel(&a_pack[ib * MR * kc..(ib + 1) * MR * kc], bp, &mut acc);
                for r in 0..mr {
                    c[(i + r) * n + j..(i + r) * n + j + nr].copy_from_slice(&acc[r][..nr]);
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(a_panel: &[f64], b_panel: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in a_panel.chunks_exact(MR).zip(b_panel.chunks_exact(NR)) {
        let av: &[f64; MR] = av.try_into().expect("panel width");
        let bv: &[f64; NR] = bv.try_into().expect("panel width");
        for r in 0..MR {
            for s in 0..NR {
                acc[r][s] += av[r] * bv[s];
            }
        }
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Same-padded (zero fill) stride-1 convolution. Output is `O x H x W`.
pub fn conv2d_forward(input: &Tensor3, kernel: &ConvKernel) -> Result<Tensor3> {
    check_channels(input, kernel)?;
    let (_, h, w) = input.dims();
    let hw = h * w;
    let o_n = kernel.out_channels;
    let mut acc = vec![0.0f64; o_n * hw];
    for (o, row) in acc.chunks_exact_mut(hw.max(1)).enumerate().take(o_n) {
        row.fill(kernel.bias[o] as f64);
    }
    if hw > 0 {
        let cols = im2col(input, kernel.kernel_h, kernel.kernel_w);
        let k = kernel.patch_len();
        gemm(o_n, hw, k, Mat::rows(&widen(&kernel.weights), k), Mat::rows(&cols, hw), &mut acc);
    }
    Ok(Tensor3 {
        channels: o_n,
        height: h,
        width: w,
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Gradients of a scalar loss through [`conv2d_forward`], given the upstream
/// gradient `grad_out` with respect to its output.
pub fn conv2d_backward(input: &Tensor3, kernel: &ConvKernel, grad_out: &Tensor3) -> Result<ConvGrads> {
    check_channels(input, kernel)?;
    let (c_n, h, w) = input.dims();
    if grad_out.dims() != (kernel.out_channels, h, w) {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward upstream gradient",
            expected: format!("{}x{}x{}", kernel.out_channels, h, w),
            found: format!("{}x{}x{}", grad_out.channels, grad_out.height, grad_out.width),
        });
    }
    let hw = h * w;
    let o_n = kernel.out_channels;
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let k = kernel.patch_len();

    let g = widen(&grad_out.data);
    let mut grad_bias = vec![0.0f64; o_n];
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb = g[o * hw..(o + 1) * hw].iter().sum();
    }

    let cols = im2col(input, kh, kw);
    // dW[o x k] = G[o x hw] * cols^T[hw x k]

    let mut grad_w = vec![0.0f64; o_n * k];
    gemm(o_n, k, hw, Mat::rows(&g, hw), Mat::transposed(&cols, hw), &mut grad_w);

    // dcols[k x hw] = W^T[k x o] * G[o x hw]
    let w_wide = widen(&kernel.weights);
    let mut dcols = vec![0.0f64; k * hw];
    gemm(k, hw, o_n, Mat::transposed(&w_wide, k), Mat::rows(&g, hw), &mut dcols);

    // fold back, ascending (channel, ky, kx) per input pixel
    let (ph, pw) = (kh / 2, kw / 2);
    let mut grad_in = vec![0.0f64; c_n * hw];
    for c in 0..c_n {
        let dst = &mut grad_in[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &dcols[((c * kh + ky) * kw + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = pw.saturating_sub(kx);
                    let x1 = (w + pw).saturating_sub(kx).min(w);
                    let base = sy as usize * w;
                    for x in x0..x1 {
                        dst[base + x + kx - pw] += row[y * w + x];
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: Tensor3 {
            channels: c_n,
            height: h,
            width: w,
            data: grad_in.into_iter().map(|v| v as f32).collect(),
        },
        weights: grad_w,
        bias: grad_bias,
    })
}

/// `max(x, 0)` and its derivative indicator `x > 0`.
pub fn relu_scalar(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Logistic sigmoid and its local derivative `s * (1 - s)`.
pub fn sigmoid_scalar(x: f64) -> (f64, f64) {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (s, s * (1.0 - s))
}

fn map_pair(x: &Tensor3, f: impl Fn(f64) -> (f64, f64)) -> (Tensor3, Tensor3) {
    let mut y = x.clone();
    let mut d = x.clone();
    for ((yv, dv), &xv) in y.data.iter_mut().zip(d.data.iter_mut()).zip(&x.data) {
        let (a, b) = f(xv as f64);
        *yv = a as f32;
        *dv = b as f32;
    }
    (y, d)
}

/// Elementwise ReLU; returns the activation and the gradient mask.
pub fn relu_forward_backward(x: &Tensor3) -> (Tensor3, Tensor3) {
    map_pair(x, relu_scalar)
}

/// Elementwise sigmoid; returns the activation and its local derivative.
pub fn sigmoid_forward_backward(x: &Tensor3) -> (Tensor3, Tensor3) {
    map_pair(x, sigmoid_scalar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
///
/// Gradients are checked before anything is mutated, so a failed step leaves
/// both the parameters and the state untouched.
pub fn adam_step(params: &mut [f32], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            expected: format!("{} parameters", state.m.len()),
            found: format!("{} parameters, {} gradients", params.len(), grads.len()),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let step = lr * m_hat / (v_hat.sqrt() + epsilon);
        *p = (*p as f64 - step) as f32;
    }
    Ok(())
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("step", format!("{h} must be positive and finite")));
    }
    let mut p = params.to_vec();
    let mut grads = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("objective at coordinate {i}"),
            });
        }
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}
