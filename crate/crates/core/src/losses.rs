//! Overlap losses on soft counts, Focal Tversky with boundary uncertainty, and
//! the MS-SSIM + MAE mixed loss.
//!
//! Convention: `gt` is the (possibly soft) ground truth `p`, `pred` is the
//! predicted probability `p'`. Soft counts are
//! `TP = sum p p'`, `FP = sum (1 - p) p'`, `FN = sum p (1 - p')`.
//! The stabilizer `smooth` enters as a pseudo-count on `TP`, which keeps
//! `dice = 2 iou / (1 + iou)` and `tversky(0.5) = dice` exact.

use crate::error::{Error, Result};
use crate::imageio::{BinaryMask, ProbMap};
use crate::morpho::{boundary_soft_labels, BoundaryUncertaintyConfig, SoftLabelMask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TverskyConfig {
    /// Weight on false negatives; `1 - lambda` weighs false positives.
    pub lambda: f64,
    pub gamma: f64,
    pub smooth: f64,
}

impl Default for TverskyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            gamma: 0.75,
            smooth: 1e-6,
        }
    }
}

impl TverskyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", format!("{} is outside [0, 1]", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", format!("{} must be positive", self.gamma)));
        }
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return Err(Error::invalid("smooth", format!("{} must be positive", self.smooth)));
        }
        Ok(())
    }
}

/// Soft true-positive, false-positive and false-negative sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

pub fn soft_counts(gt: &[f64], pred: &[f64]) -> Result<SoftCounts> {
    if gt.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            context: "soft counts",
            expected: format!("{} pixels", gt.len()),
            found: format!("{} pixels", pred.len()),
        });
    }
    let mut c = SoftCounts {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for (&p, &q) in gt.iter().zip(pred) {
        c.tp += p * q;
        c.fp += (1.0 - p) * q;
        c.fn_ += p * (1.0 - q);
    }
    Ok(c)
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::dims("loss inputs", a, b));
    }
    Ok(())
}

/// Ground truth accepted by the overlap losses.
pub trait Target {
    fn dims(&self) -> (usize, usize);
    fn values(&self) -> std::borrow::Cow<'_, [f64]>;
}

impl Target for SoftLabelMask {
    fn dims(&self) -> (usize, usize) {
        SoftLabelMask::dims(self)
    }

    fn values(&self) -> std::borrow::Cow<'_, [f64]> {
        self.data().into()
    }
}

impl Target for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        BinaryMask::dims(self)
    }

    fn values(&self) -> std::borrow::Cow<'_, [f64]> {
        self.data().iter().map(|&v| v as f64).collect::<Vec<_>>().into()
    }
}

fn counts_for<T: Target>(gt: &T, pred: &ProbMap) -> Result<SoftCounts> {
    check_dims(gt.dims(), pred.dims())?;
    soft_counts(&gt.values(), pred.data())
}

pub fn iou_from_counts(c: SoftCounts, smooth: f64) -> f64 {
    let t = c.tp + smooth;
    t / (t + c.fp + c.fn_)
}

pub fn dice_from_counts(c: SoftCounts, smooth: f64) -> f64 {
    let t = c.tp + smooth;
    2.0 * t / (2.0 * t + c.fp + c.fn_)
}

pub fn tversky_from_counts(c: SoftCounts, lambda: f64, smooth: f64) -> f64 {
    let t = c.tp + smooth;
    t / (t + lambda * c.fn_ + (1.0 - lambda) * c.fp)
}

pub fn iou_soft<T: Target>(gt: &T, pred: &ProbMap, smooth: f64) -> Result<f64> {
    Ok(iou_from_counts(counts_for(gt, pred)?, smooth))
}

pub fn iou_loss<T: Target>(gt: &T, pred: &ProbMap, smooth: f64) -> Result<f64> {
    Ok(1.0 - iou_soft(gt, pred, smooth)?)
}

pub fn dice_soft<T: Target>(gt: &T, pred: &ProbMap, smooth: f64) -> Result<f64> {
    Ok(dice_from_counts(counts_for(gt, pred)?, smooth))
}

pub fn dice_loss<T: Target>(gt: &T, pred: &ProbMap, smooth: f64) -> Result<f64> {
    Ok(1.0 - dice_soft(gt, pred, smooth)?)
}

pub fn tversky_index<T: Target>(gt: &T, pred: &ProbMap, lambda: f64, smooth: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} is outside [0, 1]")));
    }
    Ok(tversky_from_counts(counts_for(gt, pred)?, lambda, smooth))
}

/// Loss value and its gradient with respect to every predicted pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `(1 - TI)^gamma` and its gradient, on raw slices.
///
/// With `t = TP + smooth` and `D = t + lambda FN + (1 - lambda) FP`, each
/// pixel contributes `dD/dp'_i = 1 - lambda`, so
/// `dTI/dp'_i = (p_i D - t (1 - lambda)) / D^2`. At `TI = 1` the loss is at its
/// minimum and the gradient is reported as zero.
pub fn focal_tversky_slices(gt: &[f64], pred: &[f64], cfg: &TverskyConfig) -> Result<LossGrad> {
    cfg.validate()?;
    let c = soft_counts(gt, pred)?;
    let t = c.tp + cfg.smooth;
    let d = t + cfg.lambda * c.fn_ + (1.0 - cfg.lambda) * c.fp;
    let ti = t / d;
    let base = 1.0 - ti;
    if base <= 0.0 {
        return Ok(LossGrad {
            loss: 0.0,
            grad: vec![0.0; pred.len()],
        });
    }
    let loss = base.powf(cfg.gamma);
    let outer = -cfg.gamma * base.powf(cfg.gamma - 1.0);
    let d2 = d * d;
    let grad = gt
        .iter()
        .map(|&p| outer * (p * d - t * (1.0 - cfg.lambda)) / d2)
        .collect();
    Ok(LossGrad { loss, grad })
}

pub fn focal_tversky_loss<T: Target>(gt: &T, pred: &ProbMap, cfg: &TverskyConfig) -> Result<LossGrad> {
    check_dims(gt.dims(), pred.dims())?;
    focal_tversky_slices(&gt.values(), pred.data(), cfg)
}

/// Focal Tversky against boundary-softened ground truth.
pub fn ft_bu_loss(
    gt: &BinaryMask,
    pred: &ProbMap,
    tversky: &TverskyConfig,
    bu: &BoundaryUncertaintyConfig,
) -> Result<LossGrad> {
    check_dims(gt.dims(), pred.dims())?;
    let soft = boundary_soft_labels(gt, bu)?;
    focal_tversky_slices(soft.data(), pred.data(), tversky)
}

// ---------------------------------------------------------------------------
// MS-SSIM

/// Standard five-scale exponents.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct MixedLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range of the inputs.
    pub data_range: f64,
}

impl Default for MixedLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.84,
            beta: 0.16,
            scales: 5,
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl MixedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > MSSSIM_WEIGHTS.len() {
            return Err(Error::invalid("scales", format!("{} (supported 1..=5)", self.scales)));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::invalid("window", format!("{} must be odd", self.window)));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 || self.data_range.is_nan() || self.data_range <= 0.0 {
            return Err(Error::invalid("ms-ssim", "sigma and data range must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("mixed loss weights", "alpha and beta must be non-negative"));
        }
        Ok(())
    }

    pub fn min_size(&self) -> usize {
        self.window << (self.scales - 1)
    }

    /// Exponents per scale. The full five-scale set is used as published;
    /// truncated pyramids renormalize their prefix to sum to one.
    pub fn weights(&self) -> Vec<f64> {
        let w = &MSSSIM_WEIGHTS[..self.scales];
        if self.scales == MSSSIM_WEIGHTS.len() {
            return w.to_vec();
        }
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

/// Real-valued image for the structural-similarity code.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims("plane", (width, height), (data.len(), 1)));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.data[(2 * y + dy) * self.width + 2 * x + dx];
                data.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Plane { width: w, height: h, data }
    }
}

impl From<&ProbMap> for Plane {
    fn from(p: &ProbMap) -> Self {
        Plane {
            width: p.width(),
            height: p.height(),
            data: p.data().to_vec(),
        }
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(p: &Plane, g: &[f64]) -> Plane {
    let k = g.len();
    let ow = p.width + 1 - k;
    let oh = p.height + 1 - k;
    let mut tmp = vec![0.0; ow * p.height];
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Mean luminance term and mean contrast-structure term over all windows.
fn ssim_terms(a: &Plane, b: &Plane, g: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let sq = |p: &Plane| Plane {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|v| v * v).collect(),
    };
    let ab = Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    let mu_a = filter_valid(a, g);
    let mu_b = filter_valid(b, g);
    let e_aa = filter_valid(&sq(a), g);
    let e_bb = filter_valid(&sq(b), g);
    let e_ab = filter_valid(&ab, g);
    let n = mu_a.data.len() as f64;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_sum / n, cs_sum / n)
}

/// Multi-scale structural similarity. Negative contrast-structure means are
/// clipped to zero before exponentiation.
pub fn msssim(a: &Plane, b: &Plane, cfg: &MixedLossConfig) -> Result<f64> {
    cfg.validate()?;
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dims("ms-ssim", (a.width, a.height), (b.width, b.height)));
    }
    let min = cfg.min_size();
    if a.width < min || a.height < min {
        return Err(Error::TooSmall {
            min,
            found: format!("{}x{}", a.width, a.height),
        });
    }
    let g = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);
    let weights = cfg.weights();
    let (mut pa, mut pb) = (a.clone(), b.clone());
    let mut result = 1.0;
    for (s, &w) in weights.iter().enumerate() {
        let (l, cs) = ssim_terms(&pa, &pb, &g, c1, c2);
        if s + 1 == weights.len() {
            result *= (l * cs).max(0.0).powf(w);
        } else {
            result *= cs.max(0.0).powf(w);
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(result.clamp(0.0, 1.0))
}

pub fn mae(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dims("mae", (a.width, a.height), (b.width, b.height)));
    }
    if a.data.is_empty() {
        return Err(Error::Empty { what: "image" });
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

/// `alpha (1 - MS-SSIM) + beta MAE`. The structural term is skipped when
/// `alpha` is zero.
pub fn mixed_loss(a: &Plane, b: &Plane, cfg: &MixedLossConfig) -> Result<f64> {
    cfg.validate()?;
    let m = mae(a, b)?;
    let structural = if cfg.alpha == 0.0 { 0.0 } else { cfg.alpha * (1.0 - msssim(a, b, cfg)?) };
    Ok(structural + cfg.beta * m)
}
