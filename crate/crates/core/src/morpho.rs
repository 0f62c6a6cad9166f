//! Grayscale dilation and erosion with additive structuring elements, and the
//! boundary-uncertainty soft labelling built on them.
//!
//! Pixels outside the image are background for both operators: they are
//! skipped by dilation and count as 0 for erosion.

use crate::error::{Error, Result};
use crate::imageio::{BinaryMask, GrayImage};

/// Support offsets `(row, col)` with additive values.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuringElement {
    entries: Vec<(isize, isize, f64)>,
}

impl StructuringElement {
    pub fn new(entries: Vec<(isize, isize, f64)>) -> Result<Self> {
        if !entries.iter().any(|&(r, c, _)| r == 0 && c == 0) {
            return Err(Error::invalid("structuring element", "support must contain the origin"));
        }
        if entries.iter().any(|e| !e.2.is_finite()) {
            return Err(Error::invalid("structuring element", "values must be finite"));
        }
        Ok(Self { entries })
    }

    /// Flat square of side `2 * radius + 1`.
    pub fn flat_square(radius: usize) -> Self {
        let r = radius as isize;
        let mut entries = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                entries.push((dy, dx, 0.0));
            }
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(isize, isize, f64)] {
        &self.entries
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::flat_square(1)
    }
}

fn dilate_once(src: &[f64], w: usize, h: usize, se: &StructuringElement, hi: f64) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            for &(i, j, v) in &se.entries {
                let sy = y as isize - i;
                let sx = x as isize - j;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                best = best.max(src[sy as usize * w + sx as usize] + v);
            }
            out[y * w + x] = best.clamp(0.0, hi);
        }
    }
    out
}

fn erode_once(src: &[f64], w: usize, h: usize, se: &StructuringElement, hi: f64) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for &(i, j, v) in &se.entries {
                let sy = y as isize + i;
                let sx = x as isize + j;
                let sample = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    src[sy as usize * w + sx as usize]
                };
                best = best.min(sample - v);
            }
            out[y * w + x] = best.clamp(0.0, hi);
        }
    }
    out
}

/// Images the morphological operators can act on.
pub trait Morphable: Sized {
    /// Upper end of the value range results are clamped to.
    const MAX_VALUE: f64;
    fn dims(&self) -> (usize, usize);
    fn to_values(&self) -> Vec<f64>;
    fn from_values(w: usize, h: usize, values: Vec<f64>) -> Self;
}

impl Morphable for BinaryMask {
    const MAX_VALUE: f64 = 1.0;

    fn dims(&self) -> (usize, usize) {
        BinaryMask::dims(self)
    }

    fn to_values(&self) -> Vec<f64> {
        self.data().iter().map(|&v| v as f64).collect()
    }

    fn from_values(w: usize, h: usize, values: Vec<f64>) -> Self {
        let data = values.into_iter().map(|v| (v >= 0.5) as u8).collect();
        BinaryMask::new(w, h, data).expect("values are binary")
    }
}

impl Morphable for GrayImage {
    const MAX_VALUE: f64 = 255.0;

    fn dims(&self) -> (usize, usize) {
        GrayImage::dims(self)
    }

    fn to_values(&self) -> Vec<f64> {
        self.data().iter().map(|&v| v as f64).collect()
    }

    fn from_values(w: usize, h: usize, values: Vec<f64>) -> Self {
        let data = values.into_iter().map(|v| v.round() as u8).collect();
        GrayImage::new(w, h, data).expect("length preserved")
    }
}

fn iterate<T: Morphable>(
    x: &T,
    se: &StructuringElement,
    n: usize,
    op: fn(&[f64], usize, usize, &StructuringElement, f64) -> Vec<f64>,
) -> Result<T> {
    if n == 0 {
        return Err(Error::invalid("iterations", "must be at least 1"));
    }
    let (w, h) = x.dims();
    let mut v = x.to_values();
    for _ in 0..n {
        v = op(&v, w, h, se, T::MAX_VALUE);
    }
    Ok(T::from_values(w, h, v))
}

/// `n`-fold `max_{(i,j)} X(x - i, y - j) + Y(i, j)`.
pub fn dilate<T: Morphable>(x: &T, se: &StructuringElement, n: usize) -> Result<T> {
    iterate(x, se, n, dilate_once)
}

/// `n`-fold `min_{(i,j)} X(x + i, y + j) - Y(i, j)`.
pub fn erode<T: Morphable>(x: &T, se: &StructuringElement, n: usize) -> Result<T> {
    iterate(x, se, n, erode_once)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryUncertaintyConfig {
    /// Label for foreground pixels removed by erosion.
    pub zeta: f64,
    /// Label for background pixels added by dilation.
    pub omega: f64,
    pub iterations: usize,
    pub element: StructuringElement,
}

impl Default for BoundaryUncertaintyConfig {
    fn default() -> Self {
        Self {
            zeta: 0.9,
            omega: 0.1,
            iterations: 1,
            element: StructuringElement::default(),
        }
    }
}

impl BoundaryUncertaintyConfig {
    pub fn new(zeta: f64, omega: f64, iterations: usize) -> Result<Self> {
        let cfg = Self {
            zeta,
            omega,
            iterations,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.omega && self.omega <= self.zeta && self.zeta <= 1.0) {
            return Err(Error::invalid(
                "boundary uncertainty",
                format!("need 0 <= omega <= zeta <= 1, got omega={} zeta={}", self.omega, self.zeta),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("boundary uncertainty", "iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Ground-truth labels in `[0, 1]` after boundary softening.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SoftLabelMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims("soft label mask", (width, height), (data.len(), 1)));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft label mask", "values must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

impl From<&BinaryMask> for SoftLabelMask {
    fn from(m: &BinaryMask) -> Self {
        let (width, height) = m.dims();
        Self {
            width,
            height,
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Replaces the inner boundary ring (`X - erode(X)`) with `zeta` and the outer
/// ring (`dilate(X) - X`) with `omega`; everything else keeps its hard label.
pub fn boundary_soft_labels(x: &BinaryMask, cfg: &BoundaryUncertaintyConfig) -> Result<SoftLabelMask> {
    cfg.validate()?;
    let dil = dilate(x, &cfg.element, cfg.iterations)?;
    let ero = erode(x, &cfg.element, cfg.iterations)?;
    let data = x
        .data()
        .iter()
        .zip(dil.data())
        .zip(ero.data())
        .map(|((&v, &d), &e)| match (v != 0, d != 0, e != 0) {
            (true, _, true) => 1.0,
            (true, _, false) => cfg.zeta,
            (false, true, _) => cfg.omega,
            (false, false, _) => 0.0,
        })
        .collect();
    let (width, height) = x.dims();
    Ok(SoftLabelMask { width, height, data })
}
