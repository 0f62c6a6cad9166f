//! Offline affine augmentation of image/mask pairs: horizontal mirroring,
//! rotation about the centre and zoom about the centre.
//!
//! Geometric transforms are inverse maps from output pixel centres to source
//! coordinates. Images are sampled bilinearly, masks by nearest neighbour, and
//! anything falling outside the source reads as 0.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{load_gray, load_mask, store_gray, store_mask, BinaryMask, DatasetManifest, GrayImage, ManifestRecord, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Rotation magnitude range in degrees.
    pub rotation: (f64, f64),
    /// Flip the rotation sign with probability 1/2.
    pub symmetric_rotation: bool,
    pub zoom: (f64, f64),
    pub mirror_probability: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: (5.0, 10.0),
            symmetric_rotation: true,
            zoom: (0.8, 1.4),
            mirror_probability: 0.5,
            count: 2000,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (rlo, rhi) = self.rotation;
        if !(rlo.is_finite() && rhi.is_finite() && 0.0 <= rlo && rlo <= rhi) {
            return Err(Error::invalid("rotation range", format!("[{rlo}, {rhi}] must satisfy 0 <= lo <= hi")));
        }
        let (zlo, zhi) = self.zoom;
        if !(zlo.is_finite() && zhi.is_finite() && 0.0 < zlo && zlo <= zhi) {
            return Err(Error::invalid("zoom range", format!("[{zlo}, {zhi}] must satisfy 0 < lo <= hi")));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(Error::invalid(
                "mirror probability",
                format!("{} is outside [0, 1]", self.mirror_probability),
            ));
        }
        Ok(())
    }
}

/// One sampled transform chain, applied as mirror, then rotate, then zoom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDraw {
    /// Index of the source pair within the training records.
    pub source: usize,
    pub mirror: bool,
    /// Signed angle in degrees.
    pub angle: f64,
    pub zoom: f64,
}

/// Draws the transform for output `index`. Each index owns its own RNG
/// stream derived from `(seed, index)`, so draws do not depend on order.
pub fn sample_transform(cfg: &AugmentConfig, index: u64, n_sources: usize) -> Result<TransformDraw> {
    cfg.validate()?;
    if n_sources == 0 {
        return Err(Error::Empty { what: "training split" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let source = rng.gen_range(0..n_sources);
    let mirror = rng.gen_bool(cfg.mirror_probability);
    let magnitude = rng.gen_range(cfg.rotation.0..=cfg.rotation.1);
    let negative = cfg.symmetric_rotation && rng.gen_bool(0.5);
    let zoom = rng.gen_range(cfg.zoom.0..=cfg.zoom.1);
    Ok(TransformDraw {
        source,
        mirror,
        angle: if negative { -magnitude } else { magnitude },
        zoom,
    })
}

fn check_pair(image: &GrayImage, mask: &BinaryMask) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::dims("image/mask pair", image.dims(), mask.dims()));
    }
    Ok(())
}

/// Horizontal flip of both members of the pair.
pub fn mirror(image: &GrayImage, mask: &BinaryMask) -> Result<(GrayImage, BinaryMask)> {
    check_pair(image, mask)?;
    let (w, h) = image.dims();
    let flip = |src: &[u8]| -> Vec<u8> {
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(w) {
            out.extend(row.iter().rev());
        }
        out
    };
    Ok((
        GrayImage::new(w, h, flip(image.data()))?,
        BinaryMask::new(w, h, flip(mask.data()))?,
    ))
}

/// Resamples both members through `source_of`, which maps an output pixel
/// centre to a continuous source position (pixel `i` spans `[i, i + 1)`).
fn warp<F>(image: &GrayImage, mask: &BinaryMask, source_of: F) -> Result<(GrayImage, BinaryMask)>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (w, h) = image.dims();
    let img = image.data();
    let msk = mask.data();
    let pixel = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img[y as usize * w + x as usize] as f64
        }
    };
    let mut out_img = Vec::with_capacity(w * h);
    let mut out_mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x as f64 + 0.5, y as f64 + 0.5);

            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            out_mask.push(if inside {
                msk[sy.floor() as usize * w + sx.floor() as usize]
            } else {
                0
            });

            // bilinear over the four nearest pixel centres
            let (gx, gy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (gx.floor(), gy.floor());
            let (fx, fy) = (gx - x0, gy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = pixel(x0, y0) * (1.0 - fx) + pixel(x0 + 1, y0) * fx;
            let bot = pixel(x0, y0 + 1) * (1.0 - fx) + pixel(x0 + 1, y0 + 1) * fx;
            out_img.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((GrayImage::new(w, h, out_img)?, BinaryMask::new(w, h, out_mask)?))
}

/// Rotation by `angle` degrees about the image centre (counter-clockwise in
/// a y-down frame for positive angles).
pub fn rotate(image: &GrayImage, mask: &BinaryMask, angle: f64) -> Result<(GrayImage, BinaryMask)> {
    check_pair(image, mask)?;
    if !angle.is_finite() {
        return Err(Error::invalid("rotation angle", format!("{angle} is not finite")));
    }
    let turn = angle.rem_euclid(360.0);
    if turn == 0.0 {
        return Ok((image.clone(), mask.clone()));
    }
    let (w, h) = image.dims();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = turn.to_radians().sin_cos();
    warp(image, mask, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

/// Scaling by `factor` about the centre with unchanged output size: factors
/// above 1 crop, factors below 1 shrink the content and pad with 0.
pub fn zoom(image: &GrayImage, mask: &BinaryMask, factor: f64) -> Result<(GrayImage, BinaryMask)> {
    check_pair(image, mask)?;
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid("zoom factor", format!("{factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok((image.clone(), mask.clone()));
    }
    let (w, h) = image.dims();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    warp(image, mask, |x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor))
}

/// Applies a sampled chain to a pair.
pub fn apply_transform(image: &GrayImage, mask: &BinaryMask, t: &TransformDraw) -> Result<(GrayImage, BinaryMask)> {
    let (mut img, mut msk) = if t.mirror {
        mirror(image, mask)?
    } else {
        check_pair(image, mask)?;
        (image.clone(), mask.clone())
    };
    (img, msk) = rotate(&img, &msk, t.angle)?;
    zoom(&img, &msk, t.zoom)
}

/// Generates `cfg.count` augmented training pairs into `out_dir` as
/// `aug_NNNNN.png` / `aug_NNNNN_mask.png`.
///
/// Relative paths in `manifest` are resolved against `root`. The returned
/// manifest holds the original records (rebased onto `root`) followed by the
/// new records, whose paths are file names relative to `out_dir`.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    cfg: &AugmentConfig,
    root: &Path,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let rebased: Vec<ManifestRecord> = manifest
        .records
        .iter()
        .map(|r| ManifestRecord {
            split: r.split,
            image: root.join(&r.image),
            gt_mask: root.join(&r.gt_mask),
            predictions: r.predictions.iter().map(|p| root.join(p)).collect(),
            features: r.features.iter().map(|p| root.join(p)).collect(),
        })
        .collect();
    if cfg.count == 0 {
        return DatasetManifest::new(rebased);
    }
    let train: Vec<&ManifestRecord> = rebased.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty { what: "training split" });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cache: Vec<Option<(GrayImage, BinaryMask)>> = vec![None; train.len()];
    let mut added = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let t = sample_transform(cfg, index as u64, train.len())?;
        if cache[t.source].is_none() {
            let rec = train[t.source];
            cache[t.source] = Some((load_gray(&rec.image)?, load_mask(&rec.gt_mask)?));
        }
        let (image, mask) = cache[t.source].as_ref().expect("loaded above");
        let (img, msk) = apply_transform(image, mask, &t)?;
        let image_name = PathBuf::from(format!("aug_{index:05}.png"));
        let mask_name = PathBuf::from(format!("aug_{index:05}_mask.png"));
        store_gray(&img, &out_dir.join(&image_name))?;
        store_mask(&msk, &out_dir.join(&mask_name))?;
        added.push(ManifestRecord::new(Split::Train, image_name, mask_name));
    }
    let mut records = rebased;
    records.extend(added);
    DatasetManifest::new(records)
}
