//! Grayscale images, masks and probability maps, their PGM/PNG codecs, the
//! FST feature-stack container, resizing, and TSV dataset manifests.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor3;

/// Side length the pipeline resizes everything to.
pub const DEFAULT_SIZE: usize = 256;

/// Feature stacks are plain `C x H x W` tensors.
pub type FeatureStack = Tensor3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Hard `{0, 1}` pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid(
                "mask",
                format!("value {} at pixel {i} is not 0 or 1", data[i]),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// True when every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_probmap(&self) -> ProbMap {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Per-pixel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "probability map",
                format!("value {} at pixel {i} is outside [0, 1]", data[i]),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
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

    /// Foreground where `p >= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }

    /// One-channel tensor view, for stacking probability maps as features.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(1, self.height, self.width, self.data.iter().map(|&v| v as f32).collect())
            .expect("probability values are finite")
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// 8-bit quantization, `round(p * 255)` with halves rounded up.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| quantize(p)).collect(),
        }
    }
}

fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::ShapeMismatch {
            context: "pixel buffer",
            expected: format!("{} samples ({width}x{height})", width * height),
            found: format!("{len} samples"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PGM / PNG

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn decode_err(path: Option<&Path>, offset: usize, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.map(Path::to_path_buf),
        offset,
        reason: reason.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: Option<&Path>) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(decode_err(path, start, "truncated PGM header"));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, path: Option<&Path>, what: &str) -> Result<usize> {
    let start = *pos;
    let tok = pgm_token(bytes, pos, path)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| decode_err(path, start, format!("invalid PGM {what}")))
}

/// Decodes a binary (`P5`) 8-bit PGM. Samples are rescaled to 0..=255 when the
/// header's maxval is below 255.
pub fn decode_pgm(bytes: &[u8], path: Option<&Path>) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let reason = match bytes.get(..2) {
            Some(b"P6") | Some(b"P3") => "color PNM images are not supported",
            Some(b"P2") => "ASCII PGM is not supported",
            _ => "missing P5 magic",
        };
        return Err(decode_err(path, 0, reason));
    }
    let mut pos = 2;
    let width = pgm_number(bytes, &mut pos, path, "width")?;
    let height = pgm_number(bytes, &mut pos, path, "height")?;
    let maxval_at = pos;
    let maxval = pgm_number(bytes, &mut pos, path, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(
            path,
            maxval_at,
            format!("unsupported bit depth (maxval {maxval}); only 8-bit images are accepted"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(decode_err(path, maxval_at, "zero-sized image"));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() {
        return Err(decode_err(path, pos, "truncated PGM header"));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(decode_err(
            path,
            bytes.len(),
            format!("truncated raster: expected {n} bytes, found {}", bytes.len() - pos),
        ));
    }
    let raw = &bytes[pos..pos + n];
    let data = if maxval == 255 {
        raw.to_vec()
    } else {
        let mut out = Vec::with_capacity(n);
        for (i, &v) in raw.iter().enumerate() {
            if v as usize > maxval {
                return Err(decode_err(path, pos + i, format!("sample {v} exceeds maxval {maxval}")));
            }
            out.push(((v as usize * 255 + maxval / 2) / maxval) as u8);
        }
        out
    };
    GrayImage::new(width, height, data)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes an 8-bit grayscale PNG; any other color type or depth is rejected.
pub fn decode_png(bytes: &[u8], path: Option<&Path>) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| decode_err(path, 0, format!("PNG header: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(decode_err(
            path,
            0,
            format!("unsupported PNG color type {:?}; only grayscale is accepted", info.color_type),
        ));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(
            path,
            0,
            format!("unsupported bit depth {:?}; only 8-bit images are accepted", info.bit_depth),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; width * height];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(path, bytes.len(), format!("PNG image data: {e}")))?;
    if frame.line_size != width {
        return Err(decode_err(path, 0, "unexpected PNG row layout"));
    }
    GrayImage::new(width, height, buf)
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid("PNG encoding", e.to_string()))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::invalid("PNG encoding", e.to_string()))?;
    }
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads a PGM (P5) or PNG grayscale image, sniffing the format from the bytes.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, Some(path))
    } else {
        decode_pgm(&bytes, Some(path))
    }
}

/// Writes PNG when the extension is `.png`, P5 PGM otherwise.
pub fn store_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes = if is_png(path) { encode_png(img)? } else { encode_pgm(img) };
    write_file(path, &bytes)
}

/// Binarization rule for ground-truth masks: intensity above 127 is foreground.
pub fn gray_to_mask(img: &GrayImage) -> BinaryMask {
    BinaryMask {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| (v > 127) as u8).collect(),
    }
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&v| v * 255).collect(),
    }
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    load_gray(path).map(|g| gray_to_mask(&g))
}

/// Stores `{0, 255}` samples.
pub fn store_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    store_gray(&mask_to_gray(mask), path)
}

pub fn load_probmap(path: &Path) -> Result<ProbMap> {
    load_gray(path).map(|g| ProbMap::from_gray(&g))
}

pub fn store_probmap(map: &ProbMap, path: &Path) -> Result<()> {
    store_gray(&map.to_gray(), path)
}

// ---------------------------------------------------------------------------
// FST

pub const FST_MAGIC: &[u8; 4] = b"FST1";

/// Serializes a tensor as `FST1`, a `"C H W\n"` line, then little-endian f32s.
pub fn encode_fst(stack: &Tensor3) -> Vec<u8> {
    let (c, h, w) = stack.dims();
    let mut out = Vec::with_capacity(16 + stack.data().len() * 4);
    out.extend_from_slice(FST_MAGIC);
    out.extend_from_slice(format!("{c} {h} {w}\n").as_bytes());
    for v in stack.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fst(bytes: &[u8], path: Option<&Path>) -> Result<Tensor3> {
    if bytes.len() < 4 || &bytes[..4] != FST_MAGIC {
        return Err(decode_err(path, 0, "bad magic, expected \"FST1\""));
    }
    let nl = bytes[4..]
        .iter()
        .take(128)
        .position(|&b| b == b'\n')
        .ok_or_else(|| decode_err(path, 4, "missing newline after dimension line"))?;
    let header = std::str::from_utf8(&bytes[4..4 + nl])
        .map_err(|_| decode_err(path, 4, "dimension line is not UTF-8"))?;
    let dims: Vec<usize> = header
        .split_ascii_whitespace()
        .map(usize::from_str)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| decode_err(path, 4, format!("invalid dimension line {header:?}")))?;
    let [c, h, w] = dims[..] else {
        return Err(decode_err(path, 4, format!("expected three dimensions, found {header:?}")));
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(decode_err(path, 4, format!("dimensions must be positive, found {header:?}")));
    }
    let start = 4 + nl + 1;
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| decode_err(path, 4, "dimensions overflow"))?;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(Error::PayloadLength {
            path: path.map(Path::to_path_buf),
            expected,
            actual,
        });
    }
    let mut data = Vec::with_capacity(expected / 4);
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(decode_err(path, start + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Tensor3::from_vec(c, h, w, data)
}

pub fn load_feature_stack(path: &Path) -> Result<FeatureStack> {
    decode_fst(&read_file(path)?, Some(path))
}

pub fn store_feature_stack(stack: &FeatureStack, path: &Path) -> Result<()> {
    write_file(path, &encode_fst(stack))
}

// ---------------------------------------------------------------------------
// Resizing

/// Resampling to a new size. Continuous-valued images use bilinear
/// interpolation on half-pixel centers with edge clamping; masks use nearest.
pub trait Resize: Sized {
    fn resize(&self, width: usize, height: usize) -> Result<Self>;

    fn resize_default(&self) -> Result<Self> {
        self.resize(DEFAULT_SIZE, DEFAULT_SIZE)
    }
}

fn check_resize(src: (usize, usize), dst: (usize, usize)) -> Result<()> {
    if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
        return Err(Error::invalid(
            "resize",
            format!("zero-sized image ({}x{} -> {}x{})", src.0, src.1, dst.0, dst.1),
        ));
    }
    Ok(())
}

fn bilinear_resize(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let axis = |d: usize, s: usize, n_out: usize| {
        let pos = ((d as f64 + 0.5) * s as f64 / n_out as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = axis(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn nearest_index(d: usize, s: usize, n_out: usize) -> usize {
    (((d as f64 + 0.5) * s as f64 / n_out as f64).floor() as usize).min(s - 1)
}

impl Resize for GrayImage {
    fn resize(&self, width: usize, height: usize) -> Result<Self> {
        check_resize(self.dims(), (width, height))?;
        let src: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let data = bilinear_resize(&src, self.width, self.height, width, height)
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::new(width, height, data)
    }
}

impl Resize for ProbMap {
    fn resize(&self, width: usize, height: usize) -> Result<Self> {
        check_resize(self.dims(), (width, height))?;
        let data = bilinear_resize(&self.data, self.width, self.height, width, height)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        ProbMap::new(width, height, data)
    }
}

impl Resize for BinaryMask {
    fn resize(&self, width: usize, height: usize) -> Result<Self> {
        check_resize(self.dims(), (width, height))?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = nearest_index(y, self.height, height);
            for x in 0..width {
                let sx = nearest_index(x, self.width, width);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        BinaryMask::new(width, height, data)
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split tag", format!("{other:?} (expected train, validation or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: Split,
    pub image: PathBuf,
    pub gt_mask: PathBuf,
    pub predictions: Vec<PathBuf>,
    pub features: Vec<PathBuf>,
}

impl ManifestRecord {
    pub fn new(split: Split, image: impl Into<PathBuf>, gt_mask: impl Into<PathBuf>) -> Self {
        Self {
            split,
            image: image.into(),
            gt_mask: gt_mask.into(),
            predictions: Vec::new(),
            features: Vec::new(),
        }
    }

    fn to_line(&self) -> String {
        let join = |v: &[PathBuf]| {
            v.iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.split,
            self.image.display(),
            self.gt_mask.display(),
            join(&self.predictions),
            join(&self.features)
        )
    }
}

/// Ordered list of records; one TSV line each:
/// `split<TAB>image<TAB>gtmask<TAB>pred1,pred2,...<TAB>fst1,fst2,...`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(&r.image) {
                return Err(Error::invalid(
                    "manifest",
                    format!("record {} repeats image path {}", i + 1, r.image.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=5).contains(&fields.len()) {
                return Err(Error::invalid(
                    "manifest",
                    format!("line {}: expected 3 to 5 tab-separated fields, found {}", lineno + 1, fields.len()),
                ));
            }
            let list = |i: usize| -> Vec<PathBuf> {
                fields
                    .get(i)
                    .map(|f| f.split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect())
                    .unwrap_or_default()
            };
            let split = fields[0].parse::<Split>().map_err(|e| {
                Error::invalid("manifest", format!("line {}: {e}", lineno + 1))
            })?;
            records.push(ManifestRecord {
                split,
                image: PathBuf::from(fields[1]),
                gt_mask: PathBuf::from(fields[2]),
                predictions: list(3),
                features: list(4),
            });
        }
        Self::new(records)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

/// Explicit validation/test sizes; training takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub validation: usize,
    pub test: usize,
}

/// Assigns split tags after a seeded shuffle. Test and validation sizes are
/// `floor(ratio * n)` unless `counts` overrides them; training gets the rest.
/// Records keep their input order.
pub fn split_manifest(
    records: Vec<ManifestRecord>,
    ratios: SplitRatios,
    seed: u64,
    counts: Option<SplitCounts>,
) -> Result<DatasetManifest> {
    let n = records.len();
    if n == 0 {
        return Err(Error::Empty { what: "record list" });
    }
    let sum = ratios.train + ratios.validation + ratios.test;
    if [ratios.train, ratios.validation, ratios.test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (sum - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid("split ratios", format!("{ratios:?} must be in [0,1] and sum to 1")));
    }
    let (n_val, n_test) = match counts {
        Some(c) => (c.validation, c.test),
        None => {
            let floor = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
            (floor(ratios.validation), floor(ratios.test))
        }
    };
    if n_val + n_test > n {
        return Err(Error::invalid(
            "split counts",
            format!("validation {n_val} + test {n_test} exceeds {n} records"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            tags[i] = Split::Test;
        } else if rank < n_test + n_val {
            tags[i] = Split::Validation;
        }
    }
    let records = records
        .into_iter()
        .zip(tags)
        .map(|(mut r, s)| {
            r.split = s;
            r
        })
        .collect();
    DatasetManifest::new(records)
}
