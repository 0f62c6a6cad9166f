//! Ensembles of segmentation outputs: pixelwise AND / OR fusion of binary
//! masks, MAX fusion of probability maps, and a trainable fully convolutional
//! stacking meta-learner.
//!
//! AND and OR act on already binarized masks, MAX acts on raw probabilities
//! and binarizes afterwards. On binary inputs OR and MAX would coincide.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_feature_stack, load_probmap, BinaryMask, ManifestRecord, ProbMap};
use crate::imageio::{decode_fst, encode_fst};
use crate::losses::{focal_tversky_slices, TverskyConfig};
use crate::metrics::{confusion, scalar_metrics, ConfusionCounts};
use crate::morpho::{boundary_soft_labels, BoundaryUncertaintyConfig};
use crate::ndtensor::{adam_step, conv2d_backward, conv2d_forward, sigmoid_scalar, AdamConfig, AdamState, ConvKernel, Tensor3};

// ---------------------------------------------------------------------------
// Fusion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    And,
    Or,
    Max,
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::And => "and",
            FusionMethod::Or => "or",
            FusionMethod::Max => "max",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "and" => Ok(FusionMethod::And),
            "or" => Ok(FusionMethod::Or),
            "max" => Ok(FusionMethod::Max),
            other => Err(Error::invalid("fusion method", format!("{other:?} (expected and, or or max)"))),
        }
    }
}

fn check_inputs(dims: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let dims: Vec<_> = dims.collect();
    if dims.len() < 2 {
        return Err(Error::invalid("fusion inputs", format!("need at least 2, got {}", dims.len())));
    }
    for &d in &dims[1..] {
        if d != dims[0] {
            return Err(Error::dims("fusion inputs", dims[0], d));
        }
    }
    Ok(dims[0])
}

fn fuse_masks(masks: &[BinaryMask], all: bool) -> Result<BinaryMask> {
    let (w, h) = check_inputs(masks.iter().map(BinaryMask::dims))?;
    let data = (0..w * h)
        .map(|i| {
            let mut on = masks.iter().map(|m| m.data()[i] != 0);
            (if all { on.all(|b| b) } else { on.any(|b| b) }) as u8
        })
        .collect();
    BinaryMask::new(w, h, data)
}

/// Pixel is set iff it is set in every input.
pub fn fuse_and(masks: &[BinaryMask]) -> Result<BinaryMask> {
    fuse_masks(masks, true)
}

/// Pixel is set iff it is set in at least one input.
pub fn fuse_or(masks: &[BinaryMask]) -> Result<BinaryMask> {
    fuse_masks(masks, false)
}

/// Pointwise maximum of the probabilities and its binarization (`p >= threshold`).
pub fn fuse_max(maps: &[ProbMap], threshold: f64) -> Result<(ProbMap, BinaryMask)> {
    let (w, h) = check_inputs(maps.iter().map(ProbMap::dims))?;
    let data = (0..w * h)
        .map(|i| maps.iter().map(|m| m.data()[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let fused = ProbMap::new(w, h, data)?;
    let mask = fused.binarize(threshold);
    Ok((fused, mask))
}

// ---------------------------------------------------------------------------
// Meta-learner

/// Filter counts of the four 3x3 ReLU layers; a 1x1 sigmoid head follows.
pub const HIDDEN_WIDTHS: [usize; 4] = [256, 128, 64, 32];
pub const LAYER_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn layer_plan(in_channels: usize) -> [(usize, usize, usize, Activation); LAYER_COUNT] {
    let [a, b, c, d] = HIDDEN_WIDTHS;
    [
        (in_channels, a, 3, Activation::Relu),
        (a, b, 3, Activation::Relu),
        (b, c, 3, Activation::Relu),
        (c, d, 3, Activation::Relu),
        (d, 1, 1, Activation::Sigmoid),
    ]
}

/// Largest `f64` below 1; keeps saturated sigmoid outputs inside `(0, 1)`.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Per-layer `(weight, bias)` gradients.
type LayerGrads = Vec<(Vec<f64>, Vec<f64>)>;

/// Five-layer fully convolutional stacking network.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearner {
    layers: Vec<ConvKernel>,
}

impl MetaLearner {
    /// Random initialization: normal weights with standard deviation
    /// `sqrt(2 / fan_in)` for ReLU layers and `sqrt(1 / fan_in)` for the head,
    /// zero biases.
    pub fn build(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::invalid("input channels", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(LAYER_COUNT);
        for (cin, cout, k, act) in layer_plan(in_channels) {
            let fan_in = (cin * k * k) as f64;
            let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
            let dist = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let weights = (0..cout * cin * k * k).map(|_| dist.sample(&mut rng) as f32).collect();
            layers.push(ConvKernel::new(cout, cin, k, k, weights, vec![0.0; cout])?);
        }
        Ok(Self { layers })
    }

    /// All weights and biases zero; every prediction is exactly 0.5.
    pub fn zeros(in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::invalid("input channels", "must be at least 1"));
        }
        let layers = layer_plan(in_channels)
            .into_iter()
            .map(|(cin, cout, k, _)| ConvKernel::zeros(cout, cin, k, k))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Wraps explicit kernels after checking they chain as the fixed plan requires.
    pub fn from_layers(layers: Vec<ConvKernel>) -> Result<Self> {
        if layers.len() != LAYER_COUNT {
            return Err(Error::ShapeMismatch {
                context: "meta-learner layers",
                expected: format!("{LAYER_COUNT} layers"),
                found: format!("{} layers", layers.len()),
            });
        }
        for (layer, (cin, cout, k, _)) in layers.iter().zip(layer_plan(layers[0].in_channels())) {
            let found = (layer.in_channels(), layer.out_channels(), layer.kernel_size());
            if found != (cin, cout, (k, k)) {
                return Err(Error::ShapeMismatch {
                    context: "meta-learner layer",
                    expected: format!("{cout}x{cin}x{k}x{k}"),
                    found: format!("{}x{}x{}x{}", found.1, found.0, found.2 .0, found.2 .1),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn layers(&self) -> &[ConvKernel] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvKernel::param_count).sum()
    }

    /// Flattened parameters, layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights());
            out.extend_from_slice(l.bias());
        }
        out
    }

    /// Inverse of [`MetaLearner::params`].
    pub fn set_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "meta-learner parameters",
                expected: format!("{} values", self.param_count()),
                found: format!("{} values", flat.len()),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "meta-learner parameters".into(),
            });
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights().len());
            l.weights_mut().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias().len());
            l.bias_mut().copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor3) -> Result<()> {
        if input.channels() != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                found: input.channels(),
            });
        }
        Ok(())
    }

    /// Runs all layers and keeps what backpropagation needs.
    fn forward_cached(&self, input: &Tensor3) -> Result<Forward> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(LAYER_COUNT);
        let mut x = input.clone();
        for layer in &self.layers[..LAYER_COUNT - 1] {
            let mut z = conv2d_forward(&x, layer)?;
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        let logits = conv2d_forward(&x, &self.layers[LAYER_COUNT - 1])?;
        inputs.push(x);
        let (probs, dprobs) = logits
            .data()
            .iter()
            .map(|&z| {
                let (s, ds) = sigmoid_scalar(z as f64);
                (s.clamp(f64::MIN_POSITIVE, BELOW_ONE), ds)
            })
            .unzip();
        Ok(Forward {
            inputs,
            probs,
            dprobs,
            height: input.height(),
            width: input.width(),
        })
    }

    /// Foreground probabilities, one per input pixel, strictly inside `(0, 1)`.
    pub fn predict(&self, input: &Tensor3) -> Result<ProbMap> {
        let f = self.forward_cached(input)?;
        ProbMap::new(f.width, f.height, f.probs)
    }

    /// Focal Tversky loss of one sample against `soft_target` and its gradient
    /// with respect to every parameter (ordered as [`MetaLearner::params`]).
    pub fn loss_and_grad(&self, input: &Tensor3, soft_target: &[f64], tversky: &TverskyConfig) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self.sample_grads(input, soft_target, tversky)?;
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in grads {
            flat.extend(w);
            flat.extend(b);
        }
        Ok((loss, flat))
    }

    fn sample_grads(&self, input: &Tensor3, soft_target: &[f64], tversky: &TverskyConfig) -> Result<(f64, LayerGrads)> {
        let f = self.forward_cached(input)?;
        if soft_target.len() != f.probs.len() {
            return Err(Error::dims("meta-learner target", (f.width, f.height), (soft_target.len(), 1)));
        }
        let lg = focal_tversky_slices(soft_target, &f.probs, tversky)?;
        let upstream: Vec<f32> = lg.grad.iter().zip(&f.dprobs).map(|(g, d)| (g * d) as f32).collect();
        let mut grad_out = Tensor3::from_vec(1, f.height, f.width, upstream)?;
        let mut grads = vec![(Vec::new(), Vec::new()); LAYER_COUNT];
        for l in (0..LAYER_COUNT).rev() {
            let g = conv2d_backward(&f.inputs[l], &self.layers[l], &grad_out)?;
            grads[l] = (g.weights, g.bias);
            if l > 0 {
                // inputs[l] is the ReLU output of layer l - 1
                let mut gi = g.input;
                for (gv, &a) in gi.data_mut().iter_mut().zip(f.inputs[l].data()) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
                grad_out = gi;
            }
        }
        Ok((lg.loss, grads))
    }

    /// Writes `header.json` plus `layer{i}_weight.fst` and `layer{i}_bias.fst`
    /// (layers numbered from 1) into `dir`.
    pub fn save(&self, dir: &Path, seed: Option<u64>, hyper: Option<&TrainHyper>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let plan = layer_plan(self.in_channels());
        let header = ParamsHeader {
            format: PARAMS_FORMAT.to_string(),
            in_channels: self.in_channels(),
            layers: self
                .layers
                .iter()
                .zip(plan)
                .map(|(l, (_, _, _, activation))| LayerShape {
                    out_channels: l.out_channels(),
                    in_channels: l.in_channels(),
                    kernel_h: l.kernel_size().0,
                    kernel_w: l.kernel_size().1,
                    activation,
                })
                .collect(),
            seed,
            hyper: hyper.cloned(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        let path = dir.join("header.json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
        for (i, l) in self.layers.iter().enumerate() {
            let (kh, kw) = l.kernel_size();
            let w = Tensor3::from_vec(l.out_channels() * l.in_channels(), kh, kw, l.weights().to_vec())?;
            let b = Tensor3::from_vec(l.out_channels(), 1, 1, l.bias().to_vec())?;
            for (name, t) in [(format!("layer{}_weight.fst", i + 1), w), (format!("layer{}_bias.fst", i + 1), b)] {
                let path = dir.join(name);
                std::fs::write(&path, encode_fst(&t)).map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }

    /// Reads a directory written by [`MetaLearner::save`].
    pub fn load(dir: &Path) -> Result<(Self, ParamsHeader)> {
        let path = dir.join("header.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ParamsHeader = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: Some(path.clone()),
            offset: 0,
            reason: e.to_string(),
        })?;
        if header.format != PARAMS_FORMAT {
            return Err(Error::Decode {
                path: Some(path),
                offset: 0,
                reason: format!("unknown format {:?}", header.format),
            });
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for (i, s) in header.layers.iter().enumerate() {
            let read = |name: String| -> Result<Tensor3> {
                let p = dir.join(name);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                decode_fst(&bytes, Some(&p))
            };
            let w = read(format!("layer{}_weight.fst", i + 1))?;
            let b = read(format!("layer{}_bias.fst", i + 1))?;
            if w.dims() != (s.out_channels * s.in_channels, s.kernel_h, s.kernel_w) || b.dims() != (s.out_channels, 1, 1) {
                return Err(Error::ShapeMismatch {
                    context: "meta-learner parameter file",
                    expected: format!("{}x{}x{}x{}", s.out_channels, s.in_channels, s.kernel_h, s.kernel_w),
                    found: format!("{:?} weights, {:?} bias", w.dims(), b.dims()),
                });
            }
            layers.push(ConvKernel::new(s.out_channels, s.in_channels, s.kernel_h, s.kernel_w, w.into_vec(), b.into_vec())?);
        }
        Ok((Self::from_layers(layers)?, header))
    }
}

struct Forward {
    /// Input of each conv layer; entries after the first are ReLU outputs.
    inputs: Vec<Tensor3>,
    probs: Vec<f64>,
    /// Sigmoid derivative at each logit.
    dprobs: Vec<f64>,
    height: usize,
    width: usize,
}

const PARAMS_FORMAT: &str = "segens-metalearner/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub activation: Activation,
}

/// JSON header stored next to the per-layer parameter files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub format: String,
    pub in_channels: usize,
    pub layers: Vec<LayerShape>,
    pub seed: Option<u64>,
    pub hyper: Option<TrainHyper>,
}

/// Forward pass of `params` on one stacked input.
pub fn predict_metalearner(params: &MetaLearner, input: &Tensor3) -> Result<ProbMap> {
    params.predict(input)
}

// ---------------------------------------------------------------------------
// Stacking inputs

/// Where the stacked channels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Exported feature stacks.
    Features,
    /// Probability maps standing in as single channels.
    ProbMaps,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Features => "features",
            InputMode::ProbMaps => "prob-maps",
        })
    }
}

/// Concatenates the first `top_k` constituent outputs of a record
/// channel-wise. Feature stacks are used when the record lists any, otherwise
/// each probability map contributes one channel.
pub fn load_stacking_input(record: &ManifestRecord, root: &Path, top_k: Option<usize>) -> Result<(Tensor3, InputMode)> {
    let take = |n: usize| top_k.map_or(n, |k| k.min(n));
    let (parts, mode) = if !record.features.is_empty() {
        let parts = record.features[..take(record.features.len())]
            .iter()
            .map(|p| load_feature_stack(&root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        (parts, InputMode::Features)
    } else if !record.predictions.is_empty() {
        let parts = record.predictions[..take(record.predictions.len())]
            .iter()
            .map(|p| load_probmap(&root.join(p)).map(|m| m.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        (parts, InputMode::ProbMaps)
    } else {
        return Err(Error::Empty {
            what: "constituent output list",
        });
    };
    if parts.is_empty() {
        return Err(Error::invalid("top-k", "must be at least 1"));
    }
    Ok((Tensor3::concat(&parts)?, mode))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct StackingSample {
    pub input: Tensor3,
    pub target: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps; training stops mid-epoch when reached.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before the rate is reduced.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            max_steps: None,
            plateau_patience: 5,
            plateau_factor: 0.5,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate", format!("{} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size", "must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau factor", format!("{} must lie in (0, 1]", self.plateau_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub hyper: TrainHyper,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    /// `"validation"`, or `"train"` when no validation samples were given.
    pub validation_source: String,
    /// Pooled Dice of the returned parameters on the training samples at 0.5.
    pub final_train_dice: f64,
    pub input_mode: Option<InputMode>,
    pub training_split: Option<String>,
}

struct Prepared<'a> {
    input: &'a Tensor3,
    target: &'a BinaryMask,
    soft: Vec<f64>,
}

fn prepare<'a>(samples: &'a [StackingSample], channels: usize, bu: &BoundaryUncertaintyConfig) -> Result<Vec<Prepared<'a>>> {
    samples
        .iter()
        .map(|s| {
            if s.input.channels() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    found: s.input.channels(),
                });
            }
            let spatial = (s.input.width(), s.input.height());
            if spatial != s.target.dims() {
                return Err(Error::dims("stacking sample", s.target.dims(), spatial));
            }
            let soft = boundary_soft_labels(&s.target, bu)?.data().to_vec();
            Ok(Prepared {
                input: &s.input,
                target: &s.target,
                soft,
            })
        })
        .collect()
}

fn mean_loss(net: &MetaLearner, set: &[Prepared<'_>], tversky: &TverskyConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        let p = net.predict(s.input)?;
        total += focal_tversky_slices(&s.soft, p.data(), tversky)?.loss;
    }
    Ok(total / set.len() as f64)
}

/// Pooled hard Dice of `net` on `set`, binarizing at 0.5.
fn pooled_dice(net: &MetaLearner, set: &[Prepared<'_>]) -> Result<f64> {
    let mut c = ConfusionCounts::default();
    for s in set {
        c = c + confusion(&net.predict(s.input)?.binarize(0.5), s.target)?;
    }
    Ok(scalar_metrics(&c).dice)
}

/// Mini-batch Adam on the mean per-sample focal Tversky loss against
/// boundary-softened targets. Returns the parameters with the lowest
/// validation loss; the validation set falls back to the training set when
/// empty. Runs are bit-reproducible for a fixed seed.
pub fn train_metalearner(
    train: &[StackingSample],
    validation: &[StackingSample],
    hyper: &TrainHyper,
    tversky: &TverskyConfig,
    bu: &BoundaryUncertaintyConfig,
) -> Result<(MetaLearner, TrainRun)> {
    hyper.validate()?;
    tversky.validate()?;
    if train.is_empty() {
        return Err(Error::Empty { what: "training set" });
    }
    let channels = train[0].input.channels();
    let train_set = prepare(train, channels, bu)?;
    let val_set = prepare(validation, channels, bu)?;
    let (val_ref, validation_source) = if val_set.is_empty() {
        (&train_set, "train")
    } else {
        (&val_set, "validation")
    };

    let mut net = MetaLearner::build(channels, hyper.seed)?;
    let mut lr = hyper.learning_rate;
    let adam = |len: usize| AdamState::new(len, AdamConfig { lr, ..AdamConfig::default() });
    let mut states: Vec<(AdamState, AdamState)> = net
        .layers
        .iter()
        .map(|l| (adam(l.weights().len()), adam(l.bias().len())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, MetaLearner)> = None;
    let mut stale = 0usize;
    let mut steps = 0usize;
    let cap = hyper.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=hyper.epochs {
        if steps >= cap {
            break;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_index, batch) in order.chunks(hyper.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: LayerGrads = net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.bias().len()]))
                .collect();
            for &i in batch {
                let s = &train_set[i];
                let (loss, grads) = net.sample_grads(s.input, &s.soft, tversky)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("training loss at epoch {epoch}, batch {batch_index}"),
                    });
                }
                loss_sum += loss;
                seen += 1;
                for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(grads) {
                    aw.iter_mut().zip(gw).for_each(|(a, g)| *a += g * scale);
                    ab.iter_mut().zip(gb).for_each(|(a, g)| *a += g * scale);
                }
            }
            for ((layer, (sw, sb)), (gw, gb)) in net.layers.iter_mut().zip(states.iter_mut()).zip(&acc) {
                sw.config.lr = lr;
                sb.config.lr = lr;
                adam_step(layer.weights_mut(), gw, sw).map_err(|e| step_error(e, epoch, batch_index))?;
                adam_step(layer.bias_mut(), gb, sb).map_err(|e| step_error(e, epoch, batch_index))?;
            }
            steps += 1;
            if steps >= cap {
                let record = finish_epoch(&net, val_ref, tversky, epoch, loss_sum / seen as f64, lr, steps)?;
                track_best(&mut best, &record, &net);
                history.push(record);
                break 'epochs;
            }
        }
        let record = finish_epoch(&net, val_ref, tversky, epoch, loss_sum / seen as f64, lr, steps)?;
        if track_best(&mut best, &record, &net) {
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.plateau_patience.max(1) {
                lr *= hyper.plateau_factor;
                stale = 0;
            }
        }
        history.push(record);
    }

    let (best_epoch, net) = match best {
        Some((_, epoch, params)) => (Some(epoch), params),
        None => (None, net),
    };
    let final_train_dice = pooled_dice(&net, &train_set)?;
    let run = TrainRun {
        hyper: hyper.clone(),
        history,
        best_epoch,
        steps,
        validation_source: validation_source.to_string(),
        final_train_dice,
        input_mode: None,
        training_split: None,
    };
    Ok((net, run))
}

fn step_error(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteGradient { index } => Error::NonFinite {
            context: format!("gradient at parameter {index}, epoch {epoch}, batch {batch}"),
        },
        other => other,
    }
}

fn finish_epoch(
    net: &MetaLearner,
    val: &[Prepared<'_>],
    tversky: &TverskyConfig,
    epoch: usize,
    train_loss: f64,
    lr: f64,
    steps: usize,
) -> Result<EpochRecord> {
    let validation_loss = mean_loss(net, val, tversky)?;
    if !validation_loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("validation loss at epoch {epoch}"),
        });
    }
    Ok(EpochRecord {
        epoch,
        train_loss,
        validation_loss,
        learning_rate: lr,
        steps,
    })
}

/// Records `net` as the new best when its validation loss is strictly lower.
fn track_best(best: &mut Option<(f64, usize, MetaLearner)>, record: &EpochRecord, net: &MetaLearner) -> bool {
    let improved = best.as_ref().map_or(true, |(v, _, _)| record.validation_loss < *v);
    if improved {
        *best = Some((record.validation_loss, record.epoch, net.clone()));
    }
    improved
}
