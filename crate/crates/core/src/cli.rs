//! Command-line front end. Every subcommand reads files, runs one library
//! operation and writes files or JSON; [`run`] maps failures onto exit codes.
//!
//! Exit codes: 0 success, 1 usage or validation, 2 I/O or decode, 3 shape
//! mismatch, 4 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augment::{augment_dataset, AugmentConfig};
use crate::ensemble::{fuse_and, fuse_max, fuse_or, load_stacking_input, train_metalearner, FusionMethod, MetaLearner, StackingSample, TrainHyper};
use crate::error::{Error, ErrorClass, Result};
use crate::imageio::{load_mask, load_probmap, store_mask, store_probmap, DatasetManifest, ProbMap, Split};
use crate::losses::TverskyConfig;
use crate::metrics::{evaluate, write_curve_csv, EvalConfig};
use crate::morpho::{boundary_soft_labels, BoundaryUncertaintyConfig};
use crate::stats::{clopper_pearson_ci, wald_ci};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_SHAPE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Validation => EXIT_USAGE,
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Shape => EXIT_SHAPE,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "segens", version, about = "Segmentation ensembles, losses, metrics and confidence intervals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against ground truth; writes a JSON report and a curve CSV.
    Eval(EvalArgs),
    /// Fuse two or more constituent outputs pixelwise.
    Fuse(FuseArgs),
    /// Train or apply the stacking meta-learner.
    #[command(subcommand)]
    Stack(StackCommand),
    /// Append affine-augmented copies of the training pairs to a manifest.
    Augment(AugmentArgs),
    /// Confidence interval for a Dice score treated as a binomial proportion.
    Ci(CiArgs),
    /// Write the boundary-softened version of a binary mask as an 8-bit map.
    BuPreview(BuArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest; predictions are taken from column `--pred-index` of each record.
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    pub manifest: Option<PathBuf>,
    /// Only records of this split (train, validation, test); all records when omitted.
    #[arg(long, requires = "manifest")]
    pub split: Option<Split>,
    /// Which prediction column of the manifest to score (0-based).
    #[arg(long, default_value_t = 0)]
    pub pred_index: usize,
    /// Probability map files (alternative to --manifest).
    #[arg(long, num_args = 1.., requires = "gt")]
    pub pred: Vec<PathBuf>,
    /// Ground-truth mask files, aligned with --pred.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Binarization threshold in [0, 1]; foreground where p >= threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// IoU above which a predicted mask counts as a mask-level hit, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub iou_match: f64,
    /// Confidence level in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Report JSON path.
    #[arg(long)]
    pub report: PathBuf,
    /// Curve CSV path; defaults to the report path with a .csv extension.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    And,
    Or,
    Max,
}

impl From<MethodArg> for FusionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::And => FusionMethod::And,
            MethodArg::Or => FusionMethod::Or,
            MethodArg::Max => FusionMethod::Max,
        }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// `and` and `or` binarize each input first; `max` fuses raw probabilities.
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Two or more mask or probability map files of equal size.
    #[arg(long, num_args = 2.., required = true)]
    pub input: Vec<PathBuf>,
    /// Binarization threshold in [0, 1]; foreground where p >= threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Fused mask output (.png, otherwise PGM).
    #[arg(long)]
    pub out: PathBuf,
    /// With `max`, also write the fused probability map here.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StackCommand {
    /// Fit the meta-learner on stacked constituent outputs.
    Train(StackTrainArgs),
    /// Predict one probability map per manifest record.
    Predict(StackPredictArgs),
}

#[derive(Debug, Args)]
pub struct StackTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split the meta-learner is fitted on.
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Split used to pick the best checkpoint; the training split is reused when empty.
    #[arg(long, default_value = "validation")]
    pub val_split: Split,
    /// Use only the first K constituent outputs of each record.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Output directory for header.json and per-layer parameter files.
    #[arg(long)]
    pub params: PathBuf,
    /// Training run JSON; defaults to <params>/train_run.json.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Adam learning rate, >= 0.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Mini-batch size, >= 1.
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Tversky false-negative weight in [0, 1].
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    /// Focal exponent, > 0.
    #[arg(long, default_value_t = 0.75)]
    pub gamma: f64,
    /// Soft label of the inner boundary ring; omega <= zeta <= 1.
    #[arg(long, default_value_t = 0.9)]
    pub zeta: f64,
    /// Soft label of the outer boundary ring; 0 <= omega <= zeta.
    #[arg(long, default_value_t = 0.1)]
    pub omega: f64,
    /// Dilation/erosion iterations, >= 1.
    #[arg(long, default_value_t = 1)]
    pub bu_iterations: usize,
}

#[derive(Debug, Args)]
pub struct StackPredictArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only records of this split; all records when omitted.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Directory written by `stack train`.
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory; one `<image stem>_stack.png` per record.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of new training pairs.
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for images, masks and manifest.tsv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Rotation magnitude range in degrees, `lo hi` with 0 <= lo <= hi.
    #[arg(long, num_args = 2, default_values_t = [5.0, 10.0])]
    pub rotation: Vec<f64>,
    /// Rotate in the positive direction only.
    #[arg(long)]
    pub one_sided: bool,
    /// Zoom factor range, `lo hi` with 0 < lo <= hi.
    #[arg(long, num_args = 2, default_values_t = [0.8, 1.4])]
    pub zoom: Vec<f64>,
    /// Mirroring probability in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub mirror: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CiMethodArg {
    Wald,
    Cp,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    /// Score in [0, 1].
    #[arg(long)]
    pub dice: f64,
    /// Sample size, >= 1.
    #[arg(long, default_value_t = 33)]
    pub n: u64,
    /// `cp` uses round(dice * n) successes.
    #[arg(long, value_enum, default_value = "wald")]
    pub method: CiMethodArg,
    /// Confidence level in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Args)]
pub struct BuArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inner ring label; omega <= zeta <= 1.
    #[arg(long, default_value_t = 0.9)]
    pub zeta: f64,
    /// Outer ring label; 0 <= omega <= zeta.
    #[arg(long, default_value_t = 0.1)]
    pub omega: f64,
    /// Dilation/erosion iterations, >= 1.
    #[arg(long, default_value_t = 1)]
    pub iterations: usize,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to `err`, JSON results of `ci` to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Eval(a) => cmd_eval(&a),
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Stack(StackCommand::Train(a)) => cmd_stack_train(&a),
        Command::Stack(StackCommand::Predict(a)) => cmd_stack_predict(&a),
        Command::Augment(a) => cmd_augment(&a),
        Command::Ci(a) => cmd_ci(&a, out),
        Command::BuPreview(a) => cmd_bu_preview(&a),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    Ok((DatasetManifest::load(path)?, manifest_root(path)))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (names, pred_paths, gt_paths) = match &a.manifest {
        Some(m) => {
            let (manifest, root) = load_manifest(m)?;
            let mut names = Vec::new();
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for r in manifest.records.iter().filter(|r| a.split.map_or(true, |s| r.split == s)) {
                let p = r.predictions.get(a.pred_index).ok_or_else(|| {
                    Error::invalid(
                        "prediction index",
                        format!("record {} lists {} predictions", r.image.display(), r.predictions.len()),
                    )
                })?;
                names.push(r.image.display().to_string());
                preds.push(root.join(p));
                gts.push(root.join(&r.gt_mask));
            }
            (names, preds, gts)
        }
        None => {
            if a.pred.len() != a.gt.len() {
                return Err(Error::invalid(
                    "path lists",
                    format!("{} predictions but {} ground-truth masks", a.pred.len(), a.gt.len()),
                ));
            }
            let names = a.pred.iter().map(|p| p.display().to_string()).collect();
            (names, a.pred.clone(), a.gt.clone())
        }
    };
    if pred_paths.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    let preds = pred_paths.iter().map(|p| load_probmap(p)).collect::<Result<Vec<_>>>()?;
    let gts = gt_paths.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        threshold: a.threshold,
        iou_match_threshold: a.iou_match,
        ci_level: a.level,
        ..EvalConfig::default()
    };
    let (report, curve) = evaluate(&names, &preds, &gts, &cfg)?;
    write_json(&report, &a.report)?;
    let curves = a.curves.clone().unwrap_or_else(|| a.report.with_extension("csv"));
    write_curve_csv(&curve, &curves)
}

#[derive(Serialize)]
struct FuseSidecar<'a> {
    method: FusionMethod,
    threshold: f64,
    inputs: Vec<String>,
    output: String,
    probability_output: Option<String>,
    /// `and`/`or` fuse binarized masks; `max` fuses probabilities, then binarizes.
    semantics: &'a str,
}

/// Sidecar path: the output path with `.json` appended.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let method = FusionMethod::from(a.method);
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::invalid("threshold", format!("{} is outside [0, 1]", a.threshold)));
    }
    let maps = a.input.iter().map(|p| load_probmap(p)).collect::<Result<Vec<ProbMap>>>()?;
    let semantics = match method {
        FusionMethod::Max => {
            let (prob, mask) = fuse_max(&maps, a.threshold)?;
            store_mask(&mask, &a.out)?;
            if let Some(p) = &a.prob_out {
                store_probmap(&prob, p)?;
            }
            "pointwise maximum of probabilities, then p >= threshold"
        }
        FusionMethod::And | FusionMethod::Or => {
            let masks: Vec<_> = maps.iter().map(|m| m.binarize(a.threshold)).collect();
            let fused = if method == FusionMethod::And {
                fuse_and(&masks)?
            } else {
                fuse_or(&masks)?
            };
            store_mask(&fused, &a.out)?;
            "inputs binarized at p >= threshold, then combined pixelwise"
        }
    };
    let sidecar = FuseSidecar {
        method,
        threshold: a.threshold,
        inputs: a.input.iter().map(|p| p.display().to_string()).collect(),
        output: a.out.display().to_string(),
        probability_output: a.prob_out.as_ref().filter(|_| method == FusionMethod::Max).map(|p| p.display().to_string()),
        semantics,
    };
    write_json(&sidecar, &sidecar_path(&a.out))
}

fn stacking_samples(
    manifest: &DatasetManifest,
    root: &Path,
    split: Option<Split>,
    top_k: Option<usize>,
    mode: &mut Option<crate::ensemble::InputMode>,
) -> Result<Vec<(String, StackingSample)>> {
    let mut out = Vec::new();
    for r in manifest.records.iter().filter(|r| split.map_or(true, |s| r.split == s)) {
        let (input, m) = load_stacking_input(r, root, top_k)?;
        match mode {
            Some(prev) if *prev != m => {
                return Err(Error::invalid(
                    "stacking inputs",
                    format!("record {} uses {m} while earlier records use {prev}", r.image.display()),
                ))
            }
            _ => *mode = Some(m),
        }
        let target = load_mask(&root.join(&r.gt_mask))?;
        out.push((r.image.display().to_string(), StackingSample { input, target }));
    }
    Ok(out)
}

pub fn cmd_stack_train(a: &StackTrainArgs) -> Result<()> {
    let (manifest, root) = load_manifest(&a.manifest)?;
    let mut mode = None;
    let train: Vec<_> = stacking_samples(&manifest, &root, Some(a.split), a.top_k, &mut mode)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let val: Vec<_> = stacking_samples(&manifest, &root, Some(a.val_split), a.top_k, &mut mode)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let hyper = TrainHyper {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        max_steps: a.max_steps,
        ..TrainHyper::default()
    };
    let tversky = TverskyConfig {
        lambda: a.loss.lambda,
        gamma: a.loss.gamma,
        ..TverskyConfig::default()
    };
    let bu = BoundaryUncertaintyConfig::new(a.loss.zeta, a.loss.omega, a.loss.bu_iterations)?;
    let (net, mut run) = train_metalearner(&train, &val, &hyper, &tversky, &bu)?;
    run.input_mode = mode;
    run.training_split = Some(a.split.to_string());
    net.save(&a.params, Some(a.seed), Some(&hyper))?;
    let run_path = a.run.clone().unwrap_or_else(|| a.params.join("train_run.json"));
    write_json(&run, &run_path)
}

pub fn cmd_stack_predict(a: &StackPredictArgs) -> Result<()> {
    let (manifest, root) = load_manifest(&a.manifest)?;
    let (net, _) = MetaLearner::load(&a.params)?;
    let mut mode = None;
    let samples = stacking_samples(&manifest, &root, a.split, a.top_k, &mut mode)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (name, s) in samples {
        let prob = net.predict(&s.input)?;
        let stem = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        store_probmap(&prob, &a.out_dir.join(format!("{stem}_stack.png")))?;
    }
    Ok(())
}

pub fn cmd_augment(a: &AugmentArgs) -> Result<()> {
    let cfg = AugmentConfig {
        rotation: (a.rotation[0], a.rotation[1]),
        symmetric_rotation: !a.one_sided,
        zoom: (a.zoom[0], a.zoom[1]),
        mirror_probability: a.mirror,
        count: a.count,
        seed: a.seed,
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let root = if root.as_os_str().is_empty() { PathBuf::from(".") } else { root };
    let root = root.canonicalize().map_err(|e| Error::io(&root, e))?;
    let augmented = augment_dataset(&manifest, &cfg, &root, &a.out_dir)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    augmented.store(&a.out_dir.join("manifest.tsv"))
}

pub fn cmd_ci(a: &CiArgs, out: &mut dyn Write) -> Result<()> {
    let interval = match a.method {
        CiMethodArg::Wald => wald_ci(a.dice, a.n, a.level)?,
        CiMethodArg::Cp => {
            if !(0.0..=1.0).contains(&a.dice) {
                return Err(Error::invalid("proportion", format!("{} is outside [0, 1]", a.dice)));
            }
            clopper_pearson_ci((a.dice * a.n as f64).round() as u64, a.n, a.level)?
        }
    };
    let text = serde_json::to_string_pretty(&interval).expect("interval serializes");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_bu_preview(a: &BuArgs) -> Result<()> {
    let cfg = BoundaryUncertaintyConfig::new(a.zeta, a.omega, a.iterations)?;
    let mask = load_mask(&a.mask)?;
    let soft = boundary_soft_labels(&mask, &cfg)?;
    let (w, h) = soft.dims();
    store_probmap(&ProbMap::new(w, h, soft.data().to_vec())?, &a.out)
}
