//! Pixel-level evaluation: confusion counts, overlap scores, pooled PR/ROC
//! curves, AUROC, 11-point interpolated mAP, and the whole-mask IoU match rule.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{BinaryMask, ProbMap};
use crate::stats::{clopper_pearson_ci, wald_ci, Interval};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("confusion", gt.dims(), pred.dims()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let mut undefined = Vec::new();
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, "iou", &mut undefined);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "dice", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut undefined);
    ScalarMetrics {
        iou,
        dice,
        precision,
        recall,
        undefined,
    }
}

/// `2 iou / (1 + iou)`.
pub fn dice_from_iou(iou: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::invalid("iou", format!("{iou} is outside [0, 1]")));
    }
    Ok(2.0 * iou / (1.0 + iou))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub counts: ConfusionCounts,
}

impl CurvePoint {
    /// Point for the confusion counts at one threshold. Zero denominators give 0.
    pub fn from_counts(threshold: f64, c: ConfusionCounts) -> Self {
        let div = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let recall = div(c.tp, c.tp + c.fn_);
        Self {
            threshold,
            precision: div(c.tp, c.tp + c.fp),
            recall,
            tpr: recall,
            fpr: div(c.fp, c.fp + c.tn),
            counts: c,
        }
    }
}

/// Curve points ordered by strictly decreasing threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub points: Vec<CurvePoint>,
}

/// `{0, 0.01, ..., 1.0}`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_pairs(preds: &[ProbMap], gts: &[BinaryMask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty { what: "prediction set" });
    }
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            context: "evaluation set",
            expected: format!("{} ground-truth masks", preds.len()),
            found: format!("{}", gts.len()),
        });
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.dims() != g.dims() {
            return Err(Error::dims("prediction vs ground truth", g.dims(), p.dims()));
        }
    }
    Ok(())
}

/// Pooled-pixel precision/recall and ROC points; a pixel is predicted
/// foreground at threshold `t` when `p >= t`.
pub fn pr_roc_curves(preds: &[ProbMap], gts: &[BinaryMask], thresholds: &[f64]) -> Result<CurvePoints> {
    check_pairs(preds, gts)?;
    if thresholds.is_empty() {
        return Err(Error::Empty { what: "threshold list" });
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid("threshold", format!("{t} is outside [0, 1]")));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        for (&s, &l) in p.data().iter().zip(g.data()) {
            if l != 0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |v: &[f64], t: f64| (v.len() - v.partition_point(|&s| s < t)) as u64;

    let points = ts
        .into_iter()
        .map(|t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            let c = ConfusionCounts {
                tp,
                fp,
                fn_: pos.len() as u64 - tp,
                tn: neg.len() as u64 - fp,
            };
            CurvePoint::from_counts(t, c)
        })
        .collect();
    Ok(CurvePoints { points })
}

/// Trapezoidal area under (FPR, TPR), anchored at (0, 0) and (1, 1).
pub fn auroc(curve: &CurvePoints) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for &(x, y) in pts.iter().chain(std::iter::once(&(1.0, 1.0))) {
        area += (x - prev.0) * (y + prev.1) / 2.0;
        prev = (x, y);
    }
    area.clamp(0.0, 1.0)
}

/// Mean over recall levels `{0, 0.1, ..., 1}` of the best precision achieved
/// at recall at least that level (0 when no point reaches it).
pub fn map11(curve: &CurvePoints) -> f64 {
    // compensated summation keeps hand-checkable cases exact
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let best = curve
            .points
            .iter()
            .filter(|p| p.recall >= r)
            .map(|p| p.precision)
            .fold(0.0, f64::max);
        let next = sum + best;
        carry += if sum.abs() >= best.abs() { (sum - next) + best } else { (best - next) + sum };
        sum = next;
    }
    (sum + carry) / 11.0
}

pub fn write_curve_csv(curve: &CurvePoints, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("threshold,precision,recall,tpr,fpr\n");
    for p in &curve.points {
        body.push_str(&format!("{},{},{},{},{}\n", p.threshold, p.precision, p.recall, p.tpr, p.fpr));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Whole-mask outcome under the IoU-threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMatch {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
    /// Both masks non-empty but overlap too small: one FP and one FN.
    Missed,
}

impl MaskMatch {
    pub fn tallies(self) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        match self {
            MaskMatch::TruePositive => c.tp = 1,
            MaskMatch::FalsePositive => c.fp = 1,
            MaskMatch::FalseNegative => c.fn_ = 1,
            MaskMatch::TrueNegative => c.tn = 1,
            MaskMatch::Missed => {
                c.fp = 1;
                c.fn_ = 1;
            }
        }
        c
    }
}

/// A non-empty prediction counts as a hit only when its IoU with a non-empty
/// ground truth strictly exceeds `iou_threshold`.
pub fn mask_level_match(pred: &BinaryMask, gt: &BinaryMask, iou_threshold: f64) -> Result<MaskMatch> {
    let c = confusion(pred, gt)?;
    let pred_any = c.tp + c.fp > 0;
    let gt_any = c.tp + c.fn_ > 0;
    Ok(match (pred_any, gt_any) {
        (false, false) => MaskMatch::TrueNegative,
        (true, false) => MaskMatch::FalsePositive,
        (false, true) => MaskMatch::FalseNegative,
        (true, true) => {
            let iou = c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
            if iou > iou_threshold {
                MaskMatch::TruePositive
            } else {
                MaskMatch::Missed
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: ConfusionCounts,
    pub mask_match: MaskMatch,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub wald: Interval,
    pub clopper_pearson: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLevelSummary {
    pub iou_threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
}

/// Aggregate evaluation; top-level scalars are pixel-pooled over all images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub map11: f64,
    pub auroc: f64,
    pub ci: CiReport,
    pub confusion: ConfusionCounts,
    pub macro_average: MacroAverages,
    pub mask_level: MaskLevelSummary,
    pub averaging: String,
    pub map_mode: String,
    pub threshold: f64,
    pub image_count: usize,
    pub undefined: Vec<String>,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub thresholds: Vec<f64>,
    pub iou_match_threshold: f64,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            thresholds: default_thresholds(),
            iou_match_threshold: 0.5,
            ci_level: 0.95,
        }
    }
}

/// Scores every prediction against its ground truth and builds the report and
/// the pooled curve. CIs use the image count as sample size; the
/// Clopper-Pearson success count is `round(dice * n)`.
pub fn evaluate(
    names: &[String],
    preds: &[ProbMap],
    gts: &[BinaryMask],
    cfg: &EvalConfig,
) -> Result<(MetricReport, CurvePoints)> {
    check_pairs(preds, gts)?;
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::invalid("threshold", format!("{} is outside [0, 1]", cfg.threshold)));
    }
    let mut per_image = Vec::with_capacity(preds.len());
    let mut pooled = ConfusionCounts::default();
    let mut mask_level = ConfusionCounts::default();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let bin = p.binarize(cfg.threshold);
        let c = confusion(&bin, g)?;
        let m = scalar_metrics(&c);
        let mm = mask_level_match(&bin, g, cfg.iou_match_threshold)?;
        pooled = pooled + c;
        mask_level = mask_level + mm.tallies();
        per_image.push(ImageMetrics {
            name: names.get(i).cloned().unwrap_or_else(|| format!("image_{i}")),
            iou: m.iou,
            dice: m.dice,
            precision: m.precision,
            recall: m.recall,
            confusion: c,
            mask_match: mm,
            undefined: m.undefined,
        });
    }
    let n = per_image.len();
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n as f64;
    let macro_average = MacroAverages {
        iou: mean(|m| m.iou),
        dice: mean(|m| m.dice),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
    };
    let agg = scalar_metrics(&pooled);
    let curve = pr_roc_curves(preds, gts, &cfg.thresholds)?;
    let k = (agg.dice * n as f64).round() as u64;
    let ci = CiReport {
        wald: wald_ci(agg.dice, n as u64, cfg.ci_level)?,
        clopper_pearson: clopper_pearson_ci(k, n as u64, cfg.ci_level)?,
    };
    let ml = scalar_metrics(&mask_level);
    let report = MetricReport {
        iou: agg.iou,
        dice: agg.dice,
        precision: agg.precision,
        recall: agg.recall,
        map11: map11(&curve),
        auroc: auroc(&curve),
        ci,
        confusion: pooled,
        macro_average,
        mask_level: MaskLevelSummary {
            iou_threshold: cfg.iou_match_threshold,
            counts: mask_level,
            precision: ml.precision,
            recall: ml.recall,
        },
        averaging: "pixel-pooled (micro); macro_average holds per-image means".into(),
        map_mode: "pixel-level pooled precision-recall curve, 11-point interpolation".into(),
        threshold: cfg.threshold,
        image_count: n,
        undefined: agg.undefined,
        per_image,
    };
    Ok((report, curve))
}
