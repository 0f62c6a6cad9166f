mod common;

use common::*;
use proptest::prelude::*;
use segens::imageio::{BinaryMask, ProbMap};
use segens::metrics::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..10_000, 0u64..10_000, 0u64..10_000, 0u64..10_000)
        .prop_filter("some positive", |(tp, fp, fn_, _)| tp + fp + fn_ > 0)
        .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
}

fn eval_set() -> impl Strategy<Value = (Vec<ProbMap>, Vec<BinaryMask>)> {
    (1usize..6, any::<u64>()).prop_map(|(n, seed)| {
        use rand::Rng;
        let mut r = rng(seed);
        let dims: Vec<(usize, usize)> = (0..n).map(|_| (r.gen_range(2..16), r.gen_range(2..16))).collect();
        let preds = dims.iter().map(|&(w, h)| random_probmap(&mut r, w, h)).collect();
        let gts = dims.iter().map(|&(w, h)| random_mask(&mut r, w, h, 0.3)).collect();
        (preds, gts)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dice_follows_from_iou(c in counts()) {
        let m = scalar_metrics(&c);
        let d = dice_from_iou(m.iou).unwrap();
        // 2i/(1+i) and 2tp/(2tp+fp+fn) are equal in exact arithmetic but round differently
        prop_assert!((d - m.dice).abs() <= 2.0 * f64::EPSILON * m.dice, "{} vs {}", d, m.dice);
    }

    #[test]
    fn confusion_counts_every_pixel(seed in any::<u64>(), w in 1usize..30, h in 1usize..30) {
        let mut r = rng(seed);
        let (p, g) = (random_mask(&mut r, w, h, 0.5), random_mask(&mut r, w, h, 0.5));
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total(), (w * h) as u64);
        prop_assert_eq!(c.tp + c.fp, p.count_ones() as u64);
        prop_assert_eq!(c.tp + c.fn_, g.count_ones() as u64);
    }

    #[test]
    fn curves_are_ordered_and_bounded((preds, gts) in eval_set()) {
        let curve = pr_roc_curves(&preds, &gts, &default_thresholds()).unwrap();
        for pair in curve.points.windows(2) {
            prop_assert!(pair[0].threshold > pair[1].threshold);
            prop_assert!(pair[0].recall <= pair[1].recall);
            prop_assert!(pair[0].fpr <= pair[1].fpr);
        }
        let (m, a) = (map11(&curve), auroc(&curve));
        prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&a));
    }

    #[test]
    fn raising_a_precision_never_lowers_map11((preds, gts) in eval_set(), pick in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let curve = pr_roc_curves(&preds, &gts, &default_thresholds()).unwrap();
        let mut better = curve.clone();
        let i = pick.index(better.points.len());
        let p = &mut better.points[i].precision;
        *p += (1.0 - *p) * bump;
        prop_assert!(map11(&better) >= map11(&curve));
    }

    #[test]
    fn report_scalars_lie_in_unit_interval((preds, gts) in eval_set()) {
        let names: Vec<String> = (0..preds.len()).map(|i| format!("img{i}")).collect();
        let (report, _) = evaluate(&names, &preds, &gts, &EvalConfig::default()).unwrap();
        for v in [report.iou, report.dice, report.precision, report.recall, report.map11, report.auroc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(report.image_count, preds.len());
        prop_assert_eq!(report.per_image.len(), preds.len());
        let ci = report.ci.clopper_pearson;
        prop_assert!(ci.lower <= ci.upper && ci.lower >= 0.0 && ci.upper <= 1.0);
    }
}

#[test]
fn curve_matches_brute_force_counts() {
    let mut r = rng(44);
    let preds: Vec<ProbMap> = (0..5).map(|_| random_probmap_8bit(&mut r, 9, 7)).collect();
    let gts: Vec<BinaryMask> = (0..5).map(|_| random_mask(&mut r, 9, 7, 0.4)).collect();
    let curve = pr_roc_curves(&preds, &gts, &default_thresholds()).unwrap();
    assert_eq!(curve.points.len(), 101);
    for pt in &curve.points {
        let mut tp = 0;
        let mut fp = 0;
        for (p, g) in preds.iter().zip(&gts) {
            for (&v, &m) in p.data().iter().zip(g.data()) {
                tp += (v >= pt.threshold && m == 1) as u64;
                fp += (v >= pt.threshold && m == 0) as u64;
            }
        }
        assert_eq!((pt.counts.tp, pt.counts.fp), (tp, fp), "threshold {}", pt.threshold);
    }
}

#[test]
fn mask_level_matching_rule() {
    let gt = BinaryMask::from_fn(4, 4, |x, _| x < 2);
    let half = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
    let empty = BinaryMask::zeros(4, 4);
    assert_eq!(mask_level_match(&gt, &gt, 0.5).unwrap(), MaskMatch::TruePositive);
    // IoU exactly 0.5 is not above the threshold
    assert_eq!(mask_level_match(&half, &gt, 0.5).unwrap(), MaskMatch::Missed);
    assert_eq!(mask_level_match(&empty, &gt, 0.5).unwrap(), MaskMatch::FalseNegative);
    assert_eq!(mask_level_match(&gt, &empty, 0.5).unwrap(), MaskMatch::FalsePositive);
    assert_eq!(mask_level_match(&empty, &empty, 0.5).unwrap(), MaskMatch::TrueNegative);
}

#[test]
fn dice_from_iou_rejects_out_of_range() {
    assert!(dice_from_iou(-0.1).is_err());
    assert!(dice_from_iou(1.1).is_err());
    assert_eq!(dice_from_iou(1.0).unwrap(), 1.0);
    assert_eq!(dice_from_iou(0.0).unwrap(), 0.0);
}

#[test]
fn report_json_has_the_headline_keys() {
    let gt = BinaryMask::from_fn(6, 6, |x, y| x + y < 6);
    let (report, _) = evaluate(&["a".into()], &[gt.to_probmap()], &[gt], &EvalConfig::default()).unwrap();
    let v = serde_json::to_value(&report).unwrap();
    for key in ["iou", "dice", "precision", "recall", "map11", "auroc", "ci"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let back: MetricReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, report);
}
