mod common;

use maskdiff::codec::BinaryMask;
use maskdiff::metrics::{aggregate, pixel_auc, pixel_f1, pixel_iou, ConfusionCounts, ImageScores};
use maskdiff::Error;
use proptest::prelude::*;

#[test]
fn metric_suite_passes() {
    common::metric_suite().unwrap();
}

#[test]
fn auc_needs_both_classes() {
    let gt = BinaryMask::zeros(2, 2);
    assert!(matches!(pixel_auc(&[0.1, 0.2, 0.3, 0.4], &gt), Err(Error::SingleClass)));
    let s = ImageScores::compute("d", "x", &[0.1, 0.2, 0.3, 0.4], &gt, 0.5).unwrap();
    assert_eq!(s.auc, None);
}

#[test]
fn threshold_is_inclusive() {
    let gt = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
    assert_eq!(pixel_f1(&[0.5, 0.49], &gt, 0.5).unwrap(), 1.0);
    assert_eq!(pixel_iou(&[0.5, 0.5], &gt, 0.5).unwrap(), 0.5);
}

#[test]
fn aggregate_averages_per_image() {
    let gt = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let a = ImageScores::compute("d", "a", &[1.0, 1.0, 0.0, 0.0], &gt, 0.5).unwrap();
    let b = ImageScores::compute("d", "b", &[1.0, 0.0, 0.0, 0.0], &gt, 0.5).unwrap();
    let r = aggregate(&[a, b]).unwrap();
    let s = &r.summaries[0];
    assert_eq!(s.images, 2);
    assert!((s.f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!(aggregate(&[]).is_err());
}

/// Scores on a 1/1024 grid: every monotone map below stays strictly
/// monotone in f32, and ties occur often.
fn mask_strategy() -> impl Strategy<Value = (BinaryMask, Vec<f32>)> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec((0u16..1024).prop_map(|k| k as f32 / 1024.0), h * w),
        )
            .prop_map(move |(g, s)| (BinaryMask::from_fn(h, w, |y, x| g[y * w + x]), s))
    })
}

proptest! {
    #[test]
    fn f1_iou_identity((gt, scores) in mask_strategy(), thr in 0.01f64..0.99) {
        let c = ConfusionCounts::from_probs(&scores, &gt, thr).unwrap();
        prop_assert!((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs() < 1e-12);
        prop_assert_eq!(c.total() as usize, scores.len());
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((gt, scores) in mask_strategy()) {
        prop_assume!(gt.count_ones() > 0 && gt.count_ones() < scores.len());
        let base = pixel_auc(&scores, &gt).unwrap();
        let squashed: Vec<f32> = scores.iter().map(|s| s * 0.25 + 0.5).collect();
        let cubed: Vec<f32> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert!((pixel_auc(&squashed, &gt).unwrap() - base).abs() < 1e-9);
        prop_assert!((pixel_auc(&cubed, &gt).unwrap() - base).abs() < 1e-9);
        prop_assert!((pixel_auc(&scores, &gt).unwrap() - common::pairwise_auc(&scores, &gt)).abs() < 1e-9);
        let flipped: Vec<f32> = scores.iter().map(|s| 1.0 - s).collect();
        prop_assert!((pixel_auc(&flipped, &gt).unwrap() - (1.0 - base)).abs() < 1e-9);
    }
}
