//! Plausibility (EBPG, IoU, Bbox) and faithfulness (deletion/insertion) metrics
//! for saliency maps, plus segmentation scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::imaging::{bbox_of_mask, gaussian_blur, topk_binarize, BinaryMask, ImageTensor, SaliencyMap};
use crate::model::{ClassScorer, ScoreRegion, SegmentationModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityScores {
    pub ebpg: f64,
    pub iou: f64,
    pub bbox: f64,
}

/// Scores the min-max normalized saliency against a ground-truth mask. IoU and
/// Bbox binarize the saliency to its top-|GT| pixels.
pub fn plausibility_metrics(sal: &SaliencyMap, gt: &BinaryMask) -> Result<PlausibilityScores, MetricError> {
    if sal.height != gt.height() || sal.width != gt.width() {
        return Err(MetricError::ShapeMismatch);
    }
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let norm = sal.min_max_normalized();
    let total = norm.energy();
    if total <= 0.0 {
        return Err(MetricError::ZeroEnergy);
    }
    let inside: f64 = norm.values.iter().zip(gt.bits()).filter(|(_, b)| **b).map(|(v, _)| v).sum();
    let top = topk_binarize(&norm, gt.count())?;
    let inter = top.intersection(gt).count();
    let union = top.union(gt).count();
    let bbox = bbox_of_mask(&top)?.iou(&bbox_of_mask(gt)?);
    Ok(PlausibilityScores { ebpg: inside / total, iou: inter as f64 / union as f64, bbox })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Deletion,
    Insertion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub kind: CurveKind,
    pub xs: Vec<f64>,
    pub hs: Vec<f64>,
    pub auc: f64,
}

impl FaithfulnessCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,h\n");
        for (x, h) in self.xs.iter().zip(&self.hs) {
            let _ = writeln!(out, "{x},{h}");
        }
        out
    }
}

/// Trapezoid rule over `(xs, hs)`.
pub fn trapezoid_auc(xs: &[f64], hs: &[f64]) -> f64 {
    xs.windows(2)
        .zip(hs.windows(2))
        .map(|(x, h)| (x[1] - x[0]) * (h[0] + h[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessConfig {
    /// Number of steps `n`; derived from `pixels_per_step` when absent.
    pub steps: Option<usize>,
    /// Pixels `N` changed per step; derived from `steps` when absent.
    pub pixels_per_step: Option<usize>,
    /// Sigma of the blurred insertion baseline.
    pub blur_sigma: f64,
    pub region: ScoreRegion,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        Self { steps: None, pixels_per_step: None, blur_sigma: 5.0, region: ScoreRegion::FrozenArgmax }
    }
}

impl FaithfulnessConfig {
    /// Effective `(n, N)` for an image of `pixels` pixels. `n` never exceeds the
    /// number of steps needed to cover the image, so the final step reaches x = 1
    /// with every pixel changed.
    pub fn resolve(&self, pixels: usize) -> Result<(usize, usize), MetricError> {
        if pixels == 0 {
            return Err(MetricError::ShapeMismatch);
        }
        let (n, per) = match (self.steps, self.pixels_per_step) {
            (Some(0), _) | (_, Some(0)) => return Err(MetricError::InvalidConfig("steps must be positive".into())),
            (None, None) => (100, pixels.div_ceil(100)),
            (Some(n), None) => (n, pixels.div_ceil(n)),
            (None, Some(per)) => (pixels.div_ceil(per), per),
            (Some(n), Some(per)) => (n, per),
        };
        Ok((n.min(pixels.div_ceil(per)), per))
    }
}

fn run_curve(
    kind: CurveKind,
    scorer: &ClassScorer,
    start: &ImageTensor,
    source: &ImageTensor,
    order: &[usize],
    n: usize,
    per: usize,
) -> Result<FaithfulnessCurve, MetricError> {
    let plane = start.plane_len();
    let channels = start.channels();
    let mut data = start.data().to_vec();
    let mut xs = vec![0.0];
    let mut hs = vec![scorer.score(start)?];
    for i in 1..=n {
        let from = ((i - 1) * per).min(plane);
        let to = if i == n { plane } else { (i * per).min(plane) };
        for &p in &order[from..to] {
            for c in 0..channels {
                data[c * plane + p] = match kind {
                    CurveKind::Deletion => 0.0,
                    CurveKind::Insertion => source.data()[c * plane + p],
                };
            }
        }
        let img = ImageTensor::new(channels, start.height(), start.width(), data.clone(), start.range())?;
        xs.push(i as f64 / n as f64);
        hs.push(scorer.score(&img)?);
    }
    let auc = trapezoid_auc(&xs, &hs);
    Ok(FaithfulnessCurve { kind, xs, hs, auc })
}

/// Deletion and insertion curves for `sal`. Pixels are ranked by saliency,
/// ties in row-major order.
pub fn faithfulness_curves(
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    sal: &SaliencyMap,
    category: u64,
    cfg: &FaithfulnessConfig,
) -> Result<(FaithfulnessCurve, FaithfulnessCurve), MetricError> {
    if sal.height != img.height() || sal.width != img.width() {
        return Err(MetricError::ShapeMismatch);
    }
    let (n, per) = cfg.resolve(img.plane_len())?;
    let order = sal.ranked_indices();
    let scorer = ClassScorer::new(model, img, category, cfg.region)?;
    let deletion = run_curve(CurveKind::Deletion, &scorer, img, img, &order, n, per)?;
    let blurred = gaussian_blur(img, cfg.blur_sigma)?;
    let insertion = run_curve(CurveKind::Insertion, &scorer, &blurred, img, &order, n, per)?;
    Ok((deletion, insertion))
}

/// `1 - 2|P∩GT| / (|P|+|GT|)`; two empty masks score 0.
pub fn dice_loss(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    if !pred.same_shape(gt) {
        return Err(MetricError::ShapeMismatch);
    }
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * pred.intersection(gt).count() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationIou {
    /// IoU in percent per class; `None` when the class appears in neither map.
    pub per_class: BTreeMap<u64, Option<f64>>,
    /// Mean over classes with a value, in percent.
    pub miou: f64,
}

/// Per-class IoU over label maps. Pixels whose ground truth is `void_label` are ignored.
pub fn segmentation_iou(
    pred: &[u64],
    gt: &[u64],
    categories: &[u64],
    void_label: Option<u64>,
) -> Result<SegmentationIou, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let classes: BTreeSet<u64> = categories.iter().copied().filter(|c| Some(*c) != void_label).collect();
    let mut inter: BTreeMap<u64, usize> = BTreeMap::new();
    let mut union: BTreeMap<u64, usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        if Some(*g) == void_label {
            continue;
        }
        for &c in &classes {
            let (ip, ig) = (*p == c, *g == c);
            if ip && ig {
                *inter.entry(c).or_default() += 1;
            }
            if ip || ig {
                *union.entry(c).or_default() += 1;
            }
        }
    }
    let per_class: BTreeMap<u64, Option<f64>> = classes
        .iter()
        .map(|c| {
            let u = union.get(c).copied().unwrap_or(0);
            let iou = (u > 0).then(|| 100.0 * inter.get(c).copied().unwrap_or(0) as f64 / u as f64);
            (*c, iou)
        })
        .collect();
    let included: Vec<f64> = per_class.values().flatten().copied().collect();
    if included.is_empty() {
        return Err(MetricError::NoClasses);
    }
    let miou = included.iter().sum::<f64>() / included.len() as f64;
    Ok(SegmentationIou { per_class, miou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;
    use crate::model::{BrightnessToyModel, ConstantModel};
    use proptest::prelude::*;

    fn block(h: usize, w: usize, r: usize, c: usize, size: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (r..r + size).contains(&y) && (c..c + size).contains(&x))
    }

    fn sal_from(mask: &BinaryMask) -> SaliencyMap {
        SaliencyMap::new(1, mask.height(), mask.width(), mask.to_plane()).unwrap()
    }

    #[test]
    fn perfect_saliency() {
        let gt = block(4, 4, 1, 1, 2);
        let s = plausibility_metrics(&sal_from(&gt), &gt).unwrap();
        assert_eq!((s.ebpg, s.iou, s.bbox), (1.0, 1.0, 1.0));
    }

    #[test]
    fn uniform_saliency_ebpg() {
        let gt = block(4, 4, 0, 0, 2);
        let sal = SaliencyMap::new(1, 4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(plausibility_metrics(&sal, &gt).unwrap().ebpg, 0.25);
    }

    #[test]
    fn one_seventh_iou() {
        let gt = block(4, 4, 1, 1, 2);
        let sal = sal_from(&block(4, 4, 0, 0, 2));
        let s = plausibility_metrics(&sal, &gt).unwrap();
        assert!((s.iou - 1.0 / 7.0).abs() < 1e-12);
        assert!((s.bbox - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(s.ebpg, 0.25);
    }

    #[test]
    fn plausibility_errors() {
        let sal = SaliencyMap::new(1, 2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(plausibility_metrics(&sal, &BinaryMask::empty(2, 2)), Err(MetricError::EmptyGroundTruth)));
        assert!(matches!(plausibility_metrics(&sal, &BinaryMask::full(2, 2)), Err(MetricError::ZeroEnergy)));
        assert!(matches!(plausibility_metrics(&sal, &BinaryMask::full(3, 2)), Err(MetricError::ShapeMismatch)));
    }

    #[test]
    fn dice_examples() {
        let a = block(4, 4, 0, 0, 2);
        assert_eq!(dice_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(dice_loss(&a, &block(4, 4, 2, 2, 2)).unwrap(), 1.0);
        assert_eq!(dice_loss(&a, &block(4, 4, 1, 1, 2)).unwrap(), 0.75);
        assert_eq!(dice_loss(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn hand_stepped_deletion() {
        let img = ImageTensor::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0], RangeTag::Unit).unwrap();
        let sal = SaliencyMap::new(1, 2, 2, img.data().to_vec()).unwrap();
        let cfg = FaithfulnessConfig { pixels_per_step: Some(1), region: ScoreRegion::WholeImage, ..Default::default() };
        let (del, ins) = faithfulness_curves(&BrightnessToyModel::new(1), &img, &sal, 1, &cfg).unwrap();
        assert_eq!(del.hs, vec![0.25, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(del.xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(del.auc, 0.03125);
        assert_eq!(*ins.hs.last().unwrap(), 0.25);
        assert!(del.to_csv().starts_with("x,h\n0,0.25\n0.25,0\n"));
    }

    #[test]
    fn zero_image_curves_are_flat() {
        let img = ImageTensor::new(3, 5, 5, vec![0.0; 75], RangeTag::Unit).unwrap();
        let sal = SaliencyMap::new(1, 5, 5, (0..25).map(|i| i as f64).collect()).unwrap();
        let model = BrightnessToyModel::new(3);
        let (del, ins) = faithfulness_curves(&model, &img, &sal, 1, &FaithfulnessConfig::default()).unwrap();
        assert!(del.hs.iter().chain(&ins.hs).all(|h| *h == 0.0));
        assert_eq!(del.auc, ins.auc);
        assert_eq!(del.xs.len(), 26);
    }

    #[test]
    fn constant_curve_auc_equals_constant() {
        let img = ImageTensor::new(1, 4, 4, vec![0.5; 16], RangeTag::Unit).unwrap();
        let sal = SaliencyMap::new(1, 4, 4, vec![1.0; 16]).unwrap();
        let cfg = FaithfulnessConfig { steps: Some(3), ..Default::default() };
        let (del, _) = faithfulness_curves(&ConstantModel::new(0.6, 1).unwrap(), &img, &sal, 1, &cfg).unwrap();
        assert_eq!(del.xs.len(), 4);
        assert!((del.auc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn step_resolution() {
        let d = FaithfulnessConfig::default();
        assert_eq!(d.resolve(700 * 700).unwrap(), (100, 4900));
        assert_eq!(d.resolve(4).unwrap(), (4, 1));
        let only_n = FaithfulnessConfig { pixels_per_step: Some(3), ..d };
        assert_eq!(only_n.resolve(10).unwrap(), (4, 3));
        let both = FaithfulnessConfig { steps: Some(2), pixels_per_step: Some(3), ..d };
        assert_eq!(both.resolve(10).unwrap(), (2, 3));
    }

    #[test]
    fn segmentation_iou_examples() {
        let a: Vec<u64> = block(4, 4, 0, 0, 2).bits().iter().map(|b| *b as u64).collect();
        let b: Vec<u64> = block(4, 4, 1, 1, 2).bits().iter().map(|b| *b as u64).collect();
        let r = segmentation_iou(&a, &b, &[1], None).unwrap();
        assert!((r.miou - 100.0 / 7.0).abs() < 1e-9);
        let same = segmentation_iou(&a, &a, &[0, 1], None).unwrap();
        assert_eq!(same.miou, 100.0);
        let gt_only = segmentation_iou(&[0, 0], &[0, 2], &[0, 2, 3], None).unwrap();
        assert_eq!(gt_only.per_class[&2], Some(0.0));
        assert_eq!(gt_only.per_class[&3], None);
        assert_eq!(gt_only.miou, 25.0);
        let voided = segmentation_iou(&[1, 1], &[1, 255], &[1], Some(255)).unwrap();
        assert_eq!(voided.miou, 100.0);
        assert!(matches!(segmentation_iou(&[0], &[0], &[5], None), Err(MetricError::NoClasses)));
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), 36).prop_map(|bits| BinaryMask::new(6, 6, bits).unwrap())
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_zero_iff_equal(a in mask_strategy(), b in mask_strategy()) {
            prop_assert_eq!(dice_loss(&a, &b).unwrap(), dice_loss(&b, &a).unwrap());
            if !a.is_empty() {
                prop_assert_eq!(dice_loss(&a, &b).unwrap() == 0.0, a == b);
            }
        }

        #[test]
        fn plausibility_in_unit_range(
            gt in mask_strategy(),
            vals in proptest::collection::vec(0.0f64..1.0, 36),
        ) {
            prop_assume!(!gt.is_empty());
            let sal = SaliencyMap::new(1, 6, 6, vals).unwrap();
            if let Ok(s) = plausibility_metrics(&sal, &gt) {
                for v in [s.ebpg, s.iou, s.bbox] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn seg_iou_order_invariant(
            pred in proptest::collection::vec(0u64..4, 20),
            gt in proptest::collection::vec(0u64..4, 20),
        ) {
            let a = segmentation_iou(&pred, &gt, &[0, 1, 2, 3], None);
            let b = segmentation_iou(&pred, &gt, &[3, 1, 0, 2], None);
            prop_assert_eq!(a.ok(), b.ok());
        }

        #[test]
        fn deletion_non_increasing_for_brightness(vals in proptest::collection::vec(0.0f64..1.0, 16)) {
            let img = ImageTensor::new(1, 4, 4, vals.clone(), RangeTag::Unit).unwrap();
            let sal = SaliencyMap::new(1, 4, 4, vals).unwrap();
            let cfg = FaithfulnessConfig { pixels_per_step: Some(2), region: ScoreRegion::WholeImage, ..Default::default() };
            let (del, _) = faithfulness_curves(&BrightnessToyModel::new(1), &img, &sal, 1, &cfg).unwrap();
            for w in del.hs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
