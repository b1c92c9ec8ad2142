//! Evaluation: mask AP at IoU thresholds, symmetric best Dice and difference
//! in count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{binarize, BinaryMask, GroundTruthInstance, PredictionSequence, DEFAULT_MASK_THRESHOLD};

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shape(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// `2 |a ∩ b| / (|a| + |b|)`, 0 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shape(a, b)?;
    let denom = a.area() + b.area();
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * a.intersection(b) as f64 / denom as f64
    })
}

fn check_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// A scored, binarized prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: BinaryMask,
    pub class_id: usize,
    pub score: f64,
    /// Emission step within its sequence.
    pub step: usize,
}

/// Binarized masks, arg-max classes and `stop · max class prob` scores.
pub fn detections(seq: &PredictionSequence) -> Vec<Detection> {
    seq.steps
        .iter()
        .enumerate()
        .map(|(step, p)| Detection {
            mask: binarize(&p.mask, DEFAULT_MASK_THRESHOLD),
            class_id: p.predicted_class(),
            score: p.stop_score * p.max_class_prob(),
            step,
        })
        .collect()
}

/// Detection indices by descending score, emission order on ties.
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in rank order: each detection takes the unmatched
/// same-class ground truth of highest IoU, provided that IoU reaches
/// `iou_thresh`. Returns, per detection, the matched gt and its IoU.
pub fn greedy_match(
    dets: &[Detection],
    gts: &[GroundTruthInstance],
    iou_thresh: f64,
) -> Result<Vec<Option<(usize, f64)>>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in rank_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in gts.iter().enumerate() {
            if taken[k] || gt.class_id != dets[d].class_id {
                continue;
            }
            let iou = mask_iou(&dets[d].mask, &gt.mask)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
        }
        out[d] = best;
    }
    Ok(out)
}

/// Area under the precision/recall curve with all-points interpolation,
/// from TP flags sorted by descending score.
pub fn ap_from_ranked(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(area)
}

/// One image's predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthInstance>,
}

impl ImageResult {
    pub fn new(seq: &PredictionSequence, gts: &[GroundTruthInstance]) -> Self {
        ImageResult {
            detections: detections(seq),
            gts: gts.to_vec(),
        }
    }
}

/// AP of `class_id` over a dataset; `None` when the class has no ground truth.
pub fn average_precision(
    images: &[ImageResult],
    class_id: usize,
    iou_thresh: f64,
    exec: Exec,
) -> Result<Option<f64>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {iou_thresh} outside (0, 1]")));
    }
    let per_image = exec
        .map(images, |im| greedy_match(&im.detections, &im.gts, iou_thresh))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    // (score, image, step, tp), ranked over the whole dataset
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (i, (im, matches)) in images.iter().zip(&per_image).enumerate() {
        num_gt += im.gts.iter().filter(|g| g.class_id == class_id).count();
        for (d, m) in im.detections.iter().zip(matches) {
            if d.class_id == class_id {
                ranked.push((d.score, i, d.step, m.is_some()));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let tp: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Ok(ap_from_ranked(&tp, num_gt))
}

/// `mean_{a ∈ A} max_{b ∈ B} Dice(a, b)`.
pub fn best_dice(a: &[BinaryMask], b: &[BinaryMask]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("best Dice needs two nonempty mask sets".into()));
    }
    let mut sum = 0.0;
    for x in a {
        let mut best = 0.0f64;
        for y in b {
            best = best.max(dice(x, y)?);
        }
        sum += best;
    }
    Ok(sum / a.len() as f64)
}

pub fn symmetric_best_dice(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    Ok(best_dice(preds, gts)?.min(best_dice(gts, preds)?))
}

/// Per-image SBD. An image with predictions but no ground truth (or the
/// reverse) scores 0; one with neither scores 1.
pub fn image_sbd(im: &ImageResult) -> Result<f64> {
    match (im.detections.is_empty(), im.gts.is_empty()) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        (false, false) => {
            let p: Vec<BinaryMask> = im.detections.iter().map(|d| d.mask.clone()).collect();
            let g: Vec<BinaryMask> = im.gts.iter().map(|g| g.mask.clone()).collect();
            symmetric_best_dice(&p, &g)
        }
    }
}

/// Mean signed and absolute `n̂ − n` over `(n̂, n)` pairs.
pub fn difference_in_count(counts: &[(usize, usize)]) -> (f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    let n = counts.len() as f64;
    let diffs = counts.iter().map(|&(p, g)| p as f64 - g as f64);
    let signed = diffs.clone().sum::<f64>() / n;
    let absolute = diffs.map(f64::abs).sum::<f64>() / n;
    (signed, absolute)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub num_images: usize,
    pub iou_thresholds: Vec<f64>,
    /// `per_class_ap[c][j]`: AP of class `c` at threshold `j`; `None` when the
    /// class has no ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub mean_ap: Vec<Option<f64>>,
    pub sbd: f64,
    pub dic_signed: f64,
    pub dic_abs: f64,
}

impl EvalResult {
    pub fn ap_at(&self, iou_thresh: f64) -> Option<f64> {
        let j = self.iou_thresholds.iter().position(|&t| (t - iou_thresh).abs() < 1e-12)?;
        self.mean_ap[j]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// One row per class (plus a `mean` row), one column per threshold.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let fmt = |v: &Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out = String::from("class");
        for t in &self.iou_thresholds {
            let _ = write!(out, ",ap@{t}");
        }
        out.push('\n');
        for (c, row) in self.per_class_ap.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            out.push_str(&name);
            for v in row {
                let _ = write!(out, ",{}", fmt(v));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for v in &self.mean_ap {
            let _ = write!(out, ",{}", fmt(v));
        }
        out.push('\n');
        out
    }
}

/// Full evaluation of one prediction sequence per image.
pub fn evaluate(
    preds: &[PredictionSequence],
    gts: &[Vec<GroundTruthInstance>],
    num_classes: usize,
    iou_thresholds: &[f64],
    exec: Exec,
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction sequences for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let images: Vec<ImageResult> = preds.iter().zip(gts).map(|(p, g)| ImageResult::new(p, g)).collect();
    evaluate_images(&images, num_classes, iou_thresholds, exec)
}

pub fn evaluate_images(
    images: &[ImageResult],
    num_classes: usize,
    iou_thresholds: &[f64],
    exec: Exec,
) -> Result<EvalResult> {
    let mut per_class_ap = vec![Vec::with_capacity(iou_thresholds.len()); num_classes];
    let mut mean_ap = Vec::with_capacity(iou_thresholds.len());
    for &t in iou_thresholds {
        let mut defined = Vec::new();
        for (c, row) in per_class_ap.iter_mut().enumerate() {
            let ap = average_precision(images, c, t, exec)?;
            defined.extend(ap);
            row.push(ap);
        }
        mean_ap.push((!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64));
    }
    let sbds = exec.map(images, image_sbd).into_iter().collect::<Result<Vec<_>>>()?;
    let sbd = if sbds.is_empty() {
        0.0
    } else {
        sbds.iter().sum::<f64>() / sbds.len() as f64
    };
    let counts: Vec<(usize, usize)> = images.iter().map(|im| (im.detections.len(), im.gts.len())).collect();
    let (dic_signed, dic_abs) = difference_in_count(&counts);
    Ok(EvalResult {
        num_images: images.len(),
        iou_thresholds: iou_thresholds.to_vec(),
        per_class_ap,
        mean_ap,
        sbd,
        dic_signed,
        dic_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, InstancePrediction, SoftMask};
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, cells: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::filled(h, w, false);
        for &(r, c) in cells {
            m.set(r, c, true);
        }
        m
    }

    fn rect(r0: usize, c0: usize, r1: usize, c1: usize) -> BinaryMask {
        let cells: Vec<_> = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).collect();
        mask(16, 16, &cells)
    }

    fn det(m: BinaryMask, class_id: usize, score: f64, step: usize) -> Detection {
        Detection {
            mask: m,
            class_id,
            score,
            step,
        }
    }

    fn gt(m: BinaryMask, class_id: usize) -> GroundTruthInstance {
        GroundTruthInstance::from_mask(m, class_id).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let full = BinaryMask::filled(2, 2, true);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &mask(2, 2, &[(1, 0)])).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &full).unwrap(), 0.5);
        assert_eq!(mask_iou(&BinaryMask::filled(2, 2, false), &BinaryMask::filled(2, 2, false)).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::filled(3, 2, false)).is_err());
    }

    #[test]
    fn hand_ap_case() {
        // TP, FP, TP by rank with two ground truths
        let ap = ap_from_ranked(&[true, false, true], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(ap_from_ranked(&[], 0), None);
        assert_eq!(ap_from_ranked(&[false, false], 3), Some(0.0));
    }

    #[test]
    fn hand_ap_case_through_matching() {
        let (a, b) = (rect(0, 0, 4, 4), rect(8, 8, 12, 12));
        let im = ImageResult {
            detections: vec![
                det(a.clone(), 0, 0.9, 0),
                det(rect(0, 12, 2, 16), 0, 0.8, 1),
                det(b.clone(), 0, 0.7, 2),
            ],
            gts: vec![gt(a, 0), gt(b, 0)],
        };
        let ap = average_precision(&[im], 0, 0.5, Exec::Sequential).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_background() {
        let gts = vec![gt(rect(0, 0, 4, 4), 0), gt(rect(8, 8, 12, 12), 1)];
        let perfect = ImageResult {
            detections: gts.iter().enumerate().map(|(i, g)| det(g.mask.clone(), g.class_id, 0.5, i)).collect(),
            gts: gts.clone(),
        };
        for t in [0.1, 0.5, 0.95, 1.0] {
            let r = evaluate_images(std::slice::from_ref(&perfect), 2, &[t], Exec::Sequential).unwrap();
            assert_eq!(r.mean_ap, vec![Some(1.0)]);
            assert_eq!(r.sbd, 1.0);
            assert_eq!((r.dic_signed, r.dic_abs), (0.0, 0.0));
        }
        let bg = ImageResult {
            detections: vec![det(rect(13, 0, 16, 3), 0, 0.9, 0), det(rect(13, 5, 16, 8), 1, 0.8, 1)],
            gts,
        };
        let r = evaluate_images(&[bg], 3, &[0.5], Exec::Sequential).unwrap();
        assert_eq!(r.mean_ap, vec![Some(0.0)]);
        assert_eq!(r.per_class_ap[2], vec![None]);
    }

    #[test]
    fn duplicate_is_not_a_second_tp() {
        let a = rect(0, 0, 4, 4);
        let dets = vec![det(a.clone(), 0, 0.9, 0), det(a.clone(), 0, 0.8, 1)];
        let m = greedy_match(&dets, &[gt(a, 0)], 0.5).unwrap();
        assert!(m[0].is_some() && m[1].is_none());
    }

    #[test]
    fn sbd_cases() {
        let (a, b) = (rect(0, 0, 4, 4), rect(8, 8, 12, 12));
        let set = vec![a.clone(), b.clone()];
        assert_eq!(symmetric_best_dice(&set, &set).unwrap(), 1.0);
        assert_eq!(symmetric_best_dice(&[rect(0, 12, 2, 16)], &set).unwrap(), 0.0);
        assert_eq!(symmetric_best_dice(std::slice::from_ref(&a), &set).unwrap(), 0.5);
        assert!(symmetric_best_dice(&[], &set).is_err());
    }

    #[test]
    fn dic_cases() {
        assert_eq!(difference_in_count(&[(3, 3)]), (0.0, 0.0));
        assert_eq!(difference_in_count(&[(5, 3)]), (2.0, 2.0));
        assert_eq!(difference_in_count(&[(3, 2), (1, 2)]), (0.0, 1.0));
    }

    #[test]
    fn detections_from_sequence() {
        let mut soft = SoftMask::filled(2, 2, 0.2);
        soft.set(0, 0, 0.7);
        let seq = PredictionSequence {
            steps: vec![InstancePrediction {
                mask: soft,
                bbox: BBox([0.0; 4]),
                class_probs: vec![0.1, 0.6, 0.3],
                stop_score: 0.5,
            }],
        };
        let d = &detections(&seq)[0];
        assert_eq!(d.class_id, 1);
        assert!((d.score - 0.3).abs() < 1e-15);
        assert_eq!(d.mask.area(), 1);
    }

    #[test]
    fn csv_layout() {
        let r = EvalResult {
            num_images: 1,
            iou_thresholds: vec![0.5, 0.75],
            per_class_ap: vec![vec![Some(1.0), Some(0.5)], vec![None, None]],
            mean_ap: vec![Some(1.0), Some(0.5)],
            sbd: 1.0,
            dic_signed: 0.0,
            dic_abs: 0.0,
        };
        let csv = r.to_csv(&["circle".into(), "square".into()]);
        assert_eq!(
            csv,
            "class,ap@0.5,ap@0.75\ncircle,1.000000,0.500000\nsquare,,\nmean,1.000000,0.500000\n"
        );
        assert_eq!(r.ap_at(0.75), Some(0.5));
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), 36).prop_map(|d| BinaryMask::from_vec(6, 6, d).unwrap())
    }

    fn arb_images() -> impl Strategy<Value = Vec<ImageResult>> {
        let det_s = (arb_mask(), 0usize..2, 0.0f64..1.0);
        let gt_s = (arb_mask(), 0usize..2).prop_filter("nonempty", |(m, _)| !m.is_empty());
        proptest::collection::vec(
            (proptest::collection::vec(det_s, 0..4), proptest::collection::vec(gt_s, 0..3)),
            1..4,
        )
        .prop_map(|ims| {
            ims.into_iter()
                .map(|(ds, gs)| ImageResult {
                    detections: ds
                        .into_iter()
                        .enumerate()
                        .map(|(i, (m, c, s))| det(m, c, s, i))
                        .collect(),
                    gts: gs.into_iter().map(|(m, c)| gt(m, c)).collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_rank(images in arb_images(), t in 0.1f64..0.9) {
            let warped: Vec<ImageResult> = images
                .iter()
                .map(|im| ImageResult {
                    detections: im
                        .detections
                        .iter()
                        .map(|d| Detection { score: (3.0 * d.score).exp() + 1.0, ..d.clone() })
                        .collect(),
                    gts: im.gts.clone(),
                })
                .collect();
            let a = evaluate_images(&images, 2, &[t], Exec::Sequential).unwrap();
            let b = evaluate_images(&warped, 2, &[t], Exec::Sequential).unwrap();
            prop_assert_eq!(a.per_class_ap, b.per_class_ap);
            for ap in a.mean_ap.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(ap));
            }
            prop_assert!((0.0..=1.0).contains(&a.sbd));
        }

        #[test]
        fn sbd_is_symmetric(a in proptest::collection::vec(arb_mask(), 1..4),
                            b in proptest::collection::vec(arb_mask(), 1..4)) {
            prop_assert_eq!(symmetric_best_dice(&a, &b).unwrap(), symmetric_best_dice(&b, &a).unwrap());
        }

        #[test]
        fn iou_bounds_dice(a in arb_mask(), b in arb_mask(), t in 0.05f64..1.0) {
            let iou = mask_iou(&a, &b).unwrap();
            if iou >= t {
                prop_assert!(dice(&a, &b).unwrap() >= 2.0 * t / (1.0 + t) - 1e-12);
            }
        }
    }
}
