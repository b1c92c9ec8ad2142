use proptest::prelude::*;

use seqseg::objective::{mask_loss, stop_targets, total_loss, LossWeights};
use seqseg::trainer::{curriculum_filter, training_steps};
use seqseg::types::{BBox, BinaryMask, GroundTruthInstance, InstancePrediction, PredictionSequence, SoftMask};

const H: usize = 6;
const W: usize = 6;

fn arb_gt() -> impl Strategy<Value = GroundTruthInstance> {
    (proptest::collection::vec(any::<bool>(), H * W), 0usize..3).prop_filter_map("empty mask", |(bits, c)| {
        let mask = BinaryMask::from_vec(H, W, bits).ok()?;
        GroundTruthInstance::from_mask(mask, c).ok()
    })
}

fn arb_pred() -> impl Strategy<Value = InstancePrediction> {
    (
        proptest::collection::vec(0.0f64..1.0, H * W),
        proptest::array::uniform4(0.0f64..1.0),
        proptest::collection::vec(0.01f64..1.0, 3),
        0.01f64..0.99,
    )
        .prop_map(|(m, b, c, s)| {
            let z: f64 = c.iter().sum();
            InstancePrediction {
                mask: SoftMask::from_vec(H, W, m).unwrap(),
                bbox: BBox(b),
                class_probs: c.iter().map(|x| x / z).collect(),
                stop_score: s,
            }
        })
}

fn arb_problem() -> impl Strategy<Value = (PredictionSequence, Vec<GroundTruthInstance>, Vec<usize>)> {
    (proptest::collection::vec(arb_pred(), 1..5), proptest::collection::vec(arb_gt(), 0..5)).prop_flat_map(
        |(steps, gts)| {
            let n = gts.len();
            let perm = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
            (Just(PredictionSequence { steps }), Just(gts), perm)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_ground_truth_order((preds, gts, perm) in arb_problem()) {
        let w = LossWeights::default();
        let a = total_loss(&preds, &gts, &w).unwrap();
        let shuffled: Vec<_> = perm.iter().map(|&i| gts[i].clone()).collect();
        let b = total_loss(&preds, &shuffled, &w).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-9);
        prop_assert!((a.l_m - b.l_m).abs() < 1e-9);
    }

    #[test]
    fn matching_is_one_to_one_and_no_worse_than_identity((preds, gts, _) in arb_problem()) {
        let loss = total_loss(&preds, &gts, &LossWeights::default()).unwrap();
        prop_assert!(loss.total >= 0.0 && loss.l_m >= 0.0);
        let Some(delta) = loss.assignment else {
            prop_assert!(gts.is_empty());
            return Ok(());
        };
        let pairs = delta.pairs();
        prop_assert_eq!(pairs.len(), preds.len().min(gts.len()));
        let identity: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (i, i)).collect();
        let diag = seqseg::AssignmentMatrix::from_pairs(preds.len(), gts.len(), &identity).unwrap();
        prop_assert!(mask_loss(&preds, &gts, &delta) <= mask_loss(&preds, &gts, &diag) + 1e-12);
    }

    #[test]
    fn filter_keeps_the_largest(gts in proptest::collection::vec(arb_gt(), 0..7), k in 1usize..5) {
        let kept = curriculum_filter(&gts, k);
        prop_assert_eq!(kept.len(), gts.len().min(k));
        let smallest_kept = kept.iter().map(|g| g.mask.area()).min().unwrap_or(usize::MAX);
        let mut dropped = gts.clone();
        for g in &kept {
            let i = dropped.iter().position(|d| d == g).unwrap();
            dropped.remove(i);
        }
        prop_assert!(dropped.iter().all(|d| d.mask.area() <= smallest_kept));
    }

    #[test]
    fn unroll_length_carries_one_stop_when_untruncated(n in 0usize..8, k in 1usize..6) {
        let t = training_steps(n, k);
        let targets = stop_targets(t, n.min(k));
        let zeros = targets.iter().filter(|&&y| y == 0.0).count();
        prop_assert!(t <= k + 1);
        prop_assert_eq!(zeros, usize::from(n <= k));
        prop_assert_eq!(targets.len() - zeros, n.min(k));
    }
}


fn arb_record() -> impl Strategy<Value = seqseg::data::DatasetRecord> {
    (0u64..500, 1usize..4).prop_map(|(seed, max_objects)| {
        let spec = seqseg::data::ShapesSpec {
            height: 32,
            width: 24,
            max_objects,
            seed,
            ..Default::default()
        };
        seqseg::data::generate_dataset(&spec, 1, seqseg::parallel::Exec::Sequential).unwrap().remove(0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mirror_twice_is_identity(rec in arb_record(), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        use seqseg::data::flip_permute;
        let once = flip_permute(&rec, true, [perm[0], perm[1], perm[2]]).unwrap();
        let mut inverse = [0; 3];
        for (k, &c) in perm.iter().enumerate() {
            inverse[c] = k;
        }
        let back = flip_permute(&once, true, inverse).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn mirror_moves_pixels_and_boxes(rec in arb_record()) {
        let out = seqseg::data::flip_permute(&rec, true, [2, 0, 1]).unwrap();
        let (h, w) = (rec.image.height, rec.image.width);
        for y in 0..h {
            for x in 0..w {
                let a = rec.image.pixel(y, w - 1 - x);
                prop_assert_eq!(out.image.pixel(y, x), [a[2], a[0], a[1]]);
            }
        }
        for (a, b) in rec.instances.iter().zip(&out.instances) {
            prop_assert_eq!(a.mask.area(), b.mask.area());
            prop_assert_eq!(a.class_id, b.class_id);
            let [x1, y1, x2, y2] = a.bbox.0;
            let [u1, v1, u2, v2] = b.bbox.0;
            prop_assert!((u1 - (1.0 - x2)).abs() < 1e-12 && (u2 - (1.0 - x1)).abs() < 1e-12);
            prop_assert!((v1 - y1).abs() < 1e-12 && (v2 - y2).abs() < 1e-12);
        }
    }
}
