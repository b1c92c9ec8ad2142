//! Object-ordering and error analyses over predicted sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::axis_plan;
use crate::error::{Error, Result};
use crate::metrics::{greedy_match, mask_iou, Detection};
use crate::tensor::Tensor;
use crate::types::{center_of_mass, BinaryMask, GroundTruthInstance};

/// Kendall rank correlation `(P − Q) / (N(N−1)/2)` between two orderings of
/// the same distinct items. `O(N log N)` via merge-sort inversion counting.
pub fn kendall_tau(original: &[usize], permuted: &[usize]) -> Result<f64> {
    let n = original.len();
    if n < 2 {
        return Err(Error::EmptyInput("Kendall tau needs at least two items".into()));
    }
    let mut a = original.to_vec();
    let mut b = permuted.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b || a.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Shape("orders must be permutations of the same distinct items".into()));
    }
    // rank of each item in `permuted`, read off in `original` order
    let pos: BTreeMap<usize, usize> = permuted.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut seq: Vec<usize> = original.iter().map(|x| pos[x]).collect();
    let discordant = count_inversions(&mut seq) as f64;
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((pairs - 2.0 * discordant) / pairs)
}

fn count_inversions(v: &mut [usize]) -> usize {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += mid - i;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortStrategy {
    R2l,
    L2r,
    B2t,
    T2b,
    L2s,
    S2l,
}

impl SortStrategy {
    pub const ALL: [SortStrategy; 6] = [
        SortStrategy::R2l,
        SortStrategy::L2r,
        SortStrategy::B2t,
        SortStrategy::T2b,
        SortStrategy::L2s,
        SortStrategy::S2l,
    ];

    pub fn reverse(self) -> Self {
        use SortStrategy::*;
        match self {
            R2l => L2r,
            L2r => R2l,
            B2t => T2b,
            T2b => B2t,
            L2s => S2l,
            S2l => L2s,
        }
    }

    pub fn name(self) -> &'static str {
        use SortStrategy::*;
        match self {
            R2l => "r2l",
            L2r => "l2r",
            B2t => "b2t",
            T2b => "t2b",
            L2s => "l2s",
            S2l => "s2l",
        }
    }

    /// Key sorted in ascending order: r2l is descending column, b2t
    /// descending row, l2s descending area.
    fn key(self, mask: &BinaryMask) -> f64 {
        let (row, col) = center_of_mass(mask).unwrap_or((0.0, 0.0));
        let area = mask.area() as f64;
        use SortStrategy::*;
        match self {
            R2l => -col,
            L2r => col,
            B2t => -row,
            T2b => row,
            L2s => -area,
            S2l => area,
        }
    }
}

impl fmt::Display for SortStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SortStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SortStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sort strategy {s:?}")))
    }
}

/// Indices of `scores` sorted ascending, emission index breaking ties.
fn order_by(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// τ between emission order and the order `strategy` would emit the
/// nonempty masks in.
pub fn strategy_correlation(masks: &[BinaryMask], strategy: SortStrategy) -> Result<f64> {
    let kept: Vec<&BinaryMask> = masks.iter().filter(|m| !m.is_empty()).collect();
    if kept.len() < 2 {
        return Err(Error::EmptyInput("need at least two nonempty masks".into()));
    }
    let keys: Vec<f64> = kept.iter().map(|m| strategy.key(m)).collect();
    let emitted: Vec<usize> = (0..kept.len()).collect();
    kendall_tau(&emitted, &order_by(&keys))
}

/// Direction counts for one ordered pair of classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionCounts {
    pub occurrences: usize,
    pub r2l: usize,
    pub l2r: usize,
    pub b2t: usize,
    pub t2b: usize,
    pub l2s: usize,
    pub s2l: usize,
}

/// One nonempty emitted object: class, binarized mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedObject {
    pub class_id: usize,
    pub mask: BinaryMask,
}

/// Consecutive-pair direction statistics keyed by `(first class, second
/// class)`. A pair moves horizontally when `|Δcol| > threshold · W`,
/// vertically when `|Δrow| > threshold · H`, and in size when the area
/// changes by more than `threshold · H · W`. Class pairs seen fewer than
/// `min_count` times are dropped.
pub fn pair_direction_stats(
    sequences: &[Vec<EmittedObject>],
    threshold: f64,
    min_count: usize,
) -> BTreeMap<(usize, usize), DirectionCounts> {
    let mut stats: BTreeMap<(usize, usize), DirectionCounts> = BTreeMap::new();
    for seq in sequences {
        let objs: Vec<&EmittedObject> = seq.iter().filter(|o| !o.mask.is_empty()).collect();
        for w in objs.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (h, wd) = (a.mask.height as f64, a.mask.width as f64);
            let (ra, ca) = center_of_mass(&a.mask).expect("nonempty");
            let (rb, cb) = center_of_mass(&b.mask).expect("nonempty");
            let d_area = b.mask.area() as f64 - a.mask.area() as f64;
            let e = stats.entry((a.class_id, b.class_id)).or_default();
            e.occurrences += 1;
            if cb - ca < -threshold * wd {
                e.r2l += 1;
            } else if cb - ca > threshold * wd {
                e.l2r += 1;
            }
            if rb - ra < -threshold * h {
                e.b2t += 1;
            } else if rb - ra > threshold * h {
                e.t2b += 1;
            }
            if d_area < -threshold * h * wd {
                e.l2s += 1;
            } else if d_area > threshold * h * wd {
                e.s2l += 1;
            }
        }
    }
    stats.retain(|_, c| c.occurrences >= min_count);
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FpCategory {
    Loc,
    Bg,
    Dup,
    Cls,
    LocCls,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpHistogram {
    pub loc: usize,
    pub bg: usize,
    pub dup: usize,
    pub cls: usize,
    pub loc_cls: usize,
}

impl FpHistogram {
    pub fn add(&mut self, c: FpCategory) {
        match c {
            FpCategory::Loc => self.loc += 1,
            FpCategory::Bg => self.bg += 1,
            FpCategory::Dup => self.dup += 1,
            FpCategory::Cls => self.cls += 1,
            FpCategory::LocCls => self.loc_cls += 1,
        }
    }

    pub fn merge(&mut self, o: &FpHistogram) {
        self.loc += o.loc;
        self.bg += o.bg;
        self.dup += o.dup;
        self.cls += o.cls;
        self.loc_cls += o.loc_cls;
    }

    pub fn total(&self) -> usize {
        self.loc + self.bg + self.dup + self.cls + self.loc_cls
    }
}

pub const MATCH_IOU: f64 = 0.5;
pub const BACKGROUND_IOU: f64 = 0.1;

/// Category of each false positive after greedy matching at IoU 0.5;
/// `None` for true positives. Precedence: Dup, Cls, Loc, LocCls, Bg.
pub fn classify_false_positives(
    dets: &[Detection],
    gts: &[GroundTruthInstance],
) -> Result<Vec<Option<FpCategory>>> {
    let matches = greedy_match(dets, gts, MATCH_IOU)?;
    dets.iter()
        .zip(&matches)
        .map(|(d, m)| {
            if m.is_some() {
                return Ok(None);
            }
            let (mut same, mut other) = (0.0f64, 0.0f64);
            for g in gts {
                let iou = mask_iou(&d.mask, &g.mask)?;
                if g.class_id == d.class_id {
                    same = same.max(iou);
                } else {
                    other = other.max(iou);
                }
            }
            let cat = if same >= MATCH_IOU {
                FpCategory::Dup
            } else if other >= MATCH_IOU {
                FpCategory::Cls
            } else if same >= BACKGROUND_IOU {
                FpCategory::Loc
            } else if other >= BACKGROUND_IOU {
                FpCategory::LocCls
            } else {
                FpCategory::Bg
            };
            Ok(Some(cat))
        })
        .collect()
}

pub fn fp_histogram(dets: &[Detection], gts: &[GroundTruthInstance]) -> Result<FpHistogram> {
    let mut h = FpHistogram::default();
    for c in classify_false_positives(dets, gts)?.into_iter().flatten() {
        h.add(c);
    }
    Ok(h)
}

/// Upper edges, as fractions of the image, of all but the last size bin.
pub const SIZE_BIN_EDGES: [f64; 6] = [0.005, 0.01, 0.03, 0.05, 0.10, 0.15];
pub const NUM_SIZE_BINS: usize = SIZE_BIN_EDGES.len() + 1;

pub fn size_bin(mask: &BinaryMask) -> usize {
    let frac = mask.area() as f64 / (mask.height * mask.width) as f64;
    SIZE_BIN_EDGES.iter().take_while(|&&e| frac >= e).count()
}

pub fn size_bin_labels() -> Vec<String> {
    let pct = |v: f64| format!("{}", v * 100.0);
    let mut out = vec![format!("<{}%", pct(SIZE_BIN_EDGES[0]))];
    for w in SIZE_BIN_EDGES.windows(2) {
        out.push(format!("{}-{}%", pct(w[0]), pct(w[1])));
    }
    out.push(format!(">={}%", pct(SIZE_BIN_EDGES[SIZE_BIN_EDGES.len() - 1])));
    out
}

/// False negatives (ground truths without a TP at IoU 0.5) per size bin.
pub fn fn_size_histogram(dets: &[Detection], gts: &[GroundTruthInstance]) -> Result<[usize; NUM_SIZE_BINS]> {
    let matches = greedy_match(dets, gts, MATCH_IOU)?;
    let mut hit = vec![false; gts.len()];
    for (k, _) in matches.into_iter().flatten() {
        hit[k] = true;
    }
    let mut bins = [0; NUM_SIZE_BINS];
    for (g, _) in gts.iter().zip(&hit).filter(|(_, &h)| !h) {
        bins[size_bin(&g.mask)] += 1;
    }
    Ok(bins)
}

/// Matched IoUs of TPs: `(emission step, gt size bin, IoU)`.
pub fn true_positive_ious(dets: &[Detection], gts: &[GroundTruthInstance]) -> Result<Vec<(usize, usize, f64)>> {
    let matches = greedy_match(dets, gts, MATCH_IOU)?;
    Ok(dets
        .iter()
        .zip(matches)
        .filter_map(|(d, m)| m.map(|(k, iou)| (d.step, size_bin(&gts[k].mask), iou)))
        .collect())
}

fn grouped_mean(items: impl Iterator<Item = (usize, f64)>) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean TP IoU per time step, 1-based; steps without TPs are absent.
pub fn iou_vs_timestep(tps: &[(usize, usize, f64)]) -> BTreeMap<usize, f64> {
    grouped_mean(tps.iter().map(|&(t, _, iou)| (t + 1, iou)))
}

/// Mean TP IoU per gt size bin; empty bins are absent.
pub fn iou_vs_size(tps: &[(usize, usize, f64)]) -> BTreeMap<usize, f64> {
    grouped_mean(tps.iter().map(|&(_, b, iou)| (b, iou)))
}

/// Per-object mean absolute activation of `feature` (`C × h × w`),
/// bilinearly upsampled to the mask resolution, over each mask footprint.
pub fn activation_scores(feature: &Tensor<f32>, masks: &[BinaryMask]) -> Result<Vec<f64>> {
    let (c, h, w) = feature.chw();
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let (oh, ow) = (first.height, first.width);
    if masks.iter().any(|m| (m.height, m.width) != (oh, ow)) {
        return Err(Error::Shape("masks differ in size".into()));
    }
    let rows = axis_plan::<f64>(h, oh);
    let cols = axis_plan::<f64>(w, ow);
    let d = feature.data();
    let mut up = vec![0.0f64; oh * ow];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                let v = wy0 * (wx0 * plane[y0 * w + x0] as f64 + wx1 * plane[y0 * w + x1] as f64)
                    + wy1 * (wx0 * plane[y1 * w + x0] as f64 + wx1 * plane[y1 * w + x1] as f64);
                up[y * ow + x] += v.abs();
            }
        }
    }
    masks
        .iter()
        .map(|m| {
            let area = m.area();
            if area == 0 {
                return Err(Error::EmptyMask);
            }
            let s: f64 = m.data.iter().zip(&up).filter(|(&b, _)| b).map(|(_, v)| v).sum();
            Ok(s / (area * c) as f64)
        })
        .collect()
}

/// τ between emission order and descending activation score (emission
/// index breaking ties).
pub fn activation_order_correlation(feature: &Tensor<f32>, masks: &[BinaryMask]) -> Result<f64> {
    let scores = activation_scores(feature, masks)?;
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    let emitted: Vec<usize> = (0..masks.len()).collect();
    kendall_tau(&emitted, &order_by(&neg))
}

/// Mean and count of τ values; empty when no image qualified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub mean: Option<f64>,
    pub count: usize,
}

impl TauSummary {
    pub fn of(values: &[f64]) -> Self {
        TauSummary {
            mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub first_class: usize,
    pub second_class: usize,
    pub counts: DirectionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    /// Encoder block, counting from the image.
    pub block: usize,
    pub untrained: TauSummary,
    pub trained: TauSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub num_images: usize,
    pub strategy_tau: BTreeMap<SortStrategy, TauSummary>,
    pub pair_directions: Vec<PairReport>,
    pub false_positives: FpHistogram,
    pub size_bins: Vec<String>,
    pub false_negatives_by_size: Vec<usize>,
    pub iou_by_timestep: BTreeMap<usize, f64>,
    pub iou_by_size: BTreeMap<usize, f64>,
    pub activation: Vec<ActivationReport>,
}

/// Per-image inputs to [`analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisInput {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthInstance>,
}

/// Everything except the activation study, which needs model features.
pub fn analyze(images: &[AnalysisInput], pair_threshold: f64, pair_min_count: usize) -> Result<AnalysisReport> {
    let mut taus: BTreeMap<SortStrategy, Vec<f64>> = BTreeMap::new();
    let mut sequences = Vec::with_capacity(images.len());
    let mut fps = FpHistogram::default();
    let mut fns = [0usize; NUM_SIZE_BINS];
    let mut tps = Vec::new();
    for im in images {
        let masks: Vec<BinaryMask> = im.detections.iter().map(|d| d.mask.clone()).collect();
        if masks.iter().filter(|m| !m.is_empty()).count() >= 2 {
            for s in SortStrategy::ALL {
                taus.entry(s).or_default().push(strategy_correlation(&masks, s)?);
            }
        }
        sequences.push(
            im.detections
                .iter()
                .map(|d| EmittedObject {
                    class_id: d.class_id,
                    mask: d.mask.clone(),
                })
                .collect(),
        );
        fps.merge(&fp_histogram(&im.detections, &im.gts)?);
        for (b, n) in fn_size_histogram(&im.detections, &im.gts)?.iter().enumerate() {
            fns[b] += n;
        }
        tps.extend(true_positive_ious(&im.detections, &im.gts)?);
    }
    let pair_directions = pair_direction_stats(&sequences, pair_threshold, pair_min_count)
        .into_iter()
        .map(|((a, b), counts)| PairReport {
            first_class: a,
            second_class: b,
            counts,
        })
        .collect();
    Ok(AnalysisReport {
        num_images: images.len(),
        strategy_tau: SortStrategy::ALL
            .into_iter()
            .map(|s| (s, TauSummary::of(taus.get(&s).map_or(&[][..], Vec::as_slice))))
            .collect(),
        pair_directions,
        false_positives: fps,
        size_bins: size_bin_labels(),
        false_negatives_by_size: fns.to_vec(),
        iou_by_timestep: iou_vs_timestep(&tps),
        iou_by_size: iou_vs_size(&tps),
        activation: Vec::new(),
    })
}
