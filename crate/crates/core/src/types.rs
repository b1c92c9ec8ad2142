//! Domain types shared by every stage of the pipeline, plus the small
//! deterministic mask utilities (tight boxes, centers of mass, thresholding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold used whenever a soft mask has to become a binary one.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Row-major `height × width` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type BinaryMask = Grid<bool>;
pub type SoftMask = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl BinaryMask {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn to_soft(&self) -> SoftMask {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// Normalized box `(x_min, y_min, x_max, y_max)` with exclusive upper edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn x_min(&self) -> f64 {
        self.0[0]
    }
    pub fn y_min(&self) -> f64 {
        self.0[1]
    }
    pub fn x_max(&self) -> f64 {
        self.0[2]
    }
    pub fn y_max(&self) -> f64 {
        self.0[3]
    }

    /// Pixel bounds `(row_min, col_min, row_max, col_max)` (inclusive) for a
    /// raster of the given size.
    pub fn to_pixels(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let px = |v: f64, n: usize| (v * n as f64).round() as usize;
        (
            px(self.y_min(), height),
            px(self.x_min(), width),
            px(self.y_max(), height).saturating_sub(1),
            px(self.x_max(), width).saturating_sub(1),
        )
    }
}

/// RGB image with values in `[0, 1]`, stored `h × w × 3` (interleaved).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values must lie in [0, 1]".into()));
        }
        Ok(ImageSample {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        ImageSample {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3 × h × w` copy, the layout the encoder consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[hw + i] = px[1];
            out[2 * hw + i] = px[2];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruthInstance {
    /// Builds an instance whose box is derived from the mask.
    pub fn from_mask(mask: BinaryMask, class_id: usize) -> Result<Self> {
        let bbox = box_from_mask(&mask)?;
        Ok(GroundTruthInstance {
            mask,
            bbox,
            class_id,
        })
    }
}

/// Output of a single decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub mask: SoftMask,
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub stop_score: f64,
}

impl InstancePrediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_probs)
    }

    pub fn max_class_prob(&self) -> f64 {
        self.class_probs.iter().cloned().fold(0.0, f64::max)
    }
}

/// Predictions in emission order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSequence {
    pub steps: Vec<InstancePrediction>,
}

impl PredictionSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn stop_scores(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.stop_score).collect()
    }
}

/// Binary matching between `rows` predictions and `cols` ground truths,
/// stored sparsely as one optional column per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    rows: usize,
    cols: usize,
    row_to_col: Vec<Option<usize>>,
}

impl AssignmentMatrix {
    /// Validates that no row or column is used twice.
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut row_to_col = vec![None; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in pairs {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "pair ({r}, {c}) outside {rows}x{cols} assignment"
                )));
            }
            if row_to_col[r].is_some() || col_used[c] {
                return Err(Error::Shape(format!("pair ({r}, {c}) reuses a row or column")));
            }
            row_to_col[r] = Some(c);
            col_used[c] = true;
        }
        Ok(AssignmentMatrix {
            rows,
            cols,
            row_to_col,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn delta(&self, row: usize, col: usize) -> bool {
        self.row_to_col[row] == Some(col)
    }

    pub fn matched_col(&self, row: usize) -> Option<usize> {
        self.row_to_col[row]
    }

    /// Matched `(row, col)` pairs in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
            .collect()
    }

    pub fn num_matches(&self) -> usize {
        self.row_to_col.iter().flatten().count()
    }

    pub fn dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.delta(r, c) as u8).collect())
            .collect()
    }
}

/// Tight normalized box of the foreground: `(x_min/w, y_min/h, (x_max+1)/w, (y_max+1)/h)`.
pub fn box_from_mask(mask: &BinaryMask) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in mask.foreground() {
        bounds = Some(match bounds {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    let (r0, c0, r1, c1) = bounds.ok_or(Error::EmptyMask)?;
    let (h, w) = (mask.height as f64, mask.width as f64);
    Ok(BBox([
        c0 as f64 / w,
        r0 as f64 / h,
        (c1 + 1) as f64 / w,
        (r1 + 1) as f64 / h,
    ]))
}

/// Mean `(row, col)` of the foreground pixels.
pub fn center_of_mass(mask: &BinaryMask) -> Result<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (r, c) in mask.foreground() {
        sr += r as f64;
        sc += c as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sr / n as f64, sc / n as f64))
}

/// Elementwise `mask >= threshold`.
pub fn binarize(mask: &SoftMask, threshold: f64) -> BinaryMask {
    Grid {
        height: mask.height,
        width: mask.width,
        data: mask.data.iter().map(|&v| v >= threshold).collect(),
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Grid::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn full_mask_box_is_unit() {
        let m = BinaryMask::filled(4, 4, true);
        assert_eq!(box_from_mask(&m).unwrap(), BBox([0.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn single_pixel_box() {
        let m = mask_from_fn(4, 4, |r, c| r == 0 && c == 0);
        assert_eq!(box_from_mask(&m).unwrap(), BBox([0.0, 0.0, 0.25, 0.25]));
    }

    #[test]
    fn rectangle_box() {
        let m = mask_from_fn(8, 8, |r, c| (2..=5).contains(&r) && (4..=7).contains(&c));
        assert_eq!(box_from_mask(&m).unwrap(), BBox([0.5, 0.25, 1.0, 0.75]));
    }

    #[test]
    fn empty_mask_errors() {
        let m = BinaryMask::filled(3, 3, false);
        assert!(matches!(box_from_mask(&m), Err(Error::EmptyMask)));
        assert!(matches!(center_of_mass(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn centers_of_mass() {
        let m = mask_from_fn(6, 8, |r, c| r == 3 && c == 5);
        assert_eq!(center_of_mass(&m).unwrap(), (3.0, 5.0));
        let m = BinaryMask::filled(4, 4, true);
        assert_eq!(center_of_mass(&m).unwrap(), (1.5, 1.5));
        let m = mask_from_fn(3, 5, |r, c| (r, c) == (0, 0) || (r, c) == (2, 4));
        assert_eq!(center_of_mass(&m).unwrap(), (1.0, 2.0));
    }

    #[test]
    fn binarize_examples() {
        let soft = Grid::from_vec(1, 2, vec![0.2, 0.7]).unwrap();
        assert_eq!(binarize(&soft, 0.5).data, vec![false, true]);
        let soft = Grid::from_vec(1, 1, vec![0.5]).unwrap();
        assert_eq!(binarize(&soft, 0.5).data, vec![true]);
        let soft = SoftMask::filled(3, 3, 0.0);
        assert!(binarize(&soft, 0.3).is_empty());
    }

    #[test]
    fn assignment_rejects_reused_column() {
        assert!(AssignmentMatrix::from_pairs(2, 2, &[(0, 1), (1, 1)]).is_err());
        let a = AssignmentMatrix::from_pairs(3, 2, &[(0, 1), (2, 0)]).unwrap();
        assert_eq!(a.dense(), vec![vec![0, 1], vec![0, 0], vec![1, 0]]);
        assert_eq!(a.num_matches(), 2);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_filter("nonempty", |d| d.iter().any(|&v| v))
                .prop_map(move |d| Grid::from_vec(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn box_is_tight(mask in arb_mask()) {
            let b = box_from_mask(&mask).unwrap();
            let (r0, c0, r1, c1) = b.to_pixels(mask.height, mask.width);
            let fg: Vec<_> = mask.foreground().collect();
            prop_assert!(fg.iter().all(|&(r, c)| r >= r0 && r <= r1 && c >= c0 && c <= c1));
            // shrinking any side excludes a foreground pixel
            prop_assert!(fg.iter().any(|&(r, _)| r == r0));
            prop_assert!(fg.iter().any(|&(r, _)| r == r1));
            prop_assert!(fg.iter().any(|&(_, c)| c == c0));
            prop_assert!(fg.iter().any(|&(_, c)| c == c1));
        }

        #[test]
        fn center_inside_box(mask in arb_mask()) {
            let b = box_from_mask(&mask).unwrap();
            let (r, c) = center_of_mass(&mask).unwrap();
            let (h, w) = (mask.height as f64, mask.width as f64);
            prop_assert!(c >= b.x_min() * w && c < b.x_max() * w);
            prop_assert!(r >= b.y_min() * h && r < b.y_max() * h);
        }

        #[test]
        fn binarize_idempotent(vals in proptest::collection::vec(0.0f64..=1.0, 1..64), t in 0.01f64..0.99) {
            let n = vals.len();
            let soft = Grid::from_vec(1, n, vals).unwrap();
            let once = binarize(&soft, t);
            let twice = binarize(&once.to_soft(), t);
            prop_assert_eq!(once, twice);
        }
    }
}
