//! Synthetic "shapes world" data: generation, resizing and on-disk storage.
//!
//! Shapes are painted back to front; each ground-truth mask is the visible
//! part of its shape. On disk a dataset is
//!
//! ```text
//! manifest.json              splits and class names
//! images/NNNN.png            8-bit RGB
//! masks/NNNN_K.png           8-bit gray, 0 or 255, one per instance
//! annotations/NNNN.json      class ids, boxes, mask file references
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::axis_plan;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{BBox, BinaryMask, GroundTruthInstance, Grid, ImageSample};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Consecutive rejected placements before generation gives up.
pub const MAX_REJECTIONS: usize = 1000;

/// Smallest visible area, in pixels, an instance may have.
pub const MIN_VISIBLE_PIXELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape extent as a fraction of `min(height, width)`.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest allowed `|A ∩ B| / min(|A|, |B|)` between full shape footprints.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            height: 64,
            width: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.2,
            max_size: 0.4,
            max_overlap: 0.2,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return bad("num_classes must be 1, 2 or 3");
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        let frac = |v: f64| v > 0.0 && v < 1.0;
        if !frac(self.min_size) || !frac(self.max_size) || self.min_size > self.max_size {
            return bad("size fractions must lie in (0, 1) with min <= max");
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image: ImageSample,
    pub instances: Vec<GroundTruthInstance>,
}

/// Independent random stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn footprint(class_id: usize, h: usize, w: usize, cy: f64, cx: f64, size: f64) -> BinaryMask {
    let half = size / 2.0;
    let top = cy - half;
    let data = (0..h * w)
        .map(|i| {
            let (py, px) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let (dy, dx) = (py - cy, px - cx);
            match class_id {
                0 => dx * dx + dy * dy <= half * half,
                1 => dx.abs() <= half && dy.abs() <= half,
                // upright triangle: apex at the top, base `size` wide
                _ => py >= top && py <= cy + half && dx.abs() <= (py - top) / 2.0,
            }
        })
        .collect();
    Grid {
        height: h,
        width: w,
        data,
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f32; 3] {
    [0, 1, 2].map(|_| quantize(rng.gen_range(lo..hi)))
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f32::max)
}

/// One sample plus the full (amodal) footprint of every instance.
pub(crate) fn generate_with_footprints(
    spec: &ShapesSpec,
    rng: &mut impl Rng,
) -> Result<(DatasetRecord, Vec<BinaryMask>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let background = random_color(rng, 0.0, 0.3);

    let mut footprints: Vec<BinaryMask> = Vec::new();
    let mut visible: Vec<BinaryMask> = Vec::new();
    let mut classes = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();

    for _ in 0..count {
        let mut rejections = 0;
        loop {
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Generation {
                    attempts: rejections,
                });
            }
            let class_id = rng.gen_range(0..spec.num_classes);
            let size = rng.gen_range(spec.min_size..=spec.max_size) * side;
            let cy = rng.gen_range(size / 2.0..=h as f64 - size / 2.0);
            let cx = rng.gen_range(size / 2.0..=w as f64 - size / 2.0);
            let shape = footprint(class_id, h, w, cy, cx, size);
            let area = shape.area();
            let overlaps = footprints.iter().any(|p| {
                let inter = shape.intersection(p) as f64;
                inter > 0.0 && inter / area.min(p.area()).max(1) as f64 > spec.max_overlap
            });
            let occluded: Vec<BinaryMask> = visible
                .iter()
                .map(|v| Grid {
                    height: h,
                    width: w,
                    data: v.data.iter().zip(&shape.data).map(|(&a, &s)| a && !s).collect(),
                })
                .collect();
            let too_small = area < MIN_VISIBLE_PIXELS
                || occluded.iter().any(|v| v.area() < MIN_VISIBLE_PIXELS);
            if overlaps || too_small {
                rejections += 1;
                continue;
            }
            let mut color = random_color(rng, 0.35, 1.0);
            for _ in 0..100 {
                if color_distance(color, background) >= 0.3
                    && colors.iter().all(|&c| color_distance(color, c) >= 0.3)
                {
                    break;
                }
                color = random_color(rng, 0.35, 1.0);
            }
            visible = occluded;
            visible.push(shape.clone());
            footprints.push(shape);
            classes.push(class_id);
            colors.push(color);
            break;
        }
    }

    let mut image = ImageSample::filled(h, w, background);
    for (shape, &color) in footprints.iter().zip(&colors) {
        for (i, _) in shape.data.iter().enumerate().filter(|(_, &v)| v) {
            image.set_pixel(i / w, i % w, color);
        }
    }
    let instances = visible
        .into_iter()
        .zip(classes)
        .map(|(m, c)| GroundTruthInstance::from_mask(m, c))
        .collect::<Result<_>>()?;
    Ok((DatasetRecord { image, instances }, footprints))
}

/// Draws one image with `n ~ U[min_objects, max_objects]` shapes.
pub fn generate_sample(spec: &ShapesSpec, rng: &mut impl Rng) -> Result<DatasetRecord> {
    generate_with_footprints(spec, rng).map(|(r, _)| r)
}

/// `count` samples; sample `i` uses stream `i` of `spec.seed`, so the output
/// does not depend on the execution strategy.
pub fn generate_dataset(spec: &ShapesSpec, count: usize, exec: Exec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    exec.map_range(count, |i| generate_sample(spec, &mut sample_rng(spec.seed, i as u64)))
        .into_iter()
        .collect()
}

/// Bilinear image resize, nearest-neighbour mask resize, boxes recomputed;
/// instances that vanish are dropped.
pub fn resize_record(record: &DatasetRecord, height: usize, width: usize) -> Result<DatasetRecord> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("resize target must be nonzero".into()));
    }
    let src = &record.image;
    let rows = axis_plan::<f64>(src.height, height);
    let cols = axis_plan::<f64>(src.width, width);
    let mut image = ImageSample::filled(height, width, [0.0; 3]);
    for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
            let (a, b, c, d) = (src.pixel(y0, x0), src.pixel(y0, x1), src.pixel(y1, x0), src.pixel(y1, x1));
            let px = [0, 1, 2].map(|k| {
                let v = wy0 * (wx0 * a[k] as f64 + wx1 * b[k] as f64)
                    + wy1 * (wx0 * c[k] as f64 + wx1 * d[k] as f64);
                v.clamp(0.0, 1.0) as f32
            });
            image.set_pixel(oy, ox, px);
        }
    }
    let nearest = |n_in: usize, n_out: usize, o: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut instances = Vec::new();
    for inst in &record.instances {
        let m = &inst.mask;
        let data = (0..height * width)
            .map(|i| {
                let (r, c) = (i / width, i % width);
                *m.get(nearest(m.height, height, r), nearest(m.width, width, c))
            })
            .collect();
        let mask = Grid {
            height,
            width,
            data,
        };
        if !mask.is_empty() {
            instances.push(GroundTruthInstance::from_mask(mask, inst.class_id)?);
        }
    }
    Ok(DatasetRecord { image, instances })
}

/// Mirrors the record left to right when `mirror` is set and reorders the
/// colour channels by `channels` (output channel `k` reads input channel
/// `channels[k]`). Boxes are recomputed.
pub fn flip_permute(record: &DatasetRecord, mirror: bool, channels: [usize; 3]) -> Result<DatasetRecord> {
    let src = &record.image;
    let (h, w) = (src.height, src.width);
    let col = |x: usize| if mirror { w - 1 - x } else { x };
    let mut image = ImageSample::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = src.pixel(y, col(x));
            image.set_pixel(y, x, channels.map(|c| p[c]));
        }
    }
    let instances = record
        .instances
        .iter()
        .map(|inst| {
            let m = &inst.mask;
            let data = (0..h * w).map(|i| *m.get(i / w, col(i % w))).collect();
            GroundTruthInstance::from_mask(Grid { height: h, width: w, data }, inst.class_id)
        })
        .collect::<Result<_>>()?;
    Ok(DatasetRecord { image, instances })
}

/// Random [`flip_permute`]: a fair coin for the mirror and a uniform
/// channel permutation.
pub fn augment(record: &DatasetRecord, rng: &mut impl Rng) -> Result<DatasetRecord> {
    let mirror = rng.gen_bool(0.5);
    let mut channels = [0, 1, 2];
    channels.shuffle(rng);
    flip_permute(record, mirror, channels)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous split: the first `n_train` records train, the next
    /// `n_val` validate, the rest test.
    pub fn contiguous(total: usize, n_val: usize, n_test: usize) -> Result<Self> {
        if n_val + n_test > total {
            return Err(Error::Config(format!(
                "{n_val} validation + {n_test} test images exceed {total}"
            )));
        }
        let n_train = total - n_val - n_test;
        Ok(Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..total).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_images: usize,
    pub class_names: Vec<String>,
    pub splits: Splits,
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ShapesSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    image: String,
    height: usize,
    width: usize,
    instances: Vec<AnnotationInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationInstance {
    class_id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: String,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, image: &ImageSample) -> Result<()> {
    let raw: Vec<u8> = image.pixels.iter().map(|&v| to_u8(v)).collect();
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::io(path, "image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageSample::new(h as usize, w as usize, pixels)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .ok_or_else(|| Error::io(path, "mask buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v > 127).collect();
    Grid::from_vec(h as usize, w as usize, data)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes records (named by position) and a manifest. `splits` defaults to
/// "everything is train".
pub fn save_dataset(
    dir: &Path,
    records: &[DatasetRecord],
    splits: Option<&Splits>,
    generator: Option<&ShapesSpec>,
) -> Result<()> {
    for sub in ["images", "masks", "annotations"] {
        mkdir(&dir.join(sub))?;
    }
    for (i, rec) in records.iter().enumerate() {
        let image_rel = format!("images/{i:04}.png");
        save_image(&dir.join(&image_rel), &rec.image)?;
        let mut instances = Vec::new();
        for (k, inst) in rec.instances.iter().enumerate() {
            let mask_rel = format!("masks/{i:04}_{k}.png");
            save_mask(&dir.join(&mask_rel), &inst.mask)?;
            instances.push(AnnotationInstance {
                class_id: inst.class_id,
                bbox: inst.bbox.0,
                mask: mask_rel,
            });
        }
        let ann = AnnotationFile {
            image: image_rel,
            height: rec.image.height,
            width: rec.image.width,
            instances,
        };
        write_json(&dir.join(format!("annotations/{i:04}.json")), &ann)?;
    }
    let default_splits = Splits {
        train: (0..records.len()).collect(),
        ..Splits::default()
    };
    let manifest = Manifest {
        format_version: 1,
        num_images: records.len(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        splits: splits.cloned().unwrap_or(default_splits),
        generator: generator.cloned(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

fn load_annotation(dir: &Path, path: &Path) -> Result<DatasetRecord> {
    let ann: AnnotationFile = read_json(path)?;
    let image = load_image(&dir.join(&ann.image))?;
    if (image.height, image.width) != (ann.height, ann.width) {
        return Err(Error::io(path, "annotation size disagrees with image"));
    }
    let instances = ann
        .instances
        .into_iter()
        .map(|inst| {
            let mask_path = dir.join(&inst.mask);
            let mask = load_mask(&mask_path)?;
            if !mask.same_shape(&Grid::filled(image.height, image.width, ())) {
                return Err(Error::io(&mask_path, "mask size disagrees with image"));
            }
            if mask.is_empty() {
                return Err(Error::io(&mask_path, "instance mask is empty"));
            }
            Ok(GroundTruthInstance {
                mask,
                bbox: BBox(inst.bbox),
                class_id: inst.class_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetRecord { image, instances })
}

fn annotation_paths(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let ann_dir = dir.join("annotations");
    let mut out = BTreeMap::new();
    if !ann_dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&ann_dir).map_err(|e| Error::io(&ann_dir, e))? {
        let path = entry.map_err(|e| Error::io(&ann_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(idx) = path.file_stem().and_then(|s| s.to_str()?.parse().ok()) {
                out.insert(idx, path);
            }
        }
    }
    Ok(out)
}

/// Every record in index order; an empty or absent directory yields none.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    annotation_paths(dir)?
        .values()
        .map(|p| load_annotation(dir, p))
        .collect()
}

/// Records of one manifest split, in manifest order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<DatasetRecord>> {
    let manifest = load_manifest(dir)?;
    let paths = annotation_paths(dir)?;
    manifest
        .splits
        .get(split)?
        .iter()
        .map(|i| {
            let p = paths
                .get(i)
                .ok_or_else(|| Error::io(dir.join(format!("annotations/{i:04}.json")), "missing annotation"))?;
            load_annotation(dir, p)
        })
        .collect()
}
