//! Minimal raster plots: bar charts and numbered mask overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::types::{center_of_mass, BinaryMask, ImageSample};

/// 3×5 glyphs for `0-9`, `.` and `-`, one row per byte (low three bits).
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Pixel extent of `text` at `scale`.
pub fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    ((4 * n).saturating_sub(1) * scale, 5 * scale)
}

/// Draws `text` with its top-left corner at `(x, y)`; unknown characters
/// leave a gap. Pixels outside the image are skipped.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: [u8; 3]) {
    let s = scale as i64;
    for (i, ch) in text.chars().enumerate() {
        let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) else {
            continue;
        };
        let x0 = x + 4 * s * i as i64;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3 {
                if bits & (0b100 >> c) == 0 {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        put(img, x0 + c * s + dx, y + r as i64 * s + dy, color);
                    }
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, e))
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Vertical bar chart with the value printed above each bar. Negative values
/// are drawn as zero-height bars.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    const BAR: u32 = 24;
    const GAP: u32 = 12;
    const PLOT_H: u32 = 160;
    const MARGIN: u32 = 16;
    let n = values.len().max(1) as u32;
    let width = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let height = PLOT_H + 3 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let max = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let base = height - MARGIN;
    fill_rect(&mut img, MARGIN / 2, base, width - MARGIN / 2, base + 1, [0, 0, 0]);
    for (i, &v) in values.iter().enumerate() {
        let x = MARGIN + i as u32 * (BAR + GAP);
        let frac = if max > 0.0 && v.is_finite() { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let h = (frac * PLOT_H as f64).round() as u32;
        fill_rect(&mut img, x, base - h, x + BAR, base, PALETTE[i % PALETTE.len()]);
        let label = format_value(v);
        let (tw, th) = text_size(&label, 1);
        draw_text(
            &mut img,
            x as i64 + (BAR as i64 - tw as i64) / 2,
            (base - h) as i64 - th as i64 - 2,
            &label,
            1,
            [0, 0, 0],
        );
    }
    img
}

pub fn save_bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    save(&bar_chart(values), path)
}

/// `image` with each mask blended in a palette color and its 1-based
/// emission index written at its center of mass.
pub fn overlay(image: &ImageSample, masks: &[BinaryMask]) -> Result<RgbImage> {
    let (w, h) = (image.width as u32, image.height as u32);
    let mut img = RgbImage::new(w, h);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(y, x).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(p));
        }
    }
    for (i, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (image.height, image.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                m.height, m.width, image.height, image.width
            )));
        }
        let color = PALETTE[i % PALETTE.len()];
        for (j, _) in m.data.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((j % image.width) as u32, (j / image.width) as u32);
            let Rgb(p) = *img.get_pixel(x, y);
            let mixed = [0, 1, 2].map(|k| ((p[k] as u16 + color[k] as u16) / 2) as u8);
            img.put_pixel(x, y, Rgb(mixed));
        }
    }
    let scale = if image.height.min(image.width) >= 128 { 2 } else { 1 };
    for (i, m) in masks.iter().enumerate() {
        let Ok((r, c)) = center_of_mass(m) else {
            continue;
        };
        let label = (i + 1).to_string();
        let (tw, th) = text_size(&label, scale);
        let (x, y) = (c.round() as i64 - tw as i64 / 2, r.round() as i64 - th as i64 / 2);
        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            draw_text(&mut img, x + dx, y + dy, &label, scale, [0, 0, 0]);
        }
        draw_text(&mut img, x, y, &label, scale, [255, 255, 255]);
    }
    Ok(img)
}

pub fn save_overlay(path: &Path, image: &ImageSample, masks: &[BinaryMask]) -> Result<()> {
    save(&overlay(image, masks)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_render_inside_bounds() {
        let mut img = RgbImage::new(20, 10);
        draw_text(&mut img, 0, 0, "10", 1, [255, 255, 255]);
        let lit = img.pixels().filter(|p| p.0 == [255, 255, 255]).count();
        // "1" has 8 lit cells, "0" has 12
        assert_eq!(lit, 20);
        assert_eq!(text_size("10", 2), (14, 10));
        draw_text(&mut img, -5, -5, "8", 3, [1, 2, 3]);
    }

    #[test]
    fn bars_scale_with_values() {
        let img = bar_chart(&[1.0, 2.0, 0.0]);
        let column = |x: u32| (0..img.height()).filter(|&y| img.get_pixel(x, y).0 == PALETTE[1]).count();
        let first = (0..img.height()).filter(|&y| img.get_pixel(16 + 12, y).0 == PALETTE[0]).count();
        assert_eq!(column(16 + 36 + 12), 160);
        assert_eq!(first, 80);
    }

    #[test]
    fn overlay_checks_shapes() {
        let image = ImageSample::filled(8, 8, [0.0; 3]);
        let mut m = BinaryMask::filled(8, 8, false);
        m.set(4, 4, true);
        let img = overlay(&image, &[m]).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        assert!(overlay(&image, &[BinaryMask::filled(4, 4, true)]).is_err());
    }
}
