//! Overlay, panoptic and timing-plot images.

use condinst::evalbench::TimingReport;
use condinst::mask::BinaryMask;
use condinst::numerics::FeatureMap;
use condinst::panoptic::{PanopticMap, VOID};
use image::{Rgb, RgbImage};

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const TEXT_SCALE: u32 = 2;
const CAPTION_H: u32 = GLYPH_H * TEXT_SCALE + 6;
const VOID_COLOR: [u8; 3] = [0, 0, 0];
const CAPTION_BG: [u8; 3] = [24, 24, 24];
const CAPTION_FG: [u8; 3] = [235, 235, 235];

/// Rows of a 3x5 glyph, top to bottom, high bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        'a' => [0b000, 0b011, 0b101, 0b101, 0b011],
        'c' => [0b000, 0b011, 0b100, 0b100, 0b011],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b011],
        'i' => [0b010, 0b000, 0b010, 0b010, 0b010],
        'k' | 'K' => [0b100, 0b101, 0b110, 0b101, 0b101],
        'm' => [0b000, 0b110, 0b111, 0b101, 0b101],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        's' => [0b000, 0b011, 0b110, 0b001, 0b110],
        't' => [0b010, 0b111, 0b010, 0b010, 0b001],
        _ => [0; 5],
    }
}

pub fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * TEXT_SCALE
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to the image.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + (i as u32 * (GLYPH_W + 1) * TEXT_SCALE) as i64;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 0 {
                    continue;
                }
                for dy in 0..TEXT_SCALE {
                    for dx in 0..TEXT_SCALE {
                        put(
                            img,
                            gx + (col * TEXT_SCALE + dx) as i64,
                            y + (row as u32 * TEXT_SCALE + dy) as i64,
                            color,
                        );
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

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: [u8; 3]) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, Rgb(color));
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Distinct saturated color for the `i`-th instance.
pub fn instance_color(i: usize) -> [u8; 3] {
    hsv(0.13 + i as f64 * 0.618_033_988_75, 0.85, 0.95)
}

/// Color of a panoptic category; never black.
pub fn category_color(category: u32) -> [u8; 3] {
    hsv(0.57 + category as f64 * 0.381_966, 0.7, 0.85)
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(1.0, 255.0) as u8)
}

/// Upscales a 3-channel `[0, 1]` image by nearest neighbour.
pub fn image_to_rgb(image: &FeatureMap, scale: u32) -> RgbImage {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let gray = image.channels() < 3;
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let (sx, sy) = ((x / scale) as usize, (y / scale) as usize);
        let v = |c: usize| {
            (image.at(if gray { 0 } else { c }, sy, sx).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([v(0), v(1), v(2)])
    })
}

/// One instance to draw: its mask and an optional text label.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub mask: BinaryMask,
    pub label: Option<String>,
}

/// Blends each mask over the image in its own color, labels it near its
/// top-left corner and adds an `N instances` caption strip underneath.
pub fn render_instances(image: &FeatureMap, overlays: &[Overlay], scale: u32) -> RgbImage {
    let base = image_to_rgb(image, scale);
    let (w, h) = base.dimensions();
    let mut out = RgbImage::from_pixel(w, h + CAPTION_H, Rgb(CAPTION_BG));
    image::imageops::replace(&mut out, &base, 0, 0);
    for (i, o) in overlays.iter().enumerate() {
        let color = instance_color(i);
        for (mx, my) in o.mask.foreground() {
            for dy in 0..scale {
                for dx in 0..scale {
                    let (x, y) = (mx as u32 * scale + dx, my as u32 * scale + dy);
                    let p = out.get_pixel_mut(x, y);
                    for c in 0..3 {
                        p.0[c] = ((p.0[c] as u16 + color[c] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for (i, o) in overlays.iter().enumerate() {
        if let (Some(label), Some(b)) = (&o.label, o.mask.tight_box()) {
            let x = (b.x1 * scale as f64) as i64 + 1;
            let y = (b.y1 * scale as f64) as i64 + 1;
            draw_text(&mut out, x, y, label, instance_color(i));
        }
    }
    let caption = format!("{} instances", overlays.len());
    draw_text(&mut out, 3, (h + 3) as i64, &caption, CAPTION_FG);
    out
}

/// Colors every segment (stuff by category, things by category with a per-segment
/// shade), leaves void pixels black and appends a category legend strip.
pub fn render_panoptic(map: &PanopticMap, scale: u32) -> RgbImage {
    let (w, h) = (map.width() as u32 * scale, map.height() as u32 * scale);
    let mut out = RgbImage::from_pixel(w, h + CAPTION_H, Rgb(CAPTION_BG));
    let color_of = |id: u16| -> [u8; 3] {
        if id == VOID {
            return VOID_COLOR;
        }
        match map.segment(id) {
            Some(s) if s.is_thing => shade(
                category_color(s.category),
                0.55 + 0.45 * ((id as usize * 7) % 5) as f64 / 4.0,
            ),
            Some(s) => category_color(s.category),
            None => VOID_COLOR,
        }
    };
    for y in 0..h {
        for x in 0..w {
            let id = map.id_at((x / scale) as usize, (y / scale) as usize);
            out.put_pixel(x, y, Rgb(color_of(id)));
        }
    }
    let mut cats: Vec<u32> = map
        .segments()
        .iter()
        .filter(|s| s.area > 0)
        .map(|s| s.category)
        .collect();
    cats.sort_unstable();
    cats.dedup();
    let mut x = 3;
    let swatch = GLYPH_H * TEXT_SCALE;
    for c in cats {
        fill_rect(&mut out, x, h + 3, swatch, swatch, category_color(c));
        x += swatch + 2;
        let label = c.to_string();
        draw_text(&mut out, x as i64, (h + 3) as i64, &label, CAPTION_FG);
        x += text_width(&label) + 4;
    }
    out
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Median mask-head time against K on a log axis, with p10-p90 bars.
pub fn plot_timings(report: &TimingReport) -> RgbImage {
    let (w, h, margin) = (360i64, 240i64, 36i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let black = [0, 0, 0];
    draw_line(&mut img, (margin, h - margin), (w - 12, h - margin), black);
    draw_line(&mut img, (margin, 12), (margin, h - margin), black);
    if report.entries.is_empty() {
        return img;
    }
    let lk: Vec<f64> = report
        .entries
        .iter()
        .map(|e| (e.k.max(1) as f64).log10())
        .collect();
    let (kmin, kmax) = lk
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let ymax = report
        .entries
        .iter()
        .map(|e| e.p90_ms.max(e.median_ms))
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.1;
    let px = |v: f64| {
        margin
            + 8
            + ((v - kmin) / (kmax - kmin).max(1e-9) * (w - margin - 36) as f64).round() as i64
    };
    let py = |ms: f64| h - margin - (ms / ymax * (h - margin - 20) as f64).round() as i64;
    let mut prev = None;
    for (e, &l) in report.entries.iter().zip(&lk) {
        let (x, y) = (px(l), py(e.median_ms));
        draw_line(
            &mut img,
            (x, py(e.p10_ms)),
            (x, py(e.p90_ms)),
            [150, 150, 150],
        );
        if let Some(p) = prev {
            draw_line(&mut img, p, (x, y), [30, 90, 200]);
        }
        for d in -2..=2 {
            draw_line(&mut img, (x - 2, y + d), (x + 2, y + d), [200, 40, 40]);
        }
        let label = format!("k={}", e.k);
        draw_text(
            &mut img,
            x - text_width(&label) as i64 / 2,
            h - margin + 6,
            &label,
            black,
        );
        prev = Some((x, y));
    }
    draw_text(&mut img, 4, 2, &format!("{:.3} ms", ymax), black);
    img
}
