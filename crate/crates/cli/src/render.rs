//! Frame strips, GIF animations and line plots, drawn directly into RGB buffers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};

use crate::error::CliError;

/// One image cell, packed RGB.
#[derive(Clone, Debug)]
pub struct Tile {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Tile {
    /// Channel-first values in `[0, 1]` (1 or 3 channels), clamped.
    pub fn from_frame(values: &[f32], channels: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut rgb = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                rgb.push(q(values[(c % channels) * n + i]));
            }
        }
        Self { width, height, rgb }
    }

    pub fn blank(width: usize, height: usize, shade: u8) -> Self {
        Self { width, height, rgb: vec![shade; 3 * width * height] }
    }

    fn scaled(&self, scale: usize) -> Self {
        let (w, h) = (self.width * scale, self.height * scale);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 3 * ((y / scale) * self.width + x / scale);
                rgb.extend_from_slice(&self.rgb[i..i + 3]);
            }
        }
        Self { width: w, height: h, rgb }
    }
}

const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);
const PAD: usize = 2;
/// Extra space between the conditioning and predicted columns.
const GAP: usize = 6;

fn blit(img: &mut RgbImage, tile: &Tile, x0: usize, y0: usize) {
    for y in 0..tile.height {
        for x in 0..tile.width {
            let i = 3 * (y * tile.width + x);
            img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb([tile.rgb[i], tile.rgb[i + 1], tile.rgb[i + 2]]));
        }
    }
}

/// Grid of equally sized tiles; a wider gap follows column `split` (use 0 for none).
pub fn grid(rows: &[Vec<Tile>], split: usize, scale: usize) -> RgbImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (tw, th) = rows.iter().flatten().next().map(|t| (t.width * scale, t.height * scale)).unwrap_or((1, 1));
    let gap = if split > 0 && split < cols { GAP } else { 0 };
    let width = PAD + cols * (tw + PAD) + gap;
    let height = PAD + rows.len() * (th + PAD);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let x = PAD + c * (tw + PAD) + if c >= split && gap > 0 { gap } else { 0 };
            blit(&mut img, &tile.scaled(scale), x, PAD + r * (th + PAD));
        }
    }
    img
}

/// Animation over time: frame `t` shows `columns[i][t]` side by side, framed green
/// while `t < cond_frames` (observed) and red afterwards (predicted).
pub fn write_gif(path: &Path, columns: &[Vec<Tile>], cond_frames: usize, scale: usize, delay_ms: u32) -> Result<(), CliError> {
    let steps = columns.iter().map(Vec::len).max().unwrap_or(0);
    let mut encoder = GifEncoder::new(BufWriter::new(File::create(path)?));
    encoder.set_repeat(Repeat::Infinite)?;
    let border = 2;
    for t in 0..steps {
        let color = if t < cond_frames { Rgb([40, 180, 60]) } else { Rgb([200, 50, 50]) };
        let row: Vec<Tile> = columns.iter().filter_map(|c| c.get(t).cloned()).collect();
        let inner = grid(&[row], 0, scale);
        let mut img = RgbImage::from_pixel(inner.width() + 2 * border, inner.height() + 2 * border, color);
        image::imageops::replace(&mut img, &inner, border as i64, border as i64);
        let rgba = RgbaImage::from_fn(img.width(), img.height(), |x, y| {
            let Rgb([r, g, b]) = *img.get_pixel(x, y);
            image::Rgba([r, g, b, 255])
        });
        encoder.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))?;
    }
    Ok(())
}

/// 3x5 glyphs for tick labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

const FONT_SCALE: i64 = 2;

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 4 * FONT_SCALE
}

fn draw_text(img: &mut RgbImage, s: &str, x0: i64, y0: i64, color: Rgb<u8>) {
    for (i, c) in s.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    let x = x0 + (i as i64 * 4 + col) * FONT_SCALE;
                    let y = y0 + r as i64 * FONT_SCALE;
                    fill_rect(img, x, y, FONT_SCALE, FONT_SCALE, color);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, color);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        fill_rect(img, x - thick / 2, y - thick / 2, thick, thick, color);
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

pub struct Series<'a> {
    pub values: &'a [f64],
    /// Half-width of a band drawn around the line.
    pub band: Option<&'a [f64]>,
    pub color: [u8; 3],
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

fn label(v: f64, step: f64) -> String {
    let decimals = (0..6).find(|d| {
        let scaled = step * 10f64.powi(*d);
        (scaled - scaled.round()).abs() < 1e-6
    });
    let decimals = decimals.unwrap_or(6) as usize;
    format!("{v:.decimals$}")
}

/// Line plot over steps `1..=len`, with y ticks labelled and a light band per series.
pub fn line_plot(series: &[Series]) -> RgbImage {
    let (width, height) = (560i64, 340i64);
    let (left, right, top, bottom) = (70i64, 20i64, 20i64, 40i64);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    let steps = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(1);

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            let b = s.band.map(|b| b[i]).unwrap_or(0.0);
            if v.is_finite() {
                lo = lo.min(v - b);
                hi = hi.max(v + b);
            }
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let step = nice_step(hi - lo);
    let (lo, hi) = ((lo / step).floor() * step, (hi / step).ceil() * step);

    let (pw, ph) = (width - left - right, height - top - bottom);
    let px = |t: f64| left + if steps > 1 { ((t - 1.0) / (steps - 1) as f64 * pw as f64).round() as i64 } else { pw / 2 };
    let py = |v: f64| top + ((hi - v) / (hi - lo) * ph as f64).round() as i64;

    let grid_color = Rgb([225, 225, 225]);
    let axis = Rgb([60, 60, 60]);
    let mut v = lo;
    while v <= hi + step * 1e-6 {
        let y = py(v);
        line(&mut img, (left, y), (left + pw, y), grid_color, 1);
        let text = label(v, step);
        draw_text(&mut img, &text, left - 8 - text_width(&text), y - 5, axis);
        v += step;
    }
    let x_step = (steps as f64 / 10.0).ceil().max(1.0) as usize;
    for t in (1..=steps).filter(|t| *t == 1 || t % x_step == 0) {
        let x = px(t as f64);
        line(&mut img, (x, top + ph), (x, top + ph + 4), axis, 1);
        let text = t.to_string();
        draw_text(&mut img, &text, x - text_width(&text) / 2, top + ph + 10, axis);
    }

    for s in series {
        if let Some(band) = s.band {
            let shade = lighten(s.color);
            for x in left..=left + pw {
                let t = 1.0 + (x - left) as f64 / pw as f64 * (steps - 1) as f64;
                let (m, b) = (interp(s.values, t), interp(band, t));
                if m.is_finite() && b.is_finite() {
                    line(&mut img, (x, py(m + b)), (x, py(m - b)), shade, 1);
                }
            }
        }
    }
    for s in series {
        let pts: Vec<(i64, i64)> =
            s.values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| (px((i + 1) as f64), py(*v))).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], Rgb(s.color), 2);
        }
        for p in &pts {
            fill_rect(&mut img, p.0 - 2, p.1 - 2, 5, 5, Rgb(s.color));
        }
    }
    line(&mut img, (left, top), (left, top + ph), axis, 1);
    line(&mut img, (left, top + ph), (left + pw, top + ph), axis, 1);
    img
}

fn lighten(color: [u8; 3]) -> Rgb<u8> {
    Rgb(color.map(|c| ((c as u16 + 3 * 255) / 4) as u8))
}

fn interp(values: &[f64], t: f64) -> f64 {
    let i = (t - 1.0).floor().max(0.0) as usize;
    if i + 1 >= values.len() {
        return values.last().copied().unwrap_or(f64::NAN);
    }
    let f = t - 1.0 - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
