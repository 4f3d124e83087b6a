//! Supersampled rasterization of overlay shapes.
//!
//! Every shape is a point-membership predicate in continuous pixel
//! coordinates (pixel `(x, y)` covers `[x, x+1) x [y, y+1)`). Coverage is the
//! fraction of a regular `SUPERSAMPLE x SUPERSAMPLE` grid of sample points
//! inside the shape, so compositing and ground-truth masks are derived from
//! the same raster.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ContentClass, MaskImage};
use crate::error::Result;

pub const SUPERSAMPLE: u32 = 4;

/// Overlay coverage at or above this alpha is labelled NP.
pub const NP_ALPHA_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, angle: f32 },
    Polygon { points: Vec<(f32, f32)> },
    /// Line segment with round caps.
    Capsule { ax: f32, ay: f32, bx: f32, by: f32, radius: f32 },
    /// 8x8 bitmap glyphs, each font pixel scaled to `scale` image pixels.
    Text { x: f32, y: f32, scale: f32, text: String },
}

impl Shape {
    pub fn contains(&self, px: f32, py: f32) -> bool {
        match self {
            Shape::Rect { x0, y0, x1, y1 } => px >= *x0 && px < *x1 && py >= *y0 && py < *y1,
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = px - cx;
                let dy = py - cy;
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { points } => polygon_contains(points, px, py),
            Shape::Capsule { ax, ay, bx, by, radius } => {
                let (vx, vy) = (bx - ax, by - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + t * vx - px, ay + t * vy - py);
                qx * qx + qy * qy <= radius * radius
            }
            Shape::Text { x, y, scale, text } => {
                let gx = (px - x) / scale;
                let gy = (py - y) / scale;
                if gx < 0.0 || !(0.0..8.0).contains(&gy) {
                    return false;
                }
                let idx = (gx / 8.0) as usize;
                let Some(ch) = text.chars().nth(idx) else {
                    return false;
                };
                glyph_bit(ch, (gx as usize) % 8, gy as usize)
            }
        }
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)` in continuous coordinates.
    pub fn bounds(&self) -> (f32, f32, f32, f32) {
        match self {
            Shape::Rect { x0, y0, x1, y1 } => (*x0, *y0, *x1, *y1),
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(*ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Polygon { points } => points.iter().fold(
                (f32::MAX, f32::MAX, f32::MIN, f32::MIN),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
            Shape::Capsule { ax, ay, bx, by, radius } => (
                ax.min(*bx) - radius,
                ay.min(*by) - radius,
                ax.max(*bx) + radius,
                ay.max(*by) + radius,
            ),
            Shape::Text { x, y, scale, text } => {
                (*x, *y, x + 8.0 * scale * text.chars().count() as f32, y + 8.0 * scale)
            }
        }
    }
}

fn polygon_contains(points: &[(f32, f32)], px: f32, py: f32) -> bool {
    // even-odd rule
    let mut inside = false;
    let n = points.len();
    for i in 0..n {
        let (xi, yi) = points[i];
        let (xj, yj) = points[(i + n - 1) % n];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn glyph_bit(ch: char, col: usize, row: usize) -> bool {
    use font8x8::UnicodeFonts;
    font8x8::BASIC_FONTS
        .get(ch)
        .map(|rows| rows[row] & (1 << col) != 0)
        .unwrap_or(false)
}

/// One painted layer of an overlay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub shape: Shape,
    pub color: [u8; 3],
}

/// A non-photographic element: layers painted back to front. Its alpha is the
/// coverage of the union of its layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub layers: Vec<Layer>,
}

/// Per-pixel alpha and premultiplied colour of an overlay over a frame.
pub struct OverlayRaster {
    pub width: u32,
    pub height: u32,
    pub alpha: Vec<f32>,
    pub color: Vec<[f32; 3]>,
}

impl Overlay {
    pub fn rasterize(&self, width: u32, height: u32) -> OverlayRaster {
        let n = (width * height) as usize;
        let mut alpha = vec![0.0f32; n];
        let mut color = vec![[0.0f32; 3]; n];
        let Some((bx0, by0, bx1, by1)) = self.pixel_bounds(width, height) else {
            return OverlayRaster { width, height, alpha, color };
        };
        let ss = SUPERSAMPLE as f32;
        let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        for y in by0..by1 {
            for x in bx0..bx1 {
                let mut hits = 0u32;
                let mut acc = [0.0f32; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) / ss;
                        let py = y as f32 + (sy as f32 + 0.5) / ss;
                        if let Some(layer) = self.layers.iter().rev().find(|l| l.shape.contains(px, py)) {
                            hits += 1;
                            for c in 0..3 {
                                acc[c] += layer.color[c] as f32;
                            }
                        }
                    }
                }
                if hits > 0 {
                    let i = (y * width + x) as usize;
                    alpha[i] = hits as f32 / total;
                    color[i] = acc.map(|a| a / total);
                }
            }
        }
        OverlayRaster { width, height, alpha, color }
    }

    fn pixel_bounds(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        for l in &self.layers {
            let (a, b, c, d) = l.shape.bounds();
            x0 = x0.min(a);
            y0 = y0.min(b);
            x1 = x1.max(c);
            y1 = y1.max(d);
        }
        let cx0 = x0.floor().max(0.0) as u32;
        let cy0 = y0.floor().max(0.0) as u32;
        let cx1 = (x1.ceil().max(0.0) as u32).min(width);
        let cy1 = (y1.ceil().max(0.0) as u32).min(height);
        (cx0 < cx1 && cy0 < cy1).then_some((cx0, cy0, cx1, cy1))
    }
}

/// Alpha-composites overlays in order onto `background` and returns the
/// composite together with its mask: NP wherever the combined overlay alpha
/// reaches [`NP_ALPHA_THRESHOLD`], P elsewhere.
pub fn composite(background: &RgbImage, overlays: &[Overlay]) -> Result<(RgbImage, MaskImage)> {
    let (w, h) = background.dimensions();
    let mut acc: Vec<[f32; 3]> = background.pixels().map(|p| p.0.map(f32::from)).collect();
    let mut transmit = vec![1.0f32; (w * h) as usize];
    for overlay in overlays {
        let r = overlay.rasterize(w, h);
        for i in 0..acc.len() {
            let a = r.alpha[i];
            if a > 0.0 {
                for c in 0..3 {
                    acc[i][c] = r.color[i][c] + (1.0 - a) * acc[i][c];
                }
                transmit[i] *= 1.0 - a;
            }
        }
    }
    let image = RgbImage::from_fn(w, h, |x, y| {
        let p = acc[(y * w + x) as usize];
        Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    let mask = mask_from_transmittance(w, h, &transmit)?;
    Ok((image, mask))
}

/// Ground-truth mask of overlays alone, without touching any pixels.
pub fn overlay_mask(width: u32, height: u32, overlays: &[Overlay]) -> Result<MaskImage> {
    let mut transmit = vec![1.0f32; (width * height) as usize];
    for overlay in overlays {
        let r = overlay.rasterize(width, height);
        for (t, a) in transmit.iter_mut().zip(&r.alpha) {
            *t *= 1.0 - a;
        }
    }
    mask_from_transmittance(width, height, &transmit)
}

fn mask_from_transmittance(width: u32, height: u32, transmit: &[f32]) -> Result<MaskImage> {
    let labels = transmit
        .iter()
        .map(|&t| {
            if 1.0 - t >= NP_ALPHA_THRESHOLD {
                ContentClass::NP.label()
            } else {
                ContentClass::P.label()
            }
        })
        .collect();
    MaskImage::new(width, height, labels)
}
