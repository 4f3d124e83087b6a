//! Synthetic corpus fabrication.
//!
//! Homogeneous P frames are crops of photographic pool images, homogeneous NP
//! frames are procedurally drawn graphics on flat or gradient backgrounds and
//! heterogeneous frames composite graphic overlays onto photographic crops,
//! producing an exact ground-truth mask. Frames are grouped into synthetic
//! videos that share their photo sources and overlay style.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{composite, Layer, Overlay, Shape};
use super::{
    write_mask, ContentClass, CorpusManifest, FrameKind, FrameRecord, Homogeneity, Provenance,
    VideoRecord,
};
use crate::error::{ensure, Error, Result};
use crate::preprocess::{sample_bilinear, to_grayscale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlayKind {
    Text,
    LineDrawing,
    FilledShape,
    CartoonSprite,
}

impl OverlayKind {
    pub const ALL: [OverlayKind; 4] = [
        OverlayKind::Text,
        OverlayKind::LineDrawing,
        OverlayKind::FilledShape,
        OverlayKind::CartoonSprite,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub n_homogeneous_p: usize,
    pub n_homogeneous_np: usize,
    pub n_heterogeneous: usize,
    pub n_videos: usize,
    /// Side length of the square frames.
    pub image_size: u32,
    pub overlay_coverage_range: [f64; 2],
    pub overlay_kinds: Vec<OverlayKind>,
    pub grayscale_fraction: f64,
    /// Standard deviation of the film grain added to every frame, in 8-bit
    /// intensity units.
    pub film_grain: f32,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            n_homogeneous_p: 300,
            n_homogeneous_np: 300,
            n_heterogeneous: 200,
            n_videos: 40,
            image_size: 128,
            overlay_coverage_range: [0.05, 0.45],
            overlay_kinds: OverlayKind::ALL.to_vec(),
            grayscale_fraction: 0.5,
            film_grain: 2.0,
        }
    }
}

impl SynthesisSpec {
    pub fn total_frames(&self) -> usize {
        self.n_homogeneous_p + self.n_homogeneous_np + self.n_heterogeneous
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.overlay_coverage_range;
        ensure!(
            0.0 < lo && lo <= hi && hi < 1.0,
            "overlay coverage range [{lo}, {hi}] must lie inside (0, 1)"
        );
        ensure!(self.n_videos >= 3, "need at least 3 videos so every split can get one");
        ensure!(
            self.total_frames() >= self.n_videos,
            "{} frames cannot populate {} videos",
            self.total_frames(),
            self.n_videos
        );
        ensure!(self.image_size >= 32, "image size {} is too small", self.image_size);
        ensure!(!self.overlay_kinds.is_empty(), "at least one overlay kind is required");
        ensure!(
            (0.0..=1.0).contains(&self.grayscale_fraction),
            "grayscale fraction must be in [0, 1]"
        );
        ensure!(self.film_grain >= 0.0, "film grain must be non-negative");
        Ok(())
    }
}

/// Square region of a pool image, resampled to the frame size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub source: usize,
    pub x: f32,
    pub y: f32,
    pub size: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Flat([u8; 3]),
    Gradient { from: [u8; 3], to: [u8; 3], angle: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FrameContent {
    Photo { crop: Crop },
    Graphic { background: Background, overlays: Vec<Overlay> },
    Hybrid { crop: Crop, overlays: Vec<Overlay> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame_id: String,
    pub video_id: String,
    pub sequence_id: String,
    pub grayscale: bool,
    pub grain_seed: u64,
    pub content: FrameContent,
}

impl FramePlan {
    pub fn kind(&self) -> FrameKind {
        match self.content {
            FrameContent::Photo { .. } => FrameKind::P,
            FrameContent::Graphic { .. } => FrameKind::Np,
            FrameContent::Hybrid { .. } => FrameKind::Heterogeneous,
        }
    }
}

struct VideoStyle {
    sources: [usize; 2],
    palette: Vec<[u8; 3]>,
    kinds: Vec<OverlayKind>,
    grayscale: bool,
    words: Vec<String>,
    /// Relative preference for NP, P and heterogeneous frames.
    weights: [f64; 3],
}

const WORDS: &[&str] = &[
    "NEU", "JETZT", "SUPER", "1958", "TEST", "KAUFEN", "FILM", "ENDE", "OHO", "PREIS", "DM 4.50",
    "BAU", "AKTION", "WERK", "STROM", "AUTO", "MILCH", "RADIO", "42", "TAG",
];

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn saturated_color(rng: &mut impl Rng) -> [u8; 3] {
    // Bright, flat poster colours.
    let mut c = [rng.gen_range(0..90u8), rng.gen_range(90..200u8), rng.gen_range(200..=255u8)];
    c.shuffle(rng);
    c
}

fn plan_style(rng: &mut impl Rng, spec: &SynthesisSpec, pool_len: usize) -> VideoStyle {
    let mut kinds = spec.overlay_kinds.clone();
    kinds.shuffle(rng);
    let keep = rng.gen_range(1..=kinds.len().min(3));
    kinds.truncate(keep);
    let mut palette: Vec<[u8; 3]> = (0..4).map(|_| saturated_color(rng)).collect();
    palette.push([rng.gen_range(0..40), rng.gen_range(0..40), rng.gen_range(0..40)]);
    palette.push([rng.gen_range(215..=255), rng.gen_range(215..=255), rng.gen_range(215..=255)]);
    let words = (0..3).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    let weights = match rng.gen_range(0..4) {
        0 => [0.05, 1.0, 0.25],
        1 => [1.0, 0.05, 0.25],
        2 => [1.0, 1.0, 0.5],
        _ => [0.4, 0.4, 1.0],
    };
    VideoStyle {
        sources: [rng.gen_range(0..pool_len), rng.gen_range(0..pool_len)],
        palette,
        kinds,
        grayscale: rng.gen_bool(spec.grayscale_fraction),
        words,
        weights,
    }
}

fn plan_crop(rng: &mut impl Rng, style: &VideoStyle, pool_dims: &[(u32, u32)]) -> Crop {
    let source = style.sources[rng.gen_range(0..2)];
    let (w, h) = pool_dims[source];
    let side = w.min(h) as f32;
    let size = side * rng.gen_range(0.5..=1.0f32);
    Crop {
        source,
        x: rng.gen_range(0.0..=(w as f32 - size)),
        y: rng.gen_range(0.0..=(h as f32 - size)),
        size,
    }
}

/// Overlay of the given kind whose silhouette has roughly `area` pixels.
pub fn make_overlay(
    rng: &mut impl Rng,
    kind: OverlayKind,
    area: f32,
    frame: f32,
    palette: &[[u8; 3]],
    words: &[String],
) -> Overlay {
    let pick = |rng: &mut dyn rand::RngCore| palette[rng.gen_range(0..palette.len())];
    let ink = *palette.iter().min_by_key(|c| c.iter().map(|&v| v as u32).sum::<u32>()).unwrap();
    match kind {
        OverlayKind::FilledShape => {
            let fill = pick(rng);
            let outline = rng.gen_bool(0.5);
            let shape = match rng.gen_range(0..3) {
                0 => {
                    let aspect = rng.gen_range(0.5..2.0f32);
                    let w = (area * aspect).sqrt().min(frame);
                    let h = (area / w).min(frame);
                    let x0 = rng.gen_range(0.0..=(frame - w).max(0.0));
                    let y0 = rng.gen_range(0.0..=(frame - h).max(0.0));
                    Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
                }
                1 => {
                    let aspect = rng.gen_range(0.6..1.6f32);
                    let r = (area / PI).sqrt();
                    let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
                    let m = rx.max(ry).min(frame / 2.0);
                    Shape::Ellipse {
                        cx: rng.gen_range(m..=frame - m),
                        cy: rng.gen_range(m..=frame - m),
                        rx,
                        ry,
                        angle: rng.gen_range(0.0..PI),
                    }
                }
                _ => {
                    let n = rng.gen_range(3..=6);
                    let r = (2.0 * area / (n as f32 * (2.0 * PI / n as f32).sin())).sqrt();
                    let m = r.min(frame / 2.0);
                    let (cx, cy) = (rng.gen_range(m..=frame - m), rng.gen_range(m..=frame - m));
                    let phase = rng.gen_range(0.0..PI);
                    let points = (0..n)
                        .map(|i| {
                            let t = phase + 2.0 * PI * i as f32 / n as f32;
                            (cx + r * t.cos(), cy + r * t.sin())
                        })
                        .collect();
                    Shape::Polygon { points }
                }
            };
            let mut layers = Vec::new();
            if outline {
                layers.push(Layer { shape: shape.clone(), color: ink });
                layers.push(Layer { shape: shrink(&shape, 1.5), color: fill });
            } else {
                layers.push(Layer { shape, color: fill });
            }
            Overlay { layers }
        }
        OverlayKind::Text => {
            let word = words[rng.gen_range(0..words.len())].clone();
            let len = word.chars().count().max(1) as f32;
            let banner = rng.gen_bool(0.5);
            // bare glyphs cover roughly a third of their box
            let box_area = if banner { area } else { area * 3.0 };
            let scale = (box_area / (64.0 * len)).sqrt().min(frame / (8.0 * len + 4.0)).max(1.0);
            let (tw, th) = (8.0 * scale * len, 8.0 * scale);
            let x = rng.gen_range(2.0..=(frame - tw - 2.0).max(2.0));
            let y = rng.gen_range(2.0..=(frame - th - 2.0).max(2.0));
            let text = Shape::Text { x, y, scale, text: word };
            let color = pick(rng);
            if banner {
                let pad = scale * 2.0;
                let plate = Shape::Rect { x0: x - pad, y0: y - pad, x1: x + tw + pad, y1: y + th + pad };
                let plate_color = *palette
                    .iter()
                    .max_by_key(|c| c.iter().map(|&v| v as u32).sum::<u32>())
                    .unwrap();
                Overlay {
                    layers: vec![Layer { shape: plate, color: plate_color }, Layer { shape: text, color: ink }],
                }
            } else {
                Overlay { layers: vec![Layer { shape: text, color }] }
            }
        }
        OverlayKind::LineDrawing => {
            // bold strokes; hairlines vanish at segmenter resolution
            let radius = rng.gen_range(0.02..0.04f32) * frame;
            let span = (area / (2.0 * radius)).clamp(8.0, 6.0 * frame);
            let segments = rng.gen_range(3..=8);
            let step = span / segments as f32;
            let mut x = rng.gen_range(0.2 * frame..0.8 * frame);
            let mut y = rng.gen_range(0.2 * frame..0.8 * frame);
            let mut heading = rng.gen_range(0.0..2.0 * PI);
            let color = ink;
            let mut layers = Vec::new();
            for _ in 0..segments {
                heading += rng.gen_range(-1.2..1.2f32);
                let nx = (x + step * heading.cos()).clamp(2.0, frame - 2.0);
                let ny = (y + step * heading.sin()).clamp(2.0, frame - 2.0);
                layers.push(Layer { shape: Shape::Capsule { ax: x, ay: y, bx: nx, by: ny, radius }, color });
                x = nx;
                y = ny;
            }
            Overlay { layers }
        }
        OverlayKind::CartoonSprite => {
            let r = (area / PI).sqrt().clamp(4.0, frame / 2.0 - 1.0);
            let cx = rng.gen_range(r..=frame - r);
            let cy = rng.gen_range(r..=frame - r);
            let face = pick(rng);
            let circle = |x: f32, y: f32, rad: f32| Shape::Ellipse { cx: x, cy: y, rx: rad, ry: rad, angle: 0.0 };
            let mut layers = vec![
                Layer { shape: circle(cx, cy, r), color: ink },
                Layer { shape: circle(cx, cy, r * 0.9), color: face },
            ];
            for dx in [-0.35f32, 0.35] {
                layers.push(Layer { shape: circle(cx + dx * r, cy - 0.25 * r, 0.2 * r), color: [250, 250, 250] });
                layers.push(Layer { shape: circle(cx + dx * r, cy - 0.2 * r, 0.09 * r), color: ink });
            }
            let mw = (0.08 * r).max(0.8);
            layers.push(Layer {
                shape: Shape::Capsule { ax: cx - 0.4 * r, ay: cy + 0.3 * r, bx: cx, by: cy + 0.5 * r, radius: mw },
                color: ink,
            });
            layers.push(Layer {
                shape: Shape::Capsule { ax: cx, ay: cy + 0.5 * r, bx: cx + 0.4 * r, by: cy + 0.3 * r, radius: mw },
                color: ink,
            });
            Overlay { layers }
        }
    }
}

fn shrink(shape: &Shape, by: f32) -> Shape {
    match shape {
        Shape::Rect { x0, y0, x1, y1 } => Shape::Rect { x0: x0 + by, y0: y0 + by, x1: x1 - by, y1: y1 - by },
        Shape::Ellipse { cx, cy, rx, ry, angle } => Shape::Ellipse {
            cx: *cx,
            cy: *cy,
            rx: (rx - by).max(0.0),
            ry: (ry - by).max(0.0),
            angle: *angle,
        },
        Shape::Polygon { points } => {
            let n = points.len() as f32;
            let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
            let r = points.iter().map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt()).fold(0.0f32, f32::max);
            let k = ((r - 2.0 * by) / r).max(0.0);
            Shape::Polygon { points: points.iter().map(|(x, y)| (mx + (x - mx) * k, my + (y - my) * k)).collect() }
        }
        other => other.clone(),
    }
}

fn plan_graphic(rng: &mut impl Rng, style: &VideoStyle, frame: f32) -> FrameContent {
    let a = style.palette[rng.gen_range(0..style.palette.len())];
    let background = if rng.gen_bool(0.4) {
        Background::Flat(a)
    } else {
        let b = style.palette[rng.gen_range(0..style.palette.len())];
        Background::Gradient { from: a, to: b, angle: rng.gen_range(0.0..2.0 * PI) }
    };
    let n = rng.gen_range(2..=6);
    let overlays = (0..n)
        .map(|_| {
            let kind = style.kinds[rng.gen_range(0..style.kinds.len())];
            let area = rng.gen_range(0.02..0.2f32) * frame * frame;
            make_overlay(rng, kind, area, frame, &style.palette, &style.words)
        })
        .collect();
    FrameContent::Graphic { background, overlays }
}

fn plan_hybrid(
    rng: &mut impl Rng,
    spec: &SynthesisSpec,
    style: &VideoStyle,
    pool_dims: &[(u32, u32)],
    frame: f32,
) -> FrameContent {
    let crop = plan_crop(rng, style, pool_dims);
    let [lo, hi] = spec.overlay_coverage_range;
    let coverage = rng.gen_range(lo..=hi) as f32;
    let n = rng.gen_range(1..=3usize);
    let mut shares: Vec<f32> = (0..n).map(|_| rng.gen_range(0.3..1.0f32)).collect();
    let sum: f32 = shares.iter().sum();
    shares.iter_mut().for_each(|s| *s /= sum);
    let overlays = shares
        .iter()
        .map(|share| {
            let kind = style.kinds[rng.gen_range(0..style.kinds.len())];
            make_overlay(rng, kind, coverage * share * frame * frame, frame, &style.palette, &style.words)
        })
        .collect();
    FrameContent::Hybrid { crop, overlays }
}

/// Deterministically plans every frame of the corpus.
pub fn plan_corpus(spec: &SynthesisSpec, pool_dims: &[(u32, u32)], seed: u64) -> Result<Vec<Vec<FramePlan>>> {
    spec.validate()?;
    ensure!(!pool_dims.is_empty(), "photo pool is empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles: Vec<VideoStyle> = (0..spec.n_videos).map(|_| plan_style(&mut rng, spec, pool_dims.len())).collect();

    let mut kinds: Vec<FrameKind> = std::iter::repeat_n(FrameKind::P, spec.n_homogeneous_p)
        .chain(std::iter::repeat_n(FrameKind::Np, spec.n_homogeneous_np))
        .chain(std::iter::repeat_n(FrameKind::Heterogeneous, spec.n_heterogeneous))
        .collect();
    kinds.shuffle(&mut rng);

    let mut per_video: Vec<Vec<FrameKind>> = vec![Vec::new(); spec.n_videos];
    for (i, kind) in kinds.into_iter().enumerate() {
        let v = if i < spec.n_videos {
            i
        } else {
            let weights: Vec<f64> = styles.iter().map(|s| s.weights[kind.index()]).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            weights
                .iter()
                .position(|w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(spec.n_videos - 1)
        };
        per_video[v].push(kind);
    }

    let frame = spec.image_size as f32;
    let mut videos = Vec::with_capacity(spec.n_videos);
    for (vi, (mut frame_kinds, style)) in per_video.into_iter().zip(&styles).enumerate() {
        frame_kinds.sort();
        let video_id = format!("v{vi:03}");
        let mut plans = Vec::with_capacity(frame_kinds.len());
        let mut seq = 0usize;
        let mut left_in_seq = 0usize;
        let mut prev: Option<FrameKind> = None;
        for (fi, kind) in frame_kinds.into_iter().enumerate() {
            if prev != Some(kind) || left_in_seq == 0 {
                if prev.is_some() {
                    seq += 1;
                }
                left_in_seq = rng.gen_range(1..=6);
                prev = Some(kind);
            }
            left_in_seq -= 1;
            let content = match kind {
                FrameKind::P => FrameContent::Photo { crop: plan_crop(&mut rng, style, pool_dims) },
                FrameKind::Np => plan_graphic(&mut rng, style, frame),
                FrameKind::Heterogeneous => plan_hybrid(&mut rng, spec, style, pool_dims, frame),
            };
            plans.push(FramePlan {
                frame_id: format!("{video_id}_f{fi:04}"),
                video_id: video_id.clone(),
                sequence_id: format!("{video_id}_s{seq:03}"),
                grayscale: style.grayscale,
                grain_seed: rng.gen(),
                content,
            });
        }
        videos.push(plans);
    }
    Ok(videos)
}

fn render_crop(pool: &[RgbImage], crop: &Crop, size: u32) -> RgbImage {
    let src = &pool[crop.source];
    let scale = crop.size / size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let sx = crop.x + (x as f32 + 0.5) * scale - 0.5;
        let sy = crop.y + (y as f32 + 0.5) * scale - 0.5;
        sample_bilinear(src, sx, sy)
    })
}

fn render_background(bg: &Background, size: u32) -> RgbImage {
    match bg {
        Background::Flat(c) => RgbImage::from_pixel(size, size, Rgb(*c)),
        Background::Gradient { from, to, angle } => {
            let (s, c) = angle.sin_cos();
            let half = size as f32 / 2.0;
            let extent = half * (s.abs() + c.abs());
            RgbImage::from_fn(size, size, |x, y| {
                let d = (x as f32 + 0.5 - half) * c + (y as f32 + 0.5 - half) * s;
                let t = ((d / extent) * 0.5 + 0.5).clamp(0.0, 1.0);
                Rgb(std::array::from_fn(|k| {
                    (from[k] as f32 * (1.0 - t) + to[k] as f32 * t).round() as u8
                }))
            })
        }
    }
}

fn add_grain(img: &mut RgbImage, sigma: f32, seed: u64, grayscale: bool) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    for p in img.pixels_mut() {
        if grayscale {
            let n = normal.sample(&mut rng);
            p.0 = p.0.map(|v| (v as f32 + n).round().clamp(0.0, 255.0) as u8);
        } else {
            for v in p.0.iter_mut() {
                *v = (*v as f32 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Renders a planned frame; heterogeneous frames also yield their mask.
pub fn render_frame(
    plan: &FramePlan,
    pool: &[RgbImage],
    size: u32,
    grain: f32,
) -> Result<(RgbImage, Option<super::MaskImage>)> {
    let (mut img, mask) = match &plan.content {
        FrameContent::Photo { crop } => (render_crop(pool, crop, size), None),
        FrameContent::Graphic { background, overlays } => {
            let (img, _) = composite(&render_background(background, size), overlays)?;
            (img, None)
        }
        FrameContent::Hybrid { crop, overlays } => {
            let (img, mask) = composite(&render_crop(pool, crop, size), overlays)?;
            (img, Some(mask))
        }
    };
    if plan.grayscale {
        img = to_grayscale(&img);
    }
    add_grain(&mut img, grain, plan.grain_seed, plan.grayscale);
    Ok((img, mask))
}

/// Loads every PNG / JPEG image from `dir` in file-name order.
pub fn load_photo_pool(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "photo pool {} contains no images", dir.display());
    paths.iter().map(|p| Ok(image::open(p)?.to_rgb8())).collect()
}

/// Synthesizes the corpus into `out_dir` and writes `out_dir/manifest.json`.
///
/// Identical `(spec, pool, seed)` inputs produce byte-identical outputs.
pub fn synthesize_corpus(spec: &SynthesisSpec, photo_pool: &Path, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let pool = load_photo_pool(photo_pool)?;
    let min_side = pool.iter().map(|p| p.width().min(p.height())).min().unwrap_or(0);
    ensure!(min_side >= 8, "photo pool images must be at least 8 pixels on each side");
    let dims: Vec<(u32, u32)> = pool.iter().map(|p| p.dimensions()).collect();
    let plans = plan_corpus(spec, &dims, seed)?;

    fs::create_dir_all(out_dir.join("frames")).map_err(|e| Error::io(out_dir, e))?;
    let mut videos = Vec::with_capacity(plans.len());
    for video in &plans {
        let mut frames = Vec::with_capacity(video.len());
        for plan in video {
            let (img, mask) = render_frame(plan, &pool, spec.image_size, spec.film_grain)?;
            let image_path = PathBuf::from("frames").join(format!("{}.png", plan.frame_id));
            let abs = out_dir.join(&image_path);
            img.save(&abs)?;
            let gt_mask_path = match mask {
                Some(m) => {
                    let rel = PathBuf::from("masks").join("gt").join(format!("{}.png", plan.frame_id));
                    write_mask(&m, &out_dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let (homogeneity, global_class) = match plan.kind() {
                FrameKind::P => (Homogeneity::Homogeneous, Some(ContentClass::P)),
                FrameKind::Np => (Homogeneity::Homogeneous, Some(ContentClass::NP)),
                FrameKind::Heterogeneous => (Homogeneity::Heterogeneous, None),
            };
            frames.push(FrameRecord {
                frame_id: plan.frame_id.clone(),
                video_id: plan.video_id.clone(),
                sequence_id: plan.sequence_id.clone(),
                image_path,
                homogeneity,
                global_class,
                gt_mask_path,
                proxy_mask_path: None,
            });
        }
        let video_id = video.first().map(|p| p.video_id.clone()).unwrap_or_default();
        videos.push(VideoRecord::new(video_id, frames));
    }
    let mut manifest = CorpusManifest::new(Provenance::Synthetic, Some(seed), videos);
    manifest.base_dir = out_dir.to_path_buf();
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Writes `count` procedurally generated photograph-like images into `dir`.
///
/// The images mimic the statistics of photographs: multi-octave smooth noise
/// with a roughly 1/f spectrum, soft shaded objects, a lighting gradient and
/// sensor grain. They stand in for a real photo collection in tests.
pub fn generate_photo_pool(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    ensure!(count > 0, "photo pool needs at least one image");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let img = procedural_photo(&mut rng, size);
        let path = dir.join(format!("photo_{i:04}.png"));
        img.save(&path)?;
        out.push(path);
    }
    Ok(out)
}

fn procedural_photo(rng: &mut impl Rng, size: u32) -> RgbImage {
    let n = size as usize;
    // fine octaves with slow amplitude decay give the surface texture that
    // flat drawings lack
    let lum = fbm(rng, n, 7, 0.7);
    let hue = fbm(rng, n, 3, 0.5);
    let detail = fbm(rng, n, 3, 0.8);
    let c0 = random_color(rng).map(|v| v as f32 / 255.0);
    let c1 = random_color(rng).map(|v| v as f32 / 255.0);
    let light_angle = rng.gen_range(0.0..2.0 * PI);
    let light_strength = rng.gen_range(0.1..0.4f32);
    let objects: Vec<(f32, f32, f32, [f32; 3], f32)> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..size as f32),
                rng.gen_range(0.0..size as f32),
                rng.gen_range(0.08..0.3) * size as f32,
                random_color(rng).map(|v| v as f32 / 255.0),
                rng.gen_range(0.3..0.8f32),
            )
        })
        .collect();
    let grain = rng.gen_range(4.0..12.0f32) / 255.0;
    let normal = Normal::new(0.0f32, grain).expect("finite sigma");
    let (ls, lc) = light_angle.sin_cos();
    let mut img = RgbImage::new(size, size);
    for y in 0..n {
        for x in 0..n {
            let l = lum[y * n + x];
            let t = hue[y * n + x];
            let u = (x as f32 / n as f32 - 0.5) * lc + (y as f32 / n as f32 - 0.5) * ls;
            let light = 1.0 + light_strength * u;
            let mut rgb: [f32; 3] = std::array::from_fn(|k| (c0[k] * (1.0 - t) + c1[k] * t) * (0.25 + 1.0 * l));
            for &(ox, oy, r, col, texture) in &objects {
                let d2 = ((x as f32 - ox).powi(2) + (y as f32 - oy).powi(2)) / (r * r);
                if d2 < 1.0 {
                    // shaded, textured blob with a soft rim
                    let w = (1.0 - d2).powf(0.3);
                    let surface = 1.0 - texture + texture * 2.0 * detail[((x * 7 + y * 3) % n) * n + (y * 5 + x) % n];
                    let shade = (0.5 + 0.5 * (1.0 - d2).sqrt() * (0.6 + 0.4 * l)) * surface;
                    for k in 0..3 {
                        rgb[k] = rgb[k] * (1.0 - w) + col[k] * shade * w;
                    }
                }
            }
            let px = Rgb(std::array::from_fn(|k| {
                ((rgb[k] * light + normal.sample(rng)) * 255.0).round().clamp(0.0, 255.0) as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

/// Fractal value noise normalized to `[0, 1]`.
fn fbm(rng: &mut impl Rng, n: usize, octaves: u32, persistence: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; n * n];
    let mut amp = 1.0f32;
    let mut cells = 3usize;
    for _ in 0..octaves {
        let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
        let cell = n as f32 / cells as f32;
        for y in 0..n {
            let fy = y as f32 / cell;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..n {
                let fx = x as f32 / cell;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |i: usize, j: usize| lattice[j.min(cells) * (cells + 1) + i.min(cells)];
                let a = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let b = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                out[y * n + x] += amp * (a * (1.0 - ty) + b * ty);
            }
        }
        amp *= persistence;
        cells *= 2;
    }
    let (lo, hi) = out.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::raster::overlay_mask;
    use crate::corpus::read_mask;

    fn small_spec() -> SynthesisSpec {
        SynthesisSpec {
            n_homogeneous_p: 6,
            n_homogeneous_np: 6,
            n_heterogeneous: 6,
            n_videos: 4,
            image_size: 48,
            ..SynthesisSpec::default()
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = small_spec();
        s.n_videos = 2;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.overlay_coverage_range = [0.0, 0.5];
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.overlay_kinds.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pool = dir.path().join("pool");
        fs::create_dir_all(&pool).unwrap();
        let err = synthesize_corpus(&small_spec(), &pool, 0, &dir.path().join("out"));
        assert!(err.is_err());
    }

    #[test]
    fn no_heterogeneous_frames_when_count_is_zero() {
        let spec = SynthesisSpec { n_heterogeneous: 0, ..small_spec() };
        let plans = plan_corpus(&spec, &[(64, 64)], 3).unwrap();
        assert!(plans.iter().flatten().all(|p| p.kind() != FrameKind::Heterogeneous));
        assert_eq!(plans.iter().flatten().count(), 12);
    }

    #[test]
    fn every_video_gets_frames_and_counts_match() {
        let spec = small_spec();
        let plans = plan_corpus(&spec, &[(64, 64), (80, 70)], 11).unwrap();
        assert_eq!(plans.len(), 4);
        assert!(plans.iter().all(|v| !v.is_empty()));
        let all: Vec<_> = plans.iter().flatten().collect();
        assert_eq!(all.iter().filter(|p| p.kind() == FrameKind::P).count(), 6);
        assert_eq!(all.iter().filter(|p| p.kind() == FrameKind::Np).count(), 6);
        assert_eq!(all.iter().filter(|p| p.kind() == FrameKind::Heterogeneous).count(), 6);
    }

    #[test]
    fn single_rect_overlay_coverage_matches_pixel_count() {
        // Independent count: pixel centres inside the rectangle.
        let size = 100u32;
        for c in [0.05f32, 0.13, 0.27, 0.45] {
            let area = c * (size * size) as f32;
            let (x0, y0) = (7.3f32, 11.6f32);
            let w = (area * 1.4).sqrt();
            let h = area / w;
            let o = Overlay {
                layers: vec![Layer { shape: Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }, color: [0, 0, 255] }],
            };
            let bg = RgbImage::from_pixel(size, size, Rgb([90, 90, 90]));
            let (_, mask) = composite(&bg, &[o]).unwrap();
            let centres = |lo: f32, hi: f32| (0..size).filter(|&i| (i as f32 + 0.5) >= lo && (i as f32 + 0.5) < hi).count();
            let independent = centres(x0, x0 + w) * centres(y0, y0 + h);
            let np = mask.count(ContentClass::NP);
            assert!((np as i64 - independent as i64).unsigned_abs() as u32 <= size, "c={c}");
            assert!((np as f32 - area).abs() <= size as f32, "c={c}: {np} vs {area}");
        }
    }

    #[test]
    fn synthesis_is_byte_deterministic_and_masks_recomposite() {
        let dir = tempfile::tempdir().unwrap();
        let pool = dir.path().join("pool");
        generate_photo_pool(&pool, 2, 64, 5).unwrap();
        let spec = small_spec();
        let a = synthesize_corpus(&spec, &pool, 9, &dir.path().join("a")).unwrap();
        let b = synthesize_corpus(&spec, &pool, 9, &dir.path().join("b")).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        for f in a.frames() {
            let fa = fs::read(a.resolve(&f.image_path)).unwrap();
            let fb = fs::read(b.resolve(&f.image_path)).unwrap();
            assert_eq!(fa, fb, "frame {}", f.frame_id);
        }

        let dims = vec![(64, 64); 2];
        let plans = plan_corpus(&spec, &dims, 9).unwrap();
        for plan in plans.iter().flatten() {
            let rec = a.frame(&plan.frame_id).unwrap();
            assert_eq!(rec.kind(), plan.kind());
            if let FrameContent::Hybrid { overlays, .. } = &plan.content {
                let expected = overlay_mask(spec.image_size, spec.image_size, overlays).unwrap();
                let stored = read_mask(&a.resolve(rec.gt_mask_path.as_ref().unwrap())).unwrap();
                assert_eq!(stored, expected);
                assert!(stored.count(ContentClass::NP) > 0);
            } else {
                assert!(rec.gt_mask_path.is_none());
            }
            let img = image::open(a.resolve(&rec.image_path)).unwrap();
            assert_eq!(img.width(), spec.image_size);
        }
    }

    #[test]
    fn heterogeneous_coverage_stays_plausible() {
        let spec = SynthesisSpec { n_heterogeneous: 40, ..small_spec() };
        let plans = plan_corpus(&spec, &[(64, 64)], 2).unwrap();
        for plan in plans.iter().flatten() {
            if let FrameContent::Hybrid { overlays, .. } = &plan.content {
                let m = overlay_mask(48, 48, overlays).unwrap();
                let np = m.fraction(ContentClass::NP);
                assert!(np < 0.9, "{} covers {np}", plan.frame_id);
            }
        }
    }
}
