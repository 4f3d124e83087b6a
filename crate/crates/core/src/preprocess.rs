//! Contrast stretching, resizing and the paired image / mask augmentation
//! pipeline.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::MaskImage;
use crate::error::{ensure, Result};

pub const CLASSIFIER_INPUT: u32 = 518;
pub const SEGMENTER_INPUT: u32 = 512;

pub fn luminance(p: &Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

pub fn to_grayscale(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let l = luminance(img.get_pixel(x, y)).round().clamp(0.0, 255.0) as u8;
        Rgb([l, l, l])
    })
}

/// Bilinear sample at continuous pixel-centre coordinates, clamping to the
/// border.
pub fn sample_bilinear(img: &RgbImage, x: f32, y: f32) -> Rgb<u8> {
    let v = sample_bilinear_f32(img, x, y);
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

fn sample_bilinear_f32(img: &RgbImage, x: f32, y: f32) -> [f32; 3] {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f32, y - y0 as f32);
    let p00 = img.get_pixel(x0, y0);
    let p10 = img.get_pixel(x1, y0);
    let p01 = img.get_pixel(x0, y1);
    let p11 = img.get_pixel(x1, y1);
    std::array::from_fn(|k| {
        let a = p00[k] as f32 * (1.0 - tx) + p10[k] as f32 * tx;
        let b = p01[k] as f32 * (1.0 - tx) + p11[k] as f32 * tx;
        a * (1.0 - ty) + b * ty
    })
}

/// Bilinear resize with half-pixel centres. At an exact factor of two every
/// output pixel is the mean of a 2x2 input block.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let sx = img.width() as f32 / width as f32;
    let sy = img.height() as f32 / height as f32;
    RgbImage::from_fn(width, height, |x, y| {
        sample_bilinear(img, (x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
    })
}

pub fn resize_for_classifier(img: &RgbImage, size: u32) -> Result<RgbImage> {
    ensure!(img.width() > 0 && img.height() > 0, "empty image");
    Ok(resize_bilinear(img, size, size))
}

pub fn resize_for_segmenter(img: &RgbImage, mask: Option<&MaskImage>, size: u32) -> Result<(RgbImage, Option<MaskImage>)> {
    ensure!(img.width() > 0 && img.height() > 0, "empty image");
    let mask = mask.map(|m| m.resize_nearest(size, size)).transpose()?;
    Ok((resize_bilinear(img, size, size), mask))
}

/// Percentile of `values` with linear interpolation between order statistics.
fn percentile(sorted: &[f32], pct: f64) -> f32 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = (rank - lo as f64) as f32;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Linearly remaps luminance so that the `low_pct` percentile goes to 0 and
/// the `high_pct` percentile to 255, clipping outside. Each pixel's RGB is
/// scaled by the same factor, preserving colour ratios. Images whose
/// percentile range is empty are returned unchanged.
pub fn contrast_stretch(img: &RgbImage, low_pct: f64, high_pct: f64) -> Result<RgbImage> {
    ensure!(
        0.0 <= low_pct && low_pct < high_pct && high_pct <= 100.0,
        "need 0 <= low ({low_pct}) < high ({high_pct}) <= 100"
    );
    let mut lum: Vec<f32> = img.pixels().map(luminance).collect();
    if lum.is_empty() {
        return Ok(img.clone());
    }
    lum.sort_by(f32::total_cmp);
    let lo = percentile(&lum, low_pct);
    let hi = percentile(&lum, high_pct);
    if hi - lo < 1e-3 {
        return Ok(img.clone());
    }
    let gain = 255.0 / (hi - lo);
    Ok(RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let l = luminance(p);
        let target = ((l - lo) * gain).clamp(0.0, 255.0);
        if l <= 1e-6 {
            let v = target.round() as u8;
            Rgb([v, v, v])
        } else {
            let k = target / l;
            Rgb(p.0.map(|c| (c as f32 * k).round().clamp(0.0, 255.0) as u8))
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_max: f32,
    /// Maximum corner displacement as a fraction of half the image side.
    pub perspective_distortion: f32,
    pub perspective_prob: f64,
    /// Random crops keep at least this fraction of the side; 1 disables cropping.
    pub crop_scale_min: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Upper bound of the noise standard deviation as a fraction of the
    /// intensity range; each call draws sigma uniformly below it.
    pub gaussian_noise_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotation_max: 15.0,
            perspective_distortion: 0.2,
            perspective_prob: 0.5,
            crop_scale_min: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            gaussian_noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
            ("perspective_prob", self.perspective_prob),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} = {p} is not a probability");
        }
        ensure!(self.gaussian_noise_sigma >= 0.0, "noise sigma must be non-negative");
        ensure!(self.rotation_max >= 0.0, "rotation_max must be non-negative");
        ensure!(
            (0.0..1.0).contains(&self.perspective_distortion),
            "perspective_distortion must be in [0, 1)"
        );
        ensure!(
            self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0,
            "crop_scale_min must be in (0, 1]"
        );
        for (name, j) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            ensure!((0.0..1.0).contains(&j), "{name} jitter must be in [0, 1)");
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn apply(m: &Mat3, x: f64, y: f64) -> (f64, f64) {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    (
        (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
    )
}

/// Homography taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<Mat3> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the 8x9 augmented system.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let d = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..8 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in col..9 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    let h: Vec<f64> = (0..8).map(|r| a[r][8]).collect();
    Some([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

/// Samples the geometric part of an augmentation as a map from output pixel
/// coordinates to source coordinates. `None` means identity.
fn sample_geometry(rng: &mut impl Rng, cfg: &AugmentConfig, w: u32, h: u32) -> Option<Mat3> {
    let (wf, hf) = (w as f64, h as f64);
    let mut m = IDENTITY;
    let mut changed = false;

    // Built from the output side inwards: crop, perspective, rotation, flips.
    let scale = if cfg.crop_scale_min < 1.0 {
        rng.gen_range(cfg.crop_scale_min..=1.0) as f64
    } else {
        1.0
    };
    if scale < 1.0 {
        let cw = wf * scale;
        let ch = hf * scale;
        let x0 = rng.gen_range(0.0..=wf - cw);
        let y0 = rng.gen_range(0.0..=hf - ch);
        m = mat_mul(&m, &[[scale, 0.0, x0], [0.0, scale, y0], [0.0, 0.0, 1.0]]);
        changed = true;
    }

    if cfg.perspective_distortion > 0.0 && rng.gen_bool(cfg.perspective_prob) {
        let d = cfg.perspective_distortion as f64;
        let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
        let moved: [(f64, f64); 4] = std::array::from_fn(|i| {
            let (x, y) = corners[i];
            let dx = rng.gen_range(0.0..=d) * wf / 2.0;
            let dy = rng.gen_range(0.0..=d) * hf / 2.0;
            (
                if x == 0.0 { x + dx } else { x - dx },
                if y == 0.0 { y + dy } else { y - dy },
            )
        });
        // Output corners show the source at `moved` positions.
        if let Some(hm) = homography(&corners, &moved) {
            m = mat_mul(&m, &hm);
            changed = true;
        }
    }

    if cfg.rotation_max > 0.0 {
        let deg = rng.gen_range(-cfg.rotation_max..=cfg.rotation_max) as f64;
        if deg != 0.0 {
            let (s, c) = deg.to_radians().sin_cos();
            let (cx, cy) = (wf / 2.0, hf / 2.0);
            let rot = [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
                [0.0, 0.0, 1.0],
            ];
            m = mat_mul(&m, &rot);
            changed = true;
        }
    }

    if rng.gen_bool(cfg.flip_h_prob) {
        m = mat_mul(&m, &[[-1.0, 0.0, wf], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        changed = true;
    }
    if rng.gen_bool(cfg.flip_v_prob) {
        m = mat_mul(&m, &[[1.0, 0.0, 0.0], [0.0, -1.0, hf], [0.0, 0.0, 1.0]]);
        changed = true;
    }
    changed.then_some(m)
}

pub(crate) fn warp_image(img: &RgbImage, m: &Mat3) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = apply(m, x as f64 + 0.5, y as f64 + 0.5);
        sample_bilinear(img, (sx - 0.5) as f32, (sy - 0.5) as f32)
    })
}

fn nearest_src(sx: f64, sy: f64, w: u32, h: u32) -> (u32, u32) {
    let ix = (sx.floor().max(0.0) as u32).min(w - 1);
    let iy = (sy.floor().max(0.0) as u32).min(h - 1);
    (ix, iy)
}

pub(crate) fn warp_mask(mask: &MaskImage, m: &Mat3) -> Result<MaskImage> {
    let (w, h) = mask.dimensions();
    MaskImage::from_fn(w, h, |x, y| {
        let (sx, sy) = apply(m, x as f64 + 0.5, y as f64 + 0.5);
        let (ix, iy) = nearest_src(sx, sy, w, h);
        mask.get(ix, iy)
    })
}

fn photometric(rng: &mut impl Rng, cfg: &AugmentConfig, img: &mut RgbImage) {
    let jitter = |rng: &mut ChaCha8Rng, j: f32| if j > 0.0 { rng.gen_range(1.0 - j..=1.0 + j) } else { 1.0 };
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    let b = jitter(&mut local, cfg.brightness);
    let c = jitter(&mut local, cfg.contrast);
    let s = jitter(&mut local, cfg.saturation);
    let sigma = if cfg.gaussian_noise_sigma > 0.0 {
        local.gen_range(0.0..=cfg.gaussian_noise_sigma) * 255.0
    } else {
        0.0
    };
    let mean = img.pixels().map(luminance).sum::<f32>() / (img.width() * img.height()) as f32 * b;
    let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
    for p in img.pixels_mut() {
        let mut v = p.0.map(|x| x as f32 * b);
        for x in v.iter_mut() {
            *x = mean + c * (*x - mean);
        }
        let g = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        for x in v.iter_mut() {
            *x = g + s * (*x - g);
            if sigma > 0.0 {
                *x += normal.sample(&mut local);
            }
        }
        p.0 = v.map(|x| x.round().clamp(0.0, 255.0) as u8);
    }
}

/// Applies one random augmentation drawn from `seed`. Geometric transforms hit
/// image and mask identically (nearest-neighbour for the mask), photometric
/// ones only the image.
pub fn augment(
    img: &RgbImage,
    mask: Option<&MaskImage>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(RgbImage, Option<MaskImage>)> {
    if let Some(m) = mask {
        ensure!(
            m.dimensions() == img.dimensions(),
            "mask {:?} does not match image {:?}",
            m.dimensions(),
            img.dimensions()
        );
    }
    if !cfg.enabled {
        return Ok((img.clone(), mask.cloned()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = sample_geometry(&mut rng, cfg, img.width(), img.height());
    let (mut out, out_mask) = match &geometry {
        Some(m) => (
            warp_image(img, m),
            mask.map(|k| warp_mask(k, m)).transpose()?,
        ),
        None => (img.clone(), mask.cloned()),
    };
    photometric(&mut rng, cfg, &mut out);
    Ok((out, out_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ContentClass;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = f(x, y);
            Rgb([v, v, v])
        })
    }

    #[test]
    fn stretch_full_range_is_identity() {
        let img = gray(16, 16, |x, y| ((x * 16 + y) % 256) as u8);
        let img = {
            let mut i = img;
            i.put_pixel(0, 0, Rgb([0, 0, 0]));
            i.put_pixel(1, 0, Rgb([255, 255, 255]));
            i
        };
        assert_eq!(contrast_stretch(&img, 0.0, 100.0).unwrap(), img);
    }

    #[test]
    fn stretch_constant_image_is_unchanged() {
        let img = gray(8, 8, |_, _| 128);
        assert_eq!(contrast_stretch(&img, 2.0, 98.0).unwrap(), img);
    }

    #[test]
    fn stretch_two_valued_image_to_extremes() {
        // affine map v -> (v - 50) * 255 / 50
        let img = gray(4, 4, |x, _| if x < 2 { 50 } else { 100 });
        let out = contrast_stretch(&img, 0.0, 100.0).unwrap();
        for (x, _, p) in out.enumerate_pixels() {
            assert_eq!(p.0, if x < 2 { [0, 0, 0] } else { [255, 255, 255] });
        }
    }

    #[test]
    fn stretch_preserves_colour_ratios() {
        let mut img = gray(4, 4, |x, _| (x * 40) as u8);
        img.put_pixel(2, 2, Rgb([40, 80, 20]));
        let out = contrast_stretch(&img, 0.0, 100.0).unwrap();
        let p = out.get_pixel(2, 2);
        assert!((p[1] as f32 / p[0] as f32 - 2.0).abs() < 0.1);
        assert!((p[0] as f32 / p[2] as f32 - 2.0).abs() < 0.2);
    }

    #[test]
    fn stretch_rejects_bad_percentiles() {
        let img = gray(2, 2, |_, _| 1);
        assert!(contrast_stretch(&img, 50.0, 50.0).is_err());
        assert!(contrast_stretch(&img, -1.0, 50.0).is_err());
        assert!(contrast_stretch(&img, 0.0, 101.0).is_err());
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let img = gray(1036, 1036, |x, y| ((x * 7 + y * 13) % 200) as u8);
        let out = resize_for_classifier(&img, CLASSIFIER_INPUT).unwrap();
        assert_eq!(out.dimensions(), (518, 518));
        for &(x, y) in &[(0u32, 0u32), (17, 300), (517, 517), (200, 3)] {
            let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .map(|(dx, dy)| img.get_pixel(2 * x + dx, 2 * y + dy)[0] as u32)
                .sum();
            let expected = (s as f32 / 4.0).round() as u8;
            assert_eq!(out.get_pixel(x, y)[0], expected);
        }
    }

    #[test]
    fn classifier_size_input_is_unchanged() {
        let img = gray(518, 518, |x, y| ((x ^ y) & 255) as u8);
        assert_eq!(resize_for_classifier(&img, CLASSIFIER_INPUT).unwrap(), img);
    }

    #[test]
    fn segmenter_resize_keeps_mask_labels() {
        let img = gray(300, 200, |x, _| x as u8);
        let mask = MaskImage::from_fn(300, 200, |x, y| if (x / 7 + y / 5) % 2 == 0 { ContentClass::NP } else { ContentClass::P }).unwrap();
        let (i, m) = resize_for_segmenter(&img, Some(&mask), SEGMENTER_INPUT).unwrap();
        let m = m.unwrap();
        assert_eq!(i.dimensions(), (512, 512));
        assert_eq!(m.dimensions(), (512, 512));
        assert!(m.labels().iter().all(|&l| l <= 1));
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = gray(20, 10, |x, y| (x * y) as u8);
        let mask = MaskImage::from_fn(20, 10, |x, _| if x < 5 { ContentClass::NP } else { ContentClass::P }).unwrap();
        let (i, m) = augment(&img, Some(&mask), &AugmentConfig::disabled(), 4).unwrap();
        assert_eq!(i, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn horizontal_flip_mirrors_mask() {
        let cfg = AugmentConfig {
            flip_h_prob: 1.0,
            flip_v_prob: 0.0,
            rotation_max: 0.0,
            perspective_distortion: 0.0,
            crop_scale_min: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            gaussian_noise_sigma: 0.0,
            ..AugmentConfig::default()
        };
        let img = gray(16, 8, |x, _| x as u8 * 10);
        let mask = MaskImage::from_fn(16, 8, |x, _| if x < 8 { ContentClass::NP } else { ContentClass::P }).unwrap();
        let (i, m) = augment(&img, Some(&mask), &cfg, 1).unwrap();
        let m = m.unwrap();
        for y in 0..8 {
            for x in 0..16 {
                assert_eq!(m.get(x, y), if x >= 8 { ContentClass::NP } else { ContentClass::P });
                assert_eq!(i.get_pixel(x, y)[0], (15 - x) as u8 * 10);
            }
        }
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let img = gray(4, 4, |_, _| 0);
        let mask = MaskImage::filled(3, 4, ContentClass::P).unwrap();
        assert!(augment(&img, Some(&mask), &AugmentConfig::default(), 0).is_err());
    }

    #[test]
    fn homography_maps_corners() {
        let from = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let to = [(1.0, 2.0), (9.0, 1.0), (8.0, 9.0), (2.0, 8.0)];
        let h = homography(&from, &to).unwrap();
        for i in 0..4 {
            let (x, y) = apply(&h, from[i].0, from[i].1);
            assert!((x - to[i].0).abs() < 1e-9 && (y - to[i].1).abs() < 1e-9);
        }
    }

    #[test]
    fn geometric_alignment_with_recompositing() {
        // A flat-coloured rectangle on a background that never uses that
        // colour: after any geometric warp, the warped mask must mark exactly
        // the pixels that carry the rectangle colour.
        let (w, h) = (40u32, 32u32);
        let ink = Rgb([255, 0, 0]);
        let bg = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 200]));
        let mut img = bg.clone();
        let mask = MaskImage::from_fn(w, h, |x, y| {
            if (10..25).contains(&x) && (6..20).contains(&y) {
                ContentClass::NP
            } else {
                ContentClass::P
            }
        })
        .unwrap();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == ContentClass::NP {
                    img.put_pixel(x, y, ink);
                }
            }
        }
        let cfg = AugmentConfig { flip_h_prob: 0.5, flip_v_prob: 0.5, ..AugmentConfig::default() };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let Some(m) = sample_geometry(&mut rng, &cfg, w, h) else { continue };
            let wi = RgbImage::from_fn(w, h, |x, y| {
                let (sx, sy) = apply(&m, x as f64 + 0.5, y as f64 + 0.5);
                let (ix, iy) = nearest_src(sx, sy, w, h);
                *img.get_pixel(ix, iy)
            });
            let wm = warp_mask(&mask, &m).unwrap();
            for (x, y, p) in wi.enumerate_pixels() {
                assert_eq!(*p == ink, wm.get(x, y) == ContentClass::NP, "seed {seed} at ({x},{y})");
            }
        }
    }

    proptest! {
        #[test]
        fn augmentation_is_reproducible_and_label_closed(seed in any::<u64>(), w in 4u32..24, h in 4u32..24) {
            let img = gray(w, h, |x, y| ((x * 31 + y * 17) % 256) as u8);
            let mask = MaskImage::from_fn(w, h, |x, y| if (x + 2 * y) % 5 < 2 { ContentClass::NP } else { ContentClass::P }).unwrap();
            let cfg = AugmentConfig::default();
            let (a, ma) = augment(&img, Some(&mask), &cfg, seed).unwrap();
            let (b, mb) = augment(&img, Some(&mask), &cfg, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&ma, &mb);
            let ma = ma.unwrap();
            prop_assert_eq!(ma.dimensions(), (w, h));
            prop_assert!(ma.labels().iter().all(|&l| l <= 1));
        }
    }
}
