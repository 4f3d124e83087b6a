use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use super::{ContentClass, FrameRecord, Homogeneity};
use crate::error::{ensure, Error, Result};

/// Dense per-pixel P/NP label map with values in `{0 (NP), 1 (P)}`.
///
/// The same type carries homogeneous masks, proxy masks, ground truth and
/// segmentation predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        ensure!(width > 0 && height > 0, "mask dimensions must be positive, got {width}x{height}");
        ensure!(
            labels.len() == width as usize * height as usize,
            "mask of {width}x{height} needs {} labels, got {}",
            width as usize * height as usize,
            labels.len()
        );
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: u32, height: u32, class: ContentClass) -> Result<Self> {
        Self::new(width, height, vec![class.label(); width as usize * height as usize])
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> ContentClass) -> Result<Self> {
        let mut labels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y).label());
            }
        }
        Self::new(width, height, labels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> ContentClass {
        if self.labels[(y * self.width + x) as usize] == 0 {
            ContentClass::NP
        } else {
            ContentClass::P
        }
    }

    pub fn set(&mut self, x: u32, y: u32, class: ContentClass) {
        self.labels[(y * self.width + x) as usize] = class.label();
    }

    pub fn count(&self, class: ContentClass) -> usize {
        let l = class.label();
        self.labels.iter().filter(|&&v| v == l).count()
    }

    pub fn fraction(&self, class: ContentClass) -> f64 {
        self.count(class) as f64 / self.labels.len() as f64
    }

    /// Nearest-neighbour resampling; the label set is preserved.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Result<Self> {
        ensure!(width > 0 && height > 0, "target size must be positive");
        if (width, height) == self.dimensions() {
            return Ok(self.clone());
        }
        let xs = nearest_indices(self.width, width);
        let ys = nearest_indices(self.height, height);
        let mut labels = Vec::with_capacity(width as usize * height as usize);
        for &sy in &ys {
            let row = &self.labels[(sy * self.width) as usize..((sy + 1) * self.width) as usize];
            labels.extend(xs.iter().map(|&sx| row[sx as usize]));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([self.get(x, y).file_value()]))
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let mut labels = Vec::with_capacity(img.as_raw().len());
        for (i, &v) in img.as_raw().iter().enumerate() {
            labels.push(match v {
                0 => 0,
                255 => 1,
                other => {
                    let w = img.width() as usize;
                    return Err(Error::MaskDecode(format!(
                        "pixel ({}, {}) has value {other}; mask files hold only 0 and 255",
                        i % w,
                        i / w
                    )));
                }
            });
        }
        Self::new(img.width(), img.height(), labels)
    }
}

/// Source index for each of `dst` output samples when resampling `src`
/// samples by nearest neighbour (pixel-centre aligned).
pub(crate) fn nearest_indices(src: u32, dst: u32) -> Vec<u32> {
    (0..dst)
        .map(|i| {
            let s = ((i as u64 * 2 + 1) * src as u64) / (dst as u64 * 2);
            s.min(src as u64 - 1) as u32
        })
        .collect()
}

/// Writes a single-channel 8-bit PNG with NP as 0 and P as 255.
pub fn write_mask(mask: &MaskImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    mask.to_gray_image().save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskImage> {
    let img = image::open(path)?;
    match img {
        DynamicImage::ImageLuma8(gray) => MaskImage::from_gray_image(&gray),
        other => Err(Error::MaskDecode(format!(
            "{} is {:?}, expected single-channel 8-bit",
            path.display(),
            other.color()
        ))),
    }
}

/// All-NP or all-P mask matching the dimensions of a homogeneous frame.
pub fn homogeneous_mask(frame: &FrameRecord, width: u32, height: u32) -> Result<MaskImage> {
    ensure!(
        frame.homogeneity == Homogeneity::Homogeneous,
        "frame {} is heterogeneous; its mask cannot be derived from a global label",
        frame.frame_id
    );
    let class = frame
        .global_class
        .ok_or_else(|| Error::invalid(format!("frame {} has no global class", frame.frame_id)))?;
    MaskImage::filled(width, height, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FrameKind;
    use proptest::prelude::*;

    fn frame(kind: FrameKind) -> FrameRecord {
        let (homogeneity, global_class) = match kind {
            FrameKind::Np => (Homogeneity::Homogeneous, Some(ContentClass::NP)),
            FrameKind::P => (Homogeneity::Homogeneous, Some(ContentClass::P)),
            FrameKind::Heterogeneous => (Homogeneity::Heterogeneous, None),
        };
        FrameRecord {
            frame_id: "f".into(),
            video_id: "v".into(),
            sequence_id: "s".into(),
            image_path: "f.png".into(),
            homogeneity,
            global_class,
            gt_mask_path: None,
            proxy_mask_path: None,
        }
    }

    #[test]
    fn homogeneous_masks_follow_global_label() {
        let np = homogeneous_mask(&frame(FrameKind::Np), 64, 64).unwrap();
        assert_eq!(np.dimensions(), (64, 64));
        assert!(np.labels().iter().all(|&l| l == 0));
        let p = homogeneous_mask(&frame(FrameKind::P), 64, 64).unwrap();
        assert!(p.labels().iter().all(|&l| l == 1));
        assert!(homogeneous_mask(&frame(FrameKind::Heterogeneous), 64, 64).is_err());
    }

    #[test]
    fn single_p_pixel_is_written_as_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mask(&MaskImage::new(1, 1, vec![1]).unwrap(), &path).unwrap();
        let raw = image::open(&path).unwrap();
        assert_eq!(raw.color(), image::ColorType::L8);
        assert_eq!(raw.to_luma8().as_raw(), &vec![255u8]);
    }

    #[test]
    fn decode_rejects_intermediate_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut img = GrayImage::new(3, 2);
        img.put_pixel(1, 1, Luma([128]));
        img.save(&path).unwrap();
        assert!(matches!(read_mask(&path), Err(Error::MaskDecode(_))));
    }

    #[test]
    fn decode_rejects_rgb_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::new(2, 2).save(&path).unwrap();
        assert!(matches!(read_mask(&path), Err(Error::MaskDecode(_))));
    }

    #[test]
    fn rejects_out_of_range_labels_and_empty_masks() {
        assert!(MaskImage::new(2, 1, vec![0, 2]).is_err());
        assert!(MaskImage::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn nearest_resize_by_exact_factor_picks_block_members() {
        let m = MaskImage::from_fn(4, 4, |x, _| if x < 2 { ContentClass::NP } else { ContentClass::P }).unwrap();
        let small = m.resize_nearest(2, 2).unwrap();
        assert_eq!(small.labels(), &[0, 1, 0, 1]);
        let big = small.resize_nearest(4, 4).unwrap();
        assert_eq!(big, m);
    }

    proptest! {
        #[test]
        fn codec_round_trip(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
            let mut s = seed;
            let m = MaskImage::from_fn(w, h, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if s >> 63 == 0 { ContentClass::NP } else { ContentClass::P }
            }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.png");
            write_mask(&m, &path).unwrap();
            prop_assert_eq!(read_mask(&path).unwrap(), m);
        }

        #[test]
        fn resize_keeps_label_set(w in 1u32..20, h in 1u32..20, tw in 1u32..40, th in 1u32..40) {
            let m = MaskImage::from_fn(w, h, |x, y| if (x + y) % 3 == 0 { ContentClass::NP } else { ContentClass::P }).unwrap();
            let r = m.resize_nearest(tw, th).unwrap();
            prop_assert_eq!(r.dimensions(), (tw, th));
            prop_assert!(r.labels().iter().all(|&l| l <= 1));
        }
    }
}
