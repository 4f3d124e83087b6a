//! Stage 2: patch-granular proxy masks for heterogeneous frames.

use std::path::Path;

use image::RgbImage;

use crate::corpus::{write_mask, CorpusManifest, FrameKind, MaskImage};
use crate::error::{ensure, Result};
use crate::proxy_classifier::{load_rgb, PatchLabelGrid, ProxyClassifier};
use crate::splitter::{Split, SplitAssignment};

/// Fills each patch's `p × p` block with its label at classifier resolution,
/// then resamples to `target` by nearest neighbour.
pub fn proxy_mask(grid: &PatchLabelGrid, classifier_input_size: u32, target: (u32, u32)) -> Result<MaskImage> {
    ensure!(grid.rows > 0 && grid.cols > 0 && !grid.labels.is_empty(), "empty patch grid");
    ensure!(grid.labels.len() == grid.rows * grid.cols, "grid holds {} labels for {}×{}", grid.labels.len(), grid.rows, grid.cols);
    let p = grid.patch_size;
    ensure!(
        grid.rows * p == classifier_input_size as usize && grid.cols * p == classifier_input_size as usize,
        "{}×{} grid of {p}px patches does not cover a {classifier_input_size}px input",
        grid.rows,
        grid.cols
    );
    let side = classifier_input_size;
    let block = MaskImage::from_fn(side, side, |x, y| grid.get(y as usize / p, x as usize / p))?;
    block.resize_nearest(target.0, target.1)
}

/// Proxy mask at the frame's own resolution.
pub fn proxy_mask_for_frame(model: &ProxyClassifier, img: &RgbImage) -> Result<MaskImage> {
    let grid = model.predict_patch_labels(img)?;
    proxy_mask(&grid, model.config().input_size, img.dimensions())
}

/// Writes a proxy mask for every heterogeneous frame of `which` (train or
/// val) under `base_dir/rel_dir` and records its path. Homogeneous frames
/// are left alone. Returns the number of masks written.
pub fn attach_proxy_masks(
    manifest: &mut CorpusManifest,
    split: &SplitAssignment,
    which: Split,
    model: &ProxyClassifier,
    rel_dir: &Path,
) -> Result<usize> {
    ensure!(which != Split::Test, "proxy masks are generated for train or val only");
    split.verify(manifest)?;
    let targets: Vec<(String, std::path::PathBuf)> = manifest
        .frames()
        .filter(|f| f.kind() == FrameKind::Heterogeneous && split.split_of(&f.video_id) == Some(which))
        .map(|f| (f.frame_id.clone(), f.image_path.clone()))
        .collect();
    let mut written = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(16) {
        let images: Vec<RgbImage> = chunk.iter().map(|(_, p)| load_rgb(&manifest.resolve(p))).collect::<Result<_>>()?;
        let refs: Vec<&RgbImage> = images.iter().collect();
        let grids = model.predict_patch_labels_batch(&refs)?;
        for ((id, _), (img, grid)) in chunk.iter().zip(images.iter().zip(&grids)) {
            let mask = proxy_mask(grid, model.config().input_size, img.dimensions())?;
            let rel = rel_dir.join(format!("{id}.png"));
            write_mask(&mask, &manifest.resolve(&rel))?;
            written.push((id.clone(), rel));
        }
    }
    let n = written.len();
    for f in manifest.frames_mut() {
        if let Some((_, rel)) = written.iter().find(|(id, _)| *id == f.frame_id) {
            f.proxy_mask_path = Some(rel.clone());
        }
    }
    manifest.add_note(format!("proxy masks for split {which}: {n} heterogeneous frames under {}", rel_dir.display()));
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ContentClass::{self, NP, P};
    use proptest::prelude::*;

    #[test]
    fn uniform_grid_gives_uniform_mask() {
        let g = PatchLabelGrid::from_labels(4, 4, 14, vec![P; 16]).unwrap();
        for size in [(56, 56), (17, 93), (128, 128)] {
            let m = proxy_mask(&g, 56, size).unwrap();
            assert_eq!(m.dimensions(), size);
            assert_eq!(m.count(P), (size.0 * size.1) as usize);
        }
    }

    #[test]
    fn checkerboard_blocks() {
        let g = PatchLabelGrid::from_labels(2, 2, 14, vec![P, NP, NP, P]).unwrap();
        let m = proxy_mask(&g, 28, (28, 28)).unwrap();
        for y in 0..28 {
            for x in 0..28 {
                let expect = if (x < 14) == (y < 14) { P } else { NP };
                assert_eq!(m.get(x, y), expect);
            }
        }
    }

    #[test]
    fn np_pixels_are_k_patches_at_classifier_resolution() {
        let mut labels = vec![P; 37 * 37];
        for i in (0..labels.len()).step_by(7) {
            labels[i] = NP;
        }
        let k = labels.iter().filter(|l| **l == NP).count();
        let g = PatchLabelGrid::from_labels(37, 37, 14, labels).unwrap();
        let m = proxy_mask(&g, 518, (518, 518)).unwrap();
        assert_eq!(m.count(NP), k * 196);
    }

    #[test]
    fn errors() {
        let g = PatchLabelGrid { rows: 0, cols: 0, patch_size: 14, labels: vec![], probs: vec![] };
        assert!(proxy_mask(&g, 28, (28, 28)).is_err());
        let g = PatchLabelGrid::from_labels(2, 2, 14, vec![P; 4]).unwrap();
        assert!(proxy_mask(&g, 42, (28, 28)).is_err());
    }

    fn grid_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
        (1usize..8, 1usize..5).prop_flat_map(|(side, p)| (Just(side), Just(p), prop::collection::vec(any::<bool>(), side * side)))
    }

    fn to_grid(side: usize, p: usize, bits: &[bool]) -> PatchLabelGrid {
        let labels = bits.iter().map(|b| if *b { P } else { NP }).collect();
        PatchLabelGrid::from_labels(side, side, p, labels).unwrap()
    }

    proptest! {
        #[test]
        fn area_fraction_is_conserved((side, p, bits) in grid_strategy(), sx in 0.5f64..3.0, sy in 0.5f64..3.0) {
            let g = to_grid(side, p, &bits);
            let input = (side * p) as u32;
            let exact = proxy_mask(&g, input, (input, input)).unwrap();
            prop_assert_eq!(exact.count(NP), g.count(NP) * p * p);
            let (tw, th) = (((input as f64 * sx).round() as u32).max(1), ((input as f64 * sy).round() as u32).max(1));
            let m = proxy_mask(&g, input, (tw, th)).unwrap();
            let grid_frac = g.count(NP) as f64 / g.labels.len() as f64;
            let one_row = 1.0 / side as f64;
            prop_assert!((m.fraction(NP) - grid_frac).abs() <= one_row, "{} vs {}", m.fraction(NP), grid_frac);
            prop_assert!(m.labels().iter().all(|&v| v <= 1));
        }

        #[test]
        fn flipping_np_to_p_never_loses_p((side, p, bits) in grid_strategy(), idx in any::<prop::sample::Index>(), tw in 1u32..60, th in 1u32..60) {
            let i = idx.index(bits.len());
            prop_assume!(!bits[i]);
            let g0 = to_grid(side, p, &bits);
            let mut b1 = bits.clone();
            b1[i] = true;
            let g1 = to_grid(side, p, &b1);
            let input = (side * p) as u32;
            let a = proxy_mask(&g0, input, (tw, th)).unwrap();
            let b = proxy_mask(&g1, input, (tw, th)).unwrap();
            prop_assert!(b.count(ContentClass::P) >= a.count(ContentClass::P));
        }
    }
}
