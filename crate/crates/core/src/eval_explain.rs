//! Classification and segmentation metrics, GradCAM attribution maps and
//! the boundary-case report.

use candle_core::{DType, Tensor, Var};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corpus::raster::{Layer, Overlay, Shape};
use crate::corpus::{ContentClass, MaskImage};
use crate::error::{ensure, Result};
use crate::nn_util::upsample_bilinear;

/// `m[truth][pred]` counts with the `{0: NP, 1: P}` index convention.
pub fn confusion(pred: &[ContentClass], truth: &[ContentClass]) -> Result<[[usize; 2]; 2]> {
    ensure!(pred.len() == truth.len(), "{} predictions for {} labels", pred.len(), truth.len());
    let mut m = [[0; 2]; 2];
    for (p, t) in pred.iter().zip(truth) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

pub fn accuracy(pred: &[ContentClass], truth: &[ContentClass]) -> Result<f64> {
    ensure!(!truth.is_empty(), "accuracy of an empty set");
    let m = confusion(pred, truth)?;
    Ok((m[0][0] + m[1][1]) as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes occurring in either
/// `pred` or `truth`.
pub fn macro_f1(pred: &[ContentClass], truth: &[ContentClass]) -> Result<f64> {
    ensure!(!truth.is_empty(), "F1 of an empty set");
    let m = confusion(pred, truth)?;
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..2 {
        let tp = m[c][c];
        let fn_ = m[c][1 - c];
        let fp = m[1 - c][c];
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp as f64 / denom as f64;
        classes += 1;
    }
    Ok(sum / classes as f64)
}

/// Intersection over union of the pixels labelled `cls`; 1.0 when neither
/// mask contains the class.
pub fn iou(pred: &MaskImage, gt: &MaskImage, cls: ContentClass) -> Result<f64> {
    ensure!(
        pred.dimensions() == gt.dimensions(),
        "mask dimensions differ: {:?} vs {:?}",
        pred.dimensions(),
        gt.dimensions()
    );
    let c = cls.index() as u8;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (x, y) = (a == c, b == c);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub np: f64,
    pub p: f64,
    pub mean: f64,
}

impl ClassIou {
    pub fn new(np: f64, p: f64) -> Self {
        Self { np, p, mean: (np + p) / 2.0 }
    }

    pub fn of(pred: &MaskImage, gt: &MaskImage) -> Result<Self> {
        Ok(Self::new(iou(pred, gt, ContentClass::NP)?, iou(pred, gt, ContentClass::P)?))
    }

    pub fn get(&self, cls: ContentClass) -> f64 {
        match cls {
            ContentClass::NP => self.np,
            ContentClass::P => self.p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset: String,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<ClassIou>,
}

impl MetricsReport {
    pub fn classification(subset: impl Into<String>, pred: &[ContentClass], truth: &[ContentClass]) -> Result<Self> {
        Ok(Self {
            subset: subset.into(),
            samples: truth.len(),
            accuracy: Some(accuracy(pred, truth)?),
            macro_f1: Some(macro_f1(pred, truth)?),
            iou: None,
        })
    }

    /// Per-class IoU averaged over images; `pairs` are `(pred, gt)`.
    pub fn segmentation(subset: impl Into<String>, pairs: &[(MaskImage, MaskImage)]) -> Result<Self> {
        ensure!(!pairs.is_empty(), "segmentation metrics of an empty set");
        let (mut np, mut p) = (0.0, 0.0);
        for (pred, gt) in pairs {
            let c = ClassIou::of(pred, gt)?;
            np += c.np;
            p += c.p;
        }
        let n = pairs.len() as f64;
        Ok(Self { subset: subset.into(), samples: pairs.len(), accuracy: None, macro_f1: None, iou: Some(ClassIou::new(np / n, p / n)) })
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.iou.map(|c| c.mean)
    }

    /// Element-wise mean of reports for the same subset.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        ensure!(!reports.is_empty(), "average of no reports");
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = reports.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        let iou = match (avg(&|r| r.iou.map(|c| c.np)), avg(&|r| r.iou.map(|c| c.p))) {
            (Some(a), Some(b)) => Some(ClassIou::new(a, b)),
            _ => None,
        };
        Ok(Self {
            subset: reports[0].subset.clone(),
            samples: reports[0].samples,
            accuracy: avg(&|r| r.accuracy),
            macro_f1: avg(&|r| r.macro_f1),
            iou,
        })
    }
}

/// Per-pixel attribution in `[0, 1]` at input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub width: u32,
    pub height: u32,
    pub target: ContentClass,
    pub values: Vec<f32>,
    /// Maximum before normalization; zero for an all-zero map.
    pub raw_max: f32,
}

impl AttributionMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }
}

/// Gradient-weighted activation map.
///
/// `features` is a `(T, C)` leaf holding token activations of which the
/// first `skip` tokens are not spatial; the rest form a `rows × cols` grid.
/// `score` is the scalar target-class score computed from `features`.
#[allow(clippy::too_many_arguments)]
pub fn grad_cam(
    features: &Var,
    score: &Tensor,
    skip: usize,
    rows: usize,
    cols: usize,
    width: u32,
    height: u32,
    target: ContentClass,
) -> Result<AttributionMap> {
    let (t, c) = features.dims2()?;
    ensure!(t == skip + rows * cols, "{t} tokens cannot hold {skip} + {rows}×{cols}");
    let acts = features.as_tensor().detach().narrow(0, skip, rows * cols)?.to_dtype(DType::F64)?;
    let grads = score.backward()?;
    let g = match grads.get(features) {
        Some(g) => g.narrow(0, skip, rows * cols)?.to_dtype(DType::F64)?,
        None => Tensor::zeros((rows * cols, c), DType::F64, features.device())?,
    };
    let weights = g.mean_keepdim(0)?;
    let cam = acts.broadcast_mul(&weights)?.sum(1)?.relu()?;
    let cam = cam.reshape((1, 1, rows, cols))?;
    let up = upsample_bilinear(&cam, height as usize, width as usize)?.flatten_all()?.to_vec1::<f64>()?;
    let max = up.iter().cloned().fold(0.0f64, f64::max);
    let values = if max > 0.0 { up.iter().map(|v| (v / max).clamp(0.0, 1.0) as f32).collect() } else { vec![0.0; up.len()] };
    Ok(AttributionMap { width, height, target, values, raw_max: max as f32 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame_id: String,
    pub truth: ContentClass,
    pub predicted: ContentClass,
    /// Probability of the predicted class.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCase {
    pub frame_id: String,
    pub truth: ContentClass,
    pub predicted: ContentClass,
    pub probability: f64,
    pub misclassified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution_path: Option<std::path::PathBuf>,
}

pub const DEFAULT_UNCERTAINTY_BAND: (f64, f64) = (0.5, 0.6);

/// Misclassified frames plus correct frames whose winning probability lies
/// in `band` (inclusive), sorted by ascending probability then frame id.
pub fn boundary_report(predictions: &[FramePrediction], band: (f64, f64)) -> Result<Vec<BoundaryCase>> {
    ensure!(!predictions.is_empty(), "boundary report of an empty dataset");
    ensure!(band.0 <= band.1, "uncertainty band [{}, {}] is empty", band.0, band.1);
    let mut out: Vec<BoundaryCase> = predictions
        .iter()
        .filter(|p| p.truth != p.predicted || (p.probability >= band.0 && p.probability <= band.1))
        .map(|p| BoundaryCase {
            frame_id: p.frame_id.clone(),
            truth: p.truth,
            predicted: p.predicted,
            probability: p.probability,
            misclassified: p.truth != p.predicted,
            attribution_path: None,
        })
        .collect();
    out.sort_by(|a, b| a.probability.total_cmp(&b.probability).then_with(|| a.frame_id.cmp(&b.frame_id)));
    Ok(out)
}

fn heat_color(v: f32) -> [f32; 3] {
    // blue -> cyan -> yellow -> red
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

/// Heatmap alpha-blended over `img`, weighted by the attribution itself.
pub fn render_heatmap(img: &RgbImage, map: &AttributionMap, alpha: f32) -> Result<RgbImage> {
    ensure!(img.dimensions() == (map.width, map.height), "heatmap and image sizes differ");
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = map.get(x, y);
        let a = alpha * v;
        let h = heat_color(v);
        for c in 0..3 {
            p.0[c] = ((1.0 - a) * p.0[c] as f32 + a * h[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Draws the class boundary of `mask` onto `img`.
pub fn render_mask_contours(img: &RgbImage, mask: &MaskImage, color: [u8; 3]) -> Result<RgbImage> {
    ensure!(img.dimensions() == mask.dimensions(), "mask and image sizes differ");
    let (w, h) = mask.dimensions();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(x, y);
            let edge = (x + 1 < w && mask.get(x + 1, y) != c) || (y + 1 < h && mask.get(x, y + 1) != c);
            if edge {
                out.put_pixel(x, y, Rgb(color));
            }
        }
    }
    Ok(out)
}

/// Writes `text` in the top-left corner on a dark plate, e.g. `P(0.57)`.
pub fn annotate(img: &RgbImage, text: &str) -> RgbImage {
    let scale = 1.0f32.max((img.width() as f32 / 128.0).floor());
    let tw = 8.0 * scale * text.chars().count() as f32;
    let overlay = Overlay {
        layers: vec![
            Layer { shape: Shape::Rect { x0: 0.0, y0: 0.0, x1: tw + 4.0, y1: 8.0 * scale + 4.0 }, color: [0, 0, 0] },
            Layer { shape: Shape::Text { x: 2.0, y: 2.0, scale, text: text.into() }, color: [255, 255, 255] },
        ],
    };
    let r = overlay.rasterize(img.width(), img.height());
    let mut out = img.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let a = r.alpha[i];
        for c in 0..3 {
            p.0[c] = ((1.0 - a) * p.0[c] as f32 + r.color[i][c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Plain-text table of segmentation reports, one row per experiment and one
/// column group per test subset.
pub fn iou_table(rows: &[(String, Vec<MetricsReport>)]) -> String {
    let mut s = String::new();
    let Some((_, first)) = rows.first() else { return s };
    s.push_str(&format!("{:<12}", "experiment"));
    for r in first {
        s.push_str(&format!(" | {:^26}", r.subset));
    }
    s.push('\n');
    s.push_str(&format!("{:<12}", ""));
    for _ in first {
        s.push_str(&format!(" | {:>8} {:>8} {:>8}", "IoU NP", "IoU P", "mIoU"));
    }
    s.push('\n');
    for (name, reports) in rows {
        s.push_str(&format!("{name:<12}"));
        for r in reports {
            match r.iou {
                Some(c) => s.push_str(&format!(" | {:>8.4} {:>8.4} {:>8.4}", c.np, c.p, c.mean)),
                None => s.push_str(&format!(" | {:>26}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use ContentClass::{NP, P};

    fn mask3(bits: u32) -> MaskImage {
        MaskImage::new(3, 3, (0..9).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap()
    }

    fn oracle_iou(a: u32, b: u32, cls: u8) -> f64 {
        let mut inter = 0;
        let mut union = 0;
        for i in 0..9 {
            let x = ((a >> i) & 1) as u8 == cls;
            let y = ((b >> i) & 1) as u8 == cls;
            if x && y {
                inter += 1;
            }
            if x || y {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_matches_set_counting_on_all_3x3_pairs() {
        for a in 0..512u32 {
            for b in 0..512u32 {
                let (ma, mb) = (mask3(a), mask3(b));
                for cls in ContentClass::ALL {
                    let v = iou(&ma, &mb, cls).unwrap();
                    assert_eq!(v, oracle_iou(a, b, cls.index() as u8));
                    assert_eq!(v, iou(&mb, &ma, cls).unwrap());
                }
            }
        }
    }

    #[test]
    fn iou_examples() {
        let pred = MaskImage::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let gt = MaskImage::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let c = ClassIou::of(&pred, &gt).unwrap();
        assert_eq!(c.p, 0.5);
        assert_eq!(c.np, 2.0 / 3.0);
        assert!((c.mean - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(ClassIou::of(&pred, &pred).unwrap(), ClassIou::new(1.0, 1.0));
        let a = MaskImage::new(2, 1, vec![0, 1]).unwrap();
        let b = MaskImage::new(2, 1, vec![1, 0]).unwrap();
        assert_eq!(ClassIou::of(&a, &b).unwrap(), ClassIou::new(0.0, 0.0));
        assert!(iou(&a, &pred, P).is_err());
    }

    fn oracle_scores(pred: &[ContentClass], truth: &[ContentClass]) -> (f64, f64) {
        let mut correct = 0;
        let mut f1s = Vec::new();
        for (p, t) in pred.iter().zip(truth) {
            if p == t {
                correct += 1;
            }
        }
        for c in ContentClass::ALL {
            let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
            let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count();
            let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count();
            if tp + fp + fn_ > 0 {
                let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
                let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
                f1s.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
            }
        }
        (correct as f64 / truth.len() as f64, f1s.iter().sum::<f64>() / f1s.len() as f64)
    }

    fn cls(b: bool) -> ContentClass {
        if b {
            P
        } else {
            NP
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn scores_match_confusion_oracle(v in prop::collection::vec((any::<bool>(), any::<bool>()), 1..=100)) {
            let pred: Vec<_> = v.iter().map(|x| cls(x.0)).collect();
            let truth: Vec<_> = v.iter().map(|x| cls(x.1)).collect();
            let (acc, f1) = oracle_scores(&pred, &truth);
            prop_assert_eq!(accuracy(&pred, &truth).unwrap(), acc);
            prop_assert!((macro_f1(&pred, &truth).unwrap() - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn score_examples() {
        let truth = vec![NP, NP, P, P];
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(macro_f1(&truth, &truth).unwrap(), 1.0);
        let all_p = vec![P; 4];
        assert_eq!(accuracy(&all_p, &truth).unwrap(), 0.5);
        assert!((macro_f1(&all_p, &truth).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[P], &[P, NP]).is_err());
    }

    #[test]
    fn report_mean_is_mean_of_classes() {
        let a = MaskImage::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = MaskImage::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let r = MetricsReport::segmentation("t", &[(a.clone(), b.clone()), (a.clone(), a.clone())]).unwrap();
        let c = r.iou.unwrap();
        assert_eq!(c.mean, (c.np + c.p) / 2.0);
        assert_eq!(c.p, (0.5 + 1.0) / 2.0);
        let avg = MetricsReport::average(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(avg.iou.unwrap().mean, c.mean);
    }

    fn pred(id: &str, t: ContentClass, p: ContentClass, prob: f64) -> FramePrediction {
        FramePrediction { frame_id: id.into(), truth: t, predicted: p, probability: prob }
    }

    #[test]
    fn boundary_rules() {
        let confident = vec![pred("a", P, P, 0.99), pred("b", NP, NP, 0.97)];
        assert!(boundary_report(&confident, DEFAULT_UNCERTAINTY_BAND).unwrap().is_empty());
        let r = boundary_report(
            &[pred("a", P, P, 0.99), pred("b", P, NP, 0.98), pred("c", NP, NP, 0.51), pred("d", P, P, 0.6)],
            DEFAULT_UNCERTAINTY_BAND,
        )
        .unwrap();
        let ids: Vec<_> = r.iter().map(|c| c.frame_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "d", "b"]);
        assert!(r[2].misclassified);
        assert!(boundary_report(&[], DEFAULT_UNCERTAINTY_BAND).is_err());
    }

    fn linear_cam(weights: &[f64], x: &[f64], rows: usize, cols: usize, size: u32) -> AttributionMap {
        // one channel per patch: f_t = w_t * x_t, score = sum_t f_t
        let dev = Device::Cpu;
        let f: Vec<f64> = weights.iter().zip(x).map(|(w, x)| w * x).collect();
        let feats = Var::from_vec(f, (rows * cols, 1), &dev).unwrap();
        let score = feats.as_tensor().sum_all().unwrap();
        grad_cam(&feats, &score, 0, rows, cols, size, size, P).unwrap()
    }

    #[test]
    fn cam_of_linear_model_concentrates_on_weighted_region() {
        let (rows, cols) = (8, 8);
        let w: Vec<f64> = (0..64).map(|i| if (i / cols) < 4 && (i % cols) < 4 { 1.0 } else { 0.0 }).collect();
        let x = vec![1.0; 64];
        let m = linear_cam(&w, &x, rows, cols, 64);
        let total: f64 = m.values.iter().map(|&v| v as f64).sum();
        let inside: f64 = (0..32).flat_map(|y| (0..32).map(move |x| (x, y))).map(|(x, y)| m.get(x, y) as f64).sum();
        assert!(inside / total >= 0.9, "inside share {}", inside / total);
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.values.iter().cloned().fold(0.0f32, f32::max), 1.0);
        assert_eq!(m.values.len(), 64 * 64);
    }

    #[test]
    fn cam_of_constant_model_is_zero() {
        let dev = Device::Cpu;
        let feats = Var::from_vec(vec![1.0f64; 16], (16, 1), &dev).unwrap();
        let score = Tensor::new(3.0f64, &dev).unwrap();
        let m = grad_cam(&feats, &score, 0, 4, 4, 8, 8, NP).unwrap();
        assert_eq!(m.raw_max, 0.0);
        assert!(m.values.iter().all(|&v| v == 0.0));
        let score = (feats.as_tensor().sum_all().unwrap() * 0.0).unwrap();
        let m = grad_cam(&feats, &score, 0, 4, 4, 8, 8, NP).unwrap();
        assert_eq!(m.raw_max, 0.0);
    }

    #[test]
    fn rendering_keeps_dimensions() {
        let img = RgbImage::from_pixel(16, 16, Rgb([100, 100, 100]));
        let m = linear_cam(&[1.0; 4], &[1.0, 0.0, 0.0, 0.0], 2, 2, 16);
        assert_eq!(render_heatmap(&img, &m, 0.5).unwrap().dimensions(), (16, 16));
        let mask = MaskImage::from_fn(16, 16, |x, _| if x < 8 { NP } else { P }).unwrap();
        let c = render_mask_contours(&img, &mask, [255, 0, 0]).unwrap();
        assert_eq!(c.get_pixel(7, 3).0, [255, 0, 0]);
        assert_eq!(c.get_pixel(3, 3).0, [100, 100, 100]);
        assert_ne!(annotate(&img, "P(0.57)"), img);
    }
}
