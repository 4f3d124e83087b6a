//! Stage 1: binary P/NP frame classifier over the mean of the backbone's
//! patch states (or over its class-token state), trained on homogeneous
//! frames. The same head applied to each patch state separately gives the
//! per-patch labels that become proxy masks.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, IndexOp, Module, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_tensor, Backbone, BackboneConfig, ImageTensor, PatchEmbeddings};
use crate::corpus::{ContentClass, CorpusManifest, FrameRecord};
use crate::error::{ensure, Error, Result};
use crate::eval_explain::{grad_cam, AttributionMap, FramePrediction, MetricsReport};
use crate::nn_util::{self, fan_in_uniform, linear, CheckpointMeta, ParamStore, Scope};
use crate::preprocess::{augment, contrast_stretch, resize_for_classifier, AugmentConfig};
use crate::train_util::{epoch_batches, EarlyStopping, EpochRecord, History, ReduceLrOnPlateau};

pub const HEAD_HIDDEN: usize = 128;
pub const CHECKPOINT_KIND: &str = "proxy_classifier";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Centroid,
    ClsToken,
}

impl HeadMode {
    pub fn label(self) -> &'static str {
        match self {
            HeadMode::Centroid => "Centroid",
            HeadMode::ClsToken => "CLS token",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: BackboneConfig,
    pub mode: HeadMode,
    /// Square side the frame is resized to; a multiple of the patch size.
    pub input_size: u32,
    pub contrast_percentiles: [f64; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::mini(),
            mode: HeadMode::Centroid,
            input_size: 112,
            contrast_percentiles: [2.0, 98.0],
        }
    }
}

impl ClassifierConfig {
    pub fn pretrained(weights: Option<std::path::PathBuf>) -> Self {
        Self {
            backbone: BackboneConfig::dinov2_vitb14(weights),
            input_size: crate::preprocess::CLASSIFIER_INPUT,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.backbone.patch_size as u32;
        ensure!(self.input_size >= p && self.input_size.is_multiple_of(p), "input size {} is not a multiple of patch size {p}", self.input_size);
        let [lo, hi] = self.contrast_percentiles;
        ensure!(0.0 <= lo && lo < hi && hi <= 100.0, "contrast percentiles [{lo}, {hi}] are invalid");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfigStage1 {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation F1 improvement before stopping.
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfigStage1 {
    fn default() -> Self {
        Self {
            batch_size: 6,
            learning_rate: 1e-5,
            max_epochs: 50,
            patience: 5,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_learning_rate: 1e-8,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfigStage1 {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0 && self.max_epochs > 0, "batch size and epochs must be positive");
        ensure!(self.learning_rate > 0.0 && self.min_learning_rate > 0.0, "learning rates must be positive");
        ensure!(self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau factor must lie in (0, 1)");
        self.augment.validate()
    }
}

/// Dense `d → 128`, ReLU, dense `128 → 2`.
pub struct ClassifierHead {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
}

impl ClassifierHead {
    pub fn new(s: &Scope, d: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(&s.pp("fc1"), d, HEAD_HIDDEN, fan_in_uniform(d))?,
            fc2: linear(&s.pp("fc2"), HEAD_HIDDEN, 2, fan_in_uniform(HEAD_HIDDEN))?,
        })
    }

    /// Logits over `{NP, P}` for any `(..., d)` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameClassification {
    pub label: ContentClass,
    /// Probability of `label`.
    pub probability: f64,
    /// Softmax over `{NP, P}`.
    pub probs: [f64; 2],
}

impl FrameClassification {
    fn from_probs(probs: [f64; 2]) -> Self {
        // ties go to NP, the lower index
        let label = if probs[1] > probs[0] { ContentClass::P } else { ContentClass::NP };
        Self { label, probability: probs[label.index()], probs }
    }
}

/// One predicted label per patch, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub labels: Vec<ContentClass>,
    pub probs: Vec<[f64; 2]>,
}

impl PatchLabelGrid {
    pub fn from_labels(rows: usize, cols: usize, patch_size: usize, labels: Vec<ContentClass>) -> Result<Self> {
        ensure!(labels.len() == rows * cols, "{} labels for a {rows}×{cols} grid", labels.len());
        let probs = labels.iter().map(|l| if *l == ContentClass::P { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        Ok(Self { rows, cols, patch_size, labels, probs })
    }

    pub fn get(&self, row: usize, col: usize) -> ContentClass {
        self.labels[row * self.cols + col]
    }

    pub fn count(&self, cls: ContentClass) -> usize {
        self.labels.iter().filter(|l| **l == cls).count()
    }
}

/// A homogeneous frame with its class.
#[derive(Clone, Debug)]
pub struct LabeledFrame {
    pub frame_id: String,
    pub image: RgbImage,
    pub label: ContentClass,
}

pub fn load_labeled_frames<'a>(
    manifest: &CorpusManifest,
    frames: impl IntoIterator<Item = &'a FrameRecord>,
) -> Result<Vec<LabeledFrame>> {
    frames
        .into_iter()
        .map(|f| {
            let label = f
                .global_class
                .ok_or_else(|| Error::invalid(format!("frame {} is heterogeneous and has no frame label", f.frame_id)))?;
            Ok(LabeledFrame { frame_id: f.frame_id.clone(), image: load_rgb(&manifest.resolve(&f.image_path))?, label })
        })
        .collect()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?
    .to_rgb8())
}

pub struct ProxyClassifier {
    cfg: ClassifierConfig,
    store: ParamStore,
    backbone: Backbone,
    head: ClassifierHead,
    trained: bool,
}

impl ProxyClassifier {
    /// Fresh model; pretrained backbone weights are loaded when configured.
    pub fn new(cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ClassifierConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.backbone.validate()?;
        let m = Self::build(cfg, seed, dtype)?;
        if let Some(w) = &cfg.backbone.weights {
            m.store.load_safetensors_under(w, "backbone.")?;
        }
        Ok(m)
    }

    fn build(cfg: &ClassifierConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, nn_util::device()?);
        let backbone = Backbone::new(&store.root().pp("backbone"), &cfg.backbone)?;
        let head = ClassifierHead::new(&store.root().pp("head"), cfg.backbone.dim)?;
        if cfg.backbone.freeze {
            store.freeze_prefix("backbone.");
        }
        Ok(Self { cfg: cfg.clone(), store, backbone, head, trained: false })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Overwrites one parameter, e.g. to construct a head by hand. Marks the
    /// model as usable for inference.
    pub fn set_parameter(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let v = self.store.var(name).ok_or_else(|| Error::invalid(format!("no parameter {name}")))?;
        ensure!(v.dims() == value.dims(), "parameter {name} has shape {:?}, got {:?}", v.dims(), value.dims());
        v.set(&value.to_dtype(self.store.dtype())?)?;
        self.trained = true;
        Ok(())
    }

    /// Contrast stretch then resize to the classifier input.
    pub fn preprocess(&self, img: &RgbImage) -> Result<ImageTensor> {
        let [lo, hi] = self.cfg.contrast_percentiles;
        let s = contrast_stretch(img, lo, hi)?;
        Ok(ImageTensor::from_rgb(&resize_for_classifier(&s, self.cfg.input_size)?))
    }

    fn tensor(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        batch_tensor(images, self.store.device(), self.store.dtype())
    }

    pub fn embed(&self, images: &[&ImageTensor]) -> Result<PatchEmbeddings> {
        self.backbone.forward(&self.tensor(images)?)
    }

    /// `(B, 2)` logits of the frame-level head.
    pub fn logits_from_embeddings(&self, e: &PatchEmbeddings) -> Result<Tensor> {
        let rep = match self.cfg.mode {
            HeadMode::Centroid => e.centroid()?,
            HeadMode::ClsToken => e
                .cls_state
                .clone()
                .ok_or_else(|| Error::invalid("class-token head needs a backbone with a class token"))?,
        };
        self.head.forward(&rep)
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    fn ensure_trained(&self) -> Result<()> {
        ensure!(self.trained, "classifier head is untrained");
        Ok(())
    }

    pub fn classify_batch(&self, images: &[&RgbImage]) -> Result<Vec<FrameClassification>> {
        self.ensure_trained()?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let prepared: Vec<ImageTensor> = chunk.iter().map(|i| self.preprocess(i)).collect::<Result<_>>()?;
            let refs: Vec<&ImageTensor> = prepared.iter().collect();
            let logits = self.logits_from_embeddings(&self.embed(&refs)?)?;
            let probs = candle_nn::ops::softmax(&logits, D::Minus1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(probs.into_iter().map(|p| FrameClassification::from_probs([p[0], p[1]])));
        }
        Ok(out)
    }

    pub fn classify_frame(&self, img: &RgbImage) -> Result<FrameClassification> {
        Ok(self.classify_batch(&[img])?.remove(0))
    }

    /// Head applied to every patch state independently.
    pub fn patch_labels_from_embeddings(&self, e: &PatchEmbeddings) -> Result<Vec<PatchLabelGrid>> {
        ensure!(self.cfg.mode == HeadMode::Centroid, "per-patch labels need a centroid-mode head");
        let probs = candle_nn::ops::softmax(&self.head.forward(&e.states)?, D::Minus1)?.to_dtype(DType::F64)?;
        let b = probs.dim(0)?;
        (0..b)
            .map(|i| {
                let p = probs.get(i)?.to_vec2::<f64>()?;
                let probs: Vec<[f64; 2]> = p.iter().map(|r| [r[0], r[1]]).collect();
                let labels = probs.iter().map(|r| FrameClassification::from_probs(*r).label).collect();
                Ok(PatchLabelGrid { rows: e.rows, cols: e.cols, patch_size: self.cfg.backbone.patch_size, labels, probs })
            })
            .collect()
    }

    pub fn predict_patch_labels(&self, img: &RgbImage) -> Result<PatchLabelGrid> {
        Ok(self.predict_patch_labels_batch(&[img])?.remove(0))
    }

    pub fn predict_patch_labels_batch(&self, images: &[&RgbImage]) -> Result<Vec<PatchLabelGrid>> {
        self.ensure_trained()?;
        ensure!(self.cfg.mode == HeadMode::Centroid, "per-patch labels need a centroid-mode head");
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let prepared: Vec<ImageTensor> = chunk.iter().map(|i| self.preprocess(i)).collect::<Result<_>>()?;
            let refs: Vec<&ImageTensor> = prepared.iter().collect();
            out.extend(self.patch_labels_from_embeddings(&self.embed(&refs)?)?);
        }
        Ok(out)
    }

    /// Attribution of `target`'s logit to the input of the last attention
    /// layer, resized to the frame.
    pub fn gradcam(&self, img: &RgbImage, target: ContentClass) -> Result<AttributionMap> {
        self.ensure_trained()?;
        let x = self.tensor(&[&self.preprocess(img)?])?;
        let inp = self.backbone.forward_to_last_block(&x)?;
        let leaf = Var::from_tensor(&inp.normed.detach().squeeze(0)?)?;
        let e = self.backbone.finish_from_last_block(&inp, &leaf.as_tensor().unsqueeze(0)?)?;
        let score = self.logits_from_embeddings(&e)?.i((0, target.index()))?;
        grad_cam(&leaf, &score, 1, inp.rows, inp.cols, img.width(), img.height(), target)
    }

    pub fn save(&self, path: &Path, run_digest: &str, info: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta { kind: CHECKPOINT_KIND.into(), config_digest: run_digest.into(), config: self.cfg.clone(), info };
        nn_util::save_checkpoint(&self.store, path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta<ClassifierConfig>)> {
        let meta: CheckpointMeta<ClassifierConfig> = nn_util::read_checkpoint_meta(path)?;
        ensure!(meta.kind == CHECKPOINT_KIND, "{} is a {} checkpoint", path.display(), meta.kind);
        let mut m = Self::build(&meta.config, 0, DType::F32)?;
        m.store.load_safetensors(path)?;
        m.trained = true;
        Ok((m, meta))
    }
}

fn augmented_input(model: &ProxyClassifier, stretched: &RgbImage, aug: &AugmentConfig, seed: u64) -> Result<ImageTensor> {
    let (img, _) = augment(stretched, None, aug, seed)?;
    Ok(ImageTensor::from_rgb(&resize_for_classifier(&img, model.cfg.input_size)?))
}

/// Trains head and (unless frozen) backbone with cross entropy. The returned
/// model state is the epoch with the best validation F1.
pub fn train_stage1(
    model: &mut ProxyClassifier,
    train: &[LabeledFrame],
    val: &[LabeledFrame],
    cfg: &TrainConfigStage1,
) -> Result<History> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "empty training split");
    ensure!(!val.is_empty(), "empty validation split");
    ensure!(
        train.iter().any(|f| f.label == ContentClass::NP) && train.iter().any(|f| f.label == ContentClass::P),
        "training split holds a single class"
    );
    let [lo, hi] = model.cfg.contrast_percentiles;
    let stretched: Vec<RgbImage> = train.iter().map(|f| contrast_stretch(&f.image, lo, hi)).collect::<Result<_>>()?;
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..ParamsAdamW::default() };
    let mut opt = AdamW::new(model.store.trainable_vars(), params)?;
    let mut stopper = EarlyStopping::new(cfg.patience, 0.0);
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_learning_rate);
    let mut history = History::default();
    let mut best: Option<BTreeMap<String, Tensor>> = None;
    let mut lr = cfg.learning_rate;
    model.trained = true;

    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let inputs: Vec<ImageTensor> = batch
                .iter()
                .map(|&i| {
                    let s = cfg.seed ^ ((epoch as u64) << 40) ^ ((bi as u64) << 20) ^ i as u64;
                    augmented_input(model, &stretched[i], &cfg.augment, s)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ImageTensor> = inputs.iter().collect();
            let targets: Vec<u32> = batch.iter().map(|&i| train[i].label.index() as u32).collect();
            let logits = model.logits_from_embeddings(&model.embed(&refs)?)?;
            let loss = nn_util::cross_entropy(&logits, &targets)?;
            let l = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            ensure!(l.is_finite(), "training loss diverged at epoch {epoch}");
            if history.first_batch_loss.is_none() {
                history.first_batch_loss = Some(l);
            }
            opt.backward_step(&loss)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let (report, _) = evaluate_classifier(model, val, "val")?;
        let f1 = report.macro_f1.unwrap_or(0.0);
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".to_string(), report.accuracy.unwrap_or(0.0));
        metrics.insert("f1".to_string(), f1);
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / seen as f64, lr, val: metrics });
        log::info!("stage1 epoch {epoch}: loss {:.4} val f1 {f1:.4}", loss_sum / seen as f64);
        if stopper.observe(epoch, f1) {
            best = Some(model.store.snapshot()?);
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
        lr = plateau.step(f1, lr);
        opt.set_learning_rate(lr);
    }
    if let Some(b) = &best {
        model.store.restore(b)?;
    }
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

/// Accuracy and macro F1 over labelled frames, with per-frame predictions.
pub fn evaluate_classifier(
    model: &ProxyClassifier,
    frames: &[LabeledFrame],
    subset: &str,
) -> Result<(MetricsReport, Vec<FramePrediction>)> {
    ensure!(!frames.is_empty(), "evaluation set is empty");
    let imgs: Vec<&RgbImage> = frames.iter().map(|f| &f.image).collect();
    let preds = model.classify_batch(&imgs)?;
    let truth: Vec<ContentClass> = frames.iter().map(|f| f.label).collect();
    let labels: Vec<ContentClass> = preds.iter().map(|p| p.label).collect();
    let report = MetricsReport::classification(subset, &labels, &truth)?;
    let per_frame = frames
        .iter()
        .zip(&preds)
        .map(|(f, p)| FramePrediction { frame_id: f.frame_id.clone(), truth: f.label, predicted: p.label, probability: p.probability })
        .collect();
    Ok((report, per_frame))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: HeadMode,
    pub report: MetricsReport,
    pub history: History,
}

/// Trains one classifier per head mode on the same data and seed.
pub fn run_ablation(
    base: &ClassifierConfig,
    train_cfg: &TrainConfigStage1,
    seed: u64,
    train: &[LabeledFrame],
    val: &[LabeledFrame],
    test: &[LabeledFrame],
) -> Result<Vec<AblationRow>> {
    [HeadMode::Centroid, HeadMode::ClsToken]
        .into_iter()
        .map(|mode| {
            let cfg = ClassifierConfig { mode, ..base.clone() };
            let mut m = ProxyClassifier::new(&cfg, seed)?;
            let history = train_stage1(&mut m, train, val, train_cfg)?;
            let (report, _) = evaluate_classifier(&m, test, "test")?;
            Ok(AblationRow { mode, report, history })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<12} | {:>8} | {:>8}\n", "head", "accuracy", "F1");
    for r in rows {
        s.push_str(&format!(
            "{:<12} | {:>8.4} | {:>8.4}\n",
            r.mode.label(),
            r.report.accuracy.unwrap_or(f64::NAN),
            r.report.macro_f1.unwrap_or(f64::NAN)
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckPoint {
    pub point: usize,
    /// Coordinates compared.
    pub parameters: usize,
    /// Coordinates whose `±eps` probes land on different sides of a ReLU
    /// kink, where the finite difference is not a derivative.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Compares backpropagated gradients of the head's mean cross entropy with
/// central finite differences, in double precision, over every head
/// parameter at `points` random draws of weights, inputs and targets.
/// The error is `|a - n| / max(|a|, |n|)`, or `|a - n|` when both are below
/// 1e-10.
pub fn head_gradient_check(d: usize, batch: usize, points: usize, seed: u64, eps: f64) -> Result<Vec<GradCheckPoint>> {
    use rand::{Rng, SeedableRng};
    let dev = nn_util::device()?;
    (0..points)
        .map(|point| {
            let store = ParamStore::new(seed.wrapping_add(point as u64), DType::F64, dev.clone());
            let head = ClassifierHead::new(&store.root().pp("head"), d)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (point as u64 + 1).wrapping_mul(0x51_7C_C1_B7));
            let x: Vec<f64> = (0..batch * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = Tensor::from_vec(x, (batch, d), &dev)?;
            let targets: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..2)).collect();
            let probe = || -> Result<(f64, Vec<bool>)> {
                let active = head.fc1.forward(&x)?.flatten_all()?.to_vec1::<f64>()?.iter().map(|&z| z > 0.0).collect();
                Ok((nn_util::cross_entropy(&head.forward(&x)?, &targets)?.to_scalar::<f64>()?, active))
            };
            let grads = nn_util::cross_entropy(&head.forward(&x)?, &targets)?.backward()?;
            let mut max_rel: f64 = 0.0;
            let (mut count, mut skipped) = (0, 0);
            for name in store.names() {
                let var = store.var(&name).expect("listed parameter");
                let shape = var.dims().to_vec();
                let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
                let analytic = grads
                    .get(&var)
                    .map(|g| g.flatten_all()?.to_vec1::<f64>())
                    .transpose()?
                    .unwrap_or_else(|| vec![0.0; base.len()]);
                for k in 0..base.len() {
                    let mut v = base.clone();
                    v[k] = base[k] + eps;
                    var.set(&Tensor::from_vec(v.clone(), shape.as_slice(), &dev)?)?;
                    let (up, up_active) = probe()?;
                    v[k] = base[k] - eps;
                    var.set(&Tensor::from_vec(v, shape.as_slice(), &dev)?)?;
                    let (down, down_active) = probe()?;
                    if up_active != down_active {
                        skipped += 1;
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * eps);
                    let scale = analytic[k].abs().max(numeric.abs());
                    let rel = if scale < 1e-10 { (analytic[k] - numeric).abs() } else { (analytic[k] - numeric).abs() / scale };
                    max_rel = max_rel.max(rel);
                    count += 1;
                }
                var.set(&Tensor::from_vec(base, shape.as_slice(), &dev)?)?;
            }
            Ok(GradCheckPoint { point, parameters: count, skipped, max_rel_error: max_rel })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::raster::{Layer, Overlay, Shape};
    use image::Rgb;
    use ContentClass::{NP, P};

    fn noisy(seed: u64, size: u32) -> RgbImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    fn flat(seed: u64, size: u32) -> RgbImage {
        let c = [(seed * 37 % 200) as u8 + 30, (seed * 91 % 200) as u8 + 20, (seed * 53 % 200) as u8 + 10];
        let bg = RgbImage::from_pixel(size, size, Rgb(c));
        let ov = Overlay {
            layers: vec![Layer {
                shape: Shape::Rect { x0: 10.0, y0: 10.0 + seed as f32 % 20.0, x1: 60.0, y1: 50.0 },
                color: [250, 250, 250],
            }],
        };
        crate::corpus::raster::composite(&bg, &[ov]).unwrap().0
    }

    fn constructed_always_np() -> ProxyClassifier {
        let mut m = ProxyClassifier::new(&ClassifierConfig::default(), 1).unwrap();
        let dev = candle_core::Device::Cpu;
        m.set_parameter("head.fc2.weight", &Tensor::zeros((2, HEAD_HIDDEN), DType::F32, &dev).unwrap()).unwrap();
        m.set_parameter("head.fc2.bias", &Tensor::new(&[1.0f32, 0.0], &dev).unwrap()).unwrap();
        m
    }

    #[test]
    fn constructed_head_always_np_and_deterministic() {
        let m = constructed_always_np();
        for s in 0..3 {
            let c = m.classify_frame(&noisy(s, 64)).unwrap();
            assert_eq!(c.label, NP);
            assert_eq!(c, m.classify_frame(&noisy(s, 64)).unwrap());
        }
        let g = m.predict_patch_labels(&noisy(9, 64)).unwrap();
        assert_eq!((g.rows, g.cols), (8, 8));
        assert_eq!(g.count(NP), 64);
    }

    #[test]
    fn untrained_head_is_rejected() {
        let m = ProxyClassifier::new(&ClassifierConfig::default(), 1).unwrap();
        assert!(m.classify_frame(&noisy(0, 32)).is_err());
    }

    #[test]
    fn classify_equals_head_on_centroid() {
        let mut m = ProxyClassifier::new(&ClassifierConfig::default(), 3).unwrap();
        m.trained = true;
        let img = noisy(4, 112);
        let c = m.classify_frame(&img).unwrap();
        let x = m.preprocess(&img).unwrap();
        let e = m.embed(&[&x]).unwrap();
        let direct = m.head.forward(&e.centroid().unwrap()).unwrap();
        let p = candle_nn::ops::softmax(&direct, D::Minus1).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(c.probs, [p[0][0], p[0][1]]);
    }

    #[test]
    fn thresholded_coordinate_head_gives_thresholded_map() {
        let mut m = ProxyClassifier::new(&ClassifierConfig::default(), 5).unwrap();
        let dev = candle_core::Device::Cpu;
        let d = m.cfg.backbone.dim;
        let img = noisy(11, 112);
        let x = m.preprocess(&img).unwrap();
        let states = m.embed(&[&x]).unwrap().states.get(0).unwrap().to_vec2::<f32>().unwrap();
        let mut coord: Vec<f32> = states.iter().map(|s| s[3]).collect();
        coord.sort_by(f32::total_cmp);
        let theta = (coord[coord.len() / 2 - 1] + coord[coord.len() / 2]) / 2.0;
        // hidden unit 0 = relu(x_3 - theta); logit_P - logit_NP = 1000 * unit0 - 1e-3
        let mut w1 = vec![0.0f32; HEAD_HIDDEN * d];
        w1[3] = 1.0;
        let mut b1 = vec![0.0f32; HEAD_HIDDEN];
        b1[0] = -theta;
        let mut w2 = vec![0.0f32; 2 * HEAD_HIDDEN];
        w2[HEAD_HIDDEN] = 1000.0;
        m.set_parameter("head.fc1.weight", &Tensor::from_vec(w1, (HEAD_HIDDEN, d), &dev).unwrap()).unwrap();
        m.set_parameter("head.fc1.bias", &Tensor::from_vec(b1, HEAD_HIDDEN, &dev).unwrap()).unwrap();
        m.set_parameter("head.fc2.weight", &Tensor::from_vec(w2, (2, HEAD_HIDDEN), &dev).unwrap()).unwrap();
        m.set_parameter("head.fc2.bias", &Tensor::new(&[1e-3f32, 0.0], &dev).unwrap()).unwrap();
        let g = m.predict_patch_labels(&img).unwrap();
        for (i, s) in states.iter().enumerate() {
            let expect = if 1000.0 * (s[3] - theta).max(0.0) > 1e-3 { P } else { NP };
            assert_eq!(g.labels[i], expect, "patch {i}");
        }
        assert!(g.count(P) > 0 && g.count(NP) > 0);
    }

    #[test]
    fn equal_patch_states_give_uniform_grid_matching_frame_label() {
        // a backbone whose output ignores the input: zero final-norm gain
        let mut m = ProxyClassifier::new(&ClassifierConfig::default(), 8).unwrap();
        let dev = candle_core::Device::Cpu;
        m.set_parameter("backbone.norm.weight", &Tensor::zeros(64, DType::F32, &dev).unwrap()).unwrap();
        m.set_parameter("backbone.norm.bias", &Tensor::full(0.3f32, 64, &dev).unwrap()).unwrap();
        let img = noisy(2, 112);
        let c = m.classify_frame(&img).unwrap();
        let g = m.predict_patch_labels(&img).unwrap();
        assert_eq!(g.count(c.label), g.labels.len());
    }

    #[test]
    fn cls_mode_has_no_patch_labels() {
        let cfg = ClassifierConfig { mode: HeadMode::ClsToken, ..ClassifierConfig::default() };
        let mut m = ProxyClassifier::new(&cfg, 1).unwrap();
        m.trained = true;
        assert!(m.predict_patch_labels(&noisy(0, 112)).is_err());
        assert!(m.classify_frame(&noisy(0, 112)).is_ok());
    }

    #[test]
    fn gradient_check_double_precision() {
        let pts = head_gradient_check(12, 5, 3, 7, 1e-5).unwrap();
        for p in pts {
            assert!(p.max_rel_error <= 1e-4, "point {} rel err {}", p.point, p.max_rel_error);
            assert_eq!(p.parameters + p.skipped, 12 * 128 + 128 + 128 * 2 + 2);
            assert!(p.skipped * 100 < p.parameters, "{} kink crossings", p.skipped);
        }
    }

    fn toy_sets() -> (Vec<LabeledFrame>, Vec<LabeledFrame>) {
        let mk = |i: u64| {
            if i.is_multiple_of(2) {
                LabeledFrame { frame_id: format!("f{i}"), image: noisy(i, 56), label: P }
            } else {
                LabeledFrame { frame_id: format!("f{i}"), image: flat(i, 56), label: NP }
            }
        };
        ((0..24).map(mk).collect(), (100..108).map(mk).collect())
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (train, val) = toy_sets();
        let cfg = ClassifierConfig { input_size: 56, ..ClassifierConfig::default() };
        let mut m = ProxyClassifier::new(&cfg, 0).unwrap();
        let tc = TrainConfigStage1 {
            learning_rate: 1e-3,
            max_epochs: 8,
            patience: 8,
            augment: AugmentConfig::disabled(),
            ..TrainConfigStage1::default()
        };
        let h = train_stage1(&mut m, &train, &val, &tc).unwrap();
        let first = h.first_batch_loss.unwrap();
        assert!((first - std::f64::consts::LN_2).abs() < 0.15, "first loss {first}");
        let (r, _) = evaluate_classifier(&m, &train, "train").unwrap();
        assert_eq!(r.macro_f1, Some(1.0));
    }

    #[test]
    fn early_stopping_ends_training() {
        let (train, val) = toy_sets();
        let cfg = ClassifierConfig { input_size: 56, ..ClassifierConfig::default() };
        let mut m = ProxyClassifier::new(&cfg, 0).unwrap();
        // a zero-ish learning rate cannot improve F1 after the first epoch
        let tc = TrainConfigStage1 {
            learning_rate: 1e-12,
            min_learning_rate: 1e-13,
            max_epochs: 20,
            patience: 2,
            augment: AugmentConfig::disabled(),
            ..TrainConfigStage1::default()
        };
        let h = train_stage1(&mut m, &train, &val, &tc).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.epochs.len(), 3);
    }

    #[test]
    fn training_input_errors() {
        let (train, val) = toy_sets();
        let mut m = ProxyClassifier::new(&ClassifierConfig { input_size: 56, ..ClassifierConfig::default() }, 0).unwrap();
        let tc = TrainConfigStage1::default();
        assert!(train_stage1(&mut m, &[], &val, &tc).is_err());
        assert!(train_stage1(&mut m, &train, &[], &tc).is_err());
        let single: Vec<_> = train.iter().filter(|f| f.label == P).cloned().collect();
        assert!(train_stage1(&mut m, &single, &val, &tc).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let m = constructed_always_np();
        let p = dir.path().join("proxy.safetensors");
        m.save(&p, "abc", serde_json::json!({"note": 1})).unwrap();
        let (n, meta) = ProxyClassifier::load(&p).unwrap();
        assert_eq!(meta.config_digest, "abc");
        let img = noisy(3, 112);
        assert_eq!(m.classify_frame(&img).unwrap(), n.classify_frame(&img).unwrap());
    }

    #[test]
    fn gradcam_has_frame_dimensions() {
        let mut m = ProxyClassifier::new(&ClassifierConfig::default(), 2).unwrap();
        m.trained = true;
        let img = noisy(1, 100);
        let a = m.gradcam(&img, P).unwrap();
        assert_eq!((a.width, a.height), (100, 100));
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
