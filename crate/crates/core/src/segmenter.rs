//! Stage 3: a hierarchical transformer encoder (overlapping patch merging,
//! spatially reduced attention, convolutional feed-forward) with an all-dense
//! decoder, fine-tuned on homogeneous masks plus manual or proxy masks of
//! heterogeneous frames.
//!
//! Parameter names follow the common SegFormer checkpoint layout so a
//! pretrained encoder can be loaded directly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_tensor, ImageTensor};
use crate::corpus::{homogeneous_mask, read_mask, ContentClass, CorpusManifest, FrameKind, FrameRecord, MaskImage};
use crate::error::{ensure, Error, Result};
use crate::eval_explain::MetricsReport;
use crate::nn_util::{self, linear, upsample_bilinear, CheckpointMeta, Init, LayerNorm, ParamStore, Scope};
use crate::preprocess::{augment, contrast_stretch, resize_bilinear, resize_for_segmenter, AugmentConfig};
use crate::proxy_classifier::load_rgb;
use crate::splitter::{Split, SplitAssignment};
use crate::train_util::{epoch_batches, EarlyStopping, EpochRecord, History};

pub const CHECKPOINT_KIND: &str = "segmenter";
const INIT_STD: f64 = 0.02;
const BLOCK_LN_EPS: f64 = 1e-6;
const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub id: String,
    /// Per-stage channel widths.
    pub hidden_sizes: Vec<usize>,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Per-stage key/value spatial reduction.
    pub sr_ratios: Vec<usize>,
    pub patch_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Square side frames and masks are resized to for training.
    pub input_size: u32,
    pub contrast_percentiles: [f64; 2],
    /// Safetensors file with `segformer.encoder.*` weights.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self::mini()
    }
}

impl SegmenterConfig {
    /// Two-stage miniature encoder for CPU runs.
    pub fn mini() -> Self {
        Self {
            id: "mini-mit".into(),
            hidden_sizes: vec![32, 64],
            depths: vec![1, 1],
            num_heads: vec![1, 2],
            sr_ratios: vec![4, 2],
            patch_sizes: vec![7, 3],
            strides: vec![4, 2],
            mlp_ratio: 4,
            decoder_dim: 64,
            input_size: 64,
            contrast_percentiles: [2.0, 98.0],
            weights: None,
        }
    }

    /// The smallest published encoder variant at 512×512.
    pub fn mit_b0(weights: Option<PathBuf>) -> Self {
        Self {
            id: "mit-b0".into(),
            hidden_sizes: vec![32, 64, 160, 256],
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 5, 8],
            sr_ratios: vec![8, 4, 2, 1],
            patch_sizes: vec![7, 3, 3, 3],
            strides: vec![4, 2, 2, 2],
            mlp_ratio: 4,
            decoder_dim: 256,
            input_size: crate::preprocess::SEGMENTER_INPUT,
            contrast_percentiles: [2.0, 98.0],
            weights,
        }
    }

    pub fn from_id(id: &str, weights: Option<PathBuf>) -> Result<Self> {
        match id {
            "mini-mit" => Ok(Self { weights, ..Self::mini() }),
            "mit-b0" => Ok(Self::mit_b0(weights)),
            other => Err(Error::invalid(format!("unknown segmenter {other:?}; expected mini-mit or mit-b0"))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.hidden_sizes.len()
    }

    /// Feature-map side of every stage for a square input of `side`.
    pub fn stage_sides(&self, side: usize) -> Vec<usize> {
        let mut h = side;
        self.patch_sizes
            .iter()
            .zip(&self.strides)
            .map(|(&k, &s)| {
                h = (h + 2 * (k / 2)).saturating_sub(k) / s + 1;
                h
            })
            .collect()
    }

    /// Smallest frame side the model accepts: one cell of the coarsest stage.
    pub fn min_resolution(&self) -> u32 {
        self.strides.iter().product::<usize>() as u32
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        ensure!(n > 0, "segmenter needs at least one stage");
        for (name, len) in [
            ("depths", self.depths.len()),
            ("num_heads", self.num_heads.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("patch_sizes", self.patch_sizes.len()),
            ("strides", self.strides.len()),
        ] {
            ensure!(len == n, "{name} has {len} entries for {n} stages");
        }
        for i in 0..n {
            ensure!(self.hidden_sizes[i] > 0 && self.num_heads[i] > 0, "stage {i} has zero width or heads");
            ensure!(self.hidden_sizes[i].is_multiple_of(self.num_heads[i]), "stage {i}: width {} not divisible by {} heads", self.hidden_sizes[i], self.num_heads[i]);
            ensure!(self.depths[i] > 0 && self.sr_ratios[i] > 0 && self.strides[i] > 0 && self.patch_sizes[i] > 0, "stage {i} has a zero hyperparameter");
        }
        ensure!(self.mlp_ratio > 0 && self.decoder_dim > 0, "mlp ratio and decoder width must be positive");
        ensure!(
            self.input_size >= self.min_resolution() && self.input_size.is_multiple_of(self.min_resolution()),
            "input size {} must be a multiple of the total stride {}",
            self.input_size,
            self.min_resolution()
        );
        for (i, (h, sr)) in self.stage_sides(self.input_size as usize).into_iter().zip(&self.sr_ratios).enumerate() {
            ensure!(h % sr == 0, "stage {i} side {h} is not divisible by reduction {sr}");
        }
        let [lo, hi] = self.contrast_percentiles;
        ensure!(0.0 <= lo && lo < hi && hi <= 100.0, "contrast percentiles [{lo}, {hi}] are invalid");
        if let Some(w) = &self.weights {
            if !w.exists() {
                return Err(Error::MissingPrerequisite(format!("segmenter weights {} not found", w.display())));
            }
        }
        Ok(())
    }
}

fn conv_weight(s: &Scope, c_out: usize, c_in: usize, k: usize) -> Result<Tensor> {
    s.get("weight", &[c_out, c_in, k, k], Init::Normal(INIT_STD))
}

fn dense(s: &Scope, d_in: usize, d_out: usize) -> Result<candle_nn::Linear> {
    linear(s, d_in, d_out, Init::Normal(INIT_STD))
}

/// `(B, C, H, W)` to `(B, H·W, C)`.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C)` to `(B, C, H, W)`.
fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
}

struct OverlapPatchEmbed {
    weight: Tensor,
    bias: Tensor,
    norm: LayerNorm,
    kernel: usize,
    stride: usize,
}

impl OverlapPatchEmbed {
    fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let p = s.pp("proj");
        Ok(Self {
            weight: conv_weight(&p, c_out, c_in, kernel)?,
            bias: p.get("bias", &[c_out], Init::Zeros)?,
            norm: LayerNorm::new(&s.pp("layer_norm"), c_out, LN_EPS)?,
            kernel,
            stride,
        })
    }

    /// Returns tokens `(B, H'·W', C)` and the new grid side lengths.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = x.conv2d(&self.weight, self.kernel / 2, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        let y = y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&to_tokens(&y)?)?, h, w))
    }
}

struct EfficientAttention {
    query: candle_nn::Linear,
    key: candle_nn::Linear,
    value: candle_nn::Linear,
    output: candle_nn::Linear,
    sr: Option<(Tensor, Tensor, LayerNorm, usize)>,
    heads: usize,
}

impl EfficientAttention {
    fn new(s: &Scope, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let a = s.pp("self");
        let sr = if sr_ratio > 1 {
            let c = a.pp("sr");
            Some((
                conv_weight(&c, dim, dim, sr_ratio)?,
                c.get("bias", &[dim], Init::Zeros)?,
                LayerNorm::new(&a.pp("layer_norm"), dim, LN_EPS)?,
                sr_ratio,
            ))
        } else {
            None
        };
        Ok(Self {
            query: dense(&a.pp("query"), dim, dim)?,
            key: dense(&a.pp("key"), dim, dim)?,
            value: dense(&a.pp("value"), dim, dim)?,
            output: dense(&s.pp("output").pp("dense"), dim, dim)?,
            sr,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let kv_src = match &self.sr {
            Some((wt, bias, norm, r)) => {
                let m = to_map(x, h, w)?.conv2d(wt, 0, *r, 1, 1)?.broadcast_add(&bias.reshape((1, c, 1, 1))?)?;
                norm.forward(&to_tokens(&m)?)?
            }
            None => x.clone(),
        };
        let k = self.split_heads(&self.key.forward(&kv_src)?)?;
        let v = self.split_heads(&self.value.forward(&kv_src)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        Ok(self.output.forward(&out)?)
    }
}

struct MixFfn {
    dense1: candle_nn::Linear,
    dw_weight: Tensor,
    dw_bias: Tensor,
    dense2: candle_nn::Linear,
}

impl MixFfn {
    fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        let dw = s.pp("dwconv").pp("dwconv");
        Ok(Self {
            dense1: dense(&s.pp("dense1"), dim, hidden)?,
            dw_weight: conv_weight(&dw, hidden, 1, 3)?,
            dw_bias: dw.get("bias", &[hidden], Init::Zeros)?,
            dense2: dense(&s.pp("dense2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.dense1.forward(x)?;
        let y = nn_util::depthwise_conv3x3(&to_map(&y, h, w)?, &self.dw_weight, &self.dw_bias)?;
        Ok(self.dense2.forward(&to_tokens(&y)?.gelu_erf()?)?)
    }
}

struct EncoderBlock {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    mlp: MixFfn,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

struct Stage {
    embed: OverlapPatchEmbed,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

struct Decoder {
    proj: Vec<candle_nn::Linear>,
    fuse: Tensor,
    bn_weight: Tensor,
    bn_bias: Tensor,
    bn_mean: Tensor,
    bn_var: Tensor,
    classifier: candle_nn::Linear,
}

impl Decoder {
    fn new(s: &Scope, cfg: &SegmenterConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let n = cfg.num_stages();
        let proj = (0..n).map(|i| dense(&s.pp("linear_c").pp(i).pp("proj"), cfg.hidden_sizes[i], d)).collect::<Result<_>>()?;
        let bn = s.pp("batch_norm");
        Ok(Self {
            proj,
            fuse: conv_weight(&s.pp("linear_fuse"), d, n * d, 1)?,
            bn_weight: bn.get("weight", &[d], Init::Ones)?,
            bn_bias: bn.get("bias", &[d], Init::Zeros)?,
            bn_mean: bn.buffer("running_mean", &[d], Init::Zeros)?,
            bn_var: bn.buffer("running_var", &[d], Init::Ones)?,
            classifier: {
                let c = s.pp("classifier");
                let w = c.get("weight", &[2, d, 1, 1], Init::Normal(INIT_STD))?;
                candle_nn::Linear::new(w.reshape((2, d))?, Some(c.get("bias", &[2], Init::Zeros)?))
            },
        })
    }

    /// Stage maps `(B, C_i, H_i, W_i)` to `(B, 2, H_0, W_0)` logits.
    fn forward(&self, features: &[Tensor]) -> Result<Tensor> {
        let (b, _, h0, w0) = features[0].dims4()?;
        let mut parts = Vec::with_capacity(features.len());
        for (f, proj) in features.iter().zip(&self.proj).rev() {
            let (_, _, h, w) = f.dims4()?;
            let m = to_map(&proj.forward(&to_tokens(f)?)?, h, w)?;
            parts.push(upsample_bilinear(&m, h0, w0)?);
        }
        let x = Tensor::cat(&parts, 1)?.permute((0, 2, 3, 1))?.contiguous()?;
        let (d, nd) = (self.fuse.dim(0)?, self.fuse.dim(1)?);
        let x = x.broadcast_matmul(&self.fuse.reshape((d, nd))?.t()?)?;
        // inference-mode normalization with fixed running statistics
        let inv = (self.bn_var.clone() + BN_EPS)?.sqrt()?.recip()?;
        let x = x.broadcast_sub(&self.bn_mean)?.broadcast_mul(&inv)?.broadcast_mul(&self.bn_weight)?.broadcast_add(&self.bn_bias)?.relu()?;
        let logits = self.classifier.forward(&x)?;
        debug_assert_eq!(logits.dims4()?, (b, h0, w0, 2));
        Ok(logits.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

pub struct SegModel {
    cfg: SegmenterConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    decoder: Decoder,
    trained: bool,
}

impl SegModel {
    /// Fresh model; a pretrained encoder is loaded when configured.
    pub fn new(cfg: &SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let m = Self::build(cfg, seed)?;
        if let Some(w) = &cfg.weights {
            let n = m.store.load_safetensors_matching(w, "segformer.encoder.")?;
            log::info!("loaded {n} encoder tensors from {}", w.display());
        }
        Ok(m)
    }

    fn build(cfg: &SegmenterConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32, nn_util::device()?);
        let enc = store.root().pp("segformer").pp("encoder");
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut c_in = 3;
        for i in 0..cfg.num_stages() {
            let dim = cfg.hidden_sizes[i];
            let embed = OverlapPatchEmbed::new(&enc.pp("patch_embeddings").pp(i), c_in, dim, cfg.patch_sizes[i], cfg.strides[i])?;
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let s = enc.pp("block").pp(i).pp(j);
                    Ok(EncoderBlock {
                        norm1: LayerNorm::new(&s.pp("layer_norm_1"), dim, BLOCK_LN_EPS)?,
                        attn: EfficientAttention::new(&s.pp("attention"), dim, cfg.num_heads[i], cfg.sr_ratios[i])?,
                        norm2: LayerNorm::new(&s.pp("layer_norm_2"), dim, BLOCK_LN_EPS)?,
                        mlp: MixFfn::new(&s.pp("mlp"), dim, dim * cfg.mlp_ratio)?,
                    })
                })
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(&enc.pp("layer_norm").pp(i), dim, LN_EPS)?;
            stages.push(Stage { embed, blocks, norm });
            c_in = dim;
        }
        let decoder = Decoder::new(&store.root().pp("decode_head"), cfg)?;
        Ok(Self { cfg: cfg.clone(), store, stages, decoder, trained: false })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// `(B, 3, S, S)` normalized input to `(B, 2, S/4, S/4)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let mut features = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (mut t, h, w) = st.embed.forward(&x)?;
            for blk in &st.blocks {
                t = blk.forward(&t, h, w)?;
            }
            x = to_map(&st.norm.forward(&t)?, h, w)?.contiguous()?;
            features.push(x.clone());
        }
        self.decoder.forward(&features)
    }

    fn stretch(&self, img: &RgbImage) -> Result<RgbImage> {
        let [lo, hi] = self.cfg.contrast_percentiles;
        contrast_stretch(img, lo, hi)
    }

    fn input_tensor(&self, images: &[RgbImage]) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let ts: Vec<ImageTensor> = images.iter().map(|i| ImageTensor::from_rgb(&resize_bilinear(i, s, s))).collect();
        let refs: Vec<&ImageTensor> = ts.iter().collect();
        batch_tensor(&refs, self.store.device(), self.store.dtype())
    }

    /// Per-pixel labels at each frame's own resolution. Ties go to NP.
    pub fn segment_batch(&self, images: &[&RgbImage]) -> Result<Vec<MaskImage>> {
        ensure!(self.trained, "segmenter has not been trained or loaded");
        let min = self.cfg.min_resolution();
        for img in images {
            ensure!(
                img.width() >= min && img.height() >= min,
                "frame {}×{} is below the model minimum of {min}px",
                img.width(),
                img.height()
            );
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let stretched: Vec<RgbImage> = chunk.iter().map(|i| self.stretch(i)).collect::<Result<_>>()?;
            let logits = self.forward(&self.input_tensor(&stretched)?)?;
            for (i, img) in chunk.iter().enumerate() {
                let (w, h) = img.dimensions();
                let up = upsample_bilinear(&logits.narrow(0, i, 1)?, h as usize, w as usize)?;
                let p = up.narrow(1, 1, 1)?.gt(&up.narrow(1, 0, 1)?)?.flatten_all()?.to_vec1::<u8>()?;
                out.push(MaskImage::new(w, h, p)?);
            }
        }
        Ok(out)
    }

    pub fn segment(&self, img: &RgbImage) -> Result<MaskImage> {
        Ok(self.segment_batch(&[img])?.remove(0))
    }

    pub fn save(&self, path: &Path, run_digest: &str, info: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta { kind: CHECKPOINT_KIND.into(), config_digest: run_digest.into(), config: self.cfg.clone(), info };
        nn_util::save_checkpoint(&self.store, path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta<SegmenterConfig>)> {
        let meta: CheckpointMeta<SegmenterConfig> = nn_util::read_checkpoint_meta(path)?;
        ensure!(meta.kind == CHECKPOINT_KIND, "{} is a {} checkpoint", path.display(), meta.kind);
        let cfg = SegmenterConfig { weights: None, ..meta.config.clone() };
        let mut m = Self::build(&cfg, 0)?;
        m.store.load_safetensors(path)?;
        m.trained = true;
        Ok((m, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfigStage3 {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation mean IoU improvement before stopping.
    pub patience: usize,
    /// Copies of every heterogeneous frame per epoch; 1 mixes all frames
    /// uniformly.
    pub heterogeneous_repeat: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfigStage3 {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 6e-5,
            weight_decay: 0.01,
            max_epochs: 50,
            patience: 5,
            heterogeneous_repeat: 1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfigStage3 {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0 && self.max_epochs > 0, "batch size and epochs must be positive");
        ensure!(self.learning_rate > 0.0, "learning rate must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        ensure!(self.heterogeneous_repeat > 0, "heterogeneous repeat must be positive");
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlanId {
    A,
    B0,
    B1,
    B2,
}

impl PlanId {
    pub const ALL: [PlanId; 4] = [PlanId::A, PlanId::B0, PlanId::B1, PlanId::B2];

    pub fn name(self) -> &'static str {
        match self {
            PlanId::A => "A",
            PlanId::B0 => "B0",
            PlanId::B1 => "B1",
            PlanId::B2 => "B2",
        }
    }
}

impl fmt::Display for PlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlanId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('.', "").as_str() {
            "A" => Ok(PlanId::A),
            "B0" => Ok(PlanId::B0),
            "B1" => Ok(PlanId::B1),
            "B2" => Ok(PlanId::B2),
            _ => Err(Error::invalid(format!("unknown plan {s:?}; expected A, B0, B1 or B2"))),
        }
    }
}

/// Where the masks of heterogeneous frames come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Manual,
    Proxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMasks {
    HomogeneousOnly,
    PlusManual,
    PlusProxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMasks {
    HomogeneousOnly,
    Manual,
    Proxy,
}

impl TrainMasks {
    pub fn heterogeneous(self) -> Option<MaskSource> {
        match self {
            TrainMasks::HomogeneousOnly => None,
            TrainMasks::PlusManual => Some(MaskSource::Manual),
            TrainMasks::PlusProxy => Some(MaskSource::Proxy),
        }
    }
}

impl ValMasks {
    pub fn heterogeneous(self) -> Option<MaskSource> {
        match self {
            ValMasks::HomogeneousOnly => None,
            ValMasks::Manual => Some(MaskSource::Manual),
            ValMasks::Proxy => Some(MaskSource::Proxy),
        }
    }
}

/// Test subsets every experiment is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSubset {
    /// Homogeneous frames only.
    Homogeneous,
    /// Homogeneous plus heterogeneous frames with manual masks.
    HomogeneousManual,
    /// Heterogeneous frames with manual masks only.
    ManualOnly,
}

impl TestSubset {
    pub const ALL: [TestSubset; 3] = [TestSubset::Homogeneous, TestSubset::HomogeneousManual, TestSubset::ManualOnly];

    pub fn name(self) -> &'static str {
        match self {
            TestSubset::Homogeneous => "NP+P",
            TestSubset::HomogeneousManual => "NP+P+M",
            TestSubset::ManualOnly => "M",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub id: PlanId,
    pub train_masks: TrainMasks,
    pub val_masks: ValMasks,
}

impl ExperimentPlan {
    pub fn new(id: PlanId) -> Self {
        let (train_masks, val_masks) = match id {
            PlanId::A => (TrainMasks::HomogeneousOnly, ValMasks::HomogeneousOnly),
            PlanId::B0 => (TrainMasks::PlusManual, ValMasks::Manual),
            PlanId::B1 => (TrainMasks::PlusProxy, ValMasks::Manual),
            PlanId::B2 => (TrainMasks::PlusProxy, ValMasks::Proxy),
        };
        Self { id, train_masks, val_masks }
    }

    pub fn test_subsets(&self) -> [TestSubset; 3] {
        TestSubset::ALL
    }
}

/// The segmentation dataset: per split, every heterogeneous frame plus an
/// equally large, class-balanced random sample of homogeneous frames. A split
/// without heterogeneous frames keeps all its homogeneous frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegDataset {
    pub seed: u64,
    /// Frame ids indexed by [`Split::index`].
    pub homogeneous: [Vec<String>; 3],
    pub heterogeneous: [Vec<String>; 3],
}

impl SegDataset {
    pub fn select(manifest: &CorpusManifest, split: &SplitAssignment, seed: u64) -> Result<Self> {
        split.verify(manifest)?;
        let mut homogeneous: [Vec<String>; 3] = Default::default();
        let mut heterogeneous: [Vec<String>; 3] = Default::default();
        for s in Split::ALL {
            let frames: Vec<&FrameRecord> = manifest.frames().filter(|f| split.split_of(&f.video_id) == Some(s)).collect();
            let ids = |k: FrameKind| -> Vec<String> {
                let mut v: Vec<String> = frames.iter().filter(|f| f.kind() == k).map(|f| f.frame_id.clone()).collect();
                v.sort();
                v
            };
            let het = ids(FrameKind::Heterogeneous);
            let (mut np, mut p) = (ids(FrameKind::Np), ids(FrameKind::P));
            let mut hom = if het.is_empty() {
                np.into_iter().chain(p).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((s.index() as u64 + 1) << 32));
                np.shuffle(&mut rng);
                p.shuffle(&mut rng);
                let want = het.len().min(np.len() + p.len());
                let mut n_np = (want / 2).min(np.len());
                let n_p = (want - n_np).min(p.len());
                n_np = (want - n_p).min(np.len());
                np.truncate(n_np);
                p.truncate(n_p);
                np.into_iter().chain(p).collect::<Vec<_>>()
            };
            hom.sort();
            homogeneous[s.index()] = hom;
            heterogeneous[s.index()] = het;
        }
        Ok(Self { seed, homogeneous, heterogeneous })
    }

    pub fn homogeneous_in(&self, s: Split) -> &[String] {
        &self.homogeneous[s.index()]
    }

    pub fn heterogeneous_in(&self, s: Split) -> &[String] {
        &self.heterogeneous[s.index()]
    }
}

/// A frame with the mask it is trained or scored against.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub frame_id: String,
    pub kind: FrameKind,
    pub image: RgbImage,
    pub mask: MaskImage,
}

fn het_mask_path(f: &FrameRecord, source: MaskSource) -> Option<&PathBuf> {
    match source {
        MaskSource::Manual => f.gt_mask_path.as_ref(),
        MaskSource::Proxy => f.proxy_mask_path.as_ref(),
    }
}

/// Loads frames with homogeneous masks, and heterogeneous frames with masks
/// from `source`. A heterogeneous frame lacking that mask is a missing
/// prerequisite.
pub fn load_samples(
    manifest: &CorpusManifest,
    homogeneous: &[String],
    heterogeneous: &[String],
    source: Option<MaskSource>,
) -> Result<Vec<SegSample>> {
    let lookup = |id: &str| manifest.frame(id).ok_or_else(|| Error::invalid(format!("frame {id} is not in the manifest")));
    let mut out = Vec::with_capacity(homogeneous.len() + heterogeneous.len());
    for id in homogeneous {
        let f = lookup(id)?;
        let image = load_rgb(&manifest.resolve(&f.image_path))?;
        let mask = homogeneous_mask(f, image.width(), image.height())?;
        out.push(SegSample { frame_id: id.clone(), kind: f.kind(), image, mask });
    }
    if let Some(src) = source {
        for id in heterogeneous {
            let f = lookup(id)?;
            let rel = het_mask_path(f, src).ok_or_else(|| {
                let stage = match src {
                    MaskSource::Manual => "manual masks",
                    MaskSource::Proxy => "proxy masks (run gen-masks)",
                };
                Error::MissingPrerequisite(format!("frame {id} has no {stage}"))
            })?;
            let image = load_rgb(&manifest.resolve(&f.image_path))?;
            let mask = read_mask(&manifest.resolve(rel))?;
            ensure!(mask.dimensions() == image.dimensions(), "mask of frame {id} does not match its image");
            out.push(SegSample { frame_id: id.clone(), kind: f.kind(), image, mask });
        }
    }
    Ok(out)
}

/// Training and validation samples of `plan`.
pub fn plan_samples(manifest: &CorpusManifest, data: &SegDataset, plan: &ExperimentPlan) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let train = load_samples(manifest, data.homogeneous_in(Split::Train), data.heterogeneous_in(Split::Train), plan.train_masks.heterogeneous())?;
    let val = load_samples(manifest, data.homogeneous_in(Split::Val), data.heterogeneous_in(Split::Val), plan.val_masks.heterogeneous())?;
    Ok((train, val))
}

/// Test samples of one subset, scored against manual masks.
pub fn test_samples(manifest: &CorpusManifest, data: &SegDataset, subset: TestSubset) -> Result<Vec<SegSample>> {
    let (hom, het): (&[String], &[String]) = match subset {
        TestSubset::Homogeneous => (data.homogeneous_in(Split::Test), &[]),
        TestSubset::HomogeneousManual => (data.homogeneous_in(Split::Test), data.heterogeneous_in(Split::Test)),
        TestSubset::ManualOnly => (&[], data.heterogeneous_in(Split::Test)),
    };
    load_samples(manifest, hom, het, Some(MaskSource::Manual))
}

pub fn evaluate_segmenter(model: &SegModel, samples: &[SegSample], subset: &str) -> Result<MetricsReport> {
    ensure!(!samples.is_empty(), "evaluation set {subset} is empty");
    let imgs: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let preds = model.segment_batch(&imgs)?;
    let pairs: Vec<(MaskImage, MaskImage)> = preds.into_iter().zip(samples.iter().map(|s| s.mask.clone())).collect();
    MetricsReport::segmentation(subset, &pairs)
}

/// Per-pixel cross entropy of `(B, 2, h, w)` logits, upsampled to the label
/// side, against `(B, S, S)` labels.
fn pixel_loss(logits: &Tensor, labels: &[u32], side: usize) -> Result<Tensor> {
    let up = upsample_bilinear(logits, side, side)?;
    let flat = up.permute((0, 2, 3, 1))?.reshape(((), 2))?;
    nn_util::cross_entropy(&flat, labels)
}

/// Fine-tunes `model` with AdamW and per-pixel cross entropy. Keeps the epoch
/// with the best validation mean IoU.
pub fn train_segmenter(model: &mut SegModel, train: &[SegSample], val: &[SegSample], cfg: &TrainConfigStage3) -> Result<History> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "empty training set");
    ensure!(!val.is_empty(), "empty validation set");
    let side = model.cfg.input_size;
    let stretched: Vec<RgbImage> = train.iter().map(|s| model.stretch(&s.image)).collect::<Result<_>>()?;
    let order: Vec<usize> = (0..train.len())
        .flat_map(|i| {
            let copies = if train[i].kind == FrameKind::Heterogeneous { cfg.heterogeneous_repeat } else { 1 };
            std::iter::repeat_n(i, copies)
        })
        .collect();
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..ParamsAdamW::default() };
    let mut opt = AdamW::new(model.store.trainable_vars(), params)?;
    let mut stopper = EarlyStopping::new(cfg.patience, 0.0);
    let mut history = History::default();
    let mut best: Option<BTreeMap<String, Tensor>> = None;
    model.trained = true;

    for epoch in 0..cfg.max_epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, batch) in epoch_batches(order.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len() * (side * side) as usize);
            for &j in &batch {
                let i = order[j];
                let s = cfg.seed ^ ((epoch as u64) << 40) ^ ((bi as u64) << 20) ^ j as u64;
                let (img, mask) = augment(&stretched[i], Some(&train[i].mask), &cfg.augment, s)?;
                let (img, mask) = resize_for_segmenter(&img, mask.as_ref(), side)?;
                labels.extend(mask.expect("mask passed through").labels().iter().map(|&v| v as u32));
                imgs.push(img);
            }
            let loss = pixel_loss(&model.forward(&model.input_tensor(&imgs)?)?, &labels, side as usize)?;
            let l = loss.to_scalar::<f32>()? as f64;
            ensure!(l.is_finite(), "segmentation loss diverged at epoch {epoch}");
            if history.first_batch_loss.is_none() {
                history.first_batch_loss = Some(l);
            }
            opt.backward_step(&loss)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let report = evaluate_segmenter(model, val, "val")?;
        let iou = report.iou.expect("segmentation report");
        let mut metrics = BTreeMap::new();
        metrics.insert("mean_iou".to_string(), iou.mean);
        metrics.insert("iou_np".to_string(), iou.np);
        metrics.insert("iou_p".to_string(), iou.p);
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / seen as f64, lr: cfg.learning_rate, val: metrics });
        log::info!("stage3 epoch {epoch}: loss {:.4} val mean IoU {:.4}", loss_sum / seen as f64, iou.mean);
        if stopper.observe(epoch, iou.mean) {
            best = Some(model.store.snapshot()?);
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    if let Some(b) = &best {
        model.store.restore(b)?;
    }
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

/// One trained model of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub history: History,
    pub val: MetricsReport,
    /// Reports for the non-empty test subsets.
    pub test: BTreeMap<TestSubset, MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub plan: ExperimentPlan,
    pub runs: Vec<SeedResult>,
}

impl ExperimentResult {
    /// Test reports averaged over seeds.
    pub fn test_mean(&self) -> Result<BTreeMap<TestSubset, MetricsReport>> {
        let mut out = BTreeMap::new();
        for subset in TestSubset::ALL {
            let reports: Vec<MetricsReport> = self.runs.iter().filter_map(|r| r.test.get(&subset).cloned()).collect();
            if !reports.is_empty() {
                out.insert(subset, MetricsReport::average(&reports)?);
            }
        }
        Ok(out)
    }

    pub fn val_mean(&self) -> Result<MetricsReport> {
        MetricsReport::average(&self.runs.iter().map(|r| r.val.clone()).collect::<Vec<_>>())
    }

    /// Seed-averaged mean IoU on one test subset.
    pub fn mean_iou(&self, subset: TestSubset) -> Result<Option<f64>> {
        Ok(self.test_mean()?.get(&subset).and_then(|r| r.mean_iou()))
    }
}

/// Trains a fresh model for one seed and scores it on every test subset.
/// Returns the model too so the caller can save it.
pub fn run_seed(
    manifest: &CorpusManifest,
    data: &SegDataset,
    plan: &ExperimentPlan,
    model_cfg: &SegmenterConfig,
    train_cfg: &TrainConfigStage3,
    seed: u64,
) -> Result<(SegModel, SeedResult)> {
    let (train, val) = plan_samples(manifest, data, plan)?;
    let mut model = SegModel::new(model_cfg, seed)?;
    let cfg = TrainConfigStage3 { seed, ..train_cfg.clone() };
    let history = train_segmenter(&mut model, &train, &val, &cfg)?;
    let val_report = evaluate_segmenter(&model, &val, "val")?;
    let mut test = BTreeMap::new();
    for subset in plan.test_subsets() {
        let samples = test_samples(manifest, data, subset)?;
        if !samples.is_empty() {
            test.insert(subset, evaluate_segmenter(&model, &samples, subset.name())?);
        }
    }
    Ok((model, SeedResult { seed, history, val: val_report, test }))
}

/// Runs one plan for every seed on the same dataset and masks.
pub fn run_experiment(
    manifest: &CorpusManifest,
    data: &SegDataset,
    plan: &ExperimentPlan,
    model_cfg: &SegmenterConfig,
    train_cfg: &TrainConfigStage3,
    seeds: &[u64],
) -> Result<ExperimentResult> {
    ensure!(!seeds.is_empty(), "at least one seed is required");
    let runs = seeds
        .iter()
        .map(|&s| run_seed(manifest, data, plan, model_cfg, train_cfg, s).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    Ok(ExperimentResult { plan: *plan, runs })
}

/// Plain-text table: one row per experiment, NP / P / mean IoU per test
/// subset, averaged over seeds.
pub fn comparison_table(results: &[ExperimentResult]) -> Result<String> {
    let mut s = String::from("| Plan | Train | Val |");
    for t in TestSubset::ALL {
        s.push_str(&format!(" {0} NP | {0} P | {0} mean |", t.name()));
    }
    s.push('\n');
    s.push_str(&"|---".repeat(3 + 3 * TestSubset::ALL.len()));
    s.push_str("|\n");
    for r in results {
        let mean = r.test_mean()?;
        s.push_str(&format!("| {} | {:?} | {:?} |", r.plan.id, r.plan.train_masks, r.plan.val_masks));
        for t in TestSubset::ALL {
            match mean.get(&t).and_then(|m| m.iou) {
                Some(c) => s.push_str(&format!(" {:.4} | {:.4} | {:.4} |", c.np, c.p, c.mean)),
                None => s.push_str(" - | - | - |"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// Label of the majority class of a mask; ties go to NP.
pub fn majority(mask: &MaskImage) -> ContentClass {
    if mask.count(ContentClass::P) > mask.count(ContentClass::NP) {
        ContentClass::P
    } else {
        ContentClass::NP
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_mask, Homogeneity, Provenance, VideoRecord};
    use crate::splitter::{stratified_split, SplitSpec};

    fn tiny_cfg() -> SegmenterConfig {
        SegmenterConfig { input_size: 32, ..SegmenterConfig::mini() }
    }

    fn blob_image(p_left: bool, size: u32) -> (RgbImage, MaskImage) {
        let img = RgbImage::from_fn(size, size, |x, y| {
            let photo = (x < size / 2) == p_left;
            if photo {
                image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) * 5 % 256) as u8])
            } else {
                image::Rgb([250, 250, 250])
            }
        });
        let mask = MaskImage::from_fn(size, size, |x, _| if (x < size / 2) == p_left { ContentClass::P } else { ContentClass::NP }).unwrap();
        (img, mask)
    }

    fn trained_tiny(seed: u64) -> SegModel {
        let mut m = SegModel::new(&tiny_cfg(), seed).unwrap();
        m.trained = true;
        m
    }

    #[test]
    fn configs_validate() {
        SegmenterConfig::mini().validate().unwrap();
        SegmenterConfig::mit_b0(None).validate().unwrap();
        assert_eq!(SegmenterConfig::mit_b0(None).stage_sides(512), vec![128, 64, 32, 16]);
        assert_eq!(SegmenterConfig::mini().stage_sides(64), vec![16, 8]);
        let bad = SegmenterConfig { input_size: 30, ..SegmenterConfig::mini() };
        assert!(bad.validate().is_err());
        let missing = SegmenterConfig::mit_b0(Some("/nonexistent/mit.safetensors".into()));
        assert!(matches!(missing.validate(), Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn parameter_names_follow_checkpoint_layout() {
        let m = SegModel::new(&SegmenterConfig::mit_b0(None), 0).unwrap();
        let names = m.store().names();
        for expected in [
            "segformer.encoder.patch_embeddings.0.proj.weight",
            "segformer.encoder.patch_embeddings.3.layer_norm.bias",
            "segformer.encoder.block.0.1.attention.self.sr.weight",
            "segformer.encoder.block.2.0.attention.self.layer_norm.weight",
            "segformer.encoder.block.3.1.attention.output.dense.weight",
            "segformer.encoder.block.1.0.mlp.dwconv.dwconv.weight",
            "segformer.encoder.layer_norm.3.weight",
            "decode_head.linear_c.2.proj.weight",
            "decode_head.linear_fuse.weight",
            "decode_head.batch_norm.running_var",
            "decode_head.classifier.weight",
        ] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}");
        }
        // stage 4 has no spatial reduction
        assert!(!names.iter().any(|n| n.starts_with("segformer.encoder.block.3.0.attention.self.sr")));
        let count = m.store().parameter_count();
        assert!((3_500_000..3_900_000).contains(&count), "{count} parameters");
    }

    #[test]
    fn output_dims_and_label_closure() {
        let m = trained_tiny(1);
        for (w, h) in [(32, 32), (40, 77), (128, 96)] {
            let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 90]));
            let mask = m.segment(&img).unwrap();
            assert_eq!(mask.dimensions(), (w, h));
            assert!(mask.labels().iter().all(|&v| v <= 1));
        }
        let logits = m.forward(&m.input_tensor(&[RgbImage::new(32, 32)]).unwrap()).unwrap();
        assert_eq!(logits.dims4().unwrap(), (1, 2, 8, 8));
    }

    #[test]
    fn segmentation_is_deterministic() {
        let m = trained_tiny(2);
        let (img, _) = blob_image(true, 64);
        assert_eq!(m.segment(&img).unwrap(), m.segment(&img).unwrap());
        let m2 = trained_tiny(2);
        assert_eq!(m.segment(&img).unwrap(), m2.segment(&img).unwrap());
    }

    #[test]
    fn rejects_untrained_and_tiny_frames() {
        let m = SegModel::new(&tiny_cfg(), 0).unwrap();
        assert!(m.segment(&RgbImage::new(64, 64)).is_err());
        let m = trained_tiny(0);
        assert!(m.segment(&RgbImage::new(4, 64)).is_err());
    }

    #[test]
    fn first_loss_is_uniform_cross_entropy() {
        let m = trained_tiny(3);
        let (img, mask) = blob_image(true, 32);
        let labels: Vec<u32> = mask.labels().iter().map(|&v| v as u32).collect();
        let loss = pixel_loss(&m.forward(&m.input_tensor(&[img]).unwrap()).unwrap(), &labels, 32).unwrap();
        let l = loss.to_scalar::<f32>().unwrap() as f64;
        assert!((l - std::f64::consts::LN_2).abs() < 0.05, "initial loss {l}");
    }

    fn samples(n: usize) -> Vec<SegSample> {
        (0..n)
            .map(|i| {
                let (image, mask) = blob_image(i % 2 == 0, 32);
                SegSample { frame_id: format!("f{i}"), kind: FrameKind::Heterogeneous, image, mask }
            })
            .collect()
    }

    #[test]
    fn learns_half_split_frames() {
        let mut m = SegModel::new(&tiny_cfg(), 5).unwrap();
        let cfg = TrainConfigStage3 {
            learning_rate: 3e-3,
            max_epochs: 12,
            patience: 12,
            augment: AugmentConfig::disabled(),
            ..TrainConfigStage3::default()
        };
        let data = samples(8);
        let h = train_segmenter(&mut m, &data, &data, &cfg).unwrap();
        assert!((h.first_batch_loss.unwrap() - std::f64::consts::LN_2).abs() < 0.05);
        let best = h.epochs[h.best_epoch].val["mean_iou"];
        assert!(best > 0.8, "best val mean IoU {best}");
        let report = evaluate_segmenter(&m, &data, "train").unwrap();
        assert!((report.mean_iou().unwrap() - best).abs() < 1e-9);
    }

    #[test]
    fn early_stopping_after_patience() {
        let mut m = SegModel::new(&tiny_cfg(), 6).unwrap();
        // a vanishing learning rate leaves the validation score flat
        let cfg = TrainConfigStage3 { learning_rate: 1e-12, max_epochs: 20, patience: 2, augment: AugmentConfig::disabled(), ..Default::default() };
        let data = samples(2);
        let h = train_segmenter(&mut m, &data, &data, &cfg).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.epochs.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = trained_tiny(7);
        let path = dir.path().join("seg.safetensors");
        m.save(&path, "digest", serde_json::json!({"plan": "A"})).unwrap();
        let (back, meta) = SegModel::load(&path).unwrap();
        assert_eq!(meta.config_digest, "digest");
        let (img, _) = blob_image(false, 48);
        assert_eq!(m.segment(&img).unwrap(), back.segment(&img).unwrap());
        assert!(matches!(SegModel::load(&dir.path().join("none.safetensors")), Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn plan_definitions() {
        let b1 = ExperimentPlan::new(PlanId::B1);
        assert_eq!(b1.train_masks, TrainMasks::PlusProxy);
        assert_eq!(b1.val_masks, ValMasks::Manual);
        assert_eq!(ExperimentPlan::new(PlanId::B2).val_masks, ValMasks::Proxy);
        assert_eq!(ExperimentPlan::new(PlanId::B0).train_masks.heterogeneous(), Some(MaskSource::Manual));
        assert_eq!(ExperimentPlan::new(PlanId::A).train_masks.heterogeneous(), None);
        assert_eq!("b.1".parse::<PlanId>().unwrap(), PlanId::B1);
        assert!("C".parse::<PlanId>().is_err());
    }

    /// Writes a small corpus of 6 videos to `dir`; heterogeneous frames get
    /// manual masks only when `manual` is set.
    fn corpus(dir: &Path, het_per_video: usize, manual: bool) -> CorpusManifest {
        let mut videos = Vec::new();
        for v in 0..6 {
            let mut frames = Vec::new();
            for i in 0..6 + het_per_video {
                let id = format!("v{v}_f{i}");
                let het = i >= 6;
                let (img, mask) = blob_image(i % 2 == 0, 32);
                let rel = PathBuf::from(format!("frames/{id}.png"));
                std::fs::create_dir_all(dir.join("frames")).unwrap();
                img.save(dir.join(&rel)).unwrap();
                let gt = if het && manual {
                    let p = PathBuf::from(format!("masks/{id}.png"));
                    write_mask(&mask, &dir.join(&p)).unwrap();
                    Some(p)
                } else {
                    None
                };
                frames.push(FrameRecord {
                    frame_id: id,
                    video_id: format!("v{v}"),
                    sequence_id: format!("v{v}_s0"),
                    image_path: rel,
                    homogeneity: if het { Homogeneity::Heterogeneous } else { Homogeneity::Homogeneous },
                    global_class: if het { None } else { Some(if i % 2 == 0 { ContentClass::P } else { ContentClass::NP }) },
                    gt_mask_path: gt,
                    proxy_mask_path: None,
                });
            }
            videos.push(VideoRecord::new(format!("v{v}"), frames));
        }
        let mut m = CorpusManifest::new(Provenance::Synthetic, Some(0), videos);
        m.base_dir = dir.to_path_buf();
        m
    }

    #[test]
    fn dataset_pairs_heterogeneous_with_balanced_homogeneous() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 2, true);
        let split = stratified_split(&m, &SplitSpec::default(), 0).unwrap();
        let d = SegDataset::select(&m, &split, 3).unwrap();
        for s in Split::ALL {
            let het = d.heterogeneous_in(s);
            let hom = d.homogeneous_in(s);
            assert_eq!(hom.len(), het.len());
            let np = hom.iter().filter(|id| m.frame(id).unwrap().kind() == FrameKind::Np).count();
            assert!(np.abs_diff(hom.len() - np) <= 1);
            for id in hom.iter().chain(het) {
                assert_eq!(split.split_of(&m.frame(id).unwrap().video_id), Some(s));
            }
        }
        assert_eq!(SegDataset::select(&m, &split, 3).unwrap(), d);
    }

    #[test]
    fn plan_mask_mismatch_is_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 2, false);
        let split = stratified_split(&m, &SplitSpec::default(), 0).unwrap();
        let d = SegDataset::select(&m, &split, 0).unwrap();
        for id in [PlanId::B0, PlanId::B1, PlanId::B2] {
            let err = plan_samples(&m, &d, &ExperimentPlan::new(id)).unwrap_err();
            assert!(matches!(err, Error::MissingPrerequisite(_)), "{id}: {err}");
        }
        plan_samples(&m, &d, &ExperimentPlan::new(PlanId::A)).unwrap();
    }

    #[test]
    fn plan_a_trains_without_heterogeneous_frames() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 0, false);
        let split = stratified_split(&m, &SplitSpec::default(), 0).unwrap();
        let d = SegDataset::select(&m, &split, 0).unwrap();
        assert!(Split::ALL.iter().all(|s| d.heterogeneous_in(*s).is_empty()));
        let cfg = TrainConfigStage3 { learning_rate: 1e-3, max_epochs: 1, augment: AugmentConfig::disabled(), ..Default::default() };
        let r = run_experiment(&m, &d, &ExperimentPlan::new(PlanId::A), &tiny_cfg(), &cfg, &[0]).unwrap();
        let test = &r.runs[0].test;
        assert!(test.contains_key(&TestSubset::Homogeneous));
        assert!(!test.contains_key(&TestSubset::ManualOnly));
        let table = comparison_table(&[r]).unwrap();
        assert!(table.contains("| A |"));
    }
}
