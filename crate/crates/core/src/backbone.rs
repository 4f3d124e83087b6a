//! Patch transformer producing one hidden state per non-overlapping image
//! patch, plus a class-token state.
//!
//! Parameter names follow the common self-supervised ViT checkpoint layout
//! (`cls_token`, `pos_embed`, `patch_embed.proj`, `blocks.{i}.{norm1,attn,ls1,
//! norm2,mlp,ls2}`, `norm`), so a converted checkpoint of the pretrained
//! ViT-B/14 loads directly. The miniature provider shares the architecture
//! with two blocks of width 64 and starts from a seeded random init.

use std::path::PathBuf;

use candle_core::{DType, Device, Module, Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn_util::{linear, upsample_bilinear, Init, LayerNorm, Scope};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Channel-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `channels × height × width`, row-major per channel.
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0 && channels > 0, "image tensor dimensions must be positive");
        ensure!(
            data.len() == height * width * channels,
            "image tensor data has {} values, expected {}",
            data.len(),
            height * width * channels
        );
        Ok(Self { height, width, channels, data })
    }

    /// RGB scaled to `[0, 1]` then standardized with the ImageNet statistics.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = (p.0[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Self { height: h, width: w, channels: 3, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Stacks equally sized images into a `(B, C, H, W)` tensor.
pub fn batch_tensor(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    ensure!(!images.is_empty(), "empty image batch");
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        ensure!((im.channels, im.height, im.width) == (c, h, w), "images in a batch must share dimensions");
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Non-overlapping `p × p` tiles in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Each tile is `channels × p × p`.
    pub tiles: Vec<Vec<f32>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile(&self, row: usize, col: usize) -> &[f32] {
        &self.tiles[row * self.cols + col]
    }
}

pub fn patchify(image: &ImageTensor, p: usize) -> Result<PatchGrid> {
    ensure!(p > 0, "patch size must be positive");
    ensure!(
        image.height.is_multiple_of(p) && image.width.is_multiple_of(p),
        "{}×{} image is not divisible into {p}×{p} patches",
        image.height,
        image.width
    );
    let (rows, cols, c) = (image.height / p, image.width / p, image.channels);
    let mut tiles = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut t = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for y in 0..p {
                    let start = (ch * image.height + i * p + y) * image.width + j * p;
                    t.extend_from_slice(&image.data[start..start + p]);
                }
            }
            tiles.push(t);
        }
    }
    Ok(PatchGrid { patch_size: p, rows, cols, channels: c, tiles })
}

pub fn reassemble(grid: &PatchGrid) -> ImageTensor {
    let p = grid.patch_size;
    let (h, w, c) = (grid.rows * p, grid.cols * p, grid.channels);
    let mut data = vec![0.0; c * h * w];
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let t = grid.tile(i, j);
            for ch in 0..c {
                for y in 0..p {
                    let dst = (ch * h + i * p + y) * w + j * p;
                    data[dst..dst + p].copy_from_slice(&t[(ch * p + y) * p..(ch * p + y + 1) * p]);
                }
            }
        }
    }
    ImageTensor { height: h, width: w, channels: c, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub id: String,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Input side the position embedding table was built for.
    pub native_size: usize,
    pub layer_scale_init: f64,
    pub ln_eps: f64,
    /// Safetensors file with pretrained weights; required for pretrained ids.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Excludes every backbone parameter from optimization.
    #[serde(default)]
    pub freeze: bool,
}

pub const MINI_ID: &str = "mini-vit";
pub const DINOV2_VITB14_ID: &str = "dinov2-vitb14";

impl BackboneConfig {
    pub fn mini() -> Self {
        Self {
            id: MINI_ID.into(),
            patch_size: 14,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            native_size: 112,
            layer_scale_init: 1.0,
            ln_eps: 1e-6,
            weights: None,
            freeze: false,
        }
    }

    pub fn dinov2_vitb14(weights: Option<PathBuf>) -> Self {
        Self {
            id: DINOV2_VITB14_ID.into(),
            patch_size: 14,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            native_size: 518,
            layer_scale_init: 1e-5,
            ln_eps: 1e-6,
            weights,
            freeze: false,
        }
    }

    pub fn from_id(id: &str, weights: Option<PathBuf>) -> Result<Self> {
        match id {
            MINI_ID => Ok(Self { weights, ..Self::mini() }),
            DINOV2_VITB14_ID => Ok(Self::dinov2_vitb14(weights)),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }

    pub fn requires_weights(&self) -> bool {
        self.id != MINI_ID
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_size > 0 && self.dim > 0 && self.depth > 0, "backbone dimensions must be positive");
        ensure!(self.heads > 0 && self.dim.is_multiple_of(self.heads), "width {} is not divisible by {} heads", self.dim, self.heads);
        ensure!(self.native_size.is_multiple_of(self.patch_size), "native size {} is not a multiple of the patch size", self.native_size);
        if self.requires_weights() {
            let path = self
                .weights
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite(format!("backbone {} needs a weights file", self.id)))?;
            if !path.exists() {
                return Err(Error::MissingPrerequisite(format!("backbone weights {} not found", path.display())));
            }
        }
        Ok(())
    }
}

struct Attention {
    qkv: candle_nn::Linear,
    proj: candle_nn::Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    ls1: Tensor,
    norm2: LayerNorm,
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
    ls2: Tensor,
}

impl Block {
    fn new(s: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.dim;
        let w = Init::TruncNormal(0.02);
        Ok(Self {
            norm1: LayerNorm::new(&s.pp("norm1"), d, cfg.ln_eps)?,
            attn: Attention {
                qkv: linear(&s.pp("attn.qkv"), d, 3 * d, w)?,
                proj: linear(&s.pp("attn.proj"), d, d, w)?,
                heads: cfg.heads,
            },
            ls1: s.pp("ls1").get("gamma", &[d], Init::Const(cfg.layer_scale_init))?,
            norm2: LayerNorm::new(&s.pp("norm2"), d, cfg.ln_eps)?,
            fc1: linear(&s.pp("mlp.fc1"), d, cfg.mlp_ratio * d, w)?,
            fc2: linear(&s.pp("mlp.fc2"), cfg.mlp_ratio * d, d, w)?,
            ls2: s.pp("ls2").get("gamma", &[d], Init::Const(cfg.layer_scale_init))?,
        })
    }

    /// Residual update from an already normalized attention input.
    fn finish(&self, x: &Tensor, normed: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(normed)?.broadcast_mul(&self.ls1)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((&x + h.broadcast_mul(&self.ls2)?)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.finish(x, &self.norm1.forward(x)?)
    }
}

/// Per-patch hidden states of a batch of images.
#[derive(Clone, Debug)]
pub struct PatchEmbeddings {
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(B, N, d)` final-layer patch states, class token excluded.
    pub states: Tensor,
    /// `(B, d)` final-layer class-token state.
    pub cls_state: Option<Tensor>,
}

impl PatchEmbeddings {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(B, d)` mean over the patch states.
    pub fn centroid(&self) -> Result<Tensor> {
        ensure!(!self.is_empty(), "centroid of an empty patch sequence");
        Ok(self.states.mean(1)?)
    }
}

/// Arithmetic mean of a sequence of patch states.
pub fn centroid(states: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(!states.is_empty(), "centroid of an empty patch sequence");
    let d = states[0].len();
    ensure!(states.iter().all(|s| s.len() == d), "patch states differ in width");
    let mut sum = vec![0.0; d];
    for s in states {
        for (a, v) in sum.iter_mut().zip(s) {
            *a += v;
        }
    }
    Ok(sum.into_iter().map(|v| v / states.len() as f64).collect())
}

/// Output of the backbone up to the first layer norm of its last block.
pub struct LastBlockInput {
    pub residual: Tensor,
    /// `(B, 1 + N, d)` normalized tokens entering the last attention.
    pub normed: Tensor,
    pub rows: usize,
    pub cols: usize,
}

pub struct Backbone {
    cfg: BackboneConfig,
    cls_token: Tensor,
    pos_embed: Tensor,
    patch_w: Tensor,
    patch_b: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Backbone {
    /// Registers all parameters under `s`. Pretrained weights, if any, are
    /// loaded by the owner of the parameter store.
    pub fn new(s: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        ensure!(cfg.heads > 0 && cfg.dim.is_multiple_of(cfg.heads), "width {} is not divisible by {} heads", cfg.dim, cfg.heads);
        let (d, p) = (cfg.dim, cfg.patch_size);
        let g = cfg.native_size / p;
        let blocks = (0..cfg.depth).map(|i| Block::new(&s.pp("blocks").pp(i), cfg)).collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            cls_token: s.get("cls_token", &[1, 1, d], Init::Normal(1e-6))?,
            pos_embed: s.get("pos_embed", &[1, 1 + g * g, d], Init::TruncNormal(0.02))?,
            patch_w: s.pp("patch_embed.proj").get("weight", &[d, 3, p, p], Init::TruncNormal(0.02))?,
            patch_b: s.pp("patch_embed.proj").get("bias", &[d], Init::Zeros)?,
            blocks,
            norm: LayerNorm::new(&s.pp("norm"), d, cfg.ln_eps)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn tokens(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.cfg.patch_size;
        ensure!(c == 3, "backbone expects 3 channels, got {c}");
        ensure!(h % p == 0 && w % p == 0, "{h}×{w} input is not divisible into {p}×{p} patches");
        let (gh, gw) = (h / p, w / p);
        let d = self.cfg.dim;
        // patchify on the tensor: (B, C, gh, p, gw, p) -> (B, gh, gw, C, p, p)
        let patches = x
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let wmat = self.patch_w.reshape((d, c * p * p))?.t()?.contiguous()?;
        let emb = patches.broadcast_matmul(&wmat)?.broadcast_add(&self.patch_b)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let tok = Tensor::cat(&[&cls, &emb], 1)?;
        Ok((tok.broadcast_add(&self.position_embedding(gh, gw)?)?, gh, gw))
    }

    /// Position table resampled to a `gh × gw` grid when it differs from the
    /// native grid.
    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.cfg.native_size / self.cfg.patch_size;
        if (gh, gw) == (g, g) {
            return Ok(self.pos_embed.clone());
        }
        let d = self.cfg.dim;
        let cls = self.pos_embed.narrow(1, 0, 1)?;
        let grid = self.pos_embed.narrow(1, 1, g * g)?.reshape((1, g, g, d))?.permute((0, 3, 1, 2))?;
        let grid = upsample_bilinear(&grid, gh, gw)?.permute((0, 2, 3, 1))?.reshape((1, gh * gw, d))?;
        Ok(Tensor::cat(&[&cls, &grid], 1)?)
    }

    /// Runs all blocks but the last and the last block's first layer norm.
    pub fn forward_to_last_block(&self, x: &Tensor) -> Result<LastBlockInput> {
        let (mut t, rows, cols) = self.tokens(x)?;
        let last = self.blocks.len() - 1;
        for blk in &self.blocks[..last] {
            t = blk.forward(&t)?;
        }
        let normed = self.blocks[last].norm1.forward(&t)?;
        Ok(LastBlockInput { residual: t, normed, rows, cols })
    }

    /// Completes the forward pass from [`Backbone::forward_to_last_block`],
    /// taking `normed` as given so it can be substituted by a leaf variable.
    pub fn finish_from_last_block(&self, inp: &LastBlockInput, normed: &Tensor) -> Result<PatchEmbeddings> {
        let t = self.blocks[self.blocks.len() - 1].finish(&inp.residual, normed)?;
        self.split_tokens(&self.norm.forward(&t)?, inp.rows, inp.cols)
    }

    fn split_tokens(&self, t: &Tensor, rows: usize, cols: usize) -> Result<PatchEmbeddings> {
        let n = rows * cols;
        Ok(PatchEmbeddings {
            dim: self.cfg.dim,
            rows,
            cols,
            states: t.narrow(1, 1, n)?,
            cls_state: Some(t.narrow(1, 0, 1)?.squeeze(1)?),
        })
    }

    /// `x` is `(B, 3, H, W)` standardized pixels.
    pub fn forward(&self, x: &Tensor) -> Result<PatchEmbeddings> {
        let (mut t, rows, cols) = self.tokens(x)?;
        for blk in &self.blocks {
            t = blk.forward(&t)?;
        }
        self.split_tokens(&self.norm.forward(&t)?, rows, cols)
    }

    pub fn embed(&self, images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<PatchEmbeddings> {
        self.forward(&batch_tensor(images, device, dtype)?)
    }
}
