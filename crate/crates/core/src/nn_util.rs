//! Seeded parameter storage and the few tensor primitives the models need
//! that have no differentiable counterpart in candle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::write_file;
use crate::error::{ensure, Error, Result};

/// Device for all tensor work. `HYBRIDSEG_DEVICE` may only name `cpu`.
pub fn device() -> Result<Device> {
    match std::env::var("HYBRIDSEG_DEVICE").ok().as_deref() {
        None | Some("") | Some("cpu") => Ok(Device::Cpu),
        Some(other) => Err(Error::invalid(format!("unsupported device {other:?}; this build supports cpu only"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
    Uniform(f64, f64),
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn init_values(init: Init, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::TruncNormal(std) => {
            let d = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = d.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
        Init::Uniform(lo, hi) => {
            let d = Uniform::new(lo, hi);
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    }
}

/// Named variables whose initial values depend only on `(seed, name)`.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    frozen: Mutex<BTreeSet<String>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            frozen: Mutex::new(BTreeSet::new()),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("param lock");
        if let Some(v) = vars.get(name) {
            ensure!(v.dims() == shape, "parameter {name} has shape {:?}, requested {shape:?}", v.dims());
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let values = init_values(init, n, name_seed(self.seed, name));
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        vars.insert(name.to_string(), v);
        Ok(out)
    }

    /// A parameter that is stored and checkpointed but never optimized.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.frozen.lock().expect("frozen lock").insert(name.to_string());
        self.get(name, shape, init)
    }

    pub fn freeze_prefix(&self, prefix: &str) {
        let names: Vec<String> = self.names().into_iter().filter(|n| n.starts_with(prefix)).collect();
        self.frozen.lock().expect("frozen lock").extend(names);
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("param lock").keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Optimizable variables in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let frozen = self.frozen.lock().expect("frozen lock");
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .filter(|(k, _)| !frozen.contains(*k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.lock().expect("param lock").values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let vars = self.vars.lock().expect("param lock");
        vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().expect("param lock");
        for (k, v) in vars.iter() {
            let t = snap.get(k).ok_or_else(|| Error::invalid(format!("snapshot lacks {k}")))?;
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let snap: HashMap<String, Tensor> = self.snapshot()?.into_iter().collect();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        candle_core::safetensors::save(&snap, path)?;
        Ok(())
    }

    /// Overwrites every registered variable from a safetensors file. Names
    /// missing from the file are an error; extra names in the file are
    /// ignored.
    pub fn load_safetensors(&self, path: &Path) -> Result<()> {
        self.load_safetensors_under(path, "")
    }

    /// Loads the variables whose full name starts with `prefix`, reading
    /// them under their full name. Returns how many were set.
    pub fn load_safetensors_matching(&self, path: &Path, prefix: &str) -> Result<usize> {
        ensure!(path.exists(), "weights file {} does not exist", path.display());
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().expect("param lock");
        let mut n = 0;
        for (k, v) in vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let t = loaded.get(k).ok_or_else(|| Error::invalid(format!("{} lacks tensor {k}", path.display())))?;
            ensure!(t.dims() == v.dims(), "tensor {k} has shape {:?}, expected {:?}", t.dims(), v.dims());
            v.set(&t.to_dtype(self.dtype)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Loads only the variables named `prefix + key`, reading `key` from the
    /// file. Used to drop a bare backbone checkpoint into a composite model.
    pub fn load_safetensors_under(&self, path: &Path, prefix: &str) -> Result<()> {
        ensure!(path.exists(), "weights file {} does not exist", path.display());
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().expect("param lock");
        for (k, v) in vars.iter() {
            let Some(key) = k.strip_prefix(prefix) else { continue };
            let t = loaded
                .get(key)
                .ok_or_else(|| Error::invalid(format!("{} lacks tensor {key}", path.display())))?;
            ensure!(t.dims() == v.dims(), "tensor {key} has shape {:?}, expected {:?}", t.dims(), v.dims());
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.full(name), shape, init)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.buffer(&self.full(name), shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

/// Dense layer with `(out, in)` weight layout.
pub fn linear(s: &Scope, d_in: usize, d_out: usize, weight: Init) -> Result<candle_nn::Linear> {
    let w = s.get("weight", &[d_out, d_in], weight)?;
    let b = s.get("bias", &[d_out], Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// PyTorch default initialization for a dense layer.
pub fn fan_in_uniform(d_in: usize) -> Init {
    let k = 1.0 / (d_in as f64).sqrt();
    Init::Uniform(-k, k)
}

/// Layer norm over the last dimension, composed from differentiable ops.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self { weight: s.get("weight", &[dim], Init::Ones)?, bias: s.get("bias", &[dim], Init::Zeros)?, eps })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// `(out, in)` matrix of bilinear weights with half-pixel centres, matching
/// `align_corners = false` resampling. Rows sum to one.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let l = src - i0 as f64;
        m[o * inp + i0] += 1.0 - l;
        m[o * inp + i1] += l;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, oh, ow)` as two matmuls.
pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(oh, h), (oh, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(ow, w), (ow, w), dev)?.to_dtype(x.dtype())?;
    let t = x.contiguous()?.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&t)?)
}

/// 3×3 depthwise convolution with zero padding 1, as a sum of nine shifted
/// products. `weight` is `(C, 1, 3, 3)`, `bias` is `(C)`.
pub fn depthwise_conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let wk = weight.reshape((c, 9))?;
    let mut acc: Option<Tensor> = None;
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = wk.narrow(1, ky * 3 + kx, 1)?.reshape((1, c, 1, 1))?;
            let shifted = xp.narrow(2, ky, h)?.narrow(3, kx, w)?;
            let term = shifted.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("nine taps").broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Mean per-sample cross entropy of `(N, 2)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = Tensor::from_slice(targets, targets.len(), logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

/// JSON sidecar stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta<C> {
    pub kind: String,
    pub config_digest: String,
    pub config: C,
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint<C: Serialize>(store: &ParamStore, weights: &Path, meta: &CheckpointMeta<C>) -> Result<()> {
    store.save_safetensors(weights)?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    write_file(&sidecar_path(weights), text.as_bytes())
}

pub fn read_checkpoint_meta<C: DeserializeOwned>(weights: &Path) -> Result<CheckpointMeta<C>> {
    let side = sidecar_path(weights);
    if !weights.exists() || !side.exists() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", weights.display())));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sha256 of the canonical JSON encoding of `value`.
pub fn config_digest<C: Serialize>(value: &C) -> Result<String> {
    // serde_json::Value keeps object keys sorted, which makes the encoding canonical
    let v = serde_json::to_value(value)?;
    Ok(crate::corpus::sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

pub fn to_vec2_f32(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}
