//! Candle building blocks for the image and text towers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::data::{TokenSeq, PAD_ID};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::DuplicateName(name));
        }
        Ok(handle)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened copy of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let dims = v.dims().to_vec();
                let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
                Ok((k.clone(), (dims, data)))
            })
            .collect()
    }

    /// Overwrites parameters in place from `values`; every parameter must be present.
    pub fn restore(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (k, var) in &self.vars {
            let (dims, data) = values
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {k}")))?;
            if dims.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {k}: shape {dims:?}, expected {:?}",
                    var.dims()
                )));
            }
            var.set(&Tensor::from_vec(data.clone(), dims.as_slice(), var.device())?)?;
        }
        Ok(())
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
    device: Device,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..=bound) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.store.insert(name.to_string(), t)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value as f64)?;
        self.store.insert(name.to_string(), t)
    }

    fn from_vec(&mut self, name: &str, data: Vec<f32>) -> Result<Tensor> {
        let n = data.len();
        let t = Tensor::from_vec(data, n, &self.device)?;
        self.store.insert(name.to_string(), t)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// Kaiming-uniform weights; `gain` scales the bound.
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Self> {
        let fan_in = (cin * k * k) as f64;
        let w = init.uniform(&format!("{name}.weight"), &[cout, cin, k, k], gain * (6.0 / fan_in).sqrt())?;
        let b = init.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv {
            w,
            b,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(init: &mut Init<'_>, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        let w = init.uniform(&format!("{name}.weight"), &[din, dout], gain * (3.0 / din as f64).sqrt())?;
        let b = init.constant(&format!("{name}.bias"), &[dout], 0.0)?;
        Ok(Linear { w, b })
    }

    /// Applies to the last dimension of a tensor of any rank.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / din;
        let y = x.reshape((rows, din))?.matmul(&self.w)?.broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    w: Tensor,
    b: Tensor,
}

impl LayerNorm {
    fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            w: init.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            b: init.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.w)?.broadcast_add(&self.b)?)
    }
}

/// Bias value `c` put on channel 0 of both towers so that initial scores sit
/// near `-c^2`, a low foreground prior, while remaining a bare dot product.
fn prior_bias(d: usize) -> Vec<f32> {
    let c = (-(0.01f64 / 0.99).ln()).sqrt() as f32;
    let mut v = vec![0.0; d];
    v[0] = c;
    v
}

/// Dense outputs of the image tower for a batch.
#[derive(Debug, Clone)]
pub struct ImageBatchOutput {
    /// `[B, M, D]`
    pub features: Tensor,
    /// `[B, M, 4]`
    pub deltas: Tensor,
    /// `[B, M]`
    pub centerness: Tensor,
}

/// Strided conv backbone, top-down pyramid and a head shared across levels.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: Vec<Conv>,
    lateral: Vec<Conv>,
    level_stage: Vec<usize>,
    tower: Vec<Conv>,
    feat: Conv,
    delta: Conv,
    ctr: Conv,
}

impl ImageEncoder {
    pub(crate) fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64, device: &Device) -> Result<Self> {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store,
            device: device.clone(),
        };
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.backbone_channels.iter().enumerate() {
            stages.push(Conv::new(&mut init, &format!("backbone.{i}"), cin, c, 3, 2, 1.0)?);
            cin = c;
        }
        let level_stage = cfg.level_stages()?;
        let hc = cfg.head_channels;
        let lateral = level_stage
            .iter()
            .enumerate()
            .map(|(l, &s)| Conv::new(&mut init, &format!("lateral.{l}"), cfg.backbone_channels[s], hc, 1, 1, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let tower = (0..2)
            .map(|i| Conv::new(&mut init, &format!("head.tower.{i}"), hc, hc, 3, 1, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let mut feat = Conv::new(&mut init, "head.features", hc, cfg.d_model, 1, 1, 0.1)?;
        let mut bias = prior_bias(cfg.d_model);
        bias[0] = -bias[0];
        init.store.vars.remove("head.features.bias");
        feat.b = init.from_vec("head.features.bias", bias)?;
        let delta = Conv::new(&mut init, "head.deltas", hc, 4, 1, 1, 0.01)?;
        let ctr = Conv::new(&mut init, "head.centerness", hc, 1, 1, 1, 0.01)?;
        Ok(ImageEncoder {
            stages,
            lateral,
            level_stage,
            tower,
            feat,
            delta,
            ctr,
        })
    }

    /// `images`: `[B, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<ImageBatchOutput> {
        let b = images.dim(0)?;
        let mut x = images.affine(2.0, -1.0)?;
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = s.forward(&x)?.relu()?;
            stage_out.push(x.clone());
        }
        let mut levels: Vec<Tensor> = self
            .level_stage
            .iter()
            .zip(&self.lateral)
            .map(|(&s, lat)| lat.forward(&stage_out[s]))
            .collect::<Result<_>>()?;
        for l in (0..levels.len().saturating_sub(1)).rev() {
            let (_, _, h, w) = levels[l].dims4()?;
            let up = levels[l + 1].upsample_nearest2d(h, w)?;
            levels[l] = (&levels[l] + up)?;
        }
        let (mut feats, mut deltas, mut ctrs) = (Vec::new(), Vec::new(), Vec::new());
        for p in &levels {
            let mut t = p.clone();
            for conv in &self.tower {
                t = conv.forward(&t)?.relu()?;
            }
            let flat = |y: Tensor| -> Result<Tensor> {
                let (_, c, h, w) = y.dims4()?;
                Ok(y.permute((0, 2, 3, 1))?.reshape((b, h * w, c))?)
            };
            feats.push(flat(self.feat.forward(&t)?)?);
            deltas.push(flat(self.delta.forward(&t)?)?);
            ctrs.push(flat(self.ctr.forward(&t)?)?);
        }
        Ok(ImageBatchOutput {
            features: Tensor::cat(&feats, 1)?,
            deltas: Tensor::cat(&deltas, 1)?,
            centerness: Tensor::cat(&ctrs, 1)?.squeeze(2)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Token and position embeddings, pre-norm self-attention blocks, and a
/// projection of the end-of-sequence state. Sequences never attend to each other.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tok: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
    heads: usize,
    d_model: usize,
}

impl TextEncoder {
    pub(crate) fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64, device: &Device) -> Result<Self> {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store,
            device: device.clone(),
        };
        let w = cfg.text_width;
        let tok = init.uniform("token_embedding", &[cfg.vocab_size, w], 3f64.sqrt())?;
        let pos = init.uniform("position_embedding", &[cfg.max_tokens, w], 0.1)?;
        let mut blocks = Vec::new();
        for i in 0..cfg.text_layers {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut init, &format!("{p}.ln1"), w)?,
                qkv: Linear::new(&mut init, &format!("{p}.qkv"), w, 3 * w, 1.0)?,
                out: Linear::new(&mut init, &format!("{p}.out"), w, w, 0.5)?,
                ln2: LayerNorm::new(&mut init, &format!("{p}.ln2"), w)?,
                fc1: Linear::new(&mut init, &format!("{p}.fc1"), w, 2 * w, 2f64.sqrt())?,
                fc2: Linear::new(&mut init, &format!("{p}.fc2"), 2 * w, w, 0.5)?,
            });
        }
        let ln_f = LayerNorm::new(&mut init, "ln_final", w)?;
        let mut proj = Linear::new(&mut init, "projection", w, cfg.d_model, 0.1)?;
        init.store.vars.remove("projection.bias");
        proj.b = init.from_vec("projection.bias", prior_bias(cfg.d_model))?;
        Ok(TextEncoder {
            tok,
            pos,
            blocks,
            ln_f,
            proj,
            heads: cfg.text_heads,
            d_model: cfg.d_model,
        })
    }

    /// `[K, D]` embeddings, one per sequence.
    pub fn forward(&self, seqs: &[TokenSeq]) -> Result<Tensor> {
        let device = self.tok.device();
        let k = seqs.len();
        if k == 0 {
            return Ok(Tensor::zeros((0, self.d_model), DType::F32, device)?);
        }
        let t = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(1);
        let max_pos = self.pos.dim(0)?;
        if t > max_pos {
            return Err(Error::Shape(format!("sequence length {t} exceeds {max_pos} positions")));
        }
        let mut ids = Vec::with_capacity(k * t);
        let mut bias = Vec::with_capacity(k * t);
        let mut eos = vec![0f32; k * t];
        for (i, s) in seqs.iter().enumerate() {
            for j in 0..t {
                let id = s.ids.get(j).copied();
                ids.push(id.unwrap_or(PAD_ID));
                bias.push(if id.is_some() { 0f32 } else { -1e9 });
            }
            eos[i * t + s.eos_position] = 1.0;
        }
        let ids = Tensor::from_vec(ids, k * t, device)?;
        let w = self.tok.dim(1)?;
        let mut x = self
            .tok
            .index_select(&ids, 0)?
            .reshape((k, t, w))?
            .broadcast_add(&self.pos.narrow(0, 0, t)?)?;
        let mask = Tensor::from_vec(bias, (k, 1, 1, t), device)?;
        let (h, dh) = (self.heads, w / self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let qkv = blk.qkv.forward(&blk.ln1.forward(&x)?)?;
            let split = |i: usize| -> Result<Tensor> {
                Ok(qkv
                    .narrow(2, i * w, w)?
                    .reshape((k, t, h, dh))?
                    .transpose(1, 2)?
                    .contiguous()?)
            };
            let (q, kk, v) = (split(0)?, split(1)?, split(2)?);
            let att = (q.matmul(&kk.t()?.contiguous()?)? * scale)?.broadcast_add(&mask)?;
            let max = att.max_keepdim(D::Minus1)?;
            let e = att.broadcast_sub(&max)?.exp()?;
            let att = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
            let o = att.matmul(&v)?.transpose(1, 2)?.reshape((k, t, w))?;
            x = (x + blk.out.forward(&o)?)?;
            let m = blk.fc2.forward(&blk.fc1.forward(&blk.ln2.forward(&x)?)?.relu()?)?;
            x = (x + m)?;
        }
        let x = self.ln_f.forward(&x)?;
        let eos = Tensor::from_vec(eos, (k, 1, t), device)?;
        let pooled = eos.matmul(&x)?.reshape((k, w))?;
        self.proj.forward(&pooled)
    }
}
