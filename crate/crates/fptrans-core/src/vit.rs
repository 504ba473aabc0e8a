//! Plain vision transformer: patch embedding plus a stack of pre-norm
//! blocks, with every intermediate token state exposed so prompt features
//! can be read from any depth.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamTensor};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width C.
    pub channels: usize,
    /// Number of transformer blocks L.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl ViTConfig {
    /// Standard configuration with d_k = d_v = C and a 4x MLP.
    pub fn square(image_size: usize, patch_size: usize, channels: usize, blocks: usize, heads: usize) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            channels,
            blocks,
            heads,
            mlp_hidden: 4 * channels,
            key_dim: channels,
            value_dim: channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config {
                reason: format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            });
        }
        if self.key_dim % self.heads != 0 || self.value_dim % self.heads != 0 {
            return Err(Error::Config {
                reason: format!(
                    "key dim {} / value dim {} must divide into {} heads",
                    self.key_dim, self.value_dim, self.heads
                ),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N, the number of patch tokens.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: ParamTensor,
    pub ln1_beta: ParamTensor,
    pub wq: ParamTensor,
    pub bq: ParamTensor,
    pub wk: ParamTensor,
    pub bk: ParamTensor,
    pub wv: ParamTensor,
    pub bv: ParamTensor,
    pub wo: ParamTensor,
    pub bo: ParamTensor,
    pub ln2_gamma: ParamTensor,
    pub ln2_beta: ParamTensor,
    pub mlp_w1: ParamTensor,
    pub mlp_b1: ParamTensor,
    pub mlp_w2: ParamTensor,
    pub mlp_b2: ParamTensor,
}

impl BlockParams {
    fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        BlockParams {
            ln1_gamma: ParamTensor::ones(&[c]),
            ln1_beta: ParamTensor::zeros(&[c]),
            wq: ParamTensor::trunc_normal(&[c, cfg.key_dim], INIT_STD, rng),
            bq: ParamTensor::zeros(&[cfg.key_dim]),
            wk: ParamTensor::trunc_normal(&[c, cfg.key_dim], INIT_STD, rng),
            bk: ParamTensor::zeros(&[cfg.key_dim]),
            wv: ParamTensor::trunc_normal(&[c, cfg.value_dim], INIT_STD, rng),
            bv: ParamTensor::zeros(&[cfg.value_dim]),
            wo: ParamTensor::trunc_normal(&[cfg.value_dim, c], INIT_STD, rng),
            bo: ParamTensor::zeros(&[c]),
            ln2_gamma: ParamTensor::ones(&[c]),
            ln2_beta: ParamTensor::zeros(&[c]),
            mlp_w1: ParamTensor::trunc_normal(&[c, cfg.mlp_hidden], INIT_STD, rng),
            mlp_b1: ParamTensor::zeros(&[cfg.mlp_hidden]),
            mlp_w2: ParamTensor::trunc_normal(&[cfg.mlp_hidden, c], INIT_STD, rng),
            mlp_b2: ParamTensor::zeros(&[c]),
        }
    }

    /// Zero every attention/MLP projection, keeping the layer norms. The
    /// block then reduces to the identity map through its residual paths.
    pub fn zero_projections(&mut self) {
        for p in [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.mlp_w1, &mut self.mlp_b1, &mut self.mlp_w2,
            &mut self.mlp_b2,
        ] {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl ParamGroup for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (name, p) in [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.w1", &self.mlp_w1),
            ("mlp.b1", &self.mlp_b1),
            ("mlp.w2", &self.mlp_w2),
            ("mlp.b2", &self.mlp_b2),
        ] {
            f(&format!("{prefix}{name}"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (name, p) in [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.w1", &mut self.mlp_w1),
            ("mlp.b1", &mut self.mlp_b1),
            ("mlp.w2", &mut self.mlp_w2),
            ("mlp.b2", &mut self.mlp_b2),
        ] {
            f(&format!("{prefix}{name}"), p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub embed_w: ParamTensor,
    pub embed_b: ParamTensor,
    /// Positional embedding for [class token, N patch tokens].
    pub pos: ParamTensor,
    pub cls: ParamTensor,
    pub blocks: Vec<BlockParams>,
}

impl ViTParams {
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(ViTParams {
            embed_w: ParamTensor::trunc_normal(&[cfg.patch_dim(), c], INIT_STD, rng),
            embed_b: ParamTensor::zeros(&[c]),
            pos: ParamTensor::trunc_normal(&[cfg.n_patches() + 1, c], INIT_STD, rng),
            cls: ParamTensor::zeros(&[1, c]),
            blocks: (0..cfg.blocks).map(|_| BlockParams::init(cfg, rng)).collect(),
        })
    }
}

impl ParamGroup for ViTParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}embed.w"), &self.embed_w);
        f(&format!("{prefix}embed.b"), &self.embed_b);
        f(&format!("{prefix}pos"), &self.pos);
        f(&format!("{prefix}cls"), &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}embed.w"), &mut self.embed_w);
        f(&format!("{prefix}embed.b"), &mut self.embed_b);
        f(&format!("{prefix}pos"), &mut self.pos);
        f(&format!("{prefix}cls"), &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}."), f);
        }
    }
}

// ── Patch extraction ────────────────────────────────────────────────────

/// Split a channel-major [3, h, w] image into row-major patches, each
/// flattened (channel, row, col); the inverse is `unpatchify`.
pub fn patchify(image_chw: &[f64], h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} image not divisible by patch size {}", h, w, p),
        ));
    }
    if image_chw.len() != 3 * h * w {
        return Err(Error::shape(
            "patchify",
            format!("expected {} values for 3x{}x{}, got {}", 3 * h * w, h, w, image_chw.len()),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(3 * h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        out.push(image_chw[c * h * w + (pr * p + y) * w + (pc * p + x)]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &[f64], h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if h % p != 0 || w % p != 0 || patches.len() != 3 * h * w {
        return Err(Error::shape(
            "unpatchify",
            format!("{} values into 3x{}x{} with patch size {}", patches.len(), h, w, p),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; 3 * h * w];
    let mut i = 0;
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        out[c * h * w + (pr * p + y) * w + (pc * p + x)] = patches[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── Tape-bound forward pieces ───────────────────────────────────────────

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
}

#[derive(Debug, Clone)]
pub struct BoundViT {
    pub embed_w: TensorId,
    pub embed_b: TensorId,
    pub pos: TensorId,
    pub cls: TensorId,
    pub blocks: Vec<BoundBlock>,
    pub heads: usize,
}

impl BoundViT {
    pub fn bind(params: &ViTParams, cfg: &ViTConfig, tape: &mut Tape, trainable: bool) -> Result<Self> {
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                Ok(BoundBlock {
                    ln1_gamma: b.ln1_gamma.bind(tape, trainable)?,
                    ln1_beta: b.ln1_beta.bind(tape, trainable)?,
                    wq: b.wq.bind(tape, trainable)?,
                    bq: b.bq.bind(tape, trainable)?,
                    wk: b.wk.bind(tape, trainable)?,
                    bk: b.bk.bind(tape, trainable)?,
                    wv: b.wv.bind(tape, trainable)?,
                    bv: b.bv.bind(tape, trainable)?,
                    wo: b.wo.bind(tape, trainable)?,
                    bo: b.bo.bind(tape, trainable)?,
                    ln2_gamma: b.ln2_gamma.bind(tape, trainable)?,
                    ln2_beta: b.ln2_beta.bind(tape, trainable)?,
                    mlp_w1: b.mlp_w1.bind(tape, trainable)?,
                    mlp_b1: b.mlp_b1.bind(tape, trainable)?,
                    mlp_w2: b.mlp_w2.bind(tape, trainable)?,
                    mlp_b2: b.mlp_b2.bind(tape, trainable)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundViT {
            embed_w: params.embed_w.bind(tape, trainable)?,
            embed_b: params.embed_b.bind(tape, trainable)?,
            pos: params.pos.bind(tape, trainable)?,
            cls: params.cls.bind(tape, trainable)?,
            blocks,
            heads: cfg.heads,
        })
    }
}

/// Linear projection of flattened patches into token embeddings.
pub fn embed(tape: &mut Tape, patches: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let proj = tape.matmul(patches, w)?;
    tape.add_bias(proj, b)
}

/// Softmax(Q K^T / sqrt(d_k)) V with d_k taken from Q's width.
pub fn attention(tape: &mut Tape, q: TensorId, k: TensorId, v: TensorId) -> Result<TensorId> {
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return Err(Error::shape(
            "attention",
            format!("Q {:?} and K {:?} key dims differ", tape.shape(q), tape.shape(k)),
        ));
    }
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::shape(
            "attention",
            format!("K {:?} and V {:?} row counts differ", tape.shape(k), tape.shape(v)),
        ));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    tape.matmul(weights, v)
}

/// Multi-headed self-attention: channel-split heads, concatenated and
/// projected by W^O.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TensorId,
    block: &BoundBlock,
    heads: usize,
) -> Result<TensorId> {
    multi_head_attention_limited(tape, x, block, heads, None)
}

/// MSA with keys and values restricted to the first `key_rows` tokens.
/// Queries still come from every row, so later tokens read the prefix but
/// cannot be read back; used to cut prompt tokens out of attention.
pub fn multi_head_attention_limited(
    tape: &mut Tape,
    x: TensorId,
    block: &BoundBlock,
    heads: usize,
    key_rows: Option<usize>,
) -> Result<TensorId> {
    let q_all = {
        let p = tape.matmul(x, block.wq)?;
        tape.add_bias(p, block.bq)?
    };
    let kv_src = match key_rows {
        Some(rows) => tape.slice(x, 0, 0, rows)?,
        None => x,
    };
    let k_all = {
        let p = tape.matmul(kv_src, block.wk)?;
        tape.add_bias(p, block.bk)?
    };
    let v_all = {
        let p = tape.matmul(kv_src, block.wv)?;
        tape.add_bias(p, block.bv)?
    };
    let dk = tape.shape(q_all)[1] / heads;
    let dv = tape.shape(v_all)[1] / heads;
    let mut head_outs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let qh = tape.slice(q_all, 1, hh * dk, dk)?;
        let kh = tape.slice(k_all, 1, hh * dk, dk)?;
        let vh = tape.slice(v_all, 1, hh * dv, dv)?;
        head_outs.push(attention(tape, qh, kh, vh)?);
    }
    let cat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat(&head_outs, 1)?
    };
    let proj = tape.matmul(cat, block.wo)?;
    tape.add_bias(proj, block.bo)
}

/// Pre-norm transformer block: x' = MSA(LN(x)) + x; out = MLP(LN(x')) + x'.
pub fn transformer_block(
    tape: &mut Tape,
    x: TensorId,
    block: &BoundBlock,
    heads: usize,
) -> Result<TensorId> {
    transformer_block_limited(tape, x, block, heads, None)
}

/// Transformer block with attention keys restricted to a token prefix.
pub fn transformer_block_limited(
    tape: &mut Tape,
    x: TensorId,
    block: &BoundBlock,
    heads: usize,
    key_rows: Option<usize>,
) -> Result<TensorId> {
    let n1 = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
    let attn = multi_head_attention_limited(tape, n1, block, heads, key_rows)?;
    let x1 = tape.add(attn, x)?;
    let n2 = tape.layer_norm(x1, block.ln2_gamma, block.ln2_beta, LN_EPS)?;
    let h = tape.matmul(n2, block.mlp_w1)?;
    let h = tape.add_bias(h, block.mlp_b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, block.mlp_w2)?;
    let h = tape.add_bias(h, block.mlp_b2)?;
    tape.add(h, x1)
}

/// Output of a plain (prompt-free) forward pass.
#[derive(Debug, Clone)]
pub struct PlainForward {
    /// Token states [class + N patches, C] after 0..=L blocks.
    pub states: Vec<TensorId>,
    /// Patch rows of the final state, [N, C].
    pub patch_tokens: TensorId,
    /// Final class token state, [1, C].
    pub cls_state: TensorId,
}

/// Embed an image, prepend the class token, add positional embeddings, and
/// run every block, keeping all intermediate states.
pub fn plain_forward(
    tape: &mut Tape,
    vit: &BoundViT,
    cfg: &ViTConfig,
    image_chw: &[f64],
) -> Result<PlainForward> {
    let patches = patchify(image_chw, cfg.image_size, cfg.image_size, cfg.patch_size)?;
    let n = cfg.n_patches();
    let patches = tape.leaf(patches, &[n, cfg.patch_dim()], false)?;
    let tokens = embed(tape, patches, vit.embed_w, vit.embed_b)?;
    let with_cls = tape.concat(&[vit.cls, tokens], 0)?;
    let x0 = tape.add(with_cls, vit.pos)?;
    let mut states = vec![x0];
    let mut x = x0;
    for block in &vit.blocks {
        x = transformer_block(tape, x, block, vit.heads)?;
        states.push(x);
    }
    let patch_tokens = tape.slice(x, 0, 1, n)?;
    let cls_state = tape.slice(x, 0, 0, 1)?;
    Ok(PlainForward {
        states,
        patch_tokens,
        cls_state,
    })
}
