//! The two-branch forward pass with per-block prompt synchronization, the
//! residual upsampler, and feature-/prompt-based proxy extraction.
//!
//! Query and support images run through the same transformer blocks with a
//! shared prompt block appended after the positional embedding. After every
//! block the prompt states (and the class token) from all branches are
//! averaged, so prompts carry information between query and support without
//! any pixel-to-pixel matching.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamTensor};
use crate::prompt::{PromptSet, TokenPool};
use crate::tensor::{Tape, TensorId};
use crate::vit::{self, BoundViT, ViTConfig, ViTParams, INIT_STD};
use rand::Rng;
use std::collections::BTreeMap;

/// Everything the model needs beyond the backbone dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    /// Hidden width of the residual upsampler bottleneck.
    pub upsampler_hidden: usize,
    /// Tokens per prompt block, G.
    pub prompt_tokens: usize,
    /// Learnable token pool size, D.
    pub pool_size: usize,
    /// Background regions per support image, S.
    pub bg_regions: usize,
    /// Support shots per episode, K.
    pub shots: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.shots == 0 || self.prompt_tokens == 0 || self.bg_regions == 0 {
            return Err(Error::Config {
                reason: "shots, prompt tokens and background regions must be positive".into(),
            });
        }
        if self.pool_size < 1 + self.shots * self.bg_regions {
            return Err(Error::Config {
                reason: format!(
                    "pool size {} cannot cover 1 + K*S = {} distinct prompt tokens",
                    self.pool_size,
                    1 + self.shots * self.bg_regions
                ),
            });
        }
        Ok(())
    }

    /// Side of the upsampled feature grid (2x the patch grid).
    pub fn feature_grid(&self) -> usize {
        2 * self.vit.grid()
    }
}

pub const UPSAMPLER_HIDDEN_DEFAULT: usize = 256;

/// Residual upsampler g: 1x1 conv -> ReLU -> 2x2 transposed conv -> ReLU ->
/// 1x1 conv, used spatially for patch features and per-token (transposed
/// conv replaced by identity) for prompt states.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    pub c1_w: ParamTensor,
    pub c1_b: ParamTensor,
    pub dc_w: ParamTensor,
    pub dc_b: ParamTensor,
    pub c2_w: ParamTensor,
    pub c2_b: ParamTensor,
}

impl UpsamplerParams {
    pub fn init(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        UpsamplerParams {
            c1_w: ParamTensor::trunc_normal(&[channels, hidden], INIT_STD, rng),
            c1_b: ParamTensor::zeros(&[hidden]),
            dc_w: ParamTensor::trunc_normal(&[4, hidden, hidden], INIT_STD, rng),
            dc_b: ParamTensor::zeros(&[hidden]),
            c2_w: ParamTensor::trunc_normal(&[hidden, channels], INIT_STD, rng),
            c2_b: ParamTensor::zeros(&[channels]),
        }
    }
}

impl ParamGroup for UpsamplerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (name, p) in [
            ("c1.w", &self.c1_w),
            ("c1.b", &self.c1_b),
            ("dc.w", &self.dc_w),
            ("dc.b", &self.dc_b),
            ("c2.w", &self.c2_w),
            ("c2.b", &self.c2_b),
        ] {
            f(&format!("{prefix}{name}"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (name, p) in [
            ("c1.w", &mut self.c1_w),
            ("c1.b", &mut self.c1_b),
            ("dc.w", &mut self.dc_w),
            ("dc.b", &mut self.dc_b),
            ("c2.w", &mut self.c2_w),
            ("c2.b", &mut self.c2_b),
        ] {
            f(&format!("{prefix}{name}"), p);
        }
    }
}

/// Full parameter set: the shared backbone, the upsampler, and the prompt
/// token pool. Both branches use the same backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FPTransParams {
    pub vit: ViTParams,
    pub upsampler: UpsamplerParams,
    pub pool: TokenPool,
}

impl FPTransParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(FPTransParams {
            vit: ViTParams::init(&cfg.vit, rng)?,
            upsampler: UpsamplerParams::init(cfg.vit.channels, cfg.upsampler_hidden, rng),
            pool: TokenPool::init(cfg.pool_size, cfg.prompt_tokens, cfg.vit.channels, rng),
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, ParamTensor> {
        let mut map = BTreeMap::new();
        self.visit("", &mut |name, p| {
            map.insert(name.to_string(), p.clone());
        });
        map
    }

    /// Restore parameter values from a checkpoint map. Every model parameter
    /// must be present with a matching shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, ParamTensor>) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_mut("", &mut |name, p| match map.get(name) {
            Some(src) if src.shape == p.shape => p.data = src.data.clone(),
            Some(src) => missing.push(format!(
                "{name}: shape {:?} in archive, {:?} in model",
                src.shape, p.shape
            )),
            None => missing.push(format!("{name}: absent from archive")),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                reason: format!("checkpoint mismatch: {}", missing.join("; ")),
            })
        }
    }
}

impl ParamGroup for FPTransParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.vit.visit(&format!("{prefix}vit."), f);
        self.upsampler.visit(&format!("{prefix}up."), f);
        self.pool.visit(&format!("{prefix}pool."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.vit.visit_mut(&format!("{prefix}vit."), f);
        self.upsampler.visit_mut(&format!("{prefix}up."), f);
        self.pool.visit_mut(&format!("{prefix}pool."), f);
    }
}

#[derive(Debug, Clone)]
pub struct BoundUpsampler {
    pub c1_w: TensorId,
    pub c1_b: TensorId,
    pub dc_w: TensorId,
    pub dc_b: TensorId,
    pub c2_w: TensorId,
    pub c2_b: TensorId,
}

/// All model parameters bound onto one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vit: BoundViT,
    pub up: BoundUpsampler,
    pub pool: Vec<TensorId>,
}

impl BoundModel {
    pub fn bind(
        params: &FPTransParams,
        cfg: &ModelConfig,
        tape: &mut Tape,
        trainable: bool,
    ) -> Result<Self> {
        let vit = BoundViT::bind(&params.vit, &cfg.vit, tape, trainable)?;
        let u = &params.upsampler;
        let up = BoundUpsampler {
            c1_w: u.c1_w.bind(tape, trainable)?,
            c1_b: u.c1_b.bind(tape, trainable)?,
            dc_w: u.dc_w.bind(tape, trainable)?,
            dc_b: u.dc_b.bind(tape, trainable)?,
            c2_w: u.c2_w.bind(tape, trainable)?,
            c2_b: u.c2_b.bind(tape, trainable)?,
        };
        let pool = params
            .pool
            .tokens
            .iter()
            .map(|t| t.bind(tape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { vit, up, pool })
    }

    /// Tape ids keyed by the same names the parameter visitor produces, for
    /// pulling gradients back out after a backward pass.
    pub fn id_map(&self) -> BTreeMap<String, TensorId> {
        let mut map = BTreeMap::new();
        map.insert("vit.embed.w".into(), self.vit.embed_w);
        map.insert("vit.embed.b".into(), self.vit.embed_b);
        map.insert("vit.pos".into(), self.vit.pos);
        map.insert("vit.cls".into(), self.vit.cls);
        for (i, b) in self.vit.blocks.iter().enumerate() {
            for (suffix, id) in [
                ("ln1.gamma", b.ln1_gamma),
                ("ln1.beta", b.ln1_beta),
                ("attn.wq", b.wq),
                ("attn.bq", b.bq),
                ("attn.wk", b.wk),
                ("attn.bk", b.bk),
                ("attn.wv", b.wv),
                ("attn.bv", b.bv),
                ("attn.wo", b.wo),
                ("attn.bo", b.bo),
                ("ln2.gamma", b.ln2_gamma),
                ("ln2.beta", b.ln2_beta),
                ("mlp.w1", b.mlp_w1),
                ("mlp.b1", b.mlp_b1),
                ("mlp.w2", b.mlp_w2),
                ("mlp.b2", b.mlp_b2),
            ] {
                map.insert(format!("vit.block{i}.{suffix}"), id);
            }
        }
        for (name, id) in [
            ("up.c1.w", self.up.c1_w),
            ("up.c1.b", self.up.c1_b),
            ("up.dc.w", self.up.dc_w),
            ("up.dc.b", self.up.dc_b),
            ("up.c2.w", self.up.c2_w),
            ("up.c2.b", self.up.c2_b),
        ] {
            map.insert(name.into(), id);
        }
        for (i, &id) in self.pool.iter().enumerate() {
            map.insert(format!("pool.token{i}"), id);
        }
        map
    }
}

// ── Upsampler application ───────────────────────────────────────────────

/// X' = Resize(X) + g(X) on an [h, w, c] map, one 2x stage.
pub fn upsample_features(tape: &mut Tape, x: TensorId, up: &BoundUpsampler) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let (h, w) = (s[0], s[1]);
    let h1 = tape.pointwise_conv(x, up.c1_w, up.c1_b)?;
    let a1 = tape.relu(h1);
    let h2 = tape.transposed_conv_2x2(a1, up.dc_w, up.dc_b)?;
    let a2 = tape.relu(h2);
    let g = tape.pointwise_conv(a2, up.c2_w, up.c2_b)?;
    let resized = tape.bilinear_resize(x, 2 * h, 2 * w)?;
    tape.add(resized, g)
}

/// P + g(P) on token rows: the 1x1 convs act per token and the transposed
/// conv is the identity, since prompts carry no 2-d geometry.
pub fn project_tokens(tape: &mut Tape, p: TensorId, up: &BoundUpsampler) -> Result<TensorId> {
    let h1 = tape.matmul(p, up.c1_w)?;
    let h1 = tape.add_bias(h1, up.c1_b)?;
    let a1 = tape.relu(h1);
    let a2 = tape.relu(a1);
    let g = tape.matmul(a2, up.c2_w)?;
    let g = tape.add_bias(g, up.c2_b)?;
    tape.add(p, g)
}

// ── Episode forward ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Average prompt and class-token states across branches after every
    /// block. Off = each branch keeps private prompt states (the no-sync
    /// ablation).
    pub sync: bool,
    /// Restrict attention keys to [class + patches], cutting prompts out of
    /// the information flow; test hook for the plain-ViT reduction law.
    pub mask_prompts: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            sync: true,
            mask_prompts: false,
        }
    }
}

/// Outputs of one episode forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    /// Upsampled query features, [2g, 2g, C].
    pub f_q: TensorId,
    /// Upsampled support features per shot.
    pub f_s: Vec<TensorId>,
    /// Final query patch tokens before upsampling, [N, C].
    pub x_q: TensorId,
    pub x_s: Vec<TensorId>,
    /// Final prompt states, [(1 + B) * G, C].
    pub prompts_final: TensorId,
    /// Prompt states after 0..=L blocks (synced when sync is on, the query
    /// branch's view otherwise).
    pub prompts_per_block: Vec<TensorId>,
    /// Final class token state, [1, C].
    pub cls_final: TensorId,
}

fn embed_branch(
    tape: &mut Tape,
    bound: &BoundViT,
    cfg: &ViTConfig,
    image_chw: &[f64],
) -> Result<(TensorId, TensorId)> {
    let patches = vit::patchify(image_chw, cfg.image_size, cfg.image_size, cfg.patch_size)?;
    let n = cfg.n_patches();
    let pid = tape.leaf(patches, &[n, cfg.patch_dim()], false)?;
    let tokens = vit::embed(tape, pid, bound.embed_w, bound.embed_b)?;
    let with_cls = tape.concat(&[bound.cls, tokens], 0)?;
    let x0 = tape.add(with_cls, bound.pos)?;
    let cls = tape.slice(x0, 0, 0, 1)?;
    let patch_tokens = tape.slice(x0, 0, 1, n)?;
    Ok((cls, patch_tokens))
}

/// Run query and K support branches through the shared blocks with prompt
/// synchronization, then upsample both feature maps.
pub fn forward_episode(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    query_chw: &[f64],
    support_chws: &[Vec<f64>],
    prompts: &PromptSet,
    opts: ForwardOptions,
) -> Result<EpisodeForward> {
    let k = support_chws.len();
    if k == 0 {
        return Err(Error::EpisodeInvalid {
            reason: "episode has no support images".into(),
        });
    }
    let n = cfg.vit.n_patches();
    let grid = cfg.vit.grid();
    let c = cfg.vit.channels;

    // Branch 0 is the query; 1..=K are supports. The class token starts
    // shared (identical embedding + position row) and the prompt block is
    // shared by construction.
    let (cls0, xq0) = embed_branch(tape, &bound.vit, &cfg.vit, query_chw)?;
    let mut patch_states = vec![xq0];
    for s in support_chws {
        let (_, xs0) = embed_branch(tape, &bound.vit, &cfg.vit, s)?;
        patch_states.push(xs0);
    }
    let p0 = tape.concat(&prompts.blocks(), 0)?;
    let tp = tape.shape(p0)[0];

    let branches = k + 1;
    let mut cls_states = vec![cls0; branches];
    let mut prompt_states = vec![p0; branches];
    let mut prompts_per_block = vec![p0];
    let key_rows = opts.mask_prompts.then_some(1 + n);

    for block in &bound.vit.blocks {
        let mut new_cls = Vec::with_capacity(branches);
        let mut new_prompts = Vec::with_capacity(branches);
        for b in 0..branches {
            let input = tape.concat(&[cls_states[b], patch_states[b], prompt_states[b]], 0)?;
            let out = vit::transformer_block_limited(tape, input, block, bound.vit.heads, key_rows)?;
            new_cls.push(tape.slice(out, 0, 0, 1)?);
            patch_states[b] = tape.slice(out, 0, 1, n)?;
            new_prompts.push(tape.slice(out, 0, 1 + n, tp)?);
        }
        if opts.sync {
            let scale = 1.0 / branches as f64;
            let mut p_sum = new_prompts[0];
            let mut c_sum = new_cls[0];
            for b in 1..branches {
                p_sum = tape.add(p_sum, new_prompts[b])?;
                c_sum = tape.add(c_sum, new_cls[b])?;
            }
            let p_avg = tape.scale(p_sum, scale);
            let c_avg = tape.scale(c_sum, scale);
            cls_states = vec![c_avg; branches];
            prompt_states = vec![p_avg; branches];
            prompts_per_block.push(p_avg);
        } else {
            cls_states = new_cls;
            prompt_states = new_prompts;
            prompts_per_block.push(prompt_states[0]);
        }
    }

    // One 2x residual upsampling stage per branch.
    let mut maps = Vec::with_capacity(branches);
    for state in &patch_states {
        let spatial = tape.reshape(*state, &[grid, grid, c])?;
        maps.push(upsample_features(tape, spatial, &bound.up)?);
    }
    let f_q = maps.remove(0);
    Ok(EpisodeForward {
        f_q,
        f_s: maps,
        x_q: patch_states[0],
        x_s: patch_states[1..].to_vec(),
        prompts_final: prompt_states[0],
        prompts_per_block,
        cls_final: cls_states[0],
    })
}

// ── Proxy extraction ────────────────────────────────────────────────────

/// One foreground vector plus background vectors in feature space.
#[derive(Debug, Clone)]
pub struct ProxySet {
    pub fg: TensorId,
    pub bg: Vec<TensorId>,
}

impl ProxySet {
    /// True when the background proxy list is empty (degenerate episodes).
    pub fn degenerate(&self) -> bool {
        self.bg.is_empty()
    }
}

/// Masked means of the upsampled support features: the foreground proxy is
/// the K-shot average, background proxies stay per shot per region.
pub fn feature_based_proxies(
    tape: &mut Tape,
    f_s: &[TensorId],
    fg_masks: &[crate::partition::BinaryMask],
    partitions: &[crate::partition::PartitionResult],
) -> Result<ProxySet> {
    let k = f_s.len();
    if fg_masks.len() != k || partitions.len() != k {
        return Err(Error::shape(
            "feature_based_proxies",
            format!("{} shots vs {} masks / {} partitions", k, fg_masks.len(), partitions.len()),
        ));
    }
    let mut fg_per_shot = Vec::with_capacity(k);
    let mut bg = Vec::new();
    for (shot, &f) in f_s.iter().enumerate() {
        let s = tape.shape(f).to_vec();
        let flat = tape.reshape(f, &[s[0] * s[1], s[2]])?;
        let fg_rows = fg_masks[shot].fg_indices();
        if fg_rows.is_empty() {
            return Err(Error::EpisodeInvalid {
                reason: format!("support shot {shot} has empty foreground at feature resolution"),
            });
        }
        fg_per_shot.push(tape.mean_rows_masked(flat, &fg_rows)?);
        for mask in &partitions[shot].masks {
            bg.push(tape.mean_rows_masked(flat, &mask.fg_indices())?);
        }
    }
    let mut fg_sum = fg_per_shot[0];
    for &f in &fg_per_shot[1..] {
        fg_sum = tape.add(fg_sum, f)?;
    }
    let fg = tape.scale(fg_sum, 1.0 / k as f64);
    Ok(ProxySet { fg, bg })
}

/// Prompt-based proxies: project the final prompt states through the
/// residual token path, then average each block's G tokens.
pub fn prompt_based_proxies(
    tape: &mut Tape,
    prompts_final: TensorId,
    n_blocks: usize,
    g: usize,
    up: &BoundUpsampler,
) -> Result<ProxySet> {
    let projected = project_tokens(tape, prompts_final, up)?;
    let sizes = vec![g; n_blocks];
    let blocks = tape.split(projected, 0, &sizes)?;
    let mut means = blocks
        .into_iter()
        .map(|b| tape.mean_axis(b, 0))
        .collect::<Result<Vec<_>>>()?;
    let fg = means.remove(0);
    Ok(ProxySet { fg, bg: means })
}
