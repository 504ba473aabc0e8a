//! Prompt generation: masked average pooling of support features into mean
//! vectors, expansion into G-token blocks, and augmentation with tokens
//! sampled from a learnable pool.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamTensor};
use crate::partition::BinaryMask;
use crate::tensor::{Tape, TensorId};
use crate::vit::{self, BoundViT, ViTConfig, ViTParams, INIT_STD};
use rand::seq::index::sample as index_sample;
use rand::Rng;

/// Learnable pool of D token blocks, each G x C.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPool {
    pub tokens: Vec<ParamTensor>,
    pub g: usize,
    pub c: usize,
}

impl TokenPool {
    pub fn init(d: usize, g: usize, c: usize, rng: &mut impl Rng) -> Self {
        TokenPool {
            tokens: (0..d)
                .map(|_| ParamTensor::trunc_normal(&[g, c], INIT_STD, rng))
                .collect(),
            g,
            c,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

impl ParamGroup for TokenPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, t) in self.tokens.iter().enumerate() {
            f(&format!("{prefix}token{i}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, t) in self.tokens.iter_mut().enumerate() {
            f(&format!("{prefix}token{i}"), t);
        }
    }
}

/// The per-episode prompt blocks: one foreground prompt plus one block per
/// background region (S in 1-shot, summed effective regions across shots in
/// K-shot), all G x C tensors on the tape.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub fg: TensorId,
    pub bg: Vec<TensorId>,
    /// Pool indices drawn for (fg, bg...) in order, kept for reproducibility.
    pub pool_indices: Vec<usize>,
    pub g: usize,
}

impl PromptSet {
    pub fn blocks(&self) -> Vec<TensorId> {
        let mut v = vec![self.fg];
        v.extend_from_slice(&self.bg);
        v
    }

    pub fn total_tokens(&self) -> usize {
        (1 + self.bg.len()) * self.g
    }
}

/// Masked average pooling of features [hw, c] under a foreground mask and a
/// set of background region masks, all at the feature resolution.
pub fn masked_mean_features(
    tape: &mut Tape,
    feats: TensorId,
    fg_mask: &BinaryMask,
    bg_masks: &[BinaryMask],
) -> Result<(TensorId, Vec<TensorId>)> {
    let hw = tape.shape(feats)[0];
    if fg_mask.data.len() != hw {
        return Err(Error::shape(
            "masked_mean_features",
            format!("mask {}x{} vs {} feature rows", fg_mask.height, fg_mask.width, hw),
        ));
    }
    let fg_rows = fg_mask.fg_indices();
    if fg_rows.is_empty() {
        return Err(Error::EpisodeInvalid {
            reason: "empty foreground mask at feature resolution".into(),
        });
    }
    let fg = tape.mean_rows_masked(feats, &fg_rows)?;
    let mut bg = Vec::with_capacity(bg_masks.len());
    for m in bg_masks {
        let rows = m.fg_indices();
        bg.push(tape.mean_rows_masked(feats, &rows)?);
    }
    Ok((fg, bg))
}

/// Draw `count` distinct pool indices, uniform without replacement.
pub fn sample_pool_tokens(pool: &TokenPool, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if pool.size() < count {
        return Err(Error::Config {
            reason: format!("token pool holds {} blocks, episode needs {}", pool.size(), count),
        });
    }
    Ok(index_sample(rng, pool.size(), count).into_vec())
}

/// p = expand(u) + z: row-repeat the mean feature G times and add the
/// sampled pool token.
pub fn build_prompt(tape: &mut Tape, mean_feat: TensorId, token: TensorId, g: usize) -> Result<TensorId> {
    let expanded = tape.repeat_rows(mean_feat, g)?;
    tape.add(expanded, token)
}

/// Deep support features from the frozen prompt extractor: the patch-token
/// states of the final block, detached from any gradient flow.
pub fn extract_prompt_features(
    extractor: &ViTParams,
    cfg: &ViTConfig,
    image_chw: &[f64],
) -> Result<Vec<f64>> {
    let mut scratch = Tape::new();
    let bound = BoundViT::bind(extractor, cfg, &mut scratch, false)?;
    let fwd = vit::plain_forward(&mut scratch, &bound, cfg, image_chw)?;
    Ok(scratch.data(fwd.patch_tokens).to_vec())
}
