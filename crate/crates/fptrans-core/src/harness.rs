//! Training and evaluation harness: the single-episode training step, SGD
//! with momentum and weight decay, the epoch loop with checkpoint resume,
//! the mIoU evaluation, the ablation runner, and the whole-objective
//! gradient check.
//!
//! Every random choice inside a step derives from
//! (master seed, purpose, phase, epoch, episode index, shot), so runs are
//! bitwise reproducible and resuming from an epoch checkpoint continues
//! exactly like the uninterrupted run.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::episodes::{self, DatasetSplit, Episode, Phase};
use crate::error::{Error, Result};
use crate::model::{
    self, BoundModel, EpisodeForward, FPTransParams, ForwardOptions,
};
use crate::objective::{self};
use crate::params::ParamGroup;
use crate::partition::{downsample_mask, partition, BinaryMask, PartitionResult};
use crate::prompt::{self, PromptSet};
use crate::rng::{self, purpose};
use crate::tensor::grad_check::{finite_difference_gradient, max_relative_error};
use crate::tensor::{Tape, TensorId};
use crate::vit::ViTParams;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const PHASE_TRAIN: u64 = 0;
pub const PHASE_EVAL: u64 = 1;
pub const PHASE_GRADCHECK: u64 = 2;

// ── SGD ─────────────────────────────────────────────────────────────────

/// Per-parameter momentum buffers keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

/// v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.
/// Parameters without a gradient entry (e.g. unsampled pool tokens) are
/// left untouched.
pub fn sgd_step(
    params: &mut FPTransParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut failure: Option<Error> = None;
    params.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        if g.len() != p.data.len() {
            failure = Some(Error::shape(
                "sgd_step",
                format!("{name}: gradient len {} vs parameter len {}", g.len(), p.data.len()),
            ));
            return;
        }
        if g.iter().any(|v| !v.is_finite()) {
            failure = Some(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
            return;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.data.len()]);
        for i in 0..p.data.len() {
            v[i] = momentum * v[i] + (g[i] + weight_decay * p.data[i]);
            p.data[i] -= lr * v[i];
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ── Episode pipeline ────────────────────────────────────────────────────

/// Stream tags for one episode's random choices.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeTags {
    pub seed: u64,
    pub phase: u64,
    pub epoch: u64,
    pub index: u64,
}

impl EpisodeTags {
    fn stream(&self, purpose_tag: u64, shot: u64) -> rand_chacha::ChaCha8Rng {
        rng::derive(self.seed, &[purpose_tag, self.phase, self.epoch, self.index, shot])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ce_prime: f64,
    pub pair: f64,
    pub total: f64,
    /// Set when the support background vanished and Eq. 7 fell back to the
    /// sigmoid-only path.
    pub degenerate: bool,
}

struct EpisodeGraph {
    ce: TensorId,
    ce_prime: TensorId,
    pair: TensorId,
    total: TensorId,
    degenerate: bool,
}

/// Build the episode prompts: frozen-extractor features per shot, masked
/// means over the patch-grid partition, pool-token augmentation.
fn build_prompts(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &FPTransParams,
    extractor: &ViTParams,
    config: &RunConfig,
    episode: &Episode,
    tags: &EpisodeTags,
) -> Result<PromptSet> {
    let vit_cfg = config.vit_config();
    let grid = vit_cfg.grid();
    let g = config.prompt_tokens;

    let mut fg_means = Vec::new();
    let mut bg_means = Vec::new();
    for (shot, (image, mask)) in episode.supports.iter().enumerate() {
        let ds = downsample_mask(mask, grid, grid)?;
        if ds.count_ones() == 0 {
            return Err(Error::EpisodeInvalid {
                reason: format!("support {shot}: foreground vanished at the patch grid"),
            });
        }
        let mut part_rng = tags.stream(purpose::PARTITION_PROMPT, shot as u64);
        let part = partition(&ds, config.bg_regions, &mut part_rng)?;
        let feats = prompt::extract_prompt_features(extractor, &vit_cfg, &image.to_chw())?;
        let feats = tape.leaf(feats, &[vit_cfg.n_patches(), vit_cfg.channels], false)?;
        let (u_f, u_ns) = prompt::masked_mean_features(tape, feats, &ds, &part.masks)?;
        fg_means.push(u_f);
        bg_means.extend(u_ns);
    }
    let mut fg_sum = fg_means[0];
    for &m in &fg_means[1..] {
        fg_sum = tape.add(fg_sum, m)?;
    }
    let u_f = tape.scale(fg_sum, 1.0 / fg_means.len() as f64);

    let mut pool_rng = tags.stream(purpose::POOL_SAMPLING, 0);
    let indices = prompt::sample_pool_tokens(&params.pool, 1 + bg_means.len(), &mut pool_rng)?;
    let fg = prompt::build_prompt(tape, u_f, bound.pool[indices[0]], g)?;
    let bg = bg_means
        .iter()
        .zip(&indices[1..])
        .map(|(&u, &idx)| prompt::build_prompt(tape, u, bound.pool[idx], g))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet {
        fg,
        bg,
        pool_indices: indices,
        g,
    })
}

/// Labels and background partitions at the upsampled feature resolution.
fn feature_masks(
    config: &RunConfig,
    episode: &Episode,
    tags: &EpisodeTags,
) -> Result<(BinaryMask, Vec<BinaryMask>, Vec<PartitionResult>)> {
    let fgrid = config.model_config().feature_grid();
    let yq = downsample_mask(&episode.query.1, fgrid, fgrid)?;
    let mut ys = Vec::with_capacity(episode.supports.len());
    let mut parts = Vec::with_capacity(episode.supports.len());
    for (shot, (_, mask)) in episode.supports.iter().enumerate() {
        let ds = downsample_mask(mask, fgrid, fgrid)?;
        if ds.count_ones() == 0 {
            return Err(Error::EpisodeInvalid {
                reason: format!("support {shot}: foreground vanished at the feature grid"),
            });
        }
        let mut part_rng = tags.stream(purpose::PARTITION_FEATURE, shot as u64);
        parts.push(partition(&ds, config.bg_regions, &mut part_rng)?);
        ys.push(ds);
    }
    Ok((yq, ys, parts))
}

fn run_episode_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &FPTransParams,
    extractor: &ViTParams,
    config: &RunConfig,
    episode: &Episode,
    tags: &EpisodeTags,
) -> Result<(EpisodeGraph, EpisodeForward)> {
    let mcfg = config.model_config();
    let lcfg = config.loss_config();
    let prompts = build_prompts(tape, bound, params, extractor, config, episode, tags)?;
    let n_prompt_blocks = 1 + prompts.bg.len();

    let support_chws: Vec<Vec<f64>> = episode.supports.iter().map(|(i, _)| i.to_chw()).collect();
    let fwd = model::forward_episode(
        tape,
        bound,
        &mcfg,
        &episode.query.0.to_chw(),
        &support_chws,
        &prompts,
        ForwardOptions {
            sync: config.sync,
            mask_prompts: false,
        },
    )?;

    let (yq, ys, parts) = feature_masks(config, episode, tags)?;
    let feat_proxies = model::feature_based_proxies(tape, &fwd.f_s, &ys, &parts)?;
    let prompt_proxies =
        model::prompt_based_proxies(tape, fwd.prompts_final, n_prompt_blocks, prompts.g, &bound.up)?;

    let (ce, degenerate) =
        objective::classification_loss(tape, fwd.f_q, &feat_proxies, &yq, lcfg.tau)?;
    let (ce_prime, _) =
        objective::classification_loss(tape, fwd.f_q, &prompt_proxies, &yq, lcfg.tau)?;
    let mut pair_rng = tags.stream(purpose::PAIR_SUBSAMPLE, 0);
    let pair = objective::pairwise_loss(tape, fwd.f_q, &fwd.f_s, &yq, &ys, &lcfg, &mut pair_rng)?;
    let total = objective::total_loss(tape, ce, ce_prime, pair, lcfg.lambda)?;
    Ok((
        EpisodeGraph {
            ce,
            ce_prime,
            pair,
            total,
            degenerate,
        },
        fwd,
    ))
}

/// One full Algorithm-1 step: prompts from the frozen extractor, the synced
/// forward, both proxy sets, the three losses, backward, SGD update.
pub fn train_step(
    params: &mut FPTransParams,
    sgd_state: &mut SgdState,
    extractor: &ViTParams,
    episode: &Episode,
    config: &RunConfig,
    epoch: u64,
    index: u64,
) -> Result<LossBreakdown> {
    let tags = EpisodeTags {
        seed: config.seed,
        phase: PHASE_TRAIN,
        epoch,
        index,
    };
    let mut tape = Tape::new();
    let bound = BoundModel::bind(params, &config.model_config(), &mut tape, true)?;
    let (graph, _) = run_episode_graph(&mut tape, &bound, params, extractor, config, episode, &tags)?;
    let breakdown = LossBreakdown {
        ce: tape.value(graph.ce),
        ce_prime: tape.value(graph.ce_prime),
        pair: tape.value(graph.pair),
        total: tape.value(graph.total),
        degenerate: graph.degenerate,
    };
    tape.backward(graph.total)?;
    let mut grads = BTreeMap::new();
    for (name, id) in bound.id_map() {
        if let Some(g) = tape.grad(id) {
            grads.insert(name, g.to_vec());
        }
    }
    sgd_step(params, &grads, sgd_state, config.lr, config.momentum, config.weight_decay)?;
    Ok(breakdown)
}

/// Total loss of one episode without any parameter update; the closure the
/// finite-difference gradient check probes.
pub fn episode_loss_value(
    params: &FPTransParams,
    extractor: &ViTParams,
    episode: &Episode,
    config: &RunConfig,
    tags: &EpisodeTags,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(params, &config.model_config(), &mut tape, false)?;
    let (graph, _) = run_episode_graph(&mut tape, &bound, params, extractor, config, episode, tags)?;
    Ok(tape.value(graph.total))
}

/// Inference: prompts + synced forward, then the feature-based proxies only
/// drive Eq. 7 and the thresholded mask.
pub fn evaluate_episode(
    params: &FPTransParams,
    extractor: &ViTParams,
    episode: &Episode,
    config: &RunConfig,
    index: u64,
) -> Result<BinaryMask> {
    let tags = EpisodeTags {
        seed: config.seed,
        phase: PHASE_EVAL,
        epoch: 0,
        index,
    };
    let mcfg = config.model_config();
    let mut tape = Tape::new();
    let bound = BoundModel::bind(params, &mcfg, &mut tape, false)?;
    let prompts = build_prompts(&mut tape, &bound, params, extractor, config, episode, &tags)?;
    let support_chws: Vec<Vec<f64>> = episode.supports.iter().map(|(i, _)| i.to_chw()).collect();
    let fwd = model::forward_episode(
        &mut tape,
        &bound,
        &mcfg,
        &episode.query.0.to_chw(),
        &support_chws,
        &prompts,
        ForwardOptions {
            sync: config.sync,
            mask_prompts: false,
        },
    )?;
    let (_, ys, parts) = feature_masks(config, episode, &tags)?;
    let feat_proxies = model::feature_based_proxies(&mut tape, &fwd.f_s, &ys, &parts)?;
    objective::predict_mask(&mut tape, fwd.f_q, &feat_proxies, config.tau, config.image_size)
}

/// Self-proxy oracle: proxies pooled from the query's own ground truth, an
/// upper bound for support-proxy prediction quality.
pub fn evaluate_episode_self_proxy(
    params: &FPTransParams,
    extractor: &ViTParams,
    episode: &Episode,
    config: &RunConfig,
    index: u64,
) -> Result<BinaryMask> {
    let tags = EpisodeTags {
        seed: config.seed,
        phase: PHASE_EVAL,
        epoch: 0,
        index,
    };
    let mcfg = config.model_config();
    let fgrid = mcfg.feature_grid();
    let mut tape = Tape::new();
    let bound = BoundModel::bind(params, &mcfg, &mut tape, false)?;
    let prompts = build_prompts(&mut tape, &bound, params, extractor, config, episode, &tags)?;
    let support_chws: Vec<Vec<f64>> = episode.supports.iter().map(|(i, _)| i.to_chw()).collect();
    let fwd = model::forward_episode(
        &mut tape,
        &bound,
        &mcfg,
        &episode.query.0.to_chw(),
        &support_chws,
        &prompts,
        ForwardOptions {
            sync: config.sync,
            mask_prompts: false,
        },
    )?;
    let yq = downsample_mask(&episode.query.1, fgrid, fgrid)?;
    if yq.count_ones() == 0 {
        return Err(Error::EpisodeInvalid {
            reason: "query foreground vanished at the feature grid".into(),
        });
    }
    let mut part_rng = tags.stream(purpose::PARTITION_FEATURE, u64::MAX);
    let part = partition(&yq, config.bg_regions, &mut part_rng)?;
    let proxies = model::feature_based_proxies(&mut tape, &[fwd.f_q], &[yq], &[part])?;
    objective::predict_mask(&mut tape, fwd.f_q, &proxies, config.tau, config.image_size)
}

// ── Checkpoints with optimizer state ────────────────────────────────────

fn checkpoint_map(
    params: &FPTransParams,
    state: &SgdState,
    epoch: u64,
    seed: u64,
) -> BTreeMap<String, crate::params::ParamTensor> {
    let mut map = params.to_map();
    for (name, v) in &state.velocity {
        map.insert(
            format!("optim.{name}"),
            crate::params::ParamTensor {
                data: v.clone(),
                shape: vec![v.len()],
            },
        );
    }
    map.insert(
        "meta.epoch".into(),
        crate::params::ParamTensor {
            data: vec![epoch as f64],
            shape: vec![1],
        },
    );
    map.insert(
        "meta.seed".into(),
        crate::params::ParamTensor {
            data: vec![seed as f64],
            shape: vec![1],
        },
    );
    map
}

fn restore_checkpoint(
    path: &Path,
    params: &mut FPTransParams,
    state: &mut SgdState,
) -> Result<u64> {
    let map = checkpoint::load(path)?;
    let model_entries: BTreeMap<_, _> = map
        .iter()
        .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("meta."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    params.load_map(&model_entries)?;
    state.velocity.clear();
    for (k, v) in &map {
        if let Some(name) = k.strip_prefix("optim.") {
            state.velocity.insert(name.to_string(), v.data.clone());
        }
    }
    let epoch = map
        .get("meta.epoch")
        .map(|t| t.data[0] as u64)
        .ok_or_else(|| Error::Config {
            reason: format!("{} lacks meta.epoch", path.display()),
        })?;
    Ok(epoch)
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Mean (ce, ce', pair, total) per epoch.
    pub epoch_losses: Vec<[f64; 4]>,
}

fn load_extractor(params: &FPTransParams, config: &RunConfig) -> Result<ViTParams> {
    if config.extractor_checkpoint.is_empty() {
        return Ok(params.vit.clone());
    }
    let map = checkpoint::load(Path::new(&config.extractor_checkpoint))?;
    let mut donor = params.clone();
    let model_entries: BTreeMap<_, _> = map
        .iter()
        .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("meta."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    donor.load_map(&model_entries)?;
    Ok(donor.vit)
}

/// Sample episodes until one survives the validity checks, then apply the
/// training step. Invalid episodes are consumed from the same stream so the
/// schedule stays deterministic.
fn train_one(
    split: &DatasetSplit,
    params: &mut FPTransParams,
    sgd_state: &mut SgdState,
    extractor: &ViTParams,
    config: &RunConfig,
    epoch: u64,
    index: u64,
    episode_rng: &mut rand_chacha::ChaCha8Rng,
    manifest: &mut impl std::io::Write,
) -> Result<LossBreakdown> {
    for _attempt in 0..100 {
        let tag = (epoch << 32) | index;
        let episode = episodes::sample_episode(split, config.shots, Phase::Train, episode_rng, tag)?;
        match train_step(params, sgd_state, extractor, &episode, config, epoch, index) {
            Ok(b) => {
                manifest
                    .write_all(format!("{}\n", episode.manifest_line()).as_bytes())
                    .map_err(|e| Error::io("episode manifest", e))?;
                return Ok(b);
            }
            Err(Error::EpisodeInvalid { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Sampling {
        reason: "100 consecutive invalid episodes".into(),
    })
}

pub fn run_training(config: &RunConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let split = episodes::load_split(Path::new(&config.data_dir))?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut init_rng = rng::derive(config.seed, &[purpose::INIT]);
    let mut params = FPTransParams::init(&config.model_config(), &mut init_rng)?;
    let mut sgd_state = SgdState::default();
    let mut start_epoch = 0u64;
    if !config.checkpoint.is_empty() {
        start_epoch = restore_checkpoint(Path::new(&config.checkpoint), &mut params, &mut sgd_state)?;
    }

    let metrics_path = out_dir.join("train_metrics.tsv");
    let manifest_path = out_dir.join("episodes.tsv");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(start_epoch > 0)
        .write(true)
        .truncate(start_epoch == 0)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut manifest = fs::OpenOptions::new()
        .create(true)
        .append(start_epoch > 0)
        .write(true)
        .truncate(start_epoch == 0)
        .open(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    if start_epoch == 0 {
        metrics
            .write_all(b"epoch\tce\tce_prime\tpair\ttotal\n")
            .map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut epoch_losses = Vec::new();
    let checkpoint_path = out_dir.join("checkpoint.fpck");
    for epoch in start_epoch..config.epochs as u64 {
        // The prompt extractor is a frozen copy of the current backbone,
        // refreshed at every epoch boundary.
        let extractor = load_extractor(&params, config)?;
        let mut episode_rng = rng::derive(config.seed, &[purpose::TRAIN_EPISODES, epoch]);
        let mut sums = [0.0f64; 4];
        for index in 0..config.episodes_per_epoch as u64 {
            let b = train_one(
                &split,
                &mut params,
                &mut sgd_state,
                &extractor,
                config,
                epoch,
                index,
                &mut episode_rng,
                &mut manifest,
            )?;
            sums[0] += b.ce;
            sums[1] += b.ce_prime;
            sums[2] += b.pair;
            sums[3] += b.total;
        }
        let n = config.episodes_per_epoch as f64;
        let means = [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n];
        epoch_losses.push(means);
        metrics
            .write_all(
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    epoch, means[0], means[1], means[2], means[3]
                )
                .as_bytes(),
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
        let map = checkpoint_map(&params, &sgd_state, epoch + 1, config.seed);
        checkpoint::save(&out_dir.join(format!("checkpoint_epoch{}.fpck", epoch + 1)), &map)?;
        checkpoint::save(&checkpoint_path, &map)?;
    }
    Ok(TrainingOutcome {
        checkpoint_path,
        metrics_path,
        epoch_losses,
    })
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<(usize, String, f64)>,
    pub mean: f64,
    pub episodes: usize,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::from("class\tname\tiou\n");
        for (id, name, iou) in &self.per_class {
            s.push_str(&format!("{id}\t{name}\t{iou:.6}\n"));
        }
        s.push_str(&format!("mean\t-\t{:.6}\n", self.mean));
        s
    }
}

/// Evaluate a checkpoint over test episodes with feature-based proxies.
pub fn run_evaluation(
    config: &RunConfig,
    checkpoint_path: &Path,
    n_episodes: usize,
) -> Result<EvalReport> {
    config.validate()?;
    let split = episodes::load_split(Path::new(&config.data_dir))?;
    let mut init_rng = rng::derive(config.seed, &[purpose::INIT]);
    let mut params = FPTransParams::init(&config.model_config(), &mut init_rng)?;
    let mut state = SgdState::default();
    restore_checkpoint(checkpoint_path, &mut params, &mut state)?;
    let extractor = load_extractor(&params, config)?;

    let names: BTreeMap<usize, String> = split
        .train
        .iter()
        .chain(&split.test)
        .map(|c| (c.id, c.name.clone()))
        .collect();

    let mut episode_rng = rng::derive(config.seed, &[purpose::EVAL_EPISODES]);
    let mut acc = episodes::IouAccumulator::default();
    let mut done = 0usize;
    let mut index = 0u64;
    while done < n_episodes {
        let episode =
            episodes::sample_episode(&split, config.shots, Phase::Test, &mut episode_rng, index)?;
        match evaluate_episode(&params, &extractor, &episode, config, index) {
            Ok(pred) => {
                acc.add(episode.class_id, &pred, &episode.query.1)?;
                done += 1;
            }
            Err(Error::EpisodeInvalid { .. }) => {}
            Err(e) => return Err(e),
        }
        index += 1;
        if index > 100 * n_episodes as u64 {
            return Err(Error::Sampling {
                reason: "evaluation could not collect enough valid episodes".into(),
            });
        }
    }
    let per_class = acc
        .per_class()
        .into_iter()
        .map(|(id, iou)| (id, names.get(&id).cloned().unwrap_or_default(), iou))
        .collect();
    Ok(EvalReport {
        per_class,
        mean: acc.mean(),
        episodes: done,
    })
}

/// Evaluate and write the UTF-8 report plus a machine-readable TSV.
pub fn run_evaluation_to_files(
    config: &RunConfig,
    checkpoint_path: &Path,
    n_episodes: usize,
) -> Result<(EvalReport, PathBuf)> {
    let report = run_evaluation(config, checkpoint_path, n_episodes)?;
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let report_path = out_dir.join("eval_report.txt");
    fs::write(&report_path, report.render()).map_err(|e| Error::io(&report_path, e))?;
    Ok((report, report_path))
}

// ── Ablation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let seeds = self.rows.first().map_or(0, |r| r.per_seed.len());
        let mut s = String::from("variant");
        for i in 0..seeds {
            s.push_str(&format!("\tseed{i}"));
        }
        s.push_str("\tmean\tstd\n");
        for row in &self.rows {
            s.push_str(&row.variant);
            for v in &row.per_seed {
                s.push_str(&format!("\t{v:.6}"));
            }
            s.push_str(&format!("\t{:.6}\t{:.6}\n", row.mean, row.std));
        }
        for w in &self.warnings {
            s.push_str(&format!("# WARNING: {w}\n"));
        }
        s
    }
}

fn variant_config(base: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match variant {
        "baseline" => {}
        "no_pair_loss" => cfg.lambda = 0.0,
        "no_sync" => cfg.sync = false,
        "single_bg_proxy" | "s1" => cfg.bg_regions = 1,
        "s3" => cfg.bg_regions = 3,
        "s5" => cfg.bg_regions = 5,
        other => {
            return Err(Error::Config {
                reason: format!("unknown ablation variant {other:?}"),
            })
        }
    }
    Ok(cfg)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

/// Train and evaluate the baseline plus each variant over shared seeds.
/// `s_sweep` expands to S in {1, 3, 5}. Each run gets a fresh model and its
/// own output subdirectory.
pub fn run_ablation(config: &RunConfig, variants: &[String]) -> Result<AblationTable> {
    let mut expanded = vec!["baseline".to_string()];
    for v in variants {
        if v == "s_sweep" {
            expanded.extend(["s1".to_string(), "s3".to_string(), "s5".to_string()]);
        } else {
            expanded.push(v.clone());
        }
    }
    expanded.dedup();

    let mut rows = Vec::new();
    for variant in &expanded {
        let mut per_seed = Vec::new();
        for i in 0..config.ablate_seeds as u64 {
            let mut cfg = variant_config(config, variant)?;
            cfg.seed = config.seed.wrapping_add(i);
            cfg.out_dir = format!("{}/ablate_{}_seed{}", config.out_dir, variant, i);
            cfg.checkpoint = String::new();
            let outcome = run_training(&cfg)?;
            let report = run_evaluation(&cfg, &outcome.checkpoint_path, cfg.eval_episodes)?;
            per_seed.push(report.mean);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / per_seed.len() as f64;
        rows.push(AblationRow {
            variant: variant.clone(),
            per_seed,
            mean,
            std: var.sqrt(),
        });
    }

    // Direction check mirroring the paper-scale ablations; a reversal at
    // desk scale is reported, not failed.
    let mut warnings = Vec::new();
    let baseline_median = median(&rows[0].per_seed);
    for row in &rows[1..] {
        if matches!(row.variant.as_str(), "no_sync" | "single_bg_proxy" | "s1")
            && median(&row.per_seed) > baseline_median
        {
            warnings.push(format!(
                "variant {} median {:.4} exceeds baseline median {:.4}",
                row.variant,
                median(&row.per_seed),
                baseline_median
            ));
        }
    }
    let table = AblationTable { rows, warnings };
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let path = out_dir.join("ablation.tsv");
    fs::write(&path, table.render()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

// ── Gradient check ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, err)| *err <= self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("parameter_group\tworst_rel_err\tstatus\n");
        for (name, err) in &self.groups {
            let status = if *err <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{name}\t{err:.3e}\t{status}\n"));
        }
        s.push_str(&format!(
            "overall\t-\t{}\n",
            if self.passed() { "ok" } else { "FAIL" }
        ));
        s
    }
}

/// A deterministic in-memory episode for gradient checking: noise images
/// with a top band of foreground. The band covers whole patch cells, so the
/// mask survives majority downsampling at any patch grid.
pub fn probe_episode(image_size: usize, shots: usize, seed: u64) -> Episode {
    use rand::Rng;
    let mut r = rng::derive(seed, &[purpose::DATASET, u64::MAX]);
    let make_pair = |r: &mut rand_chacha::ChaCha8Rng| {
        let n = image_size;
        let pixels: Vec<u8> = (0..n * n * 3).map(|_| r.gen_range(0..=255)).collect();
        let mut mask = BinaryMask::filled(n, n, 0);
        for row in 0..n / 2 {
            for col in 0..n {
                mask.set(row, col, 1);
            }
        }
        (
            crate::netpbm::Image::new(n, n, pixels).unwrap(),
            mask,
        )
    };
    let query = make_pair(&mut r);
    let supports = (0..shots).map(|_| make_pair(&mut r)).collect();
    Episode {
        class_id: 0,
        query,
        supports,
        query_path: PathBuf::from("probe_query"),
        support_paths: (0..shots).map(|i| PathBuf::from(format!("probe_support{i}"))).collect(),
        seed,
    }
}

/// Finite-difference check of the full objective per parameter group.
/// `corrupt` perturbs the analytic gradient of the named group, a fixture
/// for verifying the harness actually detects broken backward rules.
pub fn run_gradcheck_with(
    config: &RunConfig,
    tolerance: f64,
    corrupt: Option<(&str, f64)>,
) -> Result<GradCheckReport> {
    if config.blocks > 2 {
        return Err(Error::Config {
            reason: format!("gradient check needs a tiny config (<= 2 blocks), got {}", config.blocks),
        });
    }
    config.validate()?;
    let mut init_rng = rng::derive(config.seed, &[purpose::INIT]);
    let mut params = FPTransParams::init(&config.model_config(), &mut init_rng)?;
    // Check at a generic parameter point: the fresh init has exact-zero
    // biases and tiny weights, which parks ReLU inputs on their kink and
    // shrinks some true gradients below finite-difference noise.
    {
        use rand::Rng;
        let mut jitter = rng::derive(config.seed, &[purpose::INIT, u64::MAX]);
        params.visit_mut("", &mut |_, p| {
            for v in &mut p.data {
                *v += jitter.gen_range(-0.1..0.1);
            }
        });
    }
    let extractor = params.vit.clone();
    let episode = probe_episode(config.image_size, config.shots, config.seed);
    let tags = EpisodeTags {
        seed: config.seed,
        phase: PHASE_GRADCHECK,
        epoch: 0,
        index: 0,
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&params, &config.model_config(), &mut tape, true)?;
    let (graph, _) =
        run_episode_graph(&mut tape, &bound, &params, &extractor, config, &episode, &tags)?;
    tape.backward(graph.total)?;
    let ids = bound.id_map();

    let mut groups = Vec::new();
    for name in params.names("") {
        let analytic: Vec<f64> = match tape.grad(ids[&name]) {
            Some(g) => {
                let mut g = g.to_vec();
                if let Some((target, delta)) = corrupt {
                    if name == target {
                        for v in &mut g {
                            *v += delta;
                        }
                    }
                }
                g
            }
            // Never touched (unsampled pool token): gradient is zero.
            None => vec![0.0; tape.data(ids[&name]).len()],
        };
        let base = {
            let mut found = None;
            params.visit("", &mut |n, p| {
                if n == name {
                    found = Some(p.data.clone());
                }
            });
            found.unwrap()
        };
        let mut eval = |x: &[f64]| -> f64 {
            let mut probe = params.clone();
            probe.visit_mut("", &mut |n, p| {
                if n == name {
                    p.data = x.to_vec();
                }
            });
            episode_loss_value(&probe, &extractor, &episode, config, &tags).unwrap()
        };
        // A smaller step than the kernel checks: near-zero ReLU inputs in
        // the freshly initialized upsampler sit within 1e-4 of the kink.
        let numeric = finite_difference_gradient(&mut eval, &base, 1e-5);
        groups.push((name, max_relative_error(&analytic, &numeric, 1e-6)));
    }
    Ok(GradCheckReport {
        groups,
        tolerance,
    })
}

pub fn run_gradcheck(config: &RunConfig, tolerance: f64) -> Result<GradCheckReport> {
    run_gradcheck_with(config, tolerance, None)
}
