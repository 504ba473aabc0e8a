//! Episodic dataset handling: a synthetic shape-segmentation dataset with
//! disjoint base/novel classes, episode sampling, and the mIoU metric.
//!
//! Classes are shape families rendered with per-instance color jitter on
//! full-range noise backgrounds. Every file on disk is NetPBM and every
//! random choice derives from the master seed, so regeneration is exact.

use crate::error::{Error, Result};
use crate::netpbm::{self, Image};
use crate::partition::BinaryMask;
use crate::rng::{self, purpose};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const SHAPE_FAMILIES: [&str; 5] = ["disk", "square", "triangle", "ring", "cross"];

/// Whether an episode draws from the training or the testing class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub images_per_base: usize,
    pub images_per_novel: usize,
    /// Accepted foreground fraction band for rendered masks.
    pub fg_min: f64,
    pub fg_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            base_classes: 3,
            novel_classes: 2,
            images_per_base: 200,
            images_per_novel: 50,
            fg_min: 0.05,
            fg_max: 0.60,
        }
    }
}

/// One class and its image inventory (paths relative to the dataset root).
#[derive(Debug, Clone)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub images: Vec<(PathBuf, PathBuf)>,
}

/// Disjoint train/test class lists plus the dataset root directory.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub train: Vec<ClassEntry>,
    pub test: Vec<ClassEntry>,
}

impl DatasetSplit {
    pub fn classes(&self, phase: Phase) -> &[ClassEntry] {
        match phase {
            Phase::Train => &self.train,
            Phase::Test => &self.test,
        }
    }
}

/// One few-shot task: a query pair plus K support pairs of a single class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub class_id: usize,
    pub query: (Image, BinaryMask),
    pub supports: Vec<(Image, BinaryMask)>,
    pub query_path: PathBuf,
    pub support_paths: Vec<PathBuf>,
    /// Tag of the rng draw that produced this episode, recorded for replay.
    pub seed: u64,
}

impl Episode {
    /// Tab-separated manifest record: class id, query path, support paths,
    /// episode seed.
    pub fn manifest_line(&self) -> String {
        let supports: Vec<String> = self
            .support_paths
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.class_id,
            self.query_path.display(),
            supports.join(","),
            self.seed
        )
    }
}

// ── Shape rendering ─────────────────────────────────────────────────────

struct ShapeInstance {
    family: usize,
    cx: f64,
    cy: f64,
    rot: f64,
    size: f64,
    aux: f64,
}

impl ShapeInstance {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.rot.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        match self.family {
            0 => dx * dx + dy * dy <= self.size * self.size,
            1 => u.abs() <= self.size && v.abs() <= self.size,
            2 => {
                // Equilateral triangle with circumradius `size`.
                let r = self.size;
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.rot + k as f64 * std::f64::consts::TAU / 3.0;
                        (self.cx + r * a.cos(), self.cy + r * a.sin())
                    })
                    .collect();
                let sign = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                };
                let d0 = sign(verts[0], verts[1]);
                let d1 = sign(verts[1], verts[2]);
                let d2 = sign(verts[2], verts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            3 => {
                let d2 = dx * dx + dy * dy;
                let inner = self.size * self.aux;
                d2 <= self.size * self.size && d2 >= inner * inner
            }
            _ => {
                let w = self.size * self.aux;
                (u.abs() <= w && v.abs() <= self.size) || (v.abs() <= w && u.abs() <= self.size)
            }
        }
    }
}

fn render_instance(
    cfg: &DatasetConfig,
    family: usize,
    rng: &mut impl Rng,
) -> Result<(Image, BinaryMask)> {
    let n = cfg.image_size;
    let total = (n * n) as f64;
    for _attempt in 0..200 {
        let shape = ShapeInstance {
            family,
            cx: rng.gen_range(0.25..0.75) * n as f64,
            cy: rng.gen_range(0.25..0.75) * n as f64,
            rot: rng.gen_range(0.0..std::f64::consts::TAU),
            size: rng.gen_range(0.14..0.34) * n as f64,
            aux: match family {
                3 => rng.gen_range(0.45..0.65),
                4 => rng.gen_range(0.25..0.40),
                _ => 0.0,
            },
        };
        let mut mask = BinaryMask::filled(n, n, 0);
        let mut fg = 0usize;
        for r in 0..n {
            for c in 0..n {
                if shape.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    mask.set(r, c, 1);
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / total;
        if frac < cfg.fg_min || frac > cfg.fg_max {
            continue;
        }
        // Solid per-instance color with light texture jitter on noise ground.
        let color: [f64; 3] = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        let mut pixels = vec![0u8; n * n * 3];
        for r in 0..n {
            for c in 0..n {
                let i = (r * n + c) * 3;
                if mask.get(r, c) == 1 {
                    for ch in 0..3 {
                        let v: f64 = (color[ch] + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0);
                        pixels[i + ch] = (v * 255.0).round() as u8;
                    }
                } else {
                    for ch in 0..3 {
                        pixels[i + ch] = (rng.gen_range(0.0..1.0f64) * 255.0).round() as u8;
                    }
                }
            }
        }
        return Ok((Image::new(n, n, pixels)?, mask));
    }
    Err(Error::Sampling {
        reason: format!(
            "could not render family {} inside fg band [{}, {}]",
            family, cfg.fg_min, cfg.fg_max
        ),
    })
}

// ── Dataset generation and loading ──────────────────────────────────────

/// Render the full dataset under `root` and write a `split.tsv` inventory.
/// Identical (config, seed) pairs produce identical files.
pub fn generate_synthetic_dataset(
    cfg: &DatasetConfig,
    master_seed: u64,
    root: &Path,
) -> Result<DatasetSplit> {
    if cfg.base_classes < 2 || cfg.novel_classes < 1 {
        return Err(Error::Config {
            reason: "need at least 2 base and 1 novel class".into(),
        });
    }
    if cfg.base_classes + cfg.novel_classes > SHAPE_FAMILIES.len() {
        return Err(Error::Config {
            reason: format!(
                "only {} shape families available, asked for {}",
                SHAPE_FAMILIES.len(),
                cfg.base_classes + cfg.novel_classes
            ),
        });
    }
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    fs::create_dir_all(root.join("masks")).map_err(|e| Error::io(root, e))?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut manifest = String::new();
    for class_id in 0..cfg.base_classes + cfg.novel_classes {
        let is_base = class_id < cfg.base_classes;
        let count = if is_base {
            cfg.images_per_base
        } else {
            cfg.images_per_novel
        };
        let name = SHAPE_FAMILIES[class_id].to_string();
        let mut images = Vec::with_capacity(count);
        for idx in 0..count {
            let mut r = rng::derive(master_seed, &[purpose::DATASET, class_id as u64, idx as u64]);
            let (img, mask) = render_instance(cfg, class_id, &mut r)?;
            let img_rel = PathBuf::from(format!("images/{}_{:04}.ppm", name, idx));
            let mask_rel = PathBuf::from(format!("masks/{}_{:04}.pgm", name, idx));
            netpbm::save_image(&root.join(&img_rel), &img)?;
            netpbm::save_mask(&root.join(&mask_rel), &mask)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                class_id,
                name,
                if is_base { "base" } else { "novel" },
                img_rel.display(),
                mask_rel.display()
            ));
            images.push((img_rel, mask_rel));
        }
        let entry = ClassEntry {
            id: class_id,
            name,
            images,
        };
        if is_base {
            train.push(entry);
        } else {
            test.push(entry);
        }
    }
    let split_path = root.join("split.tsv");
    fs::write(&split_path, manifest).map_err(|e| Error::io(&split_path, e))?;
    Ok(DatasetSplit {
        root: root.to_path_buf(),
        train,
        test,
    })
}

/// Read a dataset inventory back from `split.tsv`.
pub fn load_split(root: &Path) -> Result<DatasetSplit> {
    let split_path = root.join("split.tsv");
    let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let mut by_class: BTreeMap<usize, (String, bool, Vec<(PathBuf, PathBuf)>)> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: split_path.display().to_string(),
                offset: lineno,
                reason: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| Error::Parse {
            path: split_path.display().to_string(),
            offset: lineno,
            reason: format!("bad class id {:?}", fields[0]),
        })?;
        let is_base = fields[2] == "base";
        let entry = by_class
            .entry(id)
            .or_insert_with(|| (fields[1].to_string(), is_base, Vec::new()));
        entry.2.push((PathBuf::from(fields[3]), PathBuf::from(fields[4])));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, (name, is_base, images)) in by_class {
        let entry = ClassEntry { id, name, images };
        if is_base {
            train.push(entry);
        } else {
            test.push(entry);
        }
    }
    Ok(DatasetSplit {
        root: root.to_path_buf(),
        train,
        test,
    })
}

// ── Episode sampling ────────────────────────────────────────────────────

/// Draw one episode: a uniform class from the phase list, then K+1 distinct
/// images of it (query first). Support masks must contain foreground.
pub fn sample_episode(
    split: &DatasetSplit,
    k: usize,
    phase: Phase,
    rng: &mut impl Rng,
    seed_tag: u64,
) -> Result<Episode> {
    let classes = split.classes(phase);
    if classes.is_empty() {
        return Err(Error::Sampling {
            reason: "phase has no classes".into(),
        });
    }
    for _attempt in 0..100 {
        let class = &classes[rng.gen_range(0..classes.len())];
        if class.images.len() < k + 1 {
            return Err(Error::Sampling {
                reason: format!(
                    "class {} has {} images, need {} for a {}-shot episode",
                    class.name,
                    class.images.len(),
                    k + 1,
                    k
                ),
            });
        }
        let picks = index_sample(rng, class.images.len(), k + 1).into_vec();
        let (qi, qm) = &class.images[picks[0]];
        let query = (
            netpbm::load_image(&split.root.join(qi))?,
            netpbm::load_mask(&split.root.join(qm))?,
        );
        let mut supports = Vec::with_capacity(k);
        let mut support_paths = Vec::with_capacity(k);
        let mut ok = true;
        for &p in &picks[1..] {
            let (si, sm) = &class.images[p];
            let mask = netpbm::load_mask(&split.root.join(sm))?;
            if mask.count_ones() == 0 {
                ok = false;
                break;
            }
            supports.push((netpbm::load_image(&split.root.join(si))?, mask));
            support_paths.push(si.clone());
        }
        if !ok {
            continue; // degenerate support, resample
        }
        return Ok(Episode {
            class_id: class.id,
            query,
            supports,
            query_path: qi.clone(),
            support_paths,
            seed: seed_tag,
        });
    }
    Err(Error::Sampling {
        reason: "no valid episode after 100 attempts".into(),
    })
}

// ── mIoU ────────────────────────────────────────────────────────────────

/// Per-class intersection/union counts, aggregated across episodes before
/// the ratio is taken.
#[derive(Debug, Default, Clone)]
pub struct IouAccumulator {
    counts: BTreeMap<usize, (u64, u64, u64)>, // tp, fp, fn
}

impl IouAccumulator {
    pub fn add(&mut self, class_id: usize, pred: &BinaryMask, truth: &BinaryMask) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::shape(
                "miou",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height, pred.width, truth.height, truth.width
                ),
            ));
        }
        let e = self.counts.entry(class_id).or_insert((0, 0, 0));
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            match (p, t) {
                (1, 1) => e.0 += 1,
                (1, 0) => e.1 += 1,
                (0, 1) => e.2 += 1,
                _ => {}
            }
        }
        Ok(())
    }

    /// IoU per class; a class whose union is zero counts as 1.0.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        self.counts
            .iter()
            .map(|(&id, &(tp, fp, fnn))| {
                let union = tp + fp + fnn;
                let iou = if union == 0 {
                    1.0
                } else {
                    tp as f64 / union as f64
                };
                (id, iou)
            })
            .collect()
    }

    /// Unweighted mean over classes seen so far.
    pub fn mean(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            return 0.0;
        }
        per.iter().map(|(_, iou)| iou).sum::<f64>() / per.len() as f64
    }
}

/// One-shot helper over parallel slices.
pub fn miou(
    predictions: &[BinaryMask],
    ground_truths: &[BinaryMask],
    class_ids: &[usize],
) -> Result<(Vec<(usize, f64)>, f64)> {
    if predictions.len() != ground_truths.len() || predictions.len() != class_ids.len() {
        return Err(Error::shape(
            "miou",
            format!(
                "{} predictions, {} truths, {} class ids",
                predictions.len(),
                ground_truths.len(),
                class_ids.len()
            ),
        ));
    }
    let mut acc = IouAccumulator::default();
    for ((p, t), &c) in predictions.iter().zip(ground_truths).zip(class_ids) {
        acc.add(c, p, t)?;
    }
    Ok((acc.per_class(), acc.mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_cfg() -> DatasetConfig {
        DatasetConfig {
            image_size: 32,
            base_classes: 2,
            novel_classes: 1,
            images_per_base: 6,
            images_per_novel: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&tiny_cfg(), 5, d1.path()).unwrap();
        generate_synthetic_dataset(&tiny_cfg(), 5, d2.path()).unwrap();
        for sub in ["split.tsv", "images/disk_0000.ppm", "masks/square_0002.pgm"] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs");
        }
    }

    #[test]
    fn foreground_fraction_within_band() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let split = generate_synthetic_dataset(&cfg, 11, dir.path()).unwrap();
        for entry in split.train.iter().chain(&split.test) {
            for (_, mask_rel) in &entry.images {
                let mask = netpbm::load_mask(&dir.path().join(mask_rel)).unwrap();
                let frac = mask.count_ones() as f64 / (32.0 * 32.0);
                assert!(frac >= cfg.fg_min && frac <= cfg.fg_max, "frac {frac}");
            }
        }
    }

    #[test]
    fn base_and_novel_classes_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic_dataset(&tiny_cfg(), 3, dir.path()).unwrap();
        let train_ids: Vec<usize> = split.train.iter().map(|c| c.id).collect();
        let test_ids: Vec<usize> = split.test.iter().map(|c| c.id).collect();
        assert!(train_ids.iter().all(|id| !test_ids.contains(id)));
    }

    #[test]
    fn split_roundtrip_through_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_synthetic_dataset(&tiny_cfg(), 9, dir.path()).unwrap();
        let loaded = load_split(dir.path()).unwrap();
        assert_eq!(written.train.len(), loaded.train.len());
        assert_eq!(written.test.len(), loaded.test.len());
        for (a, b) in written.train.iter().zip(&loaded.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.name, b.name);
            assert_eq!(a.images, b.images);
        }
    }

    #[test]
    fn one_shot_episode_has_distinct_images() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic_dataset(&tiny_cfg(), 1, dir.path()).unwrap();
        let mut r = rng::derive(1, &[100]);
        let ep = sample_episode(&split, 1, Phase::Train, &mut r, 0).unwrap();
        assert_eq!(ep.supports.len(), 1);
        assert_ne!(ep.query_path, ep.support_paths[0]);
    }

    #[test]
    fn test_phase_never_yields_train_class() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic_dataset(&tiny_cfg(), 2, dir.path()).unwrap();
        let train_ids: Vec<usize> = split.train.iter().map(|c| c.id).collect();
        let mut r = rng::derive(2, &[101]);
        for i in 0..50 {
            let ep = sample_episode(&split, 1, Phase::Test, &mut r, i).unwrap();
            assert!(!train_ids.contains(&ep.class_id));
        }
    }

    #[test]
    fn class_frequency_uniform_within_three_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic_dataset(&tiny_cfg(), 4, dir.path()).unwrap();
        let n = 10_000usize;
        let mut r = rng::derive(3, &[102]);
        let mut counts = BTreeMap::new();
        // Count class draws only; skip image loading for speed by sampling
        // the class the same way sample_episode does.
        for _ in 0..n {
            let class = &split.train[r.gen_range(0..split.train.len())];
            *counts.entry(class.id).or_insert(0usize) += 1;
        }
        let p = 1.0 / split.train.len() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (_, &c) in &counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn episode_sampling_error_when_class_too_small() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic_dataset(&tiny_cfg(), 6, dir.path()).unwrap();
        let mut r = rng::derive(4, &[103]);
        let err = sample_episode(&split, 10, Phase::Test, &mut r, 0).unwrap_err();
        assert!(matches!(err, Error::Sampling { .. }));
    }

    #[test]
    fn miou_exact_cases() {
        let a = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = BinaryMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        // identical -> 1.0
        let (_, m) = miou(&[a.clone()], &[a.clone()], &[0]).unwrap();
        assert_eq!(m, 1.0);
        // disjoint nonempty -> 0.0
        let (_, m) = miou(&[a.clone()], &[b], &[0]).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn miou_half_coverage_case() {
        // pred covers half of gt, no false positives: TP=8, FN=8, FP=0.
        let mut gt = BinaryMask::filled(4, 4, 1);
        let mut pred = BinaryMask::filled(4, 4, 0);
        for r in 0..2 {
            for c in 0..4 {
                pred.set(r, c, 1);
            }
        }
        gt.data = vec![1; 16];
        let (per, m) = miou(&[pred], &[gt], &[3]).unwrap();
        assert_eq!(per, vec![(3, 0.5)]);
        assert_eq!(m, 0.5);
    }

    #[test]
    fn miou_order_invariant() {
        let masks: Vec<BinaryMask> = (0..6)
            .map(|i| {
                let mut d = vec![0u8; 9];
                d[i % 9] = 1;
                d[(i * 2) % 9] = 1;
                BinaryMask::new(3, 3, d).unwrap()
            })
            .collect();
        let gts: Vec<BinaryMask> = (0..6)
            .map(|i| {
                let mut d = vec![0u8; 9];
                d[(i + 1) % 9] = 1;
                BinaryMask::new(3, 3, d).unwrap()
            })
            .collect();
        let ids = [0, 1, 0, 1, 0, 1];
        let (_, fwd) = miou(&masks, &gts, &ids).unwrap();
        let perm = [5usize, 3, 1, 4, 2, 0];
        let pm: Vec<BinaryMask> = perm.iter().map(|&i| masks[i].clone()).collect();
        let pg: Vec<BinaryMask> = perm.iter().map(|&i| gts[i].clone()).collect();
        let pid: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let (_, rev) = miou(&pm, &pg, &pid).unwrap();
        assert_eq!(fwd.to_bits(), rev.to_bits());
    }

    #[test]
    fn miou_zero_union_counts_as_one() {
        let empty = BinaryMask::filled(2, 2, 0);
        let (per, m) = miou(&[empty.clone()], &[empty], &[7]).unwrap();
        assert_eq!(per, vec![(7, 1.0)]);
        assert_eq!(m, 1.0);
    }
}
