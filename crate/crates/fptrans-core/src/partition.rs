//! Voronoi background partition.
//!
//! Splits a binary mask's background into local regions: collect background
//! positions, pick dispersed seeds by farthest-point sampling, then assign
//! every background pixel to its nearest seed. Distances are squared
//! Euclidean on (row, col) coordinates, and all argmax/argmin ties resolve
//! to the lowest row-major index so results are reproducible.

use crate::error::{Error, Result};
use rand::Rng;

/// A binary mask stored row-major, values restricted to {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{}x{} mask needs {} values, got {}", height, width, height * width, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::shape("binary_mask", format!("non-binary value {}", bad)));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Row-major indices of foreground (value 1) positions.
    pub fn fg_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }
}

/// Result of partitioning a mask's background into regions.
#[derive(Debug, Clone)]
pub struct PartitionResult {
    /// Seed coordinates, (row, col), one per region.
    pub seeds: Vec<(usize, usize)>,
    /// Disjoint binary masks whose union is exactly the background.
    pub masks: Vec<BinaryMask>,
}

impl PartitionResult {
    /// Number of regions actually produced (may be below the requested S).
    pub fn effective_regions(&self) -> usize {
        self.seeds.len()
    }
}

fn sq_dist(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dr = a.0 as i64 - b.0 as i64;
    let dc = a.1 as i64 - b.1 as i64;
    (dr * dr + dc * dc) as u64
}

/// All positions where the mask is 0, in row-major order.
pub fn collect_background_positions(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Farthest-point sampling: the first seed is drawn uniformly, each later
/// seed maximizes the minimum squared distance to the seeds chosen so far.
pub fn farthest_point_sample(
    positions: &[(usize, usize)],
    s: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if s == 0 || positions.len() < s {
        return Err(Error::PartitionInfeasible {
            background: positions.len(),
            requested: s,
        });
    }
    let first = rng.gen_range(0..positions.len());
    let mut seeds = vec![positions[first]];
    let mut min_dist: Vec<u64> = positions.iter().map(|&p| sq_dist(p, seeds[0])).collect();
    while seeds.len() < s {
        let mut best = 0;
        let mut best_d = 0u64;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        let chosen = positions[best];
        seeds.push(chosen);
        for (i, &p) in positions.iter().enumerate() {
            let d = sq_dist(p, chosen);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(seeds)
}

/// Nearest-seed label for every position, lowest seed index on ties.
pub fn voronoi_assign(positions: &[(usize, usize)], seeds: &[(usize, usize)]) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| {
            let mut best = 0;
            let mut best_d = u64::MAX;
            for (n, &s) in seeds.iter().enumerate() {
                let d = sq_dist(p, s);
                if d < best_d {
                    best_d = d;
                    best = n;
                }
            }
            best
        })
        .collect()
}

/// Partition the background of `mask` into at most `s` Voronoi regions.
/// With fewer background pixels than `s`, every background pixel becomes its
/// own seed; with no background at all the result has zero regions.
pub fn partition(mask: &BinaryMask, s: usize, rng: &mut impl Rng) -> Result<PartitionResult> {
    let positions = collect_background_positions(mask);
    if positions.is_empty() {
        return Ok(PartitionResult {
            seeds: Vec::new(),
            masks: Vec::new(),
        });
    }
    let effective = s.min(positions.len());
    let seeds = match farthest_point_sample(&positions, effective, rng) {
        Ok(seeds) => seeds,
        Err(Error::PartitionInfeasible { .. }) => positions.clone(),
        Err(e) => return Err(e),
    };
    let labels = voronoi_assign(&positions, &seeds);
    let mut masks = vec![BinaryMask::filled(mask.height, mask.width, 0); seeds.len()];
    for (&(r, c), &label) in positions.iter().zip(&labels) {
        masks[label].set(r, c, 1);
    }
    Ok(PartitionResult { seeds, masks })
}

/// Majority-vote downsampling: a target cell is 1 iff strictly more than half
/// of its source pixels are 1 (an exact half counts as background).
pub fn downsample_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0
        || target_w == 0
        || mask.height % target_h != 0
        || mask.width % target_w != 0
    {
        return Err(Error::shape(
            "downsample_mask",
            format!(
                "{}x{} not divisible into {}x{} cells",
                mask.height, mask.width, target_h, target_w
            ),
        ));
    }
    let (bh, bw) = (mask.height / target_h, mask.width / target_w);
    let half = bh * bw;
    let mut out = BinaryMask::filled(target_h, target_w, 0);
    for tr in 0..target_h {
        for tc in 0..target_w {
            let mut ones = 0;
            for r in 0..bh {
                for c in 0..bw {
                    ones += mask.get(tr * bh + r, tc * bw + c) as usize;
                }
            }
            if 2 * ones > half {
                out.set(tr, tc, 1);
            }
        }
    }
    Ok(out)
}
