//! Classification head and losses: the two-way cosine softmax over
//! foreground/background proxies, the two cross-entropy losses, the pairwise
//! feature loss, the summed objective, and inference-time mask prediction.

use crate::error::{Error, Result};
use crate::model::ProxySet;
use crate::partition::BinaryMask;
use crate::tensor::{Tape, TensorId};
use rand::Rng;

pub const COSINE_EPS: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Temperature of the cosine classifier.
    pub tau: f64,
    /// Weight of the pairwise loss in the total objective.
    pub lambda: f64,
    /// Cap on qualifying pairs per episode; 0 keeps them all.
    pub pair_subsample_limit: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda: 2e-2,
            pair_subsample_limit: 65_536,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config {
                reason: format!("temperature must be positive, got {}", self.tau),
            });
        }
        if self.lambda < 0.0 {
            return Err(Error::Config {
                reason: format!("pairwise weight must be nonnegative, got {}", self.lambda),
            });
        }
        Ok(())
    }
}

/// Foreground probability of a single feature vector under the proxy set:
/// exp(sim_f/tau) / (exp(sim_f/tau) + max_n exp(sim_n/tau)). Returns the
/// probability plus a flag marking the degenerate no-background path.
pub fn foreground_probability(
    tape: &mut Tape,
    feat: TensorId,
    proxies: &ProxySet,
    tau: f64,
) -> Result<(TensorId, bool)> {
    let c = tape.shape(feat)[0];
    let row = tape.reshape(feat, &[1, c])?;
    let probs = tape.fg_prob_map(row, proxies.fg, &proxies.bg, tau, COSINE_EPS)?;
    Ok((probs, proxies.degenerate()))
}

/// Per-position foreground probabilities of an [h, w, c] feature map, [hw].
pub fn probability_map(
    tape: &mut Tape,
    feats_spatial: TensorId,
    proxies: &ProxySet,
    tau: f64,
) -> Result<TensorId> {
    let s = tape.shape(feats_spatial).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "probability_map",
            format!("need [h,w,c] features, got {:?}", s),
        ));
    }
    let flat = tape.reshape(feats_spatial, &[s[0] * s[1], s[2]])?;
    tape.fg_prob_map(flat, proxies.fg, &proxies.bg, tau, COSINE_EPS)
}

/// Mean binary cross-entropy between the Eq.-7 probabilities and labels at
/// feature resolution; probabilities clamped before the logs.
pub fn classification_loss(
    tape: &mut Tape,
    feats_spatial: TensorId,
    proxies: &ProxySet,
    labels: &BinaryMask,
    tau: f64,
) -> Result<(TensorId, bool)> {
    let s = tape.shape(feats_spatial).to_vec();
    if labels.data.len() != s[0] * s[1] {
        return Err(Error::shape(
            "classification_loss",
            format!("labels {}x{} vs feature grid {}x{}", labels.height, labels.width, s[0], s[1]),
        ));
    }
    let probs = probability_map(tape, feats_spatial, proxies, tau)?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let hw = labels.data.len();
    let y_data: Vec<f64> = labels.data.iter().map(|&v| v as f64).collect();
    let y = tape.leaf(y_data, &[hw], false)?;
    let log_p = tape.log(p);
    let term_fg = tape.mul(y, log_p)?;
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let log_1mp = tape.log(one_minus_p);
    let neg_y = tape.scale(y, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let term_bg = tape.mul(one_minus_y, log_1mp)?;
    let sum = tape.add(term_fg, term_bg)?;
    let mean = tape.mean_all(sum);
    let loss = tape.scale(mean, -1.0);
    Ok((loss, proxies.degenerate()))
}

/// Pairs (i, j) with at least one foreground label, pooled over shots; pure
/// background pairs never qualify. Order is (shot, query position, support
/// position), which fixes both the subsampling draw and the accumulation.
fn qualifying_pairs(yq: &[u8], ys: &[Vec<u8>]) -> Vec<(u32, u32, u32)> {
    let mut pairs = Vec::new();
    for (k, ysk) in ys.iter().enumerate() {
        for (i, &qi) in yq.iter().enumerate() {
            for (j, &sj) in ysk.iter().enumerate() {
                if qi + sj >= 1 {
                    pairs.push((k as u32, i as u32, j as u32));
                }
            }
        }
    }
    pairs
}

/// Eq.-8 pairwise loss over query/support feature maps at feature
/// resolution. When the qualifying-pair count exceeds the configured limit
/// a deterministic subsample (given the episode rng) is averaged instead.
pub fn pairwise_loss(
    tape: &mut Tape,
    f_q_spatial: TensorId,
    f_s_spatial: &[TensorId],
    y_q: &BinaryMask,
    y_s: &[BinaryMask],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<TensorId> {
    let sq = tape.shape(f_q_spatial).to_vec();
    let flat_q = tape.reshape(f_q_spatial, &[sq[0] * sq[1], sq[2]])?;
    let mut flat_s = Vec::with_capacity(f_s_spatial.len());
    for &f in f_s_spatial {
        let s = tape.shape(f).to_vec();
        flat_s.push(tape.reshape(f, &[s[0] * s[1], s[2]])?);
    }
    let yq: Vec<u8> = y_q.data.clone();
    let ys: Vec<Vec<u8>> = y_s.iter().map(|m| m.data.clone()).collect();
    let mut pairs = qualifying_pairs(&yq, &ys);
    if pairs.is_empty() {
        return Err(Error::EpisodeInvalid {
            reason: "no qualifying pairs: query and supports are all background".into(),
        });
    }
    if cfg.pair_subsample_limit > 0 && pairs.len() > cfg.pair_subsample_limit {
        // Partial Fisher-Yates over the index list, then restore order so
        // the accumulation sequence stays index-sorted.
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        for i in 0..cfg.pair_subsample_limit {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut chosen: Vec<usize> = idx[..cfg.pair_subsample_limit].to_vec();
        chosen.sort_unstable();
        pairs = chosen.into_iter().map(|i| pairs[i]).collect();
    }
    tape.pairwise_bce(flat_q, &flat_s, yq, ys, cfg.tau, COSINE_EPS, pairs)
}

/// Eq. 9: total = ce + ce' + lambda * pair, with finiteness checks that
/// name the offending component.
pub fn total_loss(
    tape: &mut Tape,
    ce: TensorId,
    ce_prime: TensorId,
    pair: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    for (name, id) in [
        ("classification loss", ce),
        ("prompt classification loss", ce_prime),
        ("pairwise loss", pair),
    ] {
        if !tape.value(id).is_finite() {
            return Err(Error::NonFinite {
                what: name.to_string(),
            });
        }
    }
    let both = tape.add(ce, ce_prime)?;
    let weighted = tape.scale(pair, lambda);
    let total = tape.add(both, weighted)?;
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite {
            what: "total loss".to_string(),
        });
    }
    Ok(total)
}

/// Threshold the Eq.-7 probability map at 0.5 after bilinear upsampling to
/// image resolution; exact ties go to background.
pub fn predict_mask(
    tape: &mut Tape,
    f_q_spatial: TensorId,
    proxies: &ProxySet,
    tau: f64,
    image_size: usize,
) -> Result<BinaryMask> {
    let s = tape.shape(f_q_spatial).to_vec();
    let probs = probability_map(tape, f_q_spatial, proxies, tau)?;
    let grid = tape.reshape(probs, &[s[0], s[1], 1])?;
    let up = tape.bilinear_resize(grid, image_size, image_size)?;
    let data: Vec<u8> = tape.data(up).iter().map(|&p| u8::from(p > 0.5)).collect();
    BinaryMask::new(image_size, image_size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check::{finite_difference_gradient, max_relative_error};
    use crate::tensor::kernels::{cos_sim, sigmoid, softplus};

    fn proxy_set(tape: &mut Tape, fg: Vec<f64>, bg: Vec<Vec<f64>>) -> ProxySet {
        let c = fg.len();
        let fg = tape.leaf(fg, &[c], false).unwrap();
        let bg = bg
            .into_iter()
            .map(|v| tape.leaf(v, &[c], false).unwrap())
            .collect();
        ProxySet { fg, bg }
    }

    #[test]
    fn eq7_direct_value() {
        // sim_f = 1, sim_n = -1, tau = 1 -> e / (e + 1/e) = 0.880797...
        let mut t = Tape::new();
        let feat = t.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let proxies = proxy_set(&mut t, vec![1.0, 0.0], vec![vec![-1.0, 0.0]]);
        let (p, degenerate) = foreground_probability(&mut t, feat, &proxies, 1.0).unwrap();
        assert!(!degenerate);
        assert!((t.data(p)[0] - 0.8807970779778823).abs() <= 1e-6);
    }

    #[test]
    fn eq7_tie_gives_exactly_half() {
        let mut t = Tape::new();
        let feat = t.leaf(vec![1.0, 1.0], &[2], false).unwrap();
        // fg proxy and best bg proxy identical -> sims tie -> sigma(0) = 0.5.
        let proxies = proxy_set(&mut t, vec![2.0, 0.5], vec![vec![2.0, 0.5], vec![-1.0, 0.0]]);
        let (p, _) = foreground_probability(&mut t, feat, &proxies, 0.37).unwrap();
        assert_eq!(t.data(p)[0], 0.5);
    }

    #[test]
    fn eq7_single_background_matches_closed_form() {
        let mut t = Tape::new();
        let feat = t.leaf(vec![0.6, -0.2, 0.9], &[3], false).unwrap();
        let fg = vec![0.1, 0.4, -0.3];
        let bg = vec![-0.7, 0.2, 0.5];
        let proxies = proxy_set(&mut t, fg.clone(), vec![bg.clone()]);
        let tau = 0.25;
        let (p, _) = foreground_probability(&mut t, feat, &proxies, tau).unwrap();
        let feat_v = [0.6, -0.2, 0.9];
        let sf = cos_sim(&feat_v, &fg, COSINE_EPS);
        let sn = cos_sim(&feat_v, &bg, COSINE_EPS);
        let want = sigmoid((sf - sn) / tau);
        assert!((t.data(p)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn eq7_monotonicity() {
        let base = |sf: f64, sn: f64| -> f64 {
            let mut t = Tape::new();
            // Orthogonal axes let us dial the sims directly.
            let feat = t.leaf(vec![1.0, 0.0], &[2], false).unwrap();
            let proxies = proxy_set(
                &mut t,
                vec![sf, (1.0 - sf * sf).max(0.0).sqrt()],
                vec![vec![sn, (1.0 - sn * sn).max(0.0).sqrt()]],
            );
            let (p, _) = foreground_probability(&mut t, feat, &proxies, 0.1).unwrap();
            t.data(p)[0]
        };
        assert!(base(0.9, 0.2) > base(0.8, 0.2));
        assert!(base(0.8, 0.4) < base(0.8, 0.2));
    }

    #[test]
    fn eq7_finite_at_extreme_logits() {
        let mut t = Tape::new();
        let feat = t.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let proxies = proxy_set(&mut t, vec![1.0, 0.0], vec![vec![-1.0, 0.0]]);
        // |sim/tau| = 1e4 on both sides of the two-way softmax.
        let (p, _) = foreground_probability(&mut t, feat, &proxies, 2e-4).unwrap();
        assert!(t.data(p)[0].is_finite());
        let proxies_flipped = proxy_set(&mut t, vec![-1.0, 0.0], vec![vec![1.0, 0.0]]);
        let (p2, _) = foreground_probability(&mut t, feat, &proxies_flipped, 2e-4).unwrap();
        assert!(t.data(p2)[0].is_finite() && t.data(p2)[0] >= 0.0);
    }

    #[test]
    fn eq7_degenerate_background_uses_sigmoid() {
        let mut t = Tape::new();
        let feat = t.leaf(vec![0.3, 0.4], &[2], false).unwrap();
        let proxies = proxy_set(&mut t, vec![0.3, 0.4], vec![]);
        let (p, degenerate) = foreground_probability(&mut t, feat, &proxies, 0.5).unwrap();
        assert!(degenerate);
        assert!((t.data(p)[0] - sigmoid(1.0 / 0.5)).abs() < 1e-12);
    }

    fn spatial_from_rows(tape: &mut Tape, rows: &[Vec<f64>], h: usize, w: usize) -> TensorId {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.leaf(data, &[h, w, c], false).unwrap()
    }

    #[test]
    fn classification_loss_zero_when_prediction_matches_labels() {
        let mut t = Tape::new();
        // fg rows align with the fg proxy, bg rows with the bg proxy.
        let rows = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
        ];
        let feats = spatial_from_rows(&mut t, &rows, 2, 2);
        let proxies = proxy_set(&mut t, vec![1.0, 0.0], vec![vec![-1.0, 0.0]]);
        let labels = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let (loss, _) = classification_loss(&mut t, feats, &proxies, &labels, 0.1).unwrap();
        assert!(t.value(loss) >= 0.0 && t.value(loss) <= 1e-6, "{}", t.value(loss));
    }

    #[test]
    fn classification_loss_half_probability_is_ln2() {
        let mut t = Tape::new();
        let rows = vec![vec![0.5, 0.5]; 4];
        let feats = spatial_from_rows(&mut t, &rows, 2, 2);
        // Identical fg and bg proxies force p = 0.5 at every position.
        let proxies = proxy_set(&mut t, vec![0.7, 0.1], vec![vec![0.7, 0.1]]);
        let labels = BinaryMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let (loss, _) = classification_loss(&mut t, feats, &proxies, &labels, 0.1).unwrap();
        assert!((t.value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_gradient_matches_finite_difference() {
        let mut r = rng::derive(70, &[800]);
        let feats_data: Vec<f64> = (0..4 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fg: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bg1: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bg2: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let labels = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();

        let loss_of = |f: &[f64]| -> f64 {
            let mut t = Tape::new();
            let feats = t.leaf(f.to_vec(), &[2, 2, 3], false).unwrap();
            let proxies = proxy_set(&mut t, fg.clone(), vec![bg1.clone(), bg2.clone()]);
            let (loss, _) = classification_loss(&mut t, feats, &proxies, &labels, 0.2).unwrap();
            t.value(loss)
        };

        let mut t = Tape::new();
        let feats = t.leaf(feats_data.clone(), &[2, 2, 3], true).unwrap();
        let proxies = proxy_set(&mut t, fg.clone(), vec![bg1.clone(), bg2.clone()]);
        let (loss, _) = classification_loss(&mut t, feats, &proxies, &labels, 0.2).unwrap();
        t.backward(loss).unwrap();
        let analytic = t.grad(feats).unwrap().to_vec();
        let numeric = finite_difference_gradient(&mut |f| loss_of(f), &feats_data, 1e-4);
        assert!(max_relative_error(&analytic, &numeric, 1e-6) <= 1e-3);
    }

    #[test]
    fn pairwise_identical_foreground_maps_value() {
        // Every position foreground with the same unit feature: all pairs
        // have sim 1, label 1 -> loss = softplus(-1/tau) = -ln(sigma(10)).
        let mut t = Tape::new();
        let rows_q = vec![vec![0.6, 0.8]; 4];
        let fq = spatial_from_rows(&mut t, &rows_q, 2, 2);
        let fs = spatial_from_rows(&mut t, &rows_q, 2, 2);
        let ones = BinaryMask::new(2, 2, vec![1; 4]).unwrap();
        let cfg = LossConfig {
            tau: 0.1,
            lambda: 1.0,
            pair_subsample_limit: 0,
        };
        let loss = pairwise_loss(
            &mut t,
            fq,
            &[fs],
            &ones,
            &[ones.clone()],
            &cfg,
            &mut rng::derive(0, &[801]),
        )
        .unwrap();
        assert!((t.value(loss) - softplus(-10.0)).abs() < 1e-12);
        assert!((t.value(loss) - 4.5398e-5).abs() < 1e-8);
    }

    #[test]
    fn pairwise_orthogonal_mixed_pair_is_ln2() {
        // Single qualifying pair: query fg vs support bg, orthogonal
        // features -> BCE(sigma(0), 0) = ln 2.
        let mut t = Tape::new();
        let fq = spatial_from_rows(&mut t, &[vec![1.0, 0.0]], 1, 1);
        let fs = spatial_from_rows(&mut t, &[vec![0.0, 1.0]], 1, 1);
        let yq = BinaryMask::new(1, 1, vec![1]).unwrap();
        let ys = BinaryMask::new(1, 1, vec![0]).unwrap();
        let cfg = LossConfig {
            tau: 0.1,
            lambda: 1.0,
            pair_subsample_limit: 0,
        };
        let loss =
            pairwise_loss(&mut t, fq, &[fs], &yq, &[ys], &cfg, &mut rng::derive(0, &[802])).unwrap();
        assert!((t.value(loss) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pairwise_excludes_background_pairs_and_matches_brute_force() {
        let mut r = rng::derive(71, &[803]);
        for trial in 0..10 {
            let (h, w) = (4, 4);
            let hw = h * w;
            let c = 5;
            let fq_data: Vec<f64> = (0..hw * c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let fs_data: Vec<f64> = (0..hw * c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let yq_data: Vec<u8> = (0..hw).map(|_| r.gen_range(0..2)).collect();
            let ys_data: Vec<u8> = (0..hw).map(|_| r.gen_range(0..2)).collect();
            if yq_data.iter().all(|&v| v == 0) && ys_data.iter().all(|&v| v == 0) {
                continue;
            }
            let tau = 0.3;

            let mut t = Tape::new();
            let fq = t.leaf(fq_data.clone(), &[h, w, c], false).unwrap();
            let fs = t.leaf(fs_data.clone(), &[h, w, c], false).unwrap();
            let yq = BinaryMask::new(h, w, yq_data.clone()).unwrap();
            let ys = BinaryMask::new(h, w, ys_data.clone()).unwrap();
            let cfg = LossConfig {
                tau,
                lambda: 1.0,
                pair_subsample_limit: 0,
            };
            let loss =
                pairwise_loss(&mut t, fq, &[fs], &yq, &[ys], &cfg, &mut rng::derive(0, &[804]))
                    .unwrap();

            // Brute-force double loop.
            let mut sum = 0.0;
            let mut z = 0usize;
            for i in 0..hw {
                for j in 0..hw {
                    if yq_data[i] + ys_data[j] < 1 {
                        continue; // background-background pairs never pull
                    }
                    z += 1;
                    let a = &fq_data[i * c..(i + 1) * c];
                    let b = &fs_data[j * c..(j + 1) * c];
                    let zv = cos_sim(a, b, COSINE_EPS) / tau;
                    let y = yq_data[i] == ys_data[j];
                    sum += if y { softplus(-zv) } else { softplus(zv) };
                }
            }
            let want = sum / z as f64;
            assert!(
                (t.value(loss) - want).abs() <= 1e-10,
                "trial {trial}: {} vs {}",
                t.value(loss),
                want
            );
        }
    }

    #[test]
    fn pairwise_all_background_is_episode_invalid() {
        let mut t = Tape::new();
        let fq = spatial_from_rows(&mut t, &[vec![1.0, 0.0]], 1, 1);
        let fs = spatial_from_rows(&mut t, &[vec![0.0, 1.0]], 1, 1);
        let zeros = BinaryMask::new(1, 1, vec![0]).unwrap();
        let cfg = LossConfig::default();
        assert!(matches!(
            pairwise_loss(
                &mut t,
                fq,
                &[fs],
                &zeros,
                &[zeros.clone()],
                &cfg,
                &mut rng::derive(0, &[805])
            ),
            Err(Error::EpisodeInvalid { .. })
        ));
    }

    #[test]
    fn pairwise_subsampling_is_deterministic() {
        let mut r = rng::derive(72, &[806]);
        let hw = 16;
        let c = 3;
        let fq_data: Vec<f64> = (0..hw * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fs_data: Vec<f64> = (0..hw * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let run = |seed: u64| -> f64 {
            let mut t = Tape::new();
            let fq = t.leaf(fq_data.clone(), &[4, 4, c], false).unwrap();
            let fs = t.leaf(fs_data.clone(), &[4, 4, c], false).unwrap();
            let ones = BinaryMask::new(4, 4, vec![1; hw]).unwrap();
            let cfg = LossConfig {
                tau: 0.1,
                lambda: 1.0,
                pair_subsample_limit: 20,
            };
            let loss = pairwise_loss(
                &mut t,
                fq,
                &[fs],
                &ones,
                &[ones.clone()],
                &cfg,
                &mut rng::derive(seed, &[807]),
            )
            .unwrap();
            t.value(loss)
        };
        assert_eq!(run(5).to_bits(), run(5).to_bits());
        assert_ne!(run(5).to_bits(), run(6).to_bits());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut t = Tape::new();
        let ce = t.scalar(1.0);
        let cep = t.scalar(1.0);
        let pair = t.scalar(1.0);
        let total = total_loss(&mut t, ce, cep, pair, 2e-2).unwrap();
        assert!((t.value(total) - 2.02).abs() < 1e-15);

        let zero_lambda = total_loss(&mut t, ce, cep, pair, 0.0).unwrap();
        assert_eq!(t.value(zero_lambda), 2.0);

        // Doubling lambda doubles the pair contribution.
        let l1 = total_loss(&mut t, ce, cep, pair, 0.3).unwrap();
        let l2 = total_loss(&mut t, ce, cep, pair, 0.6).unwrap();
        assert!(((t.value(l2) - 2.0) - 2.0 * (t.value(l1) - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_rejects_non_finite_components_by_name() {
        let mut t = Tape::new();
        let ce = t.scalar(1.0);
        let bad = t.scalar(f64::NAN);
        let pair = t.scalar(0.5);
        let err = total_loss(&mut t, ce, bad, pair, 1.0).unwrap_err();
        assert!(err.to_string().contains("prompt classification"), "{err}");
    }

    #[test]
    fn predict_mask_probabilities_in_range_and_deterministic() {
        let mut r = rng::derive(73, &[808]);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fg: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bg: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut t = Tape::new();
            let feats = t.leaf(data.clone(), &[4, 4, 3], false).unwrap();
            let proxies = proxy_set(&mut t, fg.clone(), vec![bg.clone()]);
            let probs = probability_map(&mut t, feats, &proxies, 0.1).unwrap();
            assert!(t.data(probs).iter().all(|&p| p > 0.0 && p < 1.0));
            predict_mask(&mut t, feats, &proxies, 0.1, 8).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (8, 8));
    }

    #[test]
    fn predict_mask_invariant_under_common_rescaling() {
        let mut r = rng::derive(74, &[809]);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fg: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bg: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let run = |scale: f64| {
            let mut t = Tape::new();
            let scaled: Vec<f64> = data.iter().map(|&v| v * scale).collect();
            let feats = t.leaf(scaled, &[4, 4, 3], false).unwrap();
            let sfg: Vec<f64> = fg.iter().map(|&v| v * scale).collect();
            let sbg: Vec<f64> = bg.iter().map(|&v| v * scale).collect();
            let proxies = proxy_set(&mut t, sfg, vec![sbg]);
            predict_mask(&mut t, feats, &proxies, 0.1, 8).unwrap()
        };
        let base = run(1.0);
        assert_eq!(base, run(4.0)); // power of two: bitwise identical sims
        assert_eq!(base, run(3.0));
        assert_eq!(base, run(0.125));
    }
}
