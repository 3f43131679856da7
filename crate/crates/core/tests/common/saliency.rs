//! Saliency fixtures: linear scorers with known weight grids and an
//! analytic word-importance scorer.

use gma_core::attention::AttentionMap;
use gma_core::rng::SplitMix64;
use gma_core::saliency::{pairwise_word_mask_search, rise_saliency_with, sample_masks};
use gma_core::Tensor;

use super::oracles::{counting_ranks, pearson};

/// Average ranks by counting, then Pearson.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    pearson(&counting_ranks(a), &counting_ranks(b))
}

/// Distinct positive weights `1..=49` in shuffled cell order.
pub fn shuffled_weights(seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut w: Vec<f64> = (1..=49).map(f64::from).collect();
    for i in (1..w.len()).rev() {
        w.swap(i, rng.below(i as u64 + 1) as usize);
    }
    w
}

/// Distinct positive weights rising smoothly across the grid,
/// `exp(0.6 row + 0.35 col)`.
pub fn gradient_weights() -> Vec<f64> {
    (0..49).map(|k| (0.6 * (k / 7) as f64 + 0.35 * (k % 7) as f64).exp()).collect()
}

pub fn linear_rise_rho(w: &[f64], low_res: usize, count: usize, seed: u64) -> f64 {
    let total: f64 = w.iter().sum();
    let masks = sample_masks(7, 0.5, low_res, count, seed).unwrap();
    let s = rise_saliency_with(&masks, |_, m| Ok(m.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total)).unwrap();
    rank_correlation(s.values.data(), w)
}

/// Mean rank correlation of the smooth weight field over mask seeds `1..=seeds`.
pub fn mean_recovery(low_res: usize, count: usize, seeds: u64) -> (f64, Vec<f64>) {
    let w = gradient_weights();
    let rhos: Vec<f64> = (1..=seeds).map(|seed| linear_rise_rho(&w, low_res, count, seed)).collect();
    (rhos.iter().sum::<f64>() / rhos.len() as f64, rhos)
}

pub fn unit_map() -> AttentionMap {
    AttentionMap::new(Tensor::vector(vec![1.0])).unwrap()
}

/// Runs the pair search for `T = 2..=9` against `g = sum of importances of
/// the zeroed tokens / total`, whose optimum masks the two most important
/// tokens. Errors name the first violation.
pub fn check_pairwise_search(seed: u64) -> Result<(), String> {
    let mut rng = SplitMix64::new(seed);
    for t in 2..=9 {
        let importance: Vec<f64> = (0..t).map(|_| 0.1 + rng.unit()).collect();
        let total: f64 = importance.iter().sum();
        let tokens = Tensor::new(vec![t, 3], (0..3 * t).map(|i| 1.0 + i as f64).collect()).unwrap();
        let mut calls = 0;
        let result = pairwise_word_mask_search(&tokens, |masked| {
            calls += 1;
            let g: f64 = (0..t).filter(|&r| masked.row(r).iter().all(|&v| v == 0.0)).map(|r| importance[r]).sum();
            Ok((g / total, unit_map()))
        })
        .map_err(|e| e.to_string())?;
        if calls != t * (t - 1) / 2 || result.evaluations != calls {
            return Err(format!("T = {t}: {calls} scorer calls, {} reported", result.evaluations));
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
        let expected = (order[0].min(order[1]), order[0].max(order[1]));
        if result.masked_pair != expected {
            return Err(format!("T = {t}: pair {:?}, optimum {expected:?}", result.masked_pair));
        }
        if (result.gt_prob - (importance[order[0]] + importance[order[1]]) / total).abs() >= 1e-15 {
            return Err(format!("T = {t}: probability {}", result.gt_prob));
        }
    }
    Ok(())
}
