//! Independent oracles for the retrieval, correlation, transport and
//! critical-difference metrics.

use gma_core::metrics::RankedRound;
use gma_core::rng::SplitMix64;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub fn random_round(rng: &mut SplitMix64, n: usize) -> RankedRound {
    // Few distinct levels so ties are common.
    let levels = 1 + rng.below(6) as usize;
    let scores: Vec<f64> = (0..n).map(|_| rng.below(levels as u64) as f64 * 0.5 - 1.0).collect();
    let gt = rng.below(n as u64) as usize;
    let mut relevance: Vec<f64> = (0..n).map(|_| if rng.unit() < 0.3 { rng.unit() } else { 0.0 }).collect();
    relevance[gt] = 1.0;
    RankedRound::new(scores, gt, relevance).unwrap()
}

/// Sorts descending, then reads the ground truth's tie group off the sorted
/// list.
pub fn oracle_rank(r: &RankedRound) -> f64 {
    let mut sorted = r.scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let g = r.scores[r.gt_index];
    let first = sorted.iter().position(|&s| s == g).unwrap() + 1;
    let last = sorted.iter().rposition(|&s| s == g).unwrap() + 1;
    (first + last) as f64 / 2.0
}

/// Each candidate's gain is discounted by the mean discount of the positions
/// its tie group occupies; the ideal ordering sorts gains.
pub fn oracle_ndcg(r: &RankedRound) -> f64 {
    let disc = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
    let dcg: f64 = (0..r.scores.len())
        .map(|i| {
            let s = r.scores[i];
            let above = r.scores.iter().filter(|&&x| x > s).count();
            let tied = r.scores.iter().filter(|&&x| x == s).count();
            let avg: f64 = (above + 1..=above + tied).map(disc).sum::<f64>() / tied as f64;
            r.relevance[i] * avg
        })
        .sum();
    let mut ideal = r.relevance.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(i, g)| g * disc(i + 1)).sum();
    dcg / idcg
}


pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn counting_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}


pub fn grid_distance(n: usize) -> impl Fn(usize, usize) -> f64 {
    move |i, j| {
        let (ai, aj) = ((i / n) as f64, (i % n) as f64);
        let (bi, bj) = ((j / n) as f64, (j % n) as f64);
        ((ai - bi).powi(2) + (aj - bj).powi(2)).sqrt()
    }
}

pub fn random_mass(rng: &mut SplitMix64, n: usize, sparsity: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| if rng.unit() < sparsity { 0.0 } else { rng.unit() }).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.below(n as u64) as usize] = 1.0;
    }
    v
}


/// Upper quantile of the range of `k` standard normals, by Simpson quadrature
/// of `k * int phi(z) (Phi(z) - Phi(z - q))^(k-1) dz` and bisection.
pub fn range_quantile(k: usize, alpha: f64) -> f64 {
    let norm = Normal::standard();
    let cdf = |q: f64| {
        let (lo, hi, steps) = (-9.0, 9.0, 4000);
        let h = (hi - lo) / steps as f64;
        let f = |z: f64| norm.pdf(z) * (norm.cdf(z) - norm.cdf(z - q)).powi(k as i32 - 1);
        let mut s = f(lo) + f(hi);
        for i in 1..steps {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        k as f64 * s * h / 3.0
    };
    let (mut lo, mut hi) = (0.0, 12.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
