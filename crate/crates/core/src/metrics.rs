//! Retrieval metrics over ranked candidate answers, attention-map comparison
//! (Spearman rank correlation, earth mover's distance) and the Nemenyi
//! critical-difference analysis.
//!
//! Ties are resolved with the mean-rank convention everywhere.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GmaError, Result};
use crate::tensor::Tensor;

/// Largest grid side solved exactly by [`emd_2d`].
pub const EMD_EXACT_MAX_SIDE: usize = 8;
pub const SINKHORN_REG: f64 = 1e-2;
pub const SINKHORN_TOL: f64 = 1e-7;
const SINKHORN_MAX_ITERS: usize = 100_000;

/// Candidate scores of one dialog round with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRound {
    pub scores: Vec<f64>,
    pub gt_index: usize,
    pub relevance: Vec<f64>,
}

impl RankedRound {
    pub fn new(scores: Vec<f64>, gt_index: usize, relevance: Vec<f64>) -> Result<Self> {
        let r = RankedRound {
            scores,
            gt_index,
            relevance,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if n == 0 {
            return Err(GmaError::contract("RankedRound", "no candidates"));
        }
        if self.relevance.len() != n {
            return Err(GmaError::shape("RankedRound", &[n], &[self.relevance.len()]));
        }
        if self.gt_index >= n {
            return Err(GmaError::contract("RankedRound", format!("gt index {} out of {n}", self.gt_index)));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(GmaError::contract("RankedRound", "scores must be finite"));
        }
        if self.relevance.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(GmaError::contract("RankedRound", "relevance must lie in [0, 1]"));
        }
        if self.relevance[self.gt_index] <= 0.0 {
            return Err(GmaError::contract("RankedRound", "ground truth must have positive relevance"));
        }
        Ok(())
    }

    /// Rank of the ground truth, 1 = best; tied candidates share the mean of
    /// their positions.
    pub fn gt_rank(&self) -> f64 {
        let g = self.scores[self.gt_index];
        let greater = self.scores.iter().filter(|&&s| s > g).count();
        let tied = self.scores.iter().filter(|&&s| s == g).count();
        greater as f64 + (tied as f64 + 1.0) / 2.0
    }

    /// Normalised discounted cumulative gain over the full list. Tied
    /// candidates receive the average discount of the positions they span.
    pub fn ndcg(&self) -> f64 {
        let n = self.scores.len();
        let disc = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut dcg = 0.0;
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && self.scores[order[end]] == self.scores[order[start]] {
                end += 1;
            }
            let avg: f64 = (start + 1..=end).map(disc).sum::<f64>() / (end - start) as f64;
            dcg += order[start..end].iter().map(|&i| self.relevance[i]).sum::<f64>() * avg;
            start = end;
        }
        let mut ideal = self.relevance.clone();
        ideal.sort_by(|a, b| b.total_cmp(a));
        let idcg: f64 = ideal.iter().enumerate().map(|(i, r)| r * disc(i + 1)).sum();
        dcg / idcg
    }
}

/// Table-style retrieval summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    #[serde(rename = "R@1")]
    pub r_at_1: f64,
    #[serde(rename = "R@5")]
    pub r_at_5: f64,
    #[serde(rename = "R@10")]
    pub r_at_10: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
    #[serde(rename = "Mean")]
    pub mean_rank: f64,
    #[serde(rename = "NDCG")]
    pub ndcg: f64,
}

impl MetricVector {
    pub fn r_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r_at_1),
            5 => Some(self.r_at_5),
            10 => Some(self.r_at_10),
            _ => None,
        }
    }
}

pub fn retrieval_metrics(rounds: &[RankedRound]) -> Result<MetricVector> {
    if rounds.is_empty() {
        return Err(GmaError::contract("retrieval_metrics", "no rounds"));
    }
    let n = rounds.len() as f64;
    let mut m = MetricVector {
        r_at_1: 0.0,
        r_at_5: 0.0,
        r_at_10: 0.0,
        mrr: 0.0,
        mean_rank: 0.0,
        ndcg: 0.0,
    };
    for r in rounds {
        r.validate()?;
        let rank = r.gt_rank();
        m.r_at_1 += (rank <= 1.0) as u8 as f64;
        m.r_at_5 += (rank <= 5.0) as u8 as f64;
        m.r_at_10 += (rank <= 10.0) as u8 as f64;
        m.mrr += 1.0 / rank;
        m.mean_rank += rank;
        m.ndcg += r.ndcg();
    }
    m.r_at_1 /= n;
    m.r_at_5 /= n;
    m.r_at_10 /= n;
    m.mrr /= n;
    m.mean_rank /= n;
    m.ndcg /= n;
    Ok(m)
}

/// Mean ranks (1-based, ascending values get low ranks).
pub fn mean_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
}

/// Spearman rank correlation of two equally shaped maps with a two-sided
/// Student-t p-value.
pub fn spearman_rc(a: &Tensor, b: &Tensor) -> Result<Spearman> {
    if a.dims() != b.dims() {
        return Err(GmaError::shape("spearman_rc", a.dims(), b.dims()));
    }
    let n = a.len();
    if n < 3 {
        return Err(GmaError::contract("spearman_rc", "need at least 3 cells"));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(GmaError::contract("spearman_rc", "maps must be finite"));
    }
    let ra = mean_ranks(a.data());
    let rb = mean_ranks(b.data());
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(GmaError::contract("spearman_rc", "correlation undefined for a constant map"));
    }
    let rho = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| GmaError::Numeric(e.to_string()))?;
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EmdMethod {
    Exact,
    Sinkhorn { iterations: usize, converged: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emd {
    pub distance: f64,
    #[serde(flatten)]
    pub method: EmdMethod,
}

/// Attention-map comparison summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapComparison {
    pub rank_correlation: f64,
    pub p_value: f64,
    pub emd: f64,
    pub emd_exact: bool,
}

pub fn compare_maps(a: &Tensor, b: &Tensor) -> Result<MapComparison> {
    let s = spearman_rc(a, b)?;
    let e = emd_2d(a, b)?;
    Ok(MapComparison {
        rank_correlation: s.rho,
        p_value: s.p_value,
        emd: e.distance,
        emd_exact: matches!(e.method, EmdMethod::Exact),
    })
}

fn normalized_mass(t: &Tensor) -> Result<Vec<f64>> {
    if t.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(GmaError::contract("emd_2d", "maps must be finite and non-negative"));
    }
    let s = t.sum();
    if s <= 0.0 {
        return Err(GmaError::contract("emd_2d", "map has zero mass"));
    }
    Ok(t.data().iter().map(|v| v / s).collect())
}

/// Earth mover's distance between two `N x N` maps under the Euclidean
/// ground metric on cell coordinates. Exact for `N <= 8`, entropic
/// (log-domain Sinkhorn) above that.
pub fn emd_2d(a: &Tensor, b: &Tensor) -> Result<Emd> {
    if a.dims() != b.dims() || a.rank() != 2 || a.dims()[0] != a.dims()[1] {
        return Err(GmaError::shape("emd_2d", a.dims(), b.dims()));
    }
    let n = a.dims()[0];
    let pa = normalized_mass(a)?;
    let pb = normalized_mass(b)?;
    let coord = |i: usize| ((i / n) as f64, (i % n) as f64);
    let dist = |i: usize, j: usize| {
        let (ai, aj) = coord(i);
        let (bi, bj) = coord(j);
        ((ai - bi).powi(2) + (aj - bj).powi(2)).sqrt()
    };
    if n <= EMD_EXACT_MAX_SIDE {
        Ok(Emd {
            distance: transport_exact(&pa, &pb, dist),
            method: EmdMethod::Exact,
        })
    } else {
        let (distance, iterations, converged) = transport_sinkhorn(&pa, &pb, dist);
        Ok(Emd {
            distance,
            method: EmdMethod::Sinkhorn { iterations, converged },
        })
    }
}

/// Min-cost transportation by successive shortest paths with potentials.
/// Supplies `a` and demands `b` each sum to one.
pub fn transport_exact(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    const MASS_EPS: f64 = 1e-15;
    let src: Vec<usize> = (0..a.len()).filter(|&i| a[i] > MASS_EPS).collect();
    let dst: Vec<usize> = (0..b.len()).filter(|&j| b[j] > MASS_EPS).collect();
    let (ns, nd) = (src.len(), dst.len());
    let c: Vec<f64> = src.iter().flat_map(|&i| dst.iter().map(move |&j| (i, j))).map(|(i, j)| cost(i, j)).collect();
    let mut supply: Vec<f64> = src.iter().map(|&i| a[i]).collect();
    let mut demand: Vec<f64> = dst.iter().map(|&j| b[j]).collect();
    let mut flow = vec![0.0; ns * nd];
    // Nodes: sources 0..ns, sinks ns..ns+nd.
    let mut pot = vec![0.0; ns + nd];
    let total = ns + nd;

    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= 1e-13 || demand.iter().all(|&d| d <= MASS_EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; total];
        let mut prev = vec![usize::MAX; total];
        let mut heap = BinaryHeap::new();
        for s in 0..ns {
            if supply[s] > MASS_EPS {
                dist[s] = 0.0;
                heap.push(Reverse((Ordered(0.0), s)));
            }
        }
        while let Some(Reverse((Ordered(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            let mut relax = |v: usize, w: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let reduced = (w + pot[u] - pot[v]).max(0.0);
                let nd_ = d + reduced;
                if nd_ < dist[v] {
                    dist[v] = nd_;
                    prev[v] = u;
                    heap.push(Reverse((Ordered(nd_), v)));
                }
            };
            if u < ns {
                for t in 0..nd {
                    relax(ns + t, c[u * nd + t], &mut dist, &mut prev);
                }
            } else {
                let t = u - ns;
                for s in 0..ns {
                    if flow[s * nd + t] > MASS_EPS {
                        relax(s, -c[s * nd + t], &mut dist, &mut prev);
                    }
                }
            }
        }
        let sink = (0..nd)
            .filter(|&t| demand[t] > MASS_EPS && dist[ns + t].is_finite())
            .min_by(|&x, &y| dist[ns + x].total_cmp(&dist[ns + y]));
        let Some(t) = sink else { break };
        for v in 0..total {
            if dist[v].is_finite() {
                pot[v] += dist[v];
            }
        }
        // Bottleneck along the path.
        let mut amount = demand[t];
        let mut v = ns + t;
        let mut origin = v;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= ns {
                amount = amount.min(flow[v * nd + (u - ns)]);
            }
            origin = u;
            v = u;
        }
        amount = amount.min(supply[origin]);
        let mut v = ns + t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < ns {
                flow[u * nd + (v - ns)] += amount;
            } else {
                flow[v * nd + (u - ns)] -= amount;
            }
            v = u;
        }
        supply[origin] -= amount;
        demand[t] -= amount;
    }
    flow.iter().zip(&c).map(|(f, c)| f * c).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Ordered(f64);

impl Eq for Ordered {}

impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport in the log domain; returns the transport cost
/// of the regularised plan, the iteration count and whether the marginal
/// error fell below [`SINKHORN_TOL`].
pub fn transport_sinkhorn(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> (f64, usize, bool) {
    let (n, m) = (a.len(), b.len());
    let c: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| cost(i, j)).collect();
    let la: Vec<f64> = a.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    let lb: Vec<f64> = b.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    let eps = SINKHORN_REG;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iters = 0;
    while iters < SINKHORN_MAX_ITERS {
        iters += 1;
        for i in 0..n {
            f[i] = if la[i].is_finite() {
                eps * la[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - c[i * m + j]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..m {
            g[j] = if lb[j].is_finite() {
                eps * lb[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - c[i * m + j]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
        // After the g update the column marginals are exact; check rows.
        let err: f64 = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| ((f[i] + g[j] - c[i * m + j]) / eps).exp()).sum();
                (row - a[i]).abs()
            })
            .sum();
        if err < SINKHORN_TOL {
            converged = true;
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - c[i * m + j]) / eps).exp();
            if p.is_finite() {
                total += p * c[i * m + j];
            }
        }
    }
    (total, iters, converged)
}

/// Studentized-range quantiles divided by `sqrt(2)` for `k = 2..=20` models.
const Q_005: [f64; 19] = [
    1.959963985, 2.343700586, 2.569031773, 2.727774371, 2.849705420, 2.948320018, 3.030878450, 3.101730341,
    3.163683577, 3.218653607, 3.268003924, 3.312738593, 3.353617752, 3.391230284, 3.426041379, 3.458424707,
    3.488684799, 3.517073009, 3.543799132,
];
const Q_010: [f64; 19] = [
    1.644853627, 2.052292730, 2.291341497, 2.459515764, 2.588520602, 2.692732101, 2.779883608, 2.854606431,
    2.919888840, 2.977768251, 3.029694183, 3.076733468, 3.119693333, 3.159198819, 3.195743433, 3.229723401,
    3.261461490, 3.291223987, 3.319233060,
];

/// Critical value `q_alpha(k)` used by the Nemenyi test.
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if alpha == 0.05 {
        &Q_005
    } else if alpha == 0.10 {
        &Q_010
    } else {
        return Err(GmaError::contract("nemenyi_cd", format!("unsupported alpha {alpha}; use 0.05 or 0.10")));
    };
    if !(2..=20).contains(&k) {
        return Err(GmaError::contract("nemenyi_cd", format!("unsupported model count {k}; need 2..=20")));
    }
    Ok(table[k - 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemenyiResult {
    pub alpha: f64,
    pub models: usize,
    pub datasets: usize,
    pub q: f64,
    pub avg_ranks: Vec<f64>,
    pub cd: f64,
    /// Model index pairs `(i, j)`, `i < j`, whose average ranks differ by more than `cd`.
    pub significant: Vec<(usize, usize)>,
}

impl NemenyiResult {
    /// CSV with one row per model: index, name, average rank.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = format!("model,name,avg_rank,cd\n");
        for (i, r) in self.avg_ranks.iter().enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("");
            out.push_str(&format!("{i},{name},{r},{}\n", self.cd));
        }
        out
    }
}

/// Converts per-dataset scores (`[models][datasets]`, higher is better) into
/// mean ranks (1 = best).
pub fn ranks_from_scores(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = scores.len();
    let n = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n) {
        return Err(GmaError::contract("ranks_from_scores", "ragged score matrix"));
    }
    let mut ranks = vec![vec![0.0; n]; k];
    for d in 0..n {
        let col: Vec<f64> = scores.iter().map(|r| -r[d]).collect();
        for (m, r) in mean_ranks(&col).into_iter().enumerate() {
            ranks[m][d] = r;
        }
    }
    Ok(ranks)
}

/// Nemenyi post-hoc analysis of a `[models][datasets]` rank matrix.
pub fn nemenyi_cd(ranks: &[Vec<f64>], alpha: f64) -> Result<NemenyiResult> {
    let k = ranks.len();
    if k < 2 {
        return Err(GmaError::contract("nemenyi_cd", "need at least 2 models"));
    }
    let n = ranks[0].len();
    if n < 2 || ranks.iter().any(|r| r.len() != n) {
        return Err(GmaError::contract("nemenyi_cd", "need at least 2 datasets with one rank per model"));
    }
    let expected = (k * (k + 1)) as f64 / 2.0;
    for d in 0..n {
        let col_sum: f64 = ranks.iter().map(|r| r[d]).sum();
        let in_range = ranks.iter().all(|r| r[d] >= 1.0 && r[d] <= k as f64);
        if !in_range || (col_sum - expected).abs() > 1e-9 {
            return Err(GmaError::contract("nemenyi_cd", format!("dataset {d} does not hold a ranking of {k} models")));
        }
    }
    let q = nemenyi_q(k, alpha)?;
    let cd = q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt();
    let avg_ranks: Vec<f64> = ranks.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let mut significant = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if (avg_ranks[i] - avg_ranks[j]).abs() > cd {
                significant.push((i, j));
            }
        }
    }
    Ok(NemenyiResult {
        alpha,
        models: k,
        datasets: n,
        q,
        avg_ranks,
        cd,
        significant,
    })
}
