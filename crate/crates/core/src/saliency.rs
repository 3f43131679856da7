//! Black-box importance estimation: randomized-mask image saliency and
//! exhaustive two-word masking of a question.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, ImageGrid};
use crate::error::{GmaError, Result};
use crate::rng::chacha;
use crate::tensor::Tensor;

/// Parameters of the random mask distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub side: usize,
    pub keep_prob: f64,
    pub low_res: usize,
    pub count: usize,
    pub seed: u64,
}

/// A deterministic set of soft occlusion masks over an `N x N` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub params: MaskParams,
    pub masks: Vec<Tensor>,
}

/// Low-resolution Bernoulli grids upsampled bilinearly with a random
/// sub-cell shift. With `low_res == side` the grids are used as-is.
pub fn sample_masks(side: usize, keep_prob: f64, low_res: usize, count: usize, seed: u64) -> Result<MaskSet> {
    if side == 0 || !(keep_prob > 0.0 && keep_prob < 1.0) || low_res == 0 || low_res > side || count == 0 {
        return Err(GmaError::contract(
            "sample_masks",
            format!("invalid mask parameters: N={side}, p={keep_prob}, s={low_res}, count={count}"),
        ));
    }
    let mut rng = chacha(seed);
    let cell = side.div_ceil(low_res);
    let up = (low_res + 1) * cell;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        if low_res == side {
            let data = (0..side * side).map(|_| rng.gen_bool(keep_prob) as u8 as f64).collect();
            masks.push(Tensor::new(vec![side, side], data)?);
            continue;
        }
        let coarse: Vec<f64> = (0..low_res * low_res).map(|_| rng.gen_bool(keep_prob) as u8 as f64).collect();
        let dx = rng.gen_range(0..cell);
        let dy = rng.gen_range(0..cell);
        let mut data = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                data.push(bilinear(&coarse, low_res, up, i + dx, j + dy));
            }
        }
        masks.push(Tensor::new(vec![side, side], data)?);
    }
    Ok(MaskSet {
        params: MaskParams {
            side,
            keep_prob,
            low_res,
            count,
            seed,
        },
        masks,
    })
}

/// Samples pixel `(y, x)` of an `up x up` bilinear resize of an `s x s` grid
/// (pixel-centre alignment, edge clamped).
fn bilinear(grid: &[f64], s: usize, up: usize, y: usize, x: usize) -> f64 {
    let scale = s as f64 / up as f64;
    let coord = |p: usize| ((p as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
    let (fy, fx) = (coord(y), coord(x));
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let at = |r: usize, c: usize| grid[r * s + c];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Saliency values over an `N x N` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
}

/// Score-weighted average of masks, `S = sum_i f_i M_i / (p * count)`, where
/// `score(i, M_i)` returns the confidence for the grid under mask `i`.
/// Summation follows mask order.
pub fn rise_saliency_with(masks: &MaskSet, mut score: impl FnMut(usize, &Tensor) -> Result<f64>) -> Result<SaliencyMap> {
    let n = masks.params.side;
    let mut acc = vec![0.0; n * n];
    for (i, m) in masks.masks.iter().enumerate() {
        let f = score(i, m).map_err(|e| GmaError::contract("rise_saliency", format!("scorer failed on mask {i}: {e}")))?;
        if !f.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(GmaError::contract("rise_saliency", format!("scorer returned {f} on mask {i}; expected [0, 1]")));
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += f * v;
        }
    }
    let norm = masks.params.keep_prob * masks.masks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= norm);
    Ok(SaliencyMap {
        values: Tensor::new(vec![n, n], acc)?,
    })
}

/// [`rise_saliency_with`] for a scorer that sees the masked grid.
pub fn rise_saliency(image: &ImageGrid, masks: &MaskSet, mut scorer: impl FnMut(&ImageGrid) -> Result<f64>) -> Result<SaliencyMap> {
    if image.side() != masks.params.side {
        return Err(GmaError::shape("rise_saliency", image.features().dims(), &[masks.params.side, masks.params.side]));
    }
    rise_saliency_with(masks, |_, m| scorer(&image.masked(m)?))
}

/// Best two-word masking of a question.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedQuestionResult {
    pub masked_pair: (usize, usize),
    pub gt_prob: f64,
    pub attention_map: AttentionMap,
    pub evaluations: usize,
}

/// Zeroes rows `i` and `j` of `tokens`.
pub fn mask_token_pair(tokens: &Tensor, i: usize, j: usize) -> Tensor {
    let mut out = tokens.clone();
    let d = tokens.cols();
    for r in [i, j] {
        out.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Tries every pair `i < j` of zeroed tokens and keeps the masking with the
/// highest ground-truth probability; ties keep the lexicographically smallest
/// pair.
pub fn pairwise_word_mask_search(
    tokens: &Tensor,
    mut scorer: impl FnMut(&Tensor) -> Result<(f64, AttentionMap)>,
) -> Result<MaskedQuestionResult> {
    if tokens.rank() != 2 || tokens.rows() < 2 {
        return Err(GmaError::contract("pairwise_word_mask_search", "need at least two tokens"));
    }
    let t = tokens.rows();
    let mut best: Option<MaskedQuestionResult> = None;
    let mut evaluations = 0;
    for i in 0..t {
        for j in i + 1..t {
            let (g, map) = scorer(&mask_token_pair(tokens, i, j))?;
            evaluations += 1;
            if !(0.0..=1.0).contains(&g) {
                return Err(GmaError::contract("pairwise_word_mask_search", format!("scorer returned {g} for pair ({i}, {j})")));
            }
            if best.as_ref().map_or(true, |b| g > b.gt_prob) {
                best = Some(MaskedQuestionResult {
                    masked_pair: (i, j),
                    gt_prob: g,
                    attention_map: map,
                    evaluations: 0,
                });
            }
        }
    }
    let mut best = best.expect("at least one pair");
    best.evaluations = evaluations;
    Ok(best)
}

/// Plain CSV grid, one row per line.
pub fn grid_to_csv(grid: &Tensor) -> Result<String> {
    if grid.rank() != 2 {
        return Err(GmaError::contract("grid_to_csv", format!("expected a matrix, have {:?}", grid.dims())));
    }
    let mut out = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = grid.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
