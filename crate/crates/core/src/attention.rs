//! Attention architectures for grounded dialog: the tile/tanh/softmax attention
//! primitive, stacked attention (SAN), compact-bilinear attention, granular
//! image attention (GIA), granular text attention (GTA), their multimodal
//! fusion (GMA), answer scoring and the training loss.
//!
//! Every function records onto a [`Tape`] so the whole pipeline is
//! differentiable. Cell features are passed as a matrix `[M, C]` (an `N x N`
//! grid flattened row-major, or a subset of its cells).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{GmaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::sketch::SketchSpec;
use crate::tensor::Tensor;

/// Tolerance on the unit mass of an attention map.
pub const MAP_SUM_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// `N x N x C` grid of cell features.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    features: Tensor,
}

impl ImageGrid {
    pub fn new(features: Tensor) -> Result<Self> {
        let d = features.dims();
        if d.len() != 3 || d[0] != d[1] {
            return Err(GmaError::contract(
                "ImageGrid::new",
                format!("expected [N, N, C], have {d:?}"),
            ));
        }
        if !features.is_finite() {
            return Err(GmaError::Numeric("image grid contains non-finite values".into()));
        }
        Ok(ImageGrid { features })
    }

    /// Builds a grid from a cell matrix `[N*N, C]`.
    pub fn from_cells(side: usize, cells: &Tensor) -> Result<Self> {
        ImageGrid::new(cells.reshape(&[side, side, cells.cols()])?)
    }

    pub fn side(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.dims()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Row-major cell matrix `[N*N, C]`.
    pub fn cells(&self) -> Tensor {
        let n = self.side();
        self.features
            .reshape(&[n * n, self.channels()])
            .expect("grid reshape is size preserving")
    }

    /// Scales every channel of cell `i` by `mask[i]` (`mask` is `N x N`).
    pub fn masked(&self, mask: &Tensor) -> Result<ImageGrid> {
        let n = self.side();
        if mask.len() != n * n {
            return Err(GmaError::shape("ImageGrid::masked", self.features.dims(), mask.dims()));
        }
        let c = self.channels();
        let mut data = self.features.data().to_vec();
        for (cell, &m) in data.chunks_mut(c).zip(mask.data()) {
            cell.iter_mut().for_each(|v| *v *= m);
        }
        Ok(ImageGrid {
            features: Tensor::new(self.features.dims().to_vec(), data)?,
        })
    }
}

/// Non-negative weights over grid cells or sequence positions with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.data().iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(GmaError::contract("AttentionMap::new", "weights must be finite and non-negative"));
        }
        let s = weights.sum();
        if (s - 1.0).abs() > MAP_SUM_TOL {
            return Err(GmaError::contract("AttentionMap::new", format!("weights sum to {s}")));
        }
        Ok(AttentionMap { weights })
    }

    /// Places granule weights at their cell positions of an `N x N` grid.
    pub fn embed_granules(side: usize, cells: &[usize], weights: &[f64]) -> Result<Self> {
        if cells.len() != weights.len() {
            return Err(GmaError::shape("embed_granules", &[cells.len()], &[weights.len()]));
        }
        let mut grid = Tensor::zeros(&[side, side]);
        for (&c, &w) in cells.iter().zip(weights) {
            grid.data_mut()[c] = w;
        }
        AttentionMap::new(grid)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_tensor(self) -> Tensor {
        self.weights
    }
}

/// Attended context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub vector: Tensor,
}

/// Logits over candidate answers and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScores {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl AnswerScores {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probs = logits.softmax(0)?;
        Ok(AnswerScores { logits, probs })
    }
}

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

/// Parameters of the tile/tanh/softmax attention procedure:
/// `z = W_a tanh(W_I conv(g) + W_Q tile(f) + b_q) + b_a`, with `conv` a 1x1
/// channel projection.
#[derive(Debug, Clone, Copy)]
pub struct PrimitiveParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub cell_w: ParamId,
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub score_w: ParamId,
    pub score_b: ParamId,
}

impl PrimitiveParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, query_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(PrimitiveParams {
            conv_w: store.glorot(&format!("{prefix}.conv_w"), channels, channels, seed)?,
            conv_b: store.bias(&format!("{prefix}.conv_b"), channels)?,
            cell_w: store.glorot(&format!("{prefix}.w_i"), channels, hidden, seed)?,
            query_w: store.glorot(&format!("{prefix}.w_q"), query_dim, hidden, seed)?,
            query_b: store.bias(&format!("{prefix}.b_q"), hidden)?,
            score_w: store.glorot(&format!("{prefix}.w_a"), hidden, 1, seed)?,
            score_b: store.bias(&format!("{prefix}.b_a"), 1)?,
        })
    }
}

/// Parameters of the compact-bilinear style cell scorer:
/// `tanh((W_c f + b_c) ⊙ W_q q)`, signed square root, L2, then
/// `W_a2 tanh(W_a1 x + b_a1)`.
#[derive(Debug, Clone, Copy)]
pub struct JointScorerParams {
    pub cell_w: ParamId,
    pub cell_b: ParamId,
    pub query_w: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
}

impl JointScorerParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, query_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(JointScorerParams {
            cell_w: store.glorot(&format!("{prefix}.w_c"), channels, hidden, seed)?,
            cell_b: store.bias(&format!("{prefix}.b_c"), hidden)?,
            query_w: store.glorot(&format!("{prefix}.w_q"), query_dim, hidden, seed)?,
            hidden_w: store.glorot(&format!("{prefix}.w_a1"), hidden, hidden, seed)?,
            hidden_b: store.bias(&format!("{prefix}.b_a1"), hidden)?,
            out_w: store.glorot(&format!("{prefix}.w_a2"), hidden, 1, seed)?,
        })
    }
}

/// Parameters of the word scorer
/// `C^k = tanh(W_i g + b_i + W_q f^k + b_q)`, `p = softmax(W_c C^k + b_c)`.
#[derive(Debug, Clone, Copy)]
pub struct WordScorerParams {
    pub image_w: ParamId,
    pub image_b: ParamId,
    pub token_w: ParamId,
    pub token_b: ParamId,
    pub score_w: ParamId,
    pub score_b: ParamId,
}

impl WordScorerParams {
    pub fn register(store: &mut ParamStore, prefix: &str, image_dim: usize, token_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(WordScorerParams {
            image_w: store.glorot(&format!("{prefix}.w_i"), image_dim, hidden, seed)?,
            image_b: store.bias(&format!("{prefix}.b_i"), hidden)?,
            token_w: store.glorot(&format!("{prefix}.w_q"), token_dim, hidden, seed)?,
            token_b: store.bias(&format!("{prefix}.b_q"), hidden)?,
            score_w: store.glorot(&format!("{prefix}.w_c"), hidden, 1, seed)?,
            score_b: store.bias(&format!("{prefix}.b_c"), 1)?,
        })
    }
}

/// One attention layer per refinement step.
#[derive(Debug, Clone)]
pub struct SanParams {
    pub layers: Vec<PrimitiveParams>,
}

impl SanParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, iterations: usize, seed: u64) -> Result<Self> {
        let layers = (0..iterations)
            .map(|j| PrimitiveParams::register(store, &format!("{prefix}.layer{j}"), dim, dim, hidden, seed))
            .collect::<Result<_>>()?;
        Ok(SanParams { layers })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct McbAttentionParams {
    pub scorer: JointScorerParams,
    /// Projects the query into cell space for `f_out = f_att ⊙ W q`.
    pub out_w: ParamId,
}

impl McbAttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, query_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(McbAttentionParams {
            scorer: JointScorerParams::register(store, &format!("{prefix}.scorer"), channels, query_dim, hidden, seed)?,
            out_w: store.glorot(&format!("{prefix}.w_out"), query_dim, channels, seed)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GiaParams {
    pub question: JointScorerParams,
    pub history: JointScorerParams,
    /// Weighs `f'_h` against `f'_q` given the question.
    pub combine: PrimitiveParams,
}

impl GiaParams {
    /// With `shared_history` the history attention reuses the question scorer.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, query_dim: usize, hidden: usize, shared_history: bool, seed: u64) -> Result<Self> {
        let question = JointScorerParams::register(store, &format!("{prefix}.q"), channels, query_dim, hidden, seed)?;
        let history = if shared_history {
            question
        } else {
            JointScorerParams::register(store, &format!("{prefix}.h"), channels, query_dim, hidden, seed)?
        };
        let combine = PrimitiveParams::register(store, &format!("{prefix}.combine"), channels, query_dim, hidden, seed)?;
        Ok(GiaParams {
            question,
            history,
            combine,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GtaParams {
    pub question: WordScorerParams,
    pub history: WordScorerParams,
    /// Token attention queried by `[f'_h ; f'_q]`.
    pub combine: PrimitiveParams,
}

impl GtaParams {
    pub fn register(store: &mut ParamStore, prefix: &str, image_dim: usize, token_dim: usize, hidden: usize, shared_history: bool, seed: u64) -> Result<Self> {
        let question = WordScorerParams::register(store, &format!("{prefix}.q"), image_dim, token_dim, hidden, seed)?;
        let history = if shared_history {
            question
        } else {
            WordScorerParams::register(store, &format!("{prefix}.h"), image_dim, token_dim, hidden, seed)?
        };
        let combine = PrimitiveParams::register(store, &format!("{prefix}.combine"), token_dim, 2 * token_dim, hidden, seed)?;
        Ok(GtaParams {
            question,
            history,
            combine,
        })
    }
}

/// How the image-attended and text-attended vectors are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `C_A = [A_i ; A_t]`
    Concat,
    /// `C_A = MCB(A_i, A_t)`, cells scored by the attention primitive.
    Mcb,
    /// `C_A = MCB(A_i, A_t)`, cells scored by the compact-bilinear scorer.
    McbAtt,
    /// `A = A_i`; no re-attention.
    Passthrough,
}

impl std::str::FromStr for Fusion {
    type Err = GmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "cat" => Ok(Fusion::Concat),
            "mcb" => Ok(Fusion::Mcb),
            "mcb_att" => Ok(Fusion::McbAtt),
            "passthrough" => Ok(Fusion::Passthrough),
            other => Err(GmaError::Config(format!("unknown fusion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GammaScorer {
    Primitive(PrimitiveParams),
    Joint(JointScorerParams),
    None,
}

#[derive(Debug, Clone)]
pub struct GmaParams {
    pub fusion: Fusion,
    pub sketches: Option<(Arc<SketchSpec>, Arc<SketchSpec>)>,
    /// Apply signed square root and L2 normalisation to the MCB output.
    pub normalize_fused: bool,
    pub gamma: GammaScorer,
}

impl GmaParams {
    /// `a_dim` is the size of both `A_i` and `A_t`; `channels` the cell width.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        fusion: Fusion,
        channels: usize,
        a_dim: usize,
        sketch_dim: usize,
        hidden: usize,
        normalize_fused: bool,
        seed: u64,
    ) -> Result<Self> {
        let sketches = match fusion {
            Fusion::Mcb | Fusion::McbAtt => Some((
                Arc::new(SketchSpec::new(crate::rng::derive_seed(seed, &format!("{prefix}.sketch_i")), a_dim, sketch_dim)?),
                Arc::new(SketchSpec::new(crate::rng::derive_seed(seed, &format!("{prefix}.sketch_t")), a_dim, sketch_dim)?),
            )),
            _ => None,
        };
        let gamma = match fusion {
            Fusion::Concat => GammaScorer::Primitive(PrimitiveParams::register(store, &format!("{prefix}.gamma"), channels, 2 * a_dim, hidden, seed)?),
            Fusion::Mcb => GammaScorer::Primitive(PrimitiveParams::register(store, &format!("{prefix}.gamma"), channels, sketch_dim, hidden, seed)?),
            Fusion::McbAtt => GammaScorer::Joint(JointScorerParams::register(store, &format!("{prefix}.gamma"), channels, sketch_dim, hidden, seed)?),
            Fusion::Passthrough => GammaScorer::None,
        };
        Ok(GmaParams {
            fusion,
            sketches,
            normalize_fused,
            gamma,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnswerHeadParams {
    /// `[context_dim + query_dim, option_dim]`
    pub proj: ParamId,
}

impl AnswerHeadParams {
    pub fn register(store: &mut ParamStore, prefix: &str, context_dim: usize, query_dim: usize, option_dim: usize, seed: u64) -> Result<Self> {
        Ok(AnswerHeadParams {
            proj: store.glorot(&format!("{prefix}.w_p"), context_dim + query_dim, option_dim, seed)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

fn check_cells(tape: &Tape, cells: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.dims(cells) {
        [m, c] => Ok((m, c)),
        ref d => Err(GmaError::contract(op, format!("cells must be [M, C], have {d:?}"))),
    }
}

/// Attention weights `[M]` over cells for a query vector.
pub fn attention_primitive(tape: &mut Tape, cells: Var, query: Var, p: &PrimitiveParams) -> Result<Var> {
    check_cells(tape, cells, "attention_primitive")?;
    let conv_w = tape.param(p.conv_w)?;
    let conv_b = tape.param(p.conv_b)?;
    let cell_w = tape.param(p.cell_w)?;
    let query_w = tape.param(p.query_w)?;
    let query_b = tape.param(p.query_b)?;
    let score_w = tape.param(p.score_w)?;
    let score_b = tape.param(p.score_b)?;

    let conv = tape.linear(cells, conv_w, Some(conv_b))?;
    let img = tape.matmul(conv, cell_w)?;
    let q = tape.vec_mat(query, query_w)?;
    let q = tape.add(q, query_b)?;
    let pre = tape.add(img, q)?;
    let h = tape.tanh(pre)?;
    let z = tape.linear(h, score_w, Some(score_b))?;
    let z = tape.flatten(z)?;
    tape.softmax(z, 0)
}

/// Compact-bilinear style attention weights `[M]` over cells.
pub fn joint_attention(tape: &mut Tape, cells: Var, query: Var, p: &JointScorerParams) -> Result<Var> {
    check_cells(tape, cells, "joint_attention")?;
    let cell_w = tape.param(p.cell_w)?;
    let cell_b = tape.param(p.cell_b)?;
    let query_w = tape.param(p.query_w)?;
    let hidden_w = tape.param(p.hidden_w)?;
    let hidden_b = tape.param(p.hidden_b)?;
    let out_w = tape.param(p.out_w)?;

    let c = tape.linear(cells, cell_w, Some(cell_b))?;
    let q = tape.vec_mat(query, query_w)?;
    let joint = tape.mul(c, q)?;
    let joint = tape.tanh(joint)?;
    let joint = tape.signed_sqrt(joint)?;
    let joint = tape.l2_normalize(joint)?;
    let hid = tape.linear(joint, hidden_w, Some(hidden_b))?;
    let hid = tape.tanh(hid)?;
    let z = tape.matmul(hid, out_w)?;
    let z = tape.flatten(z)?;
    tape.softmax(z, 0)
}

/// Stacked attention: `f_j = sum_m alpha_j[m] cell_m + f_{j-1}`, one attention
/// layer per step. Cells and query must share a width. Returns the refined
/// query and the last attention map.
pub fn san_forward(tape: &mut Tape, cells: Var, query: Var, p: &SanParams) -> Result<(Var, Var)> {
    let (_, c) = check_cells(tape, cells, "san_forward")?;
    if p.layers.is_empty() {
        return Err(GmaError::contract("san_forward", "need at least one iteration"));
    }
    if tape.dims(query) != [c] {
        return Err(GmaError::shape("san_forward", tape.dims(cells), tape.dims(query)));
    }
    let mut f = query;
    let mut last = None;
    for layer in &p.layers {
        let alpha = attention_primitive(tape, cells, f, layer)?;
        let att = tape.weighted_sum(alpha, cells)?;
        f = tape.add(att, f)?;
        last = Some(alpha);
    }
    Ok((f, last.expect("at least one layer")))
}

/// Output of [`mcb_attention`].
#[derive(Debug, Clone, Copy)]
pub struct McbAttentionOutput {
    pub alpha: Var,
    pub attended: Var,
    pub output: Var,
}

/// `f_att = sum alpha f_cell`, `f_out = f_att ⊙ W q`.
pub fn mcb_attention(tape: &mut Tape, cells: Var, query: Var, p: &McbAttentionParams) -> Result<McbAttentionOutput> {
    let alpha = joint_attention(tape, cells, query, &p.scorer)?;
    let attended = tape.weighted_sum(alpha, cells)?;
    let out_w = tape.param(p.out_w)?;
    let wq = tape.vec_mat(query, out_w)?;
    let output = tape.mul(attended, wq)?;
    Ok(McbAttentionOutput {
        alpha,
        attended,
        output,
    })
}

/// Output of the granular attention branches.
#[derive(Debug, Clone)]
pub struct GranularOutput {
    /// Attended vector (`A_i` or `A_t`).
    pub attended: Var,
    /// Final combination weights over granules or tokens.
    pub weights: Var,
    /// Question- and history-conditioned attended features `f'_q`, `f'_h`.
    pub question_feature: Var,
    pub history_feature: Var,
}

/// Indices of the `k` most salient cells, returned in row-major order.
/// Ties in saliency prefer the earlier cell.
pub fn select_granules(saliency: &Tensor, k: usize) -> Result<Vec<usize>> {
    let m = saliency.len();
    if k == 0 || k > m {
        return Err(GmaError::contract("select_granules", format!("K = {k} outside [1, {m}]")));
    }
    if !saliency.is_finite() {
        return Err(GmaError::contract("select_granules", "saliency must be finite"));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let s = saliency.data();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Granular image attention over a given granule matrix `[K, C]` (the
/// K-free path when all cells are passed).
///
/// The attention primitive scores the pair `[f'_h ; f'_q]` against the
/// question; its two weights mix the history and question maps into the
/// final granule weights `beta`, so `A_i = sum beta g` stays a convex
/// combination of granules.
pub fn gia_attend(tape: &mut Tape, granules: Var, question: Var, history: Var, p: &GiaParams) -> Result<GranularOutput> {
    let alpha_q = joint_attention(tape, granules, question, &p.question)?;
    let alpha_h = joint_attention(tape, granules, history, &p.history)?;
    let f_q = tape.weighted_sum(alpha_q, granules)?;
    let f_h = tape.weighted_sum(alpha_h, granules)?;
    let rows = [tape.as_row(f_h)?, tape.as_row(f_q)?];
    let pair = tape.concat(&rows)?;
    let gate = attention_primitive(tape, pair, question, &p.combine)?;
    let maps = [tape.as_row(alpha_h)?, tape.as_row(alpha_q)?];
    let maps = tape.concat(&maps)?;
    let beta = tape.weighted_sum(gate, maps)?;
    let attended = tape.weighted_sum(beta, granules)?;
    Ok(GranularOutput {
        attended,
        weights: beta,
        question_feature: f_q,
        history_feature: f_h,
    })
}

/// Result of [`gia_forward`]: granule cell indices plus the branch output.
#[derive(Debug, Clone)]
pub struct GiaOutput {
    pub granules: Vec<usize>,
    pub branch: GranularOutput,
}

impl GiaOutput {
    /// Granule weights placed on the `N x N` grid, zero elsewhere.
    pub fn map(&self, tape: &Tape, side: usize) -> Result<AttentionMap> {
        AttentionMap::embed_granules(side, &self.granules, tape.value(self.branch.weights).data())
    }
}

/// Granular image attention: keeps the `k` most salient cells of
/// `cells: [N*N, C]` and attends over them with the question and history.
pub fn gia_forward(tape: &mut Tape, cells: Var, saliency: &Tensor, k: usize, question: Var, history: Var, p: &GiaParams) -> Result<GiaOutput> {
    let (m, _) = check_cells(tape, cells, "gia_forward")?;
    if saliency.len() != m {
        return Err(GmaError::shape("gia_forward", tape.dims(cells), saliency.dims()));
    }
    let granules = select_granules(saliency, k)?;
    let selected = if k == m { cells } else { tape.select_rows(cells, &granules)? };
    let branch = gia_attend(tape, selected, question, history, p)?;
    Ok(GiaOutput { granules, branch })
}

/// Word weights `[T]` for token states `[T, d]` conditioned on a pooled image
/// vector.
pub fn word_attention(tape: &mut Tape, image: Var, tokens: Var, p: &WordScorerParams) -> Result<Var> {
    check_cells(tape, tokens, "word_attention")?;
    let image_w = tape.param(p.image_w)?;
    let image_b = tape.param(p.image_b)?;
    let token_w = tape.param(p.token_w)?;
    let token_b = tape.param(p.token_b)?;
    let score_w = tape.param(p.score_w)?;
    let score_b = tape.param(p.score_b)?;

    let gi = tape.vec_mat(image, image_w)?;
    let gi = tape.add(gi, image_b)?;
    let tk = tape.linear(tokens, token_w, Some(token_b))?;
    let pre = tape.add(tk, gi)?;
    let c = tape.tanh(pre)?;
    let z = tape.linear(c, score_w, Some(score_b))?;
    let z = tape.flatten(z)?;
    tape.softmax(z, 0)
}

/// Granular text attention. Returns `A_t` and the combination weights over
/// question tokens.
pub fn gta_forward(tape: &mut Tape, image: Var, question_tokens: Var, history_tokens: Var, p: &GtaParams) -> Result<GranularOutput> {
    for (v, what) in [(question_tokens, "question"), (history_tokens, "history")] {
        match *tape.dims(v) {
            [t, _] if t >= 1 => {}
            ref d => return Err(GmaError::contract("gta_forward", format!("{what} tokens must be non-empty [T, d], have {d:?}"))),
        }
    }
    let p_q = word_attention(tape, image, question_tokens, &p.question)?;
    let p_h = word_attention(tape, image, history_tokens, &p.history)?;
    let f_q = tape.weighted_sum(p_q, question_tokens)?;
    let f_h = tape.weighted_sum(p_h, history_tokens)?;
    let query = tape.concat(&[f_h, f_q])?;
    let alpha = attention_primitive(tape, question_tokens, query, &p.combine)?;
    let attended = tape.weighted_sum(alpha, question_tokens)?;
    Ok(GranularOutput {
        attended,
        weights: alpha,
        question_feature: f_q,
        history_feature: f_h,
    })
}

/// Output of [`gma_forward`].
#[derive(Debug, Clone, Copy)]
pub struct GmaOutput {
    pub attended: Var,
    /// Cell weights `[M]`; `None` for pass-through fusion.
    pub gamma: Option<Var>,
    pub fused: Option<Var>,
}

/// Fuses `A_i` and `A_t` and re-attends over all cells.
pub fn gma_forward(tape: &mut Tape, image_att: Var, text_att: Var, cells: Var, p: &GmaParams) -> Result<GmaOutput> {
    check_cells(tape, cells, "gma_forward")?;
    let fused = match p.fusion {
        Fusion::Passthrough => {
            return Ok(GmaOutput {
                attended: image_att,
                gamma: None,
                fused: None,
            })
        }
        Fusion::Concat => tape.concat(&[image_att, text_att])?,
        Fusion::Mcb | Fusion::McbAtt => {
            let specs = p
                .sketches
                .clone()
                .ok_or_else(|| GmaError::Config("MCB fusion without sketch specs".into()))?;
            let pooled = tape.mcb_pool(image_att, text_att, specs)?;
            if p.normalize_fused {
                let s = tape.signed_sqrt(pooled)?;
                tape.l2_normalize(s)?
            } else {
                pooled
            }
        }
    };
    let gamma = match (&p.gamma, p.fusion) {
        (GammaScorer::Primitive(g), Fusion::Concat | Fusion::Mcb) => attention_primitive(tape, cells, fused, g)?,
        (GammaScorer::Joint(g), Fusion::McbAtt) => joint_attention(tape, cells, fused, g)?,
        (g, f) => return Err(GmaError::Config(format!("fusion {f:?} does not match scorer {g:?}"))),
    };
    let attended = tape.weighted_sum(gamma, cells)?;
    Ok(GmaOutput {
        attended,
        gamma: Some(gamma),
        fused: Some(fused),
    })
}

/// `logit_j = <W_p [context ; query], e_j>` for option encodings `[n, d_a]`.
pub fn score_answers(tape: &mut Tape, context: Var, options: Var, query: Var, p: &AnswerHeadParams) -> Result<Var> {
    match *tape.dims(options) {
        [n, _] if n >= 1 => {}
        ref d => return Err(GmaError::contract("score_answers", format!("need at least one option, have dims {d:?}"))),
    }
    let proj = tape.param(p.proj)?;
    let joint = tape.concat(&[context, query])?;
    let u = tape.vec_mat(joint, proj)?;
    let n = tape.value(u).len();
    let col = tape.reshape(u, &[n, 1])?;
    let logits = tape.matmul(options, col)?;
    tape.flatten(logits)
}

/// Cross-entropy of the answer logits against the ground-truth index.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, gt_index: usize) -> Result<Var> {
    tape.cross_entropy(logits, gt_index)
}
