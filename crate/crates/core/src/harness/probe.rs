//! The saliency probe: a trained stacked-attention model queried as a black
//! box to produce per-round image saliency and the best two-word masking of
//! each question.
//!
//! Masking scales projected cells (`m_i * x_i W + b`), so every linear map up
//! to the attention nonlinearity can be precomputed once per image. The fast
//! evaluator below exploits that; it agrees with the tape forward to rounding.

use std::collections::HashMap;

use crate::attention::AttentionMap;
use crate::autodiff::Tape;
use crate::encoder::recurrent_encode;
use crate::error::{GmaError, Result};
use crate::saliency::{pairwise_word_mask_search, rise_saliency_with, MaskSet};
use crate::tensor::Tensor;

use super::config::{RunConfig, SaliencySource};
use super::dataset::{DialogInstance, DialogRound};
use super::model::{Body, Model, RoundAux};

/// Which option's probability drives the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeTarget {
    /// The annotated answer (training data).
    GroundTruth,
    /// The probe's own top-ranked option on the unmasked input.
    Predicted,
}

struct Layer {
    /// `conv_w * cell_w`, `[d, h]`.
    fused: Tensor,
    /// `(image_b * conv_w + conv_b) * cell_w`, `[h]`.
    offset: Vec<f64>,
    query_w: Tensor,
    query_b: Vec<f64>,
    score_w: Vec<f64>,
    score_b: f64,
}

impl Layer {
    fn base(&self, f: &[f64]) -> Vec<f64> {
        let mut q = self.query_b.clone();
        for (k, &fk) in f.iter().enumerate() {
            for (qj, wj) in q.iter_mut().zip(self.query_w.row(k)) {
                *qj += fk * wj;
            }
        }
        self.offset.iter().zip(&q).map(|(o, q)| o + q).collect()
    }

    fn cell_score(&self, terms: &[f64], s: f64, base: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..base.len() {
            acc += tanh_exp(s * terms[j] + base[j]) * self.score_w[j];
        }
        acc + self.score_b
    }
}

/// The distinct values each cell takes across a mask set, and each mask as
/// indices into them.
pub struct MaskLevels {
    levels: Vec<Vec<f64>>,
    index: Vec<Vec<u32>>,
}

impl MaskLevels {
    pub fn new(masks: &MaskSet) -> MaskLevels {
        let cells = masks.masks.first().map_or(0, |m| m.len());
        let mut levels: Vec<Vec<f64>> = vec![Vec::new(); cells];
        for m in &masks.masks {
            for (ls, &v) in levels.iter_mut().zip(m.data()) {
                ls.push(v);
            }
        }
        for ls in levels.iter_mut() {
            ls.sort_by(f64::total_cmp);
            ls.dedup_by(|a, b| a.to_bits() == b.to_bits());
        }
        let index = masks
            .masks
            .iter()
            .map(|m| {
                m.data()
                    .iter()
                    .zip(&levels)
                    .map(|(v, ls)| ls.binary_search_by(|x| x.total_cmp(v)).expect("level present") as u32)
                    .collect()
            })
            .collect();
        MaskLevels { levels, index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Mask `k` as cell values.
    pub fn mask(&self, k: usize) -> Vec<f64> {
        self.index[k].iter().zip(&self.levels).map(|(&l, ls)| ls[l as usize]).collect()
    }
}

/// Parameter-derived constants of a stacked-attention probe.
pub struct FastSan {
    layers: Vec<Layer>,
    image_w: Tensor,
    image_b: Vec<f64>,
    head: Tensor,
}

/// Image-specific precomputation.
pub struct ImageCache {
    /// `x_i W`, `[M, d]`.
    proj: Tensor,
    /// Per layer `proj * fused`, `[M, h]`.
    cell_terms: Vec<Tensor>,
}

/// Question and options of one round as seen by the probe.
pub struct RoundInputs {
    pub question: Vec<f64>,
    /// `[n, d]`
    pub options: Tensor,
}

impl FastSan {
    pub fn new(model: &Model) -> Result<FastSan> {
        let Body::San(sp) = &model.params.body else {
            return Err(GmaError::contract("FastSan::new", "probe must be a stacked-attention model"));
        };
        let st = &model.store;
        let v = |id| st.get(id).value.clone();
        let image_b = v(model.params.image_b).into_data();
        let mut layers = Vec::with_capacity(sp.layers.len());
        for l in &sp.layers {
            let conv_w = v(l.conv_w);
            let cell_w = v(l.cell_w);
            let b = Tensor::vector(image_b.clone()).reshape(&[1, image_b.len()])?;
            let offset = b.matmul(&conv_w)?.add(&v(l.conv_b))?.matmul(&cell_w)?.into_data();
            layers.push(Layer {
                fused: conv_w.matmul(&cell_w)?,
                offset,
                query_w: v(l.query_w),
                query_b: v(l.query_b).into_data(),
                score_w: v(l.score_w).into_data(),
                score_b: v(l.score_b).item()?,
            });
        }
        Ok(FastSan {
            layers,
            image_w: v(model.params.image_w),
            image_b,
            head: v(model.params.head.proj),
        })
    }

    pub fn image(&self, cells: &Tensor) -> Result<ImageCache> {
        let proj = cells.matmul(&self.image_w)?;
        let cell_terms = self.layers.iter().map(|l| proj.matmul(&l.fused)).collect::<Result<_>>()?;
        Ok(ImageCache { proj, cell_terms })
    }

    /// Option probabilities and the last attention map with cell `i` scaled
    /// by `mask[i]` (`None` = unmasked).
    pub fn forward(&self, img: &ImageCache, round: &RoundInputs, mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        self.run(img, round, mask, None)
    }

    /// First-layer cell scores for every level each cell takes across a
    /// mask set. The first layer's query is mask-independent, so these are
    /// shared by all masks of a round.
    pub fn first_layer_scores(&self, img: &ImageCache, round: &RoundInputs, levels: &MaskLevels) -> Vec<Vec<f64>> {
        let layer = &self.layers[0];
        let base = layer.base(&round.question);
        levels
            .levels
            .iter()
            .enumerate()
            .map(|(i, ls)| ls.iter().map(|&s| layer.cell_score(img.cell_terms[0].row(i), s, &base)).collect())
            .collect()
    }

    /// [`FastSan::forward`] under mask `k` of `levels`, reusing
    /// `first_layer_scores`. Bit-identical to the direct call.
    pub fn forward_masked(
        &self,
        img: &ImageCache,
        round: &RoundInputs,
        levels: &MaskLevels,
        first: &[Vec<f64>],
        k: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let z0: Vec<f64> = levels.index[k].iter().zip(first).map(|(&l, zs)| zs[l as usize]).collect();
        self.run(img, round, Some(&levels.mask(k)), Some(&z0))
    }

    fn run(&self, img: &ImageCache, round: &RoundInputs, mask: Option<&[f64]>, first: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let m_cells = img.proj.rows();
        let d = img.proj.cols();
        let scale = |i: usize| mask.map_or(1.0, |m| m[i]);
        let mut f = round.question.clone();
        let mut alpha = vec![0.0; m_cells];
        let mut z = vec![0.0; m_cells];
        for (l, (layer, terms)) in self.layers.iter().zip(&img.cell_terms).enumerate() {
            match first {
                Some(z0) if l == 0 => z.copy_from_slice(z0),
                _ => {
                    let base = layer.base(&f);
                    for i in 0..m_cells {
                        z[i] = layer.cell_score(terms.row(i), scale(i), &base);
                    }
                }
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..m_cells {
                alpha[i] = (z[i] - max).exp();
                total += alpha[i];
            }
            alpha.iter_mut().for_each(|a| *a /= total);
            let mut att = self.image_b.clone();
            for i in 0..m_cells {
                let w = alpha[i] * scale(i);
                for (a, x) in att.iter_mut().zip(img.proj.row(i)) {
                    *a += w * x;
                }
            }
            for k in 0..d {
                f[k] += att[k];
            }
        }
        let joint: Vec<f64> = f.iter().chain(&round.question).copied().collect();
        let da = self.head.cols();
        let mut u = vec![0.0; da];
        for (k, &jk) in joint.iter().enumerate() {
            for (uj, wj) in u.iter_mut().zip(self.head.row(k)) {
                *uj += jk * wj;
            }
        }
        let n = round.options.rows();
        let mut logits: Vec<f64> = (0..n)
            .map(|o| round.options.row(o).iter().zip(&u).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        (logits, alpha)
    }
}

/// `tanh` through a single `exp`; absolute error stays at rounding level.
#[inline]
fn tanh_exp(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Encodes a round's question (optionally from pre-masked embeddings) and
/// options with the probe's encoders.
pub fn round_inputs(model: &Model, round: &DialogRound, question_embedding: Option<&Tensor>) -> Result<RoundInputs> {
    let mut tape = Tape::with_params(&model.store);
    let embed = tape.param(model.params.embed)?;
    let q_emb = match question_embedding {
        Some(t) => tape.leaf(t.clone())?,
        None => {
            let idx: Vec<usize> = round.question.iter().map(|&t| t as usize).collect();
            tape.select_rows(embed, &idx)?
        }
    };
    let (_, q) = recurrent_encode(&mut tape, q_emb, &model.params.question)?;
    let options = model.encode_options(&mut tape, embed, &round.options)?;
    Ok(RoundInputs {
        question: tape.value(q).data().to_vec(),
        options: tape.value(options).clone(),
    })
}

fn question_state(model: &Model, embedding: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(&model.store);
    let q_emb = tape.leaf(embedding.clone())?;
    let (_, q) = recurrent_encode(&mut tape, q_emb, &model.params.question)?;
    Ok(tape.value(q).data().to_vec())
}

fn question_embedding(model: &Model, round: &DialogRound) -> Result<Tensor> {
    let idx: Vec<usize> = round.question.iter().map(|&t| t as usize).collect();
    model.store.get(model.params.embed).value.select_rows(&idx)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Probe outputs for one round.
pub fn probe_round(
    probe: &Model,
    fast: &FastSan,
    img: &ImageCache,
    round: &DialogRound,
    masks: Option<(&MaskSet, &MaskLevels)>,
    target: ProbeTarget,
) -> Result<RoundAux> {
    let inputs = round_inputs(probe, round, None)?;
    let (probs, _) = fast.forward(img, &inputs, None);
    let class = match target {
        ProbeTarget::GroundTruth => round.gt_index,
        ProbeTarget::Predicted => argmax(&probs),
    };
    let side = (img.proj.rows() as f64).sqrt().round() as usize;
    let saliency = match masks {
        Some((masks, levels)) => {
            let first = fast.first_layer_scores(img, &inputs, levels);
            let s = rise_saliency_with(masks, |k, _| Ok(fast.forward_masked(img, &inputs, levels, &first, k).0[class]))?;
            let n = s.values.len();
            s.values.reshape(&[n])?
        }
        None => Tensor::full(&[side * side], 1.0),
    };
    let q_emb = question_embedding(probe, round)?;
    let best = pairwise_word_mask_search(&q_emb, |masked| {
        let inp = RoundInputs {
            question: question_state(probe, masked)?,
            options: inputs.options.clone(),
        };
        let (p, alpha) = fast.forward(img, &inp, None);
        let map = AttentionMap::new(Tensor::new(vec![side, side], alpha)?)?;
        Ok((p[class].clamp(0.0, 1.0), map))
    })?;
    Ok(RoundAux {
        saliency,
        masked_pair: Some(best.masked_pair),
    })
}

/// Per-round probe outputs keyed by `(dialog id, round, target)`.
#[derive(Default)]
pub struct SaliencyCache {
    entries: HashMap<(u64, usize, ProbeTarget), RoundAux>,
}

impl SaliencyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the probe outputs of every round of `dialog`, computing any
    /// that are missing.
    pub fn dialog(
        &mut self,
        probe: &Model,
        fast: &FastSan,
        cfg: &RunConfig,
        masks: &MaskSet,
        dialog: &DialogInstance,
        target: ProbeTarget,
    ) -> Result<Vec<RoundAux>> {
        let missing = (0..dialog.rounds.len()).any(|k| !self.entries.contains_key(&(dialog.id, k, target)));
        if missing {
            let img = fast.image(&dialog.image.cells())?;
            let levels = (cfg.saliency == SaliencySource::Rise).then(|| MaskLevels::new(masks));
            let use_masks = levels.as_ref().map(|l| (masks, l));
            for (k, round) in dialog.rounds.iter().enumerate() {
                if !self.entries.contains_key(&(dialog.id, k, target)) {
                    let aux = probe_round(probe, fast, &img, round, use_masks, target)?;
                    self.entries.insert((dialog.id, k, target), aux);
                }
            }
        }
        Ok((0..dialog.rounds.len())
            .map(|k| self.entries[&(dialog.id, k, target)].clone())
            .collect())
    }
}

/// Saliency inputs without a probe: uniform cells, no token masking.
pub fn uniform_aux(cfg: &RunConfig, dialog: &DialogInstance) -> Vec<RoundAux> {
    let cells = cfg.grid * cfg.grid;
    dialog
        .rounds
        .iter()
        .map(|_| RoundAux {
            saliency: Tensor::full(&[cells], 1.0),
            masked_pair: None,
        })
        .collect()
}
