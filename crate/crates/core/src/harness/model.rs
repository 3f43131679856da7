//! Full dialog models: token embeddings, recurrent encoders, one attention
//! body per variant and the shared answer head.

use crate::attention::{
    cross_entropy_loss, gia_forward, gma_forward, gta_forward, mcb_attention,
    san_forward, score_answers, AnswerHeadParams, GiaParams, GmaParams, GtaParams, McbAttentionParams, SanParams,
};
use crate::autodiff::{Tape, Var};
use crate::encoder::{recurrent_encode, recurrent_encode_batch, EncoderParams};
use crate::error::{GmaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::config::{RunConfig, Variant};
use super::dataset::{vocab_size, DialogInstance, TokenId, ANSWER_LEN};

#[derive(Debug, Clone)]
pub enum Body {
    San(SanParams),
    McbAtt(McbAttentionParams),
    Gia(GiaParams),
    Gta(GtaParams),
    Gma { gia: GiaParams, gta: GtaParams, gma: GmaParams },
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embed: ParamId,
    pub image_w: ParamId,
    pub image_b: ParamId,
    pub question: EncoderParams,
    pub answer: EncoderParams,
    pub head: AnswerHeadParams,
    pub body: Body,
}

/// Per-round inputs derived from the saliency probe.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundAux {
    /// `[N*N]` cell saliency used to pick image granules.
    pub saliency: Tensor,
    /// Question tokens zeroed before text attention.
    pub masked_pair: Option<(usize, usize)>,
}

/// A dialog model and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub grid: usize,
    pub granules: usize,
    pub params: ModelParams,
    pub store: ParamStore,
}

/// Values recorded while running one dialog.
#[derive(Debug, Clone)]
pub struct DialogPass {
    pub loss: Var,
    pub logits: Vec<Var>,
    /// Final cell attention of each round (`[N*N]`) when the body has one.
    pub maps: Vec<Option<Tensor>>,
}

impl Model {
    pub fn new(cfg: &RunConfig, variant: Variant) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = cfg.seed;
        let d = cfg.embed_dim;
        let h = cfg.hidden;
        let embed = store.glorot("embed.tokens", vocab_size(), d, s)?;
        let image_w = store.glorot("image.w", cfg.channels, d, s)?;
        let image_b = store.bias("image.b", d)?;
        let question = EncoderParams::register(&mut store, "enc.question", d, d, s)?;
        let answer = EncoderParams::register(&mut store, "enc.answer", d, d, s)?;
        let head = AnswerHeadParams::register(&mut store, "head", d, d, d, s)?;
        let shared = cfg.shared_history_attention;
        let body = match variant {
            Variant::San => Body::San(SanParams::register(&mut store, "san", d, h, cfg.san_iterations, s)?),
            Variant::McbAtt => Body::McbAtt(McbAttentionParams::register(&mut store, "mcb", d, d, h, s)?),
            Variant::Gia => Body::Gia(GiaParams::register(&mut store, "gia", d, d, h, shared, s)?),
            Variant::Gta => Body::Gta(GtaParams::register(&mut store, "gta", d, d, h, shared, s)?),
            v => {
                let fusion = v.fusion().expect("fused variant");
                Body::Gma {
                    gia: GiaParams::register(&mut store, "gia", d, d, h, shared, s)?,
                    gta: GtaParams::register(&mut store, "gta", d, d, h, shared, s)?,
                    gma: GmaParams::register(&mut store, "gma", fusion, d, d, cfg.sketch_dim, h, cfg.normalize_fused, s)?,
                }
            }
        };
        Ok(Model {
            variant,
            grid: cfg.grid,
            granules: cfg.granules,
            params: ModelParams {
                embed,
                image_w,
                image_b,
                question,
                answer,
                head,
                body,
            },
            store,
        })
    }

    /// Copies parameter values by name from `other`, requiring the same names
    /// and shapes.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(GmaError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| GmaError::Format(format!("unexpected parameter {name:?} in checkpoint")))?;
            let p = self.store.get_mut(id);
            if p.value.dims() != t.dims() {
                return Err(GmaError::Format(format!(
                    "parameter {name:?}: checkpoint dims {:?}, model dims {:?}",
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn needs_aux(&self) -> bool {
        matches!(self.params.body, Body::Gia(_) | Body::Gta(_) | Body::Gma { .. })
    }

    /// Records the loss and per-round logits of one dialog.
    pub fn dialog_pass(&self, tape: &mut Tape, dialog: &DialogInstance, aux: Option<&[RoundAux]>) -> Result<DialogPass> {
        let p = &self.params;
        let rounds = dialog.rounds.len();
        if rounds == 0 {
            return Err(GmaError::contract("dialog_pass", "dialog has no rounds"));
        }
        if self.needs_aux() && aux.map_or(true, |a| a.len() != rounds) {
            return Err(GmaError::contract("dialog_pass", "granular variants need saliency inputs for every round"));
        }
        let embed = tape.param(p.embed)?;
        let image_w = tape.param(p.image_w)?;
        let image_b = tape.param(p.image_b)?;
        let raw = tape.leaf(dialog.image.cells())?;
        let cells = tape.linear(raw, image_w, Some(image_b))?;
        let pooled = match p.body {
            Body::Gta(_) | Body::Gma { .. } => Some(tape.mean_rows(cells)?),
            _ => None,
        };

        // History rows are shared across rounds: caption, then each QA pair.
        let needs_history = matches!(p.body, Body::Gia(_) | Body::Gta(_) | Body::Gma { .. });
        let mut history_rows: Vec<Var> = Vec::new();
        if needs_history {
            let last = &dialog.rounds[rounds - 1].history;
            for row in last.iter() {
                let emb = self.embed_tokens(tape, embed, row)?;
                let (_, fin) = recurrent_encode(tape, emb, &p.question)?;
                history_rows.push(tape.as_row(fin)?);
            }
        }

        let mut losses = Vec::with_capacity(rounds);
        let mut logits_all = Vec::with_capacity(rounds);
        let mut maps = Vec::with_capacity(rounds);
        for (k, round) in dialog.rounds.iter().enumerate() {
            let q_emb = self.embed_tokens(tape, embed, &round.question)?;
            let (_, q_final) = recurrent_encode(tape, q_emb, &p.question)?;
            let options = self.encode_options(tape, embed, &round.options)?;
            let aux_k = aux.map(|a| &a[k]);
            let (history, history_mean) = if needs_history {
                let rows = round.history.len();
                if rows == 0 || rows > history_rows.len() {
                    return Err(GmaError::contract("dialog_pass", format!("round {k} history does not prefix the final history")));
                }
                let h = if rows == 1 { history_rows[0] } else { tape.concat(&history_rows[..rows])? };
                let mean = tape.mean_rows(h)?;
                (Some(h), Some(mean))
            } else {
                (None, None)
            };
            let masked_states = |tape: &mut Tape| -> Result<Var> {
                let pair = aux_k.and_then(|a| a.masked_pair);
                let emb = match pair {
                    Some((i, j)) => {
                        let d = tape.dims(q_emb)[1];
                        let mut mask = Tensor::ones(&[round.question.len(), d]);
                        for r in [i, j] {
                            mask.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        }
                        let m = tape.leaf(mask)?;
                        tape.mul(q_emb, m)?
                    }
                    None => q_emb,
                };
                Ok(recurrent_encode(tape, emb, &p.question)?.0)
            };

            let (context, map) = match &p.body {
                Body::San(sp) => {
                    let (f, alpha) = san_forward(tape, cells, q_final, sp)?;
                    (f, Some(tape.value(alpha).clone()))
                }
                Body::McbAtt(mp) => {
                    let out = mcb_attention(tape, cells, q_final, mp)?;
                    (out.output, Some(tape.value(out.alpha).clone()))
                }
                Body::Gia(gp) => {
                    let sal = &aux_k.expect("checked").saliency;
                    let out = gia_forward(tape, cells, sal, self.granules, q_final, history_mean.expect("history"), gp)?;
                    let map = out.map(tape, self.grid)?.into_tensor();
                    (out.branch.attended, Some(flat(map)))
                }
                Body::Gta(tp) => {
                    let states = masked_states(tape)?;
                    let out = gta_forward(tape, pooled.expect("pooled"), states, history.expect("history"), tp)?;
                    (out.attended, None)
                }
                Body::Gma { gia, gta, gma } => {
                    let sal = &aux_k.expect("checked").saliency;
                    let img = gia_forward(tape, cells, sal, self.granules, q_final, history_mean.expect("history"), gia)?;
                    if gma.fusion == crate::attention::Fusion::Passthrough {
                        let map = img.map(tape, self.grid)?.into_tensor();
                        (img.branch.attended, Some(flat(map)))
                    } else {
                        let states = masked_states(tape)?;
                        let txt = gta_forward(tape, pooled.expect("pooled"), states, history.expect("history"), gta)?;
                        let out = gma_forward(tape, img.branch.attended, txt.attended, cells, gma)?;
                        let map = out.gamma.map(|g| tape.value(g).clone());
                        (out.attended, map)
                    }
                }
            };
            let logits = score_answers(tape, context, options, q_final, &p.head)?;
            let loss = cross_entropy_loss(tape, logits, round.gt_index)?;
            losses.push(loss);
            logits_all.push(logits);
            maps.push(map);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / rounds as f64)?;
        Ok(DialogPass {
            loss,
            logits: logits_all,
            maps,
        })
    }

    fn embed_tokens(&self, tape: &mut Tape, embed: Var, tokens: &[TokenId]) -> Result<Var> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        tape.select_rows(embed, &idx)
    }

    /// Encodes equal-length options in one batched recurrence; `[n, d]`.
    pub fn encode_options(&self, tape: &mut Tape, embed: Var, options: &[Vec<TokenId>]) -> Result<Var> {
        if options.is_empty() {
            return Err(GmaError::contract("encode_options", "no options"));
        }
        if options.iter().any(|o| o.len() != ANSWER_LEN) {
            return Err(GmaError::contract("encode_options", "options must have equal length"));
        }
        let steps = (0..ANSWER_LEN)
            .map(|t| {
                let idx: Vec<usize> = options.iter().map(|o| o[t] as usize).collect();
                tape.select_rows(embed, &idx)
            })
            .collect::<Result<Vec<_>>>()?;
        recurrent_encode_batch(tape, &steps, &self.params.answer)
    }
}

fn flat(t: Tensor) -> Tensor {
    let n = t.len();
    t.reshape(&[n]).expect("size preserving")
}
