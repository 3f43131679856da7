//! Single-layer Elman recurrence used to encode token sequences.

use crate::autodiff::{Tape, Var};
use crate::error::{GmaError, Result};
use crate::params::{ParamId, ParamStore};

/// Weights of `h_t = tanh(x_t W_x + h_{t-1} W_h + b)`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub input_w: ParamId,
    pub hidden_w: ParamId,
    pub bias: ParamId,
}

impl EncoderParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        Ok(EncoderParams {
            input_w: store.glorot(&format!("{prefix}.w_x"), input_dim, hidden_dim, seed)?,
            hidden_w: store.glorot(&format!("{prefix}.w_h"), hidden_dim, hidden_dim, seed)?,
            bias: store.bias(&format!("{prefix}.b"), hidden_dim)?,
        })
    }
}

/// Encodes `tokens: [T, d_in]`, returning every hidden state `[T, d]` and the
/// final state `[d]`. `h_0 = 0`.
pub fn recurrent_encode(tape: &mut Tape, tokens: Var, params: &EncoderParams) -> Result<(Var, Var)> {
    let dims = tape.dims(tokens).to_vec();
    if dims.len() != 2 || dims[0] == 0 {
        return Err(GmaError::contract("recurrent_encode", "empty token sequence"));
    }
    let steps = dims[0];
    let w_x = tape.param(params.input_w)?;
    let w_h = tape.param(params.hidden_w)?;
    let b = tape.param(params.bias)?;
    let projected = tape.linear(tokens, w_x, Some(b))?;
    let mut states = Vec::with_capacity(steps);
    let mut h: Option<Var> = None;
    for t in 0..steps {
        let x_t = tape.select_rows(projected, &[t])?;
        let pre = match h {
            Some(prev) => {
                let rec = tape.matmul(prev, w_h)?;
                tape.add(x_t, rec)?
            }
            None => x_t,
        };
        let next = tape.tanh(pre)?;
        states.push(next);
        h = Some(next);
    }
    let per_step = if states.len() == 1 { states[0] } else { tape.concat(&states)? };
    let last = tape.flatten(*states.last().expect("non-empty"))?;
    Ok((per_step, last))
}

/// Encodes a batch of equal-length sequences given as per-step inputs
/// `[B, d_in]`; returns the final states `[B, d]`.
pub fn recurrent_encode_batch(tape: &mut Tape, steps: &[Var], params: &EncoderParams) -> Result<Var> {
    if steps.is_empty() {
        return Err(GmaError::contract("recurrent_encode_batch", "empty token sequence"));
    }
    let w_x = tape.param(params.input_w)?;
    let w_h = tape.param(params.hidden_w)?;
    let b = tape.param(params.bias)?;
    let mut h: Option<Var> = None;
    for &x in steps {
        let proj = tape.linear(x, w_x, Some(b))?;
        let pre = match h {
            Some(prev) => {
                let rec = tape.matmul(prev, w_h)?;
                tape.add(proj, rec)?
            }
            None => proj,
        };
        h = Some(tape.tanh(pre)?);
    }
    Ok(h.expect("non-empty"))
}
