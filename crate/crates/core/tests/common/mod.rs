//! Helpers shared by the integration tests.
#![allow(dead_code)]

use gma_core::autodiff::{Tape, Var};
use gma_core::params::ParamStore;
use gma_core::rng::SplitMix64;
use gma_core::{Result, Tensor};

/// Uniform values in `[lo, hi)` from a fixed seed.
pub fn uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.unit()).collect()).unwrap()
}

/// Values in `[lo, hi)` with a random sign, keeping away from zero.
pub fn away_from_zero(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = lo + (hi - lo) * rng.unit();
            if rng.unit() < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Below this magnitude the absolute tolerance applies.
pub const SMALL_GRAD: f64 = 1e-2;

/// Gradient agreement under the acceptance rule.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < SMALL_GRAD {
        (analytic - numeric).abs() <= ABS_TOL
    } else {
        (analytic - numeric).abs() / scale <= REL_TOL
    }
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// element contributes a distinct amount to the loss.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let dims = tape.dims(out).to_vec();
    if dims.is_empty() || dims == [1] && tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.leaf(uniform(&dims, -1.0, 1.0, 0xfeed))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Largest violation found; `None` when every component agrees.
#[derive(Debug)]
pub struct Mismatch {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks gradients with respect to every element of every input leaf.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Option<Mismatch> {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = reduce(&mut tape, out).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = reduce(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].dims()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            if !grads_agree(a, numeric) {
                return Some(Mismatch {
                    what: format!("input {k}"),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    None
}

/// Checks gradients with respect to every parameter in `store`.
pub fn check_params(store: &ParamStore, build: impl Fn(&mut Tape) -> Result<Var>) -> Option<Mismatch> {
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::with_params(s);
        let out = build(&mut tape).unwrap();
        let loss = reduce(&mut tape, out).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::with_params(store);
    let out = build(&mut tape).unwrap();
    let loss = reduce(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (id, p) in store.iter() {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.dims()));
        for i in 0..p.value.len() {
            let mut plus = store.clone();
            plus.get_mut(id).value.data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).value.data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            if !grads_agree(a, numeric) {
                return Some(Mismatch {
                    what: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    None
}

pub mod gradcases;
pub mod attn;
pub mod lp;
pub mod oracles;
pub mod saliency;

/// A few small dialogs on a 3x3 grid; trains in well under a second.
pub fn tiny_config() -> gma_core::harness::RunConfig {
    gma_core::harness::RunConfig::from_json(
        r#"{"grid": 3, "embed_dim": 8, "hidden": 8, "sketch_dim": 16, "granules": 4, "objects": 3,
            "option_count": 6, "rounds": 3, "train_dialogs": 6, "val_dialogs": 4, "test_dialogs": 4,
            "epochs": 2, "mask_count": 20, "mask_low_res": 2}"#,
    )
    .unwrap()
}
