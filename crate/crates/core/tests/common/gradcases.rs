//! Gradient-check cases: one per differentiable operation, one per attention
//! block and one full dialog pass per model variant.

use std::sync::Arc;

use gma_core::attention::{
    attention_primitive, cross_entropy_loss, gia_forward, gma_forward, gta_forward, joint_attention, mcb_attention,
    san_forward, score_answers, word_attention, AnswerHeadParams, Fusion, GiaParams, GmaParams, GtaParams,
    JointScorerParams, McbAttentionParams, PrimitiveParams, SanParams, WordScorerParams,
};
use gma_core::autodiff::{Elementwise, Tape, Var};
use gma_core::encoder::{recurrent_encode, recurrent_encode_batch, EncoderParams};
use gma_core::harness::dataset::generate_split;
use gma_core::harness::{Model, RoundAux, RunConfig, Split, Variant};
use gma_core::params::{ParamId, ParamStore, Parameter};
use gma_core::sketch::SketchSpec;
use gma_core::{Result, Tensor};

use super::{away_from_zero, check_inputs, check_params, uniform, Mismatch};

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Leaf-level cases: name, inputs, graph.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let u = |dims: &[usize], seed| uniform(dims, -1.5, 1.5, seed);
    let spec_a = Arc::new(SketchSpec::new(11, 7, 5).unwrap());
    let spec_b = Arc::new(SketchSpec::new(12, 4, 5).unwrap());
    let spec_c = spec_a.clone();
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![u(&[3, 4], 1), u(&[4, 2], 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add_broadcast", vec![u(&[3, 4], 3), u(&[4], 4)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul_broadcast", vec![u(&[2, 3, 4], 5), u(&[3, 4], 6)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_same_shape", vec![u(&[5], 7), u(&[5], 8)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("tanh", vec![u(&[2, 3], 9)], Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", vec![u(&[2, 3], 10)], Box::new(|t, v| t.sigmoid(v[0]))),
        ("scale", vec![u(&[4], 11)], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("softmax_vector", vec![u(&[6], 12)], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax_rows", vec![u(&[3, 4], 13)], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_columns", vec![u(&[3, 4], 14)], Box::new(|t, v| t.softmax(v[0], 0))),
        ("signed_sqrt", vec![away_from_zero(&[7], 0.05, 2.0, 15)], Box::new(|t, v| t.signed_sqrt(v[0]))),
        ("l2_normalize", vec![u(&[3, 4], 16)], Box::new(|t, v| t.l2_normalize(v[0]))),
        ("reshape", vec![u(&[2, 6], 17)], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("concat", vec![u(&[2, 3], 18), u(&[1, 3], 19)], Box::new(|t, v| t.concat(&[v[0], v[1], v[0]]))),
        ("select_rows", vec![u(&[4, 3], 20)], Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2]))),
        ("sum", vec![u(&[3, 2], 21)], Box::new(|t, v| t.sum(v[0]))),
        ("count_sketch", vec![u(&[7], 22)], Box::new(move |t, v| t.count_sketch(v[0], spec_a.clone()))),
        ("circular_convolve_pow2", vec![u(&[8], 23), u(&[8], 24)], Box::new(|t, v| t.circular_convolve(v[0], v[1]))),
        ("circular_convolve_odd", vec![u(&[5], 25), u(&[5], 26)], Box::new(|t, v| t.circular_convolve(v[0], v[1]))),
        ("cross_entropy", vec![u(&[5], 27)], Box::new(|t, v| t.cross_entropy(v[0], 3))),
        ("as_row", vec![u(&[4], 28)], Box::new(|t, v| t.as_row(v[0]))),
        ("flatten", vec![u(&[2, 2], 29)], Box::new(|t, v| t.flatten(v[0]))),
        ("linear", vec![u(&[3, 4], 30), u(&[4, 2], 31), u(&[2], 32)], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("vec_mat", vec![u(&[4], 33), u(&[4, 3], 34)], Box::new(|t, v| t.vec_mat(v[0], v[1]))),
        ("weighted_sum", vec![u(&[3], 35), u(&[3, 4], 36)], Box::new(|t, v| t.weighted_sum(v[0], v[1]))),
        ("mean_rows", vec![u(&[3, 4], 37)], Box::new(|t, v| t.mean_rows(v[0]))),
        (
            "mcb_pool",
            vec![u(&[7], 38), u(&[4], 39)],
            Box::new(move |t, v| t.mcb_pool(v[0], v[1], (spec_c.clone(), spec_b.clone()))),
        ),
    ];
    for (name, kind, binary) in [
        ("elementwise_add", Elementwise::Add, true),
        ("elementwise_mul", Elementwise::Mul, true),
        ("elementwise_tanh", Elementwise::Tanh, false),
        ("elementwise_sigmoid", Elementwise::Sigmoid, false),
    ] {
        let inputs = if binary { vec![u(&[3], 40), u(&[3], 41)] } else { vec![u(&[3], 42)] };
        cases.push((
            name,
            inputs,
            Box::new(move |t, v| t.elementwise(kind, v[0], v.get(1).copied())),
        ));
    }
    cases
}

pub fn check_op_cases() -> Vec<(String, Option<Mismatch>)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, build)| (name.to_string(), check_inputs(&inputs, build)))
        .collect()
}

/// Adds a fixed input as a parameter so its gradient is checked too.
fn input_param(store: &mut ParamStore, name: &str, value: Tensor) -> ParamId {
    store.insert(Parameter::new(name, value)).unwrap()
}

const M: usize = 5;
const C: usize = 4;
const H: usize = 3;

/// Block-level cases over a parameter store: name, store, graph.
pub fn block_cases() -> Vec<(&'static str, ParamStore, Box<dyn Fn(&mut Tape) -> Result<Var>>)> {
    let mut out: Vec<(&'static str, ParamStore, Box<dyn Fn(&mut Tape) -> Result<Var>>)> = Vec::new();
    let seed = 99;
    let perturb = |store: &mut ParamStore| {
        // Non-zero biases so their paths are exercised.
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let noise = uniform(p.value.dims(), -0.3, 0.3, 500 + k as u64);
            p.value = p.value.add(&noise).unwrap();
        }
    };

    {
        let mut s = ParamStore::new();
        let enc = EncoderParams::register(&mut s, "enc", C, H, seed).unwrap();
        let x = input_param(&mut s, "x", uniform(&[3, C], -1.0, 1.0, 1));
        perturb(&mut s);
        out.push((
            "recurrent_encode",
            s,
            Box::new(move |t| {
                let x = t.param(x)?;
                let (states, last) = recurrent_encode(t, x, &enc)?;
                let fl = t.flatten(states)?;
                let both = t.concat(&[fl, last])?;
                Ok(both)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let enc = EncoderParams::register(&mut s, "enc", C, H, seed).unwrap();
        let xs: Vec<ParamId> = (0..3).map(|i| input_param(&mut s, &format!("x{i}"), uniform(&[2, C], -1.0, 1.0, 10 + i))).collect();
        perturb(&mut s);
        out.push((
            "recurrent_encode_batch",
            s,
            Box::new(move |t| {
                let steps = xs.iter().map(|&x| t.param(x)).collect::<Result<Vec<_>>>()?;
                recurrent_encode_batch(t, &steps, &enc)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = PrimitiveParams::register(&mut s, "prim", C, 6, H, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 2));
        let q = input_param(&mut s, "q", uniform(&[6], -1.0, 1.0, 3));
        perturb(&mut s);
        out.push((
            "attention_primitive",
            s,
            Box::new(move |t| {
                let (cells, q) = (t.param(cells)?, t.param(q)?);
                attention_primitive(t, cells, q, &p)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = JointScorerParams::register(&mut s, "joint", C, 6, H, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 4));
        let q = input_param(&mut s, "q", uniform(&[6], -1.0, 1.0, 5));
        perturb(&mut s);
        out.push((
            "joint_attention",
            s,
            Box::new(move |t| {
                let (cells, q) = (t.param(cells)?, t.param(q)?);
                joint_attention(t, cells, q, &p)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = SanParams::register(&mut s, "san", C, H, 2, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 6));
        let q = input_param(&mut s, "q", uniform(&[C], -1.0, 1.0, 7));
        perturb(&mut s);
        out.push((
            "san_forward",
            s,
            Box::new(move |t| {
                let (cells, q) = (t.param(cells)?, t.param(q)?);
                let (f, alpha) = san_forward(t, cells, q, &p)?;
                t.concat(&[f, alpha])
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = McbAttentionParams::register(&mut s, "mcb", C, 6, H, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 8));
        let q = input_param(&mut s, "q", uniform(&[6], -1.0, 1.0, 9));
        perturb(&mut s);
        out.push((
            "mcb_attention",
            s,
            Box::new(move |t| {
                let (cells, q) = (t.param(cells)?, t.param(q)?);
                let o = mcb_attention(t, cells, q, &p)?;
                t.concat(&[o.output, o.alpha])
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = GiaParams::register(&mut s, "gia", C, C, H, false, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 10));
        let q = input_param(&mut s, "q", uniform(&[C], -1.0, 1.0, 11));
        let h = input_param(&mut s, "h", uniform(&[C], -1.0, 1.0, 12));
        let saliency = uniform(&[M], 0.0, 1.0, 13);
        perturb(&mut s);
        out.push((
            "gia_forward",
            s,
            Box::new(move |t| {
                let (cells, q, h) = (t.param(cells)?, t.param(q)?, t.param(h)?);
                let o = gia_forward(t, cells, &saliency, 3, q, h, &p)?;
                t.concat(&[o.branch.attended, o.branch.weights])
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = WordScorerParams::register(&mut s, "word", C, 6, H, seed).unwrap();
        let img = input_param(&mut s, "img", uniform(&[C], -1.0, 1.0, 14));
        let tokens = input_param(&mut s, "tokens", uniform(&[4, 6], -1.0, 1.0, 15));
        perturb(&mut s);
        out.push((
            "word_attention",
            s,
            Box::new(move |t| {
                let (img, tokens) = (t.param(img)?, t.param(tokens)?);
                word_attention(t, img, tokens, &p)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = GtaParams::register(&mut s, "gta", C, C, H, false, seed).unwrap();
        let img = input_param(&mut s, "img", uniform(&[C], -1.0, 1.0, 16));
        let qt = input_param(&mut s, "q_tokens", uniform(&[3, C], -1.0, 1.0, 17));
        let ht = input_param(&mut s, "h_tokens", uniform(&[2, C], -1.0, 1.0, 18));
        perturb(&mut s);
        out.push((
            "gta_forward",
            s,
            Box::new(move |t| {
                let (img, qt, ht) = (t.param(img)?, t.param(qt)?, t.param(ht)?);
                gta_forward(t, img, qt, ht, &p).map(|o| o.attended)
            }),
        ));
    }
    for (name, fusion) in [
        ("gma_forward_concat", Fusion::Concat),
        ("gma_forward_mcb", Fusion::Mcb),
        ("gma_forward_mcb_att", Fusion::McbAtt),
        ("gma_forward_passthrough", Fusion::Passthrough),
    ] {
        let mut s = ParamStore::new();
        let p = GmaParams::register(&mut s, "gma", fusion, C, C, 8, H, true, seed).unwrap();
        let cells = input_param(&mut s, "cells", uniform(&[M, C], -1.0, 1.0, 19));
        let ai = input_param(&mut s, "a_i", uniform(&[C], -1.0, 1.0, 20));
        let at = input_param(&mut s, "a_t", uniform(&[C], -1.0, 1.0, 21));
        perturb(&mut s);
        out.push((
            name,
            s,
            Box::new(move |t| {
                let (cells, ai, at) = (t.param(cells)?, t.param(ai)?, t.param(at)?);
                gma_forward(t, ai, at, cells, &p).map(|o| o.attended)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let p = AnswerHeadParams::register(&mut s, "head", C, 3, 5, seed).unwrap();
        let ctx = input_param(&mut s, "ctx", uniform(&[C], -1.0, 1.0, 22));
        let q = input_param(&mut s, "q", uniform(&[3], -1.0, 1.0, 23));
        let opts = input_param(&mut s, "opts", uniform(&[4, 5], -1.0, 1.0, 24));
        perturb(&mut s);
        out.push((
            "score_answers_cross_entropy",
            s,
            Box::new(move |t| {
                let (ctx, q, opts) = (t.param(ctx)?, t.param(q)?, t.param(opts)?);
                let logits = score_answers(t, ctx, opts, q, &p)?;
                cross_entropy_loss(t, logits, 2)
            }),
        ));
    }
    out
}

pub fn check_block_cases() -> Vec<(String, Option<Mismatch>)> {
    block_cases()
        .into_iter()
        .map(|(name, store, build)| (name.to_string(), check_params(&store, build)))
        .collect()
}

/// The small pipeline configuration: 2x2 grid, 4 options.
pub fn pipeline_config(variant: Variant) -> RunConfig {
    RunConfig {
        grid: 2,
        embed_dim: 4,
        hidden: 4,
        sketch_dim: 8,
        granules: 2,
        variant,
        option_count: 4,
        rounds: 2,
        train_dialogs: 1,
        objects: 3,
        mask_low_res: 2,
        ..RunConfig::default()
    }
}

/// One dialog with every question cut to `T = 3` tokens, plus probe inputs
/// that mask two of them.
pub fn pipeline_dialog(cfg: &RunConfig) -> (gma_core::harness::DialogInstance, Vec<RoundAux>) {
    let mut d = generate_split(cfg, Split::Train, 1).unwrap().remove(0);
    for r in &mut d.rounds {
        r.question.truncate(3);
    }
    let aux = (0..d.rounds.len())
        .map(|k| RoundAux {
            saliency: uniform(&[cfg.grid * cfg.grid], 0.0, 1.0, 70 + k as u64),
            masked_pair: Some((0, 2)),
        })
        .collect();
    (d, aux)
}

/// Gradient check of a full dialog loss for one variant, over every model
/// parameter.
pub fn check_pipeline(variant: Variant) -> Option<Mismatch> {
    let cfg = pipeline_config(variant);
    let mut model = Model::new(&cfg, variant).unwrap();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = model.store.get_mut(id);
        let noise = uniform(p.value.dims(), -0.2, 0.2, 900 + k as u64);
        p.value = p.value.add(&noise).unwrap();
    }
    let (dialog, aux) = pipeline_dialog(&cfg);
    let aux_ref = model.needs_aux().then_some(aux);
    let m = model.clone();
    check_params(&model.store, move |t| {
        Ok(m.dialog_pass(t, &dialog, aux_ref.as_deref())?.loss)
    })
}
