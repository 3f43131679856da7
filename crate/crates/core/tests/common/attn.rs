//! Straight-line re-implementations of the attention blocks (plain loops
//! over parameter values) and the fuzz driver for the map invariants.

use gma_core::attention::{
    attention_primitive, gia_forward, gma_forward, gta_forward, joint_attention, mcb_attention, san_forward,
    word_attention, Fusion, GammaScorer, GiaParams, GmaParams, GtaParams, JointScorerParams, McbAttentionParams,
    PrimitiveParams, SanParams, WordScorerParams,
};
use gma_core::autodiff::Tape;
use gma_core::params::{ParamId, ParamStore};
use gma_core::rng::SplitMix64;
use gma_core::tensor::L2_EPS;
use gma_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn val(s: &ParamStore, id: ParamId) -> &Tensor {
    &s.get(id).value
}

/// `v W` for `W: [in, out]`.
fn vm(v: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, &vk) in v.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += vk * w.row(k)[j];
        }
    }
    out
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn weighted(w: &[f64], rows: &Rows) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (wi, r) in w.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += wi * x;
        }
    }
    out
}

pub fn primitive(cells: &Rows, q: &[f64], p: &PrimitiveParams, s: &ParamStore) -> Vec<f64> {
    let qq = plus(&vm(q, val(s, p.query_w)), val(s, p.query_b).data());
    let w_a: Vec<f64> = val(s, p.score_w).data().to_vec();
    let b_a = val(s, p.score_b).data()[0];
    let z: Vec<f64> = cells
        .iter()
        .map(|c| {
            let conv = plus(&vm(c, val(s, p.conv_w)), val(s, p.conv_b).data());
            let img = vm(&conv, val(s, p.cell_w));
            let h: Vec<f64> = plus(&img, &qq).into_iter().map(f64::tanh).collect();
            dot(&h, &w_a) + b_a
        })
        .collect();
    softmax(&z)
}

pub fn joint(cells: &Rows, q: &[f64], p: &JointScorerParams, s: &ParamStore) -> Vec<f64> {
    let qv = vm(q, val(s, p.query_w));
    let w2: Vec<f64> = val(s, p.out_w).data().to_vec();
    let z: Vec<f64> = cells
        .iter()
        .map(|c| {
            let cv = plus(&vm(c, val(s, p.cell_w)), val(s, p.cell_b).data());
            let j: Vec<f64> = cv
                .iter()
                .zip(&qv)
                .map(|(a, b)| {
                    let t = (a * b).tanh();
                    t.signum() * t.abs().sqrt()
                })
                .collect();
            let n = dot(&j, &j).sqrt();
            let j: Vec<f64> = j.iter().map(|v| v / (n + L2_EPS)).collect();
            let h: Vec<f64> = plus(&vm(&j, val(s, p.hidden_w)), val(s, p.hidden_b).data())
                .into_iter()
                .map(f64::tanh)
                .collect();
            dot(&h, &w2)
        })
        .collect();
    softmax(&z)
}

/// Returns the refined query and the last map.
pub fn san(cells: &Rows, q: &[f64], p: &SanParams, s: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let mut f = q.to_vec();
    let mut last = Vec::new();
    for layer in &p.layers {
        let a = primitive(cells, &f, layer, s);
        f = plus(&weighted(&a, cells), &f);
        last = a;
    }
    (f, last)
}

/// `(alpha, f_att, f_out)`
pub fn mcb_att(cells: &Rows, q: &[f64], p: &McbAttentionParams, s: &ParamStore) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a = joint(cells, q, &p.scorer, s);
    let att = weighted(&a, cells);
    let wq = vm(q, val(s, p.out_w));
    let out = att.iter().zip(&wq).map(|(x, y)| x * y).collect();
    (a, att, out)
}

/// Granule indices by descending saliency, earlier index first on ties,
/// returned in ascending order.
pub fn top_k(saliency: &[f64], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::new();
    let mut used = vec![false; saliency.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in saliency.iter().enumerate() {
            if !used[i] && best.map_or(true, |b| v > saliency[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        picked.push(b);
    }
    picked.sort_unstable();
    picked
}

/// `(granules, beta, A_i)`
pub fn gia(cells: &Rows, saliency: &[f64], k: usize, q: &[f64], h: &[f64], p: &GiaParams, s: &ParamStore) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let idx = top_k(saliency, k);
    let g: Rows = idx.iter().map(|&i| cells[i].clone()).collect();
    let aq = joint(&g, q, &p.question, s);
    let ah = joint(&g, h, &p.history, s);
    let fq = weighted(&aq, &g);
    let fh = weighted(&ah, &g);
    let gate = primitive(&vec![fh, fq], q, &p.combine, s);
    let beta: Vec<f64> = ah.iter().zip(&aq).map(|(x, y)| gate[0] * x + gate[1] * y).collect();
    let a = weighted(&beta, &g);
    (idx, beta, a)
}

pub fn words(image: &[f64], tokens: &Rows, p: &WordScorerParams, s: &ParamStore) -> Vec<f64> {
    let gi = plus(&vm(image, val(s, p.image_w)), val(s, p.image_b).data());
    let w: Vec<f64> = val(s, p.score_w).data().to_vec();
    let b = val(s, p.score_b).data()[0];
    let z: Vec<f64> = tokens
        .iter()
        .map(|t| {
            let tk = plus(&vm(t, val(s, p.token_w)), val(s, p.token_b).data());
            let c: Vec<f64> = plus(&tk, &gi).into_iter().map(f64::tanh).collect();
            dot(&c, &w) + b
        })
        .collect();
    softmax(&z)
}

/// `(alpha over question tokens, A_t)`
pub fn gta(image: &[f64], qt: &Rows, ht: &Rows, p: &GtaParams, s: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let pq = words(image, qt, &p.question, s);
    let ph = words(image, ht, &p.history, s);
    let fq = weighted(&pq, qt);
    let fh = weighted(&ph, ht);
    let mut query = fh;
    query.extend(fq);
    let alpha = primitive(qt, &query, &p.combine, s);
    let a = weighted(&alpha, qt);
    (alpha, a)
}

/// `(gamma, A)`; `gamma` is empty for pass-through fusion.
pub fn gma(ai: &[f64], at: &[f64], cells: &Rows, p: &GmaParams, s: &ParamStore) -> (Vec<f64>, Vec<f64>) {
    let fused: Vec<f64> = match p.fusion {
        Fusion::Passthrough => return (Vec::new(), ai.to_vec()),
        Fusion::Concat => ai.iter().chain(at).copied().collect(),
        Fusion::Mcb | Fusion::McbAtt => {
            let (a, b) = p.sketches.as_ref().unwrap();
            let d = a.sketch_dim();
            // Sketch of the outer product, straight from the hash tables.
            let mut m = vec![0.0; d];
            for (i, &x) in ai.iter().enumerate() {
                for (j, &y) in at.iter().enumerate() {
                    m[(a.buckets()[i] + b.buckets()[j]) % d] += f64::from(a.signs()[i]) * f64::from(b.signs()[j]) * x * y;
                }
            }
            if p.normalize_fused {
                let r: Vec<f64> = m.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
                let n = dot(&r, &r).sqrt();
                r.iter().map(|v| v / (n + L2_EPS)).collect()
            } else {
                m
            }
        }
    };
    let gamma = match &p.gamma {
        GammaScorer::Primitive(g) => primitive(cells, &fused, g, s),
        GammaScorer::Joint(g) => joint(cells, &fused, g, s),
        GammaScorer::None => unreachable!("pass-through handled above"),
    };
    let a = weighted(&gamma, cells);
    (gamma, a)
}

// ---------------------------------------------------------------------------
// Fuzzing
// ---------------------------------------------------------------------------

/// Outcome of a fuzz campaign over one op.
#[derive(Debug, Default, Clone)]
pub struct FuzzTally {
    pub invocations: usize,
    pub bad_maps: usize,
    pub outside_hull: usize,
    pub worst_sum_err: f64,
}

fn map_ok(w: &[f64], tally: &mut FuzzTally) {
    let s: f64 = w.iter().sum();
    tally.worst_sum_err = tally.worst_sum_err.max((s - 1.0).abs());
    if w.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        tally.bad_maps += 1;
    }
}

fn hull_ok(v: &[f64], rows: &Rows, tally: &mut FuzzTally) {
    for (c, &x) in v.iter().enumerate() {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if x < lo - slack || x > hi + slack {
            tally.outside_hull += 1;
            return;
        }
    }
}

fn rand_tensor(rng: &mut SplitMix64, dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| scale * (2.0 * rng.unit() - 1.0)).collect()).unwrap()
}

fn between(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// Scales every parameter so scorers range from nearly flat to saturated,
/// and jitters all entries so biases are non-zero.
pub fn perturb(store: &mut ParamStore, factor: f64, rng: &mut SplitMix64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            *v = factor * *v + 0.3 * (2.0 * rng.unit() - 1.0);
        }
    }
}

pub const FUZZ_OPS: [&str; 10] = [
    "attention_primitive",
    "joint_attention",
    "san_forward",
    "mcb_attention",
    "gia_forward",
    "word_attention",
    "gta_forward",
    "gma_forward_concat",
    "gma_forward_mcb",
    "gma_forward_mcb_att",
];

/// Runs `n` randomized invocations of the named op.
pub fn fuzz(op: &str, n: usize, seed: u64) -> FuzzTally {
    let mut rng = SplitMix64::new(seed);
    let mut tally = FuzzTally::default();
    for it in 0..n {
        let m = between(&mut rng, 1, 12);
        let c = between(&mut rng, 1, 6);
        let h = between(&mut rng, 1, 5);
        let input_scale = [0.01, 1.0, 10.0, 100.0][between(&mut rng, 0, 3)];
        let param_scale = [0.1, 1.0, 5.0][between(&mut rng, 0, 2)];
        let pseed = rng.next_u64();
        let mut s = ParamStore::new();
        let cells_t = rand_tensor(&mut rng, &[m, c], input_scale);
        let cells_r = rows(&cells_t);
        match op {
            "attention_primitive" => {
                let qd = between(&mut rng, 1, 6);
                let p = PrimitiveParams::register(&mut s, "p", c, qd, h, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let q = rand_tensor(&mut rng, &[qd], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, qv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(q).unwrap());
                let a = attention_primitive(&mut t, cv, qv, &p).unwrap();
                let w = t.value(a).data().to_vec();
                map_ok(&w, &mut tally);
                hull_ok(&weighted(&w, &cells_r), &cells_r, &mut tally);
            }
            "joint_attention" => {
                let qd = between(&mut rng, 1, 6);
                let p = JointScorerParams::register(&mut s, "j", c, qd, h, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let q = rand_tensor(&mut rng, &[qd], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, qv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(q).unwrap());
                let a = joint_attention(&mut t, cv, qv, &p).unwrap();
                let w = t.value(a).data().to_vec();
                map_ok(&w, &mut tally);
                hull_ok(&weighted(&w, &cells_r), &cells_r, &mut tally);
            }
            "san_forward" => {
                let p = SanParams::register(&mut s, "san", c, h, 1, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let q = rand_tensor(&mut rng, &[c], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, qv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(q.clone()).unwrap());
                let (f, a) = san_forward(&mut t, cv, qv, &p).unwrap();
                map_ok(t.value(a).data(), &mut tally);
                let att: Vec<f64> = t.value(f).data().iter().zip(q.data()).map(|(x, y)| x - y).collect();
                hull_ok(&att, &cells_r, &mut tally);
            }
            "mcb_attention" => {
                let qd = between(&mut rng, 1, 6);
                let p = McbAttentionParams::register(&mut s, "m", c, qd, h, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let q = rand_tensor(&mut rng, &[qd], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, qv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(q).unwrap());
                let o = mcb_attention(&mut t, cv, qv, &p).unwrap();
                map_ok(t.value(o.alpha).data(), &mut tally);
                hull_ok(t.value(o.attended).data(), &cells_r, &mut tally);
            }
            "gia_forward" => {
                let p = GiaParams::register(&mut s, "g", c, c, h, it % 2 == 0, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let k = between(&mut rng, 1, m);
                let sal = rand_tensor(&mut rng, &[m], 1.0);
                let q = rand_tensor(&mut rng, &[c], input_scale);
                let hv = rand_tensor(&mut rng, &[c], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, qv, hvv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(q).unwrap(), t.leaf(hv).unwrap());
                let o = gia_forward(&mut t, cv, &sal, k, qv, hvv, &p).unwrap();
                map_ok(t.value(o.branch.weights).data(), &mut tally);
                let g: Rows = o.granules.iter().map(|&i| cells_r[i].clone()).collect();
                hull_ok(t.value(o.branch.attended).data(), &g, &mut tally);
            }
            "word_attention" => {
                let d = between(&mut rng, 1, 6);
                let p = WordScorerParams::register(&mut s, "w", c, d, h, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let img = rand_tensor(&mut rng, &[c], input_scale);
                let toks = rand_tensor(&mut rng, &[m, d], input_scale);
                let tr = rows(&toks);
                let mut t = Tape::with_params(&s);
                let (iv, tv) = (t.leaf(img).unwrap(), t.leaf(toks).unwrap());
                let a = word_attention(&mut t, iv, tv, &p).unwrap();
                let w = t.value(a).data().to_vec();
                map_ok(&w, &mut tally);
                hull_ok(&weighted(&w, &tr), &tr, &mut tally);
            }
            "gta_forward" => {
                let d = between(&mut rng, 1, 6);
                let p = GtaParams::register(&mut s, "t", c, d, h, it % 2 == 1, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let img = rand_tensor(&mut rng, &[c], input_scale);
                let (tq, th) = (between(&mut rng, 1, 6), between(&mut rng, 1, 6));
                let qt = rand_tensor(&mut rng, &[tq, d], input_scale);
                let ht = rand_tensor(&mut rng, &[th, d], input_scale);
                let qr = rows(&qt);
                let mut t = Tape::with_params(&s);
                let (iv, qv, hv) = (t.leaf(img).unwrap(), t.leaf(qt).unwrap(), t.leaf(ht).unwrap());
                let o = gta_forward(&mut t, iv, qv, hv, &p).unwrap();
                map_ok(t.value(o.weights).data(), &mut tally);
                hull_ok(t.value(o.attended).data(), &qr, &mut tally);
            }
            name => {
                let fusion = match name {
                    "gma_forward_concat" => Fusion::Concat,
                    "gma_forward_mcb" => Fusion::Mcb,
                    "gma_forward_mcb_att" => Fusion::McbAtt,
                    other => panic!("unknown op {other}"),
                };
                let a_dim = between(&mut rng, 1, 6);
                let sketch = between(&mut rng, 1, 16);
                let p = GmaParams::register(&mut s, "gma", fusion, c, a_dim, sketch, h, it % 3 != 0, pseed).unwrap();
                perturb(&mut s, param_scale, &mut rng);
                let ai = rand_tensor(&mut rng, &[a_dim], input_scale);
                let at = rand_tensor(&mut rng, &[a_dim], input_scale);
                let mut t = Tape::with_params(&s);
                let (cv, av, tv) = (t.leaf(cells_t.clone()).unwrap(), t.leaf(ai).unwrap(), t.leaf(at).unwrap());
                let o = gma_forward(&mut t, av, tv, cv, &p).unwrap();
                map_ok(t.value(o.gamma.unwrap()).data(), &mut tally);
                hull_ok(t.value(o.attended).data(), &cells_r, &mut tally);
            }
        }
        tally.invocations += 1;
    }
    tally
}

