//! Helpers shared by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use sliceworld::diffcore::fdcheck::{check_gradients, FdOptions};
use sliceworld::diffcore::{grad, Graph, ParamStore, Tensor, Var};
use sliceworld::model::{groups, Intervention, ModelConfig, Pathway, SliceWorld};
use sliceworld::objectives::{finetune_terms, pretrain_terms, uncertainty_target, LossConfig, LossTerms};
use sliceworld::phantom::{PhantomStudy, PROMPT};
use sliceworld::Result;

pub const TERMS: [&str; 9] = [
    "mfp_h", "mfp_w", "smooth", "sparse", "unc", "occ", "cf_inv", "cf_eff", "ctrg",
];

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A random model small enough for exhaustive finite differences.
pub fn tiny_config(rng: &mut impl Rng) -> ModelConfig {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    ModelConfig {
        image_side: 8,
        patch: 4,
        d_v: d(2, 4),
        d_e: d(2, 4),
        d_h: d(2, 5),
        d_anat: d(1, 3),
        d_lesion: d(1, 3),
        d_unc: d(1, 2),
        d_w: d(2, 4),
        d_z: d(3, 5),
        horizon: d(1, 3),
        pred_hidden: d(2, 4),
        lm_hidden: d(2, 4),
        decoder_layers: 1,
        decoder_ff: d(2, 4),
        ..ModelConfig::default()
    }
}

pub struct TinyCase {
    pub model: SliceWorld,
    pub params: ParamStore,
    pub e: Tensor,
    pub labels: Vec<f64>,
    pub report: Vec<u32>,
    pub loss: LossConfig,
}

pub fn tiny_case(seed: u64) -> TinyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = tiny_config(&mut rng);
    let k = config.horizon;
    let model = SliceWorld::new(config).unwrap();
    let params = model.init_params(rng.random()).unwrap();
    let t = rng.random_range(k + 3..=k + 8);
    let e = rand_tensor(&mut rng, t, model.config.d_e);
    // at least one lesion and one clear origin so both cf terms are live
    let mut labels: Vec<f64> = (0..t).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    let report: Vec<u32> = (0..rng.random_range(2..6)).map(|_| rng.random_range(7..64)).collect();
    let loss = LossConfig {
        horizon: k,
        ..LossConfig::default()
    };
    TinyCase {
        model,
        params,
        e,
        labels,
        report,
        loss,
    }
}

fn pick(terms: &LossTerms, name: &str) -> Option<Var> {
    match name {
        "mfp_h" => terms.mfp_h,
        "mfp_w" => terms.mfp_w,
        "smooth" => terms.smooth,
        "sparse" => terms.sparse,
        "unc" => terms.unc,
        "occ" => terms.occ,
        "cf_inv" => terms.cf_inv,
        "cf_eff" => terms.cf_eff,
        "recon" => terms.recon,
        _ => terms.ctrg,
    }
}

/// Builds one loss sub-term on `g`. Report likelihood runs the full world
/// pathway from features to language tokens.
pub fn term_node(case: &TinyCase, g: &mut Graph, name: &str) -> Result<Var> {
    let e = g.constant(case.e.clone());
    if name == "ctrg" {
        let h = case.model.prefix_states(g, e)?;
        let st = case.model.decompose_state(g, h)?;
        let (_, z) = case.model.project_tokens(g, &st)?;
        let terms = finetune_terms(g, &case.model, z, &case.report)?;
        return Ok(terms.ctrg.unwrap());
    }
    let terms = pretrain_terms(g, &case.model, e, &case.labels, &case.loss)?;
    Ok(pick(&terms, name).unwrap_or_else(|| panic!("term {name} not built")))
}

/// The uncertainty term with its stop-gradient target replaced by the
/// constant value it takes at `case.params`.
pub fn unc_fixed_target_node(case: &TinyCase, g: &mut Graph, target: &Tensor) -> Result<Var> {
    let e = g.constant(case.e.clone());
    let h = case.model.prefix_states(g, e)?;
    let st = case.model.decompose_state(g, h)?;
    let u = case.model.uncertainty_scalar(g, st.u)?;
    let u = g.slice_rows(u, 0, target.rows())?;
    let t = g.constant(target.clone());
    let d = g.sub(u, t)?;
    let s = g.sum_sq(d);
    Ok(g.scale(s, 1.0 / target.rows() as f64))
}

pub fn unc_target_value(case: &TinyCase) -> Tensor {
    let k = case.loss.horizon;
    let mut g = Graph::inference(&case.params);
    let e = g.constant(case.e.clone());
    let h = case.model.prefix_states(&mut g, e).unwrap();
    let origins = g.slice_rows(h, 0, case.e.rows() - k).unwrap();
    let preds: Vec<Var> = (1..=k)
        .map(|j| case.model.predict_future(&mut g, origins, Pathway::H, j).unwrap())
        .collect();
    let t = uncertainty_target(&mut g, &preds, e).unwrap();
    g.value(t).clone()
}

/// Denominator floor of the relative error. Central differences at step
/// 1e-5 carry about 1e-11 of roundoff on O(1) losses, which swamps groups
/// whose gradient is zero by symmetry (e.g. attention key biases).
pub const TERM_FD_FLOOR: f64 = 1e-6;

/// Worst relative finite-difference error of one sub-term over all groups.
///
/// Central differences cannot see a stop-gradient, so the uncertainty term
/// is differenced with its target held fixed, and the analytic gradient of
/// the real term must equal that of the fixed-target loss.
pub fn term_fd_error(case: &TinyCase, name: &str) -> f64 {
    let opts = FdOptions {
        max_entries: 8,
        floor: TERM_FD_FLOOR,
        ..FdOptions::default()
    };
    if name != "unc" {
        let f = |g: &mut Graph| term_node(case, g, name);
        return check_gradients(&case.params, &f, opts).unwrap().max_rel_error();
    }
    let target = unc_target_value(case);
    let f = |g: &mut Graph| unc_fixed_target_node(case, g, &target);
    let fd = check_gradients(&case.params, &f, opts).unwrap().max_rel_error();
    let (_, real) = grad(&case.params, |g| term_node(case, g, "unc")).unwrap();
    let (_, fixed) = grad(&case.params, |g| unc_fixed_target_node(case, g, &target)).unwrap();
    let mismatch = real
        .iter()
        .zip(fixed.iter())
        .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(TERM_FD_FLOOR)))
        .fold(0.0, f64::max);
    fd.max(mismatch)
}

/// Squared norm of the gradient that the uncertainty term sends into the
/// h-pathway prediction heads.
pub fn unc_grad_into_heads(case: &TinyCase) -> f64 {
    let (_, grads) = grad(&case.params, |g| term_node(case, g, "unc")).unwrap();
    grads.sq_norm_prefix(&format!("{}.h", groups::PREDICTION_HEADS))
}

pub fn unc_grad_into_unc_head(case: &TinyCase) -> f64 {
    let (_, grads) = grad(&case.params, |g| term_node(case, g, "unc")).unwrap();
    grads.sq_norm_prefix(groups::UNCERTAINTY_HEAD)
}

/// Every per-position output of one study from raw slices, as flat rows.
pub struct Trace {
    pub h: Tensor,
    pub s: Tensor,
    pub w: Tensor,
    pub z: Tensor,
    /// `preds[p][k-1]` holds pathway `p`'s horizon-`k` predictions.
    pub preds: Vec<Vec<Tensor>>,
}

pub fn trace(model: &SliceWorld, params: &ParamStore, study: &PhantomStudy, mode: Intervention) -> Trace {
    let images = model.slice_images(&study.volume).unwrap();
    let mut g = Graph::inference(params);
    let e = model.encode_slices(&mut g, &images).unwrap();
    let h = model.prefix_states(&mut g, e).unwrap();
    let st = model.decompose_state(&mut g, h).unwrap();
    let st = model.intervene(&mut g, &st, mode).unwrap();
    let s = model.state_vector(&mut g, &st).unwrap();
    let (w, z) = model.project_tokens(&mut g, &st).unwrap();
    let mut preds = Vec::new();
    for (p, x) in [(Pathway::H, h), (Pathway::W, w)] {
        preds.push(
            (1..=model.config.horizon)
                .map(|k| {
                    let y = model.predict_future(&mut g, x, p, k).unwrap();
                    g.value(y).clone()
                })
                .collect(),
        );
    }
    Trace {
        h: g.value(h).clone(),
        s: g.value(s).clone(),
        w: g.value(w).clone(),
        z: g.value(z).clone(),
        preds,
    }
}

/// Rows `0..=t` of every traced output agree bit for bit.
pub fn prefix_identical(a: &Trace, b: &Trace, t: usize) -> bool {
    let same = |x: &Tensor, y: &Tensor| (0..=t).all(|r| x.row(r) == y.row(r));
    same(&a.h, &b.h)
        && same(&a.s, &b.s)
        && same(&a.w, &b.w)
        && same(&a.z, &b.z)
        && a.preds.iter().zip(&b.preds).all(|(pa, pb)| pa.iter().zip(pb).all(|(x, y)| same(x, y)))
}

/// Copy of `study` whose slices after position `t` are replaced by noise.
pub fn perturb_after(study: &PhantomStudy, t: usize, seed: u64) -> PhantomStudy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = study.clone();
    for s in out.volume.slices.iter_mut().skip(t + 1) {
        let (r, c) = (s.rows(), s.cols());
        let data = (0..r * c).map(|_| rng.random_range(-1024..=3071)).collect();
        *s = sliceworld::phantom::HuSlice::new(r, c, data).unwrap();
    }
    out
}

pub fn prompt() -> &'static [u32] {
    &PROMPT
}

// Independent oracles for preprocessing and evaluation statistics.

/// Exact rational windowing: clip, then `round_half_up(255·(v − lo)/W)` in
/// integer arithmetic. Valid for integer HU and windows with even width.
pub fn window_oracle(v: i64, level: i64, width: i64) -> u8 {
    let lo = level - width / 2;
    let hi = level + width / 2;
    let c = v.clamp(lo, hi);
    let num = 255 * (c - lo);
    ((2 * num + width) / (2 * width)) as u8
}

/// Every weak ordering of `n` items as dense ranks `0..m`.
pub fn tie_patterns(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    loop {
        let m = cur.iter().max().unwrap() + 1;
        if (0..m).all(|v| cur.contains(&v)) {
            out.push(cur.clone());
        }
        let mut i = 0;
        while i < n {
            cur[i] += 1;
            if cur[i] < n {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
        if i == n {
            return out;
        }
    }
}

pub fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

/// Average precision in exact rational arithmetic: sum over thresholds of
/// recall increment times precision, counting everything at or above.
pub fn auprc_oracle(scores: &[usize], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as i128;
    if pos == 0 || pos == labels.len() as i128 {
        return None;
    }
    let mut thresholds: Vec<usize> = scores.to_vec();
    thresholds.sort_unstable();
    thresholds.dedup();
    let (mut num, mut den) = (0i128, 1i128);
    let mut prev_tp = 0i128;
    for &th in thresholds.iter().rev() {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let tp = above.iter().filter(|&&i| labels[i]).count() as i128;
        // (tp − prev_tp)/pos · tp/|above|
        let (n2, d2) = ((tp - prev_tp) * tp, pos * above.len() as i128);
        num = num * d2 + n2 * den;
        den *= d2;
        let g = gcd(num, den);
        num /= g;
        den /= g;
        prev_tp = tp;
    }
    Some(num as f64 / den as f64)
}

/// Twice the average rank, as an integer: `2·#{less} + #{equal} + 1`.
pub fn doubled_ranks(x: &[usize]) -> Vec<i128> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as i128;
            let eq = x.iter().filter(|&&b| b == a).count() as i128;
            2 * less + eq + 1
        })
        .collect()
}

pub fn spearman_oracle(x: &[usize], y: &[usize]) -> Option<f64> {
    let (rx, ry) = (doubled_ranks(x), doubled_ranks(y));
    let n = x.len() as i128;
    let (sx, sy): (i128, i128) = (rx.iter().sum(), ry.iter().sum());
    // n²·cov and n²·var, exact
    let cov = n * rx.iter().zip(&ry).map(|(a, b)| a * b).sum::<i128>() - sx * sy;
    let vx = n * rx.iter().map(|a| a * a).sum::<i128>() - sx * sx;
    let vy = n * ry.iter().map(|a| a * a).sum::<i128>() - sy * sy;
    if vx == 0 || vy == 0 {
        return None;
    }
    Some(cov as f64 / ((vx as f64) * (vy as f64)).sqrt())
}

/// The same one-sided bootstrap statistic, drawn from an unrelated generator.
pub fn bootstrap_oracle(a: &[f64], b: &[f64], resamples: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(0xfeed);
    let n = a.len();
    let mut hits = 0usize;
    for _ in 0..resamples {
        let (mut ma, mut mb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            ma += a[i];
            mb += b[i];
        }
        if mb <= ma {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}
