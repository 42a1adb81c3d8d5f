//! Individual loss sub-terms. Every function takes graph variables and
//! returns a `1 × 1` loss node.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Clamp applied to presence probabilities before the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_horizon(t: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("horizon K must be at least 1"));
    }
    if t <= k {
        return Err(Error::TooShort { len: t, horizon: k });
    }
    Ok(())
}

fn check_preds(g: &Graph, preds: &[Var], rows: usize, cols: usize, what: &str) -> Result<()> {
    for (i, &p) in preds.iter().enumerate() {
        if g.shape(p) != (rows, cols) {
            return Err(Error::Shape {
                map: format!("{what}[k={}]", i + 1),
                expected: format!("{rows}x{cols}"),
                got: format!("{:?}", g.shape(p)),
            });
        }
    }
    Ok(())
}

/// Targets `e_{t+k}` for origins `t = 1..T−K`.
fn targets(g: &mut Graph, e: Var, k: usize, n: usize) -> Result<Var> {
    g.slice_rows(e, k, n)
}

fn column(g: &mut Graph, values: Vec<f64>) -> Var {
    g.constant(Tensor::column(values))
}

/// `1/(K(T−K)) Σ_t Σ_k ‖ê_{t,k} − e_{t+k}‖²`, where `preds[k−1]` holds one
/// row per origin `t ∈ [1, T−K]`.
pub fn mfp_loss(g: &mut Graph, e: Var, preds: &[Var]) -> Result<Var> {
    let (t, d) = g.shape(e);
    let k = preds.len();
    check_horizon(t, k)?;
    let n = t - k;
    check_preds(g, preds, n, d, "mfp prediction")?;
    let mut parts = Vec::with_capacity(k);
    for (i, &p) in preds.iter().enumerate() {
        let tgt = targets(g, e, i + 1, n)?;
        let diff = g.sub(p, tgt)?;
        parts.push(g.sum_sq(diff));
    }
    let total = sum_scalars(g, &parts)?;
    Ok(g.scale(total, 1.0 / (k * n) as f64))
}

/// `1/(T−1) Σ_{t≥2} ‖a_t − a_{t−1}‖²`; zero for a single slice.
pub fn fas_smooth(g: &mut Graph, a: Var) -> Result<Var> {
    let t = g.shape(a).0;
    if t < 2 {
        return Ok(g.scalar(0.0));
    }
    let next = g.slice_rows(a, 1, t - 1)?;
    let prev = g.slice_rows(a, 0, t - 1)?;
    let diff = g.sub(next, prev)?;
    let s = g.sum_sq(diff);
    Ok(g.scale(s, 1.0 / (t - 1) as f64))
}

/// `1/T Σ_t ‖l_t‖₁`.
pub fn fas_sparse(g: &mut Graph, l: Var) -> Result<Var> {
    let t = g.shape(l).0;
    if t == 0 {
        return Err(Error::validation("sparsity loss over an empty sequence"));
    }
    let s = g.sum_abs(l);
    Ok(g.scale(s, 1.0 / t as f64))
}

/// Stop-gradient target `(1/K) Σ_k ‖ê^{(h,k)}_t − e_{t+k}‖² / d_e`, one row per
/// origin.
pub fn uncertainty_target(g: &mut Graph, preds_h: &[Var], e: Var) -> Result<Var> {
    let (t, d) = g.shape(e);
    let k = preds_h.len();
    check_horizon(t, k)?;
    let n = t - k;
    check_preds(g, preds_h, n, d, "h prediction")?;
    let mut acc: Option<Var> = None;
    for (i, &p) in preds_h.iter().enumerate() {
        let tgt = targets(g, e, i + 1, n)?;
        let diff = g.sub(p, tgt)?;
        let err = g.row_sq_norm(diff);
        acc = Some(match acc {
            Some(a) => g.add(a, err)?,
            None => err,
        });
    }
    let mean = g.scale(acc.expect("K >= 1"), 1.0 / (k * d) as f64);
    Ok(g.stop_gradient(mean))
}

/// `1/(T−K) Σ_t (g_unc(u_t) − sg[target_t])²`. `unc` is the `T × 1` column of
/// uncertainty scalars.
pub fn fas_uncertainty(g: &mut Graph, unc: Var, preds_h: &[Var], e: Var) -> Result<Var> {
    let t = g.shape(e).0;
    if g.shape(unc) != (t, 1) {
        return Err(Error::Shape {
            map: "uncertainty scalar".into(),
            expected: format!("{t}x1"),
            got: format!("{:?}", g.shape(unc)),
        });
    }
    let target = uncertainty_target(g, preds_h, e)?;
    let n = t - preds_h.len();
    let u = g.slice_rows(unc, 0, n)?;
    let diff = g.sub(u, target)?;
    let s = g.sum_sq(diff);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Binary cross-entropy of presence probabilities against slice labels, with
/// probabilities clamped to `[1e−7, 1 − 1e−7]`.
pub fn fas_occ(g: &mut Graph, m_hat: Var, labels: &[f64]) -> Result<Var> {
    let t = labels.len();
    if t == 0 || g.shape(m_hat) != (t, 1) {
        return Err(Error::validation(format!(
            "presence probabilities {:?} do not match {t} labels",
            g.shape(m_hat)
        )));
    }
    if let Some(p) = g.value(m_hat).data().iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::validation(format!("presence probability {p} outside (0, 1)")));
    }
    if labels.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::validation("slice labels must be 0 or 1"));
    }
    let p = g.clamp(m_hat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let log_q = g.log(q);
    let m = column(g, labels.to_vec());
    let not_m = column(g, labels.iter().map(|v| 1.0 - v).collect());
    let pos = g.mul(m, log_p)?;
    let negs = g.mul(not_m, log_q)?;
    let both = g.add(pos, negs)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / t as f64))
}

/// Counterfactual invariance and effect losses. `labels[t]` marks origin `t`.
pub fn cf_losses(
    g: &mut Graph,
    fact: &[Var],
    cf: &[Var],
    e: Var,
    labels: &[f64],
    delta: f64,
    epsilon: f64,
) -> Result<(Var, Var)> {
    let (t, d) = g.shape(e);
    let k = fact.len();
    check_horizon(t, k)?;
    if cf.len() != k {
        return Err(Error::validation("factual and counterfactual horizons differ"));
    }
    if labels.len() != t {
        return Err(Error::validation(format!(
            "{} labels for a sequence of {t} slices",
            labels.len()
        )));
    }
    let n = t - k;
    check_preds(g, fact, n, d, "factual prediction")?;
    check_preds(g, cf, n, d, "counterfactual prediction")?;
    let m: Vec<f64> = labels[..n].to_vec();
    let pos: f64 = m.iter().sum();
    let neg = n as f64 - pos;
    let m_col = column(g, m.clone());
    let not_m_col = column(g, m.iter().map(|v| 1.0 - v).collect());
    let mut inv_parts = Vec::with_capacity(k);
    let mut eff_parts = Vec::with_capacity(k);
    for i in 0..k {
        let diff = g.sub(fact[i], cf[i])?;
        let dist = g.row_sq_norm(diff);
        let w = g.mul(not_m_col, dist)?;
        inv_parts.push(g.sum(w));

        let tgt = targets(g, e, i + 1, n)?;
        let df = g.sub(fact[i], tgt)?;
        let l_fact = g.row_sq_norm(df);
        let dc = g.sub(cf[i], tgt)?;
        let l_cf = g.row_sq_norm(dc);
        let gap = g.sub(l_fact, l_cf)?;
        let gap = g.add_scalar(gap, delta);
        let hinge = g.relu(gap);
        let w = g.mul(m_col, hinge)?;
        eff_parts.push(g.sum(w));
    }
    let inv = sum_scalars(g, &inv_parts)?;
    let inv = g.scale(inv, 1.0 / (k as f64 * neg + epsilon));
    let eff = sum_scalars(g, &eff_parts)?;
    let eff = g.scale(eff, 1.0 / (k as f64 * pos + epsilon));
    Ok((inv, eff))
}

/// Mean negative log-probability over positions where `mask` is set.
pub fn ctrg_loss(g: &mut Graph, logp: Var, mask: &[bool]) -> Result<Var> {
    if g.shape(logp) != (mask.len(), 1) {
        return Err(Error::validation(format!(
            "log-probabilities {:?} do not match a mask of {}",
            g.shape(logp),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::validation("report mask selects no positions"));
    }
    let w = column(g, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let picked = g.mul(w, logp)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / count as f64))
}

/// `(1/T) Σ_t ‖r_t − e_t‖²`.
pub fn recon_loss(g: &mut Graph, recon: Var, e: Var) -> Result<Var> {
    let t = g.shape(e).0;
    let diff = g.sub(recon, e)?;
    let s = g.sum_sq(diff);
    Ok(g.scale(s, 1.0 / t as f64))
}

pub(crate) fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut it = parts.iter();
    let mut acc = *it
        .next()
        .ok_or_else(|| Error::validation("sum over zero terms"))?;
    for &p in it {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}
