//! Training objectives and their stage-gated composition.

mod terms;

use serde::{Deserialize, Serialize};

pub use terms::{
    cf_losses, ctrg_loss, fas_occ, fas_smooth, fas_sparse, fas_uncertainty, mfp_loss, recon_loss,
    uncertainty_target, PROB_CLAMP,
};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Intervention, Pathway, SliceWorld};
use crate::phantom::PROMPT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_mfp: f64,
    pub alpha_fas: f64,
    pub alpha_cf: f64,
    pub alpha_ctrg: f64,
    /// Gate of the current-slice reconstruction objective (off by default).
    pub alpha_recon: f64,
    pub lambda_h: f64,
    pub lambda_w: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    pub lambda_unc: f64,
    pub lambda_occ: f64,
    pub lambda_inv: f64,
    pub lambda_eff: f64,
    pub horizon: usize,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_mfp: 1.0,
            alpha_fas: 1.0,
            alpha_cf: 1.0,
            alpha_ctrg: 1.0,
            alpha_recon: 0.0,
            lambda_h: 1.0,
            lambda_w: 1.0,
            lambda_smooth: 1.0,
            lambda_sparse: 1.0,
            lambda_unc: 1.0,
            lambda_occ: 1.0,
            lambda_inv: 1.0,
            lambda_eff: 1.0,
            horizon: 5,
            delta: 0.1,
            epsilon: 1e-8,
        }
    }
}

/// Sub-terms in a fixed order: name, gate, weight.
type Weighted = [(&'static str, f64, f64, Option<Var>); 10];

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_mfp,
            self.alpha_fas,
            self.alpha_cf,
            self.alpha_ctrg,
            self.alpha_recon,
            self.lambda_h,
            self.lambda_w,
            self.lambda_smooth,
            self.lambda_sparse,
            self.lambda_unc,
            self.lambda_occ,
            self.lambda_inv,
            self.lambda_eff,
            self.delta,
            self.epsilon,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("loss weights, margin and epsilon must be finite and nonnegative"));
        }
        if self.horizon == 0 {
            return Err(Error::validation("loss horizon K must be at least 1"));
        }
        Ok(())
    }

    /// Effective gate of each objective family in `stage`.
    pub fn gates(&self, stage: Stage) -> Gates {
        match stage {
            Stage::Pretrain => Gates {
                mfp: self.alpha_mfp,
                fas: self.alpha_fas,
                cf: self.alpha_cf,
                recon: self.alpha_recon,
                ctrg: 0.0,
            },
            Stage::Finetune => Gates {
                mfp: 0.0,
                fas: 0.0,
                cf: 0.0,
                recon: 0.0,
                ctrg: self.alpha_ctrg,
            },
        }
    }

    fn weighted(&self, t: &LossTerms, gates: &Gates) -> Weighted {
        [
            ("mfp_h", gates.mfp, self.lambda_h, t.mfp_h),
            ("mfp_w", gates.mfp, self.lambda_w, t.mfp_w),
            ("smooth", gates.fas, self.lambda_smooth, t.smooth),
            ("sparse", gates.fas, self.lambda_sparse, t.sparse),
            ("unc", gates.fas, self.lambda_unc, t.unc),
            ("occ", gates.fas, self.lambda_occ, t.occ),
            ("cf_inv", gates.cf, self.lambda_inv, t.cf_inv),
            ("cf_eff", gates.cf, self.lambda_eff, t.cf_eff),
            ("recon", gates.recon, 1.0, t.recon),
            ("ctrg", gates.ctrg, 1.0, t.ctrg),
        ]
    }

    /// Names of the sub-terms that contribute to the total in `stage`.
    pub fn active_terms(&self, stage: Stage) -> Vec<&'static str> {
        let gates = self.gates(stage);
        self.weighted(&LossTerms::default(), &gates)
            .iter()
            .filter(|(_, a, l, _)| a * l > 0.0)
            .map(|(n, ..)| *n)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gates {
    pub mfp: f64,
    pub fas: f64,
    pub cf: f64,
    pub recon: f64,
    pub ctrg: f64,
}

/// Loss sub-term nodes of one study; absent terms were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub mfp_h: Option<Var>,
    pub mfp_w: Option<Var>,
    pub smooth: Option<Var>,
    pub sparse: Option<Var>,
    pub unc: Option<Var>,
    pub occ: Option<Var>,
    pub cf_inv: Option<Var>,
    pub cf_eff: Option<Var>,
    pub recon: Option<Var>,
    pub ctrg: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mfp_h: Option<f64>,
    pub mfp_w: Option<f64>,
    pub smooth: Option<f64>,
    pub sparse: Option<f64>,
    pub unc: Option<f64>,
    pub occ: Option<f64>,
    pub cf_inv: Option<f64>,
    pub cf_eff: Option<f64>,
    pub recon: Option<f64>,
    pub ctrg: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn slot(&mut self, name: &str) -> &mut Option<f64> {
        match name {
            "mfp_h" => &mut self.mfp_h,
            "mfp_w" => &mut self.mfp_w,
            "smooth" => &mut self.smooth,
            "sparse" => &mut self.sparse,
            "unc" => &mut self.unc,
            "occ" => &mut self.occ,
            "cf_inv" => &mut self.cf_inv,
            "cf_eff" => &mut self.cf_eff,
            "recon" => &mut self.recon,
            _ => &mut self.ctrg,
        }
    }

    pub fn terms(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("mfp_h", self.mfp_h),
            ("mfp_w", self.mfp_w),
            ("smooth", self.smooth),
            ("sparse", self.sparse),
            ("unc", self.unc),
            ("occ", self.occ),
            ("cf_inv", self.cf_inv),
            ("cf_eff", self.cf_eff),
            ("recon", self.recon),
            ("ctrg", self.ctrg),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|(_, v)| v.is_none_or(f64::is_finite))
    }

    /// Element-wise mean over studies, in the given order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if items.is_empty() {
            return out;
        }
        let n = items.len() as f64;
        for (name, _) in LossBreakdown::default().terms() {
            let vals: Vec<f64> = items
                .iter()
                .filter_map(|b| b.terms().into_iter().find(|(k, _)| *k == name).and_then(|(_, v)| v))
                .collect();
            if !vals.is_empty() {
                *out.slot(name) = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out.total = items.iter().map(|b| b.total).sum::<f64>() / n;
        out
    }
}

/// `Σ gate · weight · term` over the terms active in `stage`. A term that is
/// active but missing is a validation error; inactive terms are recorded in
/// the breakdown but do not enter the total.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &LossConfig, stage: Stage) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let gates = cfg.gates(stage);
    let mut bd = LossBreakdown::default();
    let mut parts = Vec::new();
    for (name, gate, weight, var) in cfg.weighted(terms, &gates) {
        if let Some(v) = var {
            let value = g.value(v).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { term: name.into() });
            }
            *bd.slot(name) = Some(value);
        }
        let c = gate * weight;
        if c > 0.0 {
            let v = var.ok_or_else(|| {
                Error::validation(format!("{} stage needs the `{name}` term", stage.as_str()))
            })?;
            parts.push(if c == 1.0 { v } else { g.scale(v, c) });
        }
    }
    if parts.is_empty() {
        return Err(Error::validation(format!(
            "no active loss terms in the {} stage",
            stage.as_str()
        )));
    }
    let total = terms::sum_scalars(g, &parts)?;
    bd.total = g.value(total).item();
    Ok((total, bd))
}

/// Pretraining sub-terms of one study computed from slice features `e`
/// (`T × d_e`) and slice labels. Only terms needed by the active gates are
/// built.
pub fn pretrain_terms(
    g: &mut Graph,
    model: &SliceWorld,
    e: Var,
    labels: &[f64],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let gates = cfg.gates(Stage::Pretrain);
    let k = cfg.horizon;
    if k > model.config.horizon {
        return Err(Error::validation(format!(
            "loss horizon {k} exceeds the model's {} prediction heads",
            model.config.horizon
        )));
    }
    let t = g.shape(e).0;
    if labels.len() != t {
        return Err(Error::validation(format!("{} labels for {t} slices", labels.len())));
    }
    let on = |gate: f64, w: f64| gate * w > 0.0;
    let need_h = on(gates.mfp, cfg.lambda_h) || on(gates.fas, cfg.lambda_unc);
    let need_w = on(gates.mfp, cfg.lambda_w) || gates.cf > 0.0;
    let need_state = gates.fas > 0.0 || need_w;
    if (need_h || need_w || gates.cf > 0.0) && t <= k {
        return Err(Error::TooShort { len: t, horizon: k });
    }

    let h = model.prefix_states(g, e)?;
    let mut out = LossTerms::default();
    if gates.recon > 0.0 {
        let r = model.reconstruct(g, h)?;
        out.recon = Some(recon_loss(g, r, e)?);
    }
    let n = t.saturating_sub(k);
    let mut preds_h = Vec::new();
    if need_h {
        let origins = g.slice_rows(h, 0, n)?;
        for j in 1..=k {
            preds_h.push(model.predict_future(g, origins, Pathway::H, j)?);
        }
        if on(gates.mfp, cfg.lambda_h) {
            out.mfp_h = Some(mfp_loss(g, e, &preds_h)?);
        }
    }
    if !need_state {
        return Ok(out);
    }
    let st = model.decompose_state(g, h)?;
    let mut preds_w = Vec::new();
    if need_w {
        let w = model.world_tokens(g, &st)?;
        let origins = g.slice_rows(w, 0, n)?;
        for j in 1..=k {
            preds_w.push(model.predict_future(g, origins, Pathway::W, j)?);
        }
        if on(gates.mfp, cfg.lambda_w) {
            out.mfp_w = Some(mfp_loss(g, e, &preds_w)?);
        }
    }
    if gates.fas > 0.0 {
        out.smooth = Some(fas_smooth(g, st.a)?);
        out.sparse = Some(fas_sparse(g, st.l)?);
        out.occ = Some(fas_occ(g, st.m_hat, labels)?);
        if on(gates.fas, cfg.lambda_unc) {
            let unc = model.uncertainty_scalar(g, st.u)?;
            out.unc = Some(fas_uncertainty(g, unc, &preds_h, e)?);
        }
    }
    if gates.cf > 0.0 {
        let st_cf = model.intervene(g, &st, Intervention::LesionZero)?;
        let w_cf = model.world_tokens(g, &st_cf)?;
        let origins = g.slice_rows(w_cf, 0, n)?;
        let mut preds_cf = Vec::with_capacity(k);
        for j in 1..=k {
            preds_cf.push(model.predict_future(g, origins, Pathway::W, j)?);
        }
        let (inv, eff) = cf_losses(g, &preds_w, &preds_cf, e, labels, cfg.delta, cfg.epsilon)?;
        out.cf_inv = Some(inv);
        out.cf_eff = Some(eff);
    }
    Ok(out)
}

/// Report likelihood term from language tokens `z` (`T × d_z`).
pub fn finetune_terms(g: &mut Graph, model: &SliceWorld, z: Var, report: &[u32]) -> Result<LossTerms> {
    let tf = model.decoder().teacher_forced(g, z, &PROMPT, report)?;
    Ok(LossTerms {
        ctrg: Some(ctrg_loss(g, tf.logp, &tf.mask)?),
        ..LossTerms::default()
    })
}
