//! Diagnostics and report-level evaluation of a trained model.

mod baselines;
mod metrics;
mod probes;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{baseline_predict, BaselineKind};
pub use metrics::{
    auprc, average_ranks, bleu1, horizon_metrics, paired_bootstrap, pearson, spearman, HorizonMetrics,
    COSINE_EPS,
};
pub use probes::{fit_probe, zbin, Factor, ProbeResult, ProbeTargets, ProbeTask, NUM_ZBINS};

use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Intervention, Pathway, SliceWorld, WorldOutputs};
use crate::objectives::ctrg_loss;
use crate::phantom::{extract_findings, FindingSet, PhantomStudy, NUM_NON_TARGET_FINDINGS, PROMPT};

/// A held-out study reduced to what evaluation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStudy {
    pub id: String,
    /// `T × d_e` slice features.
    pub e: Tensor,
    pub labels: Vec<u8>,
    pub report: Vec<u32>,
    pub findings: FindingSet,
    pub lesion_positive: bool,
}

impl EvalStudy {
    /// Encodes every slice with the (frozen) slice encoder in `params`.
    pub fn prepare(model: &SliceWorld, params: &ParamStore, studies: &[PhantomStudy]) -> Result<Vec<EvalStudy>> {
        let mut out = studies
            .par_iter()
            .map(|s| {
                let images = model.slice_images(&s.volume)?;
                Ok(EvalStudy {
                    id: s.volume.study_id.clone(),
                    e: model.features(params, &images)?,
                    labels: s.labels.m.clone(),
                    report: s.report.tokens.clone(),
                    findings: s.report.findings.clone(),
                    lesion_positive: s.lesion_positive(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.e.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.e.rows() == 0
    }
}

/// World-pathway predictions `ê^{(w,k)}` from every origin with `t + k ≤ T`;
/// `out[k−1]` holds rows for origins `1..=T−k`.
pub fn world_predictions(
    model: &SliceWorld,
    params: &ParamStore,
    e: &Tensor,
    mode: Intervention,
) -> Result<(WorldOutputs, Vec<Tensor>)> {
    let outputs = model.run_world(params, e, mode)?;
    let t = e.rows();
    let mut g = Graph::inference(params);
    let w = g.constant(outputs.w.clone());
    let mut preds = Vec::new();
    for k in 1..=model.config.horizon {
        if t <= k {
            preds.push(Tensor::zeros(0, e.cols()));
            continue;
        }
        let origins = g.slice_rows(w, 0, t - k)?;
        let p = model.predict_future(&mut g, origins, Pathway::W, k)?;
        preds.push(g.value(p).clone());
    }
    Ok((outputs, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub k: usize,
    pub system: BaselineKind,
    pub mse: f64,
    pub cosine: f64,
    pub pairs: usize,
}

/// Per-study metrics row, one JSON line per study and evaluation kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub study_id: String,
    pub kind: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
}

impl EvalRecord {
    pub fn new(study_id: &str, kind: &str) -> Self {
        Self {
            study_id: study_id.to_string(),
            kind: kind.to_string(),
            metrics: BTreeMap::new(),
            flags: BTreeMap::new(),
        }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

/// Serializes `records` as JSON lines. Non-finite metrics are rejected since
/// JSON cannot hold them.
pub fn records_to_jsonl(records: &[EvalRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        if let Some((k, _)) = r.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("metric `{k}` of study `{}`", r.study_id),
            });
        }
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EvalRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

const PREDICTION_SYSTEMS: [BaselineKind; 3] = [BaselineKind::Model, BaselineKind::Persistence, BaselineKind::LinearExtrapolation];

fn prediction_record(s: &EvalStudy, preds: &[Tensor], kmax: usize) -> EvalRecord {
    let mut rec = EvalRecord::new(&s.id, "prediction");
    for k in 1..=kmax {
        let origins: Vec<usize> = (2..=s.len().saturating_sub(kmax)).collect();
        rec.metrics.insert(format!("k{k}.pairs"), origins.len() as f64);
        rec.metrics.insert(format!("k{k}.dims"), (origins.len() * s.e.cols()) as f64);
        for sys in PREDICTION_SYSTEMS {
            let (mut se, mut cos_sum, mut cos_n) = (0.0, 0.0, 0usize);
            for &t in &origins {
                let target = s.e.row(t - 1 + k);
                let pred = match sys {
                    BaselineKind::Model => preds[k - 1].row(t - 1).to_vec(),
                    kind => baseline_predict(&s.e, t, kind, k).expect("origin >= 2"),
                };
                let m = horizon_metrics(std::slice::from_ref(&pred), &[target.to_vec()]);
                se += m.mse * target.len() as f64;
                if m.cosine_skipped == 0 {
                    cos_sum += m.cosine;
                    cos_n += 1;
                }
            }
            let name = sys.as_str();
            rec.metrics.insert(format!("k{k}.{name}.sse"), se);
            rec.metrics.insert(format!("k{k}.{name}.cos_sum"), cos_sum);
            rec.metrics.insert(format!("k{k}.{name}.cos_n"), cos_n as f64);
        }
    }
    rec
}

/// Per-study prefix-only prediction errors of the model and both continuity
/// baselines. Every system is scored on the same origins `2 ≤ t ≤ T−K`, the
/// positions whose whole future window exists.
pub fn prediction_records(model: &SliceWorld, params: &ParamStore, studies: &[EvalStudy]) -> Result<Vec<EvalRecord>> {
    let kmax = model.config.horizon;
    studies
        .par_iter()
        .map(|s| {
            let (_, preds) = world_predictions(model, params, &s.e, Intervention::None)?;
            Ok(prediction_record(s, &preds, kmax))
        })
        .collect()
}

/// Pools per-study prediction records, in the given order, into one row per
/// horizon and system.
pub fn prediction_rows(records: &[EvalRecord]) -> Result<Vec<PredictionRow>> {
    let recs: Vec<&EvalRecord> = records.iter().filter(|r| r.kind == "prediction").collect();
    let get = |r: &EvalRecord, key: &str| {
        r.metric(key)
            .ok_or_else(|| Error::validation(format!("record of `{}` lacks `{key}`", r.study_id)))
    };
    let mut rows = Vec::new();
    let mut k = 1;
    while recs.first().is_some_and(|r| r.metrics.contains_key(&format!("k{k}.pairs"))) {
        for sys in PREDICTION_SYSTEMS {
            let name = sys.as_str();
            let (mut se, mut dims, mut cos_sum, mut cos_n, mut pairs) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in &recs {
                se += get(r, &format!("k{k}.{name}.sse"))?;
                dims += get(r, &format!("k{k}.dims"))?;
                cos_sum += get(r, &format!("k{k}.{name}.cos_sum"))?;
                cos_n += get(r, &format!("k{k}.{name}.cos_n"))?;
                pairs += get(r, &format!("k{k}.pairs"))?;
            }
            rows.push(PredictionRow {
                k,
                system: sys,
                mse: if dims > 0.0 { se / dims } else { f64::NAN },
                cosine: if cos_n > 0.0 { cos_sum / cos_n } else { f64::NAN },
                pairs: pairs as usize,
            });
        }
        k += 1;
    }
    Ok(rows)
}

pub fn eval_predictions(model: &SliceWorld, params: &ParamStore, studies: &[EvalStudy]) -> Result<Vec<PredictionRow>> {
    prediction_rows(&prediction_records(model, params, studies)?)
}

impl Ord for BaselineKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for BaselineKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-slice factors and probe targets of one study.
struct ProbeRows {
    a: Vec<Vec<f64>>,
    l: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    lesion: Vec<bool>,
    zbin: Vec<usize>,
    /// `d_t` for origins `t ≤ T−K`, aligned with the first rows.
    difficulty: Vec<f64>,
}

fn probe_rows(model: &SliceWorld, params: &ParamStore, s: &EvalStudy) -> Result<ProbeRows> {
    let (out, preds) = world_predictions(model, params, &s.e, Intervention::None)?;
    let t_len = s.len();
    let k = model.config.horizon;
    let difficulty = (0..t_len.saturating_sub(k))
        .map(|t| {
            (1..=k)
                .map(|j| {
                    let p = preds[j - 1].row(t);
                    let tgt = s.e.row(t + j);
                    p.iter().zip(tgt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .sum::<f64>()
                / k as f64
        })
        .collect();
    Ok(ProbeRows {
        a: out.a.to_rows(),
        l: out.l.to_rows(),
        u: out.u.to_rows(),
        lesion: s.labels.iter().map(|&m| m == 1).collect(),
        zbin: (1..=t_len).map(|t| zbin(t, t_len)).collect(),
        difficulty,
    })
}

/// Probe matrix over factors × tasks. Probes are fitted on the first half of
/// `studies` (in id order) and scored on the second half.
pub fn eval_probes(model: &SliceWorld, params: &ParamStore, studies: &[EvalStudy]) -> Result<Vec<ProbeResult>> {
    if studies.len() < 2 {
        return Err(Error::validation("probe evaluation needs at least two studies"));
    }
    let rows = studies
        .par_iter()
        .map(|s| probe_rows(model, params, s))
        .collect::<Result<Vec<_>>>()?;
    let half = rows.len() / 2;
    let (train, test) = rows.split_at(half);
    let gather = |part: &[ProbeRows], f: Factor, task: ProbeTask| -> (Vec<Vec<f64>>, ProbeTargets) {
        let mut x = Vec::new();
        let mut bin = Vec::new();
        let mut cls = Vec::new();
        let mut real = Vec::new();
        for r in part {
            let fx = match f {
                Factor::A => &r.a,
                Factor::L => &r.l,
                Factor::U => &r.u,
            };
            let n = match task {
                ProbeTask::ErrorSpearman => r.difficulty.len(),
                _ => fx.len(),
            };
            x.extend(fx[..n].iter().cloned());
            bin.extend_from_slice(&r.lesion[..n]);
            cls.extend_from_slice(&r.zbin[..n]);
            real.extend_from_slice(&r.difficulty[..n.min(r.difficulty.len())]);
        }
        let y = match task {
            ProbeTask::LesionAuprc => ProbeTargets::Binary(bin),
            ProbeTask::ZbinAccuracy => ProbeTargets::Classes(cls),
            ProbeTask::ErrorSpearman => ProbeTargets::Real(real),
        };
        (x, y)
    };
    let mut out = Vec::new();
    for task in ProbeTask::ALL {
        for f in Factor::ALL {
            let (tx, ty) = gather(train, f, task);
            let (vx, vy) = gather(test, f, task);
            out.push(fit_probe(f, &tx, &ty, &vx, &vy));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSummary {
    /// Mean `ℓ_fact` over lesion origins and horizons.
    pub lesion_fact: f64,
    /// Mean `ℓ_cf` over lesion origins and horizons.
    pub lesion_cf: f64,
    /// Mean `‖ê^{(w,k)} − ê^{(w,cf,k)}‖²` on lesion origins.
    pub lesion_discrepancy: f64,
    /// Same on non-lesion origins.
    pub nonlesion_discrepancy: f64,
    pub lesion_pairs: usize,
    pub nonlesion_pairs: usize,
}

impl CounterfactualSummary {
    pub fn selectivity_ratio(&self) -> f64 {
        self.nonlesion_discrepancy / self.lesion_discrepancy
    }
}

/// Factual versus lesion-zero predictions on origins `t ≤ T−K`.
pub fn eval_counterfactual(model: &SliceWorld, params: &ParamStore, studies: &[EvalStudy]) -> Result<CounterfactualSummary> {
    let k = model.config.horizon;
    let per = studies
        .par_iter()
        .map(|s| -> Result<[f64; 6]> {
            let (_, fact) = world_predictions(model, params, &s.e, Intervention::None)?;
            let (_, cf) = world_predictions(model, params, &s.e, Intervention::LesionZero)?;
            let mut acc = [0.0; 6];
            for t in 0..s.len().saturating_sub(k) {
                let lesion = s.labels[t] == 1;
                for j in 1..=k {
                    let (pf, pc, tgt) = (fact[j - 1].row(t), cf[j - 1].row(t), s.e.row(t + j));
                    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    let disc = sq(pf, pc);
                    if lesion {
                        acc[0] += sq(pf, tgt);
                        acc[1] += sq(pc, tgt);
                        acc[2] += disc;
                        acc[4] += 1.0;
                    } else {
                        acc[3] += disc;
                        acc[5] += 1.0;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tot = [0.0; 6];
    for a in &per {
        for i in 0..6 {
            tot[i] += a[i];
        }
    }
    let div = |x: f64, n: f64| if n > 0.0 { x / n } else { f64::NAN };
    Ok(CounterfactualSummary {
        lesion_fact: div(tot[0], tot[4]),
        lesion_cf: div(tot[1], tot[4]),
        lesion_discrepancy: div(tot[2], tot[4]),
        nonlesion_discrepancy: div(tot[3], tot[5]),
        lesion_pairs: tot[4] as usize,
        nonlesion_pairs: tot[5] as usize,
    })
}

/// Greedy report of one feature sequence under `mode`.
pub fn generate(model: &SliceWorld, params: &ParamStore, e: &Tensor, mode: Intervention) -> Result<Vec<u32>> {
    let out = model.run_world(params, e, mode)?;
    model.generate_report(params, &out.z, &PROMPT)
}

/// Teacher-forced report NLL of one study.
pub fn report_nll(model: &SliceWorld, params: &ParamStore, s: &EvalStudy) -> Result<f64> {
    let out = model.run_world(params, &s.e, Intervention::None)?;
    let mut g = Graph::inference(params);
    let z = g.constant(out.z);
    let tf = model.decoder().teacher_forced(&mut g, z, &PROMPT, &s.report)?;
    let l = ctrg_loss(&mut g, tf.logp, &tf.mask)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReportMetrics {
    pub study_id: String,
    pub nll: f64,
    pub bleu1: f64,
    pub generated: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub nll: f64,
    pub bleu1: f64,
    pub studies: usize,
}

pub fn eval_reports(model: &SliceWorld, params: &ParamStore, studies: &[EvalStudy]) -> Result<Vec<StudyReportMetrics>> {
    studies
        .par_iter()
        .map(|s| {
            let generated = generate(model, params, &s.e, Intervention::None)?;
            Ok(StudyReportMetrics {
                study_id: s.id.clone(),
                nll: report_nll(model, params, s)?,
                bleu1: bleu1(&generated, &s.report),
                generated,
            })
        })
        .collect()
}

pub fn summarize_reports(rows: &[StudyReportMetrics]) -> ReportSummary {
    let n = rows.len().max(1) as f64;
    ReportSummary {
        nll: rows.iter().map(|r| r.nll).sum::<f64>() / n,
        bleu1: rows.iter().map(|r| r.bleu1).sum::<f64>() / n,
        studies: rows.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub study_id: String,
    pub lesion_positive: bool,
    pub mode: Intervention,
    pub target_changed: bool,
    pub mention_removed: bool,
    /// `None` when the factual report has no non-target finding.
    pub preserved_fraction: Option<f64>,
    /// `None` when the factual report already lists every non-target finding.
    pub hallucinated_fraction: Option<f64>,
    /// Set when either report could not be parsed; such records are left out
    /// of aggregates.
    pub flagged: bool,
    pub factual_tokens: Vec<u32>,
    pub intervened_tokens: Vec<u32>,
}

/// Compares the finding sets of a factual and an intervened report.
pub fn compare_findings(factual: &FindingSet, intervened: &FindingSet) -> (bool, bool, Option<f64>, Option<f64>) {
    let target_changed = factual.target != intervened.target;
    let mention_removed = factual.target.iter().any(|f| !intervened.target.contains(f));
    let nf = factual.non_target.len();
    let kept = factual.non_target.intersection(&intervened.non_target).count();
    let preserved = (nf > 0).then(|| kept as f64 / nf as f64);
    let absent = NUM_NON_TARGET_FINDINGS - nf;
    let new = intervened.non_target.difference(&factual.non_target).count();
    let hallucinated = (absent > 0).then(|| new as f64 / absent as f64);
    (target_changed, mention_removed, preserved, hallucinated)
}

pub fn run_intervention_eval(
    model: &SliceWorld,
    params: &ParamStore,
    studies: &[EvalStudy],
    modes: &[Intervention],
) -> Result<Vec<InterventionRecord>> {
    let per = studies
        .par_iter()
        .map(|s| -> Result<Vec<InterventionRecord>> {
            let factual = generate(model, params, &s.e, Intervention::None)?;
            let fact_set = extract_findings(&factual);
            let mut recs = Vec::with_capacity(modes.len());
            for &mode in modes {
                let tokens = if mode == Intervention::None {
                    factual.clone()
                } else {
                    generate(model, params, &s.e, mode)?
                };
                let rec = match (&fact_set, extract_findings(&tokens)) {
                    (Ok(f), Ok(i)) => {
                        let (tc, mr, p, h) = compare_findings(f, &i);
                        InterventionRecord {
                            study_id: s.id.clone(),
                            lesion_positive: s.lesion_positive,
                            mode,
                            target_changed: tc,
                            mention_removed: mr,
                            preserved_fraction: p,
                            hallucinated_fraction: h,
                            flagged: false,
                            factual_tokens: factual.clone(),
                            intervened_tokens: tokens,
                        }
                    }
                    _ => InterventionRecord {
                        study_id: s.id.clone(),
                        lesion_positive: s.lesion_positive,
                        mode,
                        target_changed: false,
                        mention_removed: false,
                        preserved_fraction: None,
                        hallucinated_fraction: None,
                        flagged: true,
                        factual_tokens: factual.clone(),
                        intervened_tokens: tokens,
                    },
                };
                recs.push(rec);
            }
            Ok(recs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionAggregate {
    pub lesion_positive: bool,
    pub mode: Intervention,
    pub studies: usize,
    pub flagged: usize,
    pub target_change: f64,
    pub mention_removal: f64,
    pub preservation: f64,
    pub hallucination: f64,
}

/// Rates per (lesion-positive, mode) group over unflagged records.
pub fn aggregate_interventions(records: &[InterventionRecord]) -> Vec<InterventionAggregate> {
    let mut out = Vec::new();
    for positive in [true, false] {
        let mut modes: Vec<Intervention> = Vec::new();
        for r in records {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        for mode in modes {
            let group: Vec<&InterventionRecord> = records
                .iter()
                .filter(|r| r.lesion_positive == positive && r.mode == mode)
                .collect();
            if group.is_empty() {
                continue;
            }
            let ok: Vec<&&InterventionRecord> = group.iter().filter(|r| !r.flagged).collect();
            let n = ok.len().max(1) as f64;
            let mean_opt = |f: &dyn Fn(&InterventionRecord) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            out.push(InterventionAggregate {
                lesion_positive: positive,
                mode,
                studies: ok.len(),
                flagged: group.len() - ok.len(),
                target_change: ok.iter().filter(|r| r.target_changed).count() as f64 / n,
                mention_removal: ok.iter().filter(|r| r.mention_removed).count() as f64 / n,
                preservation: mean_opt(&|r| r.preserved_fraction),
                hallucination: mean_opt(&|r| r.hallucinated_fraction),
            });
        }
    }
    out
}

/// 0-based indices kept at slice budget `b`: every `⌈1/b⌉`-th slice from the
/// first.
pub fn budget_indices(len: usize, budget: f64) -> Result<Vec<usize>> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::validation(format!("slice budget {budget} outside (0, 1]")));
    }
    let stride = (1.0 / budget).ceil() as usize;
    Ok((0..len).step_by(stride).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub budget: f64,
    pub bleu1: f64,
    pub studies: usize,
    pub skipped: usize,
}

pub fn reduced_slice_eval(
    model: &SliceWorld,
    params: &ParamStore,
    studies: &[EvalStudy],
    budgets: &[f64],
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for &b in budgets {
        let scores = studies
            .par_iter()
            .map(|s| -> Result<Option<f64>> {
                let idx = budget_indices(s.len(), b)?;
                if idx.is_empty() {
                    return Ok(None);
                }
                let sub = Tensor::from_rows(&idx.iter().map(|&i| s.e.row(i).to_vec()).collect::<Vec<_>>())?;
                let gen = generate(model, params, &sub, Intervention::None)?;
                Ok(Some(bleu1(&gen, &s.report)))
            })
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        rows.push(RobustnessRow {
            budget: b,
            bleu1: ok.iter().sum::<f64>() / ok.len().max(1) as f64,
            studies: ok.len(),
            skipped: scores.len() - ok.len(),
        });
    }
    Ok(rows)
}

/// Minimal CSV rendering for flat numeric tables.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn fmt_f(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.10}").expect("string write");
    s
}

pub fn prediction_csv(rows: &[PredictionRow]) -> String {
    to_csv(
        &["k", "system", "mse", "cosine", "pairs"],
        &rows
            .iter()
            .map(|r| vec![r.k.to_string(), r.system.as_str().into(), fmt_f(r.mse), fmt_f(r.cosine), r.pairs.to_string()])
            .collect::<Vec<_>>(),
    )
}

pub fn probe_csv(rows: &[ProbeResult]) -> String {
    to_csv(
        &["task", "factor", "score", "baseline"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.task.as_str().into(),
                    r.factor.as_str().into(),
                    r.score.map_or_else(|| "skip".into(), fmt_f),
                    fmt_f(r.baseline_score),
                ]
            })
            .collect::<Vec<_>>(),
    )
}

pub fn intervention_csv(rows: &[InterventionAggregate]) -> String {
    to_csv(
        &["group", "mode", "studies", "flagged", "target_change", "mention_removal", "preservation", "hallucination"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    if r.lesion_positive { "positive" } else { "negative" }.into(),
                    r.mode.as_str().into(),
                    r.studies.to_string(),
                    r.flagged.to_string(),
                    fmt_f(r.target_change),
                    fmt_f(r.mention_removal),
                    fmt_f(r.preservation),
                    fmt_f(r.hallucination),
                ]
            })
            .collect::<Vec<_>>(),
    )
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    to_csv(
        &["budget", "bleu1", "studies", "skipped"],
        &rows
            .iter()
            .map(|r| vec![fmt_f(r.budget), fmt_f(r.bleu1), r.studies.to_string(), r.skipped.to_string()])
            .collect::<Vec<_>>(),
    )
}

pub fn report_records(rows: &[StudyReportMetrics]) -> Vec<EvalRecord> {
    rows.iter()
        .map(|r| {
            let mut rec = EvalRecord::new(&r.study_id, "report");
            rec.metrics.insert("nll".into(), r.nll);
            rec.metrics.insert("bleu1".into(), r.bleu1);
            rec
        })
        .collect()
}

pub fn intervention_records(rows: &[InterventionRecord]) -> Vec<EvalRecord> {
    rows.iter()
        .map(|r| {
            let mut rec = EvalRecord::new(&r.study_id, &format!("intervention.{}", r.mode.as_str()));
            rec.flags.insert("lesion_positive".into(), r.lesion_positive);
            rec.flags.insert("target_changed".into(), r.target_changed);
            rec.flags.insert("mention_removed".into(), r.mention_removed);
            rec.flags.insert("flagged".into(), r.flagged);
            if let Some(p) = r.preserved_fraction {
                rec.metrics.insert("preserved".into(), p);
            }
            if let Some(h) = r.hallucinated_fraction {
                rec.metrics.insert("hallucinated".into(), h);
            }
            rec
        })
        .collect()
}

/// Per-study values of `metric` from records of `kind`, keyed by study id.
pub fn metric_by_study(records: &[EvalRecord], kind: &str, metric: &str) -> BTreeMap<String, f64> {
    records
        .iter()
        .filter(|r| r.kind == kind)
        .filter_map(|r| r.metric(metric).map(|v| (r.study_id.clone(), v)))
        .collect()
}
