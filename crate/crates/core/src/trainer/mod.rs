//! Two-stage optimization: world-model pretraining on slice sequences, then
//! report fine-tuning of the language interface.

mod adamw;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWConfig};

use crate::diffcore::{checkpoint, grad, Gradients, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{groups, Intervention, SliceWorld};
use crate::objectives::{finetune_terms, pretrain_terms, total_loss, LossBreakdown, LossConfig, Stage};
use crate::phantom::{PhantomStudy, RgbImage};

/// Pretraining variants, from no pretraining to the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Direct,
    Recon,
    Mfp,
    Fas,
    Full,
}

impl AblationMode {
    pub const LADDER: [AblationMode; 5] = [Self::Direct, Self::Recon, Self::Mfp, Self::Fas, Self::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Recon => "recon",
            Self::Mfp => "mfp",
            Self::Fas => "fas",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown ablation mode `{s}`")))
    }

    pub fn pretrains(self) -> bool {
        self != Self::Direct
    }

    /// `base` with the pretraining gates this variant uses.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let mut c = base.clone();
        match self {
            Self::Direct | Self::Full => {}
            Self::Recon => {
                c.alpha_mfp = 0.0;
                c.alpha_fas = 0.0;
                c.alpha_cf = 0.0;
                c.alpha_recon = 1.0;
            }
            Self::Mfp => {
                c.alpha_fas = 0.0;
                c.alpha_cf = 0.0;
            }
            Self::Fas => c.alpha_cf = 0.0,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Longer studies are uniformly subsampled to this many slices.
    pub max_seq_len: usize,
    /// Parameter-group prefixes held fixed in this stage.
    pub frozen: Vec<String>,
    pub seed: u64,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for the 0-based update `step` of `total`.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::toy_pretrain()
    }
}

impl StageConfig {
    pub fn toy_pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: 2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            grad_accum: 1,
            epochs: 10,
            max_seq_len: 196,
            frozen: vec![groups::SLICE_ENCODER.to_string()],
            seed: 0,
            max_steps: None,
            schedule: LrSchedule::Cosine,
        }
    }

    pub fn toy_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: 2e-3,
            batch_size: 4,
            epochs: 3,
            frozen: groups::FINETUNE_FROZEN.iter().map(|s| s.to_string()).collect(),
            ..Self::toy_pretrain()
        }
    }

    pub fn full_pretrain() -> Self {
        Self {
            lr: 1e-4,
            epochs: 3,
            schedule: LrSchedule::Constant,
            ..Self::toy_pretrain()
        }
    }

    pub fn full_finetune() -> Self {
        Self {
            lr: 2e-5,
            schedule: LrSchedule::Constant,
            batch_size: 1,
            grad_accum: 2,
            max_seq_len: 480,
            ..Self::toy_finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("learning rate and weight decay must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::validation("AdamW betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_seq_len == 0 {
            return Err(Error::validation("batch size, accumulation steps and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Applies the freeze list of `cfg` to `store`; every listed prefix must
/// match at least one group.
pub fn apply_freeze(store: &mut ParamStore, frozen: &[String]) -> Result<()> {
    store.freeze_all(false);
    for prefix in frozen {
        if store.set_frozen_prefix(prefix, true) == 0 {
            return Err(Error::UnknownParam(prefix.clone()));
        }
    }
    Ok(())
}

/// One study as seen by the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub images: Vec<RgbImage>,
    pub labels: Vec<f64>,
    pub report: Vec<u32>,
}

impl Example {
    pub fn from_study(model: &SliceWorld, study: &PhantomStudy, max_seq_len: usize) -> Result<Self> {
        let images = model.slice_images(&study.volume)?;
        let idx = subsample_indices(images.len(), max_seq_len);
        Ok(Self {
            id: study.volume.study_id.clone(),
            images: idx.iter().map(|&i| images[i].clone()).collect(),
            labels: idx.iter().map(|&i| f64::from(study.labels.m[i])).collect(),
            report: study.report.tokens.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn prepare_examples(model: &SliceWorld, studies: &[PhantomStudy], max_seq_len: usize) -> Result<Vec<Example>> {
    studies
        .par_iter()
        .map(|s| Example::from_study(model, s, max_seq_len))
        .collect()
}

/// Evenly spaced indices when `len` exceeds `max`, identity otherwise.
pub fn subsample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    if max == 1 {
        return vec![0];
    }
    (0..max)
        .map(|i| ((i * (len - 1)) as f64 / (max - 1) as f64).round() as usize)
        .collect()
}

/// What the graph receives for each study: raw images, fixed slice features,
/// or fixed world tokens, depending on which groups are frozen.
#[derive(Clone, Debug)]
enum Input {
    Images,
    Features(Tensor),
    Tokens(Tensor),
}

fn all_frozen(store: &ParamStore, prefix: &str) -> bool {
    let mut any = false;
    for g in store.groups() {
        if g.name == prefix || g.name.starts_with(&format!("{prefix}.")) {
            any = true;
            if !g.frozen {
                return false;
            }
        }
    }
    any
}

fn cache_inputs(model: &SliceWorld, params: &ParamStore, examples: &[Example], stage: Stage) -> Result<Vec<Input>> {
    let encoder_frozen = all_frozen(params, groups::SLICE_ENCODER);
    let world_frozen = groups::FINETUNE_FROZEN.iter().all(|p| all_frozen(params, p));
    examples
        .par_iter()
        .map(|ex| {
            if !encoder_frozen {
                return Ok(Input::Images);
            }
            let e = model.features(params, &ex.images)?;
            if stage == Stage::Finetune && world_frozen {
                let out = model.run_world(params, &e, Intervention::None)?;
                return Ok(Input::Tokens(out.w));
            }
            Ok(Input::Features(e))
        })
        .collect()
}

fn study_loss(
    g: &mut Graph,
    model: &SliceWorld,
    ex: &Example,
    input: &Input,
    loss_cfg: &LossConfig,
    stage: Stage,
) -> Result<(Var, LossBreakdown)> {
    let terms = match stage {
        Stage::Pretrain => {
            let e = match input {
                Input::Images => model.encode_slices(g, &ex.images)?,
                Input::Features(e) | Input::Tokens(e) => g.constant(e.clone()),
            };
            pretrain_terms(g, model, e, &ex.labels, loss_cfg)?
        }
        Stage::Finetune => {
            let w = match input {
                Input::Tokens(w) => g.constant(w.clone()),
                other => {
                    let e = match other {
                        Input::Features(e) => g.constant(e.clone()),
                        _ => model.encode_slices(g, &ex.images)?,
                    };
                    let h = model.prefix_states(g, e)?;
                    let st = model.decompose_state(g, h)?;
                    model.world_tokens(g, &st)?
                }
            };
            let z = model.language_tokens(g, w)?;
            finetune_terms(g, model, z, &ex.report)?
        }
    };
    total_loss(g, &terms, loss_cfg, stage)
}

fn study_grad(
    model: &SliceWorld,
    params: &ParamStore,
    ex: &Example,
    input: &Input,
    loss_cfg: &LossConfig,
    stage: Stage,
) -> Result<(LossBreakdown, Gradients)> {
    let mut bd = None;
    let (_, grads) = grad(params, |g| {
        let (loss, b) = study_loss(g, model, ex, input, loss_cfg, stage)?;
        bd = Some(b);
        Ok(loss)
    })
    .map_err(|e| match e {
        Error::NonFinite { term } => Error::NonFinite {
            term: format!("{term} of study `{}`", ex.id),
        },
        other => other,
    })?;
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            term: format!("gradient of study `{}`", ex.id),
        });
    }
    Ok((bd.expect("loss closure ran"), grads))
}

/// Mean loss of `examples` without updating anything.
pub fn evaluate_loss(
    model: &SliceWorld,
    params: &ParamStore,
    examples: &[Example],
    loss_cfg: &LossConfig,
    stage: Stage,
) -> Result<LossBreakdown> {
    let inputs = cache_inputs(model, params, examples, stage)?;
    let items = examples
        .par_iter()
        .zip(&inputs)
        .map(|(ex, input)| {
            let mut g = Graph::inference(params);
            study_loss(&mut g, model, ex, input, loss_cfg, stage).map(|(_, b)| b)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub studies: usize,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<StepRecord>,
    /// Studies dropped because they are not longer than the horizon.
    pub skipped: Vec<String>,
}

/// One optimizer update from `batch`, split into `grad_accum` micro-batches.
/// The applied gradient is the mean per-study gradient over the whole batch,
/// reduced in ascending study-id order.
fn train_step(
    model: &SliceWorld,
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[(&Example, &Input)],
    loss_cfg: &LossConfig,
    stage: Stage,
    grad_accum: usize,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::validation("empty training batch"));
    }
    let mut order: Vec<&(&Example, &Input)> = batch.iter().collect();
    order.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let micro = order.len().div_ceil(grad_accum.max(1));
    let mut acc = Gradients::zeros_like(params);
    let mut breakdowns = Vec::with_capacity(order.len());
    for chunk in order.chunks(micro) {
        let results = chunk
            .par_iter()
            .map(|(ex, input)| study_grad(model, params, ex, input, loss_cfg, stage))
            .collect::<Vec<_>>();
        for r in results {
            let (bd, grads) = r?;
            acc.accumulate(&grads);
            breakdowns.push(bd);
        }
    }
    acc.scale(1.0 / order.len() as f64);
    opt.apply(params, &acc)?;
    Ok(LossBreakdown::mean(&breakdowns))
}

/// Per-step optimizer input for the public step API.
pub fn step(
    model: &SliceWorld,
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[Example],
    loss_cfg: &LossConfig,
    stage_cfg: &StageConfig,
) -> Result<LossBreakdown> {
    let inputs = cache_inputs(model, params, batch, stage_cfg.stage)?;
    let pairs: Vec<(&Example, &Input)> = batch.iter().zip(&inputs).collect();
    train_step(model, params, opt, &pairs, loss_cfg, stage_cfg.stage, stage_cfg.grad_accum)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000 ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

struct Logger {
    file: Option<fs::File>,
}

impl Logger {
    fn new(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train_log.jsonl");
                Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }
}

/// Runs all epochs of one stage on `params`. Studies with `T ≤ K` are skipped
/// in pretraining. On a non-finite loss or gradient, the last good parameters
/// are saved to `out/last_good` (when `out` is given) and the error names the
/// offending study.
pub fn run_stage(
    model: &SliceWorld,
    mut params: ParamStore,
    examples: &[Example],
    loss_cfg: &LossConfig,
    stage_cfg: &StageConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    stage_cfg.validate()?;
    loss_cfg.validate()?;
    let stage = stage_cfg.stage;
    apply_freeze(&mut params, &stage_cfg.frozen)?;
    let mut skipped = Vec::new();
    let mut usable: Vec<&Example> = Vec::with_capacity(examples.len());
    for ex in examples {
        if stage == Stage::Pretrain && ex.len() <= loss_cfg.horizon {
            skipped.push(ex.id.clone());
        } else {
            usable.push(ex);
        }
    }
    if usable.is_empty() {
        return Err(Error::validation("no usable training studies"));
    }
    let owned: Vec<Example> = usable.iter().map(|e| (*e).clone()).collect();
    let inputs = cache_inputs(model, &params, &owned, stage)?;
    let mut opt = AdamW::new(&params, stage_cfg.adamw());
    let mut logger = Logger::new(out)?;
    let per_step = stage_cfg.batch_size * stage_cfg.grad_accum;
    let mut log = Vec::new();
    let start = Instant::now();
    let mut step_no = 0;
    let mut total = stage_cfg.epochs * owned.len().div_ceil(per_step);
    if let Some(m) = stage_cfg.max_steps {
        total = total.min(m);
    }
    'epochs: for epoch in 0..stage_cfg.epochs {
        let mut order: Vec<usize> = (0..owned.len()).collect();
        order.shuffle(&mut epoch_rng(stage_cfg.seed, epoch));
        for chunk in order.chunks(per_step) {
            if stage_cfg.max_steps.is_some_and(|m| step_no >= m) {
                break 'epochs;
            }
            let batch: Vec<(&Example, &Input)> = chunk.iter().map(|&i| (&owned[i], &inputs[i])).collect();
            let last_good = params.clone();
            opt.config.lr = stage_cfg.schedule.lr(stage_cfg.lr, step_no, total);
            match train_step(model, &mut params, &mut opt, &batch, loss_cfg, stage, stage_cfg.grad_accum) {
                Ok(loss) => {
                    step_no += 1;
                    let rec = StepRecord {
                        step: step_no,
                        epoch,
                        stage,
                        studies: batch.len(),
                        loss,
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    };
                    logger.write(&rec)?;
                    log.push(rec);
                }
                Err(e) => {
                    if let (Error::NonFinite { .. }, Some(dir)) = (&e, out) {
                        let meta = serde_json::json!({ "aborted": e.to_string() });
                        checkpoint::save(&dir.join("last_good"), &last_good, stage.as_str(), step_no as u64, meta)?;
                    }
                    return Err(e);
                }
            }
        }
    }
    if let Some(dir) = out {
        let meta = serde_json::json!({ "seed": stage_cfg.seed, "skipped": skipped.len() });
        checkpoint::save(&dir.join("checkpoint"), &params, stage.as_str(), step_no as u64, meta)?;
    }
    Ok(TrainOutcome { params, log, skipped })
}

/// World-model pretraining of `mode` from fresh parameters seeded by the
/// stage seed.
pub fn pretrain(
    model: &SliceWorld,
    examples: &[Example],
    loss_cfg: &LossConfig,
    stage_cfg: &StageConfig,
    mode: AblationMode,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if !mode.pretrains() {
        return Err(Error::validation("the direct variant has no pretraining stage"));
    }
    if stage_cfg.stage != Stage::Pretrain {
        return Err(Error::validation("pretrain needs a pretrain stage config"));
    }
    let mut params = model.init_params(stage_cfg.seed)?;
    let images: Vec<&[RgbImage]> = examples.iter().map(|e| e.images.as_slice()).collect();
    model.calibrate_features(&mut params, &images)?;
    run_stage(model, params, examples, &mode.loss_config(loss_cfg), stage_cfg, out)
}

/// Report fine-tuning. Pretrained variants need `pretrained`; the direct
/// variant starts from fresh parameters and trains everything except the
/// slice encoder.
pub fn finetune(
    model: &SliceWorld,
    pretrained: Option<ParamStore>,
    examples: &[Example],
    loss_cfg: &LossConfig,
    stage_cfg: &StageConfig,
    mode: AblationMode,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if stage_cfg.stage != Stage::Finetune {
        return Err(Error::validation("finetune needs a finetune stage config"));
    }
    let (params, cfg) = match (mode, pretrained) {
        (AblationMode::Direct, _) => {
            let cfg = StageConfig {
                frozen: vec![groups::SLICE_ENCODER.to_string()],
                ..stage_cfg.clone()
            };
            let mut params = model.init_params(stage_cfg.seed)?;
            let images: Vec<&[RgbImage]> = examples.iter().map(|e| e.images.as_slice()).collect();
            model.calibrate_features(&mut params, &images)?;
            (params, cfg)
        }
        (_, Some(p)) => (p, stage_cfg.clone()),
        (_, None) => {
            return Err(Error::validation(format!(
                "the `{}` variant needs a pretrained checkpoint",
                mode.as_str()
            )))
        }
    };
    run_stage(model, params, examples, loss_cfg, &cfg, out)
}
