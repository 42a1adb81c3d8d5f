//! The pipeline commands. Each writes its artifacts into a fresh run
//! directory next to the resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sliceworld::diffcore::{checkpoint, ParamStore};
use sliceworld::eval::{
    aggregate_interventions, eval_counterfactual, eval_probes, eval_reports, intervention_csv, intervention_records,
    metric_by_study, paired_bootstrap, prediction_csv, prediction_records, prediction_rows, probe_csv,
    records_from_jsonl, records_to_jsonl, reduced_slice_eval, report_records, robustness_csv, summarize_reports,
    EvalRecord, EvalStudy,
};
use sliceworld::model::SliceWorld;
use sliceworld::phantom::{generate_dataset, generate_split, read_dataset, write_dataset, PhantomStudy, SPLITS};
use sliceworld::trainer::{finetune, prepare_examples, pretrain, AblationMode};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    EvalPredict,
    EvalProbes,
    EvalIntervene,
    EvalRobustness,
    EvalSignificance,
    Report,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::EvalPredict => "eval-predict",
            Self::EvalProbes => "eval-probes",
            Self::EvalIntervene => "eval-intervene",
            Self::EvalRobustness => "eval-robustness",
            Self::EvalSignificance => "eval-significance",
            Self::Report => "report",
        }
    }
}

pub const RECORDS_FILE: &str = "eval_records.jsonl";

/// Creates `<root>/<command>-<timestamp>[-n]` and writes the resolved config
/// into it.
pub fn create_run_dir(root: &Path, cmd: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{}-{stamp}", cmd.as_str());
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

/// Runs `cmd` into a new run directory under `root` and returns it.
pub fn run(cmd: Command, cfg: &RunConfig, root: &Path) -> Result<PathBuf> {
    let dir = create_run_dir(root, cmd, cfg)?;
    run_in(cmd, cfg, &dir)?;
    Ok(dir)
}

/// Runs `cmd` with `dir` as its output directory.
pub fn run_in(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<()> {
    match cmd {
        Command::GenData => gen_data(cfg, dir),
        Command::Pretrain => run_pretrain(cfg, dir),
        Command::Finetune => run_finetune(cfg, dir),
        Command::EvalPredict => eval_predict(cfg, dir),
        Command::EvalProbes => eval_probe_battery(cfg, dir),
        Command::EvalIntervene => eval_intervene(cfg, dir),
        Command::EvalRobustness => eval_robustness(cfg, dir),
        Command::EvalSignificance => eval_significance(cfg, dir),
        Command::Report => report(cfg, dir),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn split_count(cfg: &RunConfig, split: &str) -> Result<usize> {
    Ok(match split {
        "pretrain" => cfg.data.counts.pretrain,
        "finetune" => cfg.data.counts.finetune,
        "test" => cfg.data.counts.test,
        other => bail!("unknown split `{other}`"),
    })
}

/// Studies of `split`, read from `data.dir` or generated from the phantom
/// config and run seed.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<PhantomStudy>> {
    match &cfg.data.dir {
        Some(dir) => Ok(read_dataset(dir, Some(split))?.into_iter().map(|t| t.study).collect()),
        None => Ok(generate_split(&cfg.data.phantom, cfg.seed, split, split_count(cfg, split)?)?),
    }
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join("manifest.json").exists() {
        path.to_path_buf()
    } else {
        path.join("checkpoint")
    }
}

pub fn load_params(model: &SliceWorld, cfg: &RunConfig) -> Result<ParamStore> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("this command needs `checkpoint` (a checkpoint or run directory)"))?;
    let mut params = model.init_params(cfg.seed)?;
    checkpoint::load_into(&checkpoint_dir(path), &mut params)?;
    Ok(params)
}

fn eval_studies(model: &SliceWorld, params: &ParamStore, cfg: &RunConfig) -> Result<Vec<EvalStudy>> {
    let mut studies = load_split(cfg, &cfg.eval.split)?;
    if let Some(n) = cfg.eval.max_studies {
        studies.truncate(n);
    }
    if studies.is_empty() {
        bail!("split `{}` has no studies", cfg.eval.split);
    }
    Ok(EvalStudy::prepare(model, params, &studies)?)
}

#[derive(Serialize)]
struct SplitSummary {
    split: String,
    studies: usize,
    positive_studies: usize,
    slices: usize,
    lesion_slices: usize,
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let studies = generate_dataset(&cfg.data.phantom, cfg.seed, &cfg.data.counts)?;
    write_dataset(&dir.join("data"), &studies, Some(&cfg.data.phantom), Some(cfg.seed))?;
    let summary: Vec<SplitSummary> = SPLITS
        .iter()
        .map(|split| {
            let part: Vec<&PhantomStudy> = studies.iter().filter(|t| t.split == *split).map(|t| &t.study).collect();
            SplitSummary {
                split: split.to_string(),
                studies: part.len(),
                positive_studies: part.iter().filter(|s| s.lesion_positive()).count(),
                slices: part.iter().map(|s| s.len()).sum(),
                lesion_slices: part.iter().map(|s| s.labels.m.iter().filter(|&&m| m == 1).count()).sum(),
            }
        })
        .collect();
    write_json(&dir.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct TrainSummary {
    stage: String,
    mode: AblationMode,
    steps: usize,
    skipped: Vec<String>,
    final_loss: Option<f64>,
}

fn run_pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if !cfg.mode.pretrains() {
        bail!("the direct variant has no pretraining stage; run `finetune` instead");
    }
    let model = SliceWorld::new(cfg.model.clone())?;
    let studies = load_split(cfg, "pretrain")?;
    let examples = prepare_examples(&model, &studies, cfg.pretrain.max_seq_len)?;
    let out = pretrain(&model, &examples, &cfg.loss, &cfg.pretrain, cfg.mode, Some(dir))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            stage: "pretrain".into(),
            mode: cfg.mode,
            steps: out.log.len(),
            skipped: out.skipped,
            final_loss: out.log.last().map(|r| r.loss.total),
        },
    )
}

fn run_finetune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = SliceWorld::new(cfg.model.clone())?;
    let pretrained = match cfg.mode {
        AblationMode::Direct => None,
        _ => Some(load_params(&model, cfg).context("finetuning a pretrained variant")?),
    };
    let studies = load_split(cfg, "finetune")?;
    let examples = prepare_examples(&model, &studies, cfg.finetune.max_seq_len)?;
    let out = finetune(&model, pretrained, &examples, &cfg.loss, &cfg.finetune, cfg.mode, Some(dir))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            stage: "finetune".into(),
            mode: cfg.mode,
            steps: out.log.len(),
            skipped: out.skipped,
            final_loss: out.log.last().map(|r| r.loss.total),
        },
    )
}

fn eval_predict(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = SliceWorld::new(cfg.model.clone())?;
    let params = load_params(&model, cfg)?;
    let studies = eval_studies(&model, &params, cfg)?;
    let records = prediction_records(&model, &params, &studies)?;
    write(&dir.join(RECORDS_FILE), &records_to_jsonl(&records)?)?;
    write(&dir.join("horizon.csv"), &prediction_csv(&prediction_rows(&records)?))?;
    write_json(&dir.join("counterfactual.json"), &eval_counterfactual(&model, &params, &studies)?)
}

fn eval_probe_battery(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = SliceWorld::new(cfg.model.clone())?;
    let params = load_params(&model, cfg)?;
    let studies = eval_studies(&model, &params, cfg)?;
    let probes = eval_probes(&model, &params, &studies)?;
    write(&dir.join("probes.csv"), &probe_csv(&probes))?;
    write_json(&dir.join("probes.json"), &probes)
}

fn eval_intervene(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = SliceWorld::new(cfg.model.clone())?;
    let params = load_params(&model, cfg)?;
    let studies = eval_studies(&model, &params, cfg)?;
    let recs = sliceworld::eval::run_intervention_eval(&model, &params, &studies, &cfg.eval.modes)?;
    write(&dir.join(RECORDS_FILE), &records_to_jsonl(&intervention_records(&recs))?)?;
    write(&dir.join("interventions.csv"), &intervention_csv(&aggregate_interventions(&recs)))?;
    let mut lines = String::new();
    for r in &recs {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write(&dir.join("interventions.jsonl"), &lines)
}

fn eval_robustness(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = SliceWorld::new(cfg.model.clone())?;
    let params = load_params(&model, cfg)?;
    let studies = eval_studies(&model, &params, cfg)?;
    let reports = eval_reports(&model, &params, &studies)?;
    write(&dir.join(RECORDS_FILE), &records_to_jsonl(&report_records(&reports))?)?;
    write_json(&dir.join("reports.json"), &summarize_reports(&reports))?;
    write(
        &dir.join("robustness.csv"),
        &robustness_csv(&reduced_slice_eval(&model, &params, &studies, &cfg.eval.budgets)?),
    )
}

fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = if path.is_dir() { path.join(RECORDS_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(records_from_jsonl(&text)?)
}

#[derive(Serialize)]
struct Significance {
    kind: String,
    metric: String,
    higher_is_better: bool,
    studies: usize,
    mean_a: f64,
    mean_b: f64,
    resamples: usize,
    seed: u64,
    /// One-sided: fraction of resamples in which B is not better than A.
    p_value: f64,
}

fn eval_significance(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let e = &cfg.eval;
    let (Some(pa), Some(pb)) = (&e.records_a, &e.records_b) else {
        bail!("eval-significance needs `eval.records_a` and `eval.records_b`");
    };
    let a = metric_by_study(&read_records(pa)?, &e.kind, &e.metric);
    let b = metric_by_study(&read_records(pb)?, &e.kind, &e.metric);
    if a.len() < 2 || a.keys().ne(b.keys()) {
        bail!(
            "records must cover the same studies (at least two) with `{}` of kind `{}`: {} vs {}",
            e.metric,
            e.kind,
            a.len(),
            b.len()
        );
    }
    let sign = if e.higher_is_better { 1.0 } else { -1.0 };
    let va: Vec<f64> = a.values().map(|v| sign * v).collect();
    let vb: Vec<f64> = b.values().map(|v| sign * v).collect();
    let n = va.len() as f64;
    write_json(
        &dir.join("significance.json"),
        &Significance {
            kind: e.kind.clone(),
            metric: e.metric.clone(),
            higher_is_better: e.higher_is_better,
            studies: va.len(),
            mean_a: a.values().sum::<f64>() / n,
            mean_b: b.values().sum::<f64>() / n,
            resamples: e.resamples,
            seed: cfg.seed,
            p_value: paired_bootstrap(&va, &vb, e.resamples, cfg.seed),
        },
    )
}

/// Rebuilds tables from the eval log of `eval.from` without loading a model.
fn report(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let from = cfg
        .eval
        .from
        .as_deref()
        .ok_or_else(|| anyhow!("report needs `eval.from` (a run directory with {RECORDS_FILE})"))?;
    let records = read_records(from)?;
    let mut wrote = false;
    if records.iter().any(|r| r.kind == "prediction") {
        write(&dir.join("horizon.csv"), &prediction_csv(&prediction_rows(&records)?))?;
        wrote = true;
    }
    let nll = metric_by_study(&records, "report", "nll");
    let bleu = metric_by_study(&records, "report", "bleu1");
    if !nll.is_empty() {
        let n = nll.len() as f64;
        write_json(
            &dir.join("reports.json"),
            &serde_json::json!({
                "nll": nll.values().sum::<f64>() / n,
                "bleu1": bleu.values().sum::<f64>() / n,
                "studies": nll.len(),
            }),
        )?;
        wrote = true;
    }
    if !wrote {
        bail!("{} holds no prediction or report records", from.display());
    }
    Ok(())
}
