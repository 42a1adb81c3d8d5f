//! Acceptance battery. Every criterion prints one `PASS` or `FAIL` line.
//!
//! Criteria 1-4, 10 and 11 run with the normal test suite. The trained
//! criteria 5-9 need full toy-preset training runs over several seeds and
//! are ignored by default:
//!
//! ```text
//! cargo test --release -p sliceworld-cli --test acceptance -- --include-ignored --nocapture --test-threads=1
//! ```

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sliceworld::diffcore::{Graph, ParamStore, Tensor};
use sliceworld::eval::*;
use sliceworld::model::{Intervention, ModelConfig, SliceWorld};
use sliceworld::objectives::{cf_losses, fas_smooth, fas_sparse, mfp_loss, uncertainty_target, LossConfig};
use sliceworld::phantom::{
    generate_phantom_study, generate_split, window_value, window_values, PhantomConfig, PhantomStudy, SplitCounts,
    WindowSpec,
};
use sliceworld::trainer::{finetune, prepare_examples, pretrain, AblationMode, StageConfig};
use sliceworld_cli::{run, Command, RunConfig};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn check(n: usize, name: &str, pass: bool, detail: String) {
    verdict(n, name, pass, &detail);
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_windowing() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut edges = true;
    for w in WindowSpec::RGB {
        let values: Vec<i64> = (0..100_000).map(|_| rng.random_range(-1024..=3071)).collect();
        let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let got = window_values(&floats, &w).unwrap();
        mismatches += values
            .iter()
            .zip(&got)
            .filter(|(v, g)| **g != window_oracle(**v, w.level as i64, w.width as i64))
            .count();
        edges &= window_value(w.lower(), &w).unwrap() == 0 && window_value(w.upper(), &w).unwrap() == 255;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        1,
        "bit-exact windowing",
        mismatches == 0 && edges && secs < 10.0,
        format!("{mismatches} mismatches over 3 x 1e5 values, endpoints 0/255: {edges}, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_gradients() {
    let start = Instant::now();
    let mut worst = BTreeMap::new();
    for name in TERMS {
        let w = (0..20).map(|s| term_fd_error(&tiny_case(5000 + s), name)).fold(0.0, f64::max);
        worst.insert(name, w);
    }
    let leak: f64 = (0..20).map(|s| unc_grad_into_heads(&tiny_case(6000 + s))).sum();
    let max = worst.values().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    check(
        2,
        "finite-difference gradients",
        max <= 1e-4 && leak == 0.0 && secs < 300.0,
        format!("worst rel err over 20 configs: {}; unc grad into heads {leak}; {secs:.1}s", detail.join(", ")),
    );
}

#[test]
fn criterion_03_causality() {
    let start = Instant::now();
    let model = SliceWorld::new(ModelConfig::default()).unwrap();
    let params = model.init_params(3).unwrap();
    let cfg = PhantomConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut broken = 0;
    for i in 0..100 {
        let study = generate_phantom_study(i, "causal", &cfg).unwrap();
        let t = rng.random_range(0..study.len() - 1);
        let changed = perturb_after(&study, t, 100 + i);
        for mode in Intervention::ALL {
            if !prefix_identical(&trace(&model, &params, &study, mode), &trace(&model, &params, &changed, mode), t) {
                broken += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        3,
        "causality",
        broken == 0 && secs < 120.0,
        format!("{broken} of 300 (study, mode) pairs changed h/s/w/z or predictions up to t; {secs:.1}s"),
    );
}

fn value(f: impl FnOnce(&mut Graph) -> sliceworld::Result<sliceworld::diffcore::Var>) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

#[test]
fn criterion_04_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();

    let a = Tensor::from_rows(&vec![vec![0.4, -1.1, 2.5]; 6]).unwrap();
    out.push(("smooth", value(|g| { let v = g.constant(a); fas_smooth(g, v) }) == 0.0));
    out.push(("sparse", value(|g| { let v = g.constant(Tensor::zeros(7, 5)); fas_sparse(g, v) }) == 0.0));

    let (t, k) = (10, 3);
    let e = rand_tensor(&mut rng, t, 4);
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let ev = g.constant(e.clone());
    let perfect: Vec<_> = (1..=k)
        .map(|j| g.constant(Tensor::from_rows(&(0..t - k).map(|r| e.row(r + j).to_vec()).collect::<Vec<_>>()).unwrap()))
        .collect();
    let mfp = mfp_loss(&mut g, ev, &perfect).unwrap();
    out.push(("mfp", g.value(mfp).item() == 0.0));
    let target = uncertainty_target(&mut g, &perfect, ev).unwrap();
    out.push(("unc target", g.value(target).data().iter().all(|&v| v == 0.0)));

    let mut case = tiny_case(44);
    let vocab = case.model.config.vocab as f64;
    for name in ["decoder.out.w", "decoder.out.b"] {
        let p = case.params.get_mut(name).unwrap();
        *p = Tensor::zeros(p.rows(), p.cols());
    }
    case.report = vec![12, 30, 7, 55];
    let store = case.params.clone();
    let mut g = Graph::inference(&store);
    let l = term_node(&case, &mut g, "ctrg").unwrap();
    out.push(("ctrg", (g.value(l).item() - vocab.ln()).abs() <= 1e-9));

    let f: Vec<Tensor> = (0..k).map(|_| rand_tensor(&mut rng, t - k, 4)).collect();
    let c: Vec<Tensor> = (0..k).map(|_| rand_tensor(&mut rng, t - k, 4)).collect();
    let cf = |labels: &[f64]| {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let ev = g.constant(e.clone());
        let fv: Vec<_> = f.iter().map(|p| g.constant(p.clone())).collect();
        let cv: Vec<_> = c.iter().map(|p| g.constant(p.clone())).collect();
        let (i, ef) = cf_losses(&mut g, &fv, &cv, ev, labels, 0.1, 1e-8).unwrap();
        (g.value(i).item(), g.value(ef).item())
    };
    out.push(("inv on all-lesion", cf(&vec![1.0; t]).0 == 0.0));
    out.push(("eff on no-lesion", cf(&vec![0.0; t]).1 == 0.0));

    let p = rand_tensor(&mut rng, 1, 3);
    let hinge = value(|g| {
        let ev = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), 2, 3));
        let a = g.constant(p.clone());
        let b = g.constant(p.clone());
        Ok(cf_losses(g, &[a], &[b], ev, &[1.0, 0.0], 0.1, 0.0)?.1)
    });
    out.push(("hinge = delta", hinge == 0.1));

    let failed: Vec<&str> = out.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    check(
        4,
        "loss identities",
        failed.is_empty(),
        format!("{} identities hold{}", out.len() - failed.len(), if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }),
    );
}

#[test]
fn criterion_10_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut gaps = Vec::new();
    for effect in [0.0, 0.03, 0.08, 0.2] {
        let a: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + effect + rng.random_range(-0.6..0.6)).collect();
        let oracle = bootstrap_oracle(&a, &b, 1_000_000);
        gaps.push((paired_bootstrap(&a, &b, 10_000, 77) - oracle).abs());
    }
    let boot = gaps.iter().all(|&g| g <= 0.02);

    let patterns = tie_patterns(6);
    let mut ap_bad = 0;
    let mut rho_bad = 0;
    for p in &patterns {
        let s: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        for mask in 0u32..64 {
            let labels: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            let (got, want) = (auprc(&s, &labels), auprc_oracle(p, &labels));
            let ok = match (got, want) {
                (Some(g), Some(w)) => (g - w).abs() <= 1e-15,
                (g, w) => g.is_none() && w.is_none(),
            };
            ap_bad += usize::from(!ok);
        }
        for _ in 0..20 {
            let q = &patterns[rng.random_range(0..patterns.len())];
            let y: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let ok = match (spearman(&s, &y), spearman_oracle(p, q)) {
                (Some(g), Some(w)) => (g - w).abs() <= 1e-12,
                (g, w) => g.is_none() && w.is_none(),
            };
            rho_bad += usize::from(!ok);
        }
    }
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    check(
        10,
        "statistical machinery",
        boot && ap_bad == 0 && rho_bad == 0,
        format!(
            "bootstrap max |p - oracle(1e6)| = {worst:.4}; {} tie patterns: {ap_bad} AUPRC and {rho_bad} Spearman mismatches",
            patterns.len()
        ),
    );
}

const TINY: &str = r#"
seed = 11
[data.counts]
pretrain = 8
finetune = 4
test = 4
[data.phantom]
t_min = 10
t_max = 12
native_side = 32
[model]
image_side = 16
d_v = 8
d_e = 8
d_h = 8
d_w = 8
d_z = 8
horizon = 2
pred_hidden = 8
lm_hidden = 8
decoder_layers = 1
decoder_ff = 8
[loss]
horizon = 2
[pretrain]
epochs = 2
batch_size = 4
[finetune]
epochs = 1
batch_size = 2
"#;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == "train_log.jsonl" {
                // the only clock-dependent field
                let text = fs::read_to_string(&p).unwrap();
                let lines: Vec<String> = text
                    .lines()
                    .map(|l| {
                        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("wall_ms");
                        v.to_string()
                    })
                    .collect();
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), lines.join("\n").into_bytes());
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let cfg = |sets: &[String]| RunConfig::resolve(Some(&cfg_path), sets).unwrap();
    let twice = |cmd: Command, c: &RunConfig| {
        let a = run(cmd, c, &tmp.path().join("a")).unwrap();
        let b = run(cmd, c, &tmp.path().join("b")).unwrap();
        (a.clone(), files(&a) == files(&b))
    };
    let mut same = Vec::new();
    let (data, ok) = twice(Command::GenData, &cfg(&[]));
    same.push(("gen-data", ok));
    let data_set = format!("data.dir=\"{}\"", data.join("data").display());
    let (pre, ok) = twice(Command::Pretrain, &cfg(&[data_set.clone()]));
    same.push(("pretrain", ok));
    let ck = format!("checkpoint=\"{}\"", pre.display());
    let (ft, ok) = twice(Command::Finetune, &cfg(&[data_set.clone(), ck.clone()]));
    same.push(("finetune", ok));
    let (_, ok) = twice(Command::EvalPredict, &cfg(&[data_set.clone(), ck]));
    same.push(("eval-predict", ok));
    let ft_ck = format!("checkpoint=\"{}\"", ft.display());
    for cmd in [Command::EvalProbes, Command::EvalIntervene, Command::EvalRobustness] {
        let (_, ok) = twice(cmd, &cfg(&[data_set.clone(), ft_ck.clone()]));
        same.push((cmd.as_str(), ok));
    }
    let failed: Vec<&str> = same.iter().filter(|(_, ok)| !ok).map(|(c, _)| *c).collect();
    check(
        11,
        "byte-identical reruns",
        failed.is_empty(),
        format!("{} commands rerun identically (train log compared without wall time){}", same.len() - failed.len(), if failed.is_empty() { String::new() } else { format!(", differing: {failed:?}") }),
    );
}

// Trained criteria.

struct Data {
    pretrain: Vec<PhantomStudy>,
    finetune: Vec<PhantomStudy>,
    test: Vec<PhantomStudy>,
}

fn data(seed: u64) -> Data {
    let cfg = PhantomConfig::default();
    let n = SplitCounts::default();
    Data {
        pretrain: generate_split(&cfg, seed, "pretrain", n.pretrain).unwrap(),
        finetune: generate_split(&cfg, seed, "finetune", n.finetune).unwrap(),
        test: generate_split(&cfg, seed, "test", n.test).unwrap(),
    }
}

/// Both toy-preset stages for one ablation mode and seed.
fn train(model: &SliceWorld, d: &Data, mode: AblationMode, seed: u64) -> (Option<ParamStore>, ParamStore) {
    let loss = LossConfig::default();
    let pre = mode.pretrains().then(|| {
        let sc = StageConfig { seed, ..StageConfig::toy_pretrain() };
        let ex = prepare_examples(model, &d.pretrain, sc.max_seq_len).unwrap();
        pretrain(model, &ex, &loss, &sc, mode, None).unwrap().params
    });
    let fc = StageConfig { seed, ..StageConfig::toy_finetune() };
    let ex = prepare_examples(model, &d.finetune, fc.max_seq_len).unwrap();
    let ft = finetune(model, pre.clone(), &ex, &loss, &fc, mode, None).unwrap().params;
    (pre, ft)
}

struct FullRun {
    predictions: Vec<PredictionRow>,
    probes: Vec<ProbeResult>,
    cf: CounterfactualSummary,
    interventions: Vec<InterventionAggregate>,
    reports: ReportSummary,
}

const SEEDS: u64 = 5;

fn full_runs() -> &'static Vec<FullRun> {
    static RUNS: OnceLock<Vec<FullRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let model = SliceWorld::new(ModelConfig::default()).unwrap();
        (0..SEEDS)
            .map(|seed| {
                let start = Instant::now();
                let d = data(seed);
                let (pre, ft) = train(&model, &d, AblationMode::Full, seed);
                let pre = pre.unwrap();
                let es = EvalStudy::prepare(&model, &pre, &d.test).unwrap();
                let run = FullRun {
                    predictions: eval_predictions(&model, &pre, &es).unwrap(),
                    probes: eval_probes(&model, &pre, &es).unwrap(),
                    cf: eval_counterfactual(&model, &pre, &es).unwrap(),
                    interventions: aggregate_interventions(
                        &run_intervention_eval(&model, &ft, &es, &Intervention::ALL).unwrap(),
                    ),
                    reports: summarize_reports(&eval_reports(&model, &ft, &es).unwrap()),
                };
                println!("  [full seed {seed} trained and evaluated in {:.0}s]", start.elapsed().as_secs_f64());
                run
            })
            .collect()
    })
}

fn seed_tally(n: usize, name: &str, needed: usize, per_seed: Vec<(bool, String)>) {
    for (i, (ok, d)) in per_seed.iter().enumerate() {
        println!("    seed {i}: {} {d}", if *ok { "ok  " } else { "miss" });
    }
    let hits = per_seed.iter().filter(|(ok, _)| *ok).count();
    check(n, name, hits >= needed, format!("{hits}/{} seeds hold (need {needed})", per_seed.len()));
}

#[test]
#[ignore = "trains the toy preset on five seeds"]
fn criterion_05_prediction_beats_baselines() {
    let per_seed = full_runs()
        .iter()
        .map(|r| {
            let row = |k: usize, s: BaselineKind| r.predictions.iter().find(|p| p.k == k && p.system == s).unwrap();
            let mut ok = true;
            let mut d = Vec::new();
            for k in [1, 3, 5] {
                let m = row(k, BaselineKind::Model);
                let p = row(k, BaselineKind::Persistence);
                let l = row(k, BaselineKind::LinearExtrapolation);
                ok &= m.mse < p.mse && m.mse < l.mse && m.cosine > p.cosine && m.cosine > l.cosine;
                d.push(format!("k{k} mse {:.4}/{:.4}/{:.4} cos {:.3}/{:.3}/{:.3}", m.mse, p.mse, l.mse, m.cosine, p.cosine, l.cosine));
                if k == 1 {
                    let best = p.mse.min(l.mse);
                    let gain = (best - m.mse) / best;
                    ok &= gain >= 0.10;
                    d.push(format!("k1 gain {:.1}%", 100.0 * gain));
                }
            }
            (ok, format!("model/persistence/linear {}", d.join("; ")))
        })
        .collect();
    seed_tally(5, "predictive world state", 4, per_seed);
}

#[test]
#[ignore = "trains the toy preset on five seeds"]
fn criterion_06_probe_diagonal() {
    let per_seed = full_runs()
        .iter()
        .map(|r| {
            let mut ok = true;
            let mut d = Vec::new();
            for task in ProbeTask::ALL {
                let score = |f: Factor| r.probes.iter().find(|p| p.task == task && p.factor == f).unwrap();
                let diag = score(task.diagonal());
                let ds = diag.score.unwrap_or(f64::NEG_INFINITY);
                let off_max = Factor::ALL
                    .iter()
                    .filter(|&&f| f != task.diagonal())
                    .map(|&f| score(f).score.unwrap_or(f64::NEG_INFINITY))
                    .fold(f64::NEG_INFINITY, f64::max);
                ok &= ds > off_max && ds - diag.baseline_score >= 0.10;
                let row: Vec<String> = Factor::ALL
                    .iter()
                    .map(|&f| format!("{}={}", f.as_str(), score(f).score.map_or("skip".into(), |s| format!("{s:.3}"))))
                    .collect();
                d.push(format!("{} [{}] base {:.3}", task.as_str(), row.join(" "), diag.baseline_score));
            }
            (ok, d.join("; "))
        })
        .collect();
    seed_tally(6, "factor alignment diagonal", 4, per_seed);
}

#[test]
#[ignore = "trains the toy preset on five seeds"]
fn criterion_07_counterfactual_selectivity() {
    let per_seed = full_runs()
        .iter()
        .map(|r| {
            let c = &r.cf;
            let ratio = c.selectivity_ratio();
            (
                c.lesion_cf > c.lesion_fact && ratio <= 0.25,
                format!("l_cf {:.4} vs l_fact {:.4}, selectivity {:.3}", c.lesion_cf, c.lesion_fact, ratio),
            )
        })
        .collect();
    seed_tally(7, "counterfactual effect", 4, per_seed);
}

#[test]
#[ignore = "trains the toy preset on five seeds"]
fn criterion_08_intervention_selectivity() {
    let per_seed = full_runs()
        .iter()
        .map(|r| {
            let g = |pos: bool, m: Intervention| r.interventions.iter().find(|a| a.lesion_positive == pos && a.mode == m).unwrap();
            let removal = g(true, Intervention::LesionZero).mention_removal - g(true, Intervention::UncertaintyZero).mention_removal;
            let neg_change = g(false, Intervention::LesionZero).target_change;
            let min_pres = r.interventions.iter().map(|a| a.preservation).fold(f64::INFINITY, f64::min);
            (
                removal >= 0.15 && neg_change <= 0.10 && min_pres >= 0.85,
                format!(
                    "removal lesion-zero minus unc-zero {:+.3}, negative lesion-zero target change {:.3}, min preservation {:.3}",
                    removal, neg_change, min_pres
                ),
            )
        })
        .collect();
    seed_tally(8, "intervention selectivity", 3, per_seed);
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
#[ignore = "trains every ablation variant on three seeds"]
fn criterion_09_ablation_ladder() {
    let model = SliceWorld::new(ModelConfig::default()).unwrap();
    let full = full_runs();
    let mut nll: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut bleu: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let d = data(seed);
        for mode in AblationMode::LADDER {
            let rep = if mode == AblationMode::Full {
                full[seed as usize].reports.clone()
            } else {
                let start = Instant::now();
                let (_, ft) = train(&model, &d, mode, seed);
                let es = EvalStudy::prepare(&model, &ft, &d.test).unwrap();
                let rep = summarize_reports(&eval_reports(&model, &ft, &es).unwrap());
                println!("  [{} seed {seed} in {:.0}s]", mode.as_str(), start.elapsed().as_secs_f64());
                rep
            };
            nll.entry(mode.as_str()).or_default().push(rep.nll);
            bleu.entry(mode.as_str()).or_default().push(rep.bleu1);
        }
    }
    let rungs: Vec<&str> = AblationMode::LADDER.iter().map(|m| m.as_str()).collect();
    let med = |m: &BTreeMap<&str, Vec<f64>>| rungs.iter().map(|r| median3(m[r].clone())).collect::<Vec<f64>>();
    let (n, b) = (med(&nll), med(&bleu));
    // rung i+1 sits above rung i: lower NLL, higher BLEU-1
    let nll_hits = (0..4).filter(|&i| n[i + 1] <= n[i]).count();
    let bleu_hits = (0..4).filter(|&i| b[i + 1] >= b[i]).count();
    for (i, r) in rungs.iter().enumerate() {
        println!("    {r:<6} median nll {:.4} bleu1 {:.4}", n[i], b[i]);
    }
    check(
        9,
        "ablation ladder direction",
        nll_hits >= 3 && bleu_hits >= 3,
        format!("adjacent comparisons in order: NLL {nll_hits}/4, BLEU-1 {bleu_hits}/4 (need 3/4 each)"),
    );
}
