//! Scalar metrics: ranking, correlation, text overlap and resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::phantom::{BOS, EOS, PAD, PROMPT};

/// Average precision: precision-recall step integration over the sorted
/// unique score thresholds. `None` unless both classes occur.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auprc: length mismatch");
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() || scores.iter().any(|s| s.is_nan()) {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of average ranks. `None` for fewer than two points or
/// a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.iter().chain(y).any(|v| v.is_nan()) {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn is_content(t: u32) -> bool {
    t != PAD && t != BOS && t != EOS && !PROMPT.contains(&t)
}

/// Clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 − r/c))`, over content tokens only.
pub fn bleu1(candidate: &[u32], reference: &[u32]) -> f64 {
    let cand: Vec<u32> = candidate.iter().copied().filter(|&t| is_content(t)).collect();
    let refs: Vec<u32> = reference.iter().copied().filter(|&t| is_content(t)).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut ref_counts = std::collections::HashMap::new();
    for &t in &refs {
        *ref_counts.entry(t).or_insert(0usize) += 1;
    }
    let mut cand_counts = std::collections::HashMap::new();
    for &t in &cand {
        *cand_counts.entry(t).or_insert(0usize) += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(t, &c)| c.min(*ref_counts.get(t).unwrap_or(&0)))
        .sum();
    let precision = clipped as f64 / cand.len() as f64;
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    precision * (1.0 - r / c).min(0.0).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mse: f64,
    pub cosine: f64,
    pub pairs: usize,
    /// Pairs left out of the cosine mean because a norm vanished.
    pub cosine_skipped: usize,
}

pub const COSINE_EPS: f64 = 1e-12;

/// MSE over pairs and dimensions; cosine averaged over pairs whose norms are
/// both above `COSINE_EPS`.
pub fn horizon_metrics(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> HorizonMetrics {
    assert_eq!(preds.len(), targets.len(), "horizon_metrics: pair count mismatch");
    let mut se = 0.0;
    let mut dims = 0usize;
    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        assert_eq!(p.len(), t.len(), "horizon_metrics: width mismatch");
        let mut dot = 0.0;
        let (mut np, mut nt) = (0.0, 0.0);
        for (a, b) in p.iter().zip(t) {
            se += (a - b) * (a - b);
            dot += a * b;
            np += a * a;
            nt += b * b;
        }
        dims += p.len();
        let denom = np.sqrt() * nt.sqrt();
        if np.sqrt() > COSINE_EPS && nt.sqrt() > COSINE_EPS {
            cos_sum += dot / denom;
            cos_n += 1;
        }
    }
    HorizonMetrics {
        mse: if dims == 0 { f64::NAN } else { se / dims as f64 },
        cosine: if cos_n == 0 { f64::NAN } else { cos_sum / cos_n as f64 },
        pairs: preds.len(),
        cosine_skipped: preds.len() - cos_n,
    }
}

/// One-sided paired bootstrap. Studies are resampled with replacement; the
/// p-value is the fraction of resamples in which system B's mean does not
/// exceed system A's (ties count against B).
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    assert_eq!(a.len(), b.len(), "paired_bootstrap: length mismatch");
    assert!(a.len() >= 2, "paired_bootstrap needs at least two studies");
    let n = a.len();
    let diffs: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.random_range(0..n)];
        }
        if s <= 0.0 {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}
