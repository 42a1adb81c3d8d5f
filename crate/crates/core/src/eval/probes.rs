//! Shallow probes: one affine map per factor, fitted with a logistic,
//! softmax or least-squares objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::metrics::{auprc, spearman};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    A,
    L,
    U,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::A, Factor::L, Factor::U];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::A => "a",
            Factor::L => "l",
            Factor::U => "u",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    LesionAuprc,
    ZbinAccuracy,
    ErrorSpearman,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 3] = [Self::LesionAuprc, Self::ZbinAccuracy, Self::ErrorSpearman];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LesionAuprc => "lesion_auprc",
            Self::ZbinAccuracy => "zbin_accuracy",
            Self::ErrorSpearman => "error_spearman",
        }
    }

    /// The factor each task is designed to align with.
    pub fn diagonal(self) -> Factor {
        match self {
            Self::LesionAuprc => Factor::L,
            Self::ZbinAccuracy => Factor::A,
            Self::ErrorSpearman => Factor::U,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub factor: Factor,
    pub task: ProbeTask,
    /// `None` when the task is undefined on the evaluation split.
    pub score: Option<f64>,
    pub baseline_score: f64,
}

pub const NUM_ZBINS: usize = 10;

/// `min(floor(10 t / T), 9)` for a 1-based position `t`.
pub fn zbin(t: usize, len: usize) -> usize {
    ((NUM_ZBINS * t) / len).min(NUM_ZBINS - 1)
}

/// Probe targets of one split.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTargets {
    Binary(Vec<bool>),
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

const L2: f64 = 1e-3;

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = var.iter().map(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Self { mean, scale }
    }

    /// Design matrix with a trailing bias column.
    fn design(&self, x: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(x.len(), d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (x[i][j] - self.mean[j]) * self.scale[j]
            }
        })
    }
}

fn ridge_penalty(d1: usize, lambda: f64) -> DMatrix<f64> {
    let mut p = DMatrix::identity(d1, d1) * lambda;
    p[(d1 - 1, d1 - 1)] = 0.0;
    p
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    match a.clone().cholesky() {
        Some(c) => c.solve(b),
        None => (a + DMatrix::identity(n, n) * 1e-6)
            .lu()
            .solve(b)
            .unwrap_or_else(|| DVector::zeros(n)),
    }
}

/// Logistic regression by Newton iterations; returns test-split scores.
fn logistic_scores(train: &DMatrix<f64>, y: &[bool], test: &DMatrix<f64>) -> Vec<f64> {
    let (n, d1) = train.shape();
    let yv = DVector::from_iterator(n, y.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let mut w = DVector::zeros(d1);
    let pen = ridge_penalty(d1, L2 * n as f64);
    for _ in 0..50 {
        let z = train * &w;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let grad = train.transpose() * (&p - &yv) + &pen * &w;
        let s = p.map(|v| (v * (1.0 - v)).max(1e-10));
        let mut xs = train.clone();
        for i in 0..n {
            xs.row_mut(i).scale_mut(s[i]);
        }
        let h = train.transpose() * xs + &pen;
        let step = solve(h, &grad);
        w -= &step;
        if step.amax() < 1e-9 {
            break;
        }
    }
    (test * w).iter().copied().collect()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn softmax_predict(train: &DMatrix<f64>, y: &[usize], classes: usize, test: &DMatrix<f64>) -> Vec<usize> {
    let (n, d1) = train.shape();
    let mut w = DMatrix::<f64>::zeros(d1, classes);
    let mut vel = DMatrix::<f64>::zeros(d1, classes);
    // Softmax curvature is at most half the largest eigenvalue of XᵀX/n,
    // which the trace bounds.
    let trace: f64 = (0..d1).map(|j| train.column(j).norm_squared()).sum::<f64>() / n as f64;
    let lr = 1.0 / (0.5 * trace).max(1e-12);
    for _ in 0..400 {
        let mut p = train * &w;
        for i in 0..n {
            let mut row = p.row_mut(i);
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let s = row.sum();
            row /= s;
            row[y[i]] -= 1.0;
        }
        let mut grad = train.transpose() * p / n as f64;
        grad += &w * L2;
        for j in 0..classes {
            grad[(d1 - 1, j)] -= w[(d1 - 1, j)] * L2;
        }
        vel = vel * 0.9 - grad * lr;
        w += &vel;
    }
    let scores = test * w;
    (0..scores.nrows())
        .map(|i| scores.row(i).transpose().argmax().0)
        .collect()
}

fn ridge_predict(train: &DMatrix<f64>, y: &[f64], test: &DMatrix<f64>) -> Vec<f64> {
    let (n, d1) = train.shape();
    let yv = DVector::from_column_slice(y);
    let a = train.transpose() * train + ridge_penalty(d1, L2 * n as f64);
    let w = solve(a, &(train.transpose() * yv));
    (test * w).iter().copied().collect()
}

/// Fits the probe for `train_y`'s task on the training split and scores it
/// on the test split. Features are standardized with training statistics.
pub fn fit_probe(
    factor: Factor,
    train_x: &[Vec<f64>],
    train_y: &ProbeTargets,
    test_x: &[Vec<f64>],
    test_y: &ProbeTargets,
) -> ProbeResult {
    let st = Standardizer::fit(train_x);
    let (tr, te) = (st.design(train_x), st.design(test_x));
    match (train_y, test_y) {
        (ProbeTargets::Binary(y), ProbeTargets::Binary(yt)) => {
            let base = yt.iter().filter(|&&b| b).count() as f64 / yt.len().max(1) as f64;
            let single_class = y.iter().all(|&b| b) || !y.iter().any(|&b| b);
            let score = if single_class {
                None
            } else {
                auprc(&logistic_scores(&tr, y, &te), yt)
            };
            ProbeResult {
                factor,
                task: ProbeTask::LesionAuprc,
                score,
                baseline_score: base,
            }
        }
        (ProbeTargets::Classes(y), ProbeTargets::Classes(yt)) => {
            let pred = softmax_predict(&tr, y, NUM_ZBINS, &te);
            let hits = pred.iter().zip(yt).filter(|(a, b)| a == b).count();
            ProbeResult {
                factor,
                task: ProbeTask::ZbinAccuracy,
                score: (!yt.is_empty()).then(|| hits as f64 / yt.len() as f64),
                baseline_score: 1.0 / NUM_ZBINS as f64,
            }
        }
        (ProbeTargets::Real(y), ProbeTargets::Real(yt)) => ProbeResult {
            factor,
            task: ProbeTask::ErrorSpearman,
            score: spearman(&ridge_predict(&tr, y, &te), yt),
            baseline_score: 0.0,
        },
        _ => panic!("fit_probe: train and test targets are of different kinds"),
    }
}
