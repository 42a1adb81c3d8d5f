use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Persistence,
    LinearExtrapolation,
    Model,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Persistence => "persistence",
            Self::LinearExtrapolation => "linear_extrapolation",
            Self::Model => "model",
        }
    }

    /// Smallest 1-based origin at which the baseline is defined.
    pub fn min_origin(self) -> usize {
        match self {
            Self::LinearExtrapolation => 2,
            _ => 1,
        }
    }
}

/// Continuity prediction of `e_{t+k}` from the rows of `e` up to the 1-based
/// origin `t`. `None` when the origin is too early for the kind (or `kind`
/// is the learned model, which has no closed form).
pub fn baseline_predict(e: &Tensor, t: usize, kind: BaselineKind, k: usize) -> Option<Vec<f64>> {
    if t < kind.min_origin() || t > e.rows() {
        return None;
    }
    let cur = e.row(t - 1);
    match kind {
        BaselineKind::Persistence => Some(cur.to_vec()),
        BaselineKind::LinearExtrapolation => {
            let prev = e.row(t - 2);
            Some(
                cur.iter()
                    .zip(prev)
                    .map(|(c, p)| c + k as f64 * (c - p))
                    .collect(),
            )
        }
        BaselineKind::Model => None,
    }
}
