//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// max |analytic − numeric| / max(max |analytic|, max |numeric|, floor)
    pub rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub groups: Vec<GroupCheck>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Upper bound on perturbed entries per group; entries are strided evenly.
    pub max_entries: usize,
    /// Denominator floor so that all-zero groups compare absolutely.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: usize::MAX,
            floor: 1e-8,
        }
    }
}

fn eval(store: &ParamStore, loss_fn: &dyn Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference(store);
    let l = loss_fn(&mut g)?;
    Ok(g.value(l).item())
}

/// Compares analytic gradients against central differences for every
/// unfrozen group of `store`.
pub fn check_gradients(
    store: &ParamStore,
    loss_fn: &dyn Fn(&mut Graph) -> Result<Var>,
    opts: FdOptions,
) -> Result<FdReport> {
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss_fn(&mut g)?;
        if !g.value(l).item().is_finite() {
            return Err(Error::NonFinite {
                term: "fd_check loss".into(),
            });
        }
        g.backward(l)?
    };
    let mut work = store.clone();
    let mut groups = Vec::new();
    for id in 0..store.len() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.group(id).value.len();
        let stride = n.div_ceil(opts.max_entries.max(1)).max(1);
        let an = analytic.by_id(id);
        let (mut max_diff, mut max_a, mut max_n, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let orig = work.groups()[id].value.data()[i];
            work.groups_mut()[id].value.data_mut()[i] = orig + opts.step;
            let plus = eval(&work, loss_fn)?;
            work.groups_mut()[id].value.data_mut()[i] = orig - opts.step;
            let minus = eval(&work, loss_fn)?;
            work.groups_mut()[id].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = an.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
            checked += 1;
        }
        groups.push(GroupCheck {
            name: store.group(id).name.clone(),
            checked,
            rel_error: max_diff / max_a.max(max_n).max(opts.floor),
            max_abs_grad: max_a,
        });
    }
    Ok(FdReport { groups })
}
