//! Minimal differentiable-computation substrate: tensors, a reverse-mode
//! tape, named parameter stores, parametric maps and checkpoints.

pub mod checkpoint;
pub mod fdcheck;
mod graph;
mod maps;
mod params;
mod tensor;

pub use graph::{gelu, sigmoid, softplus, Graph, Var, LAYER_NORM_EPS};
pub use maps::{Activation, Map, MapSpec};
pub use params::{Gradients, ParamGroup, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates `loss_fn` on a recording graph and returns the loss value and
/// per-group gradients.
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = loss_fn(&mut g)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term: "loss".into(),
        });
    }
    Ok((value, g.backward(loss)?))
}

/// Single-query attention over `patch_tokens` (M × d_v) followed by layer
/// normalization and an affine map, using the groups of `map`.
pub fn cross_attention_compress(
    g: &mut Graph,
    map: &Map,
    patch_tokens: Var,
) -> Result<Var> {
    if !matches!(map.spec, MapSpec::CrossAttention { .. }) {
        return Err(Error::validation(format!(
            "`{}` is not a cross-attention map",
            map.name
        )));
    }
    if g.shape(patch_tokens).0 == 0 {
        return Err(Error::validation("cross attention over zero patch tokens"));
    }
    map.forward(g, patch_tokens)
}
