//! Composable parametric maps evaluated on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapSpec {
    Affine {
        input: usize,
        output: usize,
    },
    /// Exactly one hidden layer.
    Mlp2 {
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
    },
    LayerNorm {
        dim: usize,
    },
    /// One learnable query attending over a set of `input`-wide tokens,
    /// followed by layer normalization and an affine map to `output`.
    CrossAttention {
        input: usize,
        output: usize,
    },
    /// Gated recurrent cell run strictly left to right.
    CausalCell {
        input: usize,
        hidden: usize,
    },
}

impl MapSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            MapSpec::Affine { input, .. }
            | MapSpec::Mlp2 { input, .. }
            | MapSpec::CrossAttention { input, .. }
            | MapSpec::CausalCell { input, .. } => input,
            MapSpec::LayerNorm { dim } => dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            MapSpec::Affine { output, .. }
            | MapSpec::Mlp2 { output, .. }
            | MapSpec::CrossAttention { output, .. } => output,
            MapSpec::CausalCell { hidden, .. } => hidden,
            MapSpec::LayerNorm { dim } => dim,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims: &[usize] = match self {
            MapSpec::Affine { input, output } => &[*input, *output],
            MapSpec::Mlp2 {
                input,
                hidden,
                output,
                ..
            } => &[*input, *hidden, *output],
            MapSpec::LayerNorm { dim } => &[*dim],
            MapSpec::CrossAttention { input, output } => &[*input, *output],
            MapSpec::CausalCell { input, hidden } => &[*input, *hidden],
        };
        if dims.contains(&0) {
            return Err(Error::validation(format!("map dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// A named map instance; its parameter groups live under `name.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map {
    pub name: String,
    pub spec: MapSpec,
}

impl Map {
    pub fn new(name: impl Into<String>, spec: MapSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            name: name.into(),
            spec,
        })
    }

    fn p(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    /// Registers this map's parameter groups in `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        match self.spec {
            MapSpec::Affine { input, output } => {
                store.insert_uniform(self.p("w"), output, input, input, rng)?;
                store.insert_uniform(self.p("b"), 1, output, input, rng)?;
            }
            MapSpec::Mlp2 {
                input,
                hidden,
                output,
                ..
            } => {
                store.insert_uniform(self.p("w1"), hidden, input, input, rng)?;
                store.insert_uniform(self.p("b1"), 1, hidden, input, rng)?;
                store.insert_uniform(self.p("w2"), output, hidden, hidden, rng)?;
                store.insert_uniform(self.p("b2"), 1, output, hidden, rng)?;
            }
            MapSpec::LayerNorm { dim } => {
                store.insert(self.p("gain"), super::Tensor::filled(1, dim, 1.0))?;
                store.insert(self.p("bias"), super::Tensor::zeros(1, dim))?;
            }
            MapSpec::CrossAttention { input, output } => {
                store.insert_uniform(self.p("query"), 1, input, input, rng)?;
                store.insert_uniform(self.p("wk"), input, input, input, rng)?;
                store.insert_uniform(self.p("wv"), input, input, input, rng)?;
                store.insert_uniform(self.p("we"), output, input, input, rng)?;
                store.insert_uniform(self.p("be"), 1, output, input, rng)?;
            }
            MapSpec::CausalCell { input, hidden } => {
                let fan = input + hidden;
                for gate in ["z", "r", "c"] {
                    store.insert_uniform(self.p(&format!("w{gate}")), hidden, input, fan, rng)?;
                    store.insert_uniform(self.p(&format!("u{gate}")), hidden, hidden, fan, rng)?;
                    store.insert_uniform(self.p(&format!("b{gate}")), 1, hidden, fan, rng)?;
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (rows, cols) = g.shape(x);
        let want = self.spec.input_dim();
        if cols != want || rows == 0 {
            return Err(Error::Shape {
                map: self.name.clone(),
                expected: format!("Nx{want} with N >= 1"),
                got: format!("{rows}x{cols}"),
            });
        }
        Ok(())
    }

    /// Row-wise application. For `CrossAttention` the rows are the attended
    /// token set and the result is a single row; for `CausalCell` the rows are
    /// the time steps.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        match self.spec {
            MapSpec::Affine { .. } => {
                let w = g.param(&self.p("w"))?;
                let b = g.param(&self.p("b"))?;
                g.linear(x, w, Some(b), &self.name)
            }
            MapSpec::Mlp2 { activation, .. } => {
                let (w1, b1) = (g.param(&self.p("w1"))?, g.param(&self.p("b1"))?);
                let (w2, b2) = (g.param(&self.p("w2"))?, g.param(&self.p("b2"))?);
                let hid = g.linear(x, w1, Some(b1), &self.name)?;
                let act = activation.apply(g, hid);
                g.linear(act, w2, Some(b2), &self.name)
            }
            MapSpec::LayerNorm { .. } => {
                let (gain, bias) = (g.param(&self.p("gain"))?, g.param(&self.p("bias"))?);
                let n = g.layer_norm(x);
                let s = g.mul_row(n, gain)?;
                g.add_row(s, bias)
            }
            MapSpec::CrossAttention { input, .. } => {
                let q = g.param(&self.p("query"))?;
                let wk = g.param(&self.p("wk"))?;
                let wv = g.param(&self.p("wv"))?;
                let keys = g.linear(x, wk, None, &self.name)?;
                let values = g.linear(x, wv, None, &self.name)?;
                let scores = g.matmul_bt(q, keys)?;
                let scores = g.scale(scores, 1.0 / (input as f64).sqrt());
                let attn = g.softmax_rows(scores);
                let pooled = g.matmul(attn, values)?;
                let normed = g.layer_norm(pooled);
                let (we, be) = (g.param(&self.p("we"))?, g.param(&self.p("be"))?);
                g.linear(normed, we, Some(be), &self.name)
            }
            MapSpec::CausalCell { hidden, .. } => self.run_cell(g, x, hidden),
        }
    }

    /// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    /// c = tanh(W_c x + U_c (r ⊙ h) + b_c), h' = h + z ⊙ (c − h), h_0 = 0.
    fn run_cell(&self, g: &mut Graph, x: Var, hidden: usize) -> Result<Var> {
        let steps = g.shape(x).0;
        let mut proj = Vec::with_capacity(3);
        let mut recur = Vec::with_capacity(3);
        for gate in ["z", "r", "c"] {
            let w = g.param(&self.p(&format!("w{gate}")))?;
            let b = g.param(&self.p(&format!("b{gate}")))?;
            proj.push(g.linear(x, w, Some(b), &self.name)?);
            recur.push(g.param(&self.p(&format!("u{gate}")))?);
        }
        let mut h = g.constant(super::Tensor::zeros(1, hidden));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xz = g.row(proj[0], t)?;
            let xr = g.row(proj[1], t)?;
            let xc = g.row(proj[2], t)?;
            let hz = g.matmul_bt(h, recur[0])?;
            let hr = g.matmul_bt(h, recur[1])?;
            let z_pre = g.add(xz, hz)?;
            let z = g.sigmoid(z_pre);
            let r_pre = g.add(xr, hr)?;
            let r = g.sigmoid(r_pre);
            let rh = g.mul(r, h)?;
            let hc = g.matmul_bt(rh, recur[2])?;
            let c_pre = g.add(xc, hc)?;
            let c = g.tanh(c_pre);
            let delta = g.sub(c, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}
