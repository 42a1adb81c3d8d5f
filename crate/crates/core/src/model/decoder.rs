//! Small causal-attention report decoder conditioned on a continuous prefix.
//!
//! The input sequence is `[z_1..z_T; prompt; report]`. Prefix rows are used
//! as-is; token rows come from an embedding table. Every layer is pre-norm
//! single-head attention followed by a two-layer feed-forward block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Graph, Map, MapSpec, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::phantom::EOS;

const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub width: usize,
    pub layers: usize,
    pub ff: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Map,
    q: Map,
    k: Map,
    v: Map,
    o: Map,
    ln2: Map,
    ff: Map,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: DecoderSpec,
    embed: String,
    blocks: Vec<Block>,
    ln_f: Map,
    out: Map,
}

/// Teacher-forced scoring of one sequence.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Log-probability of every next-token target, `n × 1`.
    pub logp: Var,
    /// `true` where the target is a report token.
    pub mask: Vec<bool>,
    pub targets: Vec<u32>,
}

impl Decoder {
    pub fn new(name: &str, spec: DecoderSpec) -> Result<Self> {
        if spec.width == 0 || spec.layers == 0 || spec.ff == 0 || spec.vocab < 2 {
            return Err(Error::validation(format!("invalid decoder spec {spec:?}")));
        }
        let d = spec.width;
        let affine = |n: String, i, o| Map::new(n, MapSpec::Affine { input: i, output: o });
        let blocks = (0..spec.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(Block {
                    ln1: Map::new(format!("{p}.ln1"), MapSpec::LayerNorm { dim: d })?,
                    q: affine(format!("{p}.q"), d, d)?,
                    k: affine(format!("{p}.k"), d, d)?,
                    v: affine(format!("{p}.v"), d, d)?,
                    o: affine(format!("{p}.o"), d, d)?,
                    ln2: Map::new(format!("{p}.ln2"), MapSpec::LayerNorm { dim: d })?,
                    ff: Map::new(
                        format!("{p}.ff"),
                        MapSpec::Mlp2 {
                            input: d,
                            hidden: spec.ff,
                            output: d,
                            activation: Activation::Gelu,
                        },
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            embed: format!("{name}.embed"),
            blocks,
            ln_f: Map::new(format!("{name}.ln_f"), MapSpec::LayerNorm { dim: d })?,
            out: affine(format!("{name}.out"), d, spec.vocab)?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert_uniform(&self.embed, self.spec.vocab, self.spec.width, self.spec.width, rng)?;
        for b in &self.blocks {
            for m in [&b.ln1, &b.q, &b.k, &b.v, &b.o, &b.ln2, &b.ff] {
                m.init(store, rng)?;
            }
        }
        self.ln_f.init(store, rng)?;
        self.out.init(store, rng)
    }

    /// Log-probabilities over the vocabulary at every position of
    /// `[prefix; embed(tokens)]`, shape `(T + n) × vocab`.
    pub fn log_probs(&self, g: &mut Graph, prefix: Var, tokens: &[u32]) -> Result<Var> {
        let (t, d) = g.shape(prefix);
        if t == 0 {
            return Err(Error::validation("decoder prefix is empty"));
        }
        if d != self.spec.width {
            return Err(Error::Shape {
                map: "decoder".into(),
                expected: format!("Tx{}", self.spec.width),
                got: format!("{t}x{d}"),
            });
        }
        let mut parts = vec![prefix];
        if !tokens.is_empty() {
            let idx: Vec<usize> = tokens.iter().map(|&v| v as usize).collect();
            let table = g.param(&self.embed)?;
            parts.push(g.gather_rows(table, &idx)?);
        }
        let x = g.concat_rows(&parts)?;
        let n = t + tokens.len();
        let pos = g.constant(sequence_positions(n, d));
        let mut x = g.add(x, pos)?;
        let mask = g.constant(causal_mask(n));
        let scale = 1.0 / (d as f64).sqrt();
        for b in &self.blocks {
            let hn = b.ln1.forward(g, x)?;
            let q = b.q.forward(g, hn)?;
            let k = b.k.forward(g, hn)?;
            let v = b.v.forward(g, hn)?;
            let s = g.matmul_bt(q, k)?;
            let s = g.scale(s, scale);
            let s = g.add(s, mask)?;
            let attn = g.softmax_rows(s);
            let ctx = g.matmul(attn, v)?;
            let o = b.o.forward(g, ctx)?;
            x = g.add(x, o)?;
            let hn = b.ln2.forward(g, x)?;
            let f = b.ff.forward(g, hn)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_f.forward(g, x)?;
        let logits = self.out.forward(g, x)?;
        Ok(g.log_softmax_rows(logits))
    }

    /// Scores `report` given the prefix and prompt. Targets cover the prompt
    /// continuation and the report; only report targets are masked in.
    pub fn teacher_forced(&self, g: &mut Graph, prefix: Var, prompt: &[u32], report: &[u32]) -> Result<TeacherForced> {
        if prompt.is_empty() || report.is_empty() {
            return Err(Error::validation("teacher forcing needs a prompt and a report"));
        }
        self.check_tokens(prompt.iter().chain(report))?;
        let t = g.shape(prefix).0;
        let mut input = prompt.to_vec();
        input.extend_from_slice(&report[..report.len() - 1]);
        let lp = self.log_probs(g, prefix, &input)?;
        let rows = g.slice_rows(lp, t, input.len())?;
        let mut targets = prompt[1..].to_vec();
        targets.extend_from_slice(report);
        let idx: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
        let logp = g.pick_cols(rows, &idx)?;
        let mut mask = vec![false; prompt.len() - 1];
        mask.resize(targets.len(), true);
        Ok(TeacherForced { logp, mask, targets })
    }

    /// Deterministic argmax decoding until `EOS` or `max_len` tokens.
    pub fn greedy(&self, params: &ParamStore, prefix: &Tensor, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.check_tokens(prompt.iter())?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::inference(params);
            let p = g.constant(prefix.clone());
            let lp = self.log_probs(&mut g, p, &tokens)?;
            let v = g.value(lp);
            let last = v.row(v.rows() - 1);
            let mut best = 0;
            for (j, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = j;
                }
            }
            let tok = best as u32;
            out.push(tok);
            if tok == EOS {
                break;
            }
            tokens.push(tok);
        }
        Ok(out)
    }

    fn check_tokens<'a>(&self, mut toks: impl Iterator<Item = &'a u32>) -> Result<()> {
        match toks.find(|&&t| t as usize >= self.spec.vocab) {
            Some(t) => Err(Error::validation(format!(
                "token {t} outside vocabulary of {}",
                self.spec.vocab
            ))),
            None => Ok(()),
        }
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASKED);
        }
    }
    m
}

/// Standard sinusoid over absolute sequence index.
fn sequence_positions(n: usize, d: usize) -> Tensor {
    let mut p = Tensor::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = i as f64 * freq;
            p.set(i, j, if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    p
}
