//! The slice-sequence world model: slice encoder, causal prefix encoder,
//! factor heads, world tokens, per-horizon prediction heads and the report
//! decoder.
//!
//! All forward pieces operate on a [`Graph`], so the same code serves
//! training (recording graph) and evaluation (inference graph).

mod config;
mod decoder;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderSpec, TeacherForced};

use rayon::prelude::*;

use crate::diffcore::{cross_attention_compress, Activation, Graph, Map, MapSpec, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::phantom::{hu_to_rgb, HuVolume, RgbImage};

/// Parameter-group prefixes.
pub mod groups {
    pub const SLICE_ENCODER: &str = "slice_encoder";
    pub const PREFIX_ENCODER: &str = "prefix_encoder";
    pub const FACTOR_HEADS: &str = "factor_heads";
    pub const PRESENCE_HEAD: &str = "presence_head";
    pub const TOKEN_PROJECTOR: &str = "token_projector";
    pub const PREDICTION_HEADS: &str = "prediction_heads";
    pub const UNCERTAINTY_HEAD: &str = "uncertainty_head";
    pub const LANGUAGE_PROJECTION: &str = "language_projection";
    pub const DECODER: &str = "decoder";
    pub const RECON_HEAD: &str = "recon_head";

    /// Groups held fixed while fitting the report interface.
    pub const FINETUNE_FROZEN: [&str; 7] = [
        SLICE_ENCODER,
        PREFIX_ENCODER,
        FACTOR_HEADS,
        PRESENCE_HEAD,
        TOKEN_PROJECTOR,
        PREDICTION_HEADS,
        UNCERTAINTY_HEAD,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    H,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    None,
    LesionZero,
    UncertaintyZero,
}

impl Intervention {
    pub const ALL: [Intervention; 3] = [Self::None, Self::LesionZero, Self::UncertaintyZero];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LesionZero => "lesion_zero",
            Self::UncertaintyZero => "uncertainty_zero",
        }
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intervention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown intervention mode `{s}`")))
    }
}

/// Factorized world state on the graph, one row per slice position.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub a: Var,
    pub l: Var,
    pub u: Var,
    /// `T × 1` lesion-presence probabilities.
    pub m_hat: Var,
}

/// Plain-value snapshot of one study's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldOutputs {
    pub h: Tensor,
    pub a: Tensor,
    pub l: Tensor,
    pub u: Tensor,
    pub m_hat: Vec<f64>,
    pub w: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug)]
pub struct SliceWorld {
    pub config: ModelConfig,
    patch_embed: Map,
    patch_pos: String,
    compress: Map,
    feature_shift: String,
    feature_scale: String,
    prefix: Map,
    anat: Map,
    lesion: Map,
    unc: Map,
    presence: Map,
    tok: Map,
    pred_h: Vec<Map>,
    pred_w: Vec<Map>,
    unc_head: Map,
    lm: Map,
    recon: Map,
    decoder: Decoder,
}

fn affine(name: impl Into<String>, input: usize, output: usize) -> Result<Map> {
    Map::new(name, MapSpec::Affine { input, output })
}

impl SliceWorld {
    pub fn new(config: ModelConfig) -> Result<Self> {
        use groups::*;
        config.validate()?;
        let c = &config;
        let head = |pathway: &str, k: usize, input: usize| {
            Map::new(
                format!("{PREDICTION_HEADS}.{pathway}.k{k}"),
                MapSpec::Mlp2 {
                    input,
                    hidden: c.pred_hidden,
                    output: c.d_e,
                    activation: Activation::Gelu,
                },
            )
        };
        Ok(Self {
            patch_embed: affine(format!("{SLICE_ENCODER}.patch_embed"), c.patch_len(), c.d_v)?,
            patch_pos: format!("{SLICE_ENCODER}.patch_pos"),
            compress: Map::new(
                format!("{SLICE_ENCODER}.compress"),
                MapSpec::CrossAttention {
                    input: c.d_v,
                    output: c.d_e,
                },
            )?,
            feature_shift: format!("{SLICE_ENCODER}.standardize.shift"),
            feature_scale: format!("{SLICE_ENCODER}.standardize.scale"),
            prefix: Map::new(
                PREFIX_ENCODER,
                MapSpec::CausalCell {
                    input: c.d_e,
                    hidden: c.d_h,
                },
            )?,
            anat: affine(format!("{FACTOR_HEADS}.anat"), c.d_h, c.d_anat)?,
            lesion: affine(format!("{FACTOR_HEADS}.lesion"), c.d_h, c.d_lesion)?,
            unc: affine(format!("{FACTOR_HEADS}.unc"), c.d_h, c.d_unc)?,
            presence: affine(PRESENCE_HEAD, c.d_lesion, 1)?,
            tok: affine(TOKEN_PROJECTOR, c.d_state(), c.d_w)?,
            pred_h: (1..=c.horizon).map(|k| head("h", k, c.d_h)).collect::<Result<_>>()?,
            pred_w: (1..=c.horizon).map(|k| head("w", k, c.d_w)).collect::<Result<_>>()?,
            unc_head: affine(UNCERTAINTY_HEAD, c.d_unc, 1)?,
            lm: Map::new(
                LANGUAGE_PROJECTION,
                MapSpec::Mlp2 {
                    input: c.d_w,
                    hidden: c.lm_hidden,
                    output: c.d_z,
                    activation: Activation::Gelu,
                },
            )?,
            recon: affine(RECON_HEAD, c.d_h, c.d_e)?,
            decoder: Decoder::new(
                DECODER,
                DecoderSpec {
                    width: c.d_z,
                    layers: c.decoder_layers,
                    ff: c.decoder_ff,
                    vocab: c.vocab,
                },
            )?,
            config,
        })
    }

    /// Fresh parameters drawn from `seed`, registered in a fixed order.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &self.config;
        self.patch_embed.init(&mut store, &mut rng)?;
        store.insert_uniform(&self.patch_pos, c.num_patches(), c.d_v, c.d_v, &mut rng)?;
        store.insert(&self.feature_shift, Tensor::zeros(1, c.d_e))?;
        store.insert(&self.feature_scale, Tensor::filled(1, c.d_e, 1.0))?;
        for m in [
            &self.compress,
            &self.prefix,
            &self.anat,
            &self.lesion,
            &self.unc,
            &self.presence,
            &self.tok,
        ] {
            m.init(&mut store, &mut rng)?;
        }
        for m in self.pred_h.iter().chain(&self.pred_w) {
            m.init(&mut store, &mut rng)?;
        }
        for m in [&self.unc_head, &self.lm, &self.recon] {
            m.init(&mut store, &mut rng)?;
        }
        self.decoder.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// RGB images at the encoder resolution, one per slice.
    pub fn slice_images(&self, volume: &HuVolume) -> Result<Vec<RgbImage>> {
        volume
            .slices
            .iter()
            .map(|s| hu_to_rgb(s, self.config.image_side))
            .collect()
    }

    pub fn patchify(&self, image: &RgbImage) -> Result<Tensor> {
        patchify(image, self.config.patch)
    }

    /// `T × d_e` slice features; each row depends only on its own image.
    pub fn encode_slices(&self, g: &mut Graph, images: &[RgbImage]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::validation("cannot encode an empty slice sequence"));
        }
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            if img.side != self.config.image_side {
                return Err(Error::validation(format!(
                    "slice image side {} does not match encoder side {}",
                    img.side, self.config.image_side
                )));
            }
            let patches = self.patchify(img)?;
            let p = g.constant(patches);
            rows.push(self.encode_patches(g, p)?);
        }
        g.concat_rows(&rows)
    }

    /// One slice: affine patch embedding plus learned patch positions, then
    /// cross-attention compression to a single `1 × d_e` row.
    pub fn encode_patches(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let tokens = self.patch_embed.forward(g, patches)?;
        let pos = g.param(&self.patch_pos)?;
        let tokens = g.add(tokens, pos)?;
        let raw = cross_attention_compress(g, &self.compress, tokens)?;
        let shift = g.param(&self.feature_shift)?;
        let scale = g.param(&self.feature_scale)?;
        let centred = g.add_row(raw, shift)?;
        g.mul_row(centred, scale)
    }

    /// Sets the output standardization of the slice encoder so that features
    /// of `studies` have zero mean and unit variance per dimension.
    pub fn calibrate_features<S: AsRef<[RgbImage]> + Sync>(&self, params: &mut ParamStore, studies: &[S]) -> Result<()> {
        let d = self.config.d_e;
        *params.get_mut(&self.feature_shift)? = Tensor::zeros(1, d);
        *params.get_mut(&self.feature_scale)? = Tensor::filled(1, d, 1.0);
        let snapshot = &*params;
        let feats = studies
            .par_iter()
            .map(|imgs| self.features(snapshot, imgs.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = feats.iter().map(Tensor::rows).sum();
        if n == 0 {
            return Err(Error::validation("no slices to calibrate the slice encoder on"));
        }
        let mut mean = vec![0.0; d];
        for f in &feats {
            for r in 0..f.rows() {
                for (m, v) in mean.iter_mut().zip(f.row(r)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in &feats {
            for r in 0..f.rows() {
                for ((s, v), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let scale: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64).sqrt().max(1e-6)).collect();
        *params.get_mut(&self.feature_shift)? = Tensor::from_vec(1, d, mean.iter().map(|m| -m).collect())?;
        *params.get_mut(&self.feature_scale)? = Tensor::from_vec(1, d, scale)?;
        Ok(())
    }

    /// Slice features as plain values, without recording gradients.
    pub fn features(&self, params: &ParamStore, images: &[RgbImage]) -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let e = self.encode_slices(&mut g, images)?;
        Ok(g.value(e).clone())
    }

    /// `h_{1:T}` from features `e` (`T × d_e`) and positions `p` (`T × d_e`).
    pub fn encode_prefix(&self, g: &mut Graph, e: Var, p: &Tensor) -> Result<Var> {
        if g.shape(e) != p.shape() {
            return Err(Error::validation(format!(
                "features {:?} and positions {:?} differ in shape",
                g.shape(e),
                p.shape()
            )));
        }
        let p = g.constant(p.clone());
        let x = g.add(e, p)?;
        self.prefix.forward(g, x)
    }

    /// [`Self::encode_prefix`] with the sinusoidal positions for this length.
    pub fn prefix_states(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let t = g.shape(e).0;
        self.encode_prefix(g, e, &positional_encoding(t, self.config.d_e)?)
    }

    pub fn decompose_state(&self, g: &mut Graph, h: Var) -> Result<StateVars> {
        let a = self.anat.forward(g, h)?;
        let l = self.lesion.forward(g, h)?;
        let u = self.unc.forward(g, h)?;
        let m_hat = self.presence_prob(g, l)?;
        Ok(StateVars { a, l, u, m_hat })
    }

    fn presence_prob(&self, g: &mut Graph, l: Var) -> Result<Var> {
        let logit = self.presence.forward(g, l)?;
        Ok(g.sigmoid(logit))
    }

    /// Replaces one factor with zeros and recomputes `m_hat` from the
    /// resulting lesion factor.
    pub fn intervene(&self, g: &mut Graph, state: &StateVars, mode: Intervention) -> Result<StateVars> {
        let zeros_like = |g: &mut Graph, v: Var| {
            let (r, c) = g.shape(v);
            g.constant(Tensor::zeros(r, c))
        };
        let mut s = *state;
        match mode {
            Intervention::None => {}
            Intervention::LesionZero => s.l = zeros_like(g, s.l),
            Intervention::UncertaintyZero => s.u = zeros_like(g, s.u),
        }
        s.m_hat = self.presence_prob(g, s.l)?;
        Ok(s)
    }

    /// `s = [a; l; u]`.
    pub fn state_vector(&self, g: &mut Graph, state: &StateVars) -> Result<Var> {
        g.concat_cols(&[state.a, state.l, state.u])
    }

    pub fn world_tokens(&self, g: &mut Graph, state: &StateVars) -> Result<Var> {
        let s = self.state_vector(g, state)?;
        self.tok.forward(g, s)
    }

    pub fn language_tokens(&self, g: &mut Graph, w: Var) -> Result<Var> {
        self.lm.forward(g, w)
    }

    /// `(w, z)` for every position.
    pub fn project_tokens(&self, g: &mut Graph, state: &StateVars) -> Result<(Var, Var)> {
        let w = self.world_tokens(g, state)?;
        let z = self.language_tokens(g, w)?;
        Ok((w, z))
    }

    /// Horizon-`k` prediction head of `pathway` applied row-wise. Counterfactual
    /// predictions use [`Pathway::W`] on intervened tokens.
    pub fn predict_future(&self, g: &mut Graph, x: Var, pathway: Pathway, k: usize) -> Result<Var> {
        let heads = match pathway {
            Pathway::H => &self.pred_h,
            Pathway::W => &self.pred_w,
        };
        if k == 0 || k > heads.len() {
            return Err(Error::validation(format!(
                "horizon {k} outside [1, {}]",
                heads.len()
            )));
        }
        heads[k - 1].forward(g, x)
    }

    /// `softplus(affine(u))`, one nonnegative scalar per row.
    pub fn uncertainty_scalar(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let v = self.unc_head.forward(g, u)?;
        Ok(g.softplus(v))
    }

    /// Current-slice reconstruction `r(h_t)` used by the reconstruction
    /// pretraining variant.
    pub fn reconstruct(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.recon.forward(g, h)
    }

    /// Full world pathway from features to language tokens, as plain values.
    pub fn run_world(&self, params: &ParamStore, e: &Tensor, mode: Intervention) -> Result<WorldOutputs> {
        let mut g = Graph::inference(params);
        let ev = g.constant(e.clone());
        let h = self.prefix_states(&mut g, ev)?;
        let st = self.decompose_state(&mut g, h)?;
        let st = self.intervene(&mut g, &st, mode)?;
        let (w, z) = self.project_tokens(&mut g, &st)?;
        Ok(WorldOutputs {
            h: g.value(h).clone(),
            a: g.value(st.a).clone(),
            l: g.value(st.l).clone(),
            u: g.value(st.u).clone(),
            m_hat: g.value(st.m_hat).data().to_vec(),
            w: g.value(w).clone(),
            z: g.value(z).clone(),
        })
    }

    /// Greedy report from language tokens `z` (`T × d_z`).
    pub fn generate_report(&self, params: &ParamStore, z: &Tensor, prompt: &[u32]) -> Result<Vec<u32>> {
        self.decoder.greedy(params, z, prompt, self.config.max_report_len)
    }
}

/// Splits an image into non-overlapping `patch × patch` tiles in row-major
/// grid order; each row holds one tile's pixels (row-major, RGB interleaved)
/// scaled to `[0, 1]`.
pub fn patchify(image: &RgbImage, patch: usize) -> Result<Tensor> {
    let side = image.side;
    if patch == 0 || side % patch != 0 {
        return Err(Error::validation(format!(
            "image side {side} is not divisible by patch size {patch}"
        )));
    }
    let n = side / patch;
    let mut data = Vec::with_capacity(side * side * 3);
    for pr in 0..n {
        for pc in 0..n {
            for r in pr * patch..(pr + 1) * patch {
                let start = (r * side + pc * patch) * 3;
                data.extend(image.data[start..start + patch * 3].iter().map(|&v| f64::from(v) / 255.0));
            }
        }
    }
    Tensor::from_vec(n * n, patch * patch * 3, data)
}

/// Sinusoidal encoding of the normalized index `t / T` (`t` 1-based); column
/// pair `j` uses angular frequency `π (j + 1)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if len == 0 || dim == 0 {
        return Err(Error::validation("positional encoding needs T >= 1 and d >= 1"));
    }
    let mut p = Tensor::zeros(len, dim);
    for t in 0..len {
        let pos = (t + 1) as f64 / len as f64;
        for j in 0..dim {
            let a = std::f64::consts::PI * (j / 2 + 1) as f64 * pos;
            p.set(t, j, if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(p)
}
