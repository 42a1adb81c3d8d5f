use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{max_report_len, VOCAB_SIZE};

/// Architecture dimensions. Everything the network builds is derived from
/// this struct, so large and toy configurations share one code path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square RGB slice image fed to the encoder.
    pub image_side: usize,
    /// Side of a square, non-overlapping patch.
    pub patch: usize,
    /// Patch-token width.
    pub d_v: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_anat: usize,
    pub d_lesion: usize,
    pub d_unc: usize,
    pub d_w: usize,
    pub d_z: usize,
    pub vocab: usize,
    /// Prediction horizon K.
    pub horizon: usize,
    pub pred_hidden: usize,
    pub lm_hidden: usize,
    pub decoder_layers: usize,
    pub decoder_ff: usize,
    /// Cap on greedily generated report tokens.
    pub max_report_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch: 8,
            d_v: 32,
            d_e: 32,
            d_h: 64,
            d_anat: 16,
            d_lesion: 12,
            d_unc: 4,
            d_w: 32,
            d_z: 48,
            vocab: VOCAB_SIZE,
            horizon: 5,
            pred_hidden: 64,
            lm_hidden: 64,
            decoder_layers: 2,
            decoder_ff: 96,
            max_report_len: max_report_len(),
        }
    }
}

impl ModelConfig {
    /// Factor and token widths of the large reference configuration; the
    /// remaining widths keep their toy values.
    pub fn large_factors() -> Self {
        Self {
            d_anat: 256,
            d_lesion: 192,
            d_unc: 64,
            d_w: 512,
            ..Self::default()
        }
    }

    pub fn d_state(&self) -> usize {
        self.d_anat + self.d_lesion + self.d_unc
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_side", self.image_side),
            ("patch", self.patch),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_anat", self.d_anat),
            ("d_lesion", self.d_lesion),
            ("d_unc", self.d_unc),
            ("d_w", self.d_w),
            ("d_z", self.d_z),
            ("horizon", self.horizon),
            ("pred_hidden", self.pred_hidden),
            ("lm_hidden", self.lm_hidden),
            ("decoder_layers", self.decoder_layers),
            ("decoder_ff", self.decoder_ff),
            ("max_report_len", self.max_report_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("model config: {name} must be positive")));
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::validation(format!(
                "model config: image side {} not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::validation(format!(
                "model config: vocab {} smaller than the report vocabulary ({VOCAB_SIZE})",
                self.vocab
            )));
        }
        Ok(())
    }
}
