use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// One axial slice of signed 16-bit HU values, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuSlice {
    rows: usize,
    cols: usize,
    data: Vec<i16>,
}

impl HuSlice {
    pub fn new(rows: usize, cols: usize, data: Vec<i16>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::validation(format!(
                "slice of {} values cannot be {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }
}

/// Ordered axial slices of one study.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuVolume {
    pub slices: Vec<HuSlice>,
    pub spacing_tag: String,
    pub study_id: String,
}

impl HuVolume {
    pub fn new(slices: Vec<HuSlice>, spacing_tag: impl Into<String>, study_id: impl Into<String>) -> Result<Self> {
        let v = Self {
            slices,
            spacing_tag: spacing_tag.into(),
            study_id: study_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::validation(format!("study `{}` has no slices", self.study_id)))?;
        for (t, s) in self.slices.iter().enumerate() {
            if (s.rows, s.cols) != (first.rows, first.cols) {
                return Err(Error::validation(format!(
                    "slice {t} of `{}` is {}x{}, expected {}x{}",
                    self.study_id, s.rows, s.cols, first.rows, first.cols
                )));
            }
            if let Some(v) = s.data.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
                return Err(Error::validation(format!(
                    "HU value {v} outside [{HU_MIN}, {HU_MAX}] in slice {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices
            .first()
            .map_or((0, 0), |s| (s.rows, s.cols))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub start_slice: usize,
    /// Inclusive.
    pub end_slice: usize,
    pub intensity: f64,
    /// (row, col) as fractions of the slice size.
    pub center: (f64, f64),
    /// Fraction of the slice width.
    pub radius: f64,
}

impl LesionAnnotation {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.start_slice > self.end_slice || self.end_slice >= len {
            return Err(Error::validation(format!(
                "lesion interval [{}, {}] invalid for T={len}",
                self.start_slice, self.end_slice
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::validation("lesion radius must be positive"));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::validation("lesion intensity must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start_slice..=self.end_slice).contains(&t)
    }

    pub fn len(&self) -> usize {
        self.end_slice + 1 - self.start_slice
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Slice-level lesion-presence labels `m_t ∈ {0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLabels {
    pub m: Vec<u8>,
}

impl SliceLabels {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.m.iter().map(|&v| f64::from(v)).collect()
    }
}

/// `m_t = 1` exactly when slice `t` lies inside some annotated interval.
pub fn assign_slice_labels(len: usize, annotations: &[LesionAnnotation]) -> Result<SliceLabels> {
    let mut m = vec![0u8; len];
    for a in annotations {
        if a.start_slice > a.end_slice || a.end_slice >= len {
            return Err(Error::validation(format!(
                "lesion interval [{}, {}] out of range for T={len}",
                a.start_slice, a.end_slice
            )));
        }
        m[a.start_slice..=a.end_slice].fill(1);
    }
    Ok(SliceLabels { m })
}
