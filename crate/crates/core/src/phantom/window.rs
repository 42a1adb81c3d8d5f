//! HU windowing into 8-bit display channels and area resampling.

use serde::{Deserialize, Serialize};

use super::volume::HuSlice;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    pub const LUNG: WindowSpec = WindowSpec {
        level: -600.0,
        width: 1500.0,
    };
    pub const SOFT_TISSUE: WindowSpec = WindowSpec {
        level: 40.0,
        width: 400.0,
    };
    pub const BONE: WindowSpec = WindowSpec {
        level: 400.0,
        width: 1500.0,
    };

    /// Red, green, blue.
    pub const RGB: [WindowSpec; 3] = [Self::LUNG, Self::SOFT_TISSUE, Self::BONE];

    pub fn new(level: f64, width: f64) -> Result<Self> {
        let w = Self { level, width };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() || !self.level.is_finite() {
            return Err(Error::validation(format!(
                "window width must be positive and finite (level={}, width={})",
                self.level, self.width
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.level - self.width / 2.0
    }

    pub fn upper(&self) -> f64 {
        self.level + self.width / 2.0
    }
}

/// Clip to `[WL − WW/2, WL + WW/2]`, scale to `[0, 255]`, round half up.
pub fn window_value(hu: f64, window: &WindowSpec) -> Result<u8> {
    if !hu.is_finite() {
        return Err(Error::validation(format!("non-finite HU value {hu}")));
    }
    let lo = window.lower();
    let clipped = hu.clamp(lo, window.upper());
    let scaled = 255.0 * (clipped - lo) / window.width;
    Ok((scaled + 0.5).floor() as u8)
}

/// Windows a float HU array; rejects non-finite input.
pub fn window_values(values: &[f64], window: &WindowSpec) -> Result<Vec<u8>> {
    window.validate()?;
    values.iter().map(|&v| window_value(v, window)).collect()
}

pub fn hu_window_to_channel(slice: &HuSlice, window: &WindowSpec) -> Result<Vec<u8>> {
    window.validate()?;
    slice
        .data()
        .iter()
        .map(|&v| window_value(f64::from(v), window))
        .collect()
}

/// Interleaved `side × side × 3` 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub side: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.side + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Scales to `[0, 1]` floats, same layout.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

/// Lung / soft-tissue / bone windows stacked as RGB, then area-resampled to
/// `side × side`.
pub fn hu_to_rgb(slice: &HuSlice, side: usize) -> Result<RgbImage> {
    if side == 0 {
        return Err(Error::validation("output side must be positive"));
    }
    let channels = WindowSpec::RGB
        .iter()
        .map(|w| hu_window_to_channel(slice, w))
        .collect::<Result<Vec<_>>>()?;
    let resized: Vec<Vec<u8>> = channels
        .iter()
        .map(|c| area_resize(c, slice.rows(), slice.cols(), side, side))
        .collect();
    let mut data = Vec::with_capacity(side * side * 3);
    for i in 0..side * side {
        data.extend(resized.iter().map(|c| c[i]));
    }
    Ok(RgbImage { side, data })
}

/// Area interpolation: every output pixel is the overlap-weighted mean of the
/// source pixels its footprint covers, rounded half up. Identity when the
/// sizes match.
pub fn area_resize(src: &[u8], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<u8> {
    if rows == out_rows && cols == out_cols {
        return src.to_vec();
    }
    let row_w = footprint_weights(rows, out_rows);
    let col_w = footprint_weights(cols, out_cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for rw in &row_w {
        for cw in &col_w {
            let mut acc = 0.0;
            let mut total = 0.0;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    let w = wr * wc;
                    acc += w * f64::from(src[r * cols + c]);
                    total += w;
                }
            }
            out.push(((acc / total) + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// For each output index, the source indices it overlaps and the overlap lengths.
fn footprint_weights(n_src: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_src as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let start = o as f64 * scale;
            let end = start + scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(n_src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (end.min(s as f64 + 1.0) - start.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}
