//! Procedural phantom studies: a drifting ellipse body with lungs, spine and
//! an organ whose geometry is monotone in slice position, persistent markers
//! for non-target findings, and bright lesion disks inside annotated
//! intervals.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::report::{render_report, Finding, FindingSet, TemplateReport, NUM_NON_TARGET_FINDINGS};
use super::volume::{assign_slice_labels, HuSlice, HuVolume, LesionAnnotation, SliceLabels, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub t_min: usize,
    pub t_max: usize,
    /// Side of the rendered HU slices.
    pub native_side: usize,
    /// Probability that a study carries at least one lesion.
    pub positive_rate: f64,
    /// Expected fraction of lesion slices over all studies.
    pub lesion_slice_rate: f64,
    /// Probability of a second lesion when the covered length allows it.
    pub second_lesion_prob: f64,
    pub min_lesion_len: usize,
    /// Scales the slice-to-slice anatomical drift.
    pub drift: f64,
    /// Per-study noise standard deviation is drawn from this HU range.
    pub noise_hu: (f64, f64),
    pub non_target_prob: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            t_min: 16,
            t_max: 24,
            native_side: 64,
            positive_rate: 0.5,
            lesion_slice_rate: 0.2,
            second_lesion_prob: 0.3,
            min_lesion_len: 3,
            drift: 1.0,
            noise_hu: (5.0, 150.0),
            non_target_prob: 0.3,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("phantom config: {m}")));
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad("need 1 <= t_min <= t_max");
        }
        if self.native_side < 8 {
            return bad("native_side must be at least 8");
        }
        for (name, p) in [
            ("positive_rate", self.positive_rate),
            ("lesion_slice_rate", self.lesion_slice_rate),
            ("second_lesion_prob", self.second_lesion_prob),
            ("non_target_prob", self.non_target_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.lesion_slice_rate > 0.0 {
            if self.positive_rate == 0.0 {
                return bad("lesion_slice_rate > 0 requires positive_rate > 0");
            }
            let covered = self.lesion_slice_rate / self.positive_rate;
            if covered > 1.0 {
                return bad("lesion intervals would be longer than the study");
            }
            if self.min_lesion_len == 0 || self.min_lesion_len > self.t_min {
                return bad("min_lesion_len must lie in [1, t_min]");
            }
            if (covered * self.t_min as f64) + 1.0 < self.min_lesion_len as f64 {
                return bad("covered lesion length below min_lesion_len for the shortest study");
            }
        }
        let (lo, hi) = self.noise_hu;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad("noise_hu must be an ordered non-negative range");
        }
        Ok(())
    }

    fn covered_fraction(&self) -> f64 {
        if self.positive_rate == 0.0 {
            0.0
        } else {
            self.lesion_slice_rate / self.positive_rate
        }
    }
}

/// One synthetic study with everything derived from its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomStudy {
    pub volume: HuVolume,
    pub annotations: Vec<LesionAnnotation>,
    pub labels: SliceLabels,
    pub report: TemplateReport,
    pub noise_hu: f64,
}

impl PhantomStudy {
    pub fn len(&self) -> usize {
        self.volume.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volume.is_empty()
    }

    pub fn lesion_positive(&self) -> bool {
        !self.annotations.is_empty()
    }
}

struct Anatomy {
    center: (f64, f64),
    axes: (f64, f64),
    theta0: f64,
    lung_scale: f64,
    organ_offset: f64,
}

/// Quadrant of a lesion center: 0 right-upper, 1 left-upper, 2 right-lower,
/// 3 left-lower (image left is patient right).
pub fn quadrant_of(center: (f64, f64)) -> usize {
    let lower = center.0 >= 0.5;
    let left = center.1 >= 0.5;
    usize::from(lower) * 2 + usize::from(left)
}

pub const LARGE_RADIUS: f64 = 0.12;

pub fn target_finding(a: &LesionAnnotation) -> Finding {
    Finding::target(quadrant_of(a.center), a.radius >= LARGE_RADIUS)
}

pub fn generate_phantom_study(seed: u64, study_id: &str, config: &PhantomConfig) -> Result<PhantomStudy> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(config.t_min..=config.t_max);
    let anatomy = Anatomy {
        center: (0.5 + rng.random_range(-0.02..0.02), 0.5 + rng.random_range(-0.02..0.02)),
        axes: (0.40 + rng.random_range(-0.02..0.02), 0.31 + rng.random_range(-0.02..0.02)),
        theta0: rng.random_range(-0.08..0.08),
        lung_scale: 1.0 + rng.random_range(-0.05..0.05),
        organ_offset: rng.random_range(-0.03..0.03),
    };
    let noise_hu = rng.random_range(config.noise_hu.0..=config.noise_hu.1);
    let non_target: Vec<usize> = (0..NUM_NON_TARGET_FINDINGS)
        .filter(|_| rng.random::<f64>() < config.non_target_prob)
        .collect();

    let mut annotations = Vec::new();
    if config.lesion_slice_rate > 0.0 && rng.random::<f64>() < config.positive_rate {
        annotations = place_lesions(&mut rng, len, config)?;
    }
    let labels = assign_slice_labels(len, &annotations)?;

    let side = config.native_side;
    let normal = Normal::new(0.0, noise_hu.max(1e-9)).map_err(|e| Error::validation(e.to_string()))?;
    let mut slices = Vec::with_capacity(len);
    for t in 0..len {
        let z = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
        let active: Vec<&LesionAnnotation> = annotations.iter().filter(|a| a.contains(t)).collect();
        let mut data = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let y = (r as f64 + 0.5) / side as f64;
                let x = (c as f64 + 0.5) / side as f64;
                let mut hu = render_anatomy(&anatomy, config.drift, z, y, x, &non_target);
                for a in &active {
                    let (dy, dx) = (y - a.center.0, x - a.center.1);
                    if dy * dy + dx * dx <= a.radius * a.radius {
                        hu += 200.0 + 300.0 * a.intensity;
                    }
                }
                hu += normal.sample(&mut rng);
                data.push(hu.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16);
            }
        }
        slices.push(HuSlice::new(side, side, data)?);
    }
    let volume = HuVolume::new(slices, "phantom-1.0mm", study_id)?;

    let findings = FindingSet::from_iter(
        annotations
            .iter()
            .map(target_finding)
            .chain(non_target.iter().map(|&j| Finding::non_target(j))),
    );
    let report = render_report(&findings);
    Ok(PhantomStudy {
        volume,
        annotations,
        labels,
        report,
        noise_hu,
    })
}

fn place_lesions(rng: &mut ChaCha8Rng, len: usize, config: &PhantomConfig) -> Result<Vec<LesionAnnotation>> {
    // Stochastic rounding keeps the expected covered length at covered·T.
    let target = config.covered_fraction() * len as f64;
    let mut covered = target.floor() as usize + usize::from(rng.random::<f64>() < target.fract());
    covered = covered.clamp(config.min_lesion_len, len);
    let count = if covered >= 2 * config.min_lesion_len && rng.random::<f64>() < config.second_lesion_prob {
        2
    } else {
        1
    };
    let mut lengths = vec![config.min_lesion_len; count];
    for _ in 0..covered - count * config.min_lesion_len {
        let i = rng.random_range(0..count);
        lengths[i] += 1;
    }
    // Distribute the free slices over count + 1 gaps.
    let mut gaps = vec![0usize; count + 1];
    for _ in 0..len - covered {
        let i = rng.random_range(0..=count);
        gaps[i] += 1;
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = gaps[0];
    for (i, &l) in lengths.iter().enumerate() {
        let quadrant = rng.random_range(0..4usize);
        let (qr, qc) = (quadrant / 2, quadrant % 2);
        let center = (
            0.5 + if qr == 1 { 1.0 } else { -1.0 } * rng.random_range(0.07..0.13),
            0.5 + if qc == 1 { 1.0 } else { -1.0 } * rng.random_range(0.07..0.13),
        );
        let radius = if rng.random::<bool>() {
            rng.random_range(0.08..0.105)
        } else {
            rng.random_range(0.135..0.16)
        };
        let a = LesionAnnotation {
            start_slice: pos,
            end_slice: pos + l - 1,
            intensity: rng.random_range(0.5..=1.0),
            center,
            radius,
        };
        a.validate(len)?;
        out.push(a);
        pos += l + gaps[i + 1];
    }
    Ok(out)
}

fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, ay: f64, ax: f64, theta: f64) -> bool {
    let (s, c) = theta.sin_cos();
    let (dy, dx) = (y - cy, x - cx);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
}

fn render_anatomy(an: &Anatomy, drift: f64, z: f64, y: f64, x: f64, markers: &[usize]) -> f64 {
    let dz = drift * (z - 0.5);
    let theta = an.theta0 + 0.35 * dz;
    let cy = an.center.0 + 0.05 * dz;
    let cx = an.center.1 + 0.04 * dz;
    let ax = an.axes.0 - 0.05 * dz;
    let ay = an.axes.1 + 0.04 * dz;
    if !in_ellipse(y, x, cy, cx, ay, ax, theta) {
        return -1024.0;
    }
    let (s, c) = theta.sin_cos();
    // body frame offsets
    let to_img = |u: f64, v: f64| (cy + s * u + c * v, cx + c * u - s * v);

    for &j in markers {
        let angle = 2.0 * PI * j as f64 / NUM_NON_TARGET_FINDINGS as f64 + theta;
        let (my, mx) = (cy + 0.24 * angle.sin(), cx + 0.29 * angle.cos());
        if (y - my).powi(2) + (x - mx).powi(2) <= 0.035f64.powi(2) {
            return 320.0;
        }
    }
    // spine, posterior midline
    let (sy, sx) = to_img(0.0, 0.22);
    if (y - sy).powi(2) + (x - sx).powi(2) <= 0.05f64.powi(2) {
        return 700.0;
    }
    // lungs shrink towards the caudal end
    let lung = an.lung_scale * (1.0 - 0.7 * drift * z).max(0.05);
    for side in [-1.0, 1.0] {
        let (ly, lx) = to_img(side * 0.17, -0.03);
        if in_ellipse(y, x, ly, lx, 0.16 * lung, 0.09 * lung, theta) {
            return -820.0;
        }
    }
    // organ grows towards the caudal end
    let organ = 0.03 + 0.12 * z + an.organ_offset;
    if organ > 0.0 {
        let (oy, ox) = to_img(-0.12, 0.05);
        if in_ellipse(y, x, oy, ox, organ * 0.8, organ, theta) {
            return 65.0;
        }
    }
    35.0
}
