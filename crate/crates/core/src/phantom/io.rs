//! Dataset directories: `meta.json` plus one raw little-endian int16 file per
//! study (`studies/<id>.hu`, row-major `T × rows × cols`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{generate_phantom_study, PhantomConfig, PhantomStudy};
use super::report::{extract_findings, TemplateReport};
use super::volume::{assign_slice_labels, HuSlice, HuVolume, LesionAnnotation};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub study_id: String,
    pub split: String,
    pub file: String,
    pub num_slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub spacing_tag: String,
    pub annotations: Vec<LesionAnnotation>,
    pub labels: Vec<u8>,
    pub report_tokens: Vec<u32>,
    pub noise_hu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generator: Option<PhantomConfig>,
    pub seed: Option<u64>,
    pub studies: Vec<StudyMeta>,
}

/// A study together with its split tag.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedStudy {
    pub split: String,
    pub study: PhantomStudy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub finetune: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            finetune: 1000,
            test: 200,
        }
    }
}

pub const SPLITS: [&str; 3] = ["pretrain", "finetune", "test"];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-study seed, disjoint across splits for a given base seed.
pub fn study_seed(base: u64, split: usize, index: usize) -> u64 {
    splitmix64(splitmix64(base) ^ ((split as u64) << 40) ^ index as u64)
}

pub fn generate_split(
    config: &PhantomConfig,
    base_seed: u64,
    split: &str,
    count: usize,
) -> Result<Vec<PhantomStudy>> {
    let split_idx = SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| Error::validation(format!("unknown split `{split}`")))?;
    (0..count)
        .map(|i| {
            let id = format!("{split}-{i:05}");
            generate_phantom_study(study_seed(base_seed, split_idx, i), &id, config)
        })
        .collect()
}

pub fn generate_dataset(config: &PhantomConfig, base_seed: u64, counts: &SplitCounts) -> Result<Vec<TaggedStudy>> {
    let mut out = Vec::new();
    for (split, n) in SPLITS.iter().zip([counts.pretrain, counts.finetune, counts.test]) {
        for study in generate_split(config, base_seed, split, n)? {
            out.push(TaggedStudy {
                split: split.to_string(),
                study,
            });
        }
    }
    Ok(out)
}

pub fn write_dataset(
    dir: &Path,
    studies: &[TaggedStudy],
    generator: Option<&PhantomConfig>,
    seed: Option<u64>,
) -> Result<DatasetMeta> {
    let study_dir = dir.join("studies");
    fs::create_dir_all(&study_dir).map_err(|e| Error::io(&study_dir, e))?;
    let mut metas = Vec::with_capacity(studies.len());
    for tagged in studies {
        let s = &tagged.study;
        let file = format!("studies/{}.hu", s.volume.study_id);
        let mut bytes = Vec::new();
        for slice in &s.volume.slices {
            for v in slice.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let (rows, cols) = s.volume.shape();
        metas.push(StudyMeta {
            study_id: s.volume.study_id.clone(),
            split: tagged.split.clone(),
            file,
            num_slices: s.len(),
            rows,
            cols,
            spacing_tag: s.volume.spacing_tag.clone(),
            annotations: s.annotations.clone(),
            labels: s.labels.m.clone(),
            report_tokens: s.report.tokens.clone(),
            noise_hu: s.noise_hu,
        });
    }
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT,
        generator: generator.cloned(),
        seed,
        studies: metas,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

/// Reads a raw little-endian int16 volume of shape `num_slices × rows × cols`.
pub fn read_raw_hu(path: &Path, num_slices: usize, rows: usize, cols: usize, study_id: &str) -> Result<HuVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let per_slice = rows * cols;
    if bytes.len() != 2 * per_slice * num_slices {
        return Err(Error::validation(format!(
            "{}: {} bytes, expected {} for shape {num_slices}x{rows}x{cols}",
            path.display(),
            bytes.len(),
            2 * per_slice * num_slices
        )));
    }
    let values: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let slices = values
        .chunks(per_slice)
        .map(|c| HuSlice::new(rows, cols, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    HuVolume::new(slices, "raw", study_id)
}

/// Sidecar for a standalone raw-HU file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    /// `[num_slices, rows, cols]`
    pub shape: [usize; 3],
    #[serde(default)]
    pub study_id: Option<String>,
}

/// Reads `<path>` using the shape in the JSON sidecar `<path>.json`.
pub fn read_raw_with_sidecar(path: &Path) -> Result<HuVolume> {
    let side = path.with_extension(format!(
        "{}json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: RawSidecar = serde_json::from_str(&text)?;
    let id = sc.study_id.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    read_raw_hu(path, sc.shape[0], sc.shape[1], sc.shape[2], &id)
}

pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format_version != DATASET_FORMAT {
        return Err(Error::validation(format!(
            "dataset format {} unsupported",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Loads every study of `split` (all studies when `None`), in file order.
pub fn read_dataset(dir: &Path, split: Option<&str>) -> Result<Vec<TaggedStudy>> {
    let meta = read_dataset_meta(dir)?;
    let mut out = Vec::new();
    for m in meta.studies.iter().filter(|m| split.is_none_or(|s| s == m.split)) {
        let mut volume = read_raw_hu(&dir.join(&m.file), m.num_slices, m.rows, m.cols, &m.study_id)?;
        volume.spacing_tag = m.spacing_tag.clone();
        let labels = assign_slice_labels(m.num_slices, &m.annotations)?;
        if labels.m != m.labels {
            return Err(Error::validation(format!(
                "labels of `{}` disagree with its annotations",
                m.study_id
            )));
        }
        let findings = extract_findings(&m.report_tokens)?;
        out.push(TaggedStudy {
            split: m.split.clone(),
            study: PhantomStudy {
                volume,
                annotations: m.annotations.clone(),
                labels,
                report: TemplateReport {
                    tokens: m.report_tokens.clone(),
                    findings,
                },
                noise_hu: m.noise_hu,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            native_side: 12,
            t_min: 6,
            t_max: 8,
            min_lesion_len: 2,
            ..PhantomConfig::default()
        };
        let counts = SplitCounts {
            pretrain: 3,
            finetune: 2,
            test: 1,
        };
        let studies = generate_dataset(&cfg, 11, &counts).unwrap();
        write_dataset(dir.path(), &studies, Some(&cfg), Some(11)).unwrap();
        let back = read_dataset(dir.path(), None).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in studies.iter().zip(&back) {
            assert_eq!(a.split, b.split);
            assert_eq!(a.study.volume.slices, b.study.volume.slices);
            assert_eq!(a.study.labels, b.study.labels);
            assert_eq!(a.study.report, b.study.report);
        }
        assert_eq!(read_dataset(dir.path(), Some("finetune")).unwrap().len(), 2);
    }

    #[test]
    fn raw_reader_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("vol.hu");
        let values: [i16; 8] = [-1000, 0, 40, 3071, -1024, 5, 6, 7];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&raw, bytes).unwrap();
        fs::write(dir.path().join("vol.hu.json"), r#"{"shape": [2, 2, 2]}"#).unwrap();
        let v = read_raw_with_sidecar(&raw).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.slices[1].data(), &[-1024, 5, 6, 7]);
        assert_eq!(v.study_id, "vol");
    }

    #[test]
    fn raw_reader_rejects_wrong_size() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("vol.hu");
        fs::write(&raw, [0u8; 6]).unwrap();
        assert!(read_raw_hu(&raw, 1, 2, 2, "x").is_err());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let a: Vec<u64> = (0..100).map(|i| study_seed(0, 0, i)).collect();
        let b: Vec<u64> = (0..100).map(|i| study_seed(0, 2, i)).collect();
        assert!(a.iter().all(|s| !b.contains(s)));
    }
}
