//! Template report vocabulary, rendering and finding extraction.
//!
//! Every finding is a fixed three-token phrase. Target findings (focal
//! lesions) are `size lesion quadrant`; non-target findings are
//! `word_a word_b present`. Studies without lesions state `no focal lesion`,
//! studies without non-target findings state `no other findings`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 64;
pub const NUM_TARGET_FINDINGS: usize = 8;
pub const NUM_NON_TARGET_FINDINGS: usize = 8;
pub const NUM_FINDINGS: usize = NUM_TARGET_FINDINGS + NUM_NON_TARGET_FINDINGS;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Fixed four-token prompt.
pub const PROMPT: [u32; 4] = [3, 4, 5, 6];

const SIZE_SMALL: u32 = 7;
const SIZE_LARGE: u32 = 8;
const LESION: u32 = 9;
const QUADRANT_BASE: u32 = 10; // 10..14
const NON_TARGET_BASE: u32 = 14; // 14..30, two words per finding
const PRESENT: u32 = 30;
const NO: u32 = 31;
const FOCAL: u32 = 32;
const OTHER: u32 = 33;
const FINDINGS: u32 = 34;

const WORDS: [&str; 35] = [
    "<pad>", "<bos>", "<eos>", "generate", "ct", "report", "findings:", "small", "large",
    "lesion", "right-upper", "left-upper", "right-lower", "left-lower", "pleural",
    "thickening", "aortic", "calcification", "hepatic", "cyst", "renal", "stone",
    "vertebral", "osteophyte", "coronary", "plaque", "splenic", "granuloma", "thyroid",
    "nodule", "present", "no", "focal", "other", "findings",
];

/// Finding identifier: `0..8` target, `8..16` non-target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Finding(pub u8);

impl Finding {
    pub fn target(quadrant: usize, large: bool) -> Self {
        debug_assert!(quadrant < 4);
        Finding((quadrant * 2 + usize::from(large)) as u8)
    }

    pub fn non_target(j: usize) -> Self {
        debug_assert!(j < NUM_NON_TARGET_FINDINGS);
        Finding((NUM_TARGET_FINDINGS + j) as u8)
    }

    pub fn is_target(self) -> bool {
        (self.0 as usize) < NUM_TARGET_FINDINGS
    }

    pub fn phrase(self) -> [u32; 3] {
        let i = u32::from(self.0);
        if self.is_target() {
            let size = if i % 2 == 1 { SIZE_LARGE } else { SIZE_SMALL };
            [size, LESION, QUADRANT_BASE + i / 2]
        } else {
            let j = i - NUM_TARGET_FINDINGS as u32;
            [NON_TARGET_BASE + 2 * j, NON_TARGET_BASE + 2 * j + 1, PRESENT]
        }
    }

    fn from_phrase(p: &[u32]) -> Option<Self> {
        (0..NUM_FINDINGS as u8)
            .map(Finding)
            .find(|f| f.phrase() == p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FindingSet {
    pub target: BTreeSet<Finding>,
    pub non_target: BTreeSet<Finding>,
}

impl FindingSet {
    pub fn from_iter(findings: impl IntoIterator<Item = Finding>) -> Self {
        let mut s = Self::default();
        for f in findings {
            if f.is_target() {
                s.target.insert(f);
            } else {
                s.non_target.insert(f);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateReport {
    /// Report tokens, ending with `EOS`.
    pub tokens: Vec<u32>,
    pub findings: FindingSet,
}

pub fn render_report(findings: &FindingSet) -> TemplateReport {
    let mut tokens = Vec::new();
    if findings.target.is_empty() {
        tokens.extend([NO, FOCAL, LESION]);
    }
    for f in &findings.target {
        tokens.extend(f.phrase());
    }
    if findings.non_target.is_empty() {
        tokens.extend([NO, OTHER, FINDINGS]);
    }
    for f in &findings.non_target {
        tokens.extend(f.phrase());
    }
    tokens.push(EOS);
    TemplateReport {
        tokens,
        findings: findings.clone(),
    }
}

/// Longest report the templates can produce.
pub fn max_report_len() -> usize {
    3 * (NUM_FINDINGS) + 1
}

/// Parses a (possibly generated) token sequence back into findings. Tokens
/// after the first `EOS` are ignored; any phrase that does not match the
/// templates is an error.
pub fn extract_findings(tokens: &[u32]) -> Result<FindingSet> {
    let body: &[u32] = match tokens.iter().position(|&t| t == EOS) {
        Some(p) => &tokens[..p],
        None => tokens,
    };
    if body.len() % 3 != 0 {
        return Err(Error::validation(format!(
            "report body of {} tokens is not a sequence of phrases",
            body.len()
        )));
    }
    let mut set = FindingSet::default();
    for phrase in body.chunks(3) {
        if phrase == [NO, FOCAL, LESION] || phrase == [NO, OTHER, FINDINGS] {
            continue;
        }
        let f = Finding::from_phrase(phrase).ok_or_else(|| {
            Error::validation(format!("unrecognized phrase {}", detokenize(phrase)))
        })?;
        if f.is_target() {
            set.target.insert(f);
        } else {
            set.non_target.insert(f);
        }
    }
    Ok(set)
}

pub fn detokenize(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| WORDS.get(t as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
