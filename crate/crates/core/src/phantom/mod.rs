//! Synthetic CT phantoms, HU windowing, template reports and dataset files.

mod generator;
mod io;
mod report;
mod volume;
mod window;

pub use generator::{
    generate_phantom_study, quadrant_of, target_finding, PhantomConfig, PhantomStudy, LARGE_RADIUS,
};
pub use io::{
    generate_dataset, generate_split, read_dataset, read_dataset_meta, read_raw_hu,
    read_raw_with_sidecar, study_seed, write_dataset, DatasetMeta, RawSidecar, SplitCounts,
    StudyMeta, TaggedStudy, DATASET_FORMAT, SPLITS,
};
pub use report::{
    detokenize, extract_findings, max_report_len, render_report, Finding, FindingSet,
    TemplateReport, BOS, EOS, NUM_FINDINGS, NUM_NON_TARGET_FINDINGS, NUM_TARGET_FINDINGS, PAD,
    PROMPT, VOCAB_SIZE,
};
pub use volume::{
    assign_slice_labels, HuSlice, HuVolume, LesionAnnotation, SliceLabels, HU_MAX, HU_MIN,
};
pub use window::{
    area_resize, hu_to_rgb, hu_window_to_channel, window_value, window_values, RgbImage,
    WindowSpec,
};
