//! Benchmarks, metrics and the aligned evaluation harness.

pub mod dataset;
pub mod harness;
pub mod metrics;
pub mod prep;
pub mod presets;

pub use dataset::{load_dataset, parse_dataset, sample_sequential, BenchmarkItem, Choice, DatasetError, KeyMap};
pub use harness::{
    aggregate_tables, check_alignment, evaluate_item, evaluate_run, fingerprint, AlignmentFingerprint, EvalError,
    EvalReport, EvalSettings, ItemRecord, RunComponents, RunCounts,
};
pub use metrics::{
    accuracy, choice_accuracy, exact_match, f1, normalize_text, rouge_l, rouge_l_max, str_em, str_hit, Metric,
};
pub use prep::{default_special_tokens, strip_jsonl, strip_special_tokens, strip_text, strip_value};
pub use presets::{BenchmarkPreset, PresetError, PresetTable};
