//! Experiment orchestration: configuration, checkpoints, end-to-end runs
//! and the comparison studies.

mod config;
mod doc;
mod run;
mod studies;

pub use config::{RunConfig, RunSection, StudySection, CONFIG_FORMAT_VERSION};
pub use doc::{from_document, load_document, save_document, to_document};
pub use run::{
    build_suite, evaluate_languages, init_params, load_suite, run, run_from, save_suite, write_results,
    Checkpoint, LanguageResult, RunOutput, CHECKPOINT_FILE, CHECKPOINT_FORMAT_VERSION, CONFIG_FILE,
    METRICS_FILE, RESULTS_FILE, RESULTS_FORMAT_VERSION, SUITE_FILE, SUITE_FORMAT_VERSION,
};
pub use studies::{
    ablate_adapters, compare_samplers, sign_test, subsets_for, AblationRow, AdapterAblation, CurvePoint,
    SamplerComparison, SignTest, StrategyRow, TABLE_FORMAT_VERSION,
};
