//! End-to-end runs: train on the source datasets, adapt to each target
//! language, evaluate on every language's test pool.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::doc;
use crate::error::{Error, Result};
use crate::meta::{
    adapt, evaluate, final_params, init_train_state, run_training, AdaptMode, MetricsLog, TrainContext,
    TrainState,
};
use crate::model::ModelParams;
use crate::tasks::{generate_suite, stream_rng, PoolKind, Suite, SOURCE_LANGUAGE};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const SUITE_FORMAT_VERSION: u32 = 1;
pub const RESULTS_FORMAT_VERSION: u32 = 1;

const STREAM_INIT: u64 = 0x1417;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUITE_FILE: &str = "suite.json";

/// Test accuracy in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageResult {
    pub language: usize,
    pub name: String,
    pub magnitude: f64,
    pub zero_shot_acc: f64,
    pub adapt_mode: AdaptMode,
    /// Absent for the source language and when adaptation is off.
    pub adapted_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Step counter, parameter groups (flat data with shapes), optimizer
    /// moments and the sampler policy with its recurrent state.
    pub train: TrainState,
    /// Every random draw comes from a stream keyed by this seed, the step
    /// and a purpose tag, so no generator position needs saving.
    pub rng_seed: u64,
    pub results: Vec<LanguageResult>,
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        doc::to_document("checkpoint", CHECKPOINT_FORMAT_VERSION, self)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        doc::from_document("checkpoint", CHECKPOINT_FORMAT_VERSION, text, origin)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        doc::save_document(path, "checkpoint", CHECKPOINT_FORMAT_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        doc::load_document(path, "checkpoint", CHECKPOINT_FORMAT_VERSION)
    }

    /// Parameters a finished run hands on to adaptation and evaluation.
    pub fn trained_params(&self) -> ModelParams {
        final_params(&self.train, self.config.meta.restore_best)
    }
}

pub fn save_suite(path: &Path, suite: &Suite) -> Result<()> {
    doc::save_document(path, "suite", SUITE_FORMAT_VERSION, suite)
}

pub fn load_suite(path: &Path) -> Result<Suite> {
    doc::load_document(path, "suite", SUITE_FORMAT_VERSION)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
}

impl RunOutput {
    pub fn finished(&self) -> bool {
        self.checkpoint.train.finished
    }

    /// Writes config, checkpoint, metrics and (when present) results into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint.config.save(&dir.join(CONFIG_FILE))?;
        self.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        self.log.save(&dir.join(METRICS_FILE))?;
        if !self.checkpoint.results.is_empty() {
            write_results(&dir.join(RESULTS_FILE), &self.checkpoint.results)?;
        }
        Ok(())
    }

    /// Reads back what [`RunOutput::write`] produced.
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(RunOutput {
            checkpoint: Checkpoint::load(&dir.join(CHECKPOINT_FILE))?,
            log: MetricsLog::load(&dir.join(METRICS_FILE))?,
        })
    }
}

pub fn write_results(path: &Path, results: &[LanguageResult]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# format_version: {RESULTS_FORMAT_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["language", "name", "magnitude", "zero_shot_acc", "adapt_mode", "adapted_acc"])?;
    for r in results {
        w.write_record([
            r.language.to_string(),
            r.name.clone(),
            format!("{:?}", r.magnitude),
            format!("{:?}", r.zero_shot_acc),
            r.adapt_mode.to_string(),
            r.adapted_acc.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Suite of a run, generated from the config.
pub fn build_suite(config: &RunConfig) -> Result<Suite> {
    generate_suite(&config.suite, config.run.suite_seed)
}

/// Freshly initialized model for `seed`.
pub fn init_params(config: &RunConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config.model, &mut stream_rng(&[seed, STREAM_INIT]))
}

fn context<'a>(config: &'a RunConfig, suite: &'a Suite) -> TrainContext<'a> {
    TrainContext {
        suite,
        meta: &config.meta,
        sampler: &config.sampler,
        mode: config.run.train_mode,
        order: &config.run.sequential_order,
        seed: config.run.train_seed,
    }
}

/// Evaluates `params` on each configured language, adapting first when
/// `config.adapt.mode` asks for it. Adaptation updates go to `log`.
pub fn evaluate_languages(
    params: &ModelParams,
    suite: &Suite,
    config: &RunConfig,
    log: &mut MetricsLog,
) -> Result<Vec<LanguageResult>> {
    let mut out = Vec::new();
    for language in config.languages() {
        let shift = suite.language(language)?;
        let test = suite.language_pool(PoolKind::Test, language)?;
        let zero_shot_acc = evaluate(params, &test)?;
        let adapted_acc = if config.adapt.mode == AdaptMode::None || language == SOURCE_LANGUAGE {
            None
        } else {
            let p = adapt(
                params,
                suite,
                language,
                &config.meta,
                &config.adapt,
                config.run.train_seed,
                log,
            )?;
            Some(evaluate(&p, &test)?)
        };
        out.push(LanguageResult {
            language,
            name: shift.name.clone(),
            magnitude: shift.magnitude,
            zero_shot_acc,
            adapt_mode: config.adapt.mode,
            adapted_acc,
        });
    }
    Ok(out)
}

/// Full run from scratch.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    run_from(config, None, None)
}

/// Runs, optionally continuing an interrupted `resume` and optionally
/// stopping once `stop_after` training steps are complete.
pub fn run_from(config: &RunConfig, resume: Option<RunOutput>, stop_after: Option<usize>) -> Result<RunOutput> {
    config.validate()?;
    let suite = build_suite(config)?;
    let ctx = context(config, &suite);
    let (mut state, mut log) = match resume {
        Some(prev) => {
            let mut echoed = prev.checkpoint.config.clone();
            echoed.run.out_dir.clone_from(&config.run.out_dir);
            if echoed != *config {
                return Err(Error::InvalidArgument(
                    "checkpoint was written under a different configuration".into(),
                ));
            }
            if prev.finished() && !prev.checkpoint.results.is_empty() {
                return Ok(prev);
            }
            if prev.log.k() != suite.k() || prev.log.next_step() != prev.checkpoint.train.step as u64 {
                return Err(Error::InvalidArgument(
                    "metrics log does not line up with the checkpoint step".into(),
                ));
            }
            (prev.checkpoint.train, prev.log)
        }
        None => {
            let params = init_params(config, config.run.train_seed)?;
            (init_train_state(params, &ctx)?, MetricsLog::new(suite.k()))
        }
    };
    run_training(&mut state, &ctx, &mut log, 0, stop_after)?;
    let mut checkpoint = Checkpoint {
        config: config.clone(),
        train: state,
        rng_seed: config.run.train_seed,
        results: Vec::new(),
    };
    if checkpoint.train.finished {
        let params = checkpoint.trained_params();
        checkpoint.results = evaluate_languages(&params, &suite, config, &mut log)?;
    }
    Ok(RunOutput { checkpoint, log })
}
