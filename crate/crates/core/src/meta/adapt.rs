//! Few-shot adaptation to a target language using its dev pool.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::metrics::{MetricRecord, MetricsLog};
use super::{clml_step, mono_step, LangBatch, MetaConfig, CLML_PARTS};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::FreezeMask;
use crate::tasks::{stream_rng, PoolKind, Suite, SOURCE_LANGUAGE};

const STREAM_ADAPT: u64 = 0xADA9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// No adaptation (zero-shot).
    None,
    /// Source-language support, target-language query.
    Clml,
    /// Target-language support and query.
    Mono,
    /// Plain fine-tuning on the target dev pool.
    TargetOnly,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptMode::None),
            "clml" => Ok(AdaptMode::Clml),
            "mono" => Ok(AdaptMode::Mono),
            "target_only" => Ok(AdaptMode::TargetOnly),
            other => Err(Error::Unknown {
                kind: "adapt mode",
                name: other.into(),
            }),
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptMode::None => "none",
            AdaptMode::Clml => "clml",
            AdaptMode::Mono => "mono",
            AdaptMode::TargetOnly => "target_only",
        })
    }
}

/// Which groups plain target-only fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOnlyScope {
    All,
    LastLayer,
}

impl std::str::FromStr for TargetOnlyScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TargetOnlyScope::All),
            "last_layer" => Ok(TargetOnlyScope::LastLayer),
            other => Err(Error::Unknown {
                kind: "target-only scope",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Meta-steps for `clml` and `mono`.
    pub steps: usize,
    /// Passes over the dev pool for `target_only`.
    pub epochs: usize,
    pub target_only_scope: TargetOnlyScope,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::Clml,
            steps: 100,
            epochs: 3,
            target_only_scope: TargetOnlyScope::All,
        }
    }
}

/// Adapts `params` to `language`, appending one record per update to `log`.
pub fn adapt(
    params: &ModelParams,
    suite: &Suite,
    language: usize,
    meta: &MetaConfig,
    config: &AdaptConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<ModelParams> {
    meta.validate()?;
    suite.language(language)?;
    let mask = params.set.mask().clone();
    let k = suite.k();
    let dev_len = suite.pool(PoolKind::Dev).len();
    let bs = meta.batch_size;
    let mode_name = config.mode.to_string();
    let record = |log: &mut MetricsLog, loss: f64| -> Result<()> {
        let mut rec = MetricRecord::new(log.next_step(), "adapt", &mode_name, k, seed);
        rec.dataset_ids = vec![language];
        rec.query_loss = Some(loss);
        log.push(rec)
    };
    let mut p = params.clone();
    match config.mode {
        AdaptMode::None => {}
        AdaptMode::Clml | AdaptMode::Mono => {
            if 2 * bs > dev_len {
                return Err(Error::InvalidArgument(format!(
                    "dev pool of {dev_len} cannot supply support and query batches of {bs}"
                )));
            }
            let support_language = if config.mode == AdaptMode::Clml {
                SOURCE_LANGUAGE
            } else {
                language
            };
            let mut opt = meta.outer_optimizer(meta.beta_clml, &p);
            for step in 0..config.steps {
                let mut rng = stream_rng(&[seed, STREAM_ADAPT, language as u64, step as u64]);
                let mut pairs = Vec::with_capacity(meta.clml_meta_batch);
                for _ in 0..meta.clml_meta_batch {
                    let ids = index::sample(&mut rng, dev_len, 2 * bs).into_vec();
                    let support = LangBatch {
                        language: support_language,
                        instances: suite.pool_instances(PoolKind::Dev, support_language, &ids[..bs])?,
                    };
                    let query = LangBatch {
                        language,
                        instances: suite.pool_instances(PoolKind::Dev, language, &ids[bs..])?,
                    };
                    pairs.push((support, query));
                }
                let out = if config.mode == AdaptMode::Clml {
                    clml_step(&p, language, &pairs, meta, &mut opt)?
                } else {
                    mono_step(&p, language, &pairs, meta, &mut opt)?
                };
                p = out.params;
                let loss = out.query_losses.iter().sum::<f64>() / out.query_losses.len() as f64;
                record(log, loss)?;
            }
        }
        AdaptMode::TargetOnly => {
            let dev = suite.language_pool(PoolKind::Dev, language)?;
            p = match config.target_only_scope {
                TargetOnlyScope::All => p.with_mask(FreezeMask::all_trainable(p.set.len()))?,
                TargetOnlyScope::LastLayer => p.with_trainable(&CLML_PARTS),
            };
            let mut opt = meta.outer_optimizer(meta.beta_clml, &p);
            for epoch in 0..config.epochs {
                let mut rng = stream_rng(&[seed, STREAM_ADAPT, language as u64, 1 << 32 | epoch as u64]);
                let mut order: Vec<usize> = (0..dev.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    let batch: Vec<_> = chunk.iter().map(|&i| dev[i].clone()).collect();
                    let (loss, mut grads) = p.batch_loss(&batch)?;
                    if meta.max_grad_norm > 0.0 {
                        grads.clip_norm(meta.max_grad_norm);
                    }
                    opt.step(&mut p.set, &grads);
                    record(log, loss)?;
                }
            }
        }
    }
    p.with_mask(mask)
}
