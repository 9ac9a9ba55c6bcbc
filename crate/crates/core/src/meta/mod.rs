//! First-order meta-learning over source datasets (adapter training) and
//! across languages (last-layer adaptation), the comparison training modes,
//! and evaluation.

mod adapt;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

pub use adapt::{adapt, AdaptConfig, AdaptMode, TargetOnlyScope};
pub use metrics::{MetricRecord, MetricsLog, METRICS_FORMAT_VERSION};
pub use train::{
    final_params, init_train_state, run_training, train, train_step, TrainContext, TrainMode,
    TrainState,
};

use crate::error::{Error, Result};
use crate::model::{ModelParams, MultiChoiceInstance, Part};
use crate::numeric::{GradRecord, Optimizer, OptimizerConfig, OptimizerKind};
use crate::tasks::{Episode, SOURCE_LANGUAGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner learning rate for source-dataset episodes.
    pub alpha_ctml: f64,
    /// Outer learning rate for adapter training.
    pub beta_ctml: f64,
    /// Inner learning rate for cross-lingual episodes.
    pub alpha_clml: f64,
    /// Outer learning rate for cross-lingual adaptation.
    pub beta_clml: f64,
    pub inner_steps: usize,
    /// Episodes per adapter meta-step.
    pub meta_batch: usize,
    /// Episodes per cross-lingual meta-step.
    pub clml_meta_batch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Dev evaluation interval in meta-steps.
    pub eval_every: usize,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    /// Outer-gradient clipping threshold; 0 disables.
    pub max_grad_norm: f64,
    /// Whether the scoring head is trained together with the adapters.
    pub train_head: bool,
    /// Return the parameters with the best dev accuracy instead of the last.
    pub restore_best: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha_ctml: 0.1,
            beta_ctml: 1e-2,
            alpha_clml: 0.1,
            beta_clml: 3e-3,
            inner_steps: 1,
            meta_batch: 3,
            clml_meta_batch: 1,
            batch_size: 12,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            max_steps: 2000,
            eval_every: 25,
            patience: 10,
            max_grad_norm: 0.0,
            train_head: true,
            restore_best: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("meta.alpha_ctml", self.alpha_ctml),
            ("meta.beta_ctml", self.beta_ctml),
            ("meta.alpha_clml", self.alpha_clml),
            ("meta.beta_clml", self.beta_clml),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfigValue {
                    key: key.into(),
                    reason: "learning rates must be > 0".into(),
                });
            }
        }
        let at_least_one = [
            ("meta.inner_steps", self.inner_steps),
            ("meta.meta_batch", self.meta_batch),
            ("meta.clml_meta_batch", self.clml_meta_batch),
            ("meta.batch_size", self.batch_size),
            ("meta.eval_every", self.eval_every),
        ];
        for (key, v) in at_least_one {
            if v == 0 {
                return Err(Error::InvalidConfigValue {
                    key: key.into(),
                    reason: "must be >= 1".into(),
                });
            }
        }
        if self.max_grad_norm < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfigValue {
                key: "meta.max_grad_norm".into(),
                reason: "clipping threshold and weight decay must be >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn outer_optimizer(&self, lr: f64, params: &ModelParams) -> Optimizer {
        Optimizer::new(
            OptimizerConfig {
                kind: self.optimizer,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            lr,
            &params.set,
        )
    }

    /// Groups trained by the adapter meta-learner.
    pub fn ctml_parts(&self) -> Vec<Part> {
        if self.train_head {
            vec![Part::Adapters, Part::Head]
        } else {
            vec![Part::Adapters]
        }
    }
}

/// Groups trained by the cross-lingual meta-learner.
pub const CLML_PARTS: [Part; 2] = [Part::BackboneLast, Part::Head];

/// `steps` plain gradient steps of size `alpha` on the support loss, over
/// the trainable groups of `params`.
pub fn inner_adapt(
    params: &ModelParams,
    support: &[MultiChoiceInstance],
    alpha: f64,
    steps: usize,
) -> Result<ModelParams> {
    if support.is_empty() {
        return Err(Error::Empty("support batch"));
    }
    let mut adapted = params.clone();
    for _ in 0..steps {
        let (_, grads) = adapted.batch_loss(support)?;
        adapted.set.apply_step(&grads, -alpha);
    }
    Ok(adapted)
}

/// One (support, query) pair.
#[derive(Debug, Clone, Copy)]
pub struct MetaTask<'a> {
    pub support: &'a [MultiChoiceInstance],
    pub query: &'a [MultiChoiceInstance],
}

/// Mean over tasks of the query-loss gradient evaluated at the adapted
/// parameters (first-order approximation), with the per-task query losses.
pub fn meta_gradient(
    params: &ModelParams,
    tasks: &[MetaTask<'_>],
    alpha: f64,
    inner_steps: usize,
) -> Result<(GradRecord, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::Empty("meta-batch"));
    }
    let mut total = GradRecord::zeros_like(&params.set);
    let mut losses = Vec::with_capacity(tasks.len());
    for task in tasks {
        let adapted = inner_adapt(params, task.support, alpha, inner_steps)?;
        let (loss, grads) = adapted.batch_loss(task.query)?;
        total.add_scaled(&grads, 1.0 / tasks.len() as f64);
        losses.push(loss);
    }
    Ok((total, losses))
}

fn outer_step(
    params: &mut ModelParams,
    tasks: &[MetaTask<'_>],
    alpha: f64,
    config: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<Vec<f64>> {
    let (mut grads, losses) = meta_gradient(params, tasks, alpha, config.inner_steps)?;
    if config.max_grad_norm > 0.0 {
        grads.clip_norm(config.max_grad_norm);
    }
    opt.step(&mut params.set, &grads);
    Ok(losses)
}

/// Result of one meta-step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: ModelParams,
    /// Query loss per episode, in episode order.
    pub query_losses: Vec<f64>,
}

/// Adapter meta-step over source-language episodes. Only the adapter
/// (and, if configured, head) groups change.
pub fn ctml_step(
    params: &ModelParams,
    episodes: &[Episode],
    config: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<StepOutcome> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("meta-batch size must be >= 1".into()));
    }
    if let Some(e) = episodes.iter().find(|e| e.language != SOURCE_LANGUAGE) {
        return Err(Error::LanguageContract(format!(
            "source-dataset episode {} is in language {}, expected {SOURCE_LANGUAGE}",
            e.dataset, e.language
        )));
    }
    let mut p = params.with_trainable(&config.ctml_parts());
    let tasks: Vec<MetaTask<'_>> = episodes
        .iter()
        .map(|e| MetaTask {
            support: &e.support,
            query: &e.query,
        })
        .collect();
    let query_losses = outer_step(&mut p, &tasks, config.alpha_ctml, config, opt)?;
    Ok(StepOutcome {
        params: p,
        query_losses,
    })
}

/// Batch tagged with the language it was drawn in.
#[derive(Debug, Clone, PartialEq)]
pub struct LangBatch {
    pub language: usize,
    pub instances: Vec<MultiChoiceInstance>,
}

fn cross_lingual_step(
    params: &ModelParams,
    pairs: &[(LangBatch, LangBatch)],
    support_language: usize,
    query_language: usize,
    config: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<StepOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("meta-batch size must be >= 1".into()));
    }
    for (s, q) in pairs {
        if s.language != support_language {
            return Err(Error::LanguageContract(format!(
                "support batch in language {}, expected {support_language}",
                s.language
            )));
        }
        if q.language != query_language {
            return Err(Error::LanguageContract(format!(
                "query batch in language {}, expected {query_language}",
                q.language
            )));
        }
    }
    let mut p = params.with_trainable(&CLML_PARTS);
    let tasks: Vec<MetaTask<'_>> = pairs
        .iter()
        .map(|(s, q)| MetaTask {
            support: &s.instances,
            query: &q.instances,
        })
        .collect();
    let query_losses = outer_step(&mut p, &tasks, config.alpha_clml, config, opt)?;
    Ok(StepOutcome {
        params: p,
        query_losses,
    })
}

/// Cross-lingual meta-step: support in the source language, query in
/// `language`. Only the last encoder layer and the head change.
pub fn clml_step(
    params: &ModelParams,
    language: usize,
    pairs: &[(LangBatch, LangBatch)],
    config: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<StepOutcome> {
    cross_lingual_step(params, pairs, SOURCE_LANGUAGE, language, config, opt)
}

/// Mono-lingual meta-step: support and query both in `language`.
pub fn mono_step(
    params: &ModelParams,
    language: usize,
    pairs: &[(LangBatch, LangBatch)],
    config: &MetaConfig,
    opt: &mut Optimizer,
) -> Result<StepOutcome> {
    cross_lingual_step(params, pairs, language, language, config, opt)
}

const EVAL_CHUNK: usize = 256;

/// Fraction of instances whose highest-scoring candidate (lowest index on
/// ties) is the gold one.
pub fn evaluate(params: &ModelParams, pool: &[MultiChoiceInstance]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Empty("evaluation pool"));
    }
    let mut correct = 0usize;
    for chunk in pool.chunks(EVAL_CHUNK) {
        let preds = params.predict(chunk)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, inst)| **p == inst.label)
            .count();
    }
    Ok(correct as f64 / pool.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{generate_suite, stream_rng, SuiteConfig};

    fn setup() -> (ModelParams, crate::tasks::Suite) {
        let suite_cfg = SuiteConfig {
            dev_size: 20,
            test_size: 20,
            probe_size: 20,
            ..Default::default()
        };
        let suite = generate_suite(&suite_cfg, 3).unwrap();
        let mut rng = stream_rng(&[3, 99]);
        let params = ModelParams::init(ModelConfig::default(), &mut rng).unwrap();
        (params, suite)
    }

    #[test]
    fn zero_alpha_keeps_params() {
        let (params, suite) = setup();
        let p = params.with_trainable(&[Part::Adapters, Part::Head]);
        let adapted = inner_adapt(&p, &suite.dev[..5], 0.0, 1).unwrap();
        assert_eq!(adapted.set, p.set);
    }

    #[test]
    fn empty_support_is_an_error() {
        let (params, _) = setup();
        assert!(matches!(inner_adapt(&params, &[], 0.1, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn inner_step_is_param_minus_alpha_grad() {
        let (params, suite) = setup();
        let p = params.with_trainable(&[Part::Adapters, Part::Head]);
        let batch = &suite.dev[..6];
        let (_, g) = p.batch_loss(batch).unwrap();
        let adapted = inner_adapt(&p, batch, 0.05, 1).unwrap();
        for id in p.set.ids() {
            let (a, b, gr) = (p.set.get(id), adapted.set.get(id), g.get(id));
            for i in 0..a.len() {
                let expect = a.as_slice()[i] - 0.05 * gr.as_slice()[i];
                assert_eq!(b.as_slice()[i], expect);
            }
        }
    }

    #[test]
    fn ctml_step_rejects_empty_meta_batch() {
        let (params, _) = setup();
        let cfg = MetaConfig::default();
        let mut opt = cfg.outer_optimizer(cfg.beta_ctml, &params);
        assert!(ctml_step(&params, &[], &cfg, &mut opt).is_err());
    }

    #[test]
    fn ctml_step_keeps_backbone() {
        let (params, suite) = setup();
        let cfg = MetaConfig::default();
        let mut opt = cfg.outer_optimizer(cfg.beta_ctml, &params);
        let mut rng = stream_rng(&[1]);
        let eps: Vec<_> = (0..3)
            .map(|j| suite.sample_episode(j, 0, 4, 4, &mut rng).unwrap())
            .collect();
        let out = ctml_step(&params, &eps, &cfg, &mut opt).unwrap();
        let backbone = params.groups_of(Part::Backbone);
        assert!(params.set.bit_identical(&out.params.set, &backbone));
        assert!(!params.set.bit_identical(&out.params.set, &params.groups_of(Part::Head)));
        assert_eq!(out.query_losses.len(), 3);
    }

    #[test]
    fn clml_step_checks_languages() {
        let (params, suite) = setup();
        let cfg = MetaConfig::default();
        let mut opt = cfg.outer_optimizer(cfg.beta_clml, &params);
        let s = LangBatch {
            language: 2,
            instances: suite.language_pool(crate::tasks::PoolKind::Dev, 2).unwrap()[..4].to_vec(),
        };
        let pairs = vec![(s.clone(), s)];
        let err = clml_step(&params, 2, &pairs, &cfg, &mut opt).unwrap_err();
        assert!(matches!(err, Error::LanguageContract(_)));
        assert!(mono_step(&params, 2, &pairs, &cfg, &mut opt).is_ok());
    }

    #[test]
    fn evaluate_rejects_empty_pool() {
        let (params, _) = setup();
        assert!(evaluate(&params, &[]).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = MetaConfig {
            meta_batch: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MetaConfig {
            alpha_ctml: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
