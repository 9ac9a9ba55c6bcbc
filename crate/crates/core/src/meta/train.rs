//! Training loops over the source datasets: adapter meta-learning and the
//! sequential and multi-task baselines.

use serde::{Deserialize, Serialize};

use super::metrics::{MetricRecord, MetricsLog};
use super::{ctml_step, evaluate, MetaConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{GradRecord, Optimizer};
use crate::sampler::{choose_datasets, SamplerConfig, SamplerState, StepContext};
use crate::tasks::{stream_rng, PoolKind, Suite, SOURCE_LANGUAGE};

const STREAM_EPISODE: u64 = 0xE715;
const STREAM_BATCH: u64 = 0xBA7C;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Ctml,
    Sequential,
    Multitask,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctml" => Ok(TrainMode::Ctml),
            "sequential" => Ok(TrainMode::Sequential),
            "multitask" => Ok(TrainMode::Multitask),
            other => Err(Error::Unknown {
                kind: "train mode",
                name: other.into(),
            }),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Ctml => "ctml",
            TrainMode::Sequential => "sequential",
            TrainMode::Multitask => "multitask",
        })
    }
}

/// Everything a training run reads but never changes.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub suite: &'a Suite,
    pub meta: &'a MetaConfig,
    pub sampler: &'a SamplerConfig,
    pub mode: TrainMode,
    /// Dataset order for sequential fine-tuning; empty means `0..k`.
    pub order: &'a [usize],
    pub seed: u64,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub mode: TrainMode,
    /// Completed steps.
    pub step: usize,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub sampler: SamplerState,
    pub best_dev: Option<f64>,
    pub best_params: Option<ModelParams>,
    pub evals_without_gain: usize,
    pub finished: bool,
}

pub fn init_train_state(params: ModelParams, ctx: &TrainContext<'_>) -> Result<TrainState> {
    ctx.meta.validate()?;
    ctx.sampler.validate()?;
    let k = ctx.suite.k();
    if ctx.mode == TrainMode::Ctml && ctx.meta.meta_batch > k {
        return Err(Error::InvalidConfigValue {
            key: "meta.meta_batch".into(),
            reason: format!("exceeds the {k} source datasets"),
        });
    }
    let params = params.with_trainable(&ctx.meta.ctml_parts());
    let optimizer = ctx.meta.outer_optimizer(ctx.meta.beta_ctml, &params);
    let sampler = SamplerState::new(ctx.sampler, k, ctx.seed)?;
    Ok(TrainState {
        mode: ctx.mode,
        step: 0,
        params,
        optimizer,
        sampler,
        best_dev: None,
        best_params: None,
        evals_without_gain: 0,
        finished: ctx.meta.max_steps == 0,
    })
}

fn sequential_dataset(ctx: &TrainContext<'_>, step: usize) -> Result<usize> {
    let k = ctx.suite.k();
    let order: Vec<usize> = if ctx.order.is_empty() {
        (0..k).collect()
    } else {
        ctx.order.to_vec()
    };
    if let Some(&bad) = order.iter().find(|&&j| j >= k) {
        return Err(Error::InvalidArgument(format!("no source dataset {bad}")));
    }
    let per = ctx.meta.max_steps.div_ceil(order.len()).max(1);
    Ok(order[(step / per).min(order.len() - 1)])
}

/// Runs one training step (and a dev evaluation when due), appending a
/// record to `log` at `step_offset + state.step`.
pub fn train_step(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    log: &mut MetricsLog,
    step_offset: u64,
) -> Result<()> {
    if state.finished {
        return Ok(());
    }
    if state.mode != ctx.mode {
        return Err(Error::InvalidArgument(format!(
            "state was created for mode {}, not {}",
            state.mode, ctx.mode
        )));
    }
    let meta = ctx.meta;
    let suite = ctx.suite;
    let k = suite.k();
    let step = state.step;
    let step_u = step as u64;
    let mut rec = MetricRecord::new(step_offset + step_u, "train", &ctx.mode.to_string(), k, ctx.seed);
    let parts = meta.ctml_parts();
    match ctx.mode {
        TrainMode::Ctml => {
            let masked = state.params.with_trainable(&parts);
            let choice = choose_datasets(
                ctx.sampler,
                &mut state.sampler,
                &masked,
                suite,
                StepContext {
                    step,
                    seed: ctx.seed,
                    meta_batch: meta.meta_batch,
                    batch_size: meta.batch_size,
                    alpha: meta.alpha_ctml,
                    inner_steps: meta.inner_steps,
                },
            )?;
            let mut ids = choice.ids.clone();
            ids.sort_unstable();
            let episodes = ids
                .iter()
                .map(|&j| {
                    let mut rng = stream_rng(&[ctx.seed, step_u, STREAM_EPISODE, j as u64]);
                    suite.sample_episode(j, SOURCE_LANGUAGE, meta.batch_size, meta.batch_size, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = ctml_step(&masked, &episodes, meta, &mut state.optimizer)?;
            state.params = out.params;
            rec.dataset_ids = choice.ids;
            rec.query_loss = Some(out.query_losses.iter().sum::<f64>() / out.query_losses.len() as f64);
            if let Some(fb) = &choice.feedback {
                rec.l_original = Some(fb.l_original);
                rec.l_sources = fb.l_sources.iter().map(|&v| Some(v)).collect();
            }
            if let Some(p) = &choice.probs {
                rec.probs = p.iter().map(|&v| Some(v)).collect();
            }
        }
        TrainMode::Sequential | TrainMode::Multitask => {
            let ids: Vec<usize> = if ctx.mode == TrainMode::Sequential {
                vec![sequential_dataset(ctx, step)?]
            } else {
                (0..k).collect()
            };
            let mut p = state.params.with_trainable(&parts);
            let mut grads = GradRecord::zeros_like(&p.set);
            let mut loss = 0.0;
            for &j in &ids {
                let mut rng = stream_rng(&[ctx.seed, step_u, STREAM_BATCH, j as u64]);
                let batch = suite.sample_batch(j, SOURCE_LANGUAGE, meta.batch_size, &mut rng)?;
                let (l, g) = p.batch_loss(&batch)?;
                grads.add_scaled(&g, 1.0 / ids.len() as f64);
                loss += l / ids.len() as f64;
            }
            if meta.max_grad_norm > 0.0 {
                grads.clip_norm(meta.max_grad_norm);
            }
            state.optimizer.step(&mut p.set, &grads);
            state.params = p;
            rec.dataset_ids = ids;
            rec.query_loss = Some(loss);
        }
    }
    state.step += 1;
    let last = state.step >= meta.max_steps;
    if state.step % meta.eval_every == 0 || last {
        let acc = evaluate(&state.params, suite.pool(PoolKind::Dev))?;
        rec.dev_acc = Some(acc);
        if state.best_dev.is_none_or(|b| acc > b) {
            state.best_dev = Some(acc);
            state.best_params = Some(state.params.clone());
            state.evals_without_gain = 0;
        } else {
            state.evals_without_gain += 1;
        }
        // sequential training walks through every dataset, so it never stops early
        if ctx.mode != TrainMode::Sequential && state.evals_without_gain >= meta.patience {
            state.finished = true;
        }
    }
    if last {
        state.finished = true;
    }
    log.push(rec)
}

/// Steps until the stopping rule fires or `until` steps are completed.
pub fn run_training(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    log: &mut MetricsLog,
    step_offset: u64,
    until: Option<usize>,
) -> Result<()> {
    while !state.finished && until.is_none_or(|u| state.step < u) {
        train_step(state, ctx, log, step_offset)?;
    }
    Ok(())
}

/// Final parameters of a finished (or interrupted) run.
pub fn final_params(state: &TrainState, restore_best: bool) -> ModelParams {
    match (&state.best_params, restore_best) {
        (Some(best), true) => best.clone(),
        _ => state.params.clone(),
    }
}

/// Trains from `params` to completion.
pub fn train(
    params: ModelParams,
    ctx: &TrainContext<'_>,
    log: &mut MetricsLog,
) -> Result<(ModelParams, TrainState)> {
    let mask = params.set.mask().clone();
    let mut state = init_train_state(params, ctx)?;
    let offset = log.next_step();
    run_training(&mut state, ctx, log, offset, None)?;
    let out = final_params(&state, ctx.meta.restore_best).with_mask(mask)?;
    Ok((out, state))
}
