//! Source-dataset selection for each meta-step: fixed heuristics and a
//! recurrent policy trained with REINFORCE.

mod feedback;
mod policy;
mod reinforce;
mod trajectory;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use feedback::{compute_feedback, reciprocal_probs, DatasetFeedback};
pub use policy::{PolicyLayout, PolicyNet, PolicyState};
pub use reinforce::{reinforce_objective, reinforce_update, PolicyInput};
pub use trajectory::{
    enumerate_trajectories, logprob_on_tape, position_factors, sample_trajectory,
    trajectory_logprob, Eq7Variant, Trajectory,
};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::{softmax, Optimizer, OptimizerConfig, OptimizerKind};
use crate::tasks::{stream_rng, PoolKind, Suite, SOURCE_LANGUAGE};

const STREAM_FEEDBACK: u64 = 0xFEED;
const STREAM_SAMPLER: u64 = 0x5A3D;
const STREAM_POLICY_INIT: u64 = 0x9011;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// `1/k` each.
    Uniform,
    /// Proportional to dataset size.
    Fix,
    /// Softmax over rewards.
    Sample,
    /// The `M` datasets with the largest reward.
    First,
    /// The `M` datasets with the smallest reward.
    Last,
    /// Normalized reciprocal of the adapted probe losses.
    Recip,
    /// Learned recurrent policy.
    Rl,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "uniform" => Strategy::Uniform,
            "fix" => Strategy::Fix,
            "sample" => Strategy::Sample,
            "first" => Strategy::First,
            "last" => Strategy::Last,
            "recip" => Strategy::Recip,
            "rl" => Strategy::Rl,
            other => {
                return Err(Error::Unknown {
                    kind: "sampling strategy",
                    name: other.into(),
                })
            }
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Uniform => "uniform",
            Strategy::Fix => "fix",
            Strategy::Sample => "sample",
            Strategy::First => "first",
            Strategy::Last => "last",
            Strategy::Recip => "recip",
            Strategy::Rl => "rl",
        };
        f.write_str(s)
    }
}

impl Strategy {
    pub fn needs_feedback(self) -> bool {
        !matches!(self, Strategy::Uniform | Strategy::Fix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub epsilon: f64,
    /// Value reached by linear annealing; equal to `epsilon` means constant.
    pub epsilon_final: f64,
    pub epsilon_anneal_steps: usize,
    /// Trajectories per policy update.
    pub trajectories: usize,
    /// Trajectory length; 0 means the meta-batch size.
    pub horizon: usize,
    /// Policy learning rate.
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    pub eq7_variant: Eq7Variant,
    pub baseline: f64,
    pub hidden: usize,
    pub probe_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Rl,
            epsilon: 0.1,
            epsilon_final: 0.1,
            epsilon_anneal_steps: 0,
            trajectories: 4,
            horizon: 0,
            gamma: 1e-3,
            optimizer: OptimizerKind::Adamw,
            eq7_variant: Eq7Variant::Renorm,
            baseline: 0.0,
            hidden: 32,
            probe_batch: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon) || !unit(self.epsilon_final) {
            return Err(Error::InvalidConfigValue {
                key: "sampler.epsilon".into(),
                reason: "must lie in [0, 1]".into(),
            });
        }
        if self.trajectories == 0 {
            return Err(Error::InvalidConfigValue {
                key: "sampler.trajectories".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfigValue {
                key: "sampler.gamma".into(),
                reason: "must be > 0".into(),
            });
        }
        if self.hidden == 0 || self.probe_batch == 0 {
            return Err(Error::InvalidConfigValue {
                key: "sampler.hidden".into(),
                reason: "hidden size and probe batch must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon;
        }
        let frac = (step as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon + (self.epsilon_final - self.epsilon) * frac
    }

    pub fn horizon_for(&self, meta_batch: usize) -> usize {
        if self.horizon == 0 {
            meta_batch
        } else {
            self.horizon
        }
    }
}

/// A heuristic's decision: a distribution to sample from, or an explicit set.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Probs(Vec<f64>),
    Indices(Vec<usize>),
}

fn ranked_by_reward(rewards: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rewards.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = rewards[a].total_cmp(&rewards[b]);
        if descending {
            ord.reverse()
        } else {
            ord
        }
    });
    idx
}

/// Rule-based selection. `m` is the number of datasets per meta-step.
pub fn heuristic_probs(
    strategy: Strategy,
    feedback: Option<&DatasetFeedback>,
    suite: &Suite,
    m: usize,
) -> Result<Selection> {
    let k = suite.k();
    let need = || -> Result<&DatasetFeedback> {
        let fb = feedback.ok_or_else(|| {
            Error::InvalidArgument(format!("strategy {strategy} needs feedback"))
        })?;
        if fb.k() != k {
            return Err(Error::shape("feedback", k, fb.k()));
        }
        Ok(fb)
    };
    Ok(match strategy {
        Strategy::Uniform => Selection::Probs(vec![1.0 / k as f64; k]),
        Strategy::Fix => {
            let total: f64 = suite.sources.iter().map(|s| s.size as f64).sum();
            Selection::Probs(suite.sources.iter().map(|s| s.size as f64 / total).collect())
        }
        Strategy::Sample => Selection::Probs(softmax(&need()?.rewards)),
        Strategy::Recip => Selection::Probs(need()?.recip.clone()),
        Strategy::First | Strategy::Last => {
            if m > k {
                return Err(Error::InvalidArgument(format!("cannot pick {m} of {k} datasets")));
            }
            let mut order = ranked_by_reward(&need()?.rewards, strategy == Strategy::First);
            order.truncate(m);
            Selection::Indices(order)
        }
        Strategy::Rl => {
            return Err(Error::InvalidArgument(
                "the learned policy is not a heuristic".into(),
            ))
        }
    })
}

/// Mutable sampler state carried across meta-steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub policy: Option<PolicyNet>,
    pub policy_optimizer: Option<Optimizer>,
    pub policy_state: Option<PolicyState>,
    /// Rewards observed at the previous step (zeros before the first).
    pub prev_rewards: Vec<f64>,
    /// Distribution used at the previous step (uniform before the first).
    pub prev_probs: Vec<f64>,
}

impl SamplerState {
    pub fn new(config: &SamplerConfig, k: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if k == 0 {
            return Err(Error::Empty("source datasets"));
        }
        let (policy, policy_optimizer, policy_state) = if config.strategy == Strategy::Rl {
            let mut rng = stream_rng(&[seed, STREAM_POLICY_INIT]);
            let net = PolicyNet::init(k, config.hidden, &mut rng)?;
            let opt = Optimizer::new(
                OptimizerConfig {
                    kind: config.optimizer,
                    ..Default::default()
                },
                config.gamma,
                &net.params,
            );
            (Some(net), Some(opt), Some(PolicyState::zeros(config.hidden)))
        } else {
            (None, None, None)
        };
        Ok(SamplerState {
            policy,
            policy_optimizer,
            policy_state,
            prev_rewards: vec![0.0; k],
            prev_probs: vec![1.0 / k as f64; k],
        })
    }
}

/// Outcome of one selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub ids: Vec<usize>,
    pub feedback: Option<DatasetFeedback>,
    /// Distribution the ids were drawn from, if any.
    pub probs: Option<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

/// Per-step knobs the sampler borrows from the meta-learner.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub step: usize,
    pub seed: u64,
    pub meta_batch: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub inner_steps: usize,
}

/// Chooses the datasets for meta-step `ctx.step`. `params` must carry the
/// freeze mask used for pseudo-adaptation. Randomness comes from streams
/// keyed by `(seed, step)`, so the result depends only on the inputs.
pub fn choose_datasets(
    config: &SamplerConfig,
    state: &mut SamplerState,
    params: &ModelParams,
    suite: &Suite,
    ctx: StepContext,
) -> Result<Choice> {
    let k = suite.k();
    let m = ctx.meta_batch;
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!(
            "meta-batch of {m} from {k} datasets"
        )));
    }
    let step_u = ctx.step as u64;
    let feedback = if config.strategy.needs_feedback() {
        let mut rng = stream_rng(&[ctx.seed, step_u, STREAM_FEEDBACK]);
        let pool = suite.pool(PoolKind::Probe);
        if pool.is_empty() {
            return Err(Error::Empty("probe pool"));
        }
        let n = config.probe_batch.min(pool.len());
        let ids = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        let probe = suite.pool_instances(PoolKind::Probe, SOURCE_LANGUAGE, &ids)?;
        Some(compute_feedback(
            params,
            suite,
            &probe,
            ctx.alpha,
            ctx.inner_steps,
            ctx.batch_size,
            ctx.step,
            &state.prev_probs,
            &mut rng,
        )?)
    } else {
        None
    };
    let mut rng = stream_rng(&[ctx.seed, step_u, STREAM_SAMPLER]);
    if config.strategy == Strategy::Rl {
        let fb = feedback.expect("rl strategy computes feedback");
        return rl_choice(config, state, fb, m, &mut rng);
    }
    let choice = match heuristic_probs(config.strategy, feedback.as_ref(), suite, m)? {
        Selection::Indices(ids) => Choice {
            ids,
            feedback,
            probs: None,
            trajectories: Vec::new(),
        },
        Selection::Probs(p) => {
            let t = sample_trajectory(&p, m, 0.0, &mut rng)?;
            Choice {
                ids: t.actions.clone(),
                feedback,
                probs: Some(p),
                trajectories: vec![t],
            }
        }
    };
    if let Some(fb) = &choice.feedback {
        state.prev_rewards = fb.rewards.clone();
    }
    if let Some(p) = &choice.probs {
        state.prev_probs = p.clone();
    }
    Ok(choice)
}

fn rl_choice(
    config: &SamplerConfig,
    state: &mut SamplerState,
    feedback: DatasetFeedback,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Choice> {
    let missing = || Error::InvalidArgument("sampler state has no policy".into());
    let net = state.policy.as_mut().ok_or_else(missing)?;
    let opt = state.policy_optimizer.as_mut().ok_or_else(missing)?;
    let rec = state.policy_state.as_ref().ok_or_else(missing)?.clone();
    let horizon = config.horizon_for(m);
    let eps = config.epsilon_at(feedback.step);
    let (probs, next_state) = net.forward(&rec, &state.prev_rewards, &state.prev_probs)?;
    let mut batch = Vec::with_capacity(config.trajectories);
    for _ in 0..config.trajectories {
        let mut t = sample_trajectory(&probs, horizon, eps, rng)?;
        t.reward = Some(t.actions.iter().map(|&i| feedback.rewards[i]).sum());
        batch.push(t);
    }
    let input = PolicyInput {
        state: &rec,
        rewards: &state.prev_rewards,
        probs: &state.prev_probs,
    };
    reinforce_update(
        net,
        opt,
        input,
        &batch,
        config.baseline,
        eps,
        config.eq7_variant,
    )?;
    state.policy_state = Some(next_state);
    state.prev_rewards = feedback.rewards.clone();
    state.prev_probs = probs.clone();
    Ok(Choice {
        ids: batch[0].actions.clone(),
        feedback: Some(feedback),
        probs: Some(probs),
        trajectories: batch,
    })
}
