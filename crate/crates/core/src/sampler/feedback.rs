//! Per-dataset reward signal: how much one throwaway inner step on each
//! source dataset lowers the loss on a shared target probe batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::inner_adapt;
use crate::model::{ModelParams, MultiChoiceInstance};
use crate::tasks::{Suite, SOURCE_LANGUAGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFeedback {
    pub step: usize,
    /// Probe loss of the unadapted model.
    pub l_original: f64,
    /// Probe loss after pseudo-adapting on each source dataset.
    pub l_sources: Vec<f64>,
    /// `l_original - l_sources[j]`.
    pub rewards: Vec<f64>,
    /// Normalized reciprocal losses.
    pub recip: Vec<f64>,
    /// Sampling distribution of the previous step.
    pub prev_probs: Vec<f64>,
}

impl DatasetFeedback {
    pub fn k(&self) -> usize {
        self.rewards.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Empty("feedback"));
        }
        if self.l_sources.len() != k || self.recip.len() != k || self.prev_probs.len() != k {
            return Err(Error::InvalidArgument("feedback vectors differ in length".into()));
        }
        let total: f64 = self.prev_probs.iter().sum();
        if self.prev_probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "previous probabilities are not a distribution".into(),
            ));
        }
        Ok(())
    }
}

/// `(1/L_j) / sum_i (1/L_i)`.
pub fn reciprocal_probs(losses: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = losses.iter().map(|&l| 1.0 / l.max(1e-12)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Pseudo-adapts a copy of `params` (under its own freeze mask) on one
/// support batch per source dataset and measures the probe loss. `params`
/// is not modified.
#[allow(clippy::too_many_arguments)]
pub fn compute_feedback(
    params: &ModelParams,
    suite: &Suite,
    probe: &[MultiChoiceInstance],
    alpha: f64,
    inner_steps: usize,
    batch_size: usize,
    step: usize,
    prev_probs: &[f64],
    rng: &mut impl Rng,
) -> Result<DatasetFeedback> {
    if probe.is_empty() {
        return Err(Error::Empty("probe batch"));
    }
    let k = suite.k();
    if prev_probs.len() != k {
        return Err(Error::shape("previous probabilities", k, prev_probs.len()));
    }
    let l_original = params.batch_loss_value(probe)?;
    let mut l_sources = Vec::with_capacity(k);
    for j in 0..k {
        let support = suite.sample_batch(j, SOURCE_LANGUAGE, batch_size, rng)?;
        let adapted = inner_adapt(params, &support, alpha, inner_steps)?;
        l_sources.push(adapted.batch_loss_value(probe)?);
    }
    let rewards = l_sources.iter().map(|l| l_original - l).collect();
    Ok(DatasetFeedback {
        step,
        l_original,
        recip: reciprocal_probs(&l_sources),
        l_sources,
        rewards,
        prev_probs: prev_probs.to_vec(),
    })
}
