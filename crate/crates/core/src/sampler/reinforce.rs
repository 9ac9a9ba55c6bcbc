//! Policy-gradient update with a scalar baseline.

use crate::error::{Error, Result};
use crate::numeric::{GradRecord, Optimizer, ParamSet, Tape};

use super::policy::{PolicyNet, PolicyState};
use super::trajectory::{logprob_on_tape, Eq7Variant, Trajectory};

/// Inputs the policy saw when it produced the distribution the
/// trajectories were drawn from.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub state: &'a PolicyState,
    pub rewards: &'a [f64],
    pub probs: &'a [f64],
}

fn reward_of(t: &Trajectory) -> Result<f64> {
    t.reward
        .ok_or_else(|| Error::InvalidArgument("trajectory has no reward".into()))
}

/// `J = (1/N) sum_n (R_n - b) log f(tau_n)` and its gradient with respect
/// to `params`.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_objective(
    net: &PolicyNet,
    params: &ParamSet,
    input: PolicyInput<'_>,
    batch: &[Trajectory],
    baseline: f64,
    epsilon: f64,
    variant: Eq7Variant,
) -> Result<(f64, GradRecord)> {
    if batch.is_empty() {
        return Err(Error::Empty("trajectory batch"));
    }
    let mut tape = Tape::new(params);
    let (probs, _, _) = net.forward_tape(&mut tape, input.state, input.rewards, input.probs)?;
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        let adv = reward_of(t)? - baseline;
        let lp = logprob_on_tape(&mut tape, probs, &t.actions, epsilon, variant)?;
        terms.push(tape.scale(lp, adv / batch.len() as f64));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let grads = tape.backward(total)?;
    Ok((tape.value(total).get(0, 0), grads))
}

/// One ascent step of size `opt.lr` on the estimator. When every advantage
/// is zero the estimator vanishes and the optimizer is not stepped, so no
/// momentum carries over into a zero-signal step.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update(
    net: &mut PolicyNet,
    opt: &mut Optimizer,
    input: PolicyInput<'_>,
    batch: &[Trajectory],
    baseline: f64,
    epsilon: f64,
    variant: Eq7Variant,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("trajectory batch"));
    }
    let mut all_zero = true;
    for t in batch {
        if reward_of(t)? - baseline != 0.0 {
            all_zero = false;
        }
    }
    if all_zero {
        return Ok(0.0);
    }
    let (value, grads) =
        reinforce_objective(net, &net.params, input, batch, baseline, epsilon, variant)?;
    opt.ascend(&mut net.params, &grads);
    Ok(value)
}
