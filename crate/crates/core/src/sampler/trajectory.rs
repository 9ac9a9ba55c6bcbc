//! ε-greedy sampling of repetition-free dataset sequences and their
//! log-probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor2, Var};

/// Denominator used for the policy term at position `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eq7Variant {
    /// `1 - sum of already chosen P`: mass remaining over all datasets.
    Renorm,
    /// `sum of all chosen P - sum of already chosen P`: mass remaining over
    /// the chosen items only, as literally printed.
    Paper,
}

impl std::str::FromStr for Eq7Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renorm" => Ok(Eq7Variant::Renorm),
            "paper" => Ok(Eq7Variant::Paper),
            other => Err(Error::Unknown {
                kind: "eq7 variant",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Distinct dataset indices, in the order they were chosen.
    pub actions: Vec<usize>,
    /// Log-probability under the sampling process (`Renorm` variant).
    pub logprob: f64,
    pub reward: Option<f64>,
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    Ok(())
}

fn check_actions(k: usize, actions: &[usize]) -> Result<()> {
    if actions.len() > k {
        return Err(Error::InvalidArgument(format!(
            "trajectory of length {} exceeds k = {k}",
            actions.len()
        )));
    }
    let mut seen = vec![false; k];
    for &a in actions {
        if a >= k {
            return Err(Error::InvalidArgument(format!("action {a} out of range for k = {k}")));
        }
        if seen[a] {
            return Err(Error::InvalidArgument(format!("action {a} repeated")));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Per-position factors `ε/(k-g+1) + (1-ε) P_{i_g} / denom_g`.
pub fn position_factors(
    probs: &[f64],
    actions: &[usize],
    epsilon: f64,
    variant: Eq7Variant,
) -> Result<Vec<f64>> {
    check_probs(probs)?;
    check_epsilon(epsilon)?;
    let k = probs.len();
    check_actions(k, actions)?;
    let chosen_total: f64 = actions.iter().map(|&a| probs[a]).sum();
    let mut prefix = 0.0;
    let mut out = Vec::with_capacity(actions.len());
    for (g, &a) in actions.iter().enumerate() {
        let uniform = epsilon / (k - g) as f64;
        let policy = if epsilon < 1.0 {
            let denom = match variant {
                Eq7Variant::Renorm => 1.0 - prefix,
                Eq7Variant::Paper => chosen_total - prefix,
            };
            if !(denom > 0.0) {
                return Err(Error::ZeroDenominator { position: g + 1 });
            }
            (1.0 - epsilon) * probs[a] / denom
        } else {
            0.0
        };
        out.push(uniform + policy);
        prefix += probs[a];
    }
    Ok(out)
}

/// Log-probability of a trajectory.
pub fn trajectory_logprob(
    probs: &[f64],
    actions: &[usize],
    epsilon: f64,
    variant: Eq7Variant,
) -> Result<f64> {
    Ok(position_factors(probs, actions, epsilon, variant)?
        .into_iter()
        .map(f64::ln)
        .sum())
}

/// Draws `horizon` distinct indices: at each position, with probability ε
/// uniformly among the remaining datasets, otherwise proportionally to `probs`
/// renormalized over the remaining mass.
pub fn sample_trajectory(
    probs: &[f64],
    horizon: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    check_probs(probs)?;
    check_epsilon(epsilon)?;
    let k = probs.len();
    if horizon > k {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} exceeds number of datasets {k}"
        )));
    }
    let mut remaining: Vec<usize> = (0..k).collect();
    let mut actions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
        let mass: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let pos = if explore || !(mass > 0.0) {
            rng.random_range(0..remaining.len())
        } else {
            let mut u = rng.random::<f64>() * mass;
            let mut pick = remaining.len() - 1;
            for (p, &i) in remaining.iter().enumerate() {
                if u < probs[i] {
                    pick = p;
                    break;
                }
                u -= probs[i];
            }
            // never land on a zero-probability item through round-off
            while probs[remaining[pick]] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        };
        actions.push(remaining.remove(pos));
    }
    let logprob = trajectory_logprob(probs, &actions, epsilon, Eq7Variant::Renorm)
        .unwrap_or(f64::NEG_INFINITY);
    Ok(Trajectory {
        actions,
        logprob,
        reward: None,
    })
}

/// Records the log-probability of `actions` on a tape, as a function of the
/// `1 x k` probability node `probs`.
pub fn logprob_on_tape(
    tape: &mut Tape<'_>,
    probs: Var,
    actions: &[usize],
    epsilon: f64,
    variant: Eq7Variant,
) -> Result<Var> {
    let pv = tape.value(probs).clone();
    let k = pv.cols();
    // validates and surfaces zero denominators with the same rules as the pure path
    position_factors(pv.as_slice(), actions, epsilon, variant)?;
    let picks = actions
        .iter()
        .map(|&a| tape.pick(probs, 0, a))
        .collect::<Result<Vec<_>>>()?;
    let chosen_total = match variant {
        Eq7Variant::Paper => {
            let mut acc = tape.input(Tensor2::scalar(0.0));
            for &p in &picks {
                acc = tape.add(acc, p)?;
            }
            Some(acc)
        }
        Eq7Variant::Renorm => None,
    };
    let mut prefix = tape.input(Tensor2::scalar(0.0));
    let mut total = tape.input(Tensor2::scalar(0.0));
    for (g, &p) in picks.iter().enumerate() {
        let uniform = epsilon / (k - g) as f64;
        let factor = if epsilon < 1.0 {
            let denom = match chosen_total {
                Some(ct) => tape.sub(ct, prefix)?,
                None => {
                    let neg = tape.scale(prefix, -1.0);
                    tape.add_scalar(neg, 1.0)
                }
            };
            let ratio = tape.div(p, denom)?;
            let scaled = tape.scale(ratio, 1.0 - epsilon);
            tape.add_scalar(scaled, uniform)
        } else {
            tape.input(Tensor2::scalar(uniform))
        };
        let lf = tape.log(factor);
        total = tape.add(total, lf)?;
        prefix = tape.add(prefix, p)?;
    }
    Ok(total)
}

/// Every ordered repetition-free sequence of length `horizon` over `0..k`.
pub fn enumerate_trajectories(k: usize, horizon: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, horizon: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == horizon {
            out.push(cur.clone());
            return;
        }
        for i in 0..k {
            if !cur.contains(&i) {
                cur.push(i);
                rec(k, horizon, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    if horizon <= k {
        rec(k, horizon, &mut Vec::new(), &mut out);
    }
    out
}
