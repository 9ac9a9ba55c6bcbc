mod common;

use std::collections::HashMap;

use common::*;
use metatransfer::meta::{train, MetaConfig, MetricsLog, TrainContext, TrainMode};
use metatransfer::model::{ModelConfig, ModelParams};
use metatransfer::numeric::{Optimizer, OptimizerConfig};
use metatransfer::sampler::{
    compute_feedback, enumerate_trajectories, reinforce_update, sample_trajectory, trajectory_logprob,
    Eq7Variant, PolicyInput, PolicyNet, PolicyState, SamplerConfig, Strategy,
};
use metatransfer::tasks::{generate_suite, stream_rng, PoolKind, SuiteConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize], expected: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, &e)| {
            let e = e * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

#[test]
fn uniform_exploration_has_closed_form() {
    let probs = [0.5, 0.3, 0.2];
    for t in enumerate_trajectories(3, 2) {
        for v in [Eq7Variant::Renorm, Eq7Variant::Paper] {
            let lp = trajectory_logprob(&probs, &t, 1.0, v).unwrap();
            assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-15);
        }
    }
}

#[test]
fn full_exploration_draws_are_uniform() {
    let probs = [0.7, 0.1, 0.1, 0.1];
    let mut r = rng(5);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..20_000 {
        *counts.entry(sample_trajectory(&probs, 2, 1.0, &mut r).unwrap().actions).or_default() += 1;
    }
    let all = enumerate_trajectories(4, 2);
    let c: Vec<usize> = all.iter().map(|t| counts.get(t).copied().unwrap_or(0)).collect();
    let p = chi_square_p(&c, &vec![1.0 / all.len() as f64; all.len()]);
    assert!(p > 0.01, "{p}");
}

#[test]
fn full_horizon_is_a_permutation() {
    let mut r = rng(1);
    for _ in 0..100 {
        let mut a = sample_trajectory(&[0.1, 0.2, 0.3, 0.4, 0.0], 5, 0.2, &mut r).unwrap().actions;
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn dominant_probability_is_picked_first() {
    let mut r = rng(2);
    let p = [1.0 - 1e-9, 5e-10, 5e-10];
    for _ in 0..1000 {
        assert_eq!(sample_trajectory(&p, 2, 0.0, &mut r).unwrap().actions[0], 0);
    }
}

#[test]
fn horizon_beyond_k_is_rejected() {
    assert!(sample_trajectory(&[0.5, 0.5], 3, 0.0, &mut rng(0)).is_err());
}

#[test]
fn bandit_converges_to_better_arm() {
    let mut r = rng(3);
    let mut net = PolicyNet::init(2, 8, &mut r).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::default(), SamplerConfig::default().gamma, &net.params);
    let state = PolicyState::zeros(8);
    let input = PolicyInput { state: &state, rewards: &[0.0, 0.0], probs: &[0.5, 0.5] };
    let arm_reward = [1.0, 0.0];
    let mut prev = net.forward(&state, input.rewards, input.probs).unwrap().0[0];
    for step in 0..200 {
        let probs = net.forward(&state, input.rewards, input.probs).unwrap().0;
        let batch: Vec<_> = (0..4)
            .map(|_| {
                let mut t = sample_trajectory(&probs, 1, 0.0, &mut r).unwrap();
                t.reward = Some(arm_reward[t.actions[0]]);
                t
            })
            .collect();
        reinforce_update(&mut net, &mut opt, input, &batch, 0.5, 0.0, Eq7Variant::Renorm).unwrap();
        let now = net.forward(&state, input.rewards, input.probs).unwrap().0[0];
        assert!(now > prev, "step {step}: {prev} -> {now}");
        prev = now;
    }
    assert!(prev > 0.9, "{prev}");
}

fn helpful_suite() -> SuiteConfig {
    SuiteConfig {
        relatedness: vec![1.0, 0.0, 0.0],
        noise: vec![0.0],
        candidates: vec![2],
        sizes: vec![20_000],
        language_magnitudes: vec![],
        ..SuiteConfig::default()
    }
}

#[test]
fn zero_inner_rate_gives_zero_rewards_and_leaves_params_alone() {
    let suite = generate_suite(&helpful_suite(), 1).unwrap();
    let p = ModelParams::init(ModelConfig::default(), &mut rng(1)).unwrap();
    let before = p.clone();
    let probe = &suite.pool(PoolKind::Probe)[..32];
    let fb = compute_feedback(&p, &suite, probe, 0.0, 1, 12, 0, &[1.0 / 3.0; 3], &mut rng(2)).unwrap();
    assert!(fb.rewards.iter().all(|&d| d == 0.0));
    assert!(fb.l_sources.iter().all(|&l| l == fb.l_original));
    let fb = compute_feedback(&p, &suite, probe, 0.1, 1, 12, 0, &[1.0 / 3.0; 3], &mut rng(2)).unwrap();
    assert_eq!(p, before);
    assert!((fb.l_original - oracle_loss(&p, probe)).abs() < 1e-12);
}

#[test]
fn helpful_dataset_earns_largest_reward() {
    let suite = generate_suite(&helpful_suite(), 2).unwrap();
    // brief warm-up so the head is no longer random
    let meta = MetaConfig { max_steps: 100, meta_batch: 1, ..MetaConfig::default() };
    let sampler = SamplerConfig { strategy: Strategy::Uniform, ..SamplerConfig::default() };
    let ctx = TrainContext { suite: &suite, meta: &meta, sampler: &sampler, mode: TrainMode::Ctml, order: &[], seed: 0 };
    let init = ModelParams::init(ModelConfig::default(), &mut rng(3)).unwrap();
    let (p, _) = train(init, &ctx, &mut MetricsLog::new(3)).unwrap();
    let p = p.with_trainable(&meta.ctml_parts());
    let probe_pool = suite.pool(PoolKind::Probe);
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut r = stream_rng(&[trial, 17]);
        let ids = rand::seq::index::sample(&mut r, probe_pool.len(), 128).into_vec();
        let probe: Vec<_> = ids.iter().map(|&i| probe_pool[i].clone()).collect();
        let fb = compute_feedback(&p, &suite, &probe, 0.1, 1, 48, 0, &[1.0 / 3.0; 3], &mut r).unwrap();
        if fb.rewards[0] > fb.rewards[1] && fb.rewards[0] > fb.rewards[2] {
            wins += 1;
        }
    }
    assert!(wins >= 90, "{wins}/100");
}
