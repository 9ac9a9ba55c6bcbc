//! Acceptance gate. Runs every criterion at its stated tolerance, printing
//! one pass/fail line each, then fails if any criterion failed.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use common::*;
use metatransfer::harness::{
    ablate_adapters, compare_samplers, run, run_from, sign_test, Checkpoint, RunConfig, RunOutput,
};
use metatransfer::meta::{
    adapt, clml_step, ctml_step, evaluate, train, AdaptConfig, AdaptMode, LangBatch, MetaConfig, MetricsLog,
    TrainContext, TrainMode, CLML_PARTS,
};
use metatransfer::model::{ModelConfig, ModelParams, MultiChoiceInstance, Part};
use metatransfer::numeric::{grad_check, Optimizer, OptimizerConfig, OptimizerKind, ParamSet, Tape, Tensor2};
use metatransfer::sampler::{
    enumerate_trajectories, reinforce_objective, reinforce_update, sample_trajectory, trajectory_logprob,
    Eq7Variant, PolicyInput, PolicyNet, PolicyState, SamplerConfig, Strategy, Trajectory,
};
use metatransfer::tasks::{generate_suite, stream_rng, Episode, PoolKind, SuiteConfig, SOURCE_LANGUAGE};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig { feature_dim: 3, hidden: 6, bottleneck: 3, layers: 2, ..ModelConfig::default() };
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut record = |name: &str, seed: u64, report: metatransfer::numeric::GradCheckReport| {
        worst = worst.max(report.max_rel_err);
        if !report.passed() {
            failures.push(format!("{name}@{seed}"));
        }
    };
    for seed in 0..100u64 {
        let batch = random_batch(&mut rng(seed + 10_000), 3, 3, 3);
        for (name, parts) in [
            ("encoder", vec![Part::Backbone]),
            ("adapter", vec![Part::Adapters]),
            ("head", vec![Part::Head]),
        ] {
            let p = random_model(cfg, seed).with_trainable(&parts);
            let template = p.clone();
            let report = grad_check(
                |s: &ParamSet| {
                    let mut q = template.clone();
                    q.set = s.clone();
                    q.batch_loss(&batch)
                },
                &p.set,
                1e-5,
                1e-4,
            )
            .unwrap();
            record(name, seed, report);
        }

        let mut r = rng(seed + 20_000);
        let mut net = PolicyNet::init(4, 5, &mut r).unwrap();
        randomize(&mut net.params, &mut r, 0.5);
        let state = PolicyState { h: gaussian_vec(&mut r, 5, 0.5), c: gaussian_vec(&mut r, 5, 0.5) };
        let rewards = gaussian_vec(&mut r, 4, 0.3);
        let probs = [0.1, 0.2, 0.3, 0.4];
        let weights = gaussian_vec(&mut r, 4, 1.0);
        let report = grad_check(
            |s: &ParamSet| net.weighted_output(s, &state, &rewards, &probs, &weights),
            &net.params,
            1e-5,
            1e-4,
        )
        .unwrap();
        record("policy", seed, report);
        let batch = vec![
            Trajectory { actions: vec![1, 3], logprob: 0.0, reward: Some(0.4) },
            Trajectory { actions: vec![2, 0], logprob: 0.0, reward: Some(-0.3) },
        ];
        let input = PolicyInput { state: &state, rewards: &rewards, probs: &probs };
        let report = grad_check(
            |s: &ParamSet| reinforce_objective(&net, s, input, &batch, 0.05, 0.3, Eq7Variant::Renorm),
            &net.params,
            1e-5,
            1e-4,
        )
        .unwrap();
        record("reinforce", seed, report);

        let mut set = ParamSet::new();
        let w = set.push("w", Tensor2::from_vec(3, 3, gaussian_vec(&mut r, 9, 1.0)).unwrap());
        let b = set.push("b", Tensor2::from_vec(1, 3, gaussian_vec(&mut r, 3, 1.0)).unwrap());
        let x = set.push("x", Tensor2::from_vec(2, 3, gaussian_vec(&mut r, 6, 1.0)).unwrap());
        let report = grad_check(
            |s: &ParamSet| {
                let mut t = Tape::new(s);
                let xv = t.param(x);
                let lin = t.linear(xv, w, Some(b))?;
                let sig = t.sigmoid(lin);
                let rl = t.relu(xv);
                let den = t.add_scalar(rl, 1.0);
                let q = t.div(sig, den)?;
                let sm = t.softmax_rows(q);
                let th = t.tanh(xv);
                let sh = t.add_scalar(th, 2.0);
                let lg = t.log(sh);
                let prod = t.mul(sm, lg)?;
                let out = t.sum(prod);
                let g = t.backward(out)?;
                Ok((t.value(out).get(0, 0), g))
            },
            &set,
            1e-5,
            1e-4,
        )
        .unwrap();
        record("primitives", seed, report);
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!("max rel err {worst:.2e} over 100 seeds, failures {failures:?}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn two_pass(params: &ModelParams, tasks: &[(&[MultiChoiceInstance], &[MultiChoiceInstance])], alpha: f64, beta: f64) -> ModelParams {
    let mut sum: Vec<Vec<f64>> = params.set.groups().iter().map(|g| vec![0.0; g.value.len()]).collect();
    for (support, query) in tasks {
        let adapted = oracle_apply(params, &oracle_grad(params, support), -alpha);
        for (acc, g) in sum.iter_mut().zip(oracle_grad(&adapted, query)) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    oracle_apply(params, &sum, -beta / tasks.len() as f64)
}

fn fomaml_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = MetaConfig { optimizer: OptimizerKind::Sgd, alpha_ctml: 0.3, beta_ctml: 0.05, alpha_clml: 0.2, beta_clml: 0.07, ..MetaConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut r = rng(seed + 300);
        let eps: Vec<Episode> = (0..2)
            .map(|j| Episode {
                dataset: j,
                language: SOURCE_LANGUAGE,
                support_ids: vec![],
                query_ids: vec![],
                support: random_batch(&mut r, 3, 4, 2),
                query: random_batch(&mut r, 3, 4, 2),
            })
            .collect();
        let p = random_model(toy_config(), seed).with_trainable(&cfg.ctml_parts());
        let mut opt = cfg.outer_optimizer(cfg.beta_ctml, &p);
        let got = ctml_step(&p, &eps, &cfg, &mut opt).unwrap().params;
        let tasks: Vec<_> = eps.iter().map(|e| (&e.support[..], &e.query[..])).collect();
        worst = worst.max(max_abs_diff(&got.set, &two_pass(&p, &tasks, cfg.alpha_ctml, cfg.beta_ctml).set));

        let p = random_model(toy_config(), seed + 50).with_trainable(&CLML_PARTS);
        let pairs: Vec<_> = eps
            .iter()
            .map(|e| {
                (
                    LangBatch { language: 0, instances: e.support.clone() },
                    LangBatch { language: 1, instances: e.query.clone() },
                )
            })
            .collect();
        let mut opt = cfg.outer_optimizer(cfg.beta_clml, &p);
        let got = clml_step(&p, 1, &pairs, &cfg, &mut opt).unwrap().params;
        worst = worst.max(max_abs_diff(&got.set, &two_pass(&p, &tasks, cfg.alpha_clml, cfg.beta_clml).set));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("max elementwise diff {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn freeze_contracts() -> Outcome {
    let suite_cfg = SuiteConfig { language_magnitudes: vec![0.8], ..SuiteConfig::default() };
    let suite = generate_suite(&suite_cfg, 7).unwrap();
    let meta = MetaConfig::default();
    let mut p = ModelParams::init(ModelConfig::default(), &mut rng(7)).unwrap().with_trainable(&meta.ctml_parts());
    let start = p.clone();
    let mut opt = meta.outer_optimizer(meta.beta_ctml, &p);
    for step in 0..50u64 {
        let mut r = stream_rng(&[7, step]);
        let eps: Vec<_> = (0..3).map(|j| suite.sample_episode(j, 0, 12, 12, &mut r).unwrap()).collect();
        p = ctml_step(&p, &eps, &meta, &mut opt).unwrap().params;
    }
    let ctml_ok = p.set.bit_identical(&start.set, &start.groups_of(Part::Backbone))
        && !p.set.bit_identical(&start.set, &start.groups_of(Part::Adapters));

    let mut q = p.with_trainable(&CLML_PARTS);
    let start = q.clone();
    let mut opt = meta.outer_optimizer(meta.beta_clml, &q);
    let dev_len = suite.pool(PoolKind::Dev).len();
    for step in 0..50u64 {
        let mut r = stream_rng(&[8, step]);
        let ids = rand::seq::index::sample(&mut r, dev_len, 24).into_vec();
        let pair = (
            LangBatch { language: 0, instances: suite.pool_instances(PoolKind::Dev, 0, &ids[..12]).unwrap() },
            LangBatch { language: 1, instances: suite.pool_instances(PoolKind::Dev, 1, &ids[12..]).unwrap() },
        );
        q = clml_step(&q, 1, &[pair], &meta, &mut opt).unwrap().params;
    }
    let last = start.groups_of(Part::BackboneLast);
    let frozen: Vec<_> = start
        .groups_of(Part::Adapters)
        .into_iter()
        .chain(start.groups_of(Part::Backbone).into_iter().filter(|g| !last.contains(g)))
        .collect();
    let clml_ok = q.set.bit_identical(&start.set, &frozen) && !q.set.bit_identical(&start.set, &last);
    outcome(ctml_ok && clml_ok, format!("ctml backbone frozen: {ctml_ok}, clml adapters and lower layers frozen: {clml_ok}"))
}

fn trajectory_distribution() -> Outcome {
    let mut ok = true;
    let mut worst_sum: f64 = 0.0;
    let mut worst_tv: f64 = 0.0;
    let all = enumerate_trajectories(4, 2);
    for trial in 0..3u64 {
        let mut r = rng(trial + 400);
        let raw: Vec<f64> = gaussian_vec(&mut r, 4, 1.0).iter().map(|v| v.exp()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        for eps in [0.0, 0.3, 1.0] {
            let exact: Vec<f64> = all
                .iter()
                .map(|t| trajectory_logprob(&probs, t, eps, Eq7Variant::Renorm).unwrap().exp())
                .collect();
            worst_sum = worst_sum.max((exact.iter().sum::<f64>() - 1.0).abs());
            let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
            for _ in 0..50_000 {
                *counts.entry(sample_trajectory(&probs, 2, eps, &mut r).unwrap().actions).or_default() += 1;
            }
            let tv: f64 = 0.5
                * all
                    .iter()
                    .zip(&exact)
                    .map(|(t, p)| (counts.get(t).copied().unwrap_or(0) as f64 / 50_000.0 - p).abs())
                    .sum::<f64>();
            worst_tv = worst_tv.max(tv);
            if eps == 1.0 {
                for v in [Eq7Variant::Renorm, Eq7Variant::Paper] {
                    for t in &all {
                        let lp = trajectory_logprob(&probs, t, eps, v).unwrap();
                        ok &= (lp - (1.0f64 / 12.0).ln()).abs() < 1e-12;
                    }
                }
            }
        }
    }
    ok &= worst_sum < 1e-9 && worst_tv < 0.02;
    outcome(ok, format!("max |sum - 1| {worst_sum:.1e}, max TV {worst_tv:.4}, eps=1 uniform in both variants"))
}

fn bandit() -> Outcome {
    let mut finals = Vec::new();
    let mut monotone = true;
    for seed in 0..10u64 {
        let mut r = rng(seed + 500);
        let mut net = PolicyNet::init(2, 8, &mut r).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), SamplerConfig::default().gamma, &net.params);
        let state = PolicyState::zeros(8);
        let input = PolicyInput { state: &state, rewards: &[0.0, 0.0], probs: &[0.5, 0.5] };
        let mut prev = net.forward(&state, input.rewards, input.probs).unwrap().0[0];
        for _ in 0..200 {
            let probs = net.forward(&state, input.rewards, input.probs).unwrap().0;
            let batch: Vec<_> = (0..4)
                .map(|_| {
                    let mut t = sample_trajectory(&probs, 1, 0.0, &mut r).unwrap();
                    t.reward = Some(if t.actions[0] == 0 { 1.0 } else { 0.0 });
                    t
                })
                .collect();
            reinforce_update(&mut net, &mut opt, input, &batch, 0.5, 0.0, Eq7Variant::Renorm).unwrap();
            let now = net.forward(&state, input.rewards, input.probs).unwrap().0[0];
            monotone &= now > prev;
            prev = now;
        }
        finals.push(prev);
    }
    let min = finals.iter().cloned().fold(1.0, f64::min);
    outcome(min > 0.9 && monotone, format!("min final P(better arm) {min:.3} over 10 seeds, strictly increasing: {monotone}"))
}

fn sampler_learning() -> Outcome {
    let start = Instant::now();
    let suite_cfg = SuiteConfig {
        relatedness: vec![1.0, 0.0, 0.0],
        noise: vec![0.0],
        candidates: vec![2],
        sizes: vec![20_000],
        language_magnitudes: vec![],
        ..SuiteConfig::default()
    };
    let meta = MetaConfig { meta_batch: 1, max_steps: 400, patience: usize::MAX, ..MetaConfig::default() };
    let sampler = SamplerConfig::default();
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let suite = generate_suite(&suite_cfg, 1000 + seed).unwrap();
        let ctx = TrainContext { suite: &suite, meta: &meta, sampler: &sampler, mode: TrainMode::Ctml, order: &[], seed };
        let init = ModelParams::init(ModelConfig::default(), &mut stream_rng(&[seed, 1])).unwrap();
        let mut log = MetricsLog::new(3);
        train(init, &ctx, &mut log).unwrap();
        let tail: Vec<f64> = log.records().iter().rev().take(100).map(|r| r.probs[0].unwrap()).collect();
        means.push(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    let hits = means.iter().filter(|&&m| m > 1.0 / 3.0 + 0.15).count();
    let elapsed = start.elapsed();
    outcome(
        hits >= 8 && elapsed < Duration::from_secs(300),
        format!(
            "{hits}/10 seeds above 0.483, mean tail P(helpful) {:.3}, {:.1}s",
            means.iter().sum::<f64>() / 10.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn ordering(label: &str, a: &[f64], b: &[f64]) -> Outcome {
    let t = sign_test(a, b);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    outcome(
        t.p_value < 0.1,
        format!(
            "{label}: means {:.3} vs {:.3}, wins {} losses {} ties {}, p = {:.4}",
            mean(a),
            mean(b),
            t.wins,
            t.losses,
            t.ties,
            t.p_value
        ),
    )
}

fn seeds() -> Vec<u64> {
    (0..10).collect()
}

fn first_vs_last_and_sample() -> (Outcome, Outcome) {
    let cfg = RunConfig::default();
    let cmp = compare_samplers(&cfg, &[Strategy::First, Strategy::Last, Strategy::Sample], &seeds()).unwrap();
    let first = &cmp.row(Strategy::First).unwrap().test;
    (
        ordering("FIRST >= LAST", first, &cmp.row(Strategy::Last).unwrap().test),
        ordering("FIRST >= SAMPLE", first, &cmp.row(Strategy::Sample).unwrap().test),
    )
}

fn rl_vs_uniform() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.suite.relatedness = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let cmp = compare_samplers(&cfg, &[Strategy::Rl, Strategy::Uniform], &seeds()).unwrap();
    ordering("RL >= UNIFORM", &cmp.row(Strategy::Rl).unwrap().test, &cmp.row(Strategy::Uniform).unwrap().test)
}

fn multi_vs_single() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.suite.relatedness = vec![0.5; 6];
    cfg.suite.language_magnitudes = vec![];
    cfg.run.suite_seed = 3000;
    let k = cfg.suite.k();
    let abl = ablate_adapters(&cfg, &[1, k], &seeds()).unwrap();
    let mut multi = Vec::new();
    let mut best_single = Vec::new();
    for s in seeds() {
        let rows: Vec<_> = abl.rows.iter().filter(|r| r.seed == s).collect();
        multi.push(rows.iter().find(|r| r.size == k).unwrap().test_acc);
        best_single.push(rows.iter().filter(|r| r.size == 1).map(|r| r.test_acc).fold(0.0, f64::max));
    }
    ordering("multi-source >= best single-source", &multi, &best_single)
}

fn clml_vs_target_only() -> Outcome {
    let cfg = RunConfig::default();
    let language = cfg.suite.language_magnitudes.len();
    let mut clml = Vec::new();
    let mut target_only = Vec::new();
    for s in seeds() {
        let suite = generate_suite(&cfg.suite, cfg.run.suite_seed + s).unwrap();
        let ctx = TrainContext { suite: &suite, meta: &cfg.meta, sampler: &cfg.sampler, mode: TrainMode::Ctml, order: &[], seed: s };
        let init = ModelParams::init(cfg.model, &mut stream_rng(&[s, 1])).unwrap();
        let (p, _) = train(init, &ctx, &mut MetricsLog::new(suite.k())).unwrap();
        let test = suite.language_pool(PoolKind::Test, language).unwrap();
        for (mode, out) in [(AdaptMode::Clml, &mut clml), (AdaptMode::TargetOnly, &mut target_only)] {
            let ac = AdaptConfig { mode, ..cfg.adapt.clone() };
            let q = adapt(&p, &suite, language, &cfg.meta, &ac, s, &mut MetricsLog::new(suite.k())).unwrap();
            out.push(evaluate(&q, &test).unwrap());
        }
    }
    ordering("CLML >= target-only (magnitude 0.8)", &clml, &target_only)
}

fn zero_shot_learnability() -> Outcome {
    let suite_cfg = SuiteConfig {
        relatedness: vec![1.0, 0.95],
        noise: vec![0.0, 0.1],
        candidates: vec![2],
        sizes: vec![20_000],
        language_magnitudes: vec![],
        ..SuiteConfig::default()
    };
    let suite = generate_suite(&suite_cfg, 1000).unwrap();
    let meta = MetaConfig { meta_batch: 2, max_steps: 2000, ..MetaConfig::default() };
    let sampler = SamplerConfig { strategy: Strategy::Uniform, ..SamplerConfig::default() };
    let ctx = TrainContext { suite: &suite, meta: &meta, sampler: &sampler, mode: TrainMode::Ctml, order: &[], seed: 0 };
    let init = ModelParams::init(ModelConfig::default(), &mut stream_rng(&[0, 1])).unwrap();
    let mut log = MetricsLog::new(2);
    let (p, state) = train(init, &ctx, &mut log).unwrap();
    let acc = evaluate(&p, suite.pool(PoolKind::Test)).unwrap();
    outcome(acc >= 0.9 && state.step <= 2000, format!("zero-shot test accuracy {acc:.3} after {} meta-steps", state.step))
}

fn reproducibility() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let a = run(&cfg).unwrap();
    let single = start.elapsed();
    let b = run(&cfg).unwrap();
    let same_log = a.log.to_csv_string().unwrap() == b.log.to_csv_string().unwrap();
    let same_ckpt = a.checkpoint.to_text().unwrap() == b.checkpoint.to_text().unwrap();
    let cut = a.checkpoint.train.step / 2;
    let dir = tempfile::tempdir().unwrap();
    run_from(&cfg, None, Some(cut)).unwrap().write(dir.path()).unwrap();
    let back = RunOutput::read(dir.path()).unwrap();
    let continues = back.log.next_step() == cut as u64;
    let resumed = run_from(&cfg, Some(back), None).unwrap();
    let resume_same = resumed.checkpoint.to_text().unwrap() == a.checkpoint.to_text().unwrap() && resumed.log == a.log;
    let path = dir.path().join("again.json");
    a.checkpoint.save(&path).unwrap();
    let reload_same = Checkpoint::load(&path).unwrap() == a.checkpoint;
    outcome(
        same_log && same_ckpt && continues && resume_same && reload_same && single < Duration::from_secs(600),
        format!(
            "identical log {same_log}, identical checkpoint {same_ckpt}, resume from step {cut} identical {resume_same}, \
             reload identical {reload_same}, default run {:.1}s",
            single.as_secs_f64()
        ),
    )
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name.to_string(), o));
    };
    report("1 gradient fidelity", gradient_fidelity());
    report("2 first-order meta-gradient oracle", fomaml_oracle());
    report("3 freeze contracts", freeze_contracts());
    report("4 trajectory distribution", trajectory_distribution());
    report("5 policy-gradient bandit", bandit());
    report("6 sampler learning", sampler_learning());
    let (a, b) = first_vs_last_and_sample();
    report("7a ordering", a);
    report("7b ordering", b);
    report("7c ordering", rl_vs_uniform());
    report("7d ordering", multi_vs_single());
    report("7e ordering", clml_vs_target_only());
    report("8 zero-shot learnability", zero_shot_learnability());
    report("9 reproducibility", reproducibility());
    let elapsed = start.elapsed();
    report(
        "10 budget",
        outcome(elapsed < Duration::from_secs(1800), format!("acceptance suite took {:.1}s", elapsed.as_secs_f64())),
    );
    let failed: Vec<_> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| n.clone()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
