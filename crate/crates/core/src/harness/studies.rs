//! Seeded comparison studies: sampling strategies and source-subset size.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::config::RunConfig;
use super::run::init_params;
use crate::error::{Error, Result};
use crate::meta::{evaluate, train, MetricsLog, TrainContext, TrainMode};
use crate::model::ModelParams;
use crate::sampler::Strategy;
use crate::tasks::{generate_suite, stream_rng, PoolKind, Suite};

pub const TABLE_FORMAT_VERSION: u32 = 1;

const STREAM_SUBSET: u64 = 0x5B5E;

/// One-sided sign test of "a ≥ b" over paired samples; ties are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// P(Binomial(wins + losses, 1/2) ≥ wins).
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len().min(b.len()) - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if wins == 0 {
        1.0
    } else {
        let binom = Binomial::new(0.5, n).expect("valid binomial");
        binom.sf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Trains on `suite` with adapter meta-learning and returns the selected parameters and log.
fn train_ctml(config: &RunConfig, suite: &Suite, seed: u64) -> Result<(ModelParams, MetricsLog)> {
    let params = init_params(config, seed)?;
    let ctx = TrainContext {
        suite,
        meta: &config.meta,
        sampler: &config.sampler,
        mode: TrainMode::Ctml,
        order: &[],
        seed,
    };
    let mut log = MetricsLog::new(suite.k());
    let (p, _) = train(params, &ctx, &mut log)?;
    Ok((p, log))
}

fn seeded_suite(config: &RunConfig, seed: u64) -> Result<Suite> {
    generate_suite(&config.suite, config.run.suite_seed + seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub mean_dev: f64,
    pub mean_test: f64,
    pub std_test: f64,
    /// Per-seed accuracies, aligned with the study's seed list.
    pub dev: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: Strategy,
    pub seed: u64,
    pub step: u64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerComparison {
    pub seeds: Vec<u64>,
    pub rows: Vec<StrategyRow>,
    pub curves: Vec<CurvePoint>,
}

impl SamplerComparison {
    pub fn row(&self, strategy: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn write_table(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# format_version: {TABLE_FORMAT_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["strategy", "seeds", "mean_dev_acc", "mean_test_acc", "std_test_acc"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.to_string(),
                r.test.len().to_string(),
                format!("{:?}", r.mean_dev),
                format!("{:?}", r.mean_test),
                format!("{:?}", r.std_test),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# format_version: {TABLE_FORMAT_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["strategy", "seed", "step", "dev_acc"])?;
        for c in &self.curves {
            w.write_record([
                c.strategy.to_string(),
                c.seed.to_string(),
                c.step.to_string(),
                format!("{:?}", c.dev_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains once per (strategy, seed) on the seed's suite and reports
/// source-language target accuracy. Every strategy sees the same suites
/// and seeds.
pub fn compare_samplers(config: &RunConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<SamplerComparison> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("strategy or seed list"));
    }
    config.validate()?;
    let suites = seeds
        .iter()
        .map(|&s| seeded_suite(config, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &strategy in strategies {
        let mut cfg = config.clone();
        cfg.sampler.strategy = strategy;
        let mut dev = Vec::new();
        let mut test = Vec::new();
        for (&seed, suite) in seeds.iter().zip(&suites) {
            let (p, log) = train_ctml(&cfg, suite, config.run.train_seed + seed)?;
            dev.push(evaluate(&p, suite.pool(PoolKind::Dev))?);
            test.push(evaluate(&p, suite.pool(PoolKind::Test))?);
            curves.extend(log.records().iter().filter_map(|r| {
                r.dev_acc.map(|dev_acc| CurvePoint {
                    strategy,
                    seed,
                    step: r.step,
                    dev_acc,
                })
            }));
        }
        rows.push(StrategyRow {
            strategy,
            mean_dev: mean(&dev),
            mean_test: mean(&test),
            std_test: sample_std(&test),
            dev,
            test,
        });
    }
    Ok(SamplerComparison {
        seeds: seeds.to_vec(),
        rows,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: usize,
    pub subset: Vec<usize>,
    pub seed: u64,
    pub dev_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterAblation {
    pub rows: Vec<AblationRow>,
}

impl AdapterAblation {
    /// Mean test accuracy per subset size, ascending by size.
    pub fn summary(&self) -> Vec<(usize, f64)> {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
            .into_iter()
            .map(|n| {
                let accs: Vec<f64> = self.rows.iter().filter(|r| r.size == n).map(|r| r.test_acc).collect();
                (n, mean(&accs))
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# format_version: {TABLE_FORMAT_VERSION}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["size", "subset", "seed", "dev_acc", "test_acc"])?;
        for r in &self.rows {
            w.write_record([
                r.size.to_string(),
                r.subset.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";"),
                r.seed.to_string(),
                format!("{:?}", r.dev_acc),
                format!("{:?}", r.test_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Source subsets examined for one size: every singleton for size 1, the
/// full set for size k, otherwise `per_size` seeded random draws.
pub fn subsets_for(k: usize, size: usize, per_size: usize, seed: u64) -> Vec<Vec<usize>> {
    if size == 1 {
        return (0..k).map(|j| vec![j]).collect();
    }
    if size >= k {
        return vec![(0..k).collect()];
    }
    (0..per_size)
        .map(|t| {
            let mut rng = stream_rng(&[seed, STREAM_SUBSET, size as u64, t as u64]);
            let mut s = index::sample(&mut rng, k, size).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// Trains adapters on source subsets of each size and reports target accuracy.
pub fn ablate_adapters(config: &RunConfig, subset_sizes: &[usize], seeds: &[u64]) -> Result<AdapterAblation> {
    config.validate()?;
    let k = config.suite.k();
    if let Some(&n) = subset_sizes.iter().find(|&&n| n == 0 || n > k) {
        return Err(Error::InvalidArgument(format!("subset size {n} outside 1..={k}")));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let suite = seeded_suite(config, seed)?;
        for &size in subset_sizes {
            for subset in subsets_for(k, size, config.study.subsets_per_size, config.run.suite_seed + seed) {
                let sub = suite.with_sources(&subset)?;
                let mut cfg = config.clone();
                cfg.meta.meta_batch = cfg.meta.meta_batch.min(size);
                let (p, _) = train_ctml(&cfg, &sub, config.run.train_seed + seed)?;
                rows.push(AblationRow {
                    size,
                    subset,
                    seed,
                    dev_acc: evaluate(&p, sub.pool(PoolKind::Dev))?,
                    test_acc: evaluate(&p, sub.pool(PoolKind::Test))?,
                });
            }
        }
    }
    Ok(AdapterAblation { rows })
}
