use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metatransfer::harness::{
    ablate_adapters, build_suite, compare_samplers, evaluate_languages, run_from, save_suite, write_results,
    Checkpoint, RunConfig, RunOutput, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, RESULTS_FILE, SUITE_FILE,
};
use metatransfer::meta::{AdaptMode, MetricsLog};
use metatransfer::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Meta-transfer learning over synthetic multiple-choice suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (overrides run.train_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides run.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite document.
    GenTasks(Common),
    /// Train, adapt and evaluate end to end.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue the interrupted run stored in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many training steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Adapt a trained checkpoint to the configured languages and evaluate.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Zero-shot evaluation of a trained checkpoint on every configured language.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare sampling strategies over paired seeds.
    CompareSamplers(Common),
    /// Train on source subsets of several sizes.
    AblateAdapters(Common),
}

fn build_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::InvalidConfigValue {
            key: o.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.run.train_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_finished(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if !ckpt.train.finished {
        return Err(Error::InvalidArgument(format!(
            "{} holds an unfinished run; resume it with train --resume",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn evaluate_checkpoint(common: &Common, path: &Path, adapt: bool) -> Result<()> {
    let ckpt = load_finished(path)?;
    let mut cfg = build_config(common, Some(ckpt.config.clone()))?;
    if !adapt {
        cfg.adapt.mode = AdaptMode::None;
    }
    let suite = build_suite(&cfg)?;
    let params = ckpt.trained_params();
    let mut log = MetricsLog::new(suite.k());
    let results = evaluate_languages(&params, &suite, &cfg, &mut log)?;
    let dir = out_dir(&cfg)?;
    write_results(&dir.join(RESULTS_FILE), &results)?;
    if adapt {
        log.save(&dir.join(METRICS_FILE))?;
    }
    for r in &results {
        let adapted = r.adapted_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("language={} zero_shot={:.4} adapted={adapted}", r.name, r.zero_shot_acc);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks(common) => {
            let cfg = build_config(&common, None)?;
            let dir = out_dir(&cfg)?;
            save_suite(&dir.join(SUITE_FILE), &build_suite(&cfg)?)?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            println!("wrote {}", dir.join(SUITE_FILE).display());
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let prev = resume.as_deref().map(RunOutput::read).transpose()?;
            let base = prev.as_ref().map(|p| p.checkpoint.config.clone());
            let cfg = build_config(&common, base)?;
            let out = run_from(&cfg, prev, stop_after)?;
            let dir = out_dir(&cfg)?;
            out.write(&dir)?;
            if out.finished() {
                for r in &out.checkpoint.results {
                    let adapted = r.adapted_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                    println!("language={} zero_shot={:.4} adapted={adapted}", r.name, r.zero_shot_acc);
                }
            } else {
                println!(
                    "stopped at step {}; checkpoint {}",
                    out.checkpoint.train.step,
                    dir.join(CHECKPOINT_FILE).display()
                );
            }
        }
        Command::Adapt { common, checkpoint } => evaluate_checkpoint(&common, &checkpoint, true)?,
        Command::Eval { common, checkpoint } => evaluate_checkpoint(&common, &checkpoint, false)?,
        Command::CompareSamplers(common) => {
            let cfg = build_config(&common, None)?;
            let cmp = compare_samplers(&cfg, &cfg.study.strategies, &cfg.study.seeds)?;
            let dir = out_dir(&cfg)?;
            cmp.write_table(&dir.join("samplers.csv"))?;
            cmp.write_curves(&dir.join("curves.csv"))?;
            for r in &cmp.rows {
                println!(
                    "strategy={} mean_dev={:.4} mean_test={:.4} std_test={:.4}",
                    r.strategy, r.mean_dev, r.mean_test, r.std_test
                );
            }
        }
        Command::AblateAdapters(common) => {
            let cfg = build_config(&common, None)?;
            let abl = ablate_adapters(&cfg, &cfg.study.subset_sizes, &cfg.study.seeds)?;
            let dir = out_dir(&cfg)?;
            abl.write(&dir.join("ablation.csv"))?;
            for (size, acc) in abl.summary() {
                println!("sources={size} mean_test={acc:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.kind().to_string();
            eprintln!("error kind=usage message={message:?}");
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={message:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
