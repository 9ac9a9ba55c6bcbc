use std::path::Path;
use std::process::Command;

use metatransfer::harness::{
    load_suite, run, run_from, save_suite, build_suite, Checkpoint, RunConfig, RunOutput, CHECKPOINT_FILE,
    METRICS_FILE, RESULTS_FILE,
};
use metatransfer::meta::{AdaptMode, MetricsLog};
use metatransfer::sampler::Strategy;
use metatransfer::Error;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.suite.relatedness = vec![1.0, 0.3, 0.0];
    c.suite.sizes = vec![2000];
    c.suite.candidates = vec![2];
    c.suite.language_magnitudes = vec![0.4, 0.8];
    c.suite.dev_size = 80;
    c.suite.test_size = 60;
    c.suite.probe_size = 60;
    c.meta.max_steps = 30;
    c.meta.eval_every = 10;
    c.meta.meta_batch = 2;
    c.adapt.steps = 5;
    c
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&small()).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    out.checkpoint.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, out.checkpoint);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    run(&small()).unwrap().checkpoint.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() * 2 / 3]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let text = run(&small()).unwrap().checkpoint.to_text().unwrap();
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(Checkpoint::from_text(&bumped, "mem"), Err(Error::VersionMismatch { .. })));
}

#[test]
fn reruns_are_bit_identical() {
    let mut c = small();
    c.sampler.strategy = Strategy::Rl;
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    assert_eq!(a.log.to_csv_string().unwrap(), b.log.to_csv_string().unwrap());
    assert_eq!(a.checkpoint.to_text().unwrap(), b.checkpoint.to_text().unwrap());
}

#[test]
fn resume_from_disk_continues_at_next_step() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let part = run_from(&c, None, Some(13)).unwrap();
    part.write(dir.path()).unwrap();
    let reread = RunOutput::read(dir.path()).unwrap();
    assert_eq!(reread.log.next_step(), 13);
    let resumed = run_from(&c, Some(reread), None).unwrap();
    assert_eq!(resumed.log.records()[13].step, 13);
    let full = run(&c).unwrap();
    assert_eq!(resumed.checkpoint.to_text().unwrap(), full.checkpoint.to_text().unwrap());
    assert_eq!(resumed.log, full.log);
}

#[test]
fn run_writes_metrics_results_and_suite() {
    let mut c = small();
    c.adapt.mode = AdaptMode::None;
    let dir = tempfile::tempdir().unwrap();
    let out = run(&c).unwrap();
    out.write(dir.path()).unwrap();
    let log = MetricsLog::load(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log, out.log);
    let results = std::fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
    assert!(results.starts_with("# format_version: 1\n"));
    assert_eq!(results.lines().count(), 2 + 3);
    let suite = build_suite(&c).unwrap();
    let path = dir.path().join("suite.json");
    save_suite(&path, &suite).unwrap();
    assert_eq!(load_suite(&path).unwrap(), suite);
}

fn cli(args: &[&str], cwd: &Path) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_metatransfer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.txt");
    small().save(&cfg_path).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let (ok, _, err) = cli(&["gen-tasks", "--config", cfg, "--out", "gen"], dir.path());
    assert!(ok, "{err}");
    assert!(dir.path().join("gen/suite.json").exists());

    let (ok, stdout, err) = cli(&["train", "--config", cfg, "--out", "t", "--stop-after", "7"], dir.path());
    assert!(ok, "{err}");
    assert!(stdout.contains("stopped at step 7"));
    let (ok, _, err) = cli(&["train", "--resume", "t", "--out", "t"], dir.path());
    assert!(ok, "{err}");
    let (ok, _, err) = cli(&["train", "--config", cfg, "--out", "u"], dir.path());
    assert!(ok, "{err}");
    let metrics = |d: &str| std::fs::read(dir.path().join(d).join(METRICS_FILE)).unwrap();
    assert_eq!(metrics("t"), metrics("u"));

    let ckpt = dir.path().join("u").join(CHECKPOINT_FILE);
    let ckpt = ckpt.to_str().unwrap();
    let (ok, stdout, err) = cli(&["eval", "--checkpoint", ckpt, "--out", "e"], dir.path());
    assert!(ok, "{err}");
    assert_eq!(stdout.lines().count(), 3);
    let (ok, _, err) = cli(&["adapt", "--checkpoint", ckpt, "--out", "a", "--set", "adapt.mode=mono"], dir.path());
    assert!(ok, "{err}");
}

#[test]
fn cli_errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, _, err) = cli(&["train", "--set", "meta.betaa=1"], dir.path());
    assert!(!ok);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=unknown_config_key message="), "{err}");
    assert!(err.contains("meta.betaa"));
    let (ok, _, err) = cli(&["eval", "--checkpoint", "missing.json"], dir.path());
    assert!(!ok);
    assert!(err.starts_with("error kind=io"), "{err}");
}
