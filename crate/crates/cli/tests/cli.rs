use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use probe_world::experiment::RunConfig;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.output_root = dir.join("out");
    cfg.seeds = vec![0];
    cfg.data.train_scans = 2;
    cfg.data.test_scans = 1;
    cfg.data.trajectory.frames = 40;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.warmup_epochs = 1;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.checkpoint_every_epochs = 1;
    cfg.guidance.epochs = 1;
    cfg.guidance.batch_size = 16;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probe-world"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let e = String::from_utf8(o.stderr).unwrap();
    assert_eq!(e.lines().count(), 1, "multi-line error: {e}");
    e
}

#[test]
fn gen_data_refuses_existing_output_and_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let out = ok(tmp.path(), &["gen-data", "--config", c, "--seed", "1", "--out", "a"]);
    assert!(out.contains("2 train scans") && out.contains("1 test scans"), "{out}");
    ok(tmp.path(), &["gen-data", "--config", c, "--seed", "1", "--out", "b"]);
    let ma = fs::read(tmp.path().join("a/manifest.json")).unwrap();
    assert_eq!(ma, fs::read(tmp.path().join("b/manifest.json")).unwrap());

    let e = err(tmp.path(), &["gen-data", "--config", c, "--seed", "1", "--out", "a"]);
    assert!(e.starts_with("error[invalid-argument]:"), "{e}");
    ok(tmp.path(), &["gen-data", "--config", c, "--seed", "1", "--out", "a", "--force"]);
}

#[test]
fn default_config_describes_the_desk_dataset() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(&shipped).unwrap();
    assert_eq!(cfg, RunConfig::desk());
    assert_eq!((cfg.data.train_scans, cfg.data.test_scans), (8, 3));
    let paper = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_scale.toml");
    assert_eq!(RunConfig::load(&paper).unwrap(), RunConfig::paper_scale());
}

#[test]
fn missing_inputs_are_explicit_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let e = err(tmp.path(), &["gen-data", "--config", "missing.toml"]);
    assert!(e.starts_with("error[io]:") && e.contains("missing.toml"), "{e}");

    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(tmp.path(), &["gen-data", "--config", c]);
    let e = err(tmp.path(), &["finetune", "--config", c, "--from", "no_such_ckpt"]);
    assert!(e.starts_with("error[checkpoint-mismatch]:"), "{e}");
    let e = err(tmp.path(), &["eval", "--config", c, "--from", "no_such_model"]);
    assert!(e.starts_with("error[checkpoint-mismatch]:"), "{e}");
    let e = err(tmp.path(), &["pretrain", "--config", c, "--mode", "4d"]);
    assert!(e.starts_with("error[usage]:") && e.contains("4d"), "{e}");
}

#[test]
fn pretrain_finetune_eval_compare_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(tmp.path(), &["gen-data", "--config", c]);

    let out = ok(tmp.path(), &["pretrain", "--config", c, "--mode", "2d", "--out", "pre"]);
    assert!(out.contains("2d mode"), "{out}");
    assert!(tmp.path().join("pre/config.toml").exists());
    assert!(tmp.path().join("pre/config_hash.txt").exists());
    // A finished run resumes to a no-op.
    ok(tmp.path(), &["pretrain", "--config", c, "--mode", "2d", "--out", "pre"]);

    let out = ok(tmp.path(), &["finetune", "--config", c, "--from", "pre", "--out", "ft_pre"]);
    assert!(out.contains("from 2d"), "{out}");
    let out = ok(tmp.path(), &["finetune", "--config", c, "--out", "ft_scratch"]);
    assert!(out.contains("from scratch"), "{out}");
    err(tmp.path(), &["finetune", "--config", c, "--out", "ft_scratch"]);

    ok(tmp.path(), &["eval", "--config", c, "--from", "ft_pre"]);
    ok(tmp.path(), &["eval", "--config", c, "--from", "ft_scratch"]);
    let table = ok(
        tmp.path(),
        &["eval", "--compare", "ft_scratch/eval.json", "ft_pre/eval.json"],
    );
    assert!(table.lines().count() > 6);
    assert!(table.contains("%)"));

    let oracle = ok(tmp.path(), &["eval", "--config", c, "--oracle", "--out", "oracle"]);
    assert!(oracle.contains("translation 0.0000 mm, rotation 0.0000 deg"), "{oracle}");
    let csv = fs::read_to_string(tmp.path().join("oracle/eval.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let mae: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(mae, 0.0);
    }
}

#[test]
fn ablate_emits_matrix_and_plot_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(tmp.path(), &["gen-data", "--config", c]);
    ok(tmp.path(), &["ablate", "--config", c, "--out", "ab1"]);
    ok(tmp.path(), &["ablate", "--config", c, "--out", "ab2"]);
    let s1 = fs::read_to_string(tmp.path().join("ab1/summary.csv")).unwrap();
    assert_eq!(s1, fs::read_to_string(tmp.path().join("ab2/summary.csv")).unwrap());
    // 4 variants x (1 seed + mean) x (4 planes + all) x 6 axes.
    assert_eq!(s1.lines().count() - 1, 4 * 2 * 5 * 6);
    assert!(tmp.path().join("ab1/ablation.svg").exists());

    // Resuming reuses every finished piece.
    ok(tmp.path(), &["ablate", "--config", c, "--out", "ab1"]);
    assert_eq!(s1, fs::read_to_string(tmp.path().join("ab1/summary.csv")).unwrap());

    ok(tmp.path(), &["plot", "--from", "ab1/summary.csv", "--out", "fig.svg"]);
    assert!(fs::read_to_string(tmp.path().join("fig.svg")).unwrap().starts_with("<svg"));

    fs::write(tmp.path().join("ab1/seed_0/finetune_joint/eval.json"), "{ not json").unwrap();
    let e = err(tmp.path(), &["ablate", "--config", c, "--out", "ab1"]);
    assert!(e.contains("finetune_joint"), "{e}");
}
