//! End-to-end runs of the `liconv` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn liconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liconv")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 5] = ["--synthetic", "seed=7", "classes=4", "train=8", "val=4"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend(SMALL);
    args.extend(extra);
    args.extend(["--out", p(out)]);
    liconv(&args)
}

fn log_rows(out: &Path) -> Vec<String> {
    let text = fs::read_to_string(out.join("log.csv")).unwrap();
    let mut lines = text.lines().map(String::from);
    assert_eq!(lines.next().as_deref(), Some("epoch,phase,loss,lr,val_miou"));
    lines.collect()
}

#[test]
fn train_writes_checkpoint_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--epochs", "30", "--li-finetune", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = log_rows(&out);
    assert_eq!(rows.len(), 40);
    assert!(rows[29].starts_with("30,1,") && rows[30].starts_with("31,2,"));
    assert!(out.join("checkpoint/manifest.txt").exists());
    assert!(out.join("checkpoint/model.toml").exists());
    let metrics = fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"epochs\": 40") && metrics.contains("\"val_miou\""), "{metrics}");
    let echo = fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(echo.contains("li_finetune = 10") && echo.contains("seed = 7"), "{echo}");
}

#[test]
fn li_switch_trains_comparable_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("li"), dir.path().join("base"));
    assert!(train(&a, &["--epochs", "2", "--li", "on"]).status.success());
    assert!(train(&b, &["--epochs", "2", "--li", "off"]).status.success());
    assert_eq!(log_rows(&a).len(), log_rows(&b).len());
    let ma = fs::read_to_string(a.join("metrics.json")).unwrap();
    let mb = fs::read_to_string(b.join("metrics.json")).unwrap();
    assert!(ma.contains("\"li\": true") && mb.contains("\"li\": false"));
    assert!(ma.contains("\"params\": 151596") && mb.contains("\"params\": 150860"), "{ma}\n{mb}");
}

#[test]
fn zero_epochs_saves_initial_weights_and_no_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let o = train(&out, &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(log_rows(&out).is_empty());
    assert!(out.join("checkpoint/manifest.txt").exists());
}

#[test]
fn divergence_exits_three_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("d"), &["--epochs", "2", "--lr", "1e9"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("epoch 1"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // No data at all.
    assert_eq!(liconv(&["train", "--seed", "1", "--out", p(&out)]).status.code(), Some(2));
    // Missing path.
    assert_eq!(liconv(&["train", "--dataset", "/no/such/dir", "--seed", "1", "--out", p(&out)]).status.code(), Some(2));
    // Synthetic spec without a seed.
    assert_eq!(liconv(&["train", "--synthetic", "classes=4", "--out", p(&out)]).status.code(), Some(2));
    // Invalid schedule.
    assert_eq!(train(&out, &["--batch", "0"]).status.code(), Some(2));
    // Unknown key in a config file.
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[schedule]\nepohcs = 3\n").unwrap();
    let o = train(&out, &["--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epohcs"), "{}", stderr(&o));
}

#[test]
fn on_disk_dataset_needs_an_explicit_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = liconv(&["gen", "--synthetic", "seed=3", "classes=3", "train=4", "val=2", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(data.join("manifest.txt")).unwrap().lines().count(), 6);
    let out = dir.path().join("run");
    let o = liconv(&["train", "--dataset", p(&data), "--epochs", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    let o = liconv(&["train", "--dataset", p(&data), "--epochs", "1", "--seed", "5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log_rows(&out).len(), 1);
}

#[test]
fn flags_override_config_file_and_echo_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("run");
    fs::write(
        &cfg,
        format!(
            "[data.synthetic]\nseed = 2\nclasses = 3\ntrain = 4\nval = 2\n\n[schedule]\nepochs = 3\nlr = 0.001\n\n[output]\ndir = \"{}\"\n",
            p(&out)
        ),
    )
    .unwrap();
    let o = liconv(&["train", "--config", p(&cfg), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log_rows(&out).len(), 1);
    let echo = fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(echo.contains("epochs = 1") && echo.contains("lr = 0.001") && echo.contains("classes = 3"), "{echo}");
}

fn eval(ckpt: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["eval", "--checkpoint", p(ckpt), "--out", p(out)];
    args.extend(SMALL);
    args.extend(extra);
    liconv(&args)
}

#[test]
fn eval_scale_sets_masks_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--epochs", "2"]).status.success());
    let ckpt = run.join("checkpoint");

    let default = dir.path().join("e0");
    assert!(eval(&ckpt, &default, &[]).status.success());
    let unit = dir.path().join("e1");
    assert!(eval(&ckpt, &unit, &["--scales", "1.0"]).status.success());
    assert_eq!(fs::read_to_string(default.join("eval.csv")).unwrap(), fs::read_to_string(unit.join("eval.csv")).unwrap());

    let multi = dir.path().join("e2");
    let o = eval(&ckpt, &multi, &["--scales", "0.5,1.0,1.75", "--scales", "0.5,0.75,1.0,1.25,1.75", "--dump-masks"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(multi.join("eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "scales,miou,iou_0,iou_1,iou_2,iou_3");
    assert!(rows[1].starts_with("0.5;1.0;1.75,") && rows[2].starts_with("0.5;0.75;1.0;1.25;1.75,"));
    assert_eq!(fs::read_dir(multi.join("masks")).unwrap().count(), 4);

    let oracle = dir.path().join("e3");
    assert!(eval(&ckpt, &oracle, &["--perfect-oracle"]).status.success());
    let csv = fs::read_to_string(oracle.join("eval.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("1.0,1.000000,"), "{csv}");
}

#[test]
fn eval_class_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--epochs", "0"]).status.success());
    let o = liconv(&["eval", "--checkpoint", p(&run.join("checkpoint")), "--synthetic", "seed=1", "classes=5", "val=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("class-count mismatch"));
    let o = liconv(&["eval", "--checkpoint", p(&dir.path().join("missing")), "--synthetic", "seed=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_features_on_zero_initialised_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--epochs", "0"]).status.success());
    let data = dir.path().join("data");
    assert!(liconv(&["gen", "--synthetic", "seed=4", "train=1", "val=0", "--out", p(&data)]).status.success());
    let image = data.join("images/train_00000.png");
    let ckpt = run.join("checkpoint");

    let out = dir.path().join("f");
    let o = liconv(&["dump-features", "--checkpoint", p(&ckpt), "--image", p(&image), "--layer", "backbone.block6.li", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("pre.lit4")).unwrap(), fs::read(out.join("post.lit4")).unwrap());
    // Block 6 expands 64 channels by 2.
    assert_eq!(fs::read_dir(out.join("pre")).unwrap().count(), 128);
    assert_eq!(fs::read_dir(out.join("post")).unwrap().count(), 128);

    let o = liconv(&["dump-features", "--checkpoint", p(&ckpt), "--image", p(&image), "--layer", "nope", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("head.branch3.li"), "{}", stderr(&o));
}

#[test]
fn verify_quick_reports_every_check() {
    let o = liconv(&["verify", "--quick"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(lines.len(), 14, "{text}");
    let failed: Vec<&&str> = lines.iter().filter(|l| l.starts_with("FAIL")).collect();
    // Step-edge contrast does not increase under this filter (see README); every other check holds.
    assert!(failed.iter().all(|l| l.starts_with("FAIL edge-contrast")), "{text}");
    assert_eq!(o.status.code(), Some(if failed.is_empty() { 0 } else { 1 }));
    if !failed.is_empty() {
        assert!(text.contains("worst: edge-contrast"));
    }
}

#[test]
fn injected_sign_bug_fails_the_golden_kernels() {
    let o = liconv(&["verify", "--quick", "--inject-kernel-sign-bug"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL li-kernel-golden"), "{}", stdout(&o));
}

#[test]
fn bench_grid_rows_match_grid_product() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = liconv(&[
        "bench", "--channels", "4", "--sizes", "9,17", "--dilations", "1,2", "--zones", "1", "--rates", "1,2", "--reps", "2",
        "--warmup", "0", "--model-size", "33", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("bench_grid.csv")).unwrap().lines().count(), 1 + 8);
    assert_eq!(fs::read_to_string(out.join("bench_model.csv")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(out.join("bench_train_step.csv")).unwrap().lines().count(), 2);
    assert_eq!(liconv(&["bench", "--reps", "0", "--grid-only", "--channels", "1"]).status.code(), Some(2));
}

#[test]
fn oracle_diff_kernel_dump_and_count() {
    let o = liconv(&["oracle-diff", "--cases", "8"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let o = liconv(&["kernel-dump", "-t", "1", "-w", "0.5"]);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].split(' ').nth(1), Some("1e0"));
    assert_eq!(liconv(&["kernel-dump", "-w", "1.5"]).status.code(), Some(2));

    let text = stdout(&liconv(&["count"]));
    assert!(text.contains("vs. baseline   +736"), "{text}");
    let csv = stdout(&liconv(&["count", "--csv", "--size", "65"]));
    assert!(csv.lines().count() > 10);
}
