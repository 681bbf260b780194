use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nestdiff");

const TRAIN: &str = "default training config:
    learning_rate=2e-3
    learning_rate_warmup_steps=2
    ema_decay=0.9
    seed=5
    diffusion_steps=50
progressive training config:
    target_resolutions=[8,16]
    batch_size=[2,2]
    training_steps=[2,2]
";

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_a.cfg")
}

fn nd(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("NESTDIFF_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = nd(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn err_class(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().unwrap_or_default();
    assert_eq!(s.trim_end().lines().count(), 1, "one stderr line expected: {s}");
    line.strip_prefix("error[")
        .and_then(|r| r.split(']').next())
        .unwrap_or_else(|| panic!("unparsable error line {line}"))
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Dataset and a finished four-step run under `root`.
fn trained(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["make-data", "--n", "16", "--seed", "3", "--out", p(&data)]);
    let cfg = root.join("train.cfg");
    fs::write(&cfg, TRAIN).unwrap();
    let out = root.join("run");
    ok(&[
        "train", "--config", p(&toy_config()), "--train-config", p(&cfg), "--data", p(&data), "--out", p(&out),
        "--log-every", "0",
    ]);
    out
}

fn manifests(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count()
}

#[test]
fn train_writes_checkpoints_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    for f in ["metrics.jsonl", "final.ckpt", "last.ckpt", "step-00000002.ckpt", "step-00000004.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(manifests(&run), 1);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["variant"], "mdm");
    assert!(m["finished_at"].as_f64().unwrap() >= m["started_at"].as_f64().unwrap());
    let lines = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn resume_with_no_remaining_steps_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    let again = tmp.path().join("again");
    ok(&[
        "train", "--config", p(&toy_config()), "--data", p(&tmp.path().join("data")), "--resume",
        p(&run.join("final.ckpt")), "--out", p(&again),
    ]);
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(again.join("final.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(again.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn resume_with_other_seed_is_a_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    let o = nd(&[
        "train", "--config", p(&toy_config()), "--data", p(&tmp.path().join("data")), "--resume",
        p(&run.join("step-00000002.ckpt")), "--seed", "6", "--out", p(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(8));
    assert_eq!(err_class(&o), "mismatch");
}

#[test]
fn sample_and_eval_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    let ck = run.join("final.ckpt");
    let a = tmp.path().join("sa");
    let b = tmp.path().join("sb");
    for d in [&a, &b] {
        ok(&["sample", "--checkpoint", p(&ck), "--n", "6", "--batch", "4", "--steps", "4", "--seed", "2", "--out", p(d)]);
    }
    for f in ["samples.png", "samples.ndt", "samples.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("samples.json")).unwrap()).unwrap();
    assert_eq!(s["level_shapes"], serde_json::json!([[6, 3, 8, 8], [6, 3, 16, 16]]));
    assert_eq!(s["model_evals_per_sample"], 4);

    let e = tmp.path().join("e");
    let out = ok(&["eval", "--samples", p(&a), "--data", p(&tmp.path().join("data")), "--out", p(&e)]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m["pixel_frechet"].as_f64().unwrap() >= 0.0);
    assert!(m["sliced_wasserstein"].as_f64().unwrap() > 0.0);
    assert_eq!(m, serde_json::from_str::<serde_json::Value>(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap());

    let v = ok(&[
        "eval", "--checkpoint", p(&ck), "--data", p(&tmp.path().join("data")), "--metrics", "validation_loss", "--out",
        p(&tmp.path().join("ev")),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&v.stdout).unwrap();
    assert!(m["validation_loss"].as_f64().unwrap().is_finite());
    assert_eq!(m["validation_per_level_loss"].as_array().unwrap().len(), 2);
}

#[test]
fn simple_nested_checkpoints_sample_only_the_finest_level() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["make-data", "--n", "8", "--out", p(&data)]);
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, TRAIN).unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train", "--config", p(&toy_config()), "--train-config", p(&cfg), "--data", p(&data), "--out", p(&run),
        "--variant", "simple-nested",
    ]);
    let s = tmp.path().join("s");
    ok(&["sample", "--checkpoint", p(&run.join("final.ckpt")), "--n", "2", "--steps", "3", "--out", p(&s)]);
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("samples.json")).unwrap()).unwrap();
    assert_eq!(j["level_shapes"], serde_json::json!([[2, 3, 16, 16]]));
    assert_eq!(j["sampling"]["objective"], "top_level");
}

#[test]
fn compare_rows_are_the_union_of_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    fs::write(&a, "{\"step\":1,\"total_loss\":1.0}\n{\"step\":2,\"total_loss\":0.5}\n{\"step\":4,\"total_loss\":0.25}\n").unwrap();
    fs::write(&b, "{\"step\":2,\"total_loss\":0.9,\"per_level_loss\":[0.1,0.8]}\n{\"step\":3,\"total_loss\":0.7}\n").unwrap();
    let out = tmp.path().join("cmp.csv");
    ok(&["compare", p(&a), p(&b), "--labels", "mdm,simple", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Oracle: |{1,2,4} ∪ {2,3}| = 4 data rows plus the header.
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(
        lines[0],
        "step,mdm:total_loss,simple:per_level_loss[0],simple:per_level_loss[1],simple:total_loss"
    );
    assert_eq!(lines[2], "2,0.5,0.1,0.8,0.9");
    assert_eq!(lines[3], "3,,,,0.7");
}

#[test]
fn inspect_schedule_prints_one_row_per_timestep() {
    let o = ok(&["inspect-schedule", "--schedule", "cosine-shift4", "--steps", "10"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,alpha,sigma,logSNR");
    assert_eq!(text.lines().count(), 1 + 11);
}

#[test]
fn failures_have_distinct_classes_and_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let usage = nd(&["train", "--no-such-flag"]);
    assert_eq!((usage.status.code(), err_class(&usage).as_str()), (Some(2), "usage"));

    let missing = nd(&["sample", "--checkpoint", p(&tmp.path().join("none.ckpt")), "--out", p(tmp.path())]);
    assert_eq!((missing.status.code(), err_class(&missing).as_str()), (Some(10), "io"));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let format = nd(&["sample", "--checkpoint", p(&bad), "--out", p(tmp.path())]);
    assert_eq!((format.status.code(), err_class(&format).as_str()), (Some(9), "format"));

    let sched = nd(&["inspect-schedule", "--schedule", "linear"]);
    assert_eq!((sched.status.code(), err_class(&sched).as_str()), (Some(3), "invalid-argument"));

    let cfg = tmp.path().join("m.cfg");
    fs::write(&cfg, "resolutions=[16,8]\nresolution_channels=oops\n").unwrap();
    let parse = nd(&["train", "--config", p(&cfg), "--train-config", p(&cfg), "--data", p(tmp.path()), "--out", p(tmp.path())]);
    assert_eq!((parse.status.code(), err_class(&parse).as_str()), (Some(4), "parse"));

    let no_out = nd(&["make-data", "--n", "4"]);
    assert_eq!(err_class(&no_out), "invalid-argument");
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["make-data", "--n", "9", "--seed", "1"])
        .env("NESTDIFF_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let dir = tmp.path().join("make-data");
    assert!(dir.join("shapes.data").is_file());
    assert_eq!(manifests(&dir), 1);
}

#[test]
fn make_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["make-data", "--n", "20", "--seed", "7", "--out", p(&a)]);
    ok(&["make-data", "--n", "20", "--seed", "7", "--out", p(&b)]);
    assert_eq!(fs::read(a.join("shapes.data")).unwrap(), fs::read(b.join("shapes.data")).unwrap());
}
