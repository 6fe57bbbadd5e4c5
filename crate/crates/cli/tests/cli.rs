use std::path::Path;
use std::process::{Command, Output};

fn blxs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blxs"))
        .args(args)
        .output()
        .expect("spawn blxs")
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not json: {line} ({e})"))
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "seeds = [0, 1]\nswag_epochs = 3\ncov_rank = 2\nsamples = 3\n\
         [dataset]\nn_source = 200\nn_target_train = 40\nn_val = 100\n\
         [pretrain]\nmax_epochs = 5\n[train]\nburn_in_epochs = 2\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn failures_emit_machine_readable_line() {
    let o = blxs(&["run", "--subsample", "0"]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"]["kind"], "config");

    let o = blxs(&["run", "--method", "dropout"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");

    let o = blxs(&["report", "--input", "/nonexistent/records.csv"]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"]["kind"], "io");
}

#[test]
fn count_table_text() {
    let o = blxs(&["count"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.contains("73728") && text.contains("74k"));
}

#[test]
fn selftest_passes() {
    let o = blxs(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8(o.stdout).unwrap().contains("FAIL"));
}

#[test]
fn run_report_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = blxs(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--save-checkpoints",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "records.csv",
        "records.json",
        "aggregate.csv",
        "aggregate.json",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_dir(out.join("reliability")).unwrap().count(),
        2
    );
    let ck = out.join("checkpoints");
    for f in ["backbone.ckpt", "adapters-s0.ckpt", "posterior-s1.ckpt"] {
        assert!(ck.join(f).exists(), "{f}");
    }
    let header =
        std::fs::read_to_string(out.join("reliability/b-lora-xs_r8_k2_f1_s0.csv")).unwrap();
    assert!(header.starts_with("bin_lo,bin_hi,count,mean_conf,acc\n"));

    // The resolved config reproduces the run.
    let again = dir.path().join("again");
    let o = blxs(&[
        "run",
        "--config",
        out.join("config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--no-timing",
    ]);
    assert!(o.status.success());
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect()
    };
    assert_eq!(
        strip(&out.join("records.csv")),
        strip(&again.join("records.csv"))
    );

    let rep = dir.path().join("rep");
    let o = blxs(&[
        "report",
        "--input",
        out.join("records.csv").to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(rep.join("aggregate.csv")).unwrap(),
        std::fs::read_to_string(out.join("aggregate.csv")).unwrap()
    );
}

#[test]
fn sweep_writes_figure_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let o = blxs(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "cov-rank",
        "--values",
        "0,2",
        "--out",
        out.to_str().unwrap(),
        "--no-timing",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fig = std::fs::read_to_string(out.join("figure_cov-rank.csv")).unwrap();
    assert_eq!(fig.lines().count(), 3);
    assert!(fig.lines().nth(1).unwrap().starts_with("0,b-lora-xs,"));
    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2 * 2);
}

#[test]
fn pretrain_saves_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("pre");
    let o = blxs(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["source_train_accuracy"].as_f64().unwrap() > 0.5);
    assert_eq!(
        &std::fs::read(out.join("backbone.ckpt")).unwrap()[..5],
        b"BLXS1"
    );
}

#[test]
fn count_only_run_records_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("count");
    let o = blxs(&[
        "run",
        "--preset",
        "roberta-large-count-only",
        "--method",
        "swag-lora",
        "--rank",
        "8",
        "--cov-rank",
        "5",
        "--seeds",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(rec
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("roberta-large,swag-lora,8,5,0,1,5505024,"));
}
