use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn egt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn subdir(root: &Path, name: &str) -> PathBuf {
    let d = root.join(name);
    std::fs::create_dir(&d).unwrap();
    d
}

/// Two tiny 8x8 domains in `<root>/data`.
fn tiny_data(root: &Path) -> PathBuf {
    let d = subdir(root, "data");
    let o = egt(&[
        "gen-data", "--out", s(&d), "--classes", "6", "--images-per-class", "12", "--size", "8", "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    d
}

const TINY_TRAIN: [&str; 14] = [
    "--epochs", "2", "--episodes-per-epoch", "3", "--channels", "4,4", "--way", "3", "--shot", "2", "--queries", "6",
    "--seed", "5",
];

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let d0 = data.join("d0.egtd");
    let mut args = vec!["train", "--data", s(&d0), "--out", s(out)];
    args.extend_from_slice(&TINY_TRAIN);
    args.extend_from_slice(extra);
    egt(&args)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic_and_echoes_its_config() {
    let root = tempfile::tempdir().unwrap();
    let a = subdir(root.path(), "a");
    let b = subdir(root.path(), "b");
    for d in [&a, &b] {
        let o = egt(&["gen-data", "--out", s(d), "--domains", "2", "--classes", "20", "--seed", "7", "--size", "8"]);
        assert_eq!(code(&o), 0);
    }
    for f in ["d0.egtd", "d1.egtd"] {
        assert!(read(&a.join(f)).starts_with(b"EGTD\n"));
        assert_eq!(read(&a.join(f)), read(&b.join(f)));
    }
    let echo: serde_json::Value = serde_json::from_slice(&read(&a.join("config.json"))).unwrap();
    assert_eq!(echo["command"], "gen-data");
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["classes"], 20);

    // replaying the echo reproduces the files
    std::fs::remove_file(a.join("d1.egtd")).unwrap();
    let o = egt(&["replay", s(&a.join("config.json"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(&a.join("d1.egtd")), read(&b.join("d1.egtd")));
}

#[test]
fn missing_output_directory_fails_without_partial_files() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope");
    let o = egt(&["gen-data", "--out", s(&missing), "--size", "8"]);
    assert_eq!(code(&o), 2);
    assert!(!missing.exists());
    assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(code(&egt(&["frobnicate"])), 1);
    assert_eq!(code(&egt(&["gen-data", "--bogus"])), 1);
    assert_eq!(code(&egt(&["train", "--out", s(root.path())])), 1);
    let o = egt(&["eval", "--model", "m", "--data", "d", "--out", s(root.path()), "--candidates", "4,8"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&egt(&["train", "--data", "x", "--out", s(root.path()), "--mode", "fancy"])), 1);
    assert_eq!(code(&egt(&["--help"])), 0);
}

#[test]
fn train_writes_artifacts_and_baseline_matches_zero_lambda() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let base = subdir(root.path(), "base");
    let zero = subdir(root.path(), "zero");
    let egt_dir = subdir(root.path(), "egt");
    assert_eq!(code(&tiny_train(&data, &base, &["--mode", "baseline"])), 0);
    assert_eq!(code(&tiny_train(&data, &zero, &["--mode", "egt", "--lambda", "0"])), 0);
    assert_eq!(code(&tiny_train(&data, &egt_dir, &["--mode", "egt"])), 0);
    assert_eq!(read(&base.join("model.egt1")), read(&zero.join("model.egt1")));
    assert_eq!(read(&base.join("train_log.csv")), read(&zero.join("train_log.csv")));
    assert_ne!(read(&base.join("model.egt1")), read(&egt_dir.join("model.egt1")));

    let log = String::from_utf8(read(&egt_dir.join("train_log.csv"))).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,loss_plain,loss_lrp,loss_total,acc"));
    assert_eq!(log.lines().count(), 3);

    // baseline mode refuses an explanation weight
    let bad = subdir(root.path(), "bad");
    assert_eq!(code(&tiny_train(&data, &bad, &["--mode", "baseline", "--lambda", "0.5"])), 1);
    assert!(!bad.join("config.json").exists());
}

#[test]
fn egt_defaults_follow_the_head() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let rel = subdir(root.path(), "rel");
    let o = tiny_train(&data, &rel, &["--mode", "egt", "--head", "relation", "--shot", "1", "-v"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("xi 1 lambda 0.5"));
    let cos = subdir(root.path(), "cos");
    let o = tiny_train(&data, &cos, &["--mode", "egt", "-v"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("xi 0 lambda 1"));
}

#[test]
fn replaying_a_training_echo_is_bit_exact() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let out = subdir(root.path(), "run");
    assert_eq!(code(&tiny_train(&data, &out, &["--mode", "egt"])), 0);
    let first = read(&out.join("model.egt1"));
    let echo = read(&out.join("config.json"));
    std::fs::remove_file(out.join("model.egt1")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_egt"))
        .args(["replay", "config.json", "--workers", "2"])
        .current_dir(&out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&out.join("model.egt1")), first);
    assert_eq!(read(&out.join("config.json")), echo);
}

#[test]
fn eval_reports_per_dataset_and_flags_single_episodes() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let run = subdir(root.path(), "run");
    assert_eq!(code(&tiny_train(&data, &run, &[])), 0);
    let model = run.join("model.egt1");
    let ev = subdir(root.path(), "eval");
    let o = egt(&[
        "eval", "--model", s(&model), "--data", s(&data.join("d0.egtd")), s(&data.join("d1.egtd")),
        "--out", s(&ev), "--way", "3", "--shot", "2", "--queries", "6", "--episodes", "1",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("CI undefined"));
    for name in ["d0", "d1"] {
        let csv = String::from_utf8(read(&ev.join(format!("eval_{name}.csv")))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("episodes,mean_acc,ci95"));
        assert!(lines.next().unwrap().starts_with("1,"));
    }

    // defaults: 2000 episodes of 16 queries
    let full = subdir(root.path(), "full");
    let o = egt(&[
        "eval", "--model", s(&model), "--data", s(&data.join("d1.egtd")), "--out", s(&full), "--way", "3",
        "--shot", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo: serde_json::Value = serde_json::from_slice(&read(&full.join("config.json"))).unwrap();
    assert_eq!((echo["episodes"].as_u64(), echo["queries"].as_u64()), (Some(2000), Some(16)));
    assert_eq!(echo["transductive"], false);
    let csv = String::from_utf8(read(&full.join("eval_d1.csv"))).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("2000,"));

    let tr = subdir(root.path(), "trans");
    let o = egt(&[
        "eval", "--model", s(&model), "--data", s(&data.join("d1.egtd")), "--out", s(&tr), "--way", "3",
        "--shot", "2", "--episodes", "20", "--transductive", "--candidates", "2,4", "--workers", "1",
    ]);
    assert_eq!(code(&o), 0);
    let echo: serde_json::Value = serde_json::from_slice(&read(&tr.join("config.json"))).unwrap();
    assert_eq!(echo["candidates"], serde_json::json!([2, 4]));
    let o = egt(&[
        "eval", "--model", s(&model), "--data", s(&data.join("d1.egtd")), "--out", s(&tr), "--transductive",
        "--candidates", "8,4",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn explain_writes_one_or_all_targets_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let run = subdir(root.path(), "run");
    assert_eq!(code(&tiny_train(&data, &run, &[])), 0);
    let model = run.join("model.egt1");
    let d1 = data.join("d1.egtd");
    let explain = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "explain", "--model", s(&model), "--data", s(&d1), "--out", s(out), "--way", "3",
            "--shot", "2", "--queries", "6", "--seed", "4", "--query", "2",
        ];
        args.extend_from_slice(extra);
        egt(&args)
    };
    let all = subdir(root.path(), "all");
    let again = subdir(root.path(), "again");
    assert_eq!(code(&explain(&all, &[])), 0);
    assert_eq!(code(&explain(&again, &[])), 0);
    for k in 0..3 {
        let ppm = read(&all.join(format!("heatmap_q2_class{k}.ppm")));
        assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(ppm, read(&again.join(format!("heatmap_q2_class{k}.ppm"))));
        let raw: serde_json::Value = serde_json::from_slice(&read(&all.join(format!("relevance_q2_class{k}.json")))).unwrap();
        assert_eq!(raw["shape"], serde_json::json!([3, 8, 8]));
        assert_eq!(raw["data"].as_array().unwrap().len(), 192);
    }

    let one = subdir(root.path(), "one");
    let o = explain(&one, &["--target", "predicted", "--overlay", "0.5"]);
    assert_eq!(code(&o), 0);
    let heatmaps = std::fs::read_dir(&one)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".ppm"))
        .count();
    assert_eq!(heatmaps, 1);

    let bad = subdir(root.path(), "bad");
    assert_eq!(code(&explain(&bad, &["--target", "sideways"])), 1);
    assert_eq!(code(&explain(&bad, &["--target", "7"])), 1);
    let mut args = vec!["explain", "--model", s(&model), "--data", s(&d1), "--out", s(&bad)];
    args.extend_from_slice(&["--way", "3", "--shot", "2", "--queries", "6", "--query", "6"]);
    assert_eq!(code(&egt(&args)), 1);
}

#[test]
fn stats_write_per_image_rows_and_reject_bad_inputs() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let run = subdir(root.path(), "run");
    assert_eq!(code(&tiny_train(&data, &run, &[])), 0);
    let model = run.join("model.egt1");
    let st = subdir(root.path(), "stats");
    let o = egt(&["stats", "--model", s(&model), "--data", s(&data.join("d1.egtd")), "--out", s(&st)]);
    assert_eq!(code(&o), 0);
    let per = String::from_utf8(read(&st.join("stats_d1.csv"))).unwrap();
    assert_eq!(per.lines().next(), Some("image,label,s2,qdiff"));
    assert_eq!(per.lines().count(), 1 + 6 * 12);
    let summary = String::from_utf8(read(&st.join("stats_d1_summary.csv"))).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "statistic,mean,std");
    assert!(rows[1].starts_with("s2,") && rows[2].starts_with("qdiff,"));

    let empty = root.path().join("empty.egtd");
    std::fs::write(&empty, b"EGTD\nclasses=0 counts= shape=3,8,8 domain=x\n").unwrap();
    let o = egt(&["stats", "--model", s(&model), "--data", s(&empty), "--out", s(&st)]);
    assert_eq!(code(&o), 2);

    let broken = root.path().join("broken.egt1");
    std::fs::write(&broken, b"EGT1\ngarbage").unwrap();
    let o = egt(&["stats", "--model", s(&broken), "--data", s(&data.join("d1.egtd")), "--out", s(&st)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(root.path());
    let out = subdir(root.path(), "run");
    let o = tiny_train(&data, &out, &["--lr", "1e300", "--momentum", "0"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
