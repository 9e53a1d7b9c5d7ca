use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
scenario = \"cil\"
num_classes = 6
num_updates = 3
train_per_class = 12
test_per_class = 6
epochs = 2
rank = 2
clusters = 2
repeats = 1
pool_classes = 6
pool_train_per_class = 30
pool_test_per_class = 10
";

fn color(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_color"))
        .args(args)
        .env("COLOR_OUTPUT_ROOT", root.join("out"))
        .current_dir(root)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn pretrain_run_report_and_inspect() {
    let dir = workspace();
    let root = dir.path();

    let o = color(root, &["pretrain", "--config", "tiny.toml"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(root.join("out/backbone.ckpt").is_file());

    let o = color(root, &["run", "--config", "tiny.toml", "--backbone", "out/backbone.ckpt", "--method", "oracle"]);
    assert!(o.status.success(), "{}", text(&o));
    let run = root.join("out/oracle-cil-r2-k2-s0");
    let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert!(csv.starts_with("run_id,method,scenario,"), "{csv}");
    assert!(run.join("record.json").is_file());

    let o = color(root, &["inspect-checkpoint", run.join("repeat0.ckpt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("backbone.cls_token"), "{}", text(&o));

    let o = color(root, &["report"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("38,402"), "{}", text(&o));
    assert!(root.join("out/report/summary.csv").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace();
    let root = dir.path();
    let o = color(root, &["pretrain", "--config", "tiny.toml", "--out", "bb.ckpt"]);
    assert!(o.status.success(), "{}", text(&o));
    let o = color(
        root,
        &[
            "sweep", "--config", "tiny.toml", "--backbone", "bb.ckpt", "--output-dir", "elsewhere", "--rank", "1",
            "--set", "epochs=1", "--axis", "clusters", "--values", "1,2",
        ],
    );
    assert!(o.status.success(), "{}", text(&o));
    let sweep = std::fs::read_dir(root.join("elsewhere"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .find(|n| n.starts_with("sweep-"))
        .expect("sweep directory");
    let csv = std::fs::read_to_string(root.join("elsewhere").join(sweep).join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(text(&o).contains("color-cil-r1-k1-s0"), "{}", text(&o));
    assert!(!root.join("out").exists());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = workspace();
    let root = dir.path();

    let o = color(root, &["run", "--config", "tiny.toml", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = color(root, &["run", "--config", "tiny.toml", "--set", "rank"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = color(root, &["sweep", "--config", "tiny.toml", "--axis", "rank", "--values", "4,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = color(root, &["run", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));

    std::fs::create_dir_all(root.join("empty")).unwrap();
    let o = color(root, &["report", "--root", "empty"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));

    let o = color(
        root,
        &["pretrain", "--config", "tiny.toml", "--set", "pretrain_epochs=1", "--set", "pretrain_lr=1e-7"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));

    let o = color(root, &["run", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(5), "{}", text(&o));
    std::fs::write(root.join("junk.ckpt"), b"CLRCKPT").unwrap();
    let o = color(root, &["inspect-checkpoint", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(5), "{}", text(&o));
    assert!(text(&o).contains("byte 0"), "{}", text(&o));
}
