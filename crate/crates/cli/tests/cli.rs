use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const CONFIG: &str = r#"
seed = 5

[model]
family = "resnet_cifar"
height = 8
width = 8
channels = 3
stem_width = 4
widths = [4, 8]
blocks_per_stage = [3, 2]
classes = 10

[data]
kind = "synthetic_textures"
train_samples = 128
test_samples = 64
height = 8
width = 8
seed = 1

[train]
epochs = 1
batch_size = 32

[finetune]
epochs = 1
batch_size = 32

[pruning]
probes = 32

[evaluation]
latency_repeats = 10
latency_batch = 8
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&cprune(&[])), 2);
    assert_eq!(code(&cprune(&["train"])), 2);
    assert_eq!(code(&cprune(&["frobnicate"])), 2);
    let out = cprune(&["train", "--config", "/nonexistent/config.toml", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn invalid_config_and_missing_data_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("epochs = 1\nbatch_size = 32\n\n[finetune]", "epochs = -1\n\n[finetune]"));
    let out_dir = tmp.path().join("run");
    let out = out_dir.to_str().unwrap();
    assert_eq!(code(&cprune(&["train", "--config", &cfg, "--out", out])), 2);

    let text = CONFIG.replace(
        "kind = \"synthetic_textures\"\ntrain_samples = 128\ntest_samples = 64\nheight = 8\nwidth = 8\nseed = 1",
        "kind = \"image_array\"\ntrain = \"/nonexistent/train.bin\"\ntest = \"/nonexistent/test.bin\"",
    );
    let cfg = write_config(tmp.path(), &text);
    let res = cprune(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("not found"));

    let cfg = write_config(tmp.path(), CONFIG);
    assert_eq!(code(&cprune(&["train", "--config", &cfg])), 2, "no --out and no `out` key");
}

#[test]
fn corrupt_campaign_state_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("campaign.json"), "[]").unwrap();
    assert_eq!(code(&cprune(&["report", "--out", tmp.path().to_str().unwrap()])), 3);
}

#[test]
fn train_prune_report_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let run = tmp.path().join("run");
    let out = cprune(&["train", "--config", &cfg, "--seed", "9", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 9"));
    let base = run.join("baseline");
    assert!(base.join("metrics.json").exists());

    let prune_dir = tmp.path().join("prune");
    let args = [
        "prune",
        "--config",
        &cfg,
        "--checkpoint",
        base.to_str().unwrap(),
        "--out",
        prune_dir.to_str().unwrap(),
    ];
    let out = cprune(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 removals"));
    assert!(prune_dir.join("iterations/001/audit.json").exists());
    assert!(prune_dir.join("tradeoff.svg").exists());
    // Rerunning without --resume refuses to clobber the campaign.
    assert_eq!(code(&cprune(&args)), 2);
    let mut resume = args.to_vec();
    resume.push("--resume");
    assert_eq!(code(&cprune(&resume)), 0);

    let csv_before = fs::read_to_string(prune_dir.join("report.csv")).unwrap();
    fs::remove_file(prune_dir.join("report.csv")).unwrap();
    assert_eq!(code(&cprune(&["report", "--out", prune_dir.to_str().unwrap()])), 0);
    assert_eq!(fs::read_to_string(prune_dir.join("report.csv")).unwrap(), csv_before);
    let rows: Vec<&str> = csv_before.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].split(',').nth(1).unwrap().starts_with("s1b"));

    let eval_dir = tmp.path().join("eval");
    let out = cprune(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        prune_dir.join("iterations/001/checkpoint").to_str().unwrap(),
        "--baseline",
        base.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.starts_with("attack,accuracy,delta_pp"));
    assert_eq!(csv.lines().count(), 9);
}
