use std::path::Path;
use std::process::Command;

use asg_core::harness::{read_action_trace, run_experiment, RunConfig};

fn tiny_config(dir: &Path, strategy: &str, lambda: f32) -> String {
    format!(
        r#"
[experiment]
name = "tiny"
seeds = [0]
strategy = "{strategy}"
out_dir = "{out}"

[data]
train_count = 12
val_count = 8

[pretrain]
train_count = 32
val_count = 8
max_epochs = 1
target_accuracy = 0.0

[optim]
epochs = 2
batch_size = 4
eta_base = 0.01

[loss]
lambda = {lambda}
"#,
        out = dir.join("out").display()
    )
}

fn config(dir: &Path, strategy: &str, lambda: f32) -> RunConfig {
    RunConfig::parse(&tiny_config(dir, strategy, lambda), dir).unwrap()
}

/// Data rows of a schema-prefixed CSV, split into fields.
fn rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn run_writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small_backbone_large_head", 0.1);
    let outs = run_experiment(&cfg).unwrap();
    let seed_dir = cfg.seed_dir(0);
    for f in ["steps.csv", "epochs.csv", "actions.csv", "checkpoint.asg1", "summary.txt"] {
        assert!(seed_dir.join(f).is_file(), "missing {f}");
    }
    assert!(cfg.out_dir.join("summary.txt").is_file());

    let (header, steps) = rows(&seed_dir.join("steps.csv"));
    assert_eq!(&header[..4], ["step", "epoch", "batch", "loss_total"]);
    assert_eq!(steps.len(), outs[0].total_steps);
    assert_eq!(steps.len(), 2 * 3);
    let (_, epochs) = rows(&seed_dir.join("epochs.csv"));
    assert_eq!(epochs.len(), 2);

    let trace = read_action_trace(&seed_dir.join("actions.csv")).unwrap();
    assert_eq!(trace.coordinates.len(), 5);
    assert_eq!(trace.steps(), 6);
    assert!(trace.scales[0].iter().all(|&s| (s - 0.1).abs() < 1e-6));

    let summary = std::fs::read_to_string(seed_dir.join("summary.txt")).unwrap();
    for key in ["final_target_accuracy", "best_target_accuracy", "final_retention", "total_steps = 6"] {
        assert!(summary.contains(key), "summary lacks {key}");
    }
}

#[test]
fn head_only_keeps_retention_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "head_only", 0.1);
    let outs = run_experiment(&cfg).unwrap();
    let ret: Vec<f64> = outs[0].record.epochs.iter().map(|e| e.retention).collect();
    assert!(ret.iter().all(|&r| r == outs[0].reference_accuracy), "{ret:?}");
}

#[test]
fn zero_lambda_total_equals_xe_in_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "all_large", 0.0);
    run_experiment(&cfg).unwrap();
    let (header, steps) = rows(&cfg.seed_dir(0).join("steps.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (t, x, k) = (col("loss_total"), col("loss_xe"), col("loss_kl"));
    for r in &steps {
        assert_eq!(r[t], r[x]);
        // the divergence is still logged
        assert!(r[k].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "random_policy", 0.1);
    let mut b = a.clone();
    b.out_dir = dir.path().join("again");
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    for f in ["steps.csv", "actions.csv", "checkpoint.asg1"] {
        let x = std::fs::read(a.seed_dir(0).join(f)).unwrap();
        let y = std::fs::read(b.seed_dir(0).join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn trained_policy_can_be_applied_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(dir.path(), "l2o_train", 0.1) + "\n[l2o]\npolicy_epochs = 2\nunroll = 2\n";
    let train = RunConfig::parse(&text, dir.path()).unwrap();
    let outs = run_experiment(&train).unwrap();
    let policy = train.seed_dir(0).join("policy.asg1");
    assert!(policy.is_file());
    let (_, logs) = rows(&train.seed_dir(0).join("policy_epochs.csv"));
    assert_eq!(logs.len(), 2);
    assert_eq!(outs[0].policy.as_ref().unwrap().1[0].updates, 3);

    let apply = text
        .replace("l2o_train", "l2o_apply")
        .replace("[l2o]\n", &format!("[l2o]\npolicy_file = \"{}\"\n", policy.display()))
        .replace(
            &format!("out_dir = \"{}\"", dir.path().join("out").display()),
            &format!("out_dir = \"{}\"", dir.path().join("applied").display()),
        );
    let cfg = RunConfig::parse(&apply, dir.path()).unwrap();
    let applied = run_experiment(&cfg).unwrap();
    // greedy application of the same policy reproduces the post-training run
    assert_eq!(applied[0].record.losses, outs[0].record.losses);
}

fn asg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asg")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(asg(&["--help"]).status.code(), Some(0));
    assert_eq!(asg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(asg(&["--config", "/nonexistent.toml", "run"]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nname = \"x\"\nseeds = []\nstrategy = \"head_only\"\n").unwrap();
    let out = asg(&["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let trace = dir.path().join("actions.csv");
    std::fs::write(&trace, "step,coord_name,action_index,scale\n0,a,10,1\n0,b,x,0\n").unwrap();
    let out = asg(&["plot-actions", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn cli_plots_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("actions.csv");
    let mut text = String::from("# asg actions v1\nstep,coord_name,action_index,scale\n");
    for t in 0..20 {
        text += &format!("{t},conv1,{},{}\n{t},new_head,10,1\n", t % 11, (t % 11) as f32 / 10.0);
    }
    std::fs::write(&trace, text).unwrap();
    let out = asg(&["plot-actions", trace.to_str().unwrap(), "--window", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = std::fs::read_to_string(dir.path().join("actions.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    // a window longer than the trace collapses to one point per panel
    let out = asg(&["plot-actions", trace.to_str().unwrap(), "--window", "500"]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(dir.path().join("actions.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 2);
}

#[test]
fn cli_runs_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, tiny_config(dir.path(), "head_only", 0.1)).unwrap();
    let out = asg(&["--config", path.to_str().unwrap(), "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 0: final target"));
    assert!(dir.path().join("out/seed_0/steps.csv").is_file());
}

#[test]
fn shipped_configs_parse() {
    // l2o_apply.toml points at the policy l2o_train.toml writes
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("configs");
    let policy = tmp.path().join("runs/l2o_train/seed_100");
    std::fs::create_dir_all(&base).unwrap();
    std::fs::create_dir_all(&policy).unwrap();
    std::fs::write(policy.join("policy.asg1"), b"").unwrap();

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            let cfg = RunConfig::parse(&text, &base).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(!cfg.seeds.is_empty());
            n += 1;
        }
    }
    assert_eq!(n, 7);
}
