use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unshuffle::cli::ExperimentConfig;

const GEN: &str = r#"
[data]
kind = "spurious"
seed = 3

[data.spec]
d_stable = 2
d_spur = 2
mu_stable = 1.0
mu_spur = 1.0
sigma = 1.0
env_agreement = [0.9, 0.8]
test_agreement = 0.1
n_per_env = 200
n_val = 100
n_test = 200
"#;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unshuffle"))
        .args(args)
        .envs(envs.iter().copied())
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_run_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("run.toml");
    fs::write(
        &path,
        format!(
            "[data]\nkind = \"manifest\"\ndir = {:?}\n\n[train]\nmax_epochs = 5\n\n[output]\ndir = {:?}\n{extra}",
            s(&root.join("gen")),
            s(&root.join("out"))
        ),
    )
    .unwrap();
    path
}

fn generate(root: &Path) {
    fs::write(root.join("gen.toml"), GEN).unwrap();
    let out = run(&["gen", "--config", s(&root.join("gen.toml")), "--out", s(&root.join("gen"))], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_writes_manifest_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    for f in ["train_env0.jsonl", "train_env1.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "config.toml"] {
        assert!(tmp.path().join("gen").join(f).exists(), "{f}");
    }
    let (config, dir) = (tmp.path().join("gen.toml"), tmp.path().join("gen"));
    let args = ["gen", "--config", s(&config), "--out", s(&dir)];
    let again = run(&args, &[]);
    assert_eq!(again.status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(run(&forced, &[]).status.success());
}

#[test]
fn config_echo_reloads_equal() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let cfg = write_run_config(tmp.path(), "\n[partition]\nstrategy = \"random\"\nenvs = 2\n");
    let out = run(&["train", "--config", s(&cfg)], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("val accuracy") && stdout.contains("ood accuracy"), "{stdout}");
    for f in ["model.json", "report.json", "trace.csv", "config.toml"] {
        assert!(tmp.path().join("out").join(f).exists(), "{f}");
    }
    let original = ExperimentConfig::load(&cfg).unwrap();
    let echo = ExperimentConfig::load(tmp.path().join("out/config.toml")).unwrap();
    assert_eq!(original, echo);
    let gen_echo = ExperimentConfig::load(tmp.path().join("gen/config.toml")).unwrap();
    assert_eq!(gen_echo, ExperimentConfig::load(tmp.path().join("gen.toml")).unwrap());
}

#[test]
fn unknown_key_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlamda = 2.0\n").unwrap();
    let out = run(&["train", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn missing_partition_file_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let cfg = write_run_config(tmp.path(), "\n[partition]\nstrategy = \"file\"\npath = \"/no/such/partition.json\"\n");
    let out = run(&["train", "--config", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_arguments_exit_with_usage_code() {
    assert_eq!(run(&["train"], &[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(2));
}

#[test]
fn partition_writes_summary_and_rejects_forms() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let cfg = write_run_config(tmp.path(), "\n[partition]\nstrategy = \"random\"\nenvs = 3\n");
    let input = tmp.path().join("gen/train_env0.jsonl");
    let out = run(&["partition", "--config", s(&cfg), "--in", s(&input), "--out", s(&tmp.path().join("part"))], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("part/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["num_envs"], 3);
    assert_eq!(summary["env_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 200);

    let cfg = write_run_config(tmp.path(), "\n[partition]\nstrategy = \"forms\"\nenvs = 2\n");
    let out = run(&["partition", "--config", s(&cfg), "--in", s(&input), "--out", s(&tmp.path().join("p2"))], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_scores_each_model_or_the_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let cfg = write_run_config(tmp.path(), "");
    assert!(run(&["train", "--config", s(&cfg)], &[]).status.success());
    let model = tmp.path().join("out/model.json");
    let test = tmp.path().join("gen/test.jsonl");
    let per_model = run(&["eval", "--model", s(&model), "--model", s(&model), "--data", s(&test)], &[]);
    let v: serde_json::Value = serde_json::from_slice(&per_model.stdout).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    let ens = run(&["eval", "--model", s(&model), "--model", s(&model), "--data", s(&test), "--ensemble"], &[]);
    let e: serde_json::Value = serde_json::from_slice(&ens.stdout).unwrap();
    assert_eq!(e["results"].as_array().unwrap().len(), 1);
    assert_eq!(e["results"][0][0]["accuracy"], v["results"][0][0]["accuracy"]);
}

#[test]
fn sweep_rows_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    let cfg = write_run_config(
        tmp.path(),
        "\n[partition]\nstrategy = \"dataset_id\"\n\n[eval.sweep]\naxis = \"lambda\"\ngrid = [0.1, 1.0, 10.0]\nrepeats = 2\n",
    );
    let one = run(&["sweep", "--config", s(&cfg)], &[("UNSHUFFLE_THREADS", "1")]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let csv_one = fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv_one.lines().collect();
    assert_eq!(lines[0], "axis_value,mean_val_acc,std_val_acc,mean_ood_acc,std_ood_acc,mean_final_variance");
    assert_eq!(lines.len(), 4);
    let many = run(&["sweep", "--config", s(&cfg), "--force"], &[("UNSHUFFLE_THREADS", "4")]);
    assert!(many.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("out/sweep.csv")).unwrap(), csv_one);

    let bad = run(&["sweep", "--config", s(&cfg), "--force"], &[("UNSHUFFLE_THREADS", "0")]);
    assert_eq!(bad.status.code(), Some(2));
}
