use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mechbench_core::datasets::{preset, Scale};
use mechbench_core::models::Model;
use mechbench_core::training::save_checkpoint;

fn mechbench(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechbench"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .env("MECHBENCH_WORKERS", "1")
        .output()
        .unwrap()
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechbench")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bare(&["--help"]).status.code(), Some(0));
    assert_eq!(bare(&["--version"]).status.code(), Some(0));
    assert_eq!(bare(&[]).status.code(), Some(1));
    assert_eq!(bare(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unknown_preset_is_a_usage_error_listing_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mechbench(&["generate", "mass-spring/gnn"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("mass-spring/gnn"), "{err}");
    assert!(err.contains("three-body/srnn"), "{err}");
}

#[test]
fn bad_overrides_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for set in ["no_such_key=1", "epochs=many", "epochs"] {
        let o = mechbench(&["generate", "mass-spring/hnn", "--set", set], tmp.path());
        assert_eq!(o.status.code(), Some(1), "--set {set}: {}", stderr(&o));
    }
    let o = mechbench(&["generate", "mass-spring/hnn", "--config", "/nonexistent.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_reports_the_preset_sample_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mechbench(&["generate", "mass-spring/hnn"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seed: 42"), "{text}");
    assert!(
        text.contains("1200 train samples (40 trajectories), 300 test samples (10 trajectories)"),
        "{text}"
    );
    let dir = tmp.path().join("mass-spring/hnn");
    assert!(dir.join("data").is_dir());
    assert!(dir.join("config.toml").is_file());

    let o = mechbench(&["generate", "pendulum/lnn", "--seed", "7"], tmp.path());
    assert!(stdout(&o).contains("seed: 7"));
    assert!(stdout(&o).contains("800 train samples"), "{}", stdout(&o));
}

#[test]
fn config_file_and_set_layer_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("over.toml");
    fs::write(&file, "epochs = 7\nwidth = 16\n").unwrap();
    let o = mechbench(
        &[
            "presets",
            "dump",
            "mass-spring/hnn",
            "--format",
            "json",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "width=8",
            "--seed",
            "3",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["epochs"], 7);
    assert_eq!(v["width"], 8);
    assert_eq!(v["seed"], 3);
}

#[test]
fn presets_list_and_dump() {
    let o = bare(&["presets", "list"]);
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(names.len(), 18);
    assert!(names.contains(&"bouncing-ball/lnn".to_string()));

    let o = bare(&["presets", "dump", "double-pendulum/srnn"]);
    let text = stdout(&o);
    assert!(text.contains("epochs = 200"), "{text}");
    assert!(text.contains("batch_size = 64"), "{text}");
    let o = bare(&["presets", "dump", "double-pendulum/srnn", "--scale", "desk"]);
    assert!(stdout(&o).contains("preset = \"double-pendulum/srnn@desk\""));
}

const QUICK: [&str; 6] = ["--scale", "desk", "--set", "epochs=3", "--set", "width=16"];

fn args<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(QUICK).collect()
}

#[test]
fn generate_train_evaluate_writes_the_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["generate", "train", "evaluate"] {
        let o = mechbench(&args(&[cmd, "mass-spring/hnn"]), tmp.path());
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let dir = tmp.path().join("mass-spring/hnn");
    let losses = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("epoch,mean_loss"));
    assert_eq!(losses.lines().count(), 4);

    let m = json(&dir.join("metrics.json"));
    for key in ["mse", "mae", "rmse", "std", "var"] {
        assert!(m[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(m["n_failed"], 0);
    let ev = json(&dir.join("evaluation.json"));
    let trajs = ev["trajectories"].as_array().unwrap();
    assert_eq!(trajs.len(), m["n_trajectories"].as_u64().unwrap() as usize);
    let first = dir.join(trajs[0]["file"].as_str().unwrap());
    let header = fs::read_to_string(first).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "t,true_q,true_p,pred_q,pred_p");
    assert_eq!(ev["components"].as_array().unwrap().len(), 2);
}

#[test]
fn training_twice_gives_the_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let digest = |o: &Output| {
        let text = stdout(o);
        text.lines().find_map(|l| l.split("sha256 ").nth(1)).map(str::to_string).expect("digest line")
    };
    mechbench(&args(&["generate", "pendulum/srnn"]), tmp.path());
    let a = mechbench(&args(&["train", "pendulum/srnn"]), tmp.path());
    let first = fs::read(tmp.path().join("pendulum/srnn/checkpoint.json")).unwrap();
    let b = mechbench(&args(&["train", "pendulum/srnn"]), tmp.path());
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(first, fs::read(tmp.path().join("pendulum/srnn/checkpoint.json")).unwrap());
    let c = mechbench(&args(&["train", "pendulum/srnn", "--seed", "5"]), tmp.path());
    assert_eq!(c.status.code(), Some(2), "data were generated with seed 42: {}", stderr(&c));
}

#[test]
fn evaluating_without_a_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    mechbench(&args(&["generate", "mass-spring/hnn"]), tmp.path());
    let o = mechbench(&args(&["evaluate", "mass-spring/hnn"]), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mechbench(&args(&["train", "pendulum/hnn"]), tmp.path());
    assert_eq!(o.status.code(), Some(2), "no data generated yet");
}

#[test]
fn an_exact_checkpoint_scores_near_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("pendulum/hnn", Scale::Paper).unwrap();
    let ck = tmp.path().join("exact.json");
    save_checkpoint(&Model::exact(&cfg).unwrap(), &cfg, cfg.seed, 0, &ck).unwrap();
    mechbench(&["generate", "pendulum/hnn"], tmp.path());
    let o = mechbench(&["evaluate", "pendulum/hnn", "--checkpoint", ck.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = json(&tmp.path().join("pendulum/hnn/metrics.json"));
    assert!(m["mse"].as_f64().unwrap() < 1e-4, "{m}");

    // a checkpoint of another model is refused
    let o = mechbench(&["evaluate", "pendulum/lnn", "--checkpoint", ck.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_filters_and_tabulates() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mechbench(&["benchmark", "--system", "tops"], tmp.path());
    assert_eq!(o.status.code(), Some(1));

    let o = mechbench(&args(&["benchmark", "--system", "mass-spring", "--model", "srnn"]), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "system,model,mse,mae,rmse,std,var,n_points,n_failed,status");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("mass-spring,srnn,") && lines[1].ends_with(",ok"), "{}", lines[1]);
    let table = fs::read_to_string(tmp.path().join("summary.txt")).unwrap();
    assert!(stdout(&o).contains(&table));
    assert!(table.starts_with("mass-spring\n"));
    assert!(table.lines().any(|l| l.starts_with("SRNN")));
}
