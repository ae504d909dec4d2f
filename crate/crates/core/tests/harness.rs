use dvnc::harness::checkpoint::Checkpoint;
use dvnc::harness::train::{evaluate_checkpoint, init_params, METRICS_HEADER};
use dvnc::harness::{evaluate, train, TaskSpec, TrainConfig};
use dvnc::tasks::AddingSpec;
use std::path::Path;
use std::process::Command;

fn config(dir: &Path, steps: usize, mode: &str) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{"task": {{"kind": "adding", "length": 8, "batch": 8, "seed": 5}},
            "model": {{"M": 3, "K": 2, "hidden": 6, "L": 8, "G": 2, "discretize": "{mode}", "key_dim": 4, "input_value_dim": 3}},
            "adam": {{"lr": 0.01}}, "epochs": 1, "batches_per_epoch": {steps}, "seed": 11, "checkpoint_every": 2,
            "output_dir": {dir:?},
            "eval": [{{"name": "train", "task": {{"kind": "adding", "length": 8, "batch": 8, "seed": 5}}}},
                     {{"name": "long", "task": {{"kind": "adding", "length": 16, "batch": 40, "seed": 6}}}}]}}"#,
    ))
    .unwrap()
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0, "vq");
    let out = train(&cfg).unwrap();
    assert_eq!(std::fs::read_to_string(&out.metrics_path).unwrap(), format!("{METRICS_HEADER}\n"));
    let init = init_params(&cfg).unwrap();
    let expected = Checkpoint::new(cfg.clone(), &init, out.checkpoint.rng);
    assert_eq!(Checkpoint::load(&out.checkpoint_path).unwrap(), expected);
}

#[test]
fn repeated_runs_write_identical_metrics() {
    for mode in ["vq", "gumbel", "none"] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&config(a.path(), 5, mode)).unwrap();
        train(&config(b.path(), 5, mode)).unwrap();
        for file in ["metrics.csv", "eval.json"] {
            assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{mode} {file}");
        }
        // Checkpoints embed their own output directory; compare the arrays.
        for file in ["checkpoint.bin", "checkpoint-2.bin"] {
            let (x, y) = (Checkpoint::load(&a.path().join(file)).unwrap(), Checkpoint::load(&b.path().join(file)).unwrap());
            assert_eq!(x.arrays(), y.arrays(), "{mode} {file}");
        }
        let rows = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.lines().count(), 6);
        assert!(rows.lines().skip(1).all(|r| r.split(',').count() == 8));
    }
}

#[test]
fn evaluating_the_checkpoint_reproduces_the_final_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 4, "vq");
    let out = train(&cfg).unwrap();
    let ckpt = Checkpoint::load(&out.checkpoint_path).unwrap();
    for (spec, record) in cfg.eval.iter().zip(&out.evals) {
        let again = evaluate_checkpoint(&ckpt, &spec.task, &spec.name).unwrap();
        assert_eq!(&again, record);
    }
}

#[test]
fn untrained_adding_error_is_the_target_spread() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 0, "none");
    cfg.model.hidden = 32;
    cfg.model.modules = 6;
    cfg.model.active = 4;
    let params = init_params(&cfg).unwrap();
    let spec = AddingSpec { length: 30, max_value: 1.0, batch: 2000, seed: 3 };
    let mse = evaluate(&params, &cfg.model, &TaskSpec::Adding(spec.clone()), "untrained").unwrap().mse.unwrap();

    let data = dvnc::tasks::adding_batch(&spec).unwrap();
    let graph = dvnc::Graph::new();
    let vars = params.bind(&graph).unwrap();
    let seq = graph.constant(data.inputs).unwrap();
    let preds = dvnc::rim::rollout(seq, &vars, &cfg.model, false).unwrap().readout.value();
    let c = preds.data().iter().sum::<f64>() / preds.numel() as f64;
    // Targets are a sum of two U[0,1] values: mean 1, variance 1/6.
    let analytic = 1.0 / 6.0 + (1.0 - c) * (1.0 - c);
    assert!((mse - analytic).abs() < 0.2 * analytic, "{mse} vs {analytic} (mean prediction {c})");
}

#[test]
fn eval_rejects_incompatible_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(dir.path(), 0, "vq")).unwrap();
    let copying: TaskSpec = serde_json::from_str(r#"{"kind":"copying","payload_len":3,"delay":2,"n_symbols":4,"batch":2}"#).unwrap();
    let err = evaluate_checkpoint(&out.checkpoint, &copying, "x").unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn copying_task_trains_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::from_json(&format!(
        r#"{{"task": {{"kind": "copying", "payload_len": 3, "delay": 2, "n_symbols": 4, "batch": 8}},
            "model": {{"M": 3, "K": 2, "hidden": 6, "L": 8, "G": 2, "discretize": "vq"}},
            "epochs": 2, "batches_per_epoch": 2, "seed": 1, "output_dir": {:?},
            "eval": [{{"name": "longer-delay", "task": {{"kind": "copying", "payload_len": 3, "delay": 6, "n_symbols": 4, "batch": 33}}}}]}}"#,
        dir.path()
    ))
    .unwrap();
    let out = train(&cfg).unwrap();
    let rec = &out.evals[0];
    let acc = rec.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // Chance level over 5 classes gives a cross-entropy near ln 5.
    assert!(rec.cross_entropy.unwrap() > 0.5 && rec.cross_entropy.unwrap() < 5.0);
    assert_eq!(rec.length, 3 + 6 + 1 + 3);
}

fn dvnc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dvnc"))
}

#[test]
fn cli_exit_codes_and_json_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dvnc().arg("nonsense").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));

    let missing = dvnc().args(["train", "--config", "/does/not/exist.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"task": {"kind": "adding", "length": 6, "batch": 4},
            "model": {"M": 2, "K": 1, "hidden": 4, "L": 4, "G": 2, "discretize": "vq"},
            "epochs": 1, "batches_per_epoch": 2, "seed": 3}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let trained = dvnc().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(&run_dir).args(["--seed", "9"]).output().unwrap();
    assert_eq!(trained.status.code(), Some(0), "{}", String::from_utf8_lossy(&trained.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&trained.stdout).unwrap();
    assert_eq!(summary["steps"], 2);

    let eval = dvnc()
        .args(["eval", "--ckpt"])
        .arg(run_dir.join("checkpoint.bin"))
        .args(["--task", r#"{"kind": "adding", "length": 12, "batch": 5, "seed": 1}"#])
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(0));
    let record: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(record["mse"].as_f64().unwrap() >= 0.0);

    let mut bytes = std::fs::read(run_dir.join("checkpoint.bin")).unwrap();
    bytes[..8].copy_from_slice(b"XXXXXXXX");
    std::fs::write(dir.path().join("bad.bin"), bytes).unwrap();
    let corrupt =
        dvnc().args(["eval", "--ckpt"]).arg(dir.path().join("bad.bin")).args(["--task", "{\"kind\":\"adding\",\"length\":4,\"batch\":1}"]).output().unwrap();
    assert_eq!(corrupt.status.code(), Some(2));

    let conc = dvnc()
        .args([
            "concentration",
            "--spec",
            r#"{"L": 2, "G": 1, "dim": 1, "n": 100, "trials": 200, "delta": 0.05, "reference_samples": 100000,
            "distribution": {"kind": "discrete", "points": [[0.0], [1.0]], "weights": [0.5, 0.5]}}"#,
        ])
        .output()
        .unwrap();
    assert_eq!(conc.status.code(), Some(0), "{}", String::from_utf8_lossy(&conc.stderr));
    let report: serde_json::Value = serde_json::from_slice(&conc.stdout).unwrap();
    assert!(report["violation_rate"].as_f64().unwrap() <= 0.05);
}

#[test]
fn nan_inputs_abort_with_numeric_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 3, "none");
    cfg.adam.lr = 1e300;
    let err = train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(dir.path().join("diagnostic.json").exists());
}
