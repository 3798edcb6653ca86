use std::path::Path;
use std::process::Command;

fn mome(out: &Path, config: &Path, args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_mome"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "mome {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let config = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "channels": [2, 4],
        "n_experts": 4,
        "epochs_train": 1,
        "epochs_finetune": 1,
        "n_train_a": 3,
        "n_test": 2,
        "fewshot_pool": 12,
        "organ": "oracle",
        "bootstrap_iterations": 50,
        "ablation_methods": ["vanilla-moe", "mome"],
        "data_dir": data,
    });
    std::fs::write(&config, cfg.to_string()).unwrap();

    let out = mome(&data, &config, &["gen-data", "--seed", "3"]);
    assert!(out.contains("train"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    mome(&runs, &config, &["train", "--mode", "mome", "--k", "2"]);
    assert!(runs.join("model.ckpt").exists());
    let runlog: serde_json::Value = serde_json::from_slice(&std::fs::read(runs.join("runlog.json")).unwrap()).unwrap();
    assert_eq!(runlog["epochs"].as_array().unwrap().len(), 1);

    let sel = mome(&runs, &config, &["route-select", "--center", "E"]);
    assert!(sel.contains("selected"));
    assert!(runs.join("route-select-E.json").exists());

    mome(&runs, &config, &["finetune", "--center", "E", "--shots", "1"]);
    let ft: serde_json::Value = serde_json::from_slice(&std::fs::read(runs.join("finetune-E-1shot.json")).unwrap()).unwrap();
    assert_eq!(ft["encoder_digest_before"], ft["encoder_digest_after"]);

    mome(&runs, &config, &["eval", "--center", "C"]);
    let csv = std::fs::read_to_string(runs.join("eval-C.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("row_type,case_id"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("case,")).count(), 2);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(runs.join("eval-C.json")).unwrap()).unwrap();
    assert_eq!(summary["n_cases"], 2);

    mome(&runs, &config, &["ablate", "--k", "1", "--center", "C"]);
    let ablation = std::fs::read_to_string(runs.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 3);

    let md = mome(&runs, &config, &["report"]);
    assert!(md.contains("ablation") && md.contains('|'));
    assert!(runs.join("report.md").exists());
}

#[test]
fn rejects_out_of_range_flags() {
    for args in [&["train", "--k", "4"][..], &["finetune", "--shots", "0"], &["train", "--mode", "dense"]] {
        let o = Command::new(env!("CARGO_BIN_EXE_mome")).args(args).output().unwrap();
        assert!(!o.status.success(), "{args:?} should fail");
    }
}
