//! Drives the installed binary the way a user would.

use std::path::Path;
use std::process::Command;

fn granusim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_granusim"))
}

#[test]
fn shipped_config_matches_the_builtin_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let text = std::fs::read_to_string(&path).expect("configs/desk.toml present");
    let shipped = granusim::exp::config::ExperimentConfig::parse(&text).unwrap();
    let builtin =
        granusim::exp::config::ExperimentConfig::desk(granusim::DEFAULT_MASTER_SEED, "runs/desk".into());
    assert_eq!(
        serde_json::to_string(&shipped).unwrap(),
        serde_json::to_string(&builtin).unwrap(),
        "configs/desk.toml drifted from ExperimentConfig::desk()"
    );
}

#[test]
fn gen_dict_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = granusim()
        .args([
            "gen-dict",
            "--out",
            dir.path().to_str().unwrap(),
            "--mode",
            "random-orthogonal",
            "--seed",
            "5",
            "--json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("dict.bin").exists());
    assert!(dir.path().join("dict.json").exists());
}

#[test]
fn hierarchy_level_traces_and_clamps() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.tsv");
    std::fs::write(&edges, "a\tb\nb\tc\nc\troot\n").unwrap();
    for (level, expect) in [("0", "a"), ("2", "c"), ("99", "root")] {
        let out = granusim()
            .args([
                "hierarchy",
                "level",
                "--edges",
                edges.to_str().unwrap(),
                "--leaf",
                "a",
                "--level",
                level,
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), expect);
    }
    // unknown leaf is an error exit
    let out = granusim()
        .args([
            "hierarchy",
            "level",
            "--edges",
            edges.to_str().unwrap(),
            "--leaf",
            "nope",
            "--level",
            "1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn hierarchy_assign_writes_mapping_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("emb.csv");
    let mut csv = String::new();
    for i in 0..24 {
        let g = i % 2;
        csv.push_str(&format!("{}.0,{}.5\n", g * 100 + i, g));
    }
    std::fs::write(&emb, csv).unwrap();
    let labels = dir.path().join("labels.txt");
    std::fs::write(
        &labels,
        (0..24).map(|i| format!("{}\n", i % 2)).collect::<String>(),
    )
    .unwrap();
    let out_dir = dir.path().join("ids");
    let out = granusim()
        .args([
            "hierarchy",
            "assign",
            "--embeddings",
            emb.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--mode",
            "per-group",
            "--clusters",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ids = std::fs::read_to_string(out_dir.join("fine_ids.csv")).unwrap();
    assert_eq!(ids.lines().count(), 25); // header + 24 rows
    assert!(ids.starts_with("sample_index,fine_id\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["clusters"], 3);
}

#[test]
fn config_errors_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "master_seed = \"oops\"\n").unwrap();
    let out = granusim()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "missing diagnostics: {err}");
}

#[test]
fn report_on_missing_dir_lists_absent_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = granusim()
        .args(["report", "--dir", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("summary.json"), "{err}");
    assert!(err.contains("history_coarse.jsonl"), "{err}");
}

#[test]
fn bad_thread_env_is_rejected() {
    let out = granusim()
        .env("GRANUSIM_THREADS", "zero")
        .args(["probe", "lemmas", "--trials", "100000"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("GRANUSIM_THREADS"));
}
