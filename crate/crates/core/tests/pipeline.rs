//! End-to-end pipeline coverage at a deliberately tiny scale: the full-size
//! run lives in the acceptance suite.

use granusim::exp::config::ExperimentConfig;
use granusim::exp::report::{emit_report, ReportFormat};
use granusim::exp::runner::{files, run_experiment, validate_summary_schema};
use granusim::trainer::TrainHistory;
use std::io::BufReader;
use std::path::Path;

fn tiny_config(dir: &Path, master_seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(master_seed, dir.to_path_buf());
    cfg.hyperparams.d = 32;
    cfg.hyperparams.p = 16;
    cfg.hyperparams.s_star = 4;
    cfg.hyperparams.k_plus = 4;
    cfg.hyperparams.k_minus = 4;
    cfg.hyperparams.batch_size = 16;
    cfg.hyperparams.m = 24;
    cfg.hyperparams.m_sub = 6;
    cfg.hyperparams.sigma_0 = 1e-3;
    cfg.train.coarse.max_steps = 25;
    cfg.train.coarse.log_every = 5;
    cfg.train.fine.max_steps = 10;
    cfg.train.fine.log_every = 2;
    cfg.probes.checks_enabled = false;
    cfg.probes.n_eval_per_subclass = 2;
    cfg
}

fn read_without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("generated_at_unix");
    v
}

#[test]
fn mini_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let summary = run_experiment(&cfg).unwrap();

    // all artifacts exist
    for name in [
        files::DICT.to_string(),
        files::SUMMARY.to_string(),
        files::CONFIG.to_string(),
        files::history("coarse"),
        files::history("fine"),
        files::checkpoint("coarse"),
        files::checkpoint("fine"),
        files::phase_report("coarse"),
        files::audit("coarse"),
        files::GEOMETRY_CSV.to_string(),
    ] {
        assert!(dir.path().join(&name).exists(), "missing {name}");
    }

    // summary schema is the embedded fixed key set
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(files::SUMMARY)).unwrap())
            .unwrap();
    validate_summary_schema(&v).unwrap();
    assert_eq!(summary.schema_version, 1);

    // CSV report: one row per logged step per regime (plus header)
    let written = emit_report(dir.path(), ReportFormat::Csv).unwrap();
    let coarse = TrainHistory::read_jsonl(BufReader::new(
        std::fs::File::open(dir.path().join(files::history("coarse"))).unwrap(),
    ))
    .unwrap();
    let fine = TrainHistory::read_jsonl(BufReader::new(
        std::fs::File::open(dir.path().join(files::history("fine"))).unwrap(),
    ))
    .unwrap();
    let report = std::fs::read_to_string(&written[0]).unwrap();
    let rows = report.lines().count() - 1;
    assert_eq!(rows, coarse.records.len() + fine.records.len());

    // JSON metrics round-trip through a parser with identical values
    emit_report(dir.path(), ReportFormat::Json).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let parsed: granusim::exp::report::Metrics = serde_json::from_str(&text).unwrap();
    let reserialized = serde_json::to_string_pretty(&parsed).unwrap();
    assert_eq!(text, reserialized);
}

#[test]
fn mini_pipeline_is_byte_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&tiny_config(dir_a.path(), 9)).unwrap();
    run_experiment(&tiny_config(dir_b.path(), 9)).unwrap();

    for name in [
        files::DICT.to_string(),
        files::history("coarse"),
        files::history("fine"),
        files::checkpoint("coarse"),
        files::checkpoint("fine"),
        files::GEOMETRY_CSV.to_string(),
        files::phase_report("coarse"),
        files::phase_report("fine"),
        files::audit("coarse"),
        files::audit("fine"),
    ] {
        let a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join(&name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
    // summaries agree once the single timestamp key is dropped
    assert_eq!(
        read_without_timestamp(&dir_a.path().join(files::SUMMARY)),
        read_without_timestamp(&dir_b.path().join(files::SUMMARY)),
    );

    let dir_c = tempfile::tempdir().unwrap();
    run_experiment(&tiny_config(dir_c.path(), 10)).unwrap();
    let a = std::fs::read(dir_a.path().join(files::history("coarse"))).unwrap();
    let c = std::fs::read(dir_c.path().join(files::history("coarse"))).unwrap();
    assert_ne!(a, c, "different master seeds must differ");
}

// max_steps = 0 for both regimes: summary exists, boundaries not reached,
// checks are disabled so the run counts as clean.
#[test]
fn noop_budget_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 4);
    cfg.train.coarse.max_steps = 0;
    cfg.train.fine.max_steps = 0;
    cfg.probes.checks_enabled = true; // auto-disabled for a no-op budget
    let summary = run_experiment(&cfg).unwrap();
    assert!(summary.coarse.t0.is_none());
    assert!(summary.coarse.t11.is_none());
    assert!(summary.fine.t0.is_none());
    assert!(!summary.checks_enabled);
    assert!(summary.all_enabled_checks_passed);
    assert!(dir.path().join(files::SUMMARY).exists());
}

// non-finite responses surface as a divergence error carrying the step
#[test]
fn diverged_training_carries_the_step_index() {
    use granusim::data::make_batch;
    use granusim::dict::build_dictionary;
    use granusim::model::init_network;
    use granusim::params::Variant;
    use granusim::trainer::{sgd_step, BiasRule, TrainConfig};

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5);
    let dict = build_dictionary(&cfg.hyperparams, granusim::dict::DictMode::StandardBasis, 0).unwrap();
    let mut net = init_network(&cfg.hyperparams, Variant::Coarse, 1).unwrap();
    for h in &mut net.heads {
        h.weights[[0, 0]] = f64::INFINITY;
        h.biases.fill(0.0);
    }
    let mut batch = make_batch(&dict, &cfg.hyperparams, 7, 3).unwrap();
    batch.step_index = 7;
    batch.samples[0].patches[[0, 0]] = 1.0;
    let tc = TrainConfig {
        regime: Variant::Coarse,
        max_steps: 10,
        eta: 0.1,
        bias_rule: BiasRule::PlainDecay,
        log_every: 1,
        loss_floor: 0.0,
        seed: 0,
        diag_per_subclass: 1,
    };
    let err = sgd_step(&mut net, &batch, &tc, None).unwrap_err();
    match err {
        granusim::SimError::Diverged { step } => assert_eq!(step, 7),
        other => panic!("expected divergence, got {other}"),
    }
}
