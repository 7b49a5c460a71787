//! End-to-end experiment orchestration: one dictionary, both training
//! regimes from the same data seeds, all configured probes, and a summary
//! with pass/fail verdicts. One master seed determines every artifact byte
//! except the single timestamp key in the summary.

use crate::data::make_batch;
use crate::dict::{build_dictionary, Dictionary};
use crate::error::{Result, SimError};
use crate::exp::config::ExperimentConfig;
use crate::model::Network;
use crate::params::Variant;
use crate::probes::{
    detect_phase_boundaries, fit_log_growth, hard_example_audit, init_geometry_report,
    lemma_monte_carlo, set_nesting_violation_rate, singleton_activation_rate,
    star_set_max_pairwise_distance, AuditRecord, Boundary, LemmaKind, LemmaOutcome, LogFit,
    PhaseReport,
};
use crate::rng;
use crate::sets::classify_init_neurons;
use crate::trainer::{train_run, StopReason, TrainOutcome};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub mod files {
    pub const DICT: &str = "dict.bin";
    pub const CONFIG: &str = "config.toml";
    pub const SUMMARY: &str = "summary.json";
    pub fn history(regime: &str) -> String {
        format!("history_{regime}.jsonl")
    }
    pub fn checkpoint(regime: &str) -> String {
        format!("final_{regime}.ckpt")
    }
    pub fn phase_report(regime: &str) -> String {
        format!("phase_{regime}.json")
    }
    pub fn audit(regime: &str) -> String {
        format!("audit_{regime}.json")
    }
    pub const GEOMETRY_CSV: &str = "geometry_coarse.csv";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub enabled: bool,
    pub passed: bool,
    /// None when the underlying quantity was not computable for this run.
    pub value: Option<f64>,
    pub threshold: f64,
    /// comparison applied: "<=", ">=", or "in-factor"
    pub op: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub steps_run: u64,
    pub stop_reason: String,
    pub final_loss: Option<f64>,
    pub t0: Option<u64>,
    pub t11: Option<u64>,
    pub fit_c: Option<f64>,
    pub fit_t0: Option<f64>,
    pub fit_r2: Option<f64>,
    pub fit_c_expected: Option<f64>,
    pub singleton_rate_mid_phase1: Option<f64>,
    pub tracer_max_pairwise_dist: Option<f64>,
    pub set_nesting_violation_rate: Option<f64>,
    /// mean over subclasses of (subclass tracer growth / common tracer
    /// growth) * k_plus during the first phase; 1.0 is the predicted value
    pub growth_ratio_times_k: Option<f64>,
    pub star_plus_count: usize,
    pub star_minus_count: usize,
    pub normal_mean_f_y: f64,
    pub normal_accuracy: f64,
    pub hard_mean_f_y: f64,
    pub hard_accuracy: f64,
    pub hard_vs_normal_ratio: Option<f64>,
    pub zero_feature_samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    /// the only timestamp in any artifact
    pub generated_at_unix: u64,
    pub master_seed: u64,
    pub dict_mode: String,
    pub preset: String,
    pub coarse: RegimeSummary,
    pub fine: RegimeSummary,
    pub lemmas: Vec<LemmaOutcome>,
    pub checks: Vec<CheckResult>,
    pub checks_enabled: bool,
    pub all_enabled_checks_passed: bool,
}

/// Top-level keys every summary must carry, in schema order.
pub const SUMMARY_KEYS: &[&str] = &[
    "schema_version",
    "generated_at_unix",
    "master_seed",
    "dict_mode",
    "preset",
    "coarse",
    "fine",
    "lemmas",
    "checks",
    "checks_enabled",
    "all_enabled_checks_passed",
];

pub fn validate_summary_schema(json: &Value) -> Result<()> {
    let obj = json
        .as_object()
        .ok_or_else(|| SimError::Parse("summary is not a JSON object".into()))?;
    for key in SUMMARY_KEYS {
        if !obj.contains_key(*key) {
            return Err(SimError::Parse(format!("summary missing key {key}")));
        }
    }
    for key in obj.keys() {
        if !SUMMARY_KEYS.contains(&key.as_str()) {
            return Err(SimError::Parse(format!("summary has unexpected key {key}")));
        }
    }
    Ok(())
}

struct RegimeAnalysis {
    summary: RegimeSummary,
    phase: PhaseReport,
    audit: AuditRecord,
    outcome: TrainOutcome,
}

fn analyze_regime(
    cfg: &ExperimentConfig,
    dict: &Dictionary,
    regime: Variant,
) -> Result<RegimeAnalysis> {
    let section = match regime {
        Variant::Coarse => &cfg.train.coarse,
        Variant::Fine => &cfg.train.fine,
    };
    let tc = section.to_train_config(regime, cfg.master_seed);
    let outcome = train_run(&cfg.hyperparams, &tc, dict)?;
    let params = &cfg.hyperparams;

    let (t0, t11) = detect_phase_boundaries(&outcome.history, params, cfg.probes.eps_t11, regime);

    // growth-law fit on A(t) over the post-saturation window (coarse only)
    let mut fit: Option<LogFit> = None;
    let mut fit_c_expected = None;
    if regime == Variant::Coarse && outcome.tracers.common_plus.is_some() {
        if let Boundary::Reached(t11_step) = t11 {
            let series: Vec<(f64, f64)> = outcome
                .history
                .records
                .iter()
                .map(|r| (r.step as f64, r.a_common))
                .collect();
            let last = series.last().map(|p| p.0).unwrap_or(0.0);
            if let Ok(f) = fit_log_growth(&series, (t11_step as f64, last)) {
                fit = Some(f);
            }
            fit_c_expected = Some(
                tc.eta * (params.s_star as f64 / (2.0 * params.p as f64))
                    * params.s_star as f64
                    * outcome.tracers.star_plus_count as f64,
            );
        }
    }

    // mid-first-phase probes via deterministic re-simulation
    let mut singleton_rate = None;
    let mut tracer_dist = None;
    let mut nesting = None;
    if regime == Variant::Coarse {
        if let Boundary::Reached(t0_step) = t0 {
            let mid = t0_step / 2;
            let resim = |steps: u64| -> Result<Network> {
                let mut c = tc.clone();
                c.max_steps = steps;
                c.loss_floor = 0.0;
                c.log_every = u64::MAX - 1;
                Ok(train_run(params, &c, dict)?.network)
            };
            let init_seed = rng::derive_seed(tc.seed, rng::tag::INIT, regime as u64, 0);
            let init_net = crate::model::init_network(params, regime, init_seed)?;
            let sets = classify_init_neurons(&init_net, dict, params)?;
            let data_seed = rng::derive_seed(tc.seed, rng::tag::DATA, 0, 0);

            let mid_net = resim(mid)?;
            let probe_batch = make_batch(dict, params, mid, data_seed)?;
            singleton_rate = Some(singleton_activation_rate(&mid_net, &probe_batch, &sets));
            nesting = Some(set_nesting_violation_rate(&mid_net, &probe_batch, &sets));

            let end_net = resim(t0_step)?;
            tracer_dist = star_set_max_pairwise_distance(&end_net, &sets);
        }
    }

    // first-phase growth ratio of subclass vs common tracers
    let mut growth_ratio = None;
    if regime == Variant::Coarse && outcome.tracers.common_plus.is_some() {
        let records = &outcome.history.records;
        if records.len() >= 2 {
            let t0_step = t0.step().unwrap_or(1).max(1);
            let first = &records[0];
            let last_in_phase = records
                .iter()
                .take_while(|r| r.step <= t0_step)
                .last()
                .unwrap_or(first);
            let scale = params.s_star as f64 * outcome.tracers.star_plus_count.max(1) as f64;
            let d_common = (last_in_phase.a_common - first.a_common) / scale;
            if d_common > 0.0 && last_in_phase.step > first.step {
                let mut ratios = Vec::new();
                for c in 0..params.k_plus {
                    if let (Some(a0), Some(a1)) = (first.a_sub[c], last_in_phase.a_sub[c]) {
                        ratios.push((a1 - a0) / d_common);
                    }
                }
                if !ratios.is_empty() {
                    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
                    growth_ratio = Some(mean * params.k_plus as f64);
                }
            }
        }
    }

    let audit = hard_example_audit(
        &outcome.network,
        dict,
        params,
        cfg.probes.n_eval_per_subclass,
        rng::derive_seed(cfg.master_seed, rng::tag::AUDIT, regime as u64, 0),
    )?;

    let phase = PhaseReport {
        t0_detected: t0.step(),
        t11_detected: t11.step(),
        fit_c: fit.as_ref().map(|f| f.c),
        fit_t0: fit.as_ref().map(|f| f.t0),
        fit_r2: fit.as_ref().map(|f| f.r2),
        singleton_rate_phase1: singleton_rate,
        hard_vs_normal_ratio: audit.hard_vs_normal_ratio,
    };
    phase.validate()?;

    let summary = RegimeSummary {
        regime: match regime {
            Variant::Coarse => "coarse".into(),
            Variant::Fine => "fine".into(),
        },
        steps_run: outcome.steps_run,
        stop_reason: match outcome.stop {
            StopReason::MaxSteps => "max_steps".into(),
            StopReason::LossFloor => "loss_floor".into(),
        },
        final_loss: outcome.history.records.last().map(|r| r.loss),
        t0: t0.step(),
        t11: t11.step(),
        fit_c: fit.as_ref().map(|f| f.c),
        fit_t0: fit.as_ref().map(|f| f.t0),
        fit_r2: fit.as_ref().map(|f| f.r2),
        fit_c_expected,
        singleton_rate_mid_phase1: singleton_rate,
        tracer_max_pairwise_dist: tracer_dist,
        set_nesting_violation_rate: nesting,
        growth_ratio_times_k: growth_ratio,
        star_plus_count: outcome.tracers.star_plus_count,
        star_minus_count: outcome.tracers.star_minus_count,
        normal_mean_f_y: audit.normal.mean_f_y,
        normal_accuracy: audit.normal.accuracy,
        hard_mean_f_y: audit.hard.mean_f_y,
        hard_accuracy: audit.hard.accuracy,
        hard_vs_normal_ratio: audit.hard_vs_normal_ratio,
        zero_feature_samples: outcome.zero_feature_samples,
    };
    Ok(RegimeAnalysis {
        summary,
        phase,
        audit,
        outcome,
    })
}

fn build_checks(cfg: &ExperimentConfig, coarse: &RegimeSummary, fine: &RegimeSummary) -> Vec<CheckResult> {
    let p = &cfg.probes;
    let enabled =
        p.checks_enabled && !(cfg.train.coarse.max_steps == 0 && cfg.train.fine.max_steps == 0);
    let mut checks = Vec::new();
    let mut push = |name: &str, value: Option<f64>, threshold: f64, op: &str| {
        let passed = match (op, value) {
            (_, None) => false,
            ("<=", Some(v)) => v <= threshold,
            (">=", Some(v)) => v >= threshold,
            ("in-factor", Some(v)) => {
                v.is_finite() && v > 0.0 && v <= threshold && v >= 1.0 / threshold
            }
            _ => false,
        };
        checks.push(CheckResult {
            name: name.into(),
            enabled,
            passed,
            value,
            threshold,
            op: op.into(),
        });
    };

    push(
        "coarse_reaches_loss_floor",
        Some(if coarse.stop_reason == "loss_floor" { 1.0 } else { 0.0 }),
        1.0,
        ">=",
    );
    push("coarse_normal_accuracy", Some(coarse.normal_accuracy), p.normal_acc_min, ">=");
    push(
        "coarse_hard_response_ratio",
        coarse.hard_vs_normal_ratio,
        p.coarse_hard_ratio_max,
        "<=",
    );
    push("coarse_hard_accuracy", Some(coarse.hard_accuracy), p.coarse_hard_acc_max, "<=");
    push(
        "coarse_singleton_rate",
        coarse.singleton_rate_mid_phase1,
        p.singleton_rate_min,
        ">=",
    );
    push("coarse_fit_r2", coarse.fit_r2, p.fit_r2_min, ">=");
    let c_rel = match (coarse.fit_c, coarse.fit_c_expected) {
        (Some(c), Some(e)) if e > 0.0 => Some(c / e),
        _ => None,
    };
    push("coarse_fit_c_vs_expected", c_rel, p.fit_c_factor, "in-factor");
    push(
        "coarse_growth_ratio_times_k",
        coarse.growth_ratio_times_k,
        p.growth_ratio_factor,
        "in-factor",
    );
    push("fine_normal_accuracy", Some(fine.normal_accuracy), p.fine_normal_acc_min, ">=");
    push("fine_hard_accuracy", Some(fine.hard_accuracy), p.fine_hard_acc_min, ">=");
    checks
}

/// Runs the full pipeline into `cfg.output_dir`. Returns the summary; the
/// caller decides the exit status from `all_enabled_checks_passed`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.hyperparams.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(files::CONFIG), cfg.to_toml()?)?;

    let dict_seed = rng::derive_seed(cfg.master_seed, rng::tag::DICT, 0, 0);
    let dict = build_dictionary(&cfg.hyperparams, cfg.dict_mode, dict_seed)?;
    dict.save(&dir.join(files::DICT))?;

    let coarse = analyze_regime(cfg, &dict, Variant::Coarse)?;
    let fine = analyze_regime(cfg, &dict, Variant::Fine)?;

    for (name, analysis) in [("coarse", &coarse), ("fine", &fine)] {
        let mut hw = std::io::BufWriter::new(std::fs::File::create(dir.join(files::history(name)))?);
        analysis.outcome.history.write_jsonl(&mut hw)?;
        drop(hw);
        analysis.outcome.network.save(&dir.join(files::checkpoint(name)))?;
        std::fs::write(
            dir.join(files::phase_report(name)),
            serde_json::to_string_pretty(&analysis.phase)?,
        )?;
        std::fs::write(
            dir.join(files::audit(name)),
            serde_json::to_string_pretty(&analysis.audit)?,
        )?;
    }

    // init geometry of the coarse network, as a plot-ready artifact
    {
        let init_seed = rng::derive_seed(cfg.master_seed, rng::tag::INIT, Variant::Coarse as u64, 0);
        let net = crate::model::init_network(&cfg.hyperparams, Variant::Coarse, init_seed)?;
        let sets = classify_init_neurons(&net, &dict, &cfg.hyperparams)?;
        let report = init_geometry_report(&sets);
        std::fs::write(dir.join(files::GEOMETRY_CSV), crate::probes::geometry_csv(&report))?;
    }

    let lemmas = if cfg.probes.run_lemmas {
        vec![
            lemma_monte_carlo(
                LemmaKind::NormTail,
                5,
                1_000_000,
                rng::derive_seed(cfg.master_seed, rng::tag::LEMMA, 0, 0),
            )?,
            lemma_monte_carlo(
                LemmaKind::InnerProduct,
                64,
                100_000,
                rng::derive_seed(cfg.master_seed, rng::tag::LEMMA, 1, 0),
            )?,
        ]
    } else {
        Vec::new()
    };

    let checks = build_checks(cfg, &coarse.summary, &fine.summary);
    let checks_enabled = checks.iter().any(|c| c.enabled);
    let all_passed = checks.iter().filter(|c| c.enabled).all(|c| c.passed);
    let summary = Summary {
        schema_version: 1,
        generated_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        master_seed: cfg.master_seed,
        dict_mode: format!("{:?}", cfg.dict_mode),
        preset: format!("{:?}", cfg.hyperparams.preset),
        coarse: coarse.summary,
        fine: fine.summary,
        lemmas,
        checks,
        checks_enabled,
        all_enabled_checks_passed: all_passed,
    };

    let json = serde_json::to_value(&summary)?;
    validate_summary_schema(&json)?;
    std::fs::write(dir.join(files::SUMMARY), serde_json::to_string_pretty(&json)?)?;
    Ok(summary)
}
