use clap::{Args, Parser, Subcommand, ValueEnum};
use granusim::dict::{build_dictionary, DictMode};
use granusim::error::{Result, SimError};
use granusim::exp::config::ExperimentConfig;
use granusim::exp::report::{emit_report, ReportFormat};
use granusim::exp::runner::run_experiment;
use granusim::hierarchy::{
    assign_fine_ids, level_k_label, read_embeddings_binary, read_embeddings_csv, read_labels,
    rebalance_granularity, AssignMode, EmbeddingSet, Taxonomy,
};
use granusim::model::init_network;
use granusim::params::{HyperParams, Variant};
use granusim::probes::{geometry_sweep, lemma_monte_carlo, LemmaKind};
use granusim::rng;
use granusim::trainer::{grad_check_retrying, train_run};
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "granusim", version, about = "Patch-dictionary feature-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    PaperAsymptotic,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Coarse,
    Fine,
}

impl From<RegimeArg> for Variant {
    fn from(r: RegimeArg) -> Variant {
        match r {
            RegimeArg::Coarse => Variant::Coarse,
            RegimeArg::Fine => Variant::Fine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DictModeArg {
    StandardBasis,
    RandomOrthogonal,
}

impl From<DictModeArg> for DictMode {
    fn from(m: DictModeArg) -> DictMode {
        match m {
            DictModeArg::StandardBasis => DictMode::StandardBasis,
            DictModeArg::RandomOrthogonal => DictMode::RandomOrthogonal,
        }
    }
}

#[derive(Args)]
struct CommonConfig {
    /// Experiment config file; omitted means the built-in preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Overrides the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonConfig {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let mut c =
                    ExperimentConfig::desk(granusim::DEFAULT_MASTER_SEED, "runs/desk".into());
                if matches!(self.preset, PresetArg::PaperAsymptotic) {
                    c.hyperparams = HyperParams::paper_asymptotic(128);
                    c.output_dir = "runs/paper-asymptotic".into();
                }
                c
            }
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a feature dictionary and write it to disk
    GenDict {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long, value_enum, default_value = "standard-basis")]
        mode: DictModeArg,
        /// Also write a JSON rendition (small dictionaries only)
        #[arg(long)]
        json: bool,
    },
    /// Train one regime and write its history and final checkpoint
    Train {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long, value_enum)]
        regime: RegimeArg,
    },
    /// Probes that run without a full experiment
    Probe {
        #[command(subcommand)]
        probe: ProbeCommand,
    },
    /// Label-hierarchy tools on generic embeddings and taxonomies
    Hierarchy {
        #[command(subcommand)]
        tool: HierarchyCommand,
    },
    /// Full pipeline: dictionary, both regimes, probes, summary
    Run {
        #[command(flatten)]
        common: CommonConfig,
    },
    /// Flatten a completed run directory into plot-ready tables
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Init-geometry Monte-Carlo over seeds
    Geometry {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        /// Neurons per head for the sweep (defaults to the config's m)
        #[arg(long)]
        m: Option<usize>,
    },
    /// Gaussian concentration bounds by Monte-Carlo
    Lemmas {
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic-vs-finite-difference gradient check
    GradCheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum HierarchyCommand {
    /// Cluster embeddings into fine-grained pseudo-label ids
    Assign {
        #[arg(long)]
        embeddings: PathBuf,
        /// One superclass id per line, aligned with the embedding rows
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "per-group")]
        mode: AssignModeArg,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-superclass granularity selection under a cluster-size floor
    Rebalance {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Ascending candidate cluster counts, e.g. 2,8,32
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<usize>,
        #[arg(long)]
        min_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace a leaf to its level-k ancestor (root-clamped)
    Level {
        /// Edge list file: child<TAB>parent per line
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        leaf: String,
        #[arg(long)]
        level: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignModeArg {
    PerGroup,
    WholeDataset,
    Random,
    PerGroupRandom,
}

impl From<AssignModeArg> for AssignMode {
    fn from(m: AssignModeArg) -> AssignMode {
        match m {
            AssignModeArg::PerGroup => AssignMode::PerGroup,
            AssignModeArg::WholeDataset => AssignMode::WholeDataset,
            AssignModeArg::Random => AssignMode::Random,
            AssignModeArg::PerGroupRandom => AssignMode::PerGroupRandom,
        }
    }
}

fn load_embeddings(path: &PathBuf) -> Result<ndarray::Array2<f64>> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_embeddings_csv(std::fs::File::open(path)?)
    } else {
        read_embeddings_binary(&mut BufReader::new(std::fs::File::open(path)?))
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GRANUSIM_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            SimError::config(format!("GRANUSIM_THREADS must be a positive integer, got '{v}'"))
        })?;
        if n == 0 {
            return Err(SimError::config("GRANUSIM_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SimError::config(e.to_string()))?;
    }
    Ok(())
}

fn run() -> Result<bool> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::GenDict { common, mode, json } => {
            let cfg = common.resolve()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let seed = rng::derive_seed(cfg.master_seed, rng::tag::DICT, 0, 0);
            let dict = build_dictionary(&cfg.hyperparams, mode.into(), seed)?;
            let path = cfg.output_dir.join("dict.bin");
            dict.save(&path)?;
            println!(
                "dictionary: d={} gram_dev={:.3e} -> {}",
                dict.d(),
                dict.gram_max_dev(),
                path.display()
            );
            if json {
                let jpath = cfg.output_dir.join("dict.json");
                std::fs::write(&jpath, dict.to_json()?)?;
                println!("json: {}", jpath.display());
            }
            Ok(true)
        }
        Command::Train { common, regime } => {
            let cfg = common.resolve()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let regime: Variant = regime.into();
            let section = match regime {
                Variant::Coarse => &cfg.train.coarse,
                Variant::Fine => &cfg.train.fine,
            };
            let tc = section.to_train_config(regime, cfg.master_seed);
            let dict_seed = rng::derive_seed(cfg.master_seed, rng::tag::DICT, 0, 0);
            let dict = build_dictionary(&cfg.hyperparams, cfg.dict_mode, dict_seed)?;
            let out = train_run(&cfg.hyperparams, &tc, &dict)?;
            let name = match regime {
                Variant::Coarse => "coarse",
                Variant::Fine => "fine",
            };
            let hpath = cfg.output_dir.join(format!("history_{name}.jsonl"));
            let mut hw = std::io::BufWriter::new(std::fs::File::create(&hpath)?);
            out.history.write_jsonl(&mut hw)?;
            out.network
                .save(&cfg.output_dir.join(format!("final_{name}.ckpt")))?;
            let last = out.history.records.last();
            println!(
                "{name}: {} steps, stop={:?}, final loss {:.4}",
                out.steps_run,
                out.stop,
                last.map(|r| r.loss).unwrap_or(f64::NAN)
            );
            Ok(true)
        }
        Command::Probe { probe } => match probe {
            ProbeCommand::Geometry { common, seeds, m } => {
                let cfg = common.resolve()?;
                let dict_seed = rng::derive_seed(cfg.master_seed, rng::tag::DICT, 0, 0);
                let dict = build_dictionary(&cfg.hyperparams, cfg.dict_mode, dict_seed)?;
                let sweep = geometry_sweep(&cfg.hyperparams, &dict, m, seeds, cfg.master_seed)?;
                println!("{}", serde_json::to_string_pretty(&sweep)?);
                Ok(sweep.min_star_size >= 1 && sweep.mean_pairwise_ratio_dev <= 0.25)
            }
            ProbeCommand::Lemmas { trials, seed } => {
                let a = lemma_monte_carlo(LemmaKind::NormTail, 5, trials, seed)?;
                let b = lemma_monte_carlo(LemmaKind::InnerProduct, 64, trials.min(200_000), seed)?;
                println!("{}", serde_json::to_string_pretty(&vec![&a, &b])?);
                Ok(a.respects_bound && b.respects_bound)
            }
            ProbeCommand::GradCheck { cases, epsilon, seed } => {
                let mut params = HyperParams::desk();
                params.d = 24;
                params.p = 10;
                params.s_star = 3;
                params.k_plus = 3;
                params.k_minus = 3;
                params.batch_size = 6;
                params.m = 4;
                params.m_sub = 2;
                params.sigma_0 = 0.08;
                let dict = build_dictionary(&params, DictMode::StandardBasis, seed)?;
                let mut worst = 0.0f64;
                for variant in [Variant::Coarse, Variant::Fine] {
                    for case in 0..cases {
                        let net_seed =
                            rng::derive_seed(seed, rng::tag::GRADCHECK, variant as u64, case as u64);
                        let mut net = init_network(&params, variant, net_seed)?;
                        for h in &mut net.heads {
                            h.weights.mapv_inplace(|v| v * 20.0);
                            h.biases.fill(-0.02);
                        }
                        let err = grad_check_retrying(&net, &dict, &params, epsilon, net_seed, 100)?;
                        worst = worst.max(err);
                    }
                }
                println!("max relative error over {cases} cases/regime: {worst:.3e}");
                Ok(worst <= 1e-4)
            }
        },
        Command::Hierarchy { tool } => match tool {
            HierarchyCommand::Assign {
                embeddings,
                labels,
                mode,
                clusters,
                seed,
                out,
            } => {
                let vectors = load_embeddings(&embeddings)?;
                let n = vectors.nrows();
                let base = match &labels {
                    Some(p) => read_labels(BufReader::new(std::fs::File::open(p)?))?,
                    None => vec![0u64; n],
                };
                let mode: AssignMode = mode.into();
                if labels.is_none()
                    && matches!(mode, AssignMode::PerGroup | AssignMode::PerGroupRandom)
                {
                    return Err(SimError::config("per-group modes need --labels"));
                }
                let emb = EmbeddingSet::new(vectors, base)?;
                let assignment = assign_fine_ids(&emb, mode, clusters, seed)?;
                std::fs::create_dir_all(&out)?;
                let mut csv = String::from("sample_index,fine_id\n");
                for (i, id) in assignment.ids.iter().enumerate() {
                    csv.push_str(&format!("{i},{id}\n"));
                }
                std::fs::write(out.join("fine_ids.csv"), csv)?;
                std::fs::write(
                    out.join("manifest.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "mode": assignment.mode,
                        "clusters": assignment.c,
                        "seed": seed,
                        "n_samples": n,
                        "warnings": assignment.warnings,
                    }))?,
                )?;
                println!("wrote {} ids -> {}", n, out.display());
                Ok(true)
            }
            HierarchyCommand::Rebalance {
                embeddings,
                labels,
                candidates,
                min_count,
                seed,
                out,
            } => {
                let vectors = load_embeddings(&embeddings)?;
                let base = read_labels(BufReader::new(std::fs::File::open(&labels)?))?;
                let emb = EmbeddingSet::new(vectors, base)?;
                let result = rebalance_granularity(&emb, &candidates, min_count, seed)?;
                std::fs::create_dir_all(&out)?;
                let mut csv = String::from("sample_index,fine_id\n");
                for (i, id) in result.ids.iter().enumerate() {
                    csv.push_str(&format!("{i},{id}\n"));
                }
                std::fs::write(out.join("fine_ids.csv"), csv)?;
                std::fs::write(
                    out.join("manifest.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "mode": "rebalanced",
                        "seed": seed,
                        "min_count": result.min_count,
                        "choices": result.choices,
                    }))?,
                )?;
                println!("wrote {} ids -> {}", result.ids.len(), out.display());
                Ok(true)
            }
            HierarchyCommand::Level { edges, leaf, level } => {
                let tax = Taxonomy::from_edge_list(BufReader::new(std::fs::File::open(&edges)?))?;
                println!("{}", level_k_label(&tax, &leaf, level)?);
                Ok(true)
            }
        },
        Command::Run { common } => {
            let cfg = common.resolve()?;
            let summary = run_experiment(&cfg)?;
            for check in &summary.checks {
                println!(
                    "check {:<28} {} (value {}, {} {:.4})",
                    check.name,
                    if !check.enabled {
                        "SKIPPED"
                    } else if check.passed {
                        "PASS"
                    } else {
                        "FAIL"
                    },
                    check
                        .value
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    check.op,
                    check.threshold
                );
            }
            println!(
                "summary: coarse hard acc {:.3} vs fine hard acc {:.3} -> {}",
                summary.coarse.hard_accuracy,
                summary.fine.hard_accuracy,
                cfg.output_dir.join("summary.json").display()
            );
            Ok(!summary.checks_enabled || summary.all_enabled_checks_passed)
        }
        Command::Report { dir, format } => {
            let fmt = match format.as_str() {
                "csv" => ReportFormat::Csv,
                "json" => ReportFormat::Json,
                other => return Err(SimError::config(format!("unknown report format '{other}'"))),
            };
            let written = emit_report(&dir, fmt)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
