//! Operator surface: run individual pipeline stages or full experiments
//! from a config file, with resumable checkpoints and report emission.
//!
//! Exit codes: 0 ok, 1 stage failure, 2 config error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use fdkt_core::corpus::save_jsonl;
use fdkt_core::demo;
use fdkt_core::experiment::{
    build_gateway, load_config, run_federate, run_pipeline, ConfigError, StageRunner,
};
use fdkt_core::gateway::BackendKind;

#[derive(Parser)]
#[command(
    name = "fdkt",
    about = "Federated knowledge transfer pipeline: DP synthetic text, LLM-judge filtering, in-context augmentation, evaluation",
    version
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Recompute stages even when valid checkpoints exist.
    #[arg(long, global = true)]
    force: bool,

    /// Gateway backend; overrides the config.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,

    /// Maximum concurrent server requests; overrides the config.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Mock,
}

impl From<BackendArg> for BackendKind {
    fn from(value: BackendArg) -> Self {
        match value {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Mock => BackendKind::Mock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// DP-train the generator on the private data.
    DpTrain,
    /// Sample synthetic data from the DP generator.
    Synth,
    /// Cluster and judge-filter the synthetic data.
    Filter,
    /// Augment via the server LLM (few-shot for fdkt, zero-shot for gen_kt).
    Augment,
    /// Train the client classifier on private data plus the mode's extras.
    TrainSlm,
    /// Evaluate the trained classifier on the test data.
    Eval,
    /// Run every stage end to end for all sweep entries and seeds.
    Pipeline,
    /// Run the one-to-many multi-task flow over the [[clients]] sections.
    Federate,
    /// Write a built-in templated task (task.json + train/test JSONL).
    GenTask {
        /// Which built-in task universe to emit.
        #[arg(long, value_enum, default_value = "shopping")]
        domain: DomainArg,
        /// Training records per label.
        #[arg(long, default_value_t = 40)]
        per_label_train: usize,
        /// Test records per label.
        #[arg(long, default_value_t = 40)]
        per_label_test: usize,
        /// Corpus seed.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Shopping,
    Agnews,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(0),
        Err(MainError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(MainError::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

enum MainError {
    Config(String),
    Stage(String),
}

impl From<ConfigError> for MainError {
    fn from(e: ConfigError) -> Self {
        MainError::Config(e.to_string())
    }
}

impl From<fdkt_core::experiment::RunError> for MainError {
    fn from(e: fdkt_core::experiment::RunError) -> Self {
        MainError::Stage(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), MainError> {
    if let Command::GenTask {
        domain,
        per_label_train,
        per_label_test,
        data_seed,
    } = &cli.command
    {
        return gen_task(&cli, *domain, *per_label_train, *per_label_test, *data_seed);
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| MainError::Config("--config is required".to_string()))?;
    let mut config = load_config(config_path)?;
    if let Some(seed) = cli.seed {
        config.seeds = Some(vec![seed]);
    }
    let out_root = cli
        .out
        .clone()
        .or_else(|| config.out_dir.as_ref().map(|d| config.resolve_path(d)))
        .ok_or_else(|| MainError::Config("set out_dir in the config or pass --out".to_string()))?;
    std::fs::create_dir_all(&out_root)
        .map_err(|e| MainError::Stage(format!("cannot create {}: {e}", out_root.display())))?;
    let backend = cli.backend.map(BackendKind::from);

    match cli.command {
        Command::Pipeline => {
            let reports = run_pipeline(&config, &out_root, cli.force, backend, cli.max_parallel)?;
            for report in &reports {
                if let Some(agg) = &report.aggregate {
                    println!(
                        "[{}] exact = {:.4} ± {:.4} over seeds {:?}",
                        report.label, agg.mean_exact, agg.std_exact, agg.seeds
                    );
                }
            }
            Ok(())
        }
        Command::Federate => {
            run_federate(&config, &out_root, backend, cli.max_parallel)?;
            println!(
                "federate report written to {}",
                out_root.join("federate_report.json").display()
            );
            Ok(())
        }
        stage_command => {
            for entry in config.entries() {
                for &seed in &config.seeds() {
                    let runner = StageRunner::new(entry.clone(), seed, &out_root, cli.force)?;
                    let gateway = build_gateway(
                        &entry,
                        &[Arc::clone(runner.task())],
                        backend,
                        cli.max_parallel,
                    )?;
                    match stage_command {
                        Command::DpTrain => {
                            runner.dp_train()?;
                        }
                        Command::Synth => {
                            runner.synth()?;
                        }
                        Command::Filter => {
                            runner.filter(&gateway)?;
                        }
                        Command::Augment => {
                            runner.augment(&gateway)?;
                        }
                        Command::TrainSlm => {
                            runner.train_slm(&gateway)?;
                        }
                        Command::Eval => {
                            runner.eval(&gateway)?;
                        }
                        _ => unreachable!("pipeline/federate/gen-task handled above"),
                    }
                }
            }
            Ok(())
        }
    }
}

fn gen_task(
    cli: &Cli,
    domain: DomainArg,
    per_label_train: usize,
    per_label_test: usize,
    data_seed: u64,
) -> Result<(), MainError> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| MainError::Config("gen-task requires --out".to_string()))?;
    std::fs::create_dir_all(&out)
        .map_err(|e| MainError::Stage(format!("cannot create {}: {e}", out.display())))?;
    let domain = match domain {
        DomainArg::Shopping => demo::sentiment_domain(),
        DomainArg::Agnews => demo::topic_domain(),
    };
    let (train, test) = domain.make_split(per_label_train, per_label_test, data_seed);
    let task_path = out.join("task.json");
    domain
        .task()
        .save_json(&task_path)
        .map_err(|e| MainError::Stage(e.to_string()))?;
    save_jsonl(&train, out.join("train.jsonl")).map_err(|e| MainError::Stage(e.to_string()))?;
    save_jsonl(&test, out.join("test.jsonl")).map_err(|e| MainError::Stage(e.to_string()))?;
    println!(
        "wrote {} ({} train / {} test records)",
        task_path.display(),
        train.len(),
        test.len()
    );
    Ok(())
}
