use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use shortcut_lens::pipeline::{metrics_table, PipelineConfig, Runner, SelectRequest};
use shortcut_lens::store::Store;
use shortcut_lens::{Error, Result};

#[derive(Parser)]
#[command(
    name = "shortcut-lens",
    version,
    about = "Find and remove shortcut features in a vision transformer"
)]
struct Cli {
    /// Directory holding one sub-directory per run.
    #[arg(long, global = true, default_value = "runs")]
    run_dir: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run id; defaults to the latest run (or a new one for generate-data and run-all).
    #[arg(long, global = true)]
    run: Option<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into a new run.
    GenerateData,
    /// Train the ViT on the training split.
    Train,
    /// Record validation and test activations.
    Export,
    /// Cluster the validation split and score prototypical patches.
    Detect,
    /// Caption prototypes and summarise each cluster.
    Concepts,
    /// Choose the cluster to mitigate.
    Select {
        #[arg(long, conflicts_with = "auto", required_unless_present = "auto")]
        cluster: Option<usize>,
        /// Use the unsupervised score; never replaces an expert choice.
        #[arg(long)]
        auto: bool,
    },
    /// Ablate flagged tokens and retrain the head.
    Mitigate,
    /// Print the metrics table of a mitigated run.
    Evaluate {
        /// Print the metrics JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Every stage in order.
    RunAll {
        #[arg(long)]
        skip_concepts: bool,
    },
    /// HTTP API over the run directory.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn requested_config(cli: &Cli) -> Result<Option<PipelineConfig>> {
    if cli.config.is_none() && cli.seed.is_none() {
        return Ok(None);
    }
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(Some(config))
}

fn new_run(cli: &Cli, store: Store) -> Result<Runner> {
    let config = requested_config(cli)?.unwrap_or_default();
    let runner = Runner::create(store, &config)?;
    println!("run {}", runner.run_id());
    Ok(runner)
}

fn existing_run(cli: &Cli, store: Store) -> Result<Runner> {
    let id = match &cli.run {
        Some(id) => id.clone(),
        None => store.latest_run()?.run_id,
    };
    let runner = Runner::open(store, &id)?;
    if let Some(config) = requested_config(cli)? {
        if &config.resolved() != runner.config() {
            return Err(Error::InvalidInput(format!(
                "run {id} was created with a different config; omit --config/--seed or start a new run"
            )));
        }
    }
    Ok(runner)
}

fn open_or_create(cli: &Cli, store: Store) -> Result<Runner> {
    if cli.run.is_some() {
        existing_run(cli, store)
    } else {
        new_run(cli, store)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let store = Store::new(&cli.run_dir);
    match &cli.command {
        Command::GenerateData => {
            let mut r = open_or_create(cli, store)?;
            let d = r.generate()?;
            println!(
                "train {} / val {} / test {} images",
                d.train.len(),
                d.val.len(),
                d.test.len()
            );
        }
        Command::Train => {
            let mut r = existing_run(cli, store)?;
            r.train()?;
            let report = r.train_report()?;
            if let (Some(loss), Some(acc)) = (report.epoch_loss.last(), report.epoch_accuracy.last()) {
                println!("final epoch: loss {loss:.4}, train accuracy {:.1}%", acc * 100.0);
            }
        }
        Command::Export => {
            let mut r = existing_run(cli, store)?;
            let e = r.export()?;
            println!(
                "exported {} val / {} test records",
                e.val.records.len(),
                e.test.records.len()
            );
        }
        Command::Detect => {
            let mut r = existing_run(cli, store)?;
            let report = r.detect()?.report.clone();
            println!(
                "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8}",
                "cluster", "size", "h", "bd", "bn", "score"
            );
            let na = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"));
            for s in &report.stats {
                println!(
                    "{:<8} {:>6} {:>8.4} {:>8} {:>8} {:>8.4}",
                    s.cluster,
                    s.count,
                    s.homogeneity,
                    na(s.bd),
                    na(s.bn),
                    s.score
                );
            }
            let tie = if report.selection.tie { " (tie)" } else { "" };
            println!("suggested shortcut cluster: {}{tie}", report.selection.cluster);
        }
        Command::Concepts => {
            let mut r = existing_run(cli, store)?;
            let report = r.concepts()?;
            for c in &report.clusters {
                match (&c.shortcut_candidate, &c.error) {
                    (Some(text), _) => println!("cluster {}: {text}", c.cluster),
                    (None, Some(e)) => println!("cluster {}: failed ({e})", c.cluster),
                    (None, None) => println!("cluster {}: no concept", c.cluster),
                }
            }
            if report.partial {
                println!("some provider calls failed; results are partial");
            }
        }
        Command::Select { cluster, auto } => {
            let mut r = existing_run(cli, store)?;
            let request = match (cluster, auto) {
                (Some(c), false) => SelectRequest::Expert(*c),
                _ => SelectRequest::Auto,
            };
            let s = r.select(request)?;
            let source = serde_json::to_value(s.source)?;
            println!(
                "selected cluster {} ({})",
                s.cluster,
                source.as_str().unwrap_or_default()
            );
        }
        Command::Mitigate => {
            let mut r = existing_run(cli, store)?;
            let result = r.mitigate()?;
            print!("{}", metrics_table(&result.metrics, r.total_runtime()));
        }
        Command::Evaluate { json } => {
            let r = existing_run(cli, store)?;
            let metrics = r.metrics()?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&metrics)?);
            } else {
                print!("{}", metrics_table(&metrics, r.total_runtime()));
            }
        }
        Command::RunAll { skip_concepts } => {
            let mut r = open_or_create(cli, store)?;
            let metrics = r.run_all(*skip_concepts)?;
            print!("{}", metrics_table(&metrics, r.total_runtime()));
        }
        Command::Serve { addr } => {
            shortcut_lens::service::serve(store, addr)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Provider(_) => 3,
        Error::InvalidInput(_)
        | Error::InvalidState(_)
        | Error::StageIncomplete(_)
        | Error::Config(_)
        | Error::NotFound(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
