//! `powerpool`: generate set datasets, train set models, search the
//! power-mean exponent, run the property oracles, and sweep latent widths.
//!
//! Exit codes: 0 success, 1 a check failed, 2 configuration or usage error,
//! 3 numerical abort.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use powerpool::aggregators::AggregatorSpec;
use powerpool::experiment::{
    gradient_p_search, latent_sweep, objective_at_p, run_checks, run_training, sha256_hex, write_artifacts, ExperimentConfig,
};
use powerpool::psearch::{bayes_search, grid_search, SearchConfig, SearchResult, Strategy};
use powerpool::training::Checkpoint;
use powerpool::{Error, Result};

#[derive(Parser)]
#[command(name = "powerpool", version, about = "Permutation-invariant set models with power-mean pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured task's dataset as NDJSON.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, metrics and report to output_dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Search the power-mean exponent.
    SearchP {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Store per-trial wall time (makes the output nondeterministic).
        #[arg(long)]
        record_time: bool,
    },
    /// Run the property oracle suite; exits 1 if any check fails.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, hide = true)]
        inject_order_sensitive: bool,
    },
    /// Train one model per latent dimension and record test RMSE.
    LatentSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Seeds to repeat the sweep with; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Grid,
    Gd,
    Bayes,
}

/// A command's result when it did not fail outright.
enum Outcome {
    Ok,
    ChecksFailed,
    Aborted,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let overrides = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentConfig::from_json(text.as_deref(), &overrides)
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let ds = cfg.generate_dataset()?;
    let mut bytes = Vec::new();
    ds.write_ndjson(&mut bytes)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    powerpool::experiment::write_atomic(out, &bytes)?;
    println!("wrote {} sets to {} (sha256 {})", ds.len(), out.display(), sha256_hex(&bytes));
    Ok(Outcome::Ok)
}

fn train_cmd(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<Outcome> {
    let data = cfg.dataset().map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read dataset: {io}")),
        other => other,
    })?;
    let resume = match resume {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
            Some(ckpt.restore()?)
        }
        None => None,
    };
    let run = run_training(cfg, &data, resume)?;
    let report = serde_json::json!({
        "format_version": powerpool::FORMAT_VERSION,
        "train": run.report,
        "test": run.test,
    });
    let files = vec![
        ("checkpoint.json".to_string(), json_bytes(&Checkpoint::new(&run.model, &run.state))?),
        ("metrics.csv".to_string(), csv_bytes(|b| run.report.write_csv(b))?),
        ("report.json".to_string(), json_bytes(&report)?),
    ];
    write_artifacts(&cfg.output_dir, "train", &files)?;
    println!(
        "trained {} epochs; test loss {} rmse {}",
        run.state.epochs_done,
        run.test.loss,
        run.test.rmse.map_or("-".into(), |r| r.to_string())
    );
    Ok(Outcome::Ok)
}

fn search_cmd(cfg: &ExperimentConfig, strategy: StrategyArg, record_time: bool) -> Result<Outcome> {
    if !matches!(cfg.model.aggregator, AggregatorSpec::PowerMean { .. }) {
        return Err(Error::Config(format!(
            "search-p needs a power_mean aggregator, config has {}",
            cfg.model.aggregator.name()
        )));
    }
    let mut sc = cfg.search.unwrap_or_default();
    sc.record_time = record_time;
    sc.strategy = match (strategy, sc.strategy) {
        (StrategyArg::Grid, s @ Strategy::Grid { .. }) | (StrategyArg::Bayes, s @ Strategy::Bayes { .. }) => s,
        (StrategyArg::Grid, _) => SearchConfig::default().strategy,
        (StrategyArg::Bayes, _) => Strategy::Bayes { trials: 30, init_points: 5 },
        (StrategyArg::Gd, _) => Strategy::GradientJoint,
    };
    let data = cfg.dataset()?;
    let (tr, va, _) = cfg.split(&data)?;
    let result: SearchResult = match strategy {
        StrategyArg::Grid => grid_search(|p| objective_at_p(cfg, &tr.batch, &va.batch, p), &sc)?,
        StrategyArg::Bayes => bayes_search(|p| objective_at_p(cfg, &tr.batch, &va.batch, p), &sc)?,
        StrategyArg::Gd => {
            gradient_p_search(cfg, &tr.batch, &va.batch, &sc)?
        }
    };
    let name = result.strategy.clone();
    let files = vec![
        (format!("search_{name}.json"), json_bytes(&result)?),
        (format!("search_{name}_history.csv"), csv_bytes(|b| result.write_history_csv(b))?),
    ];
    write_artifacts(&cfg.output_dir, &format!("search-p {name}"), &files)?;
    if let Some(why) = &result.aborted {
        eprintln!("search aborted after {} entries: {why}", result.history.len());
        return Ok(Outcome::Aborted);
    }
    println!(
        "{name}: best p {} objective {} over {} entries",
        result.best_p,
        result.best_objective,
        result.history.len()
    );
    Ok(Outcome::Ok)
}

fn check_cmd(cfg: &ExperimentConfig, inject: bool) -> Result<Outcome> {
    let reports = run_checks(cfg, inject)?;
    write_artifacts(&cfg.output_dir, "check", &[("check_report.json".to_string(), json_bytes(&reports)?)])?;
    for r in &reports {
        println!(
            "{} {} worst {:e} tol {:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst_violation,
            r.tolerance
        );
        if let (false, Some(w)) = (r.passed, &r.witness) {
            println!("  witness: {w}");
        }
    }
    Ok(if reports.iter().all(|r| r.passed) {
        Outcome::Ok
    } else {
        Outcome::ChecksFailed
    })
}

fn sweep_cmd(cfg: &ExperimentConfig, dims: &[usize], seeds: &[u64]) -> Result<Outcome> {
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let rows = latent_sweep(cfg, dims, &seeds)?;
    let mut csv = String::from("seed,N,rmse\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.seed, r.latent, r.rmse).expect("string write");
    }
    write_artifacts(&cfg.output_dir, "latent-sweep", &[("latent_sweep.csv".to_string(), csv.into_bytes())])?;
    for r in &rows {
        println!("seed {} N {} rmse {}", r.seed, r.latent, r.rmse);
    }
    Ok(Outcome::Ok)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&load_config(&cfg)?, &out),
        Command::Train { cfg, resume } => train_cmd(&load_config(&cfg)?, resume.as_deref()),
        Command::SearchP {
            cfg,
            strategy,
            record_time,
        } => search_cmd(&load_config(&cfg)?, strategy, record_time),
        Command::Check {
            cfg,
            inject_order_sensitive,
        } => check_cmd(&load_config(&cfg)?, inject_order_sensitive),
        Command::LatentSweep { cfg, dims, seeds } => sweep_cmd(&load_config(&cfg)?, &dims, &seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Ok(Outcome::Aborted) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite(_) | Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}
