use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dral_core::data::OracleKind;
use dral_core::experiment::{compare, metrics_csv, run_al, scatter_for, DatasetSource, ExperimentConfig};
use dral_core::gradcheck::{run_grad_check, COMPOSED_TOLERANCE, LAYER_TOLERANCE};
use dral_core::strategies::StrategyName;
use dral_core::write_atomic;
use dral_service::Registry;

#[derive(Parser, Debug)]
#[command(name = "dral", version, about = "Reinforcement-learned active learning on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed overriding the config's (base seed for `compare`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured blob dataset as JSON.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One active-learning run; writes the metrics CSV.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        strategy: Option<StrategyName>,
        /// Scatter JSON of the selected samples.
        #[arg(long)]
        scatter_out: Option<PathBuf>,
        /// Agent checkpoint JSON (dral only).
        #[arg(long)]
        agent_out: Option<PathBuf>,
    },
    /// Strategies × seeds; writes the accuracy-by-labels table.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated strategy names.
        #[arg(
            long,
            alias = "strategy",
            value_delimiter = ',',
            default_value = "random,entropy,least-confidence,margin,dral"
        )]
        strategies: Vec<StrategyName>,
        /// A count (seeds start at --seed or the config seed) or a comma-separated list.
        #[arg(long, default_value = "5")]
        seeds: String,
        /// Metrics CSV of every run.
        #[arg(long)]
        runs_out: Option<PathBuf>,
    },
    /// HTTP label service.
    Serve {
        /// Config for a session started at launch; its oracle is set to deferred.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        strategy: Option<StrategyName>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory of static UI files served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    GradCheck,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global query budget B.
    #[arg(long)]
    budget: Option<usize>,
    /// Labels per round b.
    #[arg(long)]
    round_budget: Option<usize>,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>, strategy: Option<StrategyName>) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(b) = self.budget {
            cfg.global_budget = b;
        }
        if let Some(b) = self.round_budget {
            cfg.round_budget = b;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(s) = strategy {
            cfg.strategy = s;
        }
        cfg.validate().context("invalid config")?;
        Ok(cfg)
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            // a closed pipe (e.g. `| head`) is not an error
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to standard output"),
            _ => Ok(()),
        },
    }
}

fn parse_seeds(spec: &str, base: u64) -> anyhow::Result<Vec<u64>> {
    let bad = || format!("--seeds expects a count or a comma-separated list, got {spec:?}");
    if spec.contains(',') {
        spec.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse().with_context(bad)).collect()
    } else {
        let n: u64 = spec.trim().parse().with_context(bad)?;
        if n == 0 {
            bail!("--seeds must be at least 1");
        }
        Ok((base..base + n).collect())
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenerateData { cfg } => {
            let cfg = cfg.load(cli.seed, None)?;
            let DatasetSource::Blobs(spec) = &cfg.dataset else {
                bail!("generate-data needs a blob dataset in the config, not a file");
            };
            emit(out, &spec.generate(cfg.seed)?.to_json()?)?;
        }
        Command::Run { cfg, strategy, scatter_out, agent_out } => {
            let cfg = cfg.load(cli.seed, strategy)?;
            if cfg.oracle != OracleKind::Simulated {
                bail!("`run` uses the simulated oracle; start a session through `serve` for human labels");
            }
            let run = run_al(&cfg)?;
            emit(out.or(cfg.metrics_out.as_deref()), &metrics_csv([&run.log])?)?;
            if let Some(path) = scatter_out.as_deref().or(cfg.scatter_out.as_deref()) {
                let scatter = scatter_for(&cfg.load_dataset()?, &run)?;
                write_atomic(path, scatter.to_json()?.as_bytes())?;
            }
            if let Some(path) = agent_out.as_deref().or(cfg.agent_out.as_deref()) {
                let Some(agent) = &run.agent else {
                    bail!("--agent-out needs the dral strategy");
                };
                write_atomic(path, serde_json::to_string(agent)?.as_bytes())?;
            }
        }
        Command::Compare { cfg, strategies, seeds, runs_out } => {
            let cfg = cfg.load(None, None)?;
            let seeds = parse_seeds(&seeds, cli.seed.unwrap_or(cfg.seed))?;
            let (table, runs) = compare(&cfg, &strategies, &seeds)?;
            emit(out, &table.to_csv()?)?;
            if let Some(path) = runs_out {
                write_atomic(&path, metrics_csv(runs.iter().map(|r| &r.log))?.as_bytes())?;
            }
        }
        Command::Serve { cfg, strategy, port, host, ui_dir } => {
            let registry = Arc::new(Registry::new());
            let initial = if cfg.config.is_some() || strategy.is_some() {
                let mut config = cfg.load(cli.seed, strategy)?;
                config.oracle = OracleKind::Deferred;
                Some(registry.create(config).map_err(|e| anyhow::anyhow!("{e}"))?.id())
            } else {
                None
            };
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            let out = out.map(Path::to_path_buf);
            runtime
                .block_on(dral_service::serve(SocketAddr::new(host, port), registry, ui_dir, |addr| {
                    eprintln!("listening on http://{addr}");
                    if let Some(id) = initial {
                        eprintln!("session {id} started");
                    }
                    if let Some(path) = out {
                        let info = serde_json::json!({ "address": addr.to_string(), "session": initial });
                        if let Err(e) = write_atomic(&path, info.to_string().as_bytes()) {
                            log::error!("{e}");
                        }
                    }
                }))
                .with_context(|| format!("serving on {host}:{port}"))?;
        }
        Command::GradCheck => {
            let report = run_grad_check(cli.seed.unwrap_or(0))?;
            for c in &report.checks {
                println!(
                    "{:<28} {:>6} params  max rel error {:.3e}  (tol {:.0e})  {}",
                    c.name,
                    c.params_checked,
                    c.max_rel_error,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("max relative error (layers): {:.3e} < {LAYER_TOLERANCE:.0e}", report.max_layer_error());
            println!(
                "max relative error (critic∘actor): {:.3e} < {COMPOSED_TOLERANCE:.0e}",
                report.max_composed_error()
            );
            if let Some(path) = out {
                write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRAL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
