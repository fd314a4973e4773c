use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fi_core::experiment::{
    cmd_ensemble_sweep, cmd_fairness_sweep, cmd_infer, cmd_latency_sweep, cmd_partition, cmd_train,
    fairness_csv, to_csv, ExperimentConfig, ExperimentError,
};
use fi_core::kv;

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "fi", version, about = "Secret-shared ensemble inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One protected inference job with escrow settlement (JSON report)
    Infer(Common),
    /// Secure forward pass cost on every network preset (CSV)
    LatencySweep(Common),
    /// Ensemble accuracy over the alpha and scheme grid (CSV)
    EnsembleSweep(Common),
    /// Reward fairness over the alpha grid (CSV)
    FairnessSweep(Common),
    /// Dirichlet split of the training set into per-client CSV files
    Partition(Common),
    /// Train one model and save its weights
    Train(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated Dirichlet concentrations
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    parties: Option<usize>,
    /// Comma-separated ensemble schemes
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Output file (directory for `partition`); stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set abort_phase=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut map = match &self.config {
            Some(p) => kv::parse(&std::fs::read_to_string(p)?)?,
            None => BTreeMap::new(),
        };
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("preset", self.preset.clone()),
            ("alpha", self.alpha.clone()),
            ("clients", self.clients.map(|v| v.to_string())),
            ("parties", self.parties.map(|v| v.to_string())),
            ("scheme", self.scheme.clone()),
            ("model", self.model.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
        ExperimentConfig::from_map(&map)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), ExperimentError> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn run(cmd: Command) -> Result<bool, ExperimentError> {
    let (common, kind) = match &cmd {
        Command::Infer(c) => (c, "infer"),
        Command::LatencySweep(c) => (c, "latency"),
        Command::EnsembleSweep(c) => (c, "ensemble"),
        Command::FairnessSweep(c) => (c, "fairness"),
        Command::Partition(c) => (c, "partition"),
        Command::Train(c) => (c, "train"),
    };
    let cfg = common.config()?;
    let out = cfg.out.as_deref();
    log::info!("{kind} with config {}", cfg.hash());
    match kind {
        "infer" => {
            let report = cmd_infer(&cfg)?;
            emit(out, &json(&report))?;
            if let Some(a) = &report.abort {
                eprintln!("party {} aborted in phase {}: {}", a.party, a.phase, a.detail);
                return Ok(false);
            }
        }
        "latency" => emit(out, &to_csv(&cmd_latency_sweep(&cfg)?)?)?,
        "ensemble" => emit(out, &to_csv(&cmd_ensemble_sweep(&cfg)?)?)?,
        "fairness" => emit(out, &fairness_csv(&cmd_fairness_sweep(&cfg)?, cfg.clients))?,
        "partition" => {
            let dir = out.unwrap_or(Path::new("partition"));
            let manifest = cmd_partition(&cfg, dir)?;
            print!("{}", json(&manifest));
        }
        _ => {
            let path = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(format!("model_{}.bin", cfg.seed)));
            print!("{}", json(&cmd_train(&cfg, &path)?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_ABORT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { 1 })
        }
    }
}
