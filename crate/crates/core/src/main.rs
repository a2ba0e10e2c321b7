use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nodesafe::config::{Method, RunConfig};
use nodesafe::oodgen::{OodSpec, SbmConfig};
use nodesafe::{pipeline, selfcheck, Error, Result};

#[derive(Parser)]
#[command(name = "nodesafe", version, about = "Node-level OOD detection on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an SBM dataset from a JSON config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive an OOD dataset from an existing one.
    MakeOod {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON OOD spec, e.g. {"kind": "structure", "frac_ood": 0.2}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a method and evaluate the selected model.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set method=gnnsafe.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved checkpoint.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several methods over several seeds and tabulate mean ± std.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated method names; all methods when omitted.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, identity, propagation and metric suites.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => {
            let cfg: SbmConfig = read_json(&config)?;
            let g = pipeline::cmd_generate(&cfg, &out)?;
            println!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), out.display());
        }
        Command::MakeOod { dataset, spec, out } => {
            let spec: OodSpec = read_json(&spec)?;
            let g = pipeline::cmd_make_ood(&dataset, &spec, &out)?;
            println!("wrote {} nodes to {}", g.num_nodes(), out.display());
        }
        Command::Train {
            dataset,
            config,
            overrides,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let r = pipeline::cmd_train(&dataset, &cfg, &out)?;
            println!(
                "{} seed {}: AUROC {:.4} AUPR {:.4} FPR95 {:.4} ID acc {:.4}",
                r.method, r.seed, r.auroc, r.aupr, r.fpr95, r.id_accuracy
            );
        }
        Command::Evaluate {
            dataset,
            checkpoint,
            overrides,
            out,
        } => {
            let r = pipeline::cmd_evaluate(&dataset, &checkpoint, &overrides, &out)?;
            println!(
                "{} ({}): AUROC {:.4} AUPR {:.4} FPR95 {:.4} ID acc {:.4}",
                r.method, r.score_kind, r.auroc, r.aupr, r.fpr95, r.id_accuracy
            );
        }
        Command::Compare {
            dataset,
            config,
            overrides,
            methods,
            seeds,
            out,
        } => {
            let base = RunConfig::load(config.as_deref(), &overrides)?;
            let methods = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?
            };
            let c = pipeline::cmd_compare(&dataset, &base, &methods, &seeds, &out)?;
            print!("{}", c.to_table());
        }
        Command::Selfcheck { seed } => {
            let reports = selfcheck::run_all(seed);
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed) {
                return Err(Error::Numerical("self-check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
