use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use clipdrag::finetune::LoraConfig;
use clipdrag::pipeline::BackendSpec;
use clipdrag_cli::commands::{self, CliError, Exit};
use clipdrag_cli::service::{self, AppState, ServiceConfig};
use log::{error, info, warn};

#[derive(Parser)]
#[command(name = "clipdrag", version, about = "Text and drag guided image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one job file and write its output bundle.
    Edit {
        /// Job file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `hyperparams.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory holding one subdirectory per job.
        #[arg(long, default_value = "clipdrag-jobs")]
        data: PathBuf,
        /// TOML file with the backend used when a submission names none.
        #[arg(long)]
        backend: Option<PathBuf>,
    },
    /// Run every job in a directory at several iteration caps.
    Eval {
        #[arg(long)]
        jobs: PathBuf,
        /// Comma separated iteration caps.
        #[arg(long, default_value = "10,20,40,80,160", value_parser = commands::parse_sweep)]
        sweep: std::vec::Vec<usize>,
        /// Report directory; defaults to `<jobs>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune identity adapters for one image.
    Finetune {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Adapter archive to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the freshly initialized backend, ignored with `--backend`.
        #[arg(long, default_value_t = 0)]
        backend_seed: u64,
        /// TOML file describing the backend.
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_backend(path: Option<&Path>, seed: u64) -> Result<BackendSpec, CliError> {
    let Some(path) = path else {
        return Ok(BackendSpec { seed, ..BackendSpec::default() });
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let mut backend: BackendSpec =
        toml::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut backend.checkpoint, &mut backend.adapters].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(backend)
}

fn print_json(value: &impl serde::Serialize) {
    match serde_json::to_string_pretty(value) {
        Ok(text) => println!("{text}"),
        Err(e) => warn!("cannot print summary: {e}"),
    }
}

fn run(command: Command) -> Result<Exit, CliError> {
    match command {
        Command::Edit { config, out, seed } => {
            let cancel = Arc::new(AtomicBool::new(false));
            let flag = cancel.clone();
            ctrlc::set_handler(move || {
                eprintln!("interrupt received, stopping after the current iteration");
                flag.store(true, Ordering::SeqCst);
            })
            .map_err(|e| CliError {
                exit: Exit::Failed,
                message: format!("cannot install signal handler: {e}"),
            })?;
            let (summary, exit) = commands::edit(&config, &out, seed, &cancel)?;
            print_json(&summary);
            if let Some(e) = &summary.error {
                error!("{e}");
            }
            info!("bundle written to {}", out.display());
            Ok(exit)
        }
        Command::Serve {
            port,
            workers,
            host,
            data,
            backend,
        } => {
            if workers == 0 {
                return Err(CliError::invalid("workers must be at least 1"));
            }
            let backend = load_backend(backend.as_deref(), 0)?;
            let state = AppState::new(ServiceConfig {
                root: data,
                workers,
                backend,
            })?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError {
                exit: Exit::Failed,
                message: e.to_string(),
            })?;
            runtime
                .block_on(async move {
                    let listener = tokio::net::TcpListener::bind(SocketAddr::new(host, port)).await?;
                    let shutdown = async {
                        let _ = tokio::signal::ctrl_c().await;
                    };
                    service::serve(listener, state, shutdown).await
                })
                .map_err(|e| CliError {
                    exit: Exit::Failed,
                    message: e.to_string(),
                })?;
            Ok(Exit::Ok)
        }
        Command::Eval { jobs, sweep, out } => {
            let out = out.unwrap_or_else(|| jobs.join("report"));
            let report = commands::eval(&jobs, &sweep, &out)?;
            print!("{}", report.to_table());
            info!("report written to {}", out.display());
            Ok(Exit::Ok)
        }
        Command::Finetune {
            image,
            prompt,
            out,
            seed,
            backend_seed,
            backend,
            steps,
        } => {
            let backend = load_backend(backend.as_deref(), backend_seed)?;
            let mut lora = LoraConfig::default();
            if let Some(steps) = steps {
                lora.steps = steps;
            }
            let summary = commands::finetune(&image, &prompt, &out, &backend, &lora, seed)?;
            print_json(&summary);
            Ok(Exit::Ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exit = run(cli.command).unwrap_or_else(|e| {
        error!("{e}");
        e.exit
    });
    ExitCode::from(exit as u8)
}
