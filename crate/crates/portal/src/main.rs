use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use forge_core::eval::Visibility;
use forge_core::leaderboard::CompetitionSpec;
use forge_core::registry::Stage;
use forge_portal::http::{router, API_PREFIX};
use forge_portal::{DatasetSource, Platform, Principal, Role};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "forge", version, about = "Self-hosted AI competition platform")]
struct Cli {
    /// Directory holding the metadata database, blobs and datasets.
    #[arg(long, global = true, env = "FORGE_DATA_DIR", default_value = "forge-data")]
    data_dir: PathBuf,
    #[arg(long, global = true, env = "FORGE_LOG_LEVEL", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API with evaluation workers and the health prober.
    Serve {
        #[arg(long, env = "FORGE_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Overrides `workers` from forge.yaml.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run a standalone evaluation worker against the data directory.
    Worker {
        #[arg(long, default_value = "worker-1")]
        id: String,
        /// Drain the queue and exit instead of polling forever.
        #[arg(long)]
        once: bool,
    },
    #[command(subcommand)]
    Competition(CompetitionCmd),
    #[command(subcommand)]
    Dataset(DatasetCmd),
    #[command(subcommand)]
    Token(TokenCmd),
    #[command(subcommand)]
    Models(ModelsCmd),
    /// Pull a submission bundle into the model registry.
    Harvest { bundle_id: String },
    /// Move a model version to another stage.
    Promote { model_name: String, version: u32, stage: String },
}

#[derive(Subcommand)]
enum CompetitionCmd {
    /// Create a competition from a YAML spec.
    Create {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Ls,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Register a dataset from one combined NDJSON file or an inputs/labels pair.
    Add {
        dataset_id: String,
        #[arg(long, conflicts_with_all = ["inputs", "labels"], required_unless_present = "inputs")]
        file: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        inputs: Option<PathBuf>,
        #[arg(long, requires = "inputs")]
        labels: Option<PathBuf>,
        /// public_train, hidden_eval or proprietary
        #[arg(long)]
        visibility: String,
    },
    Ls,
}

#[derive(Subcommand)]
enum TokenCmd {
    /// Create a principal and print its bearer token.
    Mint {
        /// organizer, participant or product_team
        #[arg(long)]
        role: String,
        #[arg(long, default_value = "unnamed")]
        name: String,
    },
}

#[derive(Subcommand)]
enum ModelsCmd {
    Ls {
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        prefix: Option<String>,
    },
    /// Write every model version as NDJSON.
    Export {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Ask a running server to start serving a version.
    Serve {
        model_name: String,
        version: u32,
        #[arg(long, env = "FORGE_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = "FORGE_TOKEN")]
        token: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&cli.log_level).context("FORGE_LOG_LEVEL")?)
        .with_writer(std::io::stderr)
        .init();
    run(cli)
}

fn platform(data_dir: &Path) -> anyhow::Result<Platform> {
    Platform::open(data_dir).with_context(|| format!("opening data directory {}", data_dir.display()))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let admin = Principal::admin();
    match cli.command {
        Command::Serve { addr, workers } => serve(&cli.data_dir, addr, workers),
        Command::Worker { id, once } => {
            let p = platform(&cli.data_dir)?;
            let worker = p.worker(&id);
            if once {
                let done = worker.drain()?;
                eprintln!("evaluated {} record(s)", done.len());
            } else {
                let shutdown = Arc::new(AtomicBool::new(false));
                let flag = shutdown.clone();
                let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
                std::thread::spawn(move || {
                    rt.block_on(async { tokio::signal::ctrl_c().await.ok() });
                    flag.store(true, Ordering::SeqCst);
                });
                worker.run(&shutdown);
            }
            Ok(())
        }
        Command::Competition(CompetitionCmd::Create { file }) => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let spec: CompetitionSpec = serde_yaml::from_str(&text).with_context(|| file.display().to_string())?;
            let row = platform(&cli.data_dir)?.create_competition(spec, &admin)?;
            println!("{}", row.spec.competition_id);
            Ok(())
        }
        Command::Competition(CompetitionCmd::Ls) => print_json(&platform(&cli.data_dir)?.competitions()?),
        Command::Dataset(DatasetCmd::Add { dataset_id, file, inputs, labels, visibility }) => {
            let Some(visibility) = Visibility::parse(&visibility) else {
                bail!("unknown visibility {visibility:?}; use public_train, hidden_eval or proprietary");
            };
            let source = match (&file, &inputs, &labels) {
                (Some(f), _, _) => DatasetSource::Combined(f),
                (None, Some(i), Some(l)) => DatasetSource::Split { inputs: i, labels: l },
                _ => bail!("give --file or both --inputs and --labels"),
            };
            let (d, count) = platform(&cli.data_dir)?.register_dataset(&dataset_id, source, visibility)?;
            println!("{} {} records ({})", d.dataset_id, count, d.visibility.as_str());
            Ok(())
        }
        Command::Dataset(DatasetCmd::Ls) => {
            for (d, count) in platform(&cli.data_dir)?.datasets()? {
                println!("{}\t{}\t{}", d.dataset_id, d.visibility.as_str(), count);
            }
            Ok(())
        }
        Command::Token(TokenCmd::Mint { role, name }) => {
            let Some(role) = Role::parse(&role) else {
                bail!("unknown role {role:?}; use organizer, participant or product_team");
            };
            let (principal, token) = platform(&cli.data_dir)?.mint_token(&name, role)?;
            eprintln!("minted {} ({}) for {}", principal.principal_id, principal.role, principal.display_name);
            println!("{token}");
            Ok(())
        }
        Command::Models(ModelsCmd::Ls { stage, prefix }) => {
            let stage = stage.map(|s| Stage::parse(&s).with_context(|| format!("unknown stage {s:?}"))).transpose()?;
            for m in platform(&cli.data_dir)?.models(stage, prefix.as_deref(), &admin)? {
                let gate = m.model.gate_verdict.map(|v| format!("{v:?}").to_lowercase()).unwrap_or_else(|| "-".into());
                println!("{}\t{}\t{}\tgate={}\t{}", m.model.model_name, m.model.version, m.model.stage, gate, m.model.source_bundle_id);
            }
            Ok(())
        }
        Command::Models(ModelsCmd::Export { output }) => {
            let bytes = platform(&cli.data_dir)?.registry().export_ndjson()?;
            match output {
                Some(path) => std::fs::write(&path, bytes).with_context(|| path.display().to_string())?,
                None => std::io::stdout().write_all(&bytes)?,
            }
            Ok(())
        }
        Command::Models(ModelsCmd::Serve { model_name, version, addr, token }) => {
            let base = if addr.starts_with("http") { addr } else { format!("http://{addr}") };
            let url = format!("{base}{API_PREFIX}/models/{model_name}/{version}/serve");
            let resp = reqwest::blocking::Client::new().post(&url).bearer_auth(token).send()?;
            let status = resp.status();
            let body = resp.text()?;
            if !status.is_success() {
                bail!("{status}: {body}");
            }
            println!("{body}");
            Ok(())
        }
        Command::Harvest { bundle_id } => print_json(&platform(&cli.data_dir)?.harvest(&bundle_id, &admin)?),
        Command::Promote { model_name, version, stage } => {
            let stage = Stage::parse(&stage).with_context(|| format!("unknown stage {stage:?}"))?;
            print_json(&platform(&cli.data_dir)?.promote(&model_name, version, stage, &admin)?)
        }
    }
}

fn serve(data_dir: &Path, addr: SocketAddr, workers: Option<usize>) -> anyhow::Result<()> {
    let platform = Arc::new(platform(data_dir)?);
    let shutdown = Arc::new(AtomicBool::new(false));
    let restored = platform.restore_services()?;
    if restored > 0 {
        tracing::info!(restored, "services restored");
    }
    let prober = platform.spawn_prober(shutdown.clone());
    let worker_threads: Vec<_> = (0..workers.unwrap_or(platform.config().workers))
        .map(|i| {
            let worker = platform.worker(&format!("worker-{}", i + 1));
            let stop = shutdown.clone();
            std::thread::spawn(move || worker.run(&stop))
        })
        .collect();

    let rt = tokio::runtime::Runtime::new()?;
    let app = router(platform.clone());
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on http://{}{API_PREFIX}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        anyhow::Ok(())
    })?;

    tracing::info!("shutting down");
    shutdown.store(true, Ordering::SeqCst);
    for t in worker_threads {
        let _ = t.join();
    }
    let _ = prober.join();
    platform.serving().stop_all();
    Ok(())
}
