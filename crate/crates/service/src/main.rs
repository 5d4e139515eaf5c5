use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gate_core::lm::{Gateway, LmProfile};
use gate_service::api::{self, AppState};
use gate_service::clock::SystemClock;
use gate_service::config::{self, ServeConfig, SimulationMatrix};
use gate_service::ingest::{self, IngestOptions, PoolFormat};
use gate_service::reports;
use gate_service::store::{FileStore, ENV_DATA_DIR};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "gate",
    version,
    about = "Interactive task elicitation: serve, simulate, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Store root; defaults to $GATE_DATA_DIR, then ./gate-data.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Use deterministic offline language models.
        #[arg(long)]
        mock: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Run personas over a domains × methods matrix and write a report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mock: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise completed sessions in a store.
    Evaluate {
        #[arg(long, alias = "sessions")]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefilter and cluster a candidate pool.
    IngestPool {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolFormat::Jsonl)]
        format: PoolFormat,
        #[arg(long, default_value = "pool-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        target: usize,
        #[arg(long, default_value_t = gate_core::pool::DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gate_core::pool::DEFAULT_EMBEDDING_DIM)]
        embedding_dim: usize,
    },
    /// Write curve, AUC and preference-shift tables as CSV plus JSON.
    Export {
        #[arg(long, alias = "sessions")]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "export")]
        out: PathBuf,
    },
}

fn load_serve_config(path: Option<&Path>) -> Result<(ServeConfig, PathBuf)> {
    match path {
        Some(p) => Ok((config::read_json(p)?, config::base_dir(p))),
        None => Ok((ServeConfig::default(), PathBuf::from("."))),
    }
}

fn gateways(cfg: &ServeConfig, mock: bool, seed: u64) -> Result<(Gateway, Gateway)> {
    let (elicitor, predictor) = if mock {
        let (e, p, _) = reports::mock_profiles(seed);
        (e, p)
    } else {
        let elicitor = cfg.elicitor.clone().unwrap_or_else(|| LmProfile::http(None));
        let predictor = cfg.predictor.clone().unwrap_or_else(|| elicitor.clone());
        (elicitor, predictor)
    };
    Ok((Gateway::from_profile(elicitor)?, Gateway::from_profile(predictor)?))
}

fn write_output(out: Option<&Path>, json: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, json).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn evaluation(store: &Path, config: Option<&Path>, mock: bool, seed: u64) -> Result<reports::EvaluationReport> {
    if !store.is_dir() {
        anyhow::bail!("{} is not a directory", store.display());
    }
    let (cfg, base) = load_serve_config(config)?;
    let registry = config::load_registry(&base, &cfg.domains)?;
    let (_, predictor) = gateways(&cfg, mock, seed)?;
    reports::evaluate(&FileStore::open(store)?, &registry, &predictor)
}

async fn serve(
    config: Option<PathBuf>,
    store: Option<PathBuf>,
    mock: bool,
    seed: u64,
    bind: Option<String>,
) -> Result<()> {
    let (cfg, base) = load_serve_config(config.as_deref())?;
    let root = store
        .or_else(|| std::env::var_os(ENV_DATA_DIR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gate-data"));
    let registry = config::load_registry(&base, &cfg.domains)?;
    let pools = config::load_pools(&base, &cfg.pools)?;
    let (elicitor, predictor) = gateways(&cfg, mock, seed)?;
    let state = AppState::new(
        registry,
        pools,
        elicitor,
        predictor,
        FileStore::open(&root)?,
        Arc::new(SystemClock),
    )?;
    let static_dir = cfg.static_dir.as_ref().map(|d| config::resolve(&base, d));
    let app = api::router(state, static_dir.as_deref()).layer(tower_http::trace::TraceLayer::new_for_http());
    let addr = bind.or(cfg.bind).unwrap_or_else(|| "127.0.0.1:8080".to_string());
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, store = %root.display(), "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            config,
            store,
            mock,
            seed,
            bind,
        } => tokio::runtime::Runtime::new()?.block_on(serve(config, store, mock, seed, bind)),
        Command::Simulate {
            config,
            mock,
            seed,
            out,
        } => {
            let mut matrix: SimulationMatrix = config::read_json(&config)?;
            if let Some(seed) = seed {
                matrix.seed = seed;
            }
            let report = reports::simulate(&matrix, &config::base_dir(&config), mock)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        Command::Evaluate {
            store,
            config,
            mock,
            seed,
            out,
        } => {
            let report = evaluation(&store, config.as_deref(), mock, seed)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        Command::IngestPool {
            input,
            format,
            out,
            target,
            clusters,
            seed,
            embedding_dim,
        } => {
            let summary = ingest::ingest_pool(
                &input,
                &out,
                &IngestOptions {
                    format,
                    target,
                    clusters,
                    seed,
                    embedding_dim,
                },
            )?;
            eprintln!(
                "read {} items, kept {}, {} clusters -> {}",
                summary.read,
                summary.kept,
                summary.nonempty_clusters,
                out.display()
            );
            Ok(())
        }
        Command::Export {
            store,
            config,
            mock,
            seed,
            out,
        } => {
            let report = evaluation(&store, config.as_deref(), mock, seed)?;
            reports::export(&report, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}
