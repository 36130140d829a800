use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use griffonforge_core::expert::fake::{self, FakeScript, FakeStats};
use griffonforge_core::service::{self, read_samples, ServiceConfig, Store, SystemClock};
use tokio::net::TcpListener;

use crate::error::{CliError, Exit};
use crate::io::{open_input, open_output};
use crate::settings::Settings;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Journal directory; in-memory when omitted.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    /// Review lease duration in seconds.
    #[arg(long)]
    pub lease_secs: Option<u64>,
    /// Load samples (any state) from JSONL before serving.
    #[arg(long)]
    pub import: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Accepted samples (JSONL); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FakeExpertArgs {
    #[arg(long)]
    pub listen: Option<String>,
}

async fn bind(addr: &str) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => {
            CliError::new(Exit::PortInUse, format!("{addr}: address already in use"))
        }
        _ => CliError::other(format!("{addr}: {e}")),
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

pub fn serve(args: ServeArgs, settings: &Settings) -> Result<(), CliError> {
    let defaults = ServiceConfig::default();
    let cfg = ServiceConfig {
        listen: settings.pick(args.listen, "listen", defaults.listen.clone())?,
        data_dir: settings.pick_opt(args.data_dir, "data_dir")?,
        lease_duration: Duration::from_secs(settings.pick(
            args.lease_secs,
            "lease_secs",
            defaults.lease_duration.as_secs(),
        )?),
        snapshot_every: settings.pick(None, "snapshot_every", defaults.snapshot_every)?,
        fsync: settings.pick(None, "fsync", defaults.fsync)?,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        // Bind first so a busy port never touches the journal.
        let listener = bind(&cfg.listen).await?;
        let store = Arc::new(Store::open(&cfg, Arc::new(SystemClock))?);
        if let Some(path) = &args.import {
            let report = store.import(read_samples(open_input(path)?)?)?;
            tracing::info!(inserted = report.inserted, rejected = report.rejected.len(), "import done");
            for r in &report.rejected {
                tracing::warn!(id = %r.id, error = %r.error, "import rejected");
            }
        }
        let stats = store.stats();
        tracing::info!(addr = %listener.local_addr()?, total = stats.total, accepted = stats.accepted, "review service listening");
        service::serve(listener, store, shutdown_signal()).await?;
        Ok(())
    })
}

pub fn export(args: ExportArgs, _settings: &Settings) -> Result<(), CliError> {
    if !args.data_dir.is_dir() {
        return Err(CliError::other(format!(
            "{}: not a directory",
            args.data_dir.display()
        )));
    }
    let store = Store::load_read_only(&args.data_dir, Arc::new(SystemClock))?;
    let mut out = open_output(args.out.as_ref())?;
    let n = store.export_accepted(&mut out)?;
    out.flush()?;
    tracing::info!(accepted = n, "export done");
    Ok(())
}

pub fn fake_expert(args: FakeExpertArgs, settings: &Settings) -> Result<(), CliError> {
    let listen = settings.pick(args.listen, "listen", "127.0.0.1:8089".to_string())?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = bind(&listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "fake expert listening");
        tokio::select! {
            r = fake::serve(listener, FakeScript::default(), Arc::new(FakeStats::default())) => r?,
            _ = shutdown_signal() => {}
        }
        Ok(())
    })
}
