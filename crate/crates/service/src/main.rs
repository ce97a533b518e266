use std::io::Write;

use anyhow::{Context, Result};
use bt_teach::api::{serve_on, AppState};
use bt_teach::cli::{execute, Cli, Command};
use bt_teach_core::workspace::Workspace;
use clap::Parser;

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Serve { addr } => {
            let ws = Workspace::open(&cli.workspace)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                tracing::info!("serving {} on {}", cli.workspace.display(), listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                serve_on(listener, AppState::new(ws), shutdown).await?;
                Ok(())
            })
        }
        _ => {
            let mut out = std::io::stdout().lock();
            execute(&cli, &mut out)?;
            out.flush()?;
            Ok(())
        }
    }
}
