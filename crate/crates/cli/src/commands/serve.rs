//! `serve`: the HTTP API over a checkpoint directory.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use stamp_serve::{router, with_static, AppState, DEFAULT_PORT};

use crate::error::CliError;

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "STAMPFORMER_CHECKPOINTS")]
    pub checkpoints: PathBuf,
    /// Material catalogue (defaults to CHECKPOINTS/materials).
    #[arg(long, env = "STAMPFORMER_MATERIALS")]
    pub materials: Option<PathBuf>,
    #[arg(long, env = "STAMPFORMER_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Directory of static assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    if !a.checkpoints.is_dir() {
        return Err(CliError::config(format!("{} is not a directory", a.checkpoints.display())));
    }
    let state = Arc::new(AppState::from_dirs(&a.checkpoints, a.materials.as_deref())?);
    if state.models().is_empty() {
        log::warn!("no checkpoints under {}; /predict will answer 503", a.checkpoints.display());
    }
    let mut app = router(state);
    if let Some(dir) = &a.static_dir {
        app = with_static(app, dir.clone());
    }
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data(e.to_string()))?;
    rt.block_on(stamp_serve::serve(app, addr))?;
    Ok(())
}
