//! `stampformer`: data generation, training, evaluation, prediction, mesh
//! export and the HTTP service behind one binary.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use error::CliError;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (git ", env!("STAMPFORMER_GIT_HASH"), ")");

#[derive(Debug, Parser)]
#[command(name = "stampformer", version = VERSION, about = "Stamping-field surrogate workbench", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a material family and write one CSV per curve.
    GenMaterials(commands::data::GenMaterialsArgs),
    /// Sample panel geometries and rasterise their height-maps.
    GenGeometries(commands::data::GenGeometriesArgs),
    /// Split geometries and pair each with one material per cluster.
    GenDoe(commands::data::GenDoeArgs),
    /// Run the forming oracle on every DoE entry.
    GenDataset(commands::data::GenDatasetArgs),
    /// Train one field model.
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(commands::eval::EvalArgs),
    /// Predict a field for one geometry and material.
    Predict(commands::predict::PredictArgs),
    /// Reconstruct the formed surface of a sample as a PLY mesh.
    ExportMesh(commands::mesh::ExportMeshArgs),
    /// Serve the HTTP API.
    Serve(commands::serve::ServeArgs),
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenMaterials(a) => commands::data::gen_materials(&a),
        Command::GenGeometries(a) => commands::data::gen_geometries(&a),
        Command::GenDoe(a) => commands::data::gen_doe(&a),
        Command::GenDataset(a) => commands::data::gen_dataset(&a),
        Command::Train(a) => commands::train::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval::eval(&a).map(|_| ()),
        Command::Predict(a) => commands::predict::predict(&a),
        Command::ExportMesh(a) => commands::mesh::export_mesh(&a),
        Command::Serve(a) => commands::serve::serve(&a),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::config(e.to_string()))?;
    execute(cli.command)
}

/// Like [`run`], printing usage or the error and returning the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
        Ok(cli) => match execute(cli.command) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}
