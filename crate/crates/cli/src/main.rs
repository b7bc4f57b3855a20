//! `eitshape`: simulate data, reconstruct admittivity and geometry, verify
//! Jacobians and export meshes.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure,
//! 3 acceptance-threshold breach.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eit_shape::phantoms::PhantomId;
use eit_shape::recon::Mode;

#[derive(Parser)]
#[command(name = "eitshape", version, about = "EIT with unknown boundary shape and electrode positions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy data for a phantom on a fine mesh.
    Simulate {
        #[arg(long)]
        phantom: Option<PhantomId>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output stem (default `<output root>/<phantom>-s<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the reconstruction selected by the mode.
    Reconstruct {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data set written by `simulate`; otherwise data are simulated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        phantom: Option<PhantomId>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic Jacobians with finite differences on a coarse case.
    CheckJacobians(commands::CheckArgs),
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Write the reconstruction-style mesh of a phantom as JSON.
    Export {
        #[arg(long, default_value = "exp1")]
        phantom: PhantomId,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Target edge length (default perimeter / 200).
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown mode '{s}' (simultaneous, fixed-geometry-truth, fixed-geometry-guess)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { phantom, seed, config, out, force } => {
            commands::load_config(config.as_deref(), phantom, seed).and_then(|c| commands::simulate(&c, out, force))
        }
        Command::Reconstruct { config, data, phantom, seed, mode, out, force } => {
            commands::load_config(config.as_deref(), phantom, seed).and_then(|mut c| {
                if data.is_some() {
                    c.data = data;
                }
                if let Some(m) = mode {
                    c.mode = m;
                }
                if out.is_some() {
                    c.output = out;
                }
                commands::reconstruct(&c, force).map(|_| 0)
            })
        }
        Command::CheckJacobians(args) => commands::check_jacobians(&args),
        Command::Mesh { command: MeshCommand::Export { phantom, seed, h, out, force } } => {
            commands::export_mesh(phantom, seed, h, &out, force).map(|_| 0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
