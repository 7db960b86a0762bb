use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::ptnet::{PtnetConfig, PtnetModel};

use super::reconstruct::load_model;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InfoArgs {
    /// Describe the model stored in this checkpoint
    #[arg(long, conflicts_with = "full_scale")]
    pub checkpoint: Option<PathBuf>,
    /// Describe the full-size configuration (31 bands, 240x128 patches)
    #[arg(long)]
    pub full_scale: bool,
    /// Also list every parameter tensor
    #[arg(long)]
    pub shapes: bool,
}

pub fn run(args: &InfoArgs) -> Result<()> {
    let model = match (&args.checkpoint, args.full_scale) {
        (Some(path), _) => load_model(path)?,
        (None, true) => PtnetModel::<f32>::new(PtnetConfig::full_scale(), 0)?,
        (None, false) => bail!("info needs --checkpoint <file> or --full-scale"),
    };
    for (name, value) in model.config().fields() {
        if name == "branches" {
            println!("{name:<22} {}", model.config().branches);
        } else {
            println!("{name:<22} {value}");
        }
    }
    println!("{:<22} {}", "parameters", model.parameter_count());
    if args.shapes {
        for (name, shape) in model.shape_dump() {
            println!("  {name:<40} {shape:?}");
        }
    }
    Ok(())
}
