use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::calibration::{read_css, CssMatrix};
use specrecon::datacube::{read_cube, Datacube};
use specrecon::forward_model::{build_pair_set, check_grid, resample_css, write_pair_set, PairOptions};

use crate::config::FlatConfig;
use crate::{absolute, file_stem, list_cubes, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Directory of HSC1 cubes (*.hsc)
    #[arg(long)]
    pub cubes: PathBuf,
    /// Camera spectral sensitivity CSV
    #[arg(long)]
    pub css: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub patch_width: usize,
    #[arg(long, default_value_t = 241)]
    pub patch_height: usize,
    /// Linearly resample the CSS onto the cube wavelength grid
    #[arg(long)]
    pub resample: bool,
    /// Round simulated RGB to 8-bit codes
    #[arg(long)]
    pub quantize_8bit: bool,
}

impl SimulateArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.cubes)?;
        absolute(&mut self.css)
    }
}

/// Loads every cube in `dir`, checking each one against `css` (resampled onto
/// the first cube's grid when asked). Errors name the offending cube.
pub(crate) fn load_matched(
    dir: &std::path::Path,
    css: &CssMatrix,
    resample: bool,
) -> Result<(Vec<(String, Datacube)>, CssMatrix)> {
    let mut cubes = Vec::new();
    let mut matched: Option<CssMatrix> = None;
    for path in list_cubes(dir)? {
        let cube = read_cube(&path).with_context(|| format!("reading {}", path.display()))?;
        let css = match &matched {
            Some(m) => m.clone(),
            None if resample => resample_css(css, cube.wavelengths())
                .with_context(|| format!("resampling CSS for {}", path.display()))?,
            None => css.clone(),
        };
        check_grid(&cube, &css).with_context(|| format!("cube {}", path.display()))?;
        matched = Some(css);
        cubes.push((file_stem(&path), cube));
    }
    Ok((cubes, matched.expect("list_cubes never returns an empty list")))
}

pub fn run(args: &SimulateArgs, ctx: &RunContext) -> Result<Outcome> {
    super::no_config(ctx, "simulate")?;
    let css = read_css(&args.css)?;
    let (named, css) = load_matched(&args.cubes, &css, args.resample)?;
    let cubes: Vec<Datacube> = named.iter().map(|(_, c)| c.clone()).collect();
    let pairs = build_pair_set(
        &cubes,
        &css,
        args.patch_width,
        args.patch_height,
        PairOptions {
            quantize_8bit: args.quantize_8bit,
        },
    )?;
    write_pair_set(&pairs, ctx.stage.root())?;

    let mut sources = String::from("source,cube\n");
    for (i, (name, _)) in named.iter().enumerate() {
        sources.push_str(&format!("{i},{name}\n"));
    }
    std::fs::write(ctx.stage.path("sources.csv"), sources)?;
    println!("{} pairs from {} cubes", pairs.len(), named.len());

    let mut resolved = FlatConfig::default();
    resolved.set("patch_width", args.patch_width as i64);
    resolved.set("patch_height", args.patch_height as i64);
    resolved.set("resample", args.resample);
    resolved.set("quantize_8bit", args.quantize_8bit);
    resolved.set("pairs", pairs.len() as i64);
    Ok(Outcome { resolved })
}
