use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::calibration::{read_css, CssMatrix};
use specrecon::datacube::{read_cube, write_cube, Datacube};
use specrecon::forward_model::{check_grid, resample_css, simulate_rgb, RgbImage};
use specrecon::ptnet::{load_checkpoint, reconstruct_image, PtnetModel};

use super::calibrate::parse_grid;
use crate::config::FlatConfig;
use crate::{absolute, file_stem, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReconstructArgs {
    /// PTN1 checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB image (.png) or hyperspectral cube (.hsc) to simulate RGB from
    #[arg(long)]
    pub input: PathBuf,
    /// CSS used to simulate RGB from a cube input; for PNG input its
    /// wavelengths label the output bands
    #[arg(long)]
    pub css: Option<PathBuf>,
    /// Output wavelength grid `start,end,step` for PNG input
    #[arg(long)]
    pub grid: Option<String>,
    /// Resample the CSS onto the cube grid before simulating
    #[arg(long)]
    pub resample: bool,
}

impl ReconstructArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.checkpoint)?;
        absolute(&mut self.input)?;
        if let Some(c) = &mut self.css {
            absolute(c)?;
        }
        Ok(())
    }
}

pub(crate) fn load_model(path: &Path) -> Result<PtnetModel<f32>> {
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Simulates RGB from `cube` under `css`, optionally resampled onto the cube grid.
pub(crate) fn simulate_for(cube: &Datacube, css: &CssMatrix, resample: bool) -> Result<RgbImage> {
    let css = if resample {
        resample_css(css, cube.wavelengths())?
    } else {
        css.clone()
    };
    check_grid(cube, &css)?;
    Ok(simulate_rgb(cube, &css)?.image)
}

pub fn run(args: &ReconstructArgs, ctx: &RunContext) -> Result<Outcome> {
    super::no_config(ctx, "reconstruct")?;
    let model = load_model(&args.checkpoint)?;
    let bands = model.config().bands;
    let is_cube = args.input.extension().is_some_and(|e| e == "hsc");
    let (rgb, wavelengths) = if is_cube {
        let css_path = args
            .css
            .as_ref()
            .context("a cube input needs --css to simulate RGB")?;
        let cube = read_cube(&args.input)?;
        let rgb = simulate_for(&cube, &read_css(css_path)?, args.resample)
            .with_context(|| format!("cube {}", args.input.display()))?;
        (rgb, cube.wavelengths().to_vec())
    } else {
        let rgb = RgbImage::read_png(&args.input)
            .with_context(|| format!("reading {}", args.input.display()))?;
        let wl = match (&args.grid, &args.css) {
            (Some(g), _) => parse_grid(g)?,
            (None, Some(c)) => read_css(c)?.wavelengths().to_vec(),
            (None, None) => bail!("PNG input needs --grid or --css to label the output bands"),
        };
        (rgb, wl)
    };
    if wavelengths.len() != bands {
        bail!(
            "checkpoint predicts {bands} bands but the wavelength grid has {}",
            wavelengths.len()
        );
    }

    let start = Instant::now();
    let cube = reconstruct_image(&model, &rgb, &wavelengths)?;
    let elapsed = start.elapsed();
    let name = format!("{}.hsc", file_stem(&args.input));
    write_cube(&cube, ctx.stage.path(&name))?;
    println!(
        "reconstructed {}x{}x{} in {:.3} s",
        cube.width(),
        cube.height(),
        cube.bands(),
        elapsed.as_secs_f64()
    );

    let mut resolved = FlatConfig::default();
    resolved.set("input_kind", if is_cube { "cube" } else { "png" });
    resolved.set("resample", args.resample);
    resolved.set("bands", bands as i64);
    resolved.set("wavelength_first", wavelengths[0]);
    resolved.set("wavelength_last", wavelengths[bands - 1]);
    Ok(Outcome { resolved })
}
