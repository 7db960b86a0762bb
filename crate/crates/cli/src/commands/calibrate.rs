use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::calibration::{self, CalibrationConfig, LampSpectrum, Roi};

use crate::config::FlatConfig;
use crate::{absolute, parse_list, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// Directory with sweep.csv and one wl_<nm>.png frame per wavelength
    #[arg(long)]
    pub sweep: PathBuf,
    /// Lamp spectrum CSV (wavelength_nm,power)
    #[arg(long)]
    pub lamp: PathBuf,
    /// Region of interest `x,y,width,height` (default: whole frame)
    #[arg(long)]
    pub roi: Option<String>,
    /// Sensor dark level subtracted before averaging
    #[arg(long, default_value_t = 0.0)]
    pub dark_level: f64,
    /// Expected wavelength grid `start,end,step` in nm
    #[arg(long, default_value = "400,650,1")]
    pub grid: String,
}

impl CalibrateArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.sweep)?;
        absolute(&mut self.lamp)
    }
}

pub(crate) fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = parse_list(s, "grid")?;
    let [start, end, step] = parts[..] else {
        anyhow::bail!("grid must be `start,end,step`, got `{s}`");
    };
    Ok(calibration::wavelength_grid(start, end, step)?)
}

pub fn run(args: &CalibrateArgs, ctx: &RunContext) -> Result<Outcome> {
    super::no_config(ctx, "calibrate")?;
    let grid = parse_grid(&args.grid)?;
    let roi: Option<Roi> = args.roi.as_deref().map(str::parse).transpose()?;
    let lamp = LampSpectrum::read_csv(&args.lamp)?;
    let captures = calibration::load_sweep(&args.sweep)
        .with_context(|| format!("loading sweep from {}", args.sweep.display()))?;
    let result = calibration::calibrate(
        &captures,
        &grid,
        &lamp,
        roi,
        CalibrationConfig {
            dark_level: args.dark_level,
        },
    )?;

    calibration::write_css(&result.css, ctx.stage.path("css.csv"))?;
    std::fs::write(ctx.stage.path("curves.csv"), result.curves_csv(&lamp))?;
    if !result.saturated.is_empty() {
        let mut text = String::from("wavelength_nm,R,G,B\n");
        for (wl, s) in &result.saturated {
            text.push_str(&format!("{wl},{},{},{}\n", s[0], s[1], s[2]));
            eprintln!("warning: saturated ROI at {wl} nm (channels R,G,B = {s:?})");
        }
        std::fs::write(ctx.stage.path("saturated.csv"), text)?;
    }
    println!(
        "calibrated {} wavelengths ({}–{} nm)",
        result.css.bands(),
        grid[0],
        grid[grid.len() - 1]
    );

    let mut resolved = FlatConfig::default();
    resolved.set("grid", args.grid.clone());
    resolved.set("dark_level", args.dark_level);
    resolved.set("roi", args.roi.clone().unwrap_or_else(|| "full".into()));
    Ok(Outcome { resolved })
}
