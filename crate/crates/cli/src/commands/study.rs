use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::calibration::read_css;
use specrecon::datacube::read_cube;
use specrecon::metrics::DEFAULT_MRAE_FLOOR;
use specrecon::ptnet::reconstruct_image;

use super::evaluate::write_evaluation;
use super::reconstruct::{load_model, simulate_for};
use crate::config::FlatConfig;
use crate::{absolute, file_stem, list_cubes, parse_list, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CssStudyArgs {
    /// PTN1 checkpoint, held fixed across every CSS
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of ground-truth cubes
    #[arg(long)]
    pub cubes: PathBuf,
    /// CSS table to simulate RGB with (repeatable)
    #[arg(long = "css")]
    pub css: Vec<PathBuf>,
    /// Resample each CSS onto the cube grid
    #[arg(long)]
    pub resample: bool,
    /// Band indices to render as error heatmaps
    #[arg(long, default_value = "")]
    pub bands: String,
    #[arg(long, default_value_t = DEFAULT_MRAE_FLOOR)]
    pub floor: f64,
}

impl CssStudyArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.checkpoint)?;
        absolute(&mut self.cubes)?;
        for c in &mut self.css {
            absolute(c)?;
        }
        Ok(())
    }
}

pub fn run(args: &CssStudyArgs, ctx: &RunContext) -> Result<Outcome> {
    super::no_config(ctx, "css-study")?;
    if args.css.is_empty() {
        bail!("css-study needs at least one --css table");
    }
    let model = load_model(&args.checkpoint)?;
    let bands: Vec<usize> = parse_list(&args.bands, "bands")?;
    let cubes = list_cubes(&args.cubes)?
        .into_iter()
        .map(|p| Ok((file_stem(&p), read_cube(&p)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::from("css,mrae,rmse,elements\n");
    let mut text = format!("{:<4} {:<32} {:>10} {:>10}\n", "#", "css", "MRAE", "RMSE");
    for (i, css_path) in args.css.iter().enumerate() {
        let css = read_css(css_path)?;
        let mut items = Vec::with_capacity(cubes.len());
        for (name, gt) in &cubes {
            let rgb = simulate_for(gt, &css, args.resample)
                .with_context(|| format!("cube {name} under {}", css_path.display()))?;
            let pred = reconstruct_image(&model, &rgb, gt.wavelengths())?;
            items.push((name.clone(), pred, gt.clone()));
        }
        let label = format!("{i}_{}", file_stem(css_path));
        let report = write_evaluation(ctx.stage, &format!("{label}/"), &items, &bands, &[], args.floor)?;
        writeln!(table, "{label},{},{},{}", report.mrae, report.rmse, report.elements)?;
        writeln!(text, "{i:<4} {:<32} {:>10.6} {:>10.6}", file_stem(css_path), report.mrae, report.rmse)?;
    }
    std::fs::write(ctx.stage.path("study.csv"), &table)?;
    std::fs::write(ctx.stage.path("study.txt"), &text)?;
    print!("{text}");

    let mut resolved = FlatConfig::default();
    resolved.set("resample", args.resample);
    resolved.set("bands", args.bands.clone());
    resolved.set("floor", args.floor);
    Ok(Outcome { resolved })
}
