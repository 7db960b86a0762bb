use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrecon::datacube::{read_cube, Datacube};
use specrecon::metrics::{band_error_map, trace_csv, EvalReport, DEFAULT_MRAE_FLOOR};

use crate::config::FlatConfig;
use crate::staging::Staging;
use crate::{absolute, file_stem, list_cubes, parse_list, Outcome, RunContext};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Directory of predicted cubes
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth cubes, paired with --pred by file name
    #[arg(long)]
    pub gt: PathBuf,
    /// Band indices to render as error heatmaps, e.g. `0,10,20`
    #[arg(long, default_value = "")]
    pub bands: String,
    /// Pixel `x,y` whose spectra are written as traces (repeatable)
    #[arg(long = "pixel")]
    pub pixels: Vec<String>,
    /// Denominator floor for MRAE
    #[arg(long, default_value_t = DEFAULT_MRAE_FLOOR)]
    pub floor: f64,
}

impl EvaluateArgs {
    pub(crate) fn absolutize(&mut self) -> Result<()> {
        absolute(&mut self.pred)?;
        absolute(&mut self.gt)
    }
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_cubes(dir)?.into_iter().map(|p| (file_stem(&p), p)).collect())
}

pub(crate) fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(s, "pixel")?[..] {
        [x, y] => Ok((x, y)),
        _ => bail!("pixel must be `x,y`, got `{s}`"),
    }
}

/// Report, per-band profile, heatmaps and traces for named cube pairs.
pub(crate) fn write_evaluation(
    stage: &Staging,
    prefix: &str,
    items: &[(String, Datacube, Datacube)],
    bands: &[usize],
    pixels: &[(usize, usize)],
    floor: f64,
) -> Result<EvalReport> {
    let refs: Vec<(String, &Datacube, &Datacube)> =
        items.iter().map(|(n, p, g)| (n.clone(), p, g)).collect();
    let report = EvalReport::compute(&refs, floor)?;
    std::fs::write(stage.path(&format!("{prefix}report.txt")), report.to_text())?;
    std::fs::write(stage.path(&format!("{prefix}metrics.csv")), report.to_csv())?;
    std::fs::write(stage.path(&format!("{prefix}band_mrae.csv")), report.band_profile_csv())?;

    // One colour scale across every rendered map so they compare visually.
    let mut maps = Vec::new();
    for (name, p, g) in items {
        for &b in bands {
            let map = band_error_map(p, g, b, floor).with_context(|| format!("heatmap for {name}"))?;
            maps.push((name, map));
        }
    }
    let vmax = maps
        .iter()
        .flat_map(|(_, m)| m.values.iter().copied())
        .fold(0.0f64, f64::max);
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    for (name, map) in &maps {
        map.write_png(stage.path(&format!("{prefix}heatmaps/{name}_band{}.png", map.band)), vmax)?;
    }
    for (name, p, g) in items {
        for &(x, y) in pixels {
            let csv = trace_csv(p, g, x, y).with_context(|| format!("trace for {name}"))?;
            std::fs::write(stage.path(&format!("{prefix}traces/{name}_x{x}_y{y}.csv")), csv)?;
        }
    }
    Ok(report)
}

pub fn run(args: &EvaluateArgs, ctx: &RunContext) -> Result<Outcome> {
    super::no_config(ctx, "evaluate")?;
    let pred = by_stem(&args.pred)?;
    let gt = by_stem(&args.gt)?;
    let orphans: Vec<String> = pred
        .iter()
        .filter(|(k, _)| !gt.contains_key(*k))
        .chain(gt.iter().filter(|(k, _)| !pred.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        bail!("unpaired cubes: {}", orphans.join(", "));
    }
    let bands: Vec<usize> = parse_list(&args.bands, "bands")?;
    let pixels = args.pixels.iter().map(|s| parse_pixel(s)).collect::<Result<Vec<_>>>()?;
    let items = pred
        .iter()
        .map(|(name, p)| Ok((name.clone(), read_cube(p)?, read_cube(&gt[name])?)))
        .collect::<Result<Vec<_>>>()?;
    let report = write_evaluation(ctx.stage, "", &items, &bands, &pixels, args.floor)?;
    println!("MRAE {:.6}  RMSE {:.6}  ({} images)", report.mrae, report.rmse, report.images.len());

    let mut resolved = FlatConfig::default();
    resolved.set("floor", args.floor);
    resolved.set("bands", args.bands.clone());
    resolved.set("pixels", args.pixels.join(";"));
    Ok(Outcome { resolved })
}
