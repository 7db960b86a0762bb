//! Reconstruction quality metrics and evaluation artifacts.
//!
//! * MRAE: mean over all elements of `|p − gt| / max(gt, ε)`. Not symmetric.
//! * RMSE: `sqrt(mean((p − gt)²))`. Symmetric.
//!
//! Error heatmaps are rendered through the fixed [`COLOR_RAMP`] so the PNGs
//! are byte-stable.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::datacube::Datacube;
use crate::error::{Error, Result};

/// Default floor on the ground truth in the MRAE denominator.
pub const DEFAULT_MRAE_FLOOR: f64 = 1e-4;

fn check_shapes(p: &Datacube, gt: &Datacube) -> Result<()> {
    if (p.width(), p.height(), p.bands()) != (gt.width(), gt.height(), gt.bands()) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}x{}, ground truth is {}x{}x{}",
            p.width(),
            p.height(),
            p.bands(),
            gt.width(),
            gt.height(),
            gt.bands()
        )));
    }
    Ok(())
}

/// Visits (band, predicted, ground truth) for every logical element.
fn for_each_pair(p: &Datacube, gt: &Datacube, mut f: impl FnMut(usize, f64, f64)) {
    let p = p.transpose(crate::datacube::Layout::Lhw);
    let gt = gt.transpose(crate::datacube::Layout::Lhw);
    let plane = p.width() * p.height();
    for (i, (&a, &b)) in p.values().iter().zip(gt.values()).enumerate() {
        f(i / plane, a as f64, b as f64);
    }
}

#[inline]
fn relative_error(p: f64, gt: f64, floor: f64) -> f64 {
    (p - gt).abs() / gt.max(floor)
}

pub fn mrae(p: &Datacube, gt: &Datacube, floor: f64) -> Result<f64> {
    check_shapes(p, gt)?;
    if !(floor > 0.0) {
        return Err(Error::Config(format!("MRAE floor must be positive, got {floor}")));
    }
    let mut sum = 0.0;
    for_each_pair(p, gt, |_, a, b| sum += relative_error(a, b, floor));
    Ok(sum / p.len() as f64)
}

pub fn rmse(p: &Datacube, gt: &Datacube) -> Result<f64> {
    check_shapes(p, gt)?;
    let mut sum = 0.0;
    for_each_pair(p, gt, |_, a, b| sum += (a - b) * (a - b));
    Ok((sum / p.len() as f64).sqrt())
}

/// MRAE restricted to each band.
pub fn band_mrae_profile(p: &Datacube, gt: &Datacube, floor: f64) -> Result<Vec<f64>> {
    check_shapes(p, gt)?;
    let mut sums = vec![0.0; p.bands()];
    for_each_pair(p, gt, |b, x, y| sums[b] += relative_error(x, y, floor));
    let plane = (p.width() * p.height()) as f64;
    Ok(sums.into_iter().map(|s| s / plane).collect())
}

/// Fixed false-color ramp (dark blue → blue → cyan → yellow → red → dark
/// red), sampled linearly between stops.
pub const COLOR_RAMP: [[u8; 3]; 6] = [
    [0, 0, 128],
    [0, 0, 255],
    [0, 255, 255],
    [255, 255, 0],
    [255, 0, 0],
    [128, 0, 0],
];

/// Maps t ∈ [0, 1] onto [`COLOR_RAMP`].
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let segments = (COLOR_RAMP.len() - 1) as f64;
    let pos = t * segments;
    let i = (pos.floor() as usize).min(COLOR_RAMP.len() - 2);
    let frac = pos - i as f64;
    let (a, b) = (COLOR_RAMP[i], COLOR_RAMP[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + frac * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Per-pixel relative error of one band.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub width: usize,
    pub height: usize,
    pub band: usize,
    pub wavelength: f64,
    /// Row-major H × W.
    pub values: Vec<f64>,
}

impl ErrorMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// RGB8 rendering with errors in [0, `vmax`] spread over the ramp.
    pub fn render(&self, vmax: f64) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| ramp_color(v / vmax))
            .collect()
    }

    pub fn write_png(&self, path: impl AsRef<Path>, vmax: f64) -> Result<()> {
        let img: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.render(vmax))
                .expect("sized");
        img.save(path.as_ref())?;
        Ok(())
    }
}

pub fn band_error_map(p: &Datacube, gt: &Datacube, band: usize, floor: f64) -> Result<ErrorMap> {
    check_shapes(p, gt)?;
    if band >= gt.bands() {
        return Err(Error::Index(format!(
            "band {band} out of range for a {}-band cube",
            gt.bands()
        )));
    }
    let (pp, gp) = (p.band_plane(band), gt.band_plane(band));
    Ok(ErrorMap {
        width: gt.width(),
        height: gt.height(),
        band,
        wavelength: gt.wavelengths()[band],
        values: pp
            .iter()
            .zip(&gp)
            .map(|(&a, &b)| relative_error(a as f64, b as f64, floor))
            .collect(),
    })
}

/// Spectrum at pixel (x, y) paired with its wavelengths.
pub fn spectral_trace(cube: &Datacube, x: usize, y: usize) -> Result<Vec<(f64, f32)>> {
    if x >= cube.width() || y >= cube.height() {
        return Err(Error::Index(format!(
            "pixel ({x}, {y}) outside {}x{} cube",
            cube.width(),
            cube.height()
        )));
    }
    Ok(cube
        .wavelengths()
        .iter()
        .zip(cube.spectrum(x, y))
        .map(|(&w, v)| (w, v))
        .collect())
}

/// CSV `wavelength_nm,predicted,ground_truth` for one pixel.
pub fn trace_csv(p: &Datacube, gt: &Datacube, x: usize, y: usize) -> Result<String> {
    check_shapes(p, gt)?;
    let pred = spectral_trace(p, x, y)?;
    let truth = spectral_trace(gt, x, y)?;
    let mut out = String::from("wavelength_nm,predicted,ground_truth\n");
    for ((wl, a), (_, b)) in pred.iter().zip(&truth) {
        writeln!(out, "{wl},{a},{b}").expect("string write");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub mrae: f64,
    pub rmse: f64,
    pub elements: usize,
}

/// Per-image and aggregate metrics over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    /// Element-weighted over the whole set.
    pub mrae: f64,
    pub rmse: f64,
    pub wavelengths: Vec<f64>,
    pub band_mrae: Vec<f64>,
    /// Total element count N.
    pub elements: usize,
    pub floor: f64,
}

impl EvalReport {
    /// Evaluates `(name, prediction, ground truth)` triples. All cubes must
    /// share band count.
    pub fn compute(items: &[(String, &Datacube, &Datacube)], floor: f64) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("evaluation set is empty".into()))?;
        let bands = first.2.bands();
        let mut images = Vec::with_capacity(items.len());
        let (mut abs_rel, mut sq) = (0.0f64, 0.0f64);
        let mut band_sums = vec![0.0f64; bands];
        let mut band_counts = vec![0usize; bands];
        let mut elements = 0;
        for (name, p, gt) in items {
            check_shapes(p, gt)?;
            if gt.bands() != bands {
                return Err(Error::Dimension(format!(
                    "{name} has {} bands, expected {bands}",
                    gt.bands()
                )));
            }
            let (mut r, mut s) = (0.0, 0.0);
            for_each_pair(p, gt, |b, x, y| {
                let e = relative_error(x, y, floor);
                r += e;
                s += (x - y) * (x - y);
                band_sums[b] += e;
                band_counts[b] += 1;
            });
            let n = gt.len();
            images.push(ImageMetrics {
                name: name.clone(),
                mrae: r / n as f64,
                rmse: (s / n as f64).sqrt(),
                elements: n,
            });
            abs_rel += r;
            sq += s;
            elements += n;
        }
        Ok(Self {
            images,
            mrae: abs_rel / elements as f64,
            rmse: (sq / elements as f64).sqrt(),
            wavelengths: first.2.wavelengths().to_vec(),
            band_mrae: band_sums
                .iter()
                .zip(&band_counts)
                .map(|(s, &c)| s / c as f64)
                .collect(),
            elements,
            floor,
        })
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "images: {}", self.images.len()).unwrap();
        writeln!(out, "elements: {}", self.elements).unwrap();
        writeln!(out, "mrae_floor: {}", self.floor).unwrap();
        writeln!(out, "MRAE: {:.6}", self.mrae).unwrap();
        writeln!(out, "RMSE: {:.6}", self.rmse).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "{:<32} {:>10} {:>10}", "image", "MRAE", "RMSE").unwrap();
        for m in &self.images {
            writeln!(out, "{:<32} {:>10.6} {:>10.6}", m.name, m.mrae, m.rmse).unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "{:>14} {:>10}", "wavelength_nm", "MRAE").unwrap();
        for (w, m) in self.wavelengths.iter().zip(&self.band_mrae) {
            writeln!(out, "{w:>14} {m:>10.6}").unwrap();
        }
        out
    }

    /// `name,mrae,rmse,elements` rows; the last row is the aggregate `ALL`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mrae,rmse,elements\n");
        for m in &self.images {
            writeln!(out, "{},{},{},{}", m.name, m.mrae, m.rmse, m.elements).unwrap();
        }
        writeln!(out, "ALL,{},{},{}", self.mrae, self.rmse, self.elements).unwrap();
        out
    }

    /// `wavelength_nm,mrae` rows.
    pub fn band_profile_csv(&self) -> String {
        let mut out = String::from("wavelength_nm,mrae\n");
        for (w, m) in self.wavelengths.iter().zip(&self.band_mrae) {
            writeln!(out, "{w},{m}").unwrap();
        }
        out
    }
}
