//! Camera spectral sensitivity (CSS) recovery from a monochromator sweep.
//!
//! A sweep is one frame per wavelength, captured with fixed exposure and
//! white balance disabled (gains 1:1:1). Each frame's region of interest is
//! averaged to an RGB response, divided by the lamp's relative power at that
//! wavelength, and the resulting table is scaled to a global maximum of 1.
//! The camera is assumed to respond linearly (no gamma).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result, SweepError};

/// Tolerance used when matching capture wavelengths to a grid (nm).
pub const GRID_TOLERANCE_NM: f64 = 1e-9;

/// Evenly spaced wavelength grid from `start` to `end` inclusive.
pub fn wavelength_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || end < start {
        return Err(Error::Config(format!(
            "invalid wavelength grid {start}..{end} step {step}"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// One camera frame: interleaved RGB gray levels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Largest code value the sensor can report (255 for 8-bit, 65535 for 16-bit).
    pub max_code: f64,
    pub pixels: Vec<[f64; 3]>,
}

impl Frame {
    pub fn uniform(width: usize, height: usize, rgb: [f64; 3], max_code: f64) -> Self {
        Self {
            width,
            height,
            max_code,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Loads an 8- or 16-bit PNG. Grayscale inputs are replicated to RGB.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let rgb = img.to_rgb16();
        let (w, h) = rgb.dimensions();
        let (scale, max_code) = if sixteen { (1.0, 65535.0) } else { (1.0 / 257.0, 255.0) };
        let pixels = rgb
            .pixels()
            .map(|p| p.0.map(|c| (c as f64 * scale).round()))
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            max_code,
            pixels,
        })
    }

    /// Writes a 16-bit PNG; values are rounded and clamped to 0..=65535.
    pub fn write_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            buf.extend(p.iter().map(|&c| c.round().clamp(0.0, 65535.0) as u16));
        }
        let img: ImageBuffer<Rgb<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer sized to frame");
        img.save(path.as_ref())?;
        Ok(())
    }
}

/// One monochromator step.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCapture {
    pub wavelength: f64,
    pub frame: Frame,
    pub exposure_ms: f64,
    pub rgb_gain: [f64; 3],
}

/// Checks a sweep against the expected grid, exposure uniformity and the
/// 1:1:1 gain requirement.
pub fn validate_sweep(captures: &[SweepCapture], expected_grid: &[f64]) -> Result<(), SweepError> {
    let mut seen: Vec<f64> = Vec::with_capacity(captures.len());
    for c in captures {
        if seen.iter().any(|&w| (w - c.wavelength).abs() < GRID_TOLERANCE_NM) {
            return Err(SweepError::DuplicateWavelength(c.wavelength));
        }
        if !expected_grid
            .iter()
            .any(|&g| (g - c.wavelength).abs() < GRID_TOLERANCE_NM)
        {
            return Err(SweepError::UnexpectedWavelength(c.wavelength));
        }
        seen.push(c.wavelength);
    }
    let missing: Vec<f64> = expected_grid
        .iter()
        .copied()
        .filter(|&g| !seen.iter().any(|&w| (w - g).abs() < GRID_TOLERANCE_NM))
        .collect();
    if !missing.is_empty() {
        return Err(SweepError::MissingWavelengths(missing));
    }
    if let Some(first) = captures.first() {
        for c in captures {
            if c.exposure_ms != first.exposure_ms {
                return Err(SweepError::ExposureDrift {
                    wavelength: c.wavelength,
                    expected: first.exposure_ms,
                    found: c.exposure_ms,
                });
            }
        }
    }
    for c in captures {
        if c.rgb_gain != [1.0, 1.0, 1.0] {
            return Err(SweepError::Gain {
                wavelength: c.wavelength,
                gain: c.rgb_gain,
            });
        }
    }
    Ok(())
}

/// Rectangular region of interest in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(frame: &Frame) -> Self {
        Self {
            x: 0,
            y: 0,
            width: frame.width,
            height: frame.height,
        }
    }
}

impl std::str::FromStr for Roi {
    type Err = Error;

    /// Parses `x,y,width,height`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(format!("ROI `{s}` is not x,y,width,height")))?;
        match parts[..] {
            [x, y, width, height] => Ok(Roi {
                x,
                y,
                width,
                height,
            }),
            _ => Err(Error::Config(format!("ROI `{s}` is not x,y,width,height"))),
        }
    }
}

/// Mean RGB response over a region, with per-channel saturation flags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Response {
    pub rgb: [f64; 3],
    /// Channels whose every ROI pixel sits at the sensor's maximum code.
    pub saturated: [bool; 3],
}

/// Per-channel ROI mean after subtracting `dark_level` (clamped at 0).
pub fn extract_response(capture: &SweepCapture, roi: Roi, dark_level: f64) -> Result<Response> {
    let f = &capture.frame;
    if roi.width == 0 || roi.height == 0 || roi.x + roi.width > f.width || roi.y + roi.height > f.height {
        return Err(Error::Index(format!(
            "ROI {roi:?} outside {}x{} frame at {} nm",
            f.width, f.height, capture.wavelength
        )));
    }
    let mut sum = [0.0f64; 3];
    let mut saturated = [true; 3];
    for y in roi.y..roi.y + roi.height {
        for x in roi.x..roi.x + roi.width {
            let p = f.pixel(x, y);
            for c in 0..3 {
                sum[c] += p[c];
                saturated[c] &= p[c] >= f.max_code;
            }
        }
    }
    let n = (roi.width * roi.height) as f64;
    Ok(Response {
        rgb: sum.map(|s| (s / n - dark_level).max(0.0)),
        saturated,
    })
}

/// Tabulated relative lamp power.
#[derive(Clone, Debug, PartialEq)]
pub struct LampSpectrum {
    wavelengths: Vec<f64>,
    power: Vec<f64>,
}

impl LampSpectrum {
    pub fn new(wavelengths: Vec<f64>, power: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() || wavelengths.len() != power.len() {
            return Err(Error::format(
                "lamp",
                format!("{} wavelengths vs {} power values", wavelengths.len(), power.len()),
            ));
        }
        if wavelengths.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::format("wavelength_nm", "lamp wavelengths must be strictly increasing"));
        }
        Ok(Self { wavelengths, power })
    }

    /// Constant power over the given range.
    pub fn flat(start: f64, end: f64) -> Self {
        Self::new(vec![start, end], vec![1.0, 1.0]).expect("valid flat lamp")
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    /// Linearly interpolated power, `None` outside the tabulated range.
    pub fn power_at(&self, wavelength: f64) -> Option<f64> {
        interpolate(&self.wavelengths, &self.power, wavelength)
    }

    /// Reads a `wavelength_nm,power` CSV.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "lamp spectrum not found"),
            ));
        }
        let rows = read_numeric_csv(path, &["wavelength_nm", "power"])?;
        let (wl, p) = rows.into_iter().map(|r| (r[0], r[1])).unzip();
        Self::new(wl, p)
    }
}

/// Piecewise-linear interpolation on a strictly increasing grid.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let last = xs.len() - 1;
    if x < xs[0] - GRID_TOLERANCE_NM || x > xs[last] + GRID_TOLERANCE_NM {
        return None;
    }
    if let Some(i) = xs.iter().position(|&g| (g - x).abs() < GRID_TOLERANCE_NM) {
        return Some(ys[i]);
    }
    let hi = xs.partition_point(|&g| g < x);
    let lo = hi - 1;
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    Some(ys[lo] + t * (ys[hi] - ys[lo]))
}

/// Per-wavelength RGB sensitivity, n_bands × 3.
#[derive(Clone, Debug, PartialEq)]
pub struct CssMatrix {
    wavelengths: Vec<f64>,
    sensitivity: Vec<[f64; 3]>,
}

impl CssMatrix {
    pub fn new(wavelengths: Vec<f64>, sensitivity: Vec<[f64; 3]>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::format("css", "matrix has no rows"));
        }
        if wavelengths.len() != sensitivity.len() {
            return Err(Error::format(
                "css",
                format!("{} wavelengths vs {} rows", wavelengths.len(), sensitivity.len()),
            ));
        }
        if let Some(i) = wavelengths.windows(2).position(|p| !(p[1] > p[0])) {
            return Err(Error::format(
                "wavelength_nm",
                format!(
                    "must be strictly increasing: {} nm followed by {} nm",
                    wavelengths[i],
                    wavelengths[i + 1]
                ),
            ));
        }
        for (wl, row) in wavelengths.iter().zip(&sensitivity) {
            if let Some(c) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::format(
                    ["R", "G", "B"][c],
                    format!("negative or non-finite sensitivity {} at {wl} nm", row[c]),
                ));
            }
        }
        for c in 0..3 {
            if sensitivity.iter().all(|row| row[c] == 0.0) {
                return Err(Error::format(["R", "G", "B"][c], "channel has no positive entry"));
            }
        }
        Ok(Self {
            wavelengths,
            sensitivity,
        })
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.sensitivity
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.sensitivity.iter().map(|r| r[c]).collect()
    }

    pub fn max_entry(&self) -> f64 {
        self.sensitivity
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// Scaled copy whose global maximum is 1.
    pub fn normalized(&self) -> Self {
        let max = self.max_entry();
        Self {
            wavelengths: self.wavelengths.clone(),
            sensitivity: self.sensitivity.iter().map(|r| r.map(|v| v / max)).collect(),
        }
    }

    /// CSV text with header `wavelength_nm,R,G,B`, LF line endings.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("wavelength_nm,R,G,B\n");
        for (wl, r) in self.wavelengths.iter().zip(&self.sensitivity) {
            out.push_str(&format!("{wl},{},{},{}\n", r[0], r[1], r[2]));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let rows = read_numeric_csv(path.as_ref(), &["wavelength_nm", "R", "G", "B"])?;
        if rows.is_empty() {
            return Err(Error::format("css", "matrix has no rows"));
        }
        let (wl, sens) = rows.into_iter().map(|r| (r[0], [r[1], r[2], r[3]])).unzip();
        Self::new(wl, sens)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let rows = parse_numeric_csv(text.as_bytes(), &["wavelength_nm", "R", "G", "B"])?;
        if rows.is_empty() {
            return Err(Error::format("css", "matrix has no rows"));
        }
        let (wl, sens) = rows.into_iter().map(|r| (r[0], [r[1], r[2], r[3]])).unzip();
        Self::new(wl, sens)
    }
}

pub fn read_css(path: impl AsRef<Path>) -> Result<CssMatrix> {
    CssMatrix::read_csv(path)
}

pub fn write_css(css: &CssMatrix, path: impl AsRef<Path>) -> Result<()> {
    css.write_csv(path)
}

fn read_numeric_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_numeric_csv(&bytes[..], header)
}

fn parse_numeric_csv(bytes: &[u8], header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let found: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(Error::format(
            "header",
            format!("expected `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .zip(header)
            .map(|(v, field)| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::format(*field, format!("row {}: `{v}` is not a number", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::format("row", format!("row {} has {} fields", line + 1, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Divides each response by the lamp power at its wavelength and scales the
/// result to a global maximum of 1.
pub fn compensate_and_assemble(responses: &[(f64, [f64; 3])], lamp: &LampSpectrum) -> Result<CssMatrix> {
    let mut wavelengths = Vec::with_capacity(responses.len());
    let mut rows = Vec::with_capacity(responses.len());
    for &(wl, rgb) in responses {
        let power = lamp.power_at(wl).ok_or_else(|| {
            Error::Calibration(format!("lamp spectrum does not cover {wl} nm"))
        })?;
        if !(power > 0.0) {
            return Err(Error::Calibration(format!(
                "lamp power {power} at {wl} nm is not positive"
            )));
        }
        wavelengths.push(wl);
        rows.push(rgb.map(|r| r / power));
    }
    let max = rows.iter().flatten().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Calibration("all compensated responses are zero".into()));
    }
    let rows = rows.into_iter().map(|r| r.map(|v| v / max)).collect();
    CssMatrix::new(wavelengths, rows).map_err(|e| Error::Calibration(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub dark_level: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { dark_level: 0.0 }
    }
}

/// Result of a full calibration run.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub css: CssMatrix,
    /// Raw (dark-subtracted, uncompensated) ROI responses per wavelength.
    pub responses: Vec<(f64, [f64; 3])>,
    /// Wavelengths whose ROI was fully saturated in some channel.
    pub saturated: Vec<(f64, [bool; 3])>,
}

impl Calibration {
    /// Per-channel curves as CSV for plotting: raw response, lamp power and
    /// normalized CSS per wavelength.
    pub fn curves_csv(&self, lamp: &LampSpectrum) -> String {
        let mut out = String::from("wavelength_nm,raw_R,raw_G,raw_B,lamp_power,R,G,B\n");
        for ((wl, raw), css) in self.responses.iter().zip(self.css.rows()) {
            let p = lamp.power_at(*wl).unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{wl},{},{},{},{p},{},{},{}\n",
                raw[0], raw[1], raw[2], css[0], css[1], css[2]
            ));
        }
        out
    }
}

/// Validate, extract, compensate and assemble. Captures are processed in
/// wavelength order.
pub fn calibrate(
    captures: &[SweepCapture],
    expected_grid: &[f64],
    lamp: &LampSpectrum,
    roi: Option<Roi>,
    config: CalibrationConfig,
) -> Result<Calibration> {
    validate_sweep(captures, expected_grid)?;
    let mut ordered: Vec<&SweepCapture> = captures.iter().collect();
    ordered.sort_by(|a, b| a.wavelength.total_cmp(&b.wavelength));
    let mut responses = Vec::with_capacity(ordered.len());
    let mut saturated = Vec::new();
    for c in ordered {
        let roi = roi.unwrap_or_else(|| Roi::full(&c.frame));
        let r = extract_response(c, roi, config.dark_level)?;
        if r.saturated.iter().any(|&s| s) {
            saturated.push((c.wavelength, r.saturated));
        }
        responses.push((c.wavelength, r.rgb));
    }
    let css = compensate_and_assemble(&responses, lamp)?;
    Ok(Calibration {
        css,
        responses,
        saturated,
    })
}

/// Per-pixel CSS map: for every pixel, its own compensated curves, all scaled
/// by one global maximum.
#[derive(Clone, Debug)]
pub struct PixelCssMap {
    pub width: usize,
    pub height: usize,
    pub wavelengths: Vec<f64>,
    /// Indexed `[band][y * width + x]`.
    pub values: Vec<Vec<[f64; 3]>>,
}

pub fn per_pixel_css(
    captures: &[SweepCapture],
    lamp: &LampSpectrum,
    config: CalibrationConfig,
) -> Result<PixelCssMap> {
    let first = captures
        .first()
        .ok_or_else(|| Error::Calibration("empty sweep".into()))?;
    let (w, h) = (first.frame.width, first.frame.height);
    let mut ordered: Vec<&SweepCapture> = captures.iter().collect();
    ordered.sort_by(|a, b| a.wavelength.total_cmp(&b.wavelength));
    let mut values = Vec::with_capacity(ordered.len());
    let mut max = 0.0f64;
    for c in &ordered {
        if (c.frame.width, c.frame.height) != (w, h) {
            return Err(Error::Calibration(format!(
                "frame at {} nm is {}x{}, expected {w}x{h}",
                c.wavelength, c.frame.width, c.frame.height
            )));
        }
        let power = lamp
            .power_at(c.wavelength)
            .filter(|p| *p > 0.0)
            .ok_or_else(|| {
                Error::Calibration(format!("no positive lamp power at {} nm", c.wavelength))
            })?;
        let band: Vec<[f64; 3]> = c
            .frame
            .pixels
            .iter()
            .map(|p| p.map(|v| (v - config.dark_level).max(0.0) / power))
            .collect();
        max = band.iter().flatten().copied().fold(max, f64::max);
        values.push(band);
    }
    if max > 0.0 {
        for band in &mut values {
            band.iter_mut().for_each(|p| *p = p.map(|v| v / max));
        }
    }
    Ok(PixelCssMap {
        width: w,
        height: h,
        wavelengths: ordered.iter().map(|c| c.wavelength).collect(),
        values,
    })
}

/// Sidecar file listing exposure and gains for every frame of a sweep.
pub const SWEEP_METADATA_FILE: &str = "sweep.csv";
const SWEEP_HEADER: [&str; 5] = ["wavelength_nm", "exposure_ms", "gain_r", "gain_g", "gain_b"];

fn frame_file_name(wavelength: f64) -> String {
    format!("wl_{wavelength}.png")
}

/// Loads a sweep directory: `wl_<nm>.png` frames plus the `sweep.csv`
/// sidecar (`wavelength_nm,exposure_ms,gain_r,gain_g,gain_b`).
pub fn load_sweep(dir: impl AsRef<Path>) -> Result<Vec<SweepCapture>> {
    let dir = dir.as_ref();
    let meta_path = dir.join(SWEEP_METADATA_FILE);
    let rows = read_numeric_csv(&meta_path, &SWEEP_HEADER)?;
    let mut meta: BTreeMap<String, (f64, [f64; 3])> = BTreeMap::new();
    for r in &rows {
        meta.insert(frame_file_name(r[0]), (r[1], [r[2], r[3], r[4]]));
    }
    let mut frames: Vec<(f64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(nm) = name.strip_prefix("wl_").and_then(|n| n.strip_suffix(".png")) else {
            continue;
        };
        let wl: f64 = nm
            .parse()
            .map_err(|_| Error::format("frame", format!("cannot parse wavelength from `{name}`")))?;
        frames.push((wl, path));
    }
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    frames
        .into_iter()
        .map(|(wl, path)| {
            let name = frame_file_name(wl);
            let &(exposure_ms, rgb_gain) = meta.get(&name).ok_or_else(|| {
                Error::format(SWEEP_METADATA_FILE, format!("no metadata row for {name}"))
            })?;
            Ok(SweepCapture {
                wavelength: wl,
                frame: Frame::read_png(&path)?,
                exposure_ms,
                rgb_gain,
            })
        })
        .collect()
}

/// Writes frames and sidecar in the layout [`load_sweep`] reads.
pub fn save_sweep(captures: &[SweepCapture], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(SWEEP_METADATA_FILE);
    let mut meta = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut text = SWEEP_HEADER.join(",");
    text.push('\n');
    for c in captures {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            c.wavelength, c.exposure_ms, c.rgb_gain[0], c.rgb_gain[1], c.rgb_gain[2]
        ));
        c.frame.write_png16(dir.join(frame_file_name(c.wavelength)))?;
    }
    meta.write_all(text.as_bytes())
        .map_err(|e| Error::io(&meta_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capture(wl: f64, rgb: [f64; 3]) -> SweepCapture {
        SweepCapture {
            wavelength: wl,
            frame: Frame::uniform(4, 3, rgb, 65535.0),
            exposure_ms: 20.0,
            rgb_gain: [1.0; 3],
        }
    }

    fn sweep(grid: &[f64]) -> Vec<SweepCapture> {
        grid.iter().map(|&wl| capture(wl, [10.0, 20.0, 30.0])).collect()
    }

    #[test]
    fn full_grid_has_251_points_and_passes() {
        let grid = wavelength_grid(400.0, 650.0, 1.0).unwrap();
        assert_eq!(grid.len(), 251);
        assert_eq!(grid[250], 650.0);
        validate_sweep(&sweep(&grid), &grid).unwrap();
    }

    #[test]
    fn gain_must_be_unity() {
        let grid = wavelength_grid(400.0, 410.0, 1.0).unwrap();
        let mut s = sweep(&grid);
        s[3].rgb_gain = [1.0, 1.5, 1.0];
        assert!(matches!(
            validate_sweep(&s, &grid),
            Err(SweepError::Gain { wavelength, .. }) if wavelength == 403.0
        ));
    }

    #[test]
    fn missing_wavelength_listed() {
        let grid = wavelength_grid(440.0, 460.0, 1.0).unwrap();
        let s: Vec<_> = sweep(&grid).into_iter().filter(|c| c.wavelength != 450.0).collect();
        assert_eq!(
            validate_sweep(&s, &grid),
            Err(SweepError::MissingWavelengths(vec![450.0]))
        );
    }

    #[test]
    fn duplicate_and_drift() {
        let grid = wavelength_grid(400.0, 403.0, 1.0).unwrap();
        let mut s = sweep(&grid);
        s.push(capture(401.0, [1.0; 3]));
        assert_eq!(validate_sweep(&s, &grid), Err(SweepError::DuplicateWavelength(401.0)));
        let mut s = sweep(&grid);
        s[2].exposure_ms = 25.0;
        assert!(matches!(validate_sweep(&s, &grid), Err(SweepError::ExposureDrift { .. })));
    }

    #[test]
    fn response_examples() {
        let c = capture(500.0, [10.0, 20.0, 30.0]);
        let roi = Roi::full(&c.frame);
        assert_eq!(extract_response(&c, roi, 0.0).unwrap().rgb, [10.0, 20.0, 30.0]);
        assert_eq!(extract_response(&c, roi, 5.0).unwrap().rgb, [5.0, 15.0, 25.0]);
        assert_eq!(extract_response(&c, roi, 50.0).unwrap().rgb, [0.0; 3]);
        let bad = Roi { x: 2, y: 0, width: 3, height: 1 };
        assert!(matches!(extract_response(&c, bad, 0.0), Err(Error::Index(_))));
    }

    #[test]
    fn saturation_flagged_per_channel() {
        let c = SweepCapture {
            frame: Frame::uniform(2, 2, [255.0, 10.0, 255.0], 255.0),
            ..capture(500.0, [0.0; 3])
        };
        let r = extract_response(&c, Roi::full(&c.frame), 0.0).unwrap();
        assert_eq!(r.saturated, [true, false, true]);
    }

    #[test]
    fn flat_lamp_keeps_proportions() {
        let responses = vec![(500.0, [1.0, 2.0, 4.0]), (510.0, [2.0, 1.0, 0.5])];
        let css = compensate_and_assemble(&responses, &LampSpectrum::flat(400.0, 700.0)).unwrap();
        assert_eq!(css.rows(), &[[0.25, 0.5, 1.0], [0.5, 0.25, 0.125]]);
    }

    #[test]
    fn equal_responses_scale_inversely_with_lamp() {
        let lamp = LampSpectrum::new(vec![500.0, 501.0, 502.0], vec![1.0, 2.0, 4.0]).unwrap();
        let responses: Vec<_> = [500.0, 501.0, 502.0].iter().map(|&w| (w, [3.0; 3])).collect();
        let css = compensate_and_assemble(&responses, &lamp).unwrap();
        assert_eq!(css.column(1), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn non_positive_lamp_power_named() {
        let lamp = LampSpectrum::new(vec![500.0, 510.0], vec![1.0, 0.0]).unwrap();
        let err = compensate_and_assemble(&[(510.0, [1.0; 3])], &lamp).unwrap_err();
        assert!(err.to_string().contains("510"), "{err}");
    }

    #[test]
    fn lamp_interpolates_linearly() {
        let lamp = LampSpectrum::new(vec![400.0, 500.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(lamp.power_at(450.0), Some(2.0));
        assert_eq!(lamp.power_at(500.0), Some(3.0));
        assert_eq!(lamp.power_at(501.0), None);
    }

    #[test]
    fn css_csv_errors() {
        let neg = "wavelength_nm,R,G,B\n500,-0.1,0.2,0.3\n";
        assert!(matches!(CssMatrix::parse_csv(neg), Err(Error::Format { field, .. }) if field == "R"));
        let empty = "wavelength_nm,R,G,B\n";
        assert!(matches!(CssMatrix::parse_csv(empty), Err(Error::Format { .. })));
        let order = "wavelength_nm,R,G,B\n510,1,1,1\n500,1,1,1\n";
        assert!(matches!(
            CssMatrix::parse_csv(order),
            Err(Error::Format { field, .. }) if field == "wavelength_nm"
        ));
    }

    #[test]
    fn css_csv_round_trip() {
        let css = CssMatrix::new(
            vec![400.0, 400.5, 401.0],
            vec![[0.1, 0.2, 1.0 / 3.0], [0.0, 1.0, 0.7], [1e-7, 0.5, 0.25]],
        )
        .unwrap();
        let back = CssMatrix::parse_csv(&css.to_csv_string()).unwrap();
        assert_eq!(back, css);
    }

    #[test]
    fn roi_parse() {
        assert_eq!(
            "1,2,3,4".parse::<Roi>().unwrap(),
            Roi { x: 1, y: 2, width: 3, height: 4 }
        );
        assert!("1,2,3".parse::<Roi>().is_err());
    }
}
