//! RGB image synthesis from hyperspectral cubes:
//! `I(x, y, c) = Σ_λ cube(x, y, λ) · css(λ, c)`, scaled by the image's
//! global maximum so values land in [0, 1].

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use image::{ImageBuffer, Rgb};

use crate::calibration::{interpolate, CssMatrix};
use crate::datacube::{read_cube, write_cube, Datacube, PatchGrid};
use crate::error::{Error, Result};

/// Planar RGB image, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Three H × W row-major planes: R, G, B.
    values: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                3 * width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar storage `[channel][y][x]`.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.values[(channel * self.height + y) * self.width + x]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Index(format!(
                "crop {w}x{h} at ({x0}, {y0}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                values.extend_from_slice(&self.values[row + x0..row + x0 + w]);
            }
        }
        RgbImage::new(w, h, values)
    }

    /// Rounds every value to the nearest `bits`-bit code and back.
    pub fn quantized(&self, bits: u32) -> RgbImage {
        let levels = ((1u64 << bits) - 1) as f32;
        RgbImage {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
                .collect(),
        }
    }

    /// Raw little-endian f32 planes R, G, B.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut buf = vec![0u8; 4 * self.values.len()];
        LittleEndian::write_f32_into(&self.values, &mut buf);
        buf
    }

    pub fn from_raw_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<RgbImage> {
        if bytes.len() != 12 * width * height {
            return Err(Error::format(
                "rgb",
                format!(
                    "raw plane file holds {} bytes, {width}x{height} needs {}",
                    bytes.len(),
                    12 * width * height
                ),
            ));
        }
        let mut values = vec![0f32; 3 * width * height];
        LittleEndian::read_f32_into(bytes, &mut values);
        RgbImage::new(width, height, values)
    }

    /// 16-bit PNG for inspection.
    pub fn write_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(x, y, c).clamp(0.0, 1.0);
                    buf.push((v * 65535.0).round() as u16);
                }
            }
        }
        let img: ImageBuffer<Rgb<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, buf).expect("sized");
        img.save(path.as_ref())?;
        Ok(())
    }

    /// Reads an 8- or 16-bit PNG and scales codes to [0, 1].
    pub fn read_png(path: impl AsRef<Path>) -> Result<RgbImage> {
        let frame = crate::calibration::Frame::read_png(path)?;
        let (w, h) = (frame.width, frame.height);
        let mut values = vec![0f32; 3 * w * h];
        for (i, p) in frame.pixels.iter().enumerate() {
            for c in 0..3 {
                values[c * w * h + i] = (p[c] / frame.max_code) as f32;
            }
        }
        RgbImage::new(w, h, values)
    }
}

/// Confirms cube and CSS share a wavelength grid (compared at the cube
/// file's f32 precision).
pub fn check_grid(cube: &Datacube, css: &CssMatrix) -> Result<()> {
    let (a, b) = (cube.wavelengths(), css.wavelengths());
    if let Some(i) = a.iter().zip(b).position(|(x, y)| *x as f32 != *y as f32) {
        return Err(Error::Grid(format!(
            "band {i}: cube has {} nm, CSS has {} nm",
            a[i], b[i]
        )));
    }
    if a.len() != b.len() {
        return Err(Error::Grid(format!(
            "cube has {} bands, CSS has {} rows",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Linear interpolation of `css` onto `grid`. Must be invoked explicitly;
/// simulation never resamples on its own.
pub fn resample_css(css: &CssMatrix, grid: &[f64]) -> Result<CssMatrix> {
    let wl = css.wavelengths();
    let rows = grid
        .iter()
        .map(|&g| {
            let mut row = [0.0; 3];
            for (c, v) in row.iter_mut().enumerate() {
                *v = interpolate(wl, &css.column(c), g).ok_or_else(|| {
                    Error::Grid(format!(
                        "{g} nm lies outside the CSS range {}..{} nm",
                        wl[0],
                        wl[wl.len() - 1]
                    ))
                })?;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    CssMatrix::new(grid.to_vec(), rows)
}

/// Planar R, G, B sums before any scaling, in f64.
pub fn simulate_raw(cube: &Datacube, css: &CssMatrix) -> Result<Vec<f64>> {
    check_grid(cube, css)?;
    project_bands(cube, css.rows())
}

/// Per-pixel projection of the spectrum onto three weight columns, without
/// any grid or sensitivity-table checks.
pub fn project_bands(cube: &Datacube, rows: &[[f64; 3]]) -> Result<Vec<f64>> {
    if rows.len() != cube.bands() {
        return Err(Error::Dimension(format!(
            "{} weight rows for a {}-band cube",
            rows.len(),
            cube.bands()
        )));
    }
    let plane = cube.width() * cube.height();
    let mut out = vec![0.0f64; 3 * plane];
    for (band, row) in rows.iter().enumerate() {
        let values = cube.band_plane(band);
        for c in 0..3 {
            let k = row[c];
            if k == 0.0 {
                continue;
            }
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(&values) {
                *d += v as f64 * k;
            }
        }
    }
    Ok(out)
}

/// A simulated image with the constant it was divided by.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulated {
    pub image: RgbImage,
    pub scale: f64,
}

fn scale_raw(raw: &[f64], w: usize, h: usize, scale: f64) -> Result<RgbImage> {
    RgbImage::new(w, h, raw.iter().map(|&v| (v / scale) as f32).collect())
}

/// Forward model with global-max normalization.
pub fn simulate_rgb(cube: &Datacube, css: &CssMatrix) -> Result<Simulated> {
    let raw = simulate_raw(cube, css)?;
    let scale = raw.iter().copied().fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::Degenerate(
            "cube and CSS produce an all-zero RGB image".into(),
        ));
    }
    Ok(Simulated {
        image: scale_raw(&raw, cube.width(), cube.height(), scale)?,
        scale,
    })
}

/// Forward model divided by a caller-supplied constant.
pub fn simulate_rgb_with_scale(cube: &Datacube, css: &CssMatrix, scale: f64) -> Result<RgbImage> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("RGB scale must be positive, got {scale}")));
    }
    let raw = simulate_raw(cube, css)?;
    scale_raw(&raw, cube.width(), cube.height(), scale)
}

/// Spatially aligned RGB / hyperspectral training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub rgb: RgbImage,
    pub cube: Datacube,
    /// Normalization constant of the full image this patch was cut from.
    pub scale: f64,
    /// Index of the source cube.
    pub source: usize,
    /// Row-major tile index within the source.
    pub tile: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairOptions {
    /// Round simulated RGB to 8-bit codes.
    pub quantize_8bit: bool,
}

/// Simulates every cube at full resolution, then tiles both images with the
/// same grid.
pub fn build_pair_set(
    cubes: &[Datacube],
    css: &CssMatrix,
    patch_w: usize,
    patch_h: usize,
    options: PairOptions,
) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for (source, cube) in cubes.iter().enumerate() {
        let grid = PatchGrid::new(cube.width(), cube.height(), patch_w, patch_h)?;
        let sim = simulate_rgb(cube, css)?;
        let rgb = if options.quantize_8bit {
            sim.image.quantized(8)
        } else {
            sim.image
        };
        for (tile, (x0, y0)) in grid.origins().enumerate() {
            pairs.push(TrainingPair {
                rgb: rgb.crop(x0, y0, patch_w, patch_h)?,
                cube: cube.crop(x0, y0, patch_w, patch_h)?,
                scale: sim.scale,
                source,
                tile,
            });
        }
    }
    Ok(pairs)
}

pub const PAIR_INDEX_FILE: &str = "index.csv";
const PAIR_HEADER: &str = "id,rgb_raw,rgb_png,cube,width,height,scale,source,tile";

/// Writes a pair-set archive: per pair a raw f32 RGB plane file, a 16-bit
/// PNG and an HSC1 cube, plus `index.csv`.
pub fn write_pair_set(pairs: &[TrainingPair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from(PAIR_HEADER);
    index.push('\n');
    for (id, p) in pairs.iter().enumerate() {
        let stem = format!("pair_{id:05}");
        let (raw, png, cube) = (
            format!("{stem}.rgb32"),
            format!("{stem}_rgb.png"),
            format!("{stem}.hsc"),
        );
        let raw_path = dir.join(&raw);
        fs::write(&raw_path, p.rgb.to_raw_bytes()).map_err(|e| Error::io(&raw_path, e))?;
        p.rgb.write_png16(dir.join(&png))?;
        write_cube(&p.cube, dir.join(&cube))?;
        index.push_str(&format!(
            "{id},{raw},{png},{cube},{},{},{},{},{}\n",
            p.rgb.width(),
            p.rgb.height(),
            p.scale,
            p.source,
            p.tile
        ));
    }
    let index_path = dir.join(PAIR_INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

pub fn read_pair_set(dir: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let dir = dir.as_ref();
    let index_path = dir.join(PAIR_INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(PAIR_HEADER) {
        return Err(Error::format("index", format!("expected header `{PAIR_HEADER}`")));
    }
    let mut pairs = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::format("index", format!("line {}: expected 9 fields", n + 2)));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::format(name, format!("line {}: `{}`", n + 2, f[i])))
        };
        let (w, h) = (num(4, "width")? as usize, num(5, "height")? as usize);
        let raw_path = dir.join(f[1]);
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let rgb = RgbImage::from_raw_bytes(w, h, &bytes)?;
        let cube = read_cube(dir.join(f[3]))?;
        if (cube.width(), cube.height()) != (w, h) {
            return Err(Error::format("cube", format!("{} is not {w}x{h}", f[3])));
        }
        pairs.push(TrainingPair {
            rgb,
            cube,
            scale: num(6, "scale")?,
            source: num(7, "source")? as usize,
            tile: num(8, "tile")? as usize,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::Layout;

    fn css(rows: Vec<[f64; 3]>, wl: Vec<f64>) -> CssMatrix {
        CssMatrix::new(wl, rows).unwrap()
    }

    #[test]
    fn single_band_collapse() {
        let cube = Datacube::new(3, 1, vec![500.0], Layout::Lhw, vec![0.2, 0.4, 0.8]).unwrap();
        let sim = simulate_rgb(&cube, &css(vec![[1.0; 3]], vec![500.0])).unwrap();
        for c in 0..3 {
            assert_eq!(sim.image.plane(c), &[0.25, 0.5, 1.0]);
        }
    }

    #[test]
    fn constant_cube_gives_column_sums() {
        let wl = vec![450.0, 550.0, 650.0];
        let cube = Datacube::from_fn(4, 2, wl.clone(), |_, _, _| 1.0).unwrap();
        let m = css(vec![[0.1, 0.5, 0.2], [0.3, 0.5, 0.1], [0.6, 0.5, 0.0]], wl);
        let sim = simulate_rgb(&cube, &m).unwrap();
        let sums = [1.0, 1.5, 0.30000000000000004];
        for c in 0..3 {
            let expected = (sums[c] / 1.5) as f32;
            assert!(sim.image.plane(c).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn grid_mismatch_names_band() {
        let cube = Datacube::from_fn(1, 1, vec![500.0, 510.0], |_, _, _| 1.0).unwrap();
        let err = simulate_rgb(&cube, &css(vec![[1.0; 3]; 2], vec![500.0, 520.0])).unwrap_err();
        assert!(matches!(&err, Error::Grid(m) if m.contains("band 1")), "{err}");
        let err = simulate_rgb(&cube, &css(vec![[1.0; 3]], vec![500.0])).unwrap_err();
        assert!(matches!(err, Error::Grid(_)));
    }

    #[test]
    fn all_zero_product_is_degenerate() {
        let cube = Datacube::from_fn(2, 2, vec![500.0], |_, _, _| 0.0).unwrap();
        let err = simulate_rgb(&cube, &css(vec![[1.0; 3]], vec![500.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn column_selectivity() {
        let wl = vec![500.0, 600.0];
        let cube = Datacube::from_fn(3, 3, wl, |x, y, b| (x + y + b) as f32 * 0.1).unwrap();
        let raw = project_bands(&cube, &[[0.0, 0.7, 0.0], [0.0, 0.2, 0.0]]).unwrap();
        assert!(raw[..9].iter().all(|&v| v == 0.0));
        assert!(raw[18..].iter().all(|&v| v == 0.0));
        assert!(raw[9..18].iter().any(|&v| v > 0.0));
    }

    #[test]
    fn resample_onto_coarser_grid() {
        let m = css(vec![[0.0, 1.0, 0.5], [1.0, 0.0, 0.5]], vec![400.0, 500.0]);
        let r = resample_css(&m, &[400.0, 425.0, 500.0]).unwrap();
        assert_eq!(r.rows()[1], [0.25, 0.75, 0.5]);
        assert!(resample_css(&m, &[390.0]).is_err());
    }

    #[test]
    fn eight_pairs_from_full_frame() {
        let wl = vec![500.0, 600.0];
        let cube = Datacube::from_fn(482, 512, wl.clone(), |x, y, b| ((x + 2 * y + b) % 7) as f32 / 7.0)
            .unwrap();
        let m = css(vec![[1.0, 0.5, 0.1], [0.1, 0.5, 1.0]], wl);
        let pairs = build_pair_set(&[cube], &m, 241, 128, PairOptions::default()).unwrap();
        assert_eq!(pairs.len(), 8);
    }

    #[test]
    fn raw_rgb_round_trip() {
        let img = RgbImage::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(RgbImage::from_raw_bytes(2, 1, &img.to_raw_bytes()).unwrap(), img);
        assert!(RgbImage::from_raw_bytes(2, 2, &img.to_raw_bytes()).is_err());
    }

    #[test]
    fn quantization_is_8bit() {
        let img = RgbImage::new(1, 1, vec![0.5, 0.001, 1.0]).unwrap();
        let q = img.quantized(8);
        assert_eq!(q.values()[0], 128.0 / 255.0);
        assert_eq!(q.values()[1], 0.0);
    }
}
