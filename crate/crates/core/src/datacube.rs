//! Hyperspectral datacubes: dimension-tagged volumes, transposition,
//! normalization, patch tiling and the `HSC1` band-sequential file format.
//!
//! `HSC1` layout (little-endian):
//!
//! ```text
//! "HSC1"            4 bytes magic
//! W, H, n_bands     u32 each
//! wavelengths       n_bands × f32, nm, strictly increasing
//! values            n_bands planes of H rows × W columns, f32
//! ```

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";

/// Memory ordering of a cube's three axes, slowest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    /// W × H × λ: spectrum contiguous per pixel.
    Whl,
    /// W × λ × H: height is the fastest axis.
    Wlh,
    /// λ × H × W: band-sequential planes (canonical).
    Lhw,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Whl, Layout::Wlh, Layout::Lhw];

    /// Flat offset of logical coordinate (x, y, band).
    #[inline]
    pub fn offset(self, x: usize, y: usize, band: usize, w: usize, h: usize, bands: usize) -> usize {
        match self {
            Layout::Whl => (x * h + y) * bands + band,
            Layout::Wlh => (x * bands + band) * h + y,
            Layout::Lhw => (band * h + y) * w + x,
        }
    }

    /// Axis extents in memory order.
    pub fn dims(self, w: usize, h: usize, bands: usize) -> [usize; 3] {
        match self {
            Layout::Whl => [w, h, bands],
            Layout::Wlh => [w, bands, h],
            Layout::Lhw => [bands, h, w],
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Whl => "WHL",
            Layout::Wlh => "WLH",
            Layout::Lhw => "LHW",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(['λ', 'Λ'], "L").to_ascii_uppercase().as_str() {
            "WHL" => Ok(Layout::Whl),
            "WLH" => Ok(Layout::Wlh),
            "LHW" => Ok(Layout::Lhw),
            other => Err(Error::Config(format!(
                "unsupported datacube ordering `{other}` (expected WHL, WLH or LHW)"
            ))),
        }
    }
}

/// A W × H × n_bands hyperspectral volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Datacube {
    width: usize,
    height: usize,
    wavelengths: Vec<f64>,
    layout: Layout,
    values: Vec<f32>,
}

fn check_wavelengths(wavelengths: &[f64]) -> Result<()> {
    if wavelengths.is_empty() {
        return Err(Error::format("wavelengths", "at least one band is required"));
    }
    if let Some(i) = wavelengths.windows(2).position(|p| !(p[1] > p[0])) {
        return Err(Error::format(
            "wavelengths",
            format!(
                "must be strictly increasing: {} nm followed by {} nm",
                wavelengths[i],
                wavelengths[i + 1]
            ),
        ));
    }
    if wavelengths.iter().any(|w| !w.is_finite()) {
        return Err(Error::format("wavelengths", "non-finite wavelength"));
    }
    Ok(())
}

impl Datacube {
    pub fn new(
        width: usize,
        height: usize,
        wavelengths: Vec<f64>,
        layout: Layout,
        values: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "datacube extents must be positive, got {width}x{height}"
            )));
        }
        check_wavelengths(&wavelengths)?;
        let expected = width * height * wavelengths.len();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{} cube needs {expected} values, got {}",
                wavelengths.len(),
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            wavelengths,
            layout,
            values,
        })
    }

    /// Band-sequential cube with `f(x, y, band)` at every element.
    pub fn from_fn(
        width: usize,
        height: usize,
        wavelengths: Vec<f64>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let bands = wavelengths.len();
        let mut values = Vec::with_capacity(width * height * bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(x, y, b));
                }
            }
        }
        Self::new(width, height, wavelengths, Layout::Lhw, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Raw storage in [`Self::layout`] order.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, band: usize) -> usize {
        self.layout
            .offset(x, y, band, self.width, self.height, self.bands())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f32 {
        self.values[self.offset(x, y, band)]
    }

    /// True when width, height and wavelengths agree.
    pub fn same_geometry(&self, other: &Datacube) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.wavelengths == other.wavelengths
    }

    /// One band as an H × W row-major plane.
    pub fn band_plane(&self, band: usize) -> Vec<f32> {
        if self.layout == Layout::Lhw {
            let plane = self.width * self.height;
            return self.values[band * plane..(band + 1) * plane].to_vec();
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(x, y, band));
            }
        }
        out
    }

    /// Spectrum at one pixel.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.bands()).map(|b| self.get(x, y, b)).collect()
    }

    /// Whether every value lies in [0, 1].
    pub fn is_normalized(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Re-lays the cube out in `target` order, preserving every logical
    /// (x, y, band) value.
    pub fn transpose(&self, target: Layout) -> Datacube {
        if target == self.layout {
            return self.clone();
        }
        let (w, h, n) = (self.width, self.height, self.bands());
        let mut values = vec![0.0f32; self.values.len()];
        for x in 0..w {
            for y in 0..h {
                for b in 0..n {
                    values[target.offset(x, y, b, w, h, n)] = self.get(x, y, b);
                }
            }
        }
        Datacube {
            width: w,
            height: h,
            wavelengths: self.wavelengths.clone(),
            layout: target,
            values,
        }
    }

    /// Divides by the global maximum so values land in [0, 1] with max 1.
    pub fn normalize(&self) -> Result<Datacube> {
        let max = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Degenerate(format!(
                "cannot normalize a cube whose maximum is {max}"
            )));
        }
        let mut out = self.clone();
        if max != 1.0 {
            out.values.iter_mut().for_each(|v| *v /= max);
        }
        Ok(out)
    }

    /// Sub-cube with origin (x0, y0) and extents `w` × `h`, same layout.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Datacube> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Index(format!(
                "crop {w}x{h} at ({x0}, {y0}) outside {}x{} cube",
                self.width, self.height
            )));
        }
        let n = self.bands();
        let mut values = vec![0.0f32; w * h * n];
        for x in 0..w {
            for y in 0..h {
                for b in 0..n {
                    values[self.layout.offset(x, y, b, w, h, n)] = self.get(x0 + x, y0 + y, b);
                }
            }
        }
        Datacube::new(w, h, self.wavelengths.clone(), self.layout, values)
    }

    /// Non-overlapping patches in row-major tile order.
    pub fn extract_patches(&self, patch_w: usize, patch_h: usize) -> Result<Vec<Datacube>> {
        let grid = PatchGrid::new(self.width, self.height, patch_w, patch_h)?;
        grid.origins()
            .map(|(x0, y0)| self.crop(x0, y0, patch_w, patch_h))
            .collect()
    }
}

/// Regular tiling of a W × H image by equal patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_w: usize,
    pub patch_h: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_w: usize, patch_h: usize) -> Result<Self> {
        if patch_w == 0 || patch_h == 0 {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        if width % patch_w != 0 {
            return Err(Error::Config(format!(
                "patch width {patch_w} does not divide image width {width}"
            )));
        }
        if height % patch_h != 0 {
            return Err(Error::Config(format!(
                "patch height {patch_h} does not divide image height {height}"
            )));
        }
        Ok(Self {
            patch_w,
            patch_h,
            rows: height / patch_h,
            cols: width / patch_w,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// (x, y) origin of each patch, row-major over the tile grid.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (c * self.patch_w, r * self.patch_h)))
    }

    /// Inverse of [`Datacube::extract_patches`].
    pub fn assemble(&self, patches: &[Datacube]) -> Result<Datacube> {
        if patches.len() != self.count() {
            return Err(Error::Dimension(format!(
                "grid has {} tiles but {} patches were supplied",
                self.count(),
                patches.len()
            )));
        }
        let first = &patches[0];
        let (w, h, n) = (self.cols * self.patch_w, self.rows * self.patch_h, first.bands());
        let mut values = vec![0.0f32; w * h * n];
        for ((x0, y0), patch) in self.origins().zip(patches) {
            if patch.width != self.patch_w
                || patch.height != self.patch_h
                || patch.wavelengths != first.wavelengths
            {
                return Err(Error::Dimension("patch geometry disagrees with grid".into()));
            }
            for b in 0..n {
                for y in 0..self.patch_h {
                    for x in 0..self.patch_w {
                        values[Layout::Lhw.offset(x0 + x, y0 + y, b, w, h, n)] = patch.get(x, y, b);
                    }
                }
            }
        }
        Datacube::new(w, h, first.wavelengths.clone(), Layout::Lhw, values)
    }
}

/// Serializes a cube as `HSC1`.
pub fn encode_cube(cube: &Datacube) -> Vec<u8> {
    let canonical = cube.transpose(Layout::Lhw);
    let mut buf = Vec::with_capacity(16 + 4 * (cube.bands() + cube.len()));
    buf.extend_from_slice(HSC1_MAGIC);
    for dim in [cube.width, cube.height, cube.bands()] {
        buf.write_u32::<LittleEndian>(dim as u32).expect("vec write");
    }
    for &wl in &cube.wavelengths {
        buf.write_f32::<LittleEndian>(wl as f32).expect("vec write");
    }
    for &v in &canonical.values {
        buf.write_f32::<LittleEndian>(v).expect("vec write");
    }
    buf
}

/// Parses an `HSC1` byte stream into a band-sequential cube.
pub fn decode_cube(bytes: &[u8]) -> Result<Datacube> {
    let mut rd = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic)
        .map_err(|_| Error::format("magic", "file shorter than the 4-byte HSC1 magic"))?;
    if &magic != HSC1_MAGIC {
        return Err(Error::format("magic", format!("expected \"HSC1\", found {magic:?}")));
    }
    let mut header = |field: &str| {
        rd.read_u32::<LittleEndian>()
            .map(|v| v as usize)
            .map_err(|_| Error::format(field, "truncated header"))
    };
    let width = header("width")?;
    let height = header("height")?;
    let bands = header("bands")?;
    if width == 0 || height == 0 || bands == 0 {
        return Err(Error::format(
            "dimensions",
            format!("extents must be positive, got {width}x{height}x{bands}"),
        ));
    }
    let payload = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| Error::format("dimensions", "extent product overflows"))?;
    let remaining = bytes.len() - rd.position() as usize;
    let needed = 4 * (bands + payload);
    if remaining < needed {
        return Err(Error::format(
            "values",
            format!("truncated payload: {needed} bytes expected, {remaining} present"),
        ));
    }
    if remaining > needed {
        return Err(Error::format(
            "values",
            format!("{} trailing bytes after payload", remaining - needed),
        ));
    }
    let mut wavelengths = Vec::with_capacity(bands);
    for _ in 0..bands {
        wavelengths.push(rd.read_f32::<LittleEndian>().expect("length checked") as f64);
    }
    check_wavelengths(&wavelengths)?;
    let mut values = vec![0.0f32; payload];
    rd.read_f32_into::<LittleEndian>(&mut values)
        .expect("length checked");
    Datacube::new(width, height, wavelengths, Layout::Lhw, values)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Datacube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

pub fn write_cube(cube: &Datacube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)).map_err(|e| Error::io(path, e))
}
