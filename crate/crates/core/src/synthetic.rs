//! Synthetic scenes and sensors for tests, demos and smoke runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::CssMatrix;
use crate::datacube::Datacube;
use crate::error::Result;

fn gaussian(x: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((x - centre) / width).powi(2)).exp()
}

/// Evenly spaced grid of `bands` wavelengths covering 400–700 nm.
pub fn visible_grid(bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![550.0];
    }
    let step = 300.0 / (bands - 1) as f64;
    (0..bands).map(|i| 400.0 + step * i as f64).collect()
}

/// Three Gaussian channels peaking near 600, 540 and 460 nm.
pub fn gaussian_css(wavelengths: &[f64]) -> Result<CssMatrix> {
    shifted_gaussian_css(wavelengths, 0.0)
}

/// [`gaussian_css`] with every peak moved by `shift_nm`.
pub fn shifted_gaussian_css(wavelengths: &[f64], shift_nm: f64) -> Result<CssMatrix> {
    let rows = wavelengths
        .iter()
        .map(|&wl| {
            [
                gaussian(wl, 600.0 + shift_nm, 40.0) + 0.05,
                gaussian(wl, 540.0 + shift_nm, 40.0) + 0.05,
                gaussian(wl, 460.0 + shift_nm, 35.0) + 0.05,
            ]
        })
        .collect();
    CssMatrix::new(wavelengths.to_vec(), rows)
}

/// A smooth scene: every pixel mixes three broad spectra with abundances
/// that vary as low-frequency sinusoids. Values lie in [0.1, 1] and the
/// maximum is exactly 1.
pub fn smooth_cube(width: usize, height: usize, wavelengths: &[f64], seed: u64) -> Result<Datacube> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f64> = (0..3)
        .map(|k| 450.0 + 100.0 * k as f64 + rng.random_range(-20.0..20.0))
        .collect();
    let phases: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            ]
        })
        .collect();
    let cube = Datacube::from_fn(width, height, wavelengths.to_vec(), |x, y, b| {
        let wl = wavelengths[b];
        let u = x as f64 / width as f64;
        let v = y as f64 / height as f64;
        let mut s = 0.0;
        for k in 0..3 {
            let [phase, fu, fv] = phases[k];
            let abundance = 0.6 + 0.3 * (2.0 * PI * (fu * u + fv * v) + phase).sin();
            s += abundance * (0.5 + gaussian(wl, centres[k], 60.0));
        }
        s as f32
    })?;
    cube.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_cube_range() {
        let c = smooth_cube(12, 10, &visible_grid(8), 3).unwrap();
        let max = c.values().iter().copied().fold(0.0f32, f32::max);
        let min = c.values().iter().copied().fold(1.0f32, f32::min);
        assert_eq!(max, 1.0);
        assert!(min >= 0.1, "min {min}");
    }

    #[test]
    fn grid_endpoints() {
        let g = visible_grid(31);
        assert_eq!(g[0], 400.0);
        assert_eq!(g[30], 700.0);
        assert!((g[1] - 410.0).abs() < 1e-12);
    }
}
