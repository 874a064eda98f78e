//! Intensity clipping and spacing resampling.
//!
//! Resampling works in physical coordinates anchored at voxel centers: the
//! lattice covers `[0, dims * spacing)` mm from a shared corner and output
//! voxel `i` samples the input at `(i + 0.5) * spacing_out` mm. Samples past
//! the last input voxel center clamp to the border voxel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid, ImageGrid, LabelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clip_lo: f32,
    pub clip_hi: f32,
    /// Target voxel size in mm.
    pub target_spacing: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clip_lo: -1000.0,
            clip_hi: 3800.0,
            target_spacing: [0.6; 3],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::InvalidConfig(format!(
                "clip range [{}, {}] is empty",
                self.clip_lo, self.clip_hi
            )));
        }
        check_spacing(self.target_spacing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "target spacing {spacing:?} must be positive"
        )));
    }
    Ok(())
}

pub fn clip_intensity(img: &ImageGrid, lo: f32, hi: f32) -> Result<ImageGrid> {
    if !(lo < hi) {
        return Err(Error::InvalidConfig(format!("clip range [{lo}, {hi}] is empty")));
    }
    Ok(img.map(|v| v.clamp(lo, hi)))
}

/// Output dims under the ceiling rule, so no physical extent is lost.
pub fn resampled_dims(dims: [usize; 3], spacing_in: [f64; 3], spacing_out: [f64; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing_in[a] / spacing_out[a];
        // absorb representation error such as 168 * 0.3 / 0.6 = 84.00000000000001
        out[a] = ((extent - 1e-6).ceil() as usize).max(1);
    }
    out
}

fn target_geometry(src: &Geometry, spacing: [f64; 3]) -> Geometry {
    let mut g = src.clone();
    g.dims = resampled_dims(src.dims, src.spacing, spacing);
    g.frame.rescale(src.spacing, spacing);
    g.spacing = spacing;
    g
}

/// Per-axis nearest source index for each output index.
fn nearest_table(n_out: usize, n_in: usize, s_out: f64, s_in: f64) -> Vec<usize> {
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) * s_out / s_in;
            ((u + 1e-9).floor() as usize).min(n_in - 1)
        })
        .collect()
}

/// Per-axis (lower index, upper index, upper weight) for each output index.
fn linear_table(n_out: usize, n_in: usize, s_out: f64, s_in: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let u = ((i as f64 + 0.5) * s_out / s_in - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

fn resample_nearest<T: Copy + Send + Sync>(grid: &Grid<T>, out_geom: Geometry) -> Result<Grid<T>> {
    let [nx, ny, nz] = out_geom.dims;
    let [ix, iy, iz] = grid.dims();
    let tx = nearest_table(nx, ix, out_geom.spacing[0], grid.spacing()[0]);
    let ty = nearest_table(ny, iy, out_geom.spacing[1], grid.spacing()[1]);
    let tz = nearest_table(nz, iz, out_geom.spacing[2], grid.spacing()[2]);
    let src = grid.data();
    let mut data: Vec<T> = vec![src[0]; nx * ny * nz];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        let zoff = tz[z] * ix * iy;
        for y in 0..ny {
            let row = zoff + ty[y] * ix;
            for x in 0..nx {
                slab[x + y * nx] = src[row + tx[x]];
            }
        }
    });
    Grid::new(out_geom, data)
}

fn resample_trilinear(img: &ImageGrid, out_geom: Geometry) -> Result<ImageGrid> {
    let [nx, ny, nz] = out_geom.dims;
    let [ix, iy, iz] = img.dims();
    let tx = linear_table(nx, ix, out_geom.spacing[0], img.spacing()[0]);
    let ty = linear_table(ny, iy, out_geom.spacing[1], img.spacing()[1]);
    let tz = linear_table(nz, iz, out_geom.spacing[2], img.spacing()[2]);
    let src = img.data();
    let at = |x: usize, y: usize, z: usize| f64::from(src[x + ix * (y + iy * z)]);
    let mut data = vec![0f32; nx * ny * nz];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        let (z0, z1, wz) = tz[z];
        for y in 0..ny {
            let (y0, y1, wy) = ty[y];
            for x in 0..nx {
                let (x0, x1, wx) = tx[x];
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                slab[x + y * nx] = (c0 * (1.0 - wz) + c1 * wz) as f32;
            }
        }
    });
    Grid::new(out_geom, data)
}

pub fn resample_image(img: &ImageGrid, spacing: [f64; 3], mode: Interpolation) -> Result<ImageGrid> {
    check_spacing(spacing)?;
    let geom = target_geometry(img.geometry(), spacing);
    match mode {
        Interpolation::Nearest => resample_nearest(img, geom),
        Interpolation::Trilinear => resample_trilinear(img, geom),
    }
}

/// Nearest-neighbor label resampling to a new spacing.
pub fn resample_labels(lbl: &LabelGrid, spacing: [f64; 3]) -> Result<LabelGrid> {
    check_spacing(spacing)?;
    resample_nearest(lbl, target_geometry(lbl.geometry(), spacing))
}

/// Bring a label map onto `reference`'s lattice (dims, spacing and frame),
/// e.g. a 0.6 mm prediction back onto the native image grid.
pub fn resample_labels_to_reference(lbl: &LabelGrid, reference: &Geometry) -> Result<LabelGrid> {
    reference.validate()?;
    let mut geom = reference.clone();
    geom.orientation = lbl.geometry().orientation;
    resample_nearest(lbl, geom)
}

/// Clip, then resample with trilinear interpolation.
pub fn preprocess_image(img: &ImageGrid, cfg: &PreprocessConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    let clipped = clip_intensity(img, cfg.clip_lo, cfg.clip_hi)?;
    resample_image(&clipped, cfg.target_spacing, Interpolation::Trilinear)
}
