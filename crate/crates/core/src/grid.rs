//! Voxel grids, their geometry, and crop/paste on inclusive voxel boxes.
//!
//! Voxels are stored x-fastest, then y, then z. Callers go through
//! [`Grid::index`] and [`Grid::coords`] rather than computing offsets
//! themselves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction in which an anatomical axis grows along its array axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisSense {
    #[default]
    Increasing,
    Decreasing,
}

/// Declared axis roles for a pipeline run.
///
/// x is lateral (left-right). With the default senses, y grows from
/// anterior to posterior and z grows from inferior to superior. The
/// convention is declared, never inferred from file headers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub posterior: AxisSense,
    pub superior: AxisSense,
}

impl Orientation {
    /// Map an array coordinate along `axis` into the anatomical frame where
    /// every axis increases posteriorly / superiorly, and back (the map is
    /// an involution).
    pub fn to_anatomical(&self, p: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
        let mut q = p;
        if self.posterior == AxisSense::Decreasing {
            q[1] = dims[1] - 1 - p[1];
        }
        if self.superior == AxisSense::Decreasing {
            q[2] = dims[2] - 1 - p[2];
        }
        q
    }
}

/// Spatial fields of a NIfTI-1 header, carried through processing so that
/// written volumes stay registered with their source. Not used for any
/// landmark logic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f64; 3],
    pub qoffset: [f64; 3],
    pub qfac: f64,
    pub srow: [[f64; 4]; 3],
}

impl Default for Frame {
    fn default() -> Self {
        Frame {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            qfac: 1.0,
            srow: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }
}

impl Frame {
    /// An identity-rotation frame with the sform scaled by `spacing`.
    pub fn scaled(spacing: [f64; 3]) -> Self {
        let mut f = Frame::default();
        for a in 0..3 {
            f.srow[a][a] = spacing[a];
        }
        f
    }

    fn qform_rotation(&self) -> [[f64; 3]; 3] {
        let [b, c, d] = self.quatern;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    }

    /// Move the origin to the (possibly fractional) voxel position `delta`.
    pub fn translate(&mut self, delta: [f64; 3], spacing: [f64; 3]) {
        for row in self.srow.iter_mut() {
            row[3] += row[0] * delta[0] + row[1] * delta[1] + row[2] * delta[2];
        }
        let r = self.qform_rotation();
        let qfac = if self.qfac < 0.0 { -1.0 } else { 1.0 };
        let step = [delta[0] * spacing[0], delta[1] * spacing[1], delta[2] * spacing[2] * qfac];
        for (a, off) in self.qoffset.iter_mut().enumerate() {
            *off += r[a][0] * step[0] + r[a][1] * step[1] + r[a][2] * step[2];
        }
    }

    /// Re-express the frame for a lattice of `new` spacing covering the same
    /// physical corner as the old one.
    pub fn rescale(&mut self, old: [f64; 3], new: [f64; 3]) {
        let delta = [
            0.5 * new[0] / old[0] - 0.5,
            0.5 * new[1] / old[1] - 0.5,
            0.5 * new[2] / old[2] - 0.5,
        ];
        self.translate(delta, old);
        for row in self.srow.iter_mut() {
            for a in 0..3 {
                row[a] *= new[a] / old[a];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    pub frame: Frame,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            orientation: Orientation::default(),
            frame: Frame::scaled(spacing),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims {:?} must be positive", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Volume of a single voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Same dims and spacing (within 1e-6 mm). Frame and orientation are
    /// not compared.
    pub fn same_lattice(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6)
    }

    pub fn ensure_same_lattice(&self, other: &Geometry) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch {
                expected: self.dims,
                found: other.dims,
            });
        }
        if !self.same_lattice(other) {
            return Err(Error::GeometryMismatch(format!(
                "spacing {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

/// Inclusive axis-aligned voxel index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl VoxelBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(Error::EmptyBox);
        }
        Ok(VoxelBox { lo, hi })
    }

    pub fn whole(dims: [usize; 3]) -> Self {
        VoxelBox {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    /// Clamp a signed inclusive range to `dims`.
    pub fn clamped(lo: [i64; 3], hi: [i64; 3], dims: [usize; 3]) -> Result<Self> {
        let mut out_lo = [0usize; 3];
        let mut out_hi = [0usize; 3];
        for a in 0..3 {
            let max = dims[a] as i64 - 1;
            let l = lo[a].max(0);
            let h = hi[a].min(max);
            if l > h {
                return Err(Error::EmptyBox);
            }
            out_lo[a] = l as usize;
            out_hi[a] = h as usize;
        }
        Ok(VoxelBox {
            lo: out_lo,
            hi: out_hi,
        })
    }

    pub fn widths(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn num_voxels(&self) -> usize {
        self.widths().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }

    fn check_fits(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.lo[a] > self.hi[a]) {
            return Err(Error::EmptyBox);
        }
        if !self.fits(dims) {
            return Err(Error::BoxOutOfBounds {
                lo: self.lo,
                hi: self.hi,
                dims,
            });
        }
        Ok(())
    }
}

/// A scalar field over a 3D voxel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

/// Intensities in HU.
pub type ImageGrid = Grid<f32>;
/// One label per voxel.
pub type LabelGrid = Grid<u16>;

impl<T: Copy> Grid<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.num_voxels() {
            return Err(Error::InvalidGrid(format!(
                "{} voxels for dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Grid { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Result<Self> {
        let n = geometry.num_voxels();
        Grid::new(geometry, vec![value; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.geometry.dims;
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.geometry.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn set_orientation(&mut self, orientation: Orientation) {
        self.geometry.orientation = orientation;
    }

    /// A grid on the same geometry holding `data`.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Grid<U>> {
        Grid::new(self.geometry.clone(), data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl LabelGrid {
    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn labels_present(&self) -> BTreeSet<u16> {
        let mut seen = vec![false; usize::from(u16::MAX) + 1];
        for &v in &self.data {
            seen[usize::from(v)] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(l, _)| l as u16)
            .collect()
    }
}

/// Extract the voxels of `bx`. Spacing and orientation carry over; the
/// header frame is shifted so the crop stays registered.
pub fn crop<T: Copy>(grid: &Grid<T>, bx: &VoxelBox) -> Result<Grid<T>> {
    bx.check_fits(grid.dims())?;
    let w = bx.widths();
    let mut data = Vec::with_capacity(bx.num_voxels());
    for z in bx.lo[2]..=bx.hi[2] {
        for y in bx.lo[1]..=bx.hi[1] {
            let start = grid.index(bx.lo[0], y, z);
            data.extend_from_slice(&grid.data[start..start + w[0]]);
        }
    }
    let mut geometry = grid.geometry.clone();
    geometry.dims = w;
    geometry
        .frame
        .translate(bx.lo.map(|v| v as f64), grid.geometry.spacing);
    Grid::new(geometry, data)
}

/// Which source labels [`paste`] writes into the destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OverwriteSet {
    All,
    Labels(BTreeSet<u16>),
}

impl OverwriteSet {
    pub fn contains(&self, label: u16) -> bool {
        match self {
            OverwriteSet::All => true,
            OverwriteSet::Labels(s) => s.contains(&label),
        }
    }
}

impl<I: IntoIterator<Item = u16>> From<I> for OverwriteSet {
    fn from(labels: I) -> Self {
        OverwriteSet::Labels(labels.into_iter().collect())
    }
}

/// Write `src` into a copy of `dst` at `bx`. Inside the box a destination
/// voxel takes the source value iff that value is in `policy`; everything
/// outside the box is untouched.
pub fn paste(dst: &LabelGrid, src: &LabelGrid, bx: &VoxelBox, policy: &OverwriteSet) -> Result<LabelGrid> {
    bx.check_fits(dst.dims())?;
    if src.dims() != bx.widths() {
        return Err(Error::DimsMismatch {
            expected: bx.widths(),
            found: src.dims(),
        });
    }
    let mut out = dst.clone();
    let w = bx.widths();
    for k in 0..w[2] {
        for j in 0..w[1] {
            let d0 = out.index(bx.lo[0], bx.lo[1] + j, bx.lo[2] + k);
            let s0 = src.index(0, j, k);
            let src_row = &src.data[s0..s0 + w[0]];
            let dst_row = &mut out.data[d0..d0 + w[0]];
            for (d, &s) in dst_row.iter_mut().zip(src_row) {
                if policy.contains(s) {
                    *d = s;
                }
            }
        }
    }
    Ok(out)
}
