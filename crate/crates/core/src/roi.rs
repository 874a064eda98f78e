//! Mandible-anchored Phase-2 crop box and merge of Phase-2 nerve labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, VoxelBox};
use crate::labels::{LabelTable, BACKGROUND, NERVES};

/// Box extents around the mandible anchor, in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiExpansion {
    pub lateral_minus: usize,
    pub lateral_plus: usize,
    pub posterior: usize,
    pub superior: usize,
}

impl Default for RoiExpansion {
    fn default() -> Self {
        RoiExpansion {
            lateral_minus: 110,
            lateral_plus: 110,
            posterior: 100,
            superior: 90,
        }
    }
}

impl RoiExpansion {
    /// Box widths when no clamping occurs.
    pub fn unclamped_widths(&self) -> [usize; 3] {
        [
            self.lateral_minus + self.lateral_plus + 1,
            self.posterior + 1,
            self.superior + 1,
        ]
    }
}

/// Landmarks the box is built from, in array coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MandibleLandmarks {
    /// Most anterior mandible voxel; ties go to the most inferior, then the
    /// smallest x.
    pub anterior: [usize; 3],
    /// Array z of the most inferior mandible voxel.
    pub inferior_z: usize,
}

pub fn mandible_landmarks(lbl: &LabelGrid, mandible_id: u16) -> Result<MandibleLandmarks> {
    let dims = lbl.dims();
    let orient = lbl.geometry().orientation;
    // (y, z, x) in anatomical coordinates, compared lexicographically
    let mut best: Option<(usize, usize, usize)> = None;
    let mut min_z = usize::MAX;
    for (i, &v) in lbl.data().iter().enumerate() {
        if v != mandible_id {
            continue;
        }
        let a = orient.to_anatomical(lbl.coords(i), dims);
        let key = (a[1], a[2], a[0]);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
        min_z = min_z.min(a[2]);
    }
    let (y, z, x) = best.ok_or(Error::MandibleAbsent)?;
    let anterior = orient.to_anatomical([x, y, z], dims);
    let inferior_z = orient.to_anatomical([0, 0, min_z], dims)[2];
    Ok(MandibleLandmarks {
        anterior,
        inferior_z,
    })
}

/// Box spanning `anterior.x ± lateral`, `posterior` voxels back from the
/// anterior point and `superior` voxels up from the most inferior mandible
/// point, clamped to the grid.
pub fn phase2_box_from_landmarks(
    marks: &MandibleLandmarks,
    lbl: &LabelGrid,
    exp: &RoiExpansion,
) -> Result<VoxelBox> {
    let dims = lbl.dims();
    let orient = lbl.geometry().orientation;
    let a = orient.to_anatomical(marks.anterior, dims);
    let inf = orient.to_anatomical([0, 0, marks.inferior_z], dims)[2];
    let (ax, ay) = (a[0] as i64, a[1] as i64);
    let lo = [ax - exp.lateral_minus as i64, ay, inf as i64];
    let hi = [
        ax + exp.lateral_plus as i64,
        ay + exp.posterior as i64,
        inf as i64 + exp.superior as i64,
    ];
    let bx = VoxelBox::clamped(lo, hi, dims)?;
    // back to array coordinates; flipped axes reverse the range
    let c_lo = orient.to_anatomical(bx.lo, dims);
    let c_hi = orient.to_anatomical(bx.hi, dims);
    let mut out = VoxelBox { lo: c_lo, hi: c_hi };
    for ax in 0..3 {
        if out.lo[ax] > out.hi[ax] {
            std::mem::swap(&mut out.lo[ax], &mut out.hi[ax]);
        }
    }
    Ok(out)
}

pub fn compute_phase2_box(lbl: &LabelGrid, mandible_id: u16, exp: &RoiExpansion) -> Result<VoxelBox> {
    let marks = mandible_landmarks(lbl, mandible_id)?;
    phase2_box_from_landmarks(&marks, lbl, exp)
}

/// Ratio of full-grid voxels to box voxels.
pub fn reduction_factor(dims: [usize; 3], bx: &VoxelBox) -> f64 {
    dims.iter().product::<usize>() as f64 / bx.num_voxels() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergePolicy {
    /// Labels Phase 2 is authoritative for.
    pub nerve_ids: BTreeSet<u16>,
    /// Clear every Phase-1 nerve voxel before writing Phase-2 nerves.
    pub clear_phase1_nerves: bool,
    /// Phase-2 nerves replace any Phase-1 label inside the box; otherwise
    /// they only fill background or nerve voxels.
    pub override_all: bool,
}

impl Default for MergePolicy {
    fn default() -> Self {
        let table = LabelTable::builtin();
        MergePolicy {
            nerve_ids: NERVES.iter().filter_map(|&n| table.dense_of(n)).collect(),
            clear_phase1_nerves: true,
            override_all: true,
        }
    }
}

impl MergePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.nerve_ids.is_empty() {
            return Err(Error::InvalidConfig("merge policy needs at least one nerve id".into()));
        }
        Ok(())
    }
}

pub fn merge_phase2(phase1: &LabelGrid, phase2: &LabelGrid, bx: &VoxelBox, policy: &MergePolicy) -> Result<LabelGrid> {
    policy.validate()?;
    if !bx.fits(phase1.dims()) {
        return Err(Error::BoxOutOfBounds {
            lo: bx.lo,
            hi: bx.hi,
            dims: phase1.dims(),
        });
    }
    if phase2.dims() != bx.widths() {
        return Err(Error::DimsMismatch {
            expected: bx.widths(),
            found: phase2.dims(),
        });
    }
    let is_nerve = |v: u16| policy.nerve_ids.contains(&v);
    let mut out = phase1.clone();
    if policy.clear_phase1_nerves {
        for v in out.data_mut() {
            if is_nerve(*v) {
                *v = BACKGROUND;
            }
        }
    }
    let w = bx.widths();
    for k in 0..w[2] {
        for j in 0..w[1] {
            for i in 0..w[0] {
                let s = phase2.get(i, j, k);
                if !is_nerve(s) {
                    continue;
                }
                let (x, y, z) = (bx.lo[0] + i, bx.lo[1] + j, bx.lo[2] + k);
                let d = out.get(x, y, z);
                if policy.override_all || d == BACKGROUND || is_nerve(d) {
                    out.set(x, y, z, s);
                }
            }
        }
    }
    Ok(out)
}
