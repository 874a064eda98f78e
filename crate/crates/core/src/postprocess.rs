//! Connected components and the two post-fusion cleanup rules.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelGrid, VoxelBox};
use crate::labels::{BACKGROUND, MANDIBLE, PHARYNX};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, not {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Which components touching the pharynx count as aberrant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AberrancyPolicy {
    /// Every component except the largest of its class.
    #[default]
    NonLargestTouching,
    AnyTouching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub connectivity: Connectivity,
    pub pharynx_id: u16,
    pub mandible_id: u16,
    pub min_mandible_voxels: usize,
    pub policy: AberrancyPolicy,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        // dense ids coincide with consolidated ids below 8
        PostprocessConfig {
            connectivity: Connectivity::TwentySix,
            pharynx_id: PHARYNX,
            mandible_id: MANDIBLE,
            min_mandible_voxels: 200_000,
            policy: AberrancyPolicy::NonLargestTouching,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_mandible_voxels == 0 {
            return Err(Error::InvalidConfig("min_mandible_voxels must be positive".into()));
        }
        Ok(())
    }
}

/// Voxel-count threshold equivalent to a volume threshold in mm³: a
/// component is below `mm3` exactly when its count is below the result.
pub fn min_voxels_for_volume(mm3: f64, spacing: [f64; 3]) -> usize {
    let voxel = spacing[0] * spacing[1] * spacing[2];
    ((mm3 / voxel - 1e-9).ceil().max(1.0)) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub class: u16,
    /// Linear indices, ascending.
    pub voxels: Vec<usize>,
    pub bbox: VoxelBox,
}

impl Component {
    pub fn count(&self) -> usize {
        self.voxels.len()
    }

    pub fn min_index(&self) -> usize {
        self.voxels[0]
    }
}

struct Neighbors {
    offsets: Vec<[i64; 3]>,
    dims: [usize; 3],
}

impl Neighbors {
    fn new(conn: Connectivity, dims: [usize; 3]) -> Self {
        Neighbors {
            offsets: conn.offsets(),
            dims,
        }
    }

    #[inline]
    fn for_each(&self, i: usize, mut f: impl FnMut(usize)) {
        let [nx, ny, nz] = self.dims;
        let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
        for &[dx, dy, dz] in &self.offsets {
            let (a, b, c) = (x + dx, y + dy, z + dz);
            if a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz {
                f(a as usize + nx * (b as usize + ny * c as usize));
            }
        }
    }
}

fn flood(lbl: &LabelGrid, seed: usize, nb: &Neighbors, seen: &mut [bool], queue: &mut VecDeque<usize>) -> Component {
    let class = lbl.data()[seed];
    let mut voxels = Vec::new();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    seen[seed] = true;
    queue.push_back(seed);
    while let Some(i) = queue.pop_front() {
        voxels.push(i);
        let p = lbl.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        nb.for_each(i, |j| {
            if !seen[j] && lbl.data()[j] == class {
                seen[j] = true;
                queue.push_back(j);
            }
        });
    }
    voxels.sort_unstable();
    Component {
        class,
        voxels,
        bbox: VoxelBox { lo, hi },
    }
}

fn sort_components(comps: &mut [Component]) {
    comps.sort_by(|a, b| b.count().cmp(&a.count()).then(a.min_index().cmp(&b.min_index())));
}

/// Maximal connected sets of `class`, largest first, ties by smallest
/// linear index.
pub fn connected_components(lbl: &LabelGrid, class: u16, connectivity: Connectivity) -> Vec<Component> {
    let nb = Neighbors::new(connectivity, lbl.dims());
    let mut seen = vec![false; lbl.len()];
    let mut queue = VecDeque::new();
    let mut comps = Vec::new();
    for i in 0..lbl.len() {
        if !seen[i] && lbl.data()[i] == class {
            comps.push(flood(lbl, i, &nb, &mut seen, &mut queue));
        }
    }
    sort_components(&mut comps);
    comps
}

/// Components of every class except `skip`, grouped by class in ascending
/// class order and sorted within a class as in [`connected_components`].
pub fn all_components(lbl: &LabelGrid, connectivity: Connectivity, skip: &[u16]) -> Vec<Component> {
    let nb = Neighbors::new(connectivity, lbl.dims());
    let mut seen = vec![false; lbl.len()];
    let mut queue = VecDeque::new();
    let mut comps = Vec::new();
    for i in 0..lbl.len() {
        if !seen[i] && !skip.contains(&lbl.data()[i]) {
            comps.push(flood(lbl, i, &nb, &mut seen, &mut queue));
        }
    }
    comps.sort_by_key(|c| c.class);
    let mut start = 0;
    while start < comps.len() {
        let class = comps[start].class;
        let end = start + comps[start..].iter().take_while(|c| c.class == class).count();
        sort_components(&mut comps[start..end]);
        start = end;
    }
    comps
}

/// Rewrite aberrant components that touch the pharynx (26-adjacency) to the
/// pharynx label. Newly relabeled components count as pharynx for their
/// neighbors, so the result is closed under the rule.
pub fn relabel_touching_pharynx(lbl: &LabelGrid, cfg: &PostprocessConfig) -> Result<LabelGrid> {
    cfg.validate()?;
    let pharynx = cfg.pharynx_id;
    let mut is_pharynx: Vec<bool> = lbl.data().iter().map(|&v| v == pharynx).collect();
    if !is_pharynx.iter().any(|&p| p) {
        return Ok(lbl.clone());
    }
    let comps = all_components(lbl, cfg.connectivity, &[BACKGROUND, pharynx]);
    let mut candidates: Vec<&Component> = Vec::new();
    let mut prev_class = None;
    for c in &comps {
        let largest = prev_class != Some(c.class);
        prev_class = Some(c.class);
        if !largest || cfg.policy == AberrancyPolicy::AnyTouching {
            candidates.push(c);
        }
    }

    let touch = Neighbors::new(Connectivity::TwentySix, lbl.dims());
    let mut done = vec![false; candidates.len()];
    let mut out = lbl.clone();
    loop {
        let mut changed = false;
        for (k, comp) in candidates.iter().enumerate() {
            if done[k] {
                continue;
            }
            let touches = comp.voxels.iter().any(|&i| {
                let mut hit = false;
                touch.for_each(i, |j| hit |= is_pharynx[j]);
                hit
            });
            if touches {
                for &i in &comp.voxels {
                    is_pharynx[i] = true;
                    out.data_mut()[i] = pharynx;
                }
                done[k] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(out)
}

/// Set mandible components smaller than the threshold to background.
pub fn filter_small_mandible(lbl: &LabelGrid, cfg: &PostprocessConfig) -> Result<LabelGrid> {
    cfg.validate()?;
    let mut out = lbl.clone();
    for c in connected_components(lbl, cfg.mandible_id, cfg.connectivity) {
        if c.count() < cfg.min_mandible_voxels {
            for &i in &c.voxels {
                out.data_mut()[i] = BACKGROUND;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleanupOrder {
    #[default]
    PharynxFirst,
    MandibleFirst,
}

/// Both cleanup rules in the given order.
pub fn cleanup(lbl: &LabelGrid, cfg: &PostprocessConfig, order: CleanupOrder) -> Result<LabelGrid> {
    match order {
        CleanupOrder::PharynxFirst => filter_small_mandible(&relabel_touching_pharynx(lbl, cfg)?, cfg),
        CleanupOrder::MandibleFirst => relabel_touching_pharynx(&filter_small_mandible(lbl, cfg)?, cfg),
    }
}

/// Per-voxel component index for one class (`u32::MAX` elsewhere), handy
/// for comparing partitions.
pub fn component_map(lbl: &LabelGrid, comps: &[Component]) -> Grid<u32> {
    let mut ids = vec![u32::MAX; lbl.len()];
    for (k, c) in comps.iter().enumerate() {
        for &i in &c.voxels {
            ids[i] = k as u32;
        }
    }
    lbl.with_data(ids).expect("same geometry")
}
