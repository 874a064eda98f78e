//! Synthetic jaw phantom and simulated noisy raters.
//!
//! All randomness comes from ChaCha8 keyed by the 64-bit seed (little-endian
//! in the first 8 key bytes, remaining key bytes zero) with an explicit
//! stream number. Voxel `i` consumes exactly two 64-bit outputs at word
//! position `4 i`, so any implementation of ChaCha8 reproduces the same
//! volumes regardless of how the work is split.
//!
//! Shapes are laid out in voxel units relative to the grid dims with the
//! default orientation: y grows posteriorly, z superiorly. "Left" in the
//! phantom means smaller x.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, ImageGrid, LabelGrid};
use crate::labels::{BACKGROUND, LEFT_INCISIVE_NERVE, LINGUAL_NERVE, MANDIBLE, PHARYNX, PULP, RIGHT_INCISIVE_NERVE};

pub const HU_AIR: f32 = -1000.0;
pub const HU_SOFT_TISSUE: f32 = 40.0;
pub const HU_BONE: f32 = 1500.0;
pub const HU_ENAMEL: f32 = 2500.0;
pub const HU_PULP: f32 = 40.0;
pub const HU_NERVE: f32 = 40.0;

const STREAM_LAYOUT: u64 = 0;
const STREAM_IMAGE_NOISE: u64 = 1;
const STREAM_FLIPS: u64 = 0;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut r = ChaCha8Rng::from_seed(key);
    r.set_stream(stream);
    r
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform index in `0..n` by multiply-shift.
fn pick(x: u64, n: usize) -> usize {
    ((u128::from(x) * n as u128) >> 64) as usize
}

/// Fill `out[i] = f(i, a_i, b_i)` where `(a_i, b_i)` are the two 64-bit
/// draws assigned to voxel `i` on `(seed, stream)`.
fn per_voxel<T: Send>(n: usize, seed: u64, stream: u64, f: impl Fn(usize, u64, u64) -> T + Sync) -> Vec<T> {
    const CHUNK: usize = 1 << 14;
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let mut r = rng(seed, stream);
            r.set_word_pos(4 * start as u128);
            let f = &f;
            (start..end).map(move |i| {
                let a = r.next_u64();
                let b = r.next_u64();
                f(i, a, b)
            })
        })
        .collect()
}

/// Seed of rater `k` (0-based) derived from a phantom seed.
pub fn rater_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64 + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm per voxel
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Lower teeth on the arch, even, at most 16.
    pub num_teeth: usize,
    /// Half-width of uniform intensity noise in HU.
    pub noise_hu: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [80, 80, 56],
            spacing: [0.6; 3],
            seed: 0,
            num_teeth: 6,
            noise_hu: 20.0,
        }
    }
}

/// Shape parameters in voxel units, written alongside generated volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomLayout {
    pub arch_center: [f64; 2],
    pub outer_radius: f64,
    pub inner_radius: f64,
    pub arm_length: f64,
    pub mandible_z: [f64; 2],
    pub nerve_radius: f64,
    pub tooth_radius: f64,
    pub pulp_radius: f64,
    pub teeth: Vec<(u16, [f64; 3])>,
    pub pharynx_center: [f64; 2],
    pub pharynx_radius: f64,
    /// Closed-form mandible volume in mm³ (nerve channels included).
    pub mandible_volume_mm3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomDescription {
    pub spec: PhantomSpec,
    pub layout: PhantomLayout,
    /// (structure, HU) before noise
    pub intensities: Vec<(String, f32)>,
}

pub struct Phantom {
    pub image: ImageGrid,
    pub labels: LabelGrid,
    pub description: PhantomDescription,
}

fn tooth_ids(n: usize) -> Vec<u16> {
    // right side (larger x) first, ordered from the back toward the midline
    let half = n / 2;
    let mut ids: Vec<u16> = (1..=half as u16).rev().map(|k| 40 + k).collect();
    ids.extend((1..=half as u16).map(|k| 30 + k));
    ids
}

fn layout(spec: &PhantomSpec) -> Result<PhantomLayout> {
    let [nx, ny, nz] = spec.dims.map(|d| d as f64);
    if spec.dims.iter().any(|&d| d < 24) {
        return Err(Error::Phantom(format!("dims {:?} too small (min 24 per axis)", spec.dims)));
    }
    if !spec.num_teeth.is_multiple_of(2) || spec.num_teeth > 16 {
        return Err(Error::Phantom(format!(
            "num_teeth {} must be even and at most 16",
            spec.num_teeth
        )));
    }
    let mut r = rng(spec.seed, STREAM_LAYOUT);
    let mut jitter = |amp: f64| (unit(r.next_u64()) * 2.0 - 1.0) * amp;

    let cx = nx / 2.0 + jitter(1.5);
    let cy = 0.38 * ny + jitter(1.5);
    let outer = (0.32 * nx).min(0.3 * ny);
    let inner = 0.55 * outer;
    let arm = 0.3 * ny;
    let z0 = (0.18 * nz).round();
    let height = (0.24 * nz).round();
    let mid = 0.5 * (outer + inner);
    let nerve_radius = 1.5;

    let n = spec.num_teeth;
    let (lo_ang, hi_ang) = (0.08 * PI, 0.92 * PI);
    let step = if n > 1 { (hi_ang - lo_ang) / (n - 1) as f64 * mid } else { f64::INFINITY };
    let tooth_radius = (0.45 * (outer - inner)).min(step / 2.0 - 0.75);
    if n > 0 && tooth_radius < 1.5 {
        return Err(Error::Phantom(format!(
            "dims {:?} too small for {} teeth",
            spec.dims, n
        )));
    }
    let tz = z0 + height + tooth_radius + 1.0;
    let ids = tooth_ids(n);
    let teeth: Vec<(u16, [f64; 3])> = (0..n)
        .map(|k| {
            let phi = if n > 1 {
                lo_ang + (hi_ang - lo_ang) * k as f64 / (n - 1) as f64
            } else {
                PI / 2.0
            };
            (ids[k], [cx + mid * phi.cos(), cy - mid * phi.sin(), tz])
        })
        .collect();

    let pharynx_radius = 0.5 * inner;
    let pharynx_center = [cx, cy + 0.7 * arm];

    let fits = cy - outer >= 1.0
        && cy + arm < ny - 1.0
        && cx - outer >= 1.0
        && cx + outer < nx - 1.0
        && tz + tooth_radius < nz - 1.0
        && pharynx_center[1] + pharynx_radius < ny - 1.0;
    if !fits {
        return Err(Error::Phantom(format!("shapes exceed dims {:?}", spec.dims)));
    }

    let area = PI / 2.0 * (outer * outer - inner * inner) + 2.0 * (outer - inner) * arm;
    let voxel: f64 = spec.spacing.iter().product();
    Ok(PhantomLayout {
        arch_center: [cx, cy],
        outer_radius: outer,
        inner_radius: inner,
        arm_length: arm,
        mandible_z: [z0, z0 + height],
        nerve_radius,
        tooth_radius,
        pulp_radius: 0.45 * tooth_radius,
        teeth,
        pharynx_center,
        pharynx_radius,
        mandible_volume_mm3: area * height * voxel,
    })
}

fn classify(l: &PhantomLayout, p: [f64; 3]) -> u16 {
    let [x, y, z] = p;
    let [cx, cy] = l.arch_center;
    let in_slab = z >= l.mandible_z[0] && z < l.mandible_z[1];
    if in_slab {
        let dx = x - cx;
        let dy = cy - y;
        let r = dx.hypot(dy);
        let in_arch = dy >= 0.0 && r >= l.inner_radius && r <= l.outer_radius;
        let in_arm = dy < 0.0
            && -dy <= l.arm_length
            && dx.abs() >= l.inner_radius
            && dx.abs() <= l.outer_radius;
        if in_arch || in_arm {
            let mid = 0.5 * (l.inner_radius + l.outer_radius);
            let zc = 0.5 * (l.mandible_z[0] + l.mandible_z[1]);
            if in_arch {
                let phi = dy.atan2(dx);
                let d = (r - mid).hypot(z - zc);
                if d <= l.nerve_radius {
                    let off = phi - PI / 2.0;
                    if (0.15..=0.9).contains(&off) {
                        return LEFT_INCISIVE_NERVE;
                    }
                    if (-0.9..=-0.15).contains(&off) {
                        return RIGHT_INCISIVE_NERVE;
                    }
                }
            } else if dx < 0.0 {
                let d = (dx + mid).hypot(z - zc);
                if d <= l.nerve_radius && -dy >= 2.0 && -dy <= l.arm_length - 2.0 {
                    return LINGUAL_NERVE;
                }
            }
            return MANDIBLE;
        }
    }
    for &(id, c) in &l.teeth {
        let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2)).sqrt();
        if d <= l.pulp_radius {
            return PULP;
        }
        if d <= l.tooth_radius {
            return id;
        }
    }
    if (x - l.pharynx_center[0]).hypot(y - l.pharynx_center[1]) <= l.pharynx_radius {
        return PHARYNX;
    }
    BACKGROUND
}

fn intensity(label: u16) -> f32 {
    match label {
        BACKGROUND => HU_SOFT_TISSUE,
        MANDIBLE => HU_BONE,
        PHARYNX => HU_AIR,
        PULP => HU_PULP,
        LEFT_INCISIVE_NERVE | RIGHT_INCISIVE_NERVE | LINGUAL_NERVE => HU_NERVE,
        _ => HU_ENAMEL,
    }
}

/// Build the phantom image and reference labels (consolidated ids).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let geometry = Geometry::new(spec.dims, spec.spacing)?;
    let l = layout(spec)?;
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let (bx, by, bz) = (nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0);
    let labels: Vec<u16> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
            classify(&l, p)
        })
        .collect();
    let noise = spec.noise_hu;
    let image: Vec<f32> = per_voxel(n, spec.seed, STREAM_IMAGE_NOISE, |i, a, _| {
        let (x, y, z) = ((i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64);
        let inside = ((x - bx) / (0.48 * nx as f64)).powi(2)
            + ((y - by) / (0.48 * ny as f64)).powi(2)
            + ((z - bz) / (0.48 * nz as f64)).powi(2)
            <= 1.0;
        let label = labels[i];
        let base = if label == BACKGROUND && !inside { HU_AIR } else { intensity(label) };
        let v = base + ((unit(a) * 2.0 - 1.0) as f32 * noise).round();
        v.clamp(-1000.0, 3800.0)
    });
    let intensities = vec![
        ("air".to_string(), HU_AIR),
        ("soft tissue".to_string(), HU_SOFT_TISSUE),
        ("mandible".to_string(), HU_BONE),
        ("tooth".to_string(), HU_ENAMEL),
        ("pulp".to_string(), HU_PULP),
        ("nerve".to_string(), HU_NERVE),
        ("pharynx".to_string(), HU_AIR),
    ];
    Ok(Phantom {
        image: ImageGrid::new(geometry.clone(), image)?,
        labels: LabelGrid::new(geometry, labels)?,
        description: PhantomDescription {
            spec: spec.clone(),
            layout: l,
            intensities,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaterNoise {
    /// Per-voxel probability of replacing the label with a different one.
    pub flip_rate: f64,
    /// Rounds of random boundary shifting.
    pub boundary_steps: usize,
    pub seed: u64,
}

impl Default for RaterNoise {
    fn default() -> Self {
        RaterNoise {
            flip_rate: 0.05,
            boundary_steps: 0,
            seed: 1,
        }
    }
}

impl RaterNoise {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.flip_rate) {
            return Err(Error::InvalidConfig(format!(
                "flip rate {} must lie in [0, 0.5)",
                self.flip_rate
            )));
        }
        Ok(())
    }
}

/// A noisy copy of `reference`: each boundary step moves every boundary
/// voxel, with probability 1/2, to the label of a random differing
/// 6-neighbor; then each voxel independently flips with probability
/// `flip_rate` to a label drawn uniformly from the other labels present in
/// the reference.
pub fn simulate_rater(reference: &LabelGrid, noise: &RaterNoise) -> Result<LabelGrid> {
    noise.validate()?;
    let [nx, ny, nz] = reference.dims();
    let n = reference.len();
    let mut cur = reference.data().to_vec();

    for step in 0..noise.boundary_steps {
        let prev = cur;
        cur = per_voxel(n, noise.seed, 1 + step as u64, |i, a, b| {
            let v = prev[i];
            if a >> 63 == 0 {
                return v;
            }
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut diff = [0u16; 6];
            let mut m = 0;
            let mut consider = |j: usize| {
                if prev[j] != v {
                    diff[m] = prev[j];
                    m += 1;
                }
            };
            if x > 0 {
                consider(i - 1);
            }
            if x + 1 < nx {
                consider(i + 1);
            }
            if y > 0 {
                consider(i - nx);
            }
            if y + 1 < ny {
                consider(i + nx);
            }
            if z > 0 {
                consider(i - nx * ny);
            }
            if z + 1 < nz {
                consider(i + nx * ny);
            }
            if m == 0 {
                v
            } else {
                diff[pick(b, m)]
            }
        });
    }

    let present: Vec<u16> = reference.labels_present().into_iter().collect();
    if noise.flip_rate > 0.0 && present.len() > 1 {
        let prev = cur;
        cur = per_voxel(n, noise.seed, STREAM_FLIPS, |i, a, b| {
            let v = prev[i];
            if unit(a) >= noise.flip_rate {
                return v;
            }
            // uniform over present labels other than the true one
            let k = pick(b, present.len() - 1);
            let true_pos = present.binary_search(&reference.data()[i]).unwrap();
            let target = present[if k >= true_pos { k + 1 } else { k }];
            if target == v {
                // boundary noise already moved this voxel onto the target
                present[true_pos]
            } else {
                target
            }
        });
    }
    reference.with_data(cur)
}
