#![allow(dead_code)]

pub mod oracles;

use cbctseg::{Geometry, LabelGrid};
use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

pub struct TestRng(ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((u128::from(self.0.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn grid(dims: [usize; 3], data: Vec<u16>) -> LabelGrid {
    LabelGrid::new(Geometry::new(dims, [1.0; 3]).unwrap(), data).unwrap()
}

pub fn line(v: &[u16]) -> LabelGrid {
    grid([v.len(), 1, 1], v.to_vec())
}

/// Truth uniform over `0..labels`; each rater keeps the truth with its own
/// accuracy and otherwise says a uniformly chosen other label.
pub fn random_instance(rng: &mut TestRng, n: usize, labels: usize, raters: usize, acc: (f64, f64)) -> (Vec<u16>, Vec<LabelGrid>) {
    let truth: Vec<u16> = (0..n).map(|_| rng.below(labels) as u16).collect();
    let out = (0..raters)
        .map(|_| {
            let a = acc.0 + (acc.1 - acc.0) * rng.unit();
            let data = truth
                .iter()
                .map(|&t| {
                    if rng.unit() < a || labels == 1 {
                        t
                    } else {
                        let k = rng.below(labels - 1) as u16;
                        if k >= t {
                            k + 1
                        } else {
                            k
                        }
                    }
                })
                .collect();
            line_vec(data)
        })
        .collect();
    (truth, out)
}

fn line_vec(v: Vec<u16>) -> LabelGrid {
    grid([v.len(), 1, 1], v)
}

/// Mean Dice over the ranked classes present in `reference` (consolidated
/// ids on both sides).
pub fn mean_present_dice(pred: &LabelGrid, reference: &LabelGrid) -> f64 {
    let table = cbctseg::labels::LabelTable::builtin();
    let scores = cbctseg::metrics::evaluate_case(pred, reference, &table).unwrap();
    let present: Vec<f64> = scores.iter().filter(|s| s.present_in_reference).map(|s| s.dice).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Phantom with five raters at flip rates 2, 3.5, 5, 6.5 and 8 %. Returns
/// the STAPLE consensus mean Dice and each rater's mean Dice.
pub fn fusion_benefit(seed: u64) -> (f64, Vec<f64>) {
    use cbctseg::fusion::{staple_fuse, FusionConfig};
    use cbctseg::labels::{LabelTable, RemapDirection, UnknownPolicy};
    use cbctseg::phantom::{generate_phantom, rater_seed, simulate_rater, PhantomSpec, RaterNoise};

    let table = LabelTable::builtin();
    let p = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
    let raters: Vec<LabelGrid> = (0..5)
        .map(|k| {
            let noise = RaterNoise {
                flip_rate: 0.02 + 0.015 * k as f64,
                boundary_steps: 0,
                seed: rater_seed(seed, k),
            };
            simulate_rater(&p.labels, &noise).unwrap()
        })
        .collect();
    let rater_scores = raters.iter().map(|r| mean_present_dice(r, &p.labels)).collect();
    let dense: Vec<LabelGrid> = raters
        .iter()
        .map(|r| table.apply_remap(r, RemapDirection::ToDense, UnknownPolicy::Error).unwrap())
        .collect();
    let cfg = FusionConfig {
        num_labels: Some(table.num_dense()),
        ..FusionConfig::default()
    };
    let fused = staple_fuse(&dense, &cfg).unwrap().consensus;
    let fused = table.apply_remap(&fused, RemapDirection::ToChallenge, UnknownPolicy::Error).unwrap();
    (mean_present_dice(&fused, &p.labels), rater_scores)
}

pub struct PhantomCase {
    pub id: String,
    pub seed: u64,
    pub flip_rate: f64,
    /// Spacing of the Phase-1 predictions; native when `None`.
    pub phase1_spacing: Option<[f64; 3]>,
}

impl PhantomCase {
    pub fn new(id: &str, seed: u64, flip_rate: f64) -> Self {
        PhantomCase {
            id: id.to_string(),
            seed,
            flip_rate,
            phase1_spacing: None,
        }
    }
}

/// Write phantom cases under `dir/inputs` and a manifest `dir/manifest.json`
/// with relative paths; five raters per phase, fold = position % 3 + 1.
pub fn write_phantom_manifest(dir: &std::path::Path, spec: &cbctseg::phantom::PhantomSpec, cases: &[PhantomCase]) -> std::path::PathBuf {
    use cbctseg::nifti::{write_image, write_labels};
    use cbctseg::phantom::{generate_phantom, rater_seed, simulate_rater, PhantomSpec, RaterNoise};
    use cbctseg::preprocess::resample_labels;

    let inputs = dir.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    let mut list = Vec::new();
    for (n, c) in cases.iter().enumerate() {
        let p = generate_phantom(&PhantomSpec { seed: c.seed, ..spec.clone() }).unwrap();
        let rel = |name: String| format!("inputs/{}_{name}", c.id);
        write_image(&p.image, dir.join(rel("image.nii.gz".into())), true).unwrap();
        write_labels(&p.labels, dir.join(rel("reference.nii.gz".into())), true).unwrap();
        let mut phase1 = Vec::new();
        let mut phase2 = Vec::new();
        for k in 0..5 {
            for (phase, out) in [(1u64, &mut phase1), (2, &mut phase2)] {
                let noise = RaterNoise {
                    flip_rate: c.flip_rate,
                    boundary_steps: 0,
                    seed: rater_seed(c.seed * 10 + phase, k),
                };
                let mut r = simulate_rater(&p.labels, &noise).unwrap();
                if phase == 1 {
                    if let Some(s) = c.phase1_spacing {
                        r = resample_labels(&r, s).unwrap();
                    }
                }
                let name = rel(format!("p{phase}_r{k}.nii.gz"));
                write_labels(&r, dir.join(&name), true).unwrap();
                out.push(name);
            }
        }
        list.push(serde_json::json!({
            "id": c.id,
            "image": rel("image.nii.gz".into()),
            "phase1": phase1,
            "phase2": phase2,
            "reference": rel("reference.nii.gz".into()),
            "fold": n % 3 + 1,
        }));
    }
    let manifest = serde_json::json!({
        "manifest_version": 1,
        "output_dir": "out",
        "prediction_label_space": "consolidated",
        "postprocess": { "min_mandible_voxels": 1000 },
        "cases": list,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

/// Small phantom used by the end-to-end tests.
pub fn small_spec() -> cbctseg::phantom::PhantomSpec {
    cbctseg::phantom::PhantomSpec {
        dims: [64, 64, 48],
        ..Default::default()
    }
}
