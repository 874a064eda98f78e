//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cbctseg::fusion::{staple_fuse, FusionConfig, PriorSource};
use cbctseg::labels::{LabelTable, RemapDirection, UnknownPolicy, PULP, PULP_SOURCE_IDS};
use cbctseg::metrics::csv_header;
use cbctseg::nifti::{read_labels, write_labels};
use cbctseg::phantom::{generate_phantom, rater_seed, simulate_rater, PhantomSpec, RaterNoise};
use cbctseg::postprocess::{connected_components, filter_small_mandible, Connectivity, PostprocessConfig};
use cbctseg::preprocess::{resample_labels, resampled_dims};
use cbctseg::roi::{compute_phase2_box, RoiExpansion};
use cbctseg::{Geometry, LabelGrid};
use common::oracles::{flood_fill_components, staple_max_diff};
use common::{fusion_benefit, grid, line, random_instance, small_spec, write_phantom_manifest, PhantomCase, TestRng};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(limit: Duration, elapsed: Duration, what: String) -> Outcome {
    check(
        elapsed < limit,
        format!("{what}; {:.2} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn roi_geometry() -> Outcome {
    let t = Instant::now();
    let dims = [240, 120, 110];
    let mut g = grid(dims, vec![0; dims.iter().product()]);
    let mut rng = TestRng::new(1);
    let exp = RoiExpansion::default();
    for trial in 0..100 {
        // anchor far enough from every border that nothing clamps
        let a = [rng.range(110, dims[0] - 111), rng.range(0, dims[1] - 101), rng.range(0, dims[2] - 91)];
        let mut placed = vec![a];
        for _ in 0..5 {
            placed.push([
                rng.range(a[0] - 20, a[0] + 20),
                rng.range(a[1] + 1, a[1] + 40),
                rng.range(a[2], a[2] + 30),
            ]);
        }
        for p in &placed {
            g.set(p[0], p[1], p[2], 1);
        }
        let bx = compute_phase2_box(&g, 1, &exp).map_err(|e| e.to_string())?;
        if bx.widths() != [221, 101, 91] || bx.lo != [a[0] - 110, a[1], a[2]] {
            return Err(format!("anchor {trial} at {a:?}: box {bx:?}"));
        }
        for p in &placed {
            g.set(p[0], p[1], p[2], 0);
        }
    }
    within(
        Duration::from_secs(1),
        t.elapsed(),
        "100 random anchors, all widths [221, 101, 91]".into(),
    )
}

fn staple_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = TestRng::new(2);
    let mut worst: f64 = 0.0;
    let instances = 60;
    for case in 0..instances {
        let (n, l, k) = (rng.range(5, 100), rng.range(2, 4), rng.range(3, 5));
        let (_, raters) = random_instance(&mut rng, n, l, k, (0.55, 0.95));
        let prior = if case % 4 == 3 {
            PriorSource::Uniform
        } else {
            PriorSource::VoteFrequency
        };
        let d = staple_max_diff(&raters, l, prior).map_err(|e| format!("instance {case}: {e}"))?;
        if d > 1e-6 {
            return Err(format!("instance {case}: difference {d:e} > 1e-6"));
        }
        worst = worst.max(d);
    }
    for _ in 0..20 {
        let n = rng.range(1, 100);
        let l = rng.range(1, 4);
        let g = line(&(0..n).map(|_| rng.below(l) as u16).collect::<Vec<_>>());
        for k in 1..=5 {
            let r = staple_fuse(&vec![g.clone(); k], &FusionConfig::default()).map_err(|e| e.to_string())?;
            if r.consensus != g {
                return Err(format!("{k} identical raters did not reproduce their labeling"));
            }
        }
    }
    within(
        Duration::from_secs(30),
        t.elapsed(),
        format!("{instances} instances, max difference {worst:.1e}; identical/single-rater fixed points exact"),
    )
}

fn fusion_gain() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 1..=10 {
        let (fused, raters) = fusion_benefit(seed);
        let best = raters.iter().cloned().fold(f64::MIN, f64::max);
        margins.push(fused - best);
        wins += usize::from(fused >= best);
    }
    let min_margin = margins.iter().cloned().fold(f64::MAX, f64::min);
    let e = t.elapsed();
    if wins < 9 {
        return Err(format!("fusion won {wins}/10 seeds"));
    }
    within(
        Duration::from_secs(120),
        e,
        format!("fused >= best rater in {wins}/10 seeds (smallest margin {min_margin:+.4})"),
    )
}

fn components() -> Outcome {
    let mut rng = TestRng::new(4);
    for case in 0..100 {
        let fg = 0.1 + 0.5 * rng.unit();
        let data: Vec<u16> = (0..1000)
            .map(|_| if rng.unit() < fg { 1 + rng.below(2) as u16 } else { 0 })
            .collect();
        let g = grid([10, 10, 10], data.clone());
        for (c, conn) in [(6u8, Connectivity::Six), (26, Connectivity::TwentySix)] {
            for class in 0..3u16 {
                let got: Vec<Vec<usize>> = connected_components(&g, class, conn).into_iter().map(|k| k.voxels).collect();
                if got != flood_fill_components(&data, [10, 10, 10], class, c) {
                    return Err(format!("grid {case}, class {class}, {c}-connectivity"));
                }
            }
        }
    }
    Ok("100 random 10³ grids identical to flood fill at 6 and 26".into())
}

fn mandible_boundary() -> Outcome {
    let dims = [100, 100, 41];
    let mut data = vec![1u16; dims.iter().product()];
    data[200_000..210_000].iter_mut().for_each(|v| *v = 0);
    data[400_000] = 0;
    let g = grid(dims, data);
    let out = filter_small_mandible(&g, &PostprocessConfig::default()).map_err(|e| e.to_string())?;
    let kept = out.data()[..200_000].iter().all(|&v| v == 1);
    let removed = out.data()[210_000..].iter().all(|&v| v == 0);
    check(
        kept && removed,
        format!("200,000-voxel component kept: {kept}; 199,999-voxel component removed: {removed}"),
    )
}

fn resampling() -> Outcome {
    let dims = resampled_dims([168, 362, 371], [0.3; 3], [0.6; 3]);
    let mut rng = TestRng::new(6);
    let g = LabelGrid::new(
        Geometry::new([17, 13, 11], [0.3; 3]).unwrap(),
        (0..17 * 13 * 11).map(|_| rng.below(47) as u16).collect(),
    )
    .unwrap();
    let same = resample_labels(&g, [0.3; 3]).map_err(|e| e.to_string())?;
    check(
        dims == [84, 181, 186] && same == g,
        format!("[168, 362, 371] at 0.3 mm -> {dims:?} at 0.6 mm; equal-spacing nearest identity: {}", same == g),
    )
}

fn label_algebra() -> Outcome {
    let table = LabelTable::builtin();
    let mut rng = TestRng::new(7);
    let ids: Vec<u16> = table.classes().map(|e| e.challenge_id).collect();
    for _ in 0..20 {
        let g = grid([9, 8, 7], (0..504).map(|_| ids[rng.below(ids.len())]).collect());
        let dense = table
            .apply_remap(&g, RemapDirection::ToDense, UnknownPolicy::Error)
            .map_err(|e| e.to_string())?;
        let back = table
            .apply_remap(&dense, RemapDirection::ToChallenge, UnknownPolicy::Error)
            .map_err(|e| e.to_string())?;
        if back != g {
            return Err("to-challenge after to-dense is not the identity".into());
        }
    }
    let raw = line(&PULP_SOURCE_IDS.collect::<Vec<_>>());
    let pulp = table
        .apply_remap(
            &table
                .apply_remap(&raw, RemapDirection::ToDense, UnknownPolicy::Error)
                .map_err(|e| e.to_string())?,
            RemapDirection::ToChallenge,
            UnknownPolicy::Error,
        )
        .map_err(|e| e.to_string())?;
    let collapsed = pulp.data().iter().all(|&v| v == PULP);
    let mut dense_ids: Vec<u16> = ids.iter().map(|&c| table.dense_of(c).unwrap()).collect();
    dense_ids.sort_unstable();
    let contiguous = dense_ids == (0..table.num_dense() as u16).collect::<Vec<_>>() && table.num_dense() == 47;
    check(
        collapsed && contiguous,
        format!(
            "round trip identity; 111-148 -> {PULP}: {collapsed}; dense 0..{} contiguous: {contiguous}",
            table.num_dense() - 1
        ),
    )
}

fn nifti_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = TestRng::new(8);
    let g = LabelGrid::new(
        Geometry::new([21, 17, 13], [0.3, 0.31, 0.6]).unwrap(),
        (0..21 * 17 * 13).map(|_| rng.below(149) as u16).collect(),
    )
    .unwrap();
    let plain = dir.path().join("l.nii");
    let gz = dir.path().join("l.nii.gz");
    write_labels(&g, &plain, false).map_err(|e| e.to_string())?;
    write_labels(&g, &gz, true).map_err(|e| e.to_string())?;
    let a = read_labels(&plain).map_err(|e| e.to_string())?;
    let b = read_labels(&gz).map_err(|e| e.to_string())?;
    let spacing_err = (0..3).map(|i| (a.spacing()[i] - g.spacing()[i]).abs()).fold(0.0, f64::max);
    check(
        a.data() == g.data() && a == b && spacing_err <= 1e-6,
        format!("voxel-exact, spacing error {spacing_err:.1e} mm, .nii == .nii.gz: {}", a == b),
    )
}

fn run_cli(manifest: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cbctseg"))
        .arg("run")
        .arg(manifest)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("run failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let noisy: Vec<PhantomCase> = (1..=3).map(|s| PhantomCase::new(&format!("case{s}"), s, 0.05)).collect();
    let manifest = write_phantom_manifest(dir.path(), &small_spec(), &noisy);
    run_cli(&manifest)?;
    let out = dir.path().join("out");
    let first = dir.path().join("first");
    std::fs::rename(&out, &first).map_err(|e| e.to_string())?;
    run_cli(&manifest)?;
    let mut files = vec!["report.csv".to_string(), "report.json".to_string()];
    files.extend((1..=3).map(|s| format!("predictions/case{s}.nii.gz")));
    for f in &files {
        if std::fs::read(first.join(f)).ok() != std::fs::read(out.join(f)).ok() {
            return Err(format!("{f} differs between runs"));
        }
    }

    let clean = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exact: Vec<PhantomCase> = (1..=3).map(|s| PhantomCase::new(&format!("case{s}"), s, 0.0)).collect();
    run_cli(&write_phantom_manifest(clean.path(), &small_spec(), &exact))?;
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(clean.path().join("out/report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut scored = 0;
    for case in report["cases"].as_array().unwrap() {
        for s in case["scores"].as_array().unwrap() {
            if s["present_in_reference"] == true {
                scored += 1;
                if s["dice"].as_f64() != Some(1.0) {
                    return Err(format!("noiseless {} class {} Dice {}", case["case_id"], s["class_id"], s["dice"]));
                }
            }
        }
    }
    Ok(format!(
        "two runs byte-identical over {} files; noiseless raters Dice 1.0 on {scored} present (case, class) pairs",
        files.len()
    ))
}

fn report_schema() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: Vec<PhantomCase> = (1..=3).map(|s| PhantomCase::new(&format!("c{s}"), s + 10, 0.03)).collect();
    run_cli(&write_phantom_manifest(dir.path(), &small_spec(), &cases))?;
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).map_err(|e| e.to_string())?;
    let header = csv.lines().next().unwrap_or_default().to_string();
    let want = "class_id,structure,n_present,avg_ref_volume_mm3,fold_1,fold_2,fold_3,mean";
    let rows = csv.lines().count() - 1;
    let ranked = LabelTable::builtin().ranked().count();
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let json_rows = json["rows"].as_array().map(|r| r.len()).unwrap_or(0);
    check(
        header == want && csv_header(3).join(",") == want && rows == ranked + 1 && json_rows == ranked,
        format!("header `{header}`; {ranked} class rows + summary; JSON rows {json_rows}"),
    )
}

fn performance() -> Outcome {
    let table = LabelTable::builtin();
    let spec = PhantomSpec {
        dims: [256; 3],
        spacing: [0.3; 3],
        num_teeth: 16,
        ..PhantomSpec::default()
    };
    let p = generate_phantom(&spec).map_err(|e| e.to_string())?;
    let mut reference = table
        .apply_remap(&p.labels, RemapDirection::ToDense, UnknownPolicy::Error)
        .map_err(|e| e.to_string())?;
    // give every dense class some territory: 8³ cubes along the bottom rows
    let present = reference.labels_present();
    let mut slot = 0;
    for class in 0..table.num_dense() as u16 {
        if present.contains(&class) {
            continue;
        }
        let (x0, y0) = (8 + 10 * (slot % 24), 8 + 10 * (slot / 24));
        for z in 2..10 {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    reference.set(x, y, z, class);
                }
            }
        }
        slot += 1;
    }
    let raters: Vec<LabelGrid> = (0..5)
        .map(|k| {
            simulate_rater(
                &reference,
                &RaterNoise {
                    flip_rate: 0.05,
                    boundary_steps: 1,
                    seed: rater_seed(256, k),
                },
            )
            .unwrap()
        })
        .collect();
    let classes = raters.iter().flat_map(|r| r.labels_present()).collect::<std::collections::BTreeSet<_>>().len();
    let threads = rayon::current_num_threads();
    let t = Instant::now();
    let r = staple_fuse(
        &raters,
        &FusionConfig {
            num_labels: Some(table.num_dense()),
            ..FusionConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let e = t.elapsed();
    within(
        Duration::from_secs(300),
        e,
        format!(
            "5 × 256³ maps, {classes} classes, {} patterns, {} iterations, converged={}, {threads} thread(s)",
            r.num_patterns, r.iterations, r.converged
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("roi-geometry", roi_geometry),
        ("staple-oracle", staple_oracle),
        ("fusion-benefit", fusion_gain),
        ("connected-components", components),
        ("mandible-filter-boundary", mandible_boundary),
        ("resampling", resampling),
        ("label-algebra", label_algebra),
        ("nifti-roundtrip", nifti_roundtrip),
        ("end-to-end-determinism", end_to_end),
        ("report-schema", report_schema),
        ("staple-performance", performance),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} [{secs:.2} s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{secs:.2} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
