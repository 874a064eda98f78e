//! Manifest-driven orchestration of the two-phase pipeline.
//!
//! Per case, in order: (a) fuse the Phase-1 predictions, (b) bring the
//! consensus onto the native image lattice, (c) pharynx relabeling,
//! (d) small-mandible removal, (e) Phase-2 box from the cleaned mandible,
//! (f) fuse the Phase-2 predictions inside the box, (g) merge, (h) write
//! the final map in consolidated ids. Steps (c) and (d) swap under
//! [`CleanupOrder::MandibleFirst`]; (e) to (g) are skipped when a case has
//! no Phase-2 predictions.
//!
//! Everything between (a) and (g) runs in dense ids. Intermediates written
//! under `cases/<id>/` are valid inputs to the matching CLI subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{staple_fuse, FusionConfig};
use crate::grid::{crop, Geometry, LabelGrid, Orientation, VoxelBox};
use crate::labels::{LabelTable, RemapDirection, UnknownPolicy};
use crate::metrics::{aggregate, evaluate_case, AggregateOptions, CaseScores, EvaluationReport};
use crate::nifti;
use crate::postprocess::{filter_small_mandible, relabel_touching_pharynx, CleanupOrder, PostprocessConfig};
use crate::preprocess::{preprocess_image, resample_labels_to_reference, PreprocessConfig};
use crate::roi::{compute_phase2_box, MergePolicy, RoiExpansion};

pub const MANIFEST_VERSION: u32 = 1;

/// Id space the external segmenter writes its predictions in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSpace {
    #[default]
    Dense,
    Consolidated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub id: String,
    pub image: PathBuf,
    pub phase1: Vec<PathBuf>,
    #[serde(default)]
    pub phase2: Vec<PathBuf>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default = "one")]
    pub fold: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    pub manifest_version: u32,
    pub cases: Vec<CaseSpec>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub prediction_label_space: LabelSpace,
    /// Label table manifest; the built-in table when absent.
    #[serde(default)]
    pub label_table: Option<PathBuf>,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Also write each image clipped and resampled for the segmenter.
    #[serde(default)]
    pub write_preprocessed: bool,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub cleanup_order: CleanupOrder,
    #[serde(default)]
    pub roi: RoiExpansion,
    #[serde(default)]
    pub merge: MergePolicy,
    #[serde(default)]
    pub evaluation: AggregateOptions,
    #[serde(default = "yes")]
    pub keep_intermediates: bool,
}

impl PipelineManifest {
    /// A manifest with default configs and the given cases.
    pub fn new(cases: Vec<CaseSpec>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineManifest {
            manifest_version: MANIFEST_VERSION,
            cases,
            output_dir: output_dir.into(),
            prediction_label_space: LabelSpace::Dense,
            label_table: None,
            orientation: Orientation::default(),
            preprocess: PreprocessConfig::default(),
            write_preprocessed: false,
            fusion: FusionConfig::default(),
            postprocess: PostprocessConfig::default(),
            cleanup_order: CleanupOrder::default(),
            roi: RoiExpansion::default(),
            merge: MergePolicy::default(),
            evaluation: AggregateOptions::default(),
            keep_intermediates: true,
        }
    }

    /// Parse JSON; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: PipelineManifest = serde_json::from_str(text)?;
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        abs(&mut m.output_dir);
        if let Some(t) = m.label_table.as_mut() {
            abs(t);
        }
        for c in &mut m.cases {
            abs(&mut c.image);
            c.phase1.iter_mut().for_each(abs);
            c.phase2.iter_mut().for_each(abs);
            if let Some(r) = c.reference.as_mut() {
                abs(r);
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Structural checks plus existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        if self.manifest_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "manifest_version {} not supported (expected {MANIFEST_VERSION})",
                self.manifest_version
            )));
        }
        if self.cases.is_empty() {
            return Err(Error::Manifest("no cases".into()));
        }
        self.preprocess.validate()?;
        self.fusion.validate()?;
        self.postprocess.validate()?;
        self.merge.validate()?;
        let mut ids = BTreeSet::new();
        let mut missing = Vec::new();
        for c in &self.cases {
            let safe = !c.id.is_empty()
                && c.id != "."
                && c.id != ".."
                && c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || "-_.".contains(ch));
            if !safe {
                return Err(Error::Manifest(format!("case id {:?} is not a plain file name", c.id)));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate case id {}", c.id)));
            }
            if c.phase1.is_empty() {
                return Err(Error::Manifest(format!("case {}: no phase-1 predictions", c.id)));
            }
            if !c.phase2.is_empty() && c.phase2.len() != c.phase1.len() {
                return Err(Error::Manifest(format!(
                    "case {}: {} phase-1 but {} phase-2 predictions",
                    c.id,
                    c.phase1.len(),
                    c.phase2.len()
                )));
            }
            if c.fold == 0 {
                return Err(Error::Manifest(format!("case {}: folds are 1-based", c.id)));
            }
            let files = std::iter::once(&c.image)
                .chain(&c.phase1)
                .chain(&c.phase2)
                .chain(c.reference.as_ref());
            missing.extend(files.filter(|p| !p.is_file()).map(|p| p.display().to_string()));
        }
        if let Some(t) = &self.label_table {
            if !t.is_file() {
                missing.push(t.display().to_string());
            }
        }
        if !missing.is_empty() {
            return Err(Error::Manifest(format!("missing files: {}", missing.join(", "))));
        }
        Ok(())
    }

    pub fn table(&self) -> Result<LabelTable> {
        match &self.label_table {
            Some(p) => LabelTable::load(p),
            None => Ok(LabelTable::builtin()),
        }
    }

    pub fn case_dir(&self, id: &str) -> PathBuf {
        self.output_dir.join("cases").join(id)
    }

    /// Where the final consolidated map of a case goes.
    pub fn prediction_path(&self, id: &str) -> PathBuf {
        self.output_dir.join("predictions").join(format!("{id}.nii.gz"))
    }

    pub fn report_stem(&self) -> PathBuf {
        self.output_dir.join("report")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub params: serde_json::Value,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub stages: Vec<StageLog>,
    pub final_labels: Option<PathBuf>,
    pub phase2_box: Option<VoxelBox>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub tool_version: String,
    pub manifest: PipelineManifest,
    pub cases: Vec<CaseOutcome>,
    pub failed: usize,
}

pub struct RunSummary {
    pub log: RunLog,
    pub report: Option<EvaluationReport>,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.log.failed
    }
}

/// Read a label map, tag it with the run's orientation and move it to
/// dense ids.
fn read_dense(path: &Path, space: LabelSpace, orientation: Orientation, table: &LabelTable) -> Result<LabelGrid> {
    let mut g = nifti::read_labels(path)?;
    g.set_orientation(orientation);
    match space {
        LabelSpace::Dense => {
            let n = table.num_dense() as u16;
            if let Some(&bad) = g.labels_present().iter().find(|&&l| l >= n) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_labels: n as usize,
                });
            }
            Ok(g)
        }
        LabelSpace::Consolidated => table.apply_remap(&g, RemapDirection::ToDense, UnknownPolicy::Error),
    }
}

/// Bring a Phase-2 prediction to the box: box-sized maps pass through,
/// native-lattice maps are cropped.
pub fn phase2_to_box(pred: &LabelGrid, native: &Geometry, bx: &VoxelBox) -> Result<LabelGrid> {
    let same_spacing = (0..3).all(|a| (pred.spacing()[a] - native.spacing[a]).abs() <= 1e-6);
    if !same_spacing {
        return Err(Error::GeometryMismatch(format!(
            "phase-2 spacing {:?} differs from native {:?}",
            pred.spacing(),
            native.spacing
        )));
    }
    if pred.dims() == bx.widths() {
        Ok(pred.clone())
    } else if pred.dims() == native.dims {
        crop(pred, bx)
    } else {
        Err(Error::DimsMismatch {
            expected: bx.widths(),
            found: pred.dims(),
        })
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

#[derive(Default)]
struct Stages {
    log: Vec<StageLog>,
    failed: Option<String>,
}

impl Stages {
    fn run<T>(&mut self, stage: &str, params: serde_json::Value, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        if out.is_err() {
            self.failed = Some(stage.to_string());
        }
        self.log.push(StageLog {
            stage: stage.to_string(),
            params,
            millis: t.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("{stage} done in {:.1} ms", t.elapsed().as_secs_f64() * 1e3);
        out
    }
}

struct CaseResult {
    final_labels: LabelGrid,
    phase2_box: Option<VoxelBox>,
}

fn process_case(m: &PipelineManifest, table: &LabelTable, case: &CaseSpec, st: &mut Stages) -> Result<CaseResult> {
    let dir = m.case_dir(&case.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let keep = |name: &str, g: &LabelGrid| -> Result<()> {
        if m.keep_intermediates {
            nifti::write_labels(g, dir.join(name), true)?;
        }
        Ok(())
    };
    let fusion = FusionConfig {
        num_labels: Some(m.fusion.num_labels.unwrap_or(table.num_dense())),
        keep_posteriors: false,
        ..m.fusion.clone()
    };

    let native = nifti::read_header(&case.image)?.geometry();
    if m.write_preprocessed {
        st.run("preprocess", json(&m.preprocess), || {
            let img = nifti::read_image(&case.image)?;
            let out = preprocess_image(&img, &m.preprocess)?;
            nifti::write_image(&out, dir.join("image_preprocessed.nii.gz"), true)
        })?;
    }

    // (a)
    let fused = st.run("fuse_phase1", json(&fusion), || {
        let preds = case
            .phase1
            .iter()
            .map(|p| read_dense(p, m.prediction_label_space, m.orientation, table))
            .collect::<Result<Vec<_>>>()?;
        let r = staple_fuse(&preds, &fusion)?;
        log::info!(
            "case {}: phase-1 STAPLE {} iterations over {} patterns, converged={}",
            case.id,
            r.iterations,
            r.num_patterns,
            r.converged
        );
        Ok(r.consensus)
    })?;
    keep("phase1_fused.nii.gz", &fused)?;

    // (b)
    let resample_needed = !fused.geometry().same_lattice(&native);
    let native_lbl = st.run(
        "resample_to_native",
        serde_json::json!({ "needed": resample_needed, "dims": native.dims, "spacing": native.spacing }),
        || {
            if resample_needed {
                resample_labels_to_reference(&fused, &native)
            } else {
                Ok(fused.clone())
            }
        },
    )?;
    keep("phase1_native.nii.gz", &native_lbl)?;

    // (c), (d)
    let pharynx = |g: &LabelGrid, st: &mut Stages| {
        st.run("relabel_touching_pharynx", json(&m.postprocess), || relabel_touching_pharynx(g, &m.postprocess))
    };
    let mandible = |g: &LabelGrid, st: &mut Stages| {
        st.run("filter_small_mandible", json(&m.postprocess), || filter_small_mandible(g, &m.postprocess))
    };
    let clean = match m.cleanup_order {
        CleanupOrder::PharynxFirst => {
            let g = pharynx(&native_lbl, st)?;
            mandible(&g, st)?
        }
        CleanupOrder::MandibleFirst => {
            let g = mandible(&native_lbl, st)?;
            pharynx(&g, st)?
        }
    };
    keep("phase1_clean.nii.gz", &clean)?;

    let mut merged = clean;
    let mut phase2_box = None;
    if !case.phase2.is_empty() {
        // (e)
        let bx = st.run("phase2_box", json(&m.roi), || {
            compute_phase2_box(&merged, m.postprocess.mandible_id, &m.roi)
        })?;
        if m.keep_intermediates {
            let p = dir.join("phase2_box.json");
            std::fs::write(&p, serde_json::to_string_pretty(&bx)? + "\n").map_err(|e| Error::io(&p, e))?;
        }
        phase2_box = Some(bx);

        // (f)
        let fused2 = st.run("fuse_phase2", json(&fusion), || {
            let preds = case
                .phase2
                .iter()
                .map(|p| {
                    let g = read_dense(p, m.prediction_label_space, m.orientation, table)?;
                    phase2_to_box(&g, &native, &bx)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(staple_fuse(&preds, &fusion)?.consensus)
        })?;
        keep("phase2_fused.nii.gz", &fused2)?;

        // (g)
        merged = st.run("merge_phase2", json(&m.merge), || crate::roi::merge_phase2(&merged, &fused2, &bx, &m.merge))?;
        keep("merged.nii.gz", &merged)?;
    }

    // (h)
    let final_labels = st.run("write_final", serde_json::json!({ "label_space": "consolidated" }), || {
        let out = table.apply_remap(&merged, RemapDirection::ToChallenge, UnknownPolicy::Error)?;
        let p = m.prediction_path(&case.id);
        nifti::write_labels(&out, &p, true)?;
        Ok(out)
    })?;
    Ok(CaseResult {
        final_labels,
        phase2_box,
    })
}

/// Read a reference map in challenge ids (raw or consolidated) and return
/// it in consolidated ids.
pub fn read_reference(path: &Path, orientation: Orientation, table: &LabelTable) -> Result<LabelGrid> {
    let mut g = nifti::read_labels(path)?;
    g.set_orientation(orientation);
    let dense = table.apply_remap(&g, RemapDirection::ToDense, UnknownPolicy::Error)?;
    table.apply_remap(&dense, RemapDirection::ToChallenge, UnknownPolicy::Error)
}

/// Run every case. Case failures are recorded and do not stop the others;
/// manifest problems fail before any processing.
pub fn run_pipeline(m: &PipelineManifest) -> Result<RunSummary> {
    m.validate()?;
    let table = m.table()?;
    let pred_dir = m.output_dir.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;

    let results: Vec<(CaseOutcome, Option<CaseScores>)> = m
        .cases
        .par_iter()
        .map(|case| {
            let mut st = Stages::default();
            let res = process_case(m, &table, case, &mut st).and_then(|r| {
                let scores = match &case.reference {
                    Some(p) => {
                        let s = st.run("evaluate", serde_json::json!({ "reference": p }), || {
                            let reference = read_reference(p, m.orientation, &table)?;
                            evaluate_case(&r.final_labels, &reference, &table)
                        })?;
                        Some(CaseScores {
                            case_id: case.id.clone(),
                            fold: case.fold,
                            scores: s,
                        })
                    }
                    None => None,
                };
                Ok((r, scores))
            });
            match res {
                Ok((r, scores)) => (
                    CaseOutcome {
                        id: case.id.clone(),
                        stages: st.log,
                        final_labels: Some(m.prediction_path(&case.id)),
                        phase2_box: r.phase2_box,
                        error: None,
                    },
                    scores,
                ),
                Err(e) => {
                    let e = match &st.failed {
                        Some(stage) => format!("{stage}: {e}"),
                        None => e.to_string(),
                    };
                    log::error!("case {}: {e}", case.id);
                    (
                        CaseOutcome {
                            id: case.id.clone(),
                            stages: st.log,
                            final_labels: None,
                            phase2_box: None,
                            error: Some(e),
                        },
                        None,
                    )
                }
            }
        })
        .collect();

    let failed = results.iter().filter(|(o, _)| o.error.is_some()).count();
    let scores: Vec<CaseScores> = results.iter().filter_map(|(_, s)| s.clone()).collect();
    let report = if scores.is_empty() {
        None
    } else {
        let r = aggregate(&scores, m.evaluation)?;
        r.write(m.report_stem())?;
        Some(r)
    };
    let log = RunLog {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        manifest: m.clone(),
        cases: results.into_iter().map(|(o, _)| o).collect(),
        failed,
    };
    let p = m.output_dir.join("run_log.json");
    std::fs::write(&p, serde_json::to_string_pretty(&log)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(RunSummary { log, report })
}
