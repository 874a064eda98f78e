//! Per-class Dice, volumes, fold aggregation and report output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::labels::LabelTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks were empty; `value` is then 1.0 by convention.
    pub both_empty: bool,
}

fn dice_from_counts(a: usize, b: usize, both: usize) -> DiceScore {
    if a + b == 0 {
        DiceScore {
            value: 1.0,
            both_empty: true,
        }
    } else {
        DiceScore {
            value: 2.0 * both as f64 / (a + b) as f64,
            both_empty: false,
        }
    }
}

/// 2|A∩B| / (|A| + |B|). Both empty gives 1.0 (flagged), one empty 0.0.
pub fn dice_masks(a: &[bool], b: &[bool]) -> Result<DiceScore> {
    if a.len() != b.len() {
        return Err(Error::GeometryMismatch(format!(
            "mask sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        both += usize::from(x && y);
    }
    Ok(dice_from_counts(na, nb, both))
}

/// Dice of one class between two label maps.
pub fn dice(pred: &LabelGrid, reference: &LabelGrid, class: u16) -> Result<DiceScore> {
    pred.geometry().ensure_same_lattice(reference.geometry())?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        na += usize::from(p == class);
        nb += usize::from(r == class);
        both += usize::from(p == class && r == class);
    }
    Ok(dice_from_counts(na, nb, both))
}

/// Volume of `class` in mm³.
pub fn class_volume(lbl: &LabelGrid, class: u16) -> f64 {
    lbl.count(class) as f64 * lbl.geometry().voxel_volume()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u16,
    pub name: String,
    pub dice: f64,
    pub both_empty: bool,
    pub pred_volume_mm3: f64,
    pub ref_volume_mm3: f64,
    pub present_in_reference: bool,
}

/// One score per ranked class of `table`, both maps in challenge ids.
pub fn evaluate_case(pred: &LabelGrid, reference: &LabelGrid, table: &LabelTable) -> Result<Vec<ClassScore>> {
    pred.geometry().ensure_same_lattice(reference.geometry())?;
    let size = usize::from(u16::MAX) + 1;
    let mut np = vec![0usize; size];
    let mut nr = vec![0usize; size];
    let mut both = vec![0usize; size];
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        np[usize::from(p)] += 1;
        nr[usize::from(r)] += 1;
        if p == r {
            both[usize::from(p)] += 1;
        }
    }
    let voxel = reference.geometry().voxel_volume();
    Ok(table
        .ranked()
        .map(|e| {
            let c = usize::from(e.challenge_id);
            let d = dice_from_counts(np[c], nr[c], both[c]);
            ClassScore {
                class_id: e.challenge_id,
                name: e.name.clone(),
                dice: d.value,
                both_empty: d.both_empty,
                pred_volume_mm3: np[c] as f64 * voxel,
                ref_volume_mm3: nr[c] as f64 * voxel,
                present_in_reference: nr[c] > 0,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// 1-based fold number.
    pub fold: usize,
    pub scores: Vec<ClassScore>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Average over every case instead of only cases where the class is in
    /// the reference.
    pub include_absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class_id: u16,
    pub structure: String,
    pub n_present: usize,
    pub avg_ref_volume_mm3: Option<f64>,
    pub folds: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_folds: usize,
    pub rows: Vec<ReportRow>,
    /// Per fold, the mean over classes of that fold's per-class means.
    pub fold_means: Vec<Option<f64>>,
    /// Mean of `fold_means`.
    pub overall_mean: Option<f64>,
    pub num_cases: usize,
    pub cases: Vec<CaseScores>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Column names of the CSV report.
pub fn csv_header(num_folds: usize) -> Vec<String> {
    let mut h: Vec<String> = ["class_id", "structure", "n_present", "avg_ref_volume_mm3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=num_folds).map(|f| format!("fold_{f}")));
    h.push("mean".into());
    h
}

pub fn aggregate(cases: &[CaseScores], opts: AggregateOptions) -> Result<EvaluationReport> {
    if cases.is_empty() {
        return Err(Error::Evaluation("no cases to aggregate".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.fold == 0) {
        return Err(Error::Evaluation(format!("case {} has fold 0; folds are 1-based", c.case_id)));
    }
    let num_folds = cases.iter().map(|c| c.fold).max().unwrap();
    let classes = &cases[0].scores;
    if let Some(c) = cases
        .iter()
        .find(|c| c.scores.len() != classes.len() || c.scores.iter().zip(classes).any(|(a, b)| a.class_id != b.class_id))
    {
        return Err(Error::Evaluation(format!("case {} scores a different class list", c.case_id)));
    }

    let rows: Vec<ReportRow> = classes
        .iter()
        .enumerate()
        .map(|(k, cls)| {
            let score = |c: &CaseScores| c.scores[k].clone();
            let present: Vec<ClassScore> = cases.iter().map(score).filter(|s| s.present_in_reference).collect();
            let folds: Vec<Option<f64>> = (1..=num_folds)
                .map(|f| {
                    mean(
                        cases
                            .iter()
                            .filter(|c| c.fold == f)
                            .map(score)
                            .filter(|s| opts.include_absent || s.present_in_reference)
                            .map(|s| s.dice),
                    )
                })
                .collect();
            ReportRow {
                class_id: cls.class_id,
                structure: cls.name.clone(),
                n_present: present.len(),
                avg_ref_volume_mm3: mean(present.iter().map(|s| s.ref_volume_mm3)),
                mean: mean(folds.iter().flatten().copied()),
                folds,
            }
        })
        .collect();
    let fold_means: Vec<Option<f64>> = (0..num_folds)
        .map(|f| mean(rows.iter().filter_map(|r| r.folds[f])))
        .collect();
    let overall_mean = mean(fold_means.iter().flatten().copied());
    Ok(EvaluationReport {
        num_folds,
        rows,
        fold_means,
        overall_mean,
        num_cases: cases.len(),
        cases: cases.to_vec(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvaluationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(csv_header(self.num_folds))?;
        for r in &self.rows {
            let mut rec = vec![
                r.class_id.to_string(),
                r.structure.clone(),
                r.n_present.to_string(),
                cell(r.avg_ref_volume_mm3),
            ];
            rec.extend(r.folds.iter().map(|&f| cell(f)));
            rec.push(cell(r.mean));
            w.write_record(rec)?;
        }
        let mut summary = vec![
            "all".to_string(),
            "All Ranked Structures".to_string(),
            self.num_cases.to_string(),
            String::new(),
        ];
        summary.extend(self.fold_means.iter().map(|&f| cell(f)));
        summary.push(cell(self.overall_mean));
        w.write_record(summary)?;
        let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `<stem>.csv` and `<stem>.json` next to `path`, whatever its
    /// extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let path = path.as_ref();
        let csv_path = path.with_extension("csv");
        let json_path = path.with_extension("json");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&json_path, self.to_json()? + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}
