//! Challenge label ids, the consolidated 47-entry label set, and the dense
//! training index space.
//!
//! A table row maps a challenge-side id to a dense id. Several challenge ids
//! may share a dense id (the per-tooth pulp ids all collapse to the pulp
//! class); the first row listed for a dense id is its canonical challenge id
//! and is what `to-challenge` remapping emits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

pub const BACKGROUND: u16 = 0;
pub const MANDIBLE: u16 = 1;
pub const PHARYNX: u16 = 7;
pub const PULP: u16 = 50;
pub const LEFT_INCISIVE_NERVE: u16 = 51;
pub const RIGHT_INCISIVE_NERVE: u16 = 52;
pub const LINGUAL_NERVE: u16 = 53;
pub const NERVES: [u16; 3] = [LEFT_INCISIVE_NERVE, RIGHT_INCISIVE_NERVE, LINGUAL_NERVE];

/// Source ids of the per-tooth pulp labels.
pub const PULP_SOURCE_IDS: std::ops::RangeInclusive<u16> = 111..=148;
/// Source ids of the incisive and lingual canals, in the default order
/// left incisive, right incisive, lingual.
pub const CANAL_SOURCE_IDS: [u16; 3] = [103, 104, 105];

const CONSOLIDATED: &[(u16, &str, bool)] = &[
    (0, "Background", false),
    (1, "Lower Jawbone", true),
    (2, "Upper Jawbone", true),
    (3, "Left Inferior Alveolar Canal", true),
    (4, "Right Inferior Alveolar Canal", true),
    (5, "Left Maxillary Sinus", true),
    (6, "Right Maxillary Sinus", true),
    (7, "Pharynx", true),
    (8, "Bridge", false),
    (9, "Crown", false),
    (10, "Implant", false),
    (11, "Upper Right Central Incisor", true),
    (12, "Upper Right Lateral Incisor", true),
    (13, "Upper Right Canine", true),
    (14, "Upper Right First Premolar", true),
    (15, "Upper Right Second Premolar", true),
    (16, "Upper Right First Molar", true),
    (17, "Upper Right Second Molar", true),
    (18, "Upper Right Third Molar (Wisdom Tooth)", true),
    (21, "Upper Left Central Incisor", true),
    (22, "Upper Left Lateral Incisor", true),
    (23, "Upper Left Canine", true),
    (24, "Upper Left First Premolar", true),
    (25, "Upper Left Second Premolar", true),
    (26, "Upper Left First Molar", true),
    (27, "Upper Left Second Molar", true),
    (28, "Upper Left Third Molar (Wisdom Tooth)", true),
    (31, "Lower Left Central Incisor", true),
    (32, "Lower Left Lateral Incisor", true),
    (33, "Lower Left Canine", true),
    (34, "Lower Left First Premolar", true),
    (35, "Lower Left Second Premolar", true),
    (36, "Lower Left First Molar", true),
    (37, "Lower Left Second Molar", true),
    (38, "Lower Left Third Molar (Wisdom Tooth)", true),
    (41, "Lower Right Central Incisor", true),
    (42, "Lower Right Lateral Incisor", true),
    (43, "Lower Right Canine", true),
    (44, "Lower Right First Premolar", true),
    (45, "Lower Right Second Premolar", true),
    (46, "Lower Right First Molar", true),
    (47, "Lower Right Second Molar", true),
    (48, "Lower Right Third Molar (Wisdom Tooth)", true),
    (50, "Tooth Pulp", true),
    (51, "Left Incisive Nerve", true),
    (52, "Right Incisive Nerve", true),
    (53, "Lingual Nerve", true),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub challenge_id: u16,
    pub dense_id: u16,
    pub name: String,
    pub ranked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemapDirection {
    ToDense,
    ToChallenge,
}

/// What to do with a voxel whose label has no table entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownPolicy {
    #[default]
    Error,
    Background,
}

const UNMAPPED: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTable {
    entries: Vec<LabelEntry>,
    /// challenge id -> dense id, `UNMAPPED` if absent
    to_dense: Vec<u16>,
    /// dense id -> canonical entry index
    canonical: Vec<usize>,
}

impl LabelTable {
    /// The consolidated challenge table with the default canal order.
    pub fn builtin() -> Self {
        Self::builtin_with_canals(CANAL_SOURCE_IDS)
    }

    /// The consolidated table with `canals` giving the source ids that map to
    /// the left incisive, right incisive and lingual nerves respectively.
    pub fn builtin_with_canals(canals: [u16; 3]) -> Self {
        let mut entries: Vec<LabelEntry> = CONSOLIDATED
            .iter()
            .enumerate()
            .map(|(dense, &(id, name, ranked))| LabelEntry {
                challenge_id: id,
                dense_id: dense as u16,
                name: name.to_string(),
                ranked,
            })
            .collect();
        let dense_of = |id: u16| CONSOLIDATED.iter().position(|e| e.0 == id).unwrap() as u16;
        for src in PULP_SOURCE_IDS {
            entries.push(LabelEntry {
                challenge_id: src,
                dense_id: dense_of(PULP),
                name: format!("Tooth Pulp (source {src})"),
                ranked: false,
            });
        }
        for (src, nerve) in canals.iter().zip(NERVES) {
            let name = &CONSOLIDATED[dense_of(nerve) as usize].1;
            entries.push(LabelEntry {
                challenge_id: *src,
                dense_id: dense_of(nerve),
                name: format!("{name} (source {src})"),
                ranked: false,
            });
        }
        Self::from_entries(entries).expect("builtin table is valid")
    }

    pub fn from_entries(entries: Vec<LabelEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::LabelTable("no entries".into()));
        }
        let mut to_dense = vec![UNMAPPED; usize::from(u16::MAX) + 1];
        let num_dense = entries.iter().map(|e| usize::from(e.dense_id)).max().unwrap() + 1;
        let mut canonical = vec![usize::MAX; num_dense];
        for (i, e) in entries.iter().enumerate() {
            if e.challenge_id == UNMAPPED || e.dense_id == UNMAPPED {
                return Err(Error::LabelTable(format!("id {} is reserved", UNMAPPED)));
            }
            let slot = &mut to_dense[usize::from(e.challenge_id)];
            if *slot != UNMAPPED {
                return Err(Error::LabelTable(format!(
                    "challenge id {} listed twice",
                    e.challenge_id
                )));
            }
            *slot = e.dense_id;
            if canonical[usize::from(e.dense_id)] == usize::MAX {
                canonical[usize::from(e.dense_id)] = i;
            }
        }
        if let Some(gap) = canonical.iter().position(|&c| c == usize::MAX) {
            return Err(Error::LabelTable(format!(
                "dense ids are not contiguous: {gap} has no entry"
            )));
        }
        if to_dense[0] != 0 || entries[canonical[0]].challenge_id != 0 {
            return Err(Error::LabelTable("background must map 0 <-> 0".into()));
        }
        Ok(LabelTable {
            entries,
            to_dense,
            canonical,
        })
    }

    /// Parse a manifest of `challenge_id,dense_id,name,ranked` lines. A
    /// header line and `#` comments are skipped.
    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (n, rec) in reader.records().enumerate() {
            let rec = rec?;
            if n == 0 && rec.get(0) == Some("challenge_id") {
                continue;
            }
            if rec.len() != 4 {
                return Err(Error::LabelTable(format!(
                    "line {}: expected 4 fields, found {}",
                    n + 1,
                    rec.len()
                )));
            }
            let num = |i: usize| -> Result<u16> {
                rec[i].parse().map_err(|_| {
                    Error::LabelTable(format!("line {}: bad id {:?}", n + 1, &rec[i]))
                })
            };
            let ranked = match rec[3].to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => {
                    return Err(Error::LabelTable(format!(
                        "line {}: bad ranked flag {other:?}",
                        n + 1
                    )))
                }
            };
            entries.push(LabelEntry {
                challenge_id: num(0)?,
                dense_id: num(1)?,
                name: rec[2].to_string(),
                ranked,
            });
        }
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_manifest(&text)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::from("challenge_id,dense_id,name,ranked\n");
        for e in &self.entries {
            let name = if e.name.contains([',', '"']) {
                format!("\"{}\"", e.name.replace('"', "\"\""))
            } else {
                e.name.clone()
            };
            let _ = writeln!(out, "{},{},{},{}", e.challenge_id, e.dense_id, name, e.ranked);
        }
        out
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    /// Size of the dense label space.
    pub fn num_dense(&self) -> usize {
        self.canonical.len()
    }

    pub fn dense_of(&self, challenge_id: u16) -> Option<u16> {
        match self.to_dense[usize::from(challenge_id)] {
            UNMAPPED => None,
            d => Some(d),
        }
    }

    /// Dense id of a class that must exist in the table.
    pub fn require_dense(&self, challenge_id: u16) -> Result<u16> {
        self.dense_of(challenge_id)
            .ok_or_else(|| Error::LabelTable(format!("no entry for id {challenge_id}")))
    }

    pub fn challenge_of(&self, dense_id: u16) -> Option<u16> {
        self.canonical
            .get(usize::from(dense_id))
            .map(|&i| self.entries[i].challenge_id)
    }

    /// The canonical entry of every dense class, in dense order.
    pub fn classes(&self) -> impl Iterator<Item = &LabelEntry> {
        self.canonical.iter().map(|&i| &self.entries[i])
    }

    /// Canonical entries that count toward ranking metrics.
    pub fn ranked(&self) -> impl Iterator<Item = &LabelEntry> {
        self.classes().filter(|e| e.ranked)
    }

    pub fn name_of(&self, challenge_id: u16) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.challenge_id == challenge_id)
            .map(|e| e.name.as_str())
    }

    /// Voxelwise relabeling in either direction.
    pub fn apply_remap(
        &self,
        lbl: &LabelGrid,
        direction: RemapDirection,
        unknown: UnknownPolicy,
    ) -> Result<LabelGrid> {
        let lookup: Vec<u16> = match direction {
            RemapDirection::ToDense => self.to_dense.clone(),
            RemapDirection::ToChallenge => {
                let mut l = vec![UNMAPPED; usize::from(u16::MAX) + 1];
                for (d, &i) in self.canonical.iter().enumerate() {
                    l[d] = self.entries[i].challenge_id;
                }
                l
            }
        };
        let mut missing = vec![0usize; lookup.len()];
        let data: Vec<u16> = lbl
            .data()
            .iter()
            .map(|&v| match lookup[usize::from(v)] {
                UNMAPPED => {
                    missing[usize::from(v)] += 1;
                    BACKGROUND
                }
                m => m,
            })
            .collect();
        let unknowns: Vec<(u16, usize)> = missing
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, &c)| (l as u16, c))
            .collect();
        if let Some(&(label, count)) = unknowns.first() {
            match unknown {
                UnknownPolicy::Error => return Err(Error::UnknownLabel { label, count }),
                UnknownPolicy::Background => {
                    for (label, count) in &unknowns {
                        log::warn!("label {label} ({count} voxels) has no entry; set to background");
                    }
                }
            }
        }
        lbl.with_data(data)
    }
}
