//! Per-ROI counts of real (ground-truth) versus predicted patch labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::gateway::{StainLabel, TumorLabel};

/// Labels attached to one patch. `stain` is absent for patches without a
/// stain verdict (e.g. background-only patches), which then count toward
/// the tumor rows only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels {
    pub tumor: TumorLabel,
    pub stain: Option<StainLabel>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StainTally {
    pub no_stain: u64,
    pub faint: u64,
    pub weak: u64,
    pub strong: u64,
}

impl StainTally {
    fn add(&mut self, label: StainLabel) {
        match label {
            StainLabel::NoStain => self.no_stain += 1,
            StainLabel::Faint => self.faint += 1,
            StainLabel::Weak => self.weak += 1,
            StainLabel::Strong => self.strong += 1,
        }
    }

    pub fn get(&self, label: StainLabel) -> u64 {
        match label {
            StainLabel::NoStain => self.no_stain,
            StainLabel::Faint => self.faint,
            StainLabel::Weak => self.weak,
            StainLabel::Strong => self.strong,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiTally {
    pub roi_id: String,
    pub r_tumor: u64,
    pub p_tumor: u64,
    pub r_normal: u64,
    pub p_normal: u64,
    pub r_stain: StainTally,
    pub p_stain: StainTally,
}

impl RoiTally {
    pub fn patch_count(&self) -> u64 {
        self.r_tumor + self.r_normal
    }
}

/// A named block of patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBlock {
    pub roi_id: String,
    pub patch_ids: Vec<String>,
}

/// Row names of the tally table, in output order.
pub const TALLY_ROWS: [&str; 12] = [
    "R-tumor",
    "P-tumor",
    "R-normal",
    "P-normal",
    "R-No-stain",
    "R-Faint-stain",
    "R-weak-stain",
    "R-strong-stain",
    "P-No-stain",
    "P-Faint-stain",
    "P-weak-stain",
    "P-strong-stain",
];

fn row_values(t: &RoiTally) -> [u64; 12] {
    [
        t.r_tumor,
        t.p_tumor,
        t.r_normal,
        t.p_normal,
        t.r_stain.no_stain,
        t.r_stain.faint,
        t.r_stain.weak,
        t.r_stain.strong,
        t.p_stain.no_stain,
        t.p_stain.faint,
        t.p_stain.weak,
        t.p_stain.strong,
    ]
}

/// Counts ground truth and predictions per ROI. Every labelled patch must
/// belong to exactly one ROI and carry both a real and a predicted label.
pub fn tally_report(
    truth: &BTreeMap<String, PatchLabels>,
    predicted: &BTreeMap<String, PatchLabels>,
    partition: &[RoiBlock],
) -> Result<Vec<RoiTally>> {
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for block in partition {
        for id in &block.patch_ids {
            if let Some(prev) = owner.insert(id, &block.roi_id) {
                return Err(Her2Error::InvalidArgument(format!(
                    "patch {id:?} assigned to both {prev:?} and {:?}",
                    block.roi_id
                )));
            }
        }
    }
    for id in truth.keys().chain(predicted.keys()) {
        if !owner.contains_key(id.as_str()) {
            return Err(Her2Error::InvalidArgument(format!(
                "patch {id:?} has no ROI assignment"
            )));
        }
    }

    let mut seen_roi = HashSet::new();
    partition
        .iter()
        .map(|block| {
            if !seen_roi.insert(block.roi_id.as_str()) {
                return Err(Her2Error::InvalidArgument(format!(
                    "ROI {:?} listed twice",
                    block.roi_id
                )));
            }
            let mut t = RoiTally {
                roi_id: block.roi_id.clone(),
                r_tumor: 0,
                p_tumor: 0,
                r_normal: 0,
                p_normal: 0,
                r_stain: StainTally::default(),
                p_stain: StainTally::default(),
            };
            for id in &block.patch_ids {
                let real = truth.get(id).ok_or_else(|| {
                    Her2Error::InvalidArgument(format!("patch {id:?} has no ground truth"))
                })?;
                let pred = predicted.get(id).ok_or_else(|| {
                    Her2Error::InvalidArgument(format!("patch {id:?} has no prediction"))
                })?;
                match real.tumor {
                    TumorLabel::Tumor => t.r_tumor += 1,
                    TumorLabel::Normal => t.r_normal += 1,
                }
                match pred.tumor {
                    TumorLabel::Tumor => t.p_tumor += 1,
                    TumorLabel::Normal => t.p_normal += 1,
                }
                if let Some(s) = real.stain {
                    t.r_stain.add(s);
                }
                if let Some(s) = pred.stain {
                    t.p_stain.add(s);
                }
            }
            Ok(t)
        })
        .collect()
}

/// One column per ROI, one row per entry of [`TALLY_ROWS`].
pub fn tally_csv(tallies: &[RoiTally]) -> String {
    let mut out = String::from("status");
    for t in tallies {
        out.push(',');
        out.push_str(&t.roi_id);
    }
    out.push('\n');
    if tallies.is_empty() {
        return out;
    }
    let columns: Vec<[u64; 12]> = tallies.iter().map(row_values).collect();
    for (i, name) in TALLY_ROWS.iter().enumerate() {
        out.push_str(name);
        for c in &columns {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

/// Inputs for [`tally_report`] as read from a CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TallyInput {
    pub truth: BTreeMap<String, PatchLabels>,
    pub predicted: BTreeMap<String, PatchLabels>,
    /// ROIs in order of first appearance.
    pub partition: Vec<RoiBlock>,
}

/// Reads `patch_id,roi_id,true_tumor,true_stain,pred_tumor,pred_stain`.
/// Tumor columns take `tumor`/`normal`; stain columns take
/// `no_stain`/`faint`/`weak`/`strong` or an empty cell.
pub fn read_tally_csv(path: &Path) -> Result<TallyInput> {
    let err = |line: u64, message: String| Her2Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Her2Error::io(path, std::io::Error::other(e.to_string())))?;
    let expected = ["patch_id", "roi_id", "true_tumor", "true_stain", "pred_tumor", "pred_stain"];
    let headers = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(err(1, format!("header must be {}", expected.join(","))));
    }

    let mut input = TallyInput::default();
    let mut roi_index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            err(e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let tumor = |s: &str| {
            TumorLabel::parse(s).ok_or_else(|| err(line, format!("unknown tumor label {s:?}")))
        };
        let stain = |s: &str| -> Result<Option<StainLabel>> {
            if s.is_empty() {
                return Ok(None);
            }
            StainLabel::parse(s)
                .map(Some)
                .ok_or_else(|| err(line, format!("unknown stain label {s:?}")))
        };
        let id = record[0].to_string();
        let roi = record[1].to_string();
        if id.is_empty() || roi.is_empty() {
            return Err(err(line, "empty patch_id or roi_id".into()));
        }
        let real = PatchLabels {
            tumor: tumor(&record[2])?,
            stain: stain(&record[3])?,
        };
        let pred = PatchLabels {
            tumor: tumor(&record[4])?,
            stain: stain(&record[5])?,
        };
        if input.truth.insert(id.clone(), real).is_some() {
            return Err(err(line, format!("duplicate patch {id:?}")));
        }
        input.predicted.insert(id.clone(), pred);
        let k = *roi_index.entry(roi.clone()).or_insert_with(|| {
            input.partition.push(RoiBlock {
                roi_id: roi,
                patch_ids: Vec::new(),
            });
            input.partition.len() - 1
        });
        input.partition[k].patch_ids.push(id);
    }
    Ok(input)
}
