//! Patch- and slide-level HER2 scoring from segmenter label maps.
//!
//! A patch's label histogram picks its stain category (argmax over labels
//! 1..=4, ties toward the stronger label), gated by the tumor classifier:
//! patches the H&E model calls normal always score 0. The stain classifier
//! does not change the score; it only raises a disagreement flag.
//!
//! At slide level the score is the maximum over patches scoring 2+ or 3+,
//! falling back to the maximum over all patches, and coverage is the share
//! of grid patches scoring 2+ or better.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Her2Error, Result};
use crate::gateway::{LabelMap, StainLabel, StainPrediction, TumorLabel, TumorPrediction};
use crate::slide::{GridSpec, PatchCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelHistogram {
    /// Pixel counts for labels 0..=4.
    pub counts: [u64; 5],
    pub total_px: u64,
}

impl PixelHistogram {
    pub fn from_counts(counts: [u64; 5]) -> Result<Self> {
        let total_px = counts.iter().sum();
        if total_px == 0 {
            return Err(Her2Error::InvalidArgument("empty histogram".into()));
        }
        Ok(PixelHistogram { counts, total_px })
    }

    pub fn count(&self, label: u8) -> u64 {
        self.counts[label as usize]
    }

    /// Labels 1..=4 with a nonzero count.
    pub fn stain_support(&self) -> impl Iterator<Item = StainLabel> + '_ {
        StainLabel::ALL
            .into_iter()
            .filter(|l| self.counts[l.map_label() as usize] > 0)
    }
}

pub fn pixel_histogram(map: &LabelMap) -> PixelHistogram {
    let mut counts = [0u64; 5];
    for &v in map.labels() {
        counts[v as usize] += 1;
    }
    PixelHistogram {
        counts,
        total_px: map.labels().len() as u64,
    }
}

/// Keeps only labels 1 and 4, as used for negative/positive scoring.
pub fn binary_histogram(h: &PixelHistogram) -> PixelHistogram {
    let mut counts = h.counts;
    counts[2] = 0;
    counts[3] = 0;
    PixelHistogram {
        counts,
        total_px: h.total_px,
    }
}

/// Percentage of the patch's pixels carrying any label in `labels`.
pub fn patch_percentage(h: &PixelHistogram, labels: &[u8]) -> Result<f64> {
    let mut seen = [false; 5];
    let mut n = 0u64;
    for &l in labels {
        if !(1..=4).contains(&l) {
            return Err(Her2Error::InvalidArgument(format!(
                "label {l} outside 1..=4"
            )));
        }
        if !std::mem::replace(&mut seen[l as usize], true) {
            n += h.counts[l as usize];
        }
    }
    Ok(n as f64 * 100.0 / h.total_px as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Her2Score {
    S0,
    S1p,
    S2p,
    S3p,
}

impl Her2Score {
    pub const ALL: [Her2Score; 4] = [Her2Score::S0, Her2Score::S1p, Her2Score::S2p, Her2Score::S3p];

    pub fn as_str(self) -> &'static str {
        match self {
            Her2Score::S0 => "0",
            Her2Score::S1p => "1+",
            Her2Score::S2p => "2+",
            Her2Score::S3p => "3+",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Score for a stain category: no/faint/weak/strong → 0/1+/2+/3+.
    pub fn from_stain(label: StainLabel) -> Self {
        Self::ALL[label.index()]
    }

    pub fn is_positive_coverage(self) -> bool {
        self >= Her2Score::S2p
    }
}

impl fmt::Display for Her2Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Her2Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Her2Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Her2Score::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown HER2 score {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFlag {
    Consistent,
    ModelDisagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryStatus {
    Negative,
    Equivocal,
    Positive,
}

impl BinaryStatus {
    pub fn from_score(score: Her2Score) -> Self {
        match score {
            Her2Score::S0 | Her2Score::S1p => BinaryStatus::Negative,
            Her2Score::S2p => BinaryStatus::Equivocal,
            Her2Score::S3p => BinaryStatus::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    #[default]
    FourWay,
    /// Only labels 1 and 4 of the histogram take part in scoring.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchVerdict {
    pub score: Her2Score,
    pub confidence_flag: ConfidenceFlag,
}

/// Dominant stain category of the histogram (argmax over labels 1..=4,
/// ties toward the stronger label); `None` if all four counts are zero.
pub fn dominant_category(h: &PixelHistogram) -> Option<StainLabel> {
    let mut best: Option<StainLabel> = None;
    for label in StainLabel::ALL {
        let n = h.counts[label.map_label() as usize];
        if n == 0 {
            continue;
        }
        match best {
            Some(b) if h.counts[b.map_label() as usize] > n => {}
            _ => best = Some(label),
        }
    }
    best
}

pub fn score_patch(
    h: &PixelHistogram,
    tumor: &TumorPrediction,
    stain: &StainPrediction,
) -> PatchVerdict {
    let dominant = dominant_category(h);
    let score = match (tumor.label, dominant) {
        (TumorLabel::Normal, _) | (_, None) => Her2Score::S0,
        (TumorLabel::Tumor, Some(label)) => Her2Score::from_stain(label),
    };
    let histogram_category = dominant.unwrap_or(StainLabel::NoStain);
    let confidence_flag = if stain.label == histogram_category {
        ConfidenceFlag::Consistent
    } else {
        ConfidenceFlag::ModelDisagreement
    };
    PatchVerdict {
        score,
        confidence_flag,
    }
}

const STAIN_LETTERS: [char; 4] = ['N', 'F', 'W', 'S'];

/// Short patch caption, e.g. `NF/1+`: one letter per stain label present
/// (No, Faint, Weak, Strong), then the score. A patch with no stained
/// pixels renders as `0`.
pub fn annotation_code(h: &PixelHistogram, score: Her2Score) -> String {
    let letters: String = h
        .stain_support()
        .map(|l| STAIN_LETTERS[l.index()])
        .collect();
    match (letters.is_empty(), score) {
        (true, Her2Score::S0) => "0".to_string(),
        (true, s) => format!("0/{s}"),
        (false, s) => format!("{letters}/{s}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreRecord {
    pub coord: PatchCoord,
    pub histogram: PixelHistogram,
    pub tumor: TumorPrediction,
    pub stain: StainPrediction,
    pub score: Her2Score,
    pub annotation: String,
    pub confidence_flag: ConfidenceFlag,
}

impl PatchScoreRecord {
    pub fn build(
        coord: PatchCoord,
        histogram: PixelHistogram,
        tumor: TumorPrediction,
        stain: StainPrediction,
        mode: ScoringMode,
    ) -> Self {
        let scored = match mode {
            ScoringMode::FourWay => histogram,
            ScoringMode::Binary => binary_histogram(&histogram),
        };
        let verdict = score_patch(&scored, &tumor, &stain);
        PatchScoreRecord {
            coord,
            histogram,
            tumor,
            stain,
            score: verdict.score,
            annotation: annotation_code(&histogram, verdict.score),
            confidence_flag: verdict.confidence_flag,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideScore {
    pub wsi_score: Her2Score,
    pub coverage_pct: f64,
    pub binary_status: BinaryStatus,
    /// Sorted by (row, col).
    pub patch_records: Vec<PatchScoreRecord>,
}

pub fn score_slide(records: Vec<PatchScoreRecord>, spec: &GridSpec) -> Result<SlideScore> {
    let expected = spec.patch_count();
    if records.len() != expected {
        return Err(Her2Error::RecordCount {
            expected,
            actual: records.len(),
        });
    }
    let mut seen = HashSet::with_capacity(expected);
    for r in &records {
        if !spec.contains(r.coord) {
            return Err(Her2Error::InvalidArgument(format!(
                "record {} outside {}x{} grid",
                r.coord, spec.rows, spec.cols
            )));
        }
        if !seen.insert(r.coord) {
            return Err(Her2Error::InvalidArgument(format!(
                "duplicate record {}",
                r.coord
            )));
        }
    }
    let mut records = records;
    records.sort_by_key(|r| r.coord);

    let positive = records
        .iter()
        .filter(|r| r.score.is_positive_coverage())
        .count();
    let wsi_score = records
        .iter()
        .map(|r| r.score)
        .filter(|s| s.is_positive_coverage())
        .max()
        .or_else(|| records.iter().map(|r| r.score).max())
        .unwrap_or(Her2Score::S0);
    let coverage_pct = positive as f64 * 100.0 / expected as f64;

    Ok(SlideScore {
        wsi_score,
        coverage_pct,
        binary_status: BinaryStatus::from_score(wsi_score),
        patch_records: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::rules::EPSILON;

    fn hist(c: [u64; 5]) -> PixelHistogram {
        PixelHistogram::from_counts(c).unwrap()
    }

    fn tumor() -> TumorPrediction {
        TumorPrediction::one_hot(TumorLabel::Tumor, EPSILON)
    }

    fn normal() -> TumorPrediction {
        TumorPrediction::one_hot(TumorLabel::Normal, EPSILON)
    }

    fn stain(l: StainLabel) -> StainPrediction {
        StainPrediction::one_hot(l, EPSILON)
    }

    fn record(row: u32, col: u32, score: Her2Score) -> PatchScoreRecord {
        PatchScoreRecord {
            coord: PatchCoord::new(row, col),
            histogram: hist([1, 0, 0, 0, 0]),
            tumor: tumor(),
            stain: stain(StainLabel::NoStain),
            score,
            annotation: String::new(),
            confidence_flag: ConfidenceFlag::Consistent,
        }
    }

    #[test]
    fn uniform_histograms() {
        let zero = pixel_histogram(&LabelMap::filled(512, 512, 0).unwrap());
        assert_eq!(zero.counts, [262144, 0, 0, 0, 0]);
        let four = pixel_histogram(&LabelMap::filled(512, 512, 4).unwrap());
        assert_eq!(four.counts, [0, 0, 0, 0, 262144]);
        assert_eq!(four.total_px, 262144);
    }

    #[test]
    fn binary_restriction() {
        let h = hist([0, 10, 5, 5, 10]);
        let b = binary_histogram(&h);
        assert_eq!(b.counts, [0, 10, 0, 0, 10]);
        assert_eq!(b.total_px, 30);
        let z = hist([7, 0, 0, 0, 0]);
        assert_eq!(binary_histogram(&z), z);
    }

    #[test]
    fn percentages() {
        let full = hist([0, 0, 0, 0, 262144]);
        assert_eq!(patch_percentage(&full, &[4]).unwrap(), 100.0);
        let half = hist([131072, 0, 0, 131072, 0]);
        assert_eq!(patch_percentage(&half, &[3]).unwrap(), 50.0);
        assert_eq!(patch_percentage(&half, &[3, 3]).unwrap(), 50.0);
        assert!(patch_percentage(&half, &[0]).is_err());
    }

    #[test]
    fn tumor_gate() {
        let v = score_patch(&hist([0, 0, 0, 0, 100]), &normal(), &stain(StainLabel::Strong));
        assert_eq!(v.score, Her2Score::S0);
    }

    #[test]
    fn argmax_and_ties() {
        let v = score_patch(&hist([0, 0, 9000, 100, 0]), &tumor(), &stain(StainLabel::Faint));
        assert_eq!(v.score, Her2Score::S1p);
        assert_eq!(v.confidence_flag, ConfidenceFlag::Consistent);
        let v = score_patch(&hist([0, 0, 0, 500, 500]), &tumor(), &stain(StainLabel::Weak));
        assert_eq!(v.score, Her2Score::S3p);
        assert_eq!(v.confidence_flag, ConfidenceFlag::ModelDisagreement);
        let v = score_patch(&hist([10, 0, 0, 0, 0]), &tumor(), &stain(StainLabel::NoStain));
        assert_eq!(v.score, Her2Score::S0);
        assert_eq!(v.confidence_flag, ConfidenceFlag::Consistent);
    }

    #[test]
    fn annotation_examples() {
        assert_eq!(annotation_code(&hist([0, 10, 5, 0, 0]), Her2Score::S1p), "NF/1+");
        assert_eq!(annotation_code(&hist([0, 1, 1, 1, 0]), Her2Score::S1p), "NFW/1+");
        assert_eq!(annotation_code(&hist([5, 0, 0, 0, 0]), Her2Score::S0), "0");
        assert_eq!(annotation_code(&hist([0, 0, 0, 0, 3]), Her2Score::S3p), "S/3+");
    }

    #[test]
    fn slide_aggregation() {
        let spec = GridSpec {
            tile_size_px: 512,
            cols: 2,
            rows: 2,
        };
        let recs = vec![
            record(0, 0, Her2Score::S0),
            record(0, 1, Her2Score::S1p),
            record(1, 0, Her2Score::S3p),
            record(1, 1, Her2Score::S0),
        ];
        let s = score_slide(recs, &spec).unwrap();
        assert_eq!(s.wsi_score, Her2Score::S3p);
        assert_eq!(s.coverage_pct, 25.0);
        assert_eq!(s.binary_status, BinaryStatus::Positive);
    }

    #[test]
    fn all_zero_slide_is_negative() {
        let spec = GridSpec {
            tile_size_px: 16,
            cols: 3,
            rows: 1,
        };
        let recs = (0..3).map(|c| record(0, c, Her2Score::S0)).collect();
        let s = score_slide(recs, &spec).unwrap();
        assert_eq!(s.wsi_score, Her2Score::S0);
        assert_eq!(s.coverage_pct, 0.0);
        assert_eq!(s.binary_status, BinaryStatus::Negative);
    }

    #[test]
    fn fallback_when_nothing_positive() {
        let spec = GridSpec {
            tile_size_px: 16,
            cols: 2,
            rows: 1,
        };
        let s = score_slide(vec![record(0, 0, Her2Score::S1p), record(0, 1, Her2Score::S0)], &spec).unwrap();
        assert_eq!(s.wsi_score, Her2Score::S1p);
        assert_eq!(s.coverage_pct, 0.0);
    }

    #[test]
    fn incomplete_or_duplicate_records() {
        let spec = GridSpec {
            tile_size_px: 16,
            cols: 2,
            rows: 1,
        };
        assert!(matches!(
            score_slide(vec![record(0, 0, Her2Score::S0)], &spec),
            Err(Her2Error::RecordCount { expected: 2, actual: 1 })
        ));
        assert!(score_slide(vec![record(0, 0, Her2Score::S0), record(0, 0, Her2Score::S0)], &spec).is_err());
    }

    #[test]
    fn binary_mode_scores_only_extremes() {
        let h = hist([0, 10, 50, 40, 20]);
        let r = PatchScoreRecord::build(
            PatchCoord::new(0, 0),
            h,
            tumor(),
            stain(StainLabel::Weak),
            ScoringMode::Binary,
        );
        assert_eq!(r.score, Her2Score::S3p);
        assert_eq!(r.annotation, "NFWS/3+");
        let r = PatchScoreRecord::build(PatchCoord::new(0, 0), h, tumor(), stain(StainLabel::Weak), ScoringMode::FourWay);
        assert_eq!(r.score, Her2Score::S1p);
    }

    #[test]
    fn score_text_round_trip() {
        for s in Her2Score::ALL {
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<Her2Score>(&json).unwrap(), s);
        }
        assert_eq!(serde_json::to_string(&Her2Score::S3p).unwrap(), "\"3+\"");
    }
}
