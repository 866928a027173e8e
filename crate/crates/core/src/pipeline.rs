//! End-to-end scoring of one H&E / IHC slide pair.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::gateway::{LabelMap, ModelBindings, ModelGateway};
use crate::mapping::{ihc_to_he_table, ModalityMapping};
use crate::scoring::{
    pixel_histogram, score_slide, BinaryStatus, Her2Score, PatchScoreRecord, ScoringMode,
};
use crate::slide::{compute_grid_spec, extract_patch, GridSpec, Patch, SlideImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tile_size_px: u32,
    pub scoring_mode: ScoringMode,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_size_px: 512,
            scoring_mode: ScoringMode::FourWay,
            workers: 1,
        }
    }
}

/// Callback run on each patch as soon as it is scored.
pub type PatchVisitor<'v> = &'v (dyn Fn(&PatchOutput<'_>) -> Result<()> + Sync);

/// Everything computed for one IHC patch, handed to the optional visitor.
pub struct PatchOutput<'a> {
    pub ihc: &'a Patch,
    pub he: &'a Patch,
    pub labels: &'a LabelMap,
    pub record: &'a PatchScoreRecord,
}

/// Full per-case result. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub wsi_score: Her2Score,
    pub coverage_pct: f64,
    pub binary_status: BinaryStatus,
    pub scoring_mode: ScoringMode,
    pub grid: GridSpec,
    /// Sorted by (row, col).
    pub records: Vec<PatchScoreRecord>,
    /// Paths of rendered artifacts, relative to the case directory.
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl CaseReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|source| Her2Error::Json {
            context: "serializing case report".into(),
            source,
        })
    }

    /// One row per patch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,col,score,annotation,confidence_flag,tumor_label,p_tumor,p_normal,\
             stain_label,p_no_stain,p_faint,p_weak,p_strong,n0,n1,n2,n3,n4,total_px\n",
        );
        for r in &self.records {
            let p = r.stain.probabilities;
            let c = r.histogram.counts;
            let flag = match r.confidence_flag {
                crate::scoring::ConfidenceFlag::Consistent => "consistent",
                crate::scoring::ConfidenceFlag::ModelDisagreement => "model_disagreement",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.coord.row,
                r.coord.col,
                r.score,
                r.annotation,
                flag,
                r.tumor.label,
                r.tumor.probabilities.tumor,
                r.tumor.probabilities.normal,
                r.stain.label,
                p.no_stain,
                p.faint,
                p.weak,
                p.strong,
                c[0],
                c[1],
                c[2],
                c[3],
                c[4],
                r.histogram.total_px
            );
        }
        out
    }
}

/// Starts the models named by `bindings`, runs the pipeline and stops them.
pub fn run_pipeline(
    he: &SlideImage,
    ihc: &SlideImage,
    mapping: &ModalityMapping,
    bindings: &ModelBindings,
    config: &PipelineConfig,
) -> Result<CaseReport> {
    let gateway = ModelGateway::start(bindings, config.workers.max(1))?;
    let report = run_with_gateway(he, ihc, mapping, &gateway, config, None);
    gateway.shutdown();
    report
}

/// Scores every IHC patch against its mapped H&E patch.
///
/// The report does not depend on `config.workers`: patches are processed in
/// any order and results are collected by grid position. If several
/// patches fail, the error of the first one in row-major order is returned.
pub fn run_with_gateway(
    he: &SlideImage,
    ihc: &SlideImage,
    mapping: &ModalityMapping,
    gateway: &ModelGateway,
    config: &PipelineConfig,
    visitor: Option<PatchVisitor<'_>>,
) -> Result<CaseReport> {
    let he_spec = compute_grid_spec(he.width_px(), he.height_px(), config.tile_size_px)?;
    let ihc_spec = compute_grid_spec(ihc.width_px(), ihc.height_px(), config.tile_size_px)?;
    if mapping.he_spec != he_spec || mapping.ihc_spec != ihc_spec {
        return Err(Her2Error::InvalidArgument(format!(
            "mapping grids ({}x{}, {}x{}) do not match the slides ({}x{}, {}x{})",
            mapping.he_spec.rows,
            mapping.he_spec.cols,
            mapping.ihc_spec.rows,
            mapping.ihc_spec.cols,
            he_spec.rows,
            he_spec.cols,
            ihc_spec.rows,
            ihc_spec.cols
        )));
    }
    mapping.validate()?;
    let table = ihc_to_he_table(mapping)?;

    let score_one = |index: usize| -> Result<PatchScoreRecord> {
        let coord = ihc_spec.coord_at(index);
        let at = |source: Her2Error| Her2Error::AtPatch {
            coord,
            source: Box::new(source),
        };
        let ihc_patch = extract_patch(ihc, &ihc_spec, coord)?;
        let he_patch = extract_patch(he, &he_spec, table[index])?;
        let labels = gateway.segment_stain(&ihc_patch).map_err(at)?;
        let stain = gateway.classify_stain(&ihc_patch).map_err(at)?;
        let tumor = gateway.classify_tumor(&he_patch).map_err(at)?;
        let record = PatchScoreRecord::build(
            coord,
            pixel_histogram(&labels),
            tumor,
            stain,
            config.scoring_mode,
        );
        if let Some(visit) = visitor {
            visit(&PatchOutput {
                ihc: &ihc_patch,
                he: &he_patch,
                labels: &labels,
                record: &record,
            })
            .map_err(at)?;
        }
        Ok(record)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Her2Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<PatchScoreRecord>> = pool.install(|| {
        (0..ihc_spec.patch_count())
            .into_par_iter()
            .map(score_one)
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let slide = score_slide(records, &ihc_spec)?;
    Ok(CaseReport {
        case_id: ihc.case_id.clone(),
        wsi_score: slide.wsi_score,
        coverage_pct: slide.coverage_pct,
        binary_status: slide.binary_status,
        scoring_mode: config.scoring_mode,
        grid: ihc_spec,
        records: slide.patch_records,
        artifacts: Vec::new(),
    })
}
