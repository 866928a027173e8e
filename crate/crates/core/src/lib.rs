//! Patch-grid HER2 scoring for paired H&E / IHC whole-slide images.
//!
//! A slide pair is tiled into square patches ([`slide`]), IHC patches are
//! paired with H&E patches through a grid mapping ([`mapping`]), each patch
//! is labelled by pluggable models ([`gateway`]) and scored ([`scoring`]),
//! and the patch scores are aggregated into a slide-level score
//! ([`pipeline`]). [`metrics`] and [`render`] cover evaluation and output.

pub mod error;
pub mod gateway;
pub mod mapping;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scoring;
pub mod slide;

pub use error::{Her2Error, Result};
pub use gateway::{
    LabelMap, ModelBinding, ModelBindings, ModelGateway, ModelRole, StainLabel, StainPrediction,
    TumorLabel, TumorPrediction,
};
pub use mapping::{invert, map_coord, verify_bijection, BijectionReport, ModalityMapping};
pub use pipeline::{run_pipeline, run_with_gateway, CaseReport, PatchVisitor, PipelineConfig};
pub use scoring::{BinaryStatus, Her2Score, PatchScoreRecord, ScoringMode, SlideScore};
pub use slide::{
    compute_grid_spec, extract_patches, implode, GridSpec, Modality, Patch, PatchCoord, PatchGrid,
    SlideImage,
};
