//! Uniform access to the tumor classifier, the stain-intensity classifier
//! and the pixel segmenter, whether backed by the built-in colour rules or by
//! an external sidecar process.

pub mod resize;
pub mod rules;
pub mod sidecar;

use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::slide::{Modality, Patch};

pub use sidecar::{spawn_sidecar, SidecarHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorLabel {
    Tumor,
    Normal,
}

impl TumorLabel {
    pub const ALL: [TumorLabel; 2] = [TumorLabel::Tumor, TumorLabel::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            TumorLabel::Tumor => "tumor",
            TumorLabel::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for TumorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stain intensity categories, in increasing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainLabel {
    NoStain,
    Faint,
    Weak,
    Strong,
}

impl StainLabel {
    pub const ALL: [StainLabel; 4] = [
        StainLabel::NoStain,
        StainLabel::Faint,
        StainLabel::Weak,
        StainLabel::Strong,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StainLabel::NoStain => "no_stain",
            StainLabel::Faint => "faint",
            StainLabel::Weak => "weak",
            StainLabel::Strong => "strong",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Label-map value (1..=4) for this category.
    pub fn map_label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_map_label(label: u8) -> Option<Self> {
        match label {
            1..=4 => Some(Self::ALL[label as usize - 1]),
            _ => None,
        }
    }
}

impl fmt::Display for StainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumorProbabilities {
    pub tumor: f64,
    pub normal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumorPrediction {
    pub label: TumorLabel,
    pub probabilities: TumorProbabilities,
}

const PROB_SUM_TOLERANCE: f64 = 1e-9;
/// Sidecar outputs are accepted if they sum to one within this, then renormalised.
const WIRE_SUM_TOLERANCE: f64 = 1e-6;

impl TumorPrediction {
    pub fn one_hot(label: TumorLabel, epsilon: f64) -> Self {
        let (tumor, normal) = match label {
            TumorLabel::Tumor => (1.0 - epsilon, epsilon),
            TumorLabel::Normal => (epsilon, 1.0 - epsilon),
        };
        TumorPrediction {
            label,
            probabilities: TumorProbabilities { tumor, normal },
        }
    }

    /// Builds a prediction from raw probabilities; the label is the argmax
    /// (ties toward Tumor).
    pub fn from_probabilities(tumor: f64, normal: f64) -> Result<Self> {
        let [tumor, normal] = normalise([tumor, normal])?;
        let label = if tumor >= normal {
            TumorLabel::Tumor
        } else {
            TumorLabel::Normal
        };
        Ok(TumorPrediction {
            label,
            probabilities: TumorProbabilities { tumor, normal },
        })
    }

    pub fn probability(&self, label: TumorLabel) -> f64 {
        match label {
            TumorLabel::Tumor => self.probabilities.tumor,
            TumorLabel::Normal => self.probabilities.normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainProbabilities {
    pub no_stain: f64,
    pub faint: f64,
    pub weak: f64,
    pub strong: f64,
}

impl StainProbabilities {
    fn from_array(p: [f64; 4]) -> Self {
        StainProbabilities {
            no_stain: p[0],
            faint: p[1],
            weak: p[2],
            strong: p[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.no_stain, self.faint, self.weak, self.strong]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainPrediction {
    pub label: StainLabel,
    pub probabilities: StainProbabilities,
}

impl StainPrediction {
    pub fn one_hot(label: StainLabel, epsilon: f64) -> Self {
        let mut p = [epsilon; 4];
        p[label.index()] = 1.0 - 3.0 * epsilon;
        StainPrediction {
            label,
            probabilities: StainProbabilities::from_array(p),
        }
    }

    /// Argmax with ties toward the stronger category.
    pub fn from_probabilities(p: [f64; 4]) -> Result<Self> {
        let p = normalise(p)?;
        let mut best = 0;
        for k in 1..4 {
            if p[k] >= p[best] {
                best = k;
            }
        }
        Ok(StainPrediction {
            label: StainLabel::ALL[best],
            probabilities: StainProbabilities::from_array(p),
        })
    }

    pub fn probability(&self, label: StainLabel) -> f64 {
        self.probabilities.to_array()[label.index()]
    }
}

fn normalise<const N: usize>(p: [f64; N]) -> Result<[f64; N]> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Her2Error::ProtocolViolation(format!(
            "probabilities {p:?} outside [0, 1]"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > WIRE_SUM_TOLERANCE {
        return Err(Her2Error::ProtocolViolation(format!(
            "probabilities {p:?} sum to {sum}"
        )));
    }
    if (sum - 1.0).abs() <= PROB_SUM_TOLERANCE {
        return Ok(p);
    }
    Ok(p.map(|v| v / sum))
}

/// Per-pixel stain category raster: 0 background, 1..=4 no/faint/weak/strong.
#[derive(Clone, PartialEq, Eq)]
pub struct LabelMap {
    width_px: u32,
    height_px: u32,
    labels: Vec<u8>,
}

impl fmt::Debug for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LabelMap")
            .field("width_px", &self.width_px)
            .field("height_px", &self.height_px)
            .field("counts", &self.counts())
            .finish()
    }
}

pub const MAX_LABEL: u8 = 4;

impl LabelMap {
    pub fn new(width_px: u32, height_px: u32, labels: Vec<u8>) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Her2Error::InvalidArgument(format!(
                "label map dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        if labels.len() != width_px as usize * height_px as usize {
            return Err(Her2Error::InvalidArgument(format!(
                "label map has {} values, expected {}",
                labels.len(),
                width_px as usize * height_px as usize
            )));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > MAX_LABEL) {
            return Err(Her2Error::InvalidArgument(format!(
                "label value {bad} outside 0..=4"
            )));
        }
        Ok(LabelMap {
            width_px,
            height_px,
            labels,
        })
    }

    pub fn filled(width_px: u32, height_px: u32, label: u8) -> Result<Self> {
        Self::new(
            width_px,
            height_px,
            vec![label; width_px as usize * height_px as usize],
        )
    }

    pub fn width_px(&self) -> u32 {
        self.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.height_px
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width_px as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        assert!(label <= MAX_LABEL, "label {label} outside 0..=4");
        let i = y as usize * self.width_px as usize + x as usize;
        self.labels[i] = label;
    }

    pub fn counts(&self) -> [u64; 5] {
        let mut counts = [0u64; 5];
        for &v in &self.labels {
            counts[v as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelRole {
    /// Tumor classifier on H&E patches.
    #[serde(rename = "tumor")]
    TumorC,
    /// Stain-intensity classifier on IHC patches.
    #[serde(rename = "stain")]
    StainM,
    /// Pixel-level stain segmenter on IHC patches.
    #[serde(rename = "segment")]
    SegmenterL,
}

impl ModelRole {
    pub fn wire_name(self) -> &'static str {
        match self {
            ModelRole::TumorC => "tumor",
            ModelRole::StainM => "stain",
            ModelRole::SegmenterL => "segment",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            ModelRole::TumorC => Modality::He,
            ModelRole::StainM | ModelRole::SegmenterL => Modality::Ihc,
        }
    }

    /// Model input size used when nothing else is configured.
    pub fn default_input_size(self) -> u32 {
        match self {
            ModelRole::TumorC => 244,
            ModelRole::StainM | ModelRole::SegmenterL => 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    BuiltinRule,
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBinding {
    pub role: ModelRole,
    pub backend: BackendKind,
    pub input_size_px: u32,
    pub sidecar_command: Option<String>,
}

impl ModelBinding {
    pub fn builtin(role: ModelRole) -> Self {
        ModelBinding {
            role,
            backend: BackendKind::BuiltinRule,
            input_size_px: role.default_input_size(),
            sidecar_command: None,
        }
    }

    pub fn sidecar(role: ModelRole, command: impl Into<String>) -> Self {
        ModelBinding {
            role,
            backend: BackendKind::Sidecar,
            input_size_px: role.default_input_size(),
            sidecar_command: Some(command.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size_px == 0 {
            return Err(Her2Error::InvalidArgument(format!(
                "{} binding needs a positive input size",
                self.role.wire_name()
            )));
        }
        if self.backend == BackendKind::Sidecar
            && self.sidecar_command.as_deref().is_none_or(|c| c.trim().is_empty())
        {
            return Err(Her2Error::InvalidArgument(format!(
                "{} binding uses a sidecar but has no command",
                self.role.wire_name()
            )));
        }
        Ok(())
    }
}

/// The three bindings a pipeline run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBindings {
    pub tumor: ModelBinding,
    pub stain: ModelBinding,
    pub segment: ModelBinding,
}

impl Default for ModelBindings {
    fn default() -> Self {
        ModelBindings {
            tumor: ModelBinding::builtin(ModelRole::TumorC),
            stain: ModelBinding::builtin(ModelRole::StainM),
            segment: ModelBinding::builtin(ModelRole::SegmenterL),
        }
    }
}

enum Backend {
    Builtin,
    /// One mutex per process; each process serves one request at a time.
    Sidecar(Vec<Mutex<SidecarHandle>>),
}

struct Model {
    binding: ModelBinding,
    backend: Backend,
}

impl Model {
    fn start(binding: &ModelBinding, expected: ModelRole, processes: usize) -> Result<Self> {
        binding.validate()?;
        if binding.role != expected {
            return Err(Her2Error::InvalidArgument(format!(
                "binding for {} used in the {} slot",
                binding.role.wire_name(),
                expected.wire_name()
            )));
        }
        let backend = match binding.backend {
            BackendKind::BuiltinRule => Backend::Builtin,
            BackendKind::Sidecar => {
                let handles = (0..processes.max(1))
                    .map(|_| spawn_sidecar(binding).map(Mutex::new))
                    .collect::<Result<Vec<_>>>()?;
                Backend::Sidecar(handles)
            }
        };
        Ok(Model {
            binding: binding.clone(),
            backend,
        })
    }

    fn with_handle<T>(&self, f: impl FnOnce(&mut SidecarHandle) -> Result<T>) -> Result<T> {
        let Backend::Sidecar(handles) = &self.backend else {
            unreachable!("with_handle on a builtin model");
        };
        let slot = rayon::current_thread_index().unwrap_or(0) % handles.len();
        let mut handle = handles[slot]
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());
        f(&mut handle)
    }

    fn shutdown(&self) {
        if let Backend::Sidecar(handles) = &self.backend {
            for h in handles {
                h.lock()
                    .unwrap_or_else(|poisoned| poisoned.into_inner())
                    .shutdown();
            }
        }
    }
}

fn check_modality(patch: &Patch, role: ModelRole) -> Result<()> {
    if patch.modality != role.modality() {
        return Err(Her2Error::InvalidArgument(format!(
            "{} model expects {} patches, got {}",
            role.wire_name(),
            role.modality(),
            patch.modality
        )));
    }
    Ok(())
}

/// Resized RGB pixels of `patch` at the binding's input size.
fn model_input(patch: &Patch, size: u32) -> std::borrow::Cow<'_, [u8]> {
    if patch.tile_size_px() == size {
        std::borrow::Cow::Borrowed(patch.pixels())
    } else {
        std::borrow::Cow::Owned(resize::resize_rgb(
            patch.pixels(),
            patch.tile_size_px(),
            size,
        ))
    }
}

/// Live models for one run. Sidecar processes are started on construction
/// and stopped by [`ModelGateway::shutdown`] or on drop.
pub struct ModelGateway {
    tumor: Model,
    stain: Model,
    segment: Model,
}

impl ModelGateway {
    /// `processes_per_sidecar` sidecar processes are spawned for each
    /// sidecar-backed role.
    pub fn start(bindings: &ModelBindings, processes_per_sidecar: usize) -> Result<Self> {
        Ok(ModelGateway {
            tumor: Model::start(&bindings.tumor, ModelRole::TumorC, processes_per_sidecar)?,
            stain: Model::start(&bindings.stain, ModelRole::StainM, processes_per_sidecar)?,
            segment: Model::start(
                &bindings.segment,
                ModelRole::SegmenterL,
                processes_per_sidecar,
            )?,
        })
    }

    pub fn builtin() -> Self {
        Self::start(&ModelBindings::default(), 1).expect("builtin bindings are valid")
    }

    pub fn classify_tumor(&self, patch: &Patch) -> Result<TumorPrediction> {
        let model = &self.tumor;
        check_modality(patch, ModelRole::TumorC)?;
        let size = model.binding.input_size_px;
        let input = model_input(patch, size);
        match model.backend {
            Backend::Builtin => Ok(rules::classify_tumor(&input)),
            Backend::Sidecar(_) => model.with_handle(|h| h.classify_tumor(size, size, &input)),
        }
    }

    pub fn classify_stain(&self, patch: &Patch) -> Result<StainPrediction> {
        let model = &self.stain;
        check_modality(patch, ModelRole::StainM)?;
        let size = model.binding.input_size_px;
        let input = model_input(patch, size);
        match model.backend {
            Backend::Builtin => Ok(rules::classify_stain(&rules::segment(&input, size, size))),
            Backend::Sidecar(_) => model.with_handle(|h| h.classify_stain(size, size, &input)),
        }
    }

    /// Label map at the patch's own size; padded pixels are always 0.
    pub fn segment_stain(&self, patch: &Patch) -> Result<LabelMap> {
        let model = &self.segment;
        check_modality(patch, ModelRole::SegmenterL)?;
        let size = model.binding.input_size_px;
        let input = model_input(patch, size);
        let raw = match model.backend {
            Backend::Builtin => rules::segment(&input, size, size),
            Backend::Sidecar(_) => model.with_handle(|h| h.segment(size, size, &input))?,
        };
        let f = patch.tile_size_px();
        let mut labels = if size == f {
            raw
        } else {
            resize::resize_labels(&raw, f, f)
        };
        if patch.pad_right_px > 0 || patch.pad_bottom_px > 0 {
            for y in 0..f {
                for x in 0..f {
                    if patch.is_padding(x, y) {
                        labels.set(x, y, 0);
                    }
                }
            }
        }
        Ok(labels)
    }

    pub fn shutdown(&self) {
        self.tumor.shutdown();
        self.stain.shutdown();
        self.segment.shutdown();
    }
}

impl Drop for ModelGateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}
