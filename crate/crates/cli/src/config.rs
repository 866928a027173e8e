//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use her2_core::gateway::{BackendKind, ModelBinding, ModelBindings, ModelRole};
use her2_core::mapping::{MappingKind, ModalityMapping};
use her2_core::render::ArtifactOptions;
use her2_core::{GridSpec, Her2Error, ScoringMode};
use serde::Deserialize;

pub const MIN_TILE_SIZE_PX: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    #[default]
    Fourway,
    Binary,
}

impl From<ModeArg> for ScoringMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fourway => ScoringMode::FourWay,
            ModeArg::Binary => ScoringMode::Binary,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    pub kind: MappingKind,
    /// `[row, col]`
    #[serde(default = "unit_scale")]
    pub scale: [f64; 2],
    #[serde(default)]
    pub offset: [f64; 2],
}

fn unit_scale() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            kind: MappingKind::Identity,
            scale: unit_scale(),
            offset: [0.0, 0.0],
        }
    }
}

impl MappingConfig {
    pub fn build(&self, he_spec: GridSpec, ihc_spec: GridSpec) -> her2_core::Result<ModalityMapping> {
        let m = match self.kind {
            MappingKind::Identity => ModalityMapping {
                he_spec,
                ..ModalityMapping::identity(ihc_spec)
            },
            MappingKind::AffineGrid => {
                return ModalityMapping::affine(
                    (self.scale[0], self.scale[1]),
                    (self.offset[0], self.offset[1]),
                    he_spec,
                    ihc_spec,
                )
            }
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingConfig {
    #[serde(default)]
    pub backend: Option<BackendKind>,
    pub command: Option<String>,
    pub input_size_px: Option<u32>,
}

impl BindingConfig {
    fn resolve(&self, role: ModelRole) -> ModelBinding {
        let backend = self.backend.unwrap_or(if self.command.is_some() {
            BackendKind::Sidecar
        } else {
            BackendKind::BuiltinRule
        });
        ModelBinding {
            role,
            backend,
            input_size_px: self.input_size_px.unwrap_or(role.default_input_size()),
            sidecar_command: self.command.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default)]
    pub tumor: BindingConfig,
    #[serde(default)]
    pub stain: BindingConfig,
    #[serde(default)]
    pub segment: BindingConfig,
}

impl ModelsConfig {
    pub fn resolve(&self) -> ModelBindings {
        ModelBindings {
            tumor: self.tumor.resolve(ModelRole::TumorC),
            stain: self.stain.resolve(ModelRole::StainM),
            segment: self.segment.resolve(ModelRole::SegmenterL),
        }
    }
}

/// One case. Relative paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to the IHC file stem.
    pub case_id: Option<String>,
    pub he_slide_path: PathBuf,
    pub ihc_slide_path: PathBuf,
    #[serde(default = "default_tile_size")]
    pub tile_size_px: u32,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub scoring_mode: ModeArg,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub artifacts: ArtifactOptions,
}

fn default_tile_size() -> u32 {
    512
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Her2Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Her2Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.he_slide_path,
            &mut config.ihc_slide_path,
            &mut config.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for p in [&self.he_slide_path, &self.ihc_slide_path] {
            if !p.is_file() {
                return Err(Her2Error::InvalidArgument(format!(
                    "slide {} does not exist",
                    p.display()
                )))
                .context("invalid run config");
            }
        }
        if self.tile_size_px < MIN_TILE_SIZE_PX {
            bail!(Her2Error::InvalidArgument(format!(
                "tile_size_px must be at least {MIN_TILE_SIZE_PX}, got {}",
                self.tile_size_px
            )));
        }
        if self.workers == 0 {
            bail!(Her2Error::InvalidArgument("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn case_id(&self) -> String {
        self.case_id.clone().unwrap_or_else(|| {
            self.ihc_slide_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "case".into())
        })
    }
}
