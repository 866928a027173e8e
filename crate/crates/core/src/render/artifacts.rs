use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{heatmap_stain, heatmap_tumor, mosaic, overlay, HeatmapStyle, Palette};
use crate::error::{Her2Error, Result};
use crate::pipeline::{CaseReport, PatchOutput};
use crate::slide::{GridSpec, Patch, PatchGrid, SlideIdentity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactOptions {
    pub overlays: bool,
    pub heatmaps: bool,
    pub mosaic: bool,
    pub grid_lines: bool,
    pub palette: Palette,
    pub heatmap_style: HeatmapStyle,
}

impl Default for ArtifactOptions {
    fn default() -> Self {
        ArtifactOptions {
            overlays: true,
            heatmaps: true,
            mosaic: true,
            grid_lines: true,
            palette: Palette::default(),
            heatmap_style: HeatmapStyle::default(),
        }
    }
}

/// Writes the artifacts of one case under `<out>/<case_id>/`.
///
/// [`CaseArtifacts::visit`] is safe to call from pipeline workers; each
/// call writes only files named after its own patch.
pub struct CaseArtifacts {
    case_dir: PathBuf,
    source: SlideIdentity,
    spec: GridSpec,
    options: ArtifactOptions,
    written: Mutex<Vec<String>>,
    overlay_tiles: Mutex<Vec<Patch>>,
}

pub const OVERLAY_DIR: &str = "overlays";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const MOSAIC_DIR: &str = "mosaics";
pub const MOSAIC_FILE: &str = "ihc_overlay.png";

pub fn save_png(path: &Path, image: &RgbImage) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Her2Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Her2Error::io(path, e))
}

impl CaseArtifacts {
    /// `source` and `spec` describe the IHC slide.
    pub fn new(out_root: &Path, source: SlideIdentity, spec: GridSpec, options: ArtifactOptions) -> Result<Self> {
        let case_dir = out_root.join(&source.case_id);
        let mut dirs = vec![case_dir.clone()];
        if options.overlays {
            dirs.push(case_dir.join(OVERLAY_DIR));
        }
        if options.heatmaps {
            dirs.push(case_dir.join(HEATMAP_DIR));
        }
        if options.mosaic {
            dirs.push(case_dir.join(MOSAIC_DIR));
        }
        for d in &dirs {
            fs::create_dir_all(d).map_err(|e| Her2Error::io(d, e))?;
        }
        Ok(CaseArtifacts {
            case_dir,
            source,
            spec,
            options,
            written: Mutex::new(Vec::new()),
            overlay_tiles: Mutex::new(Vec::new()),
        })
    }

    pub fn case_dir(&self) -> &Path {
        &self.case_dir
    }

    fn record(&self, rel: String) {
        self.written.lock().expect("artifact list poisoned").push(rel);
    }

    fn save_rel(&self, rel: String, image: &RgbImage) -> Result<()> {
        save_png(&self.case_dir.join(&rel), image)?;
        self.record(rel);
        Ok(())
    }

    pub fn visit(&self, out: &PatchOutput<'_>) -> Result<()> {
        let coord = out.record.coord;
        let opts = &self.options;
        if opts.overlays || opts.mosaic {
            let composed = overlay(&out.ihc.to_rgb_image(), out.labels, &opts.palette)?;
            if opts.overlays {
                self.save_rel(format!("{OVERLAY_DIR}/{coord}.png"), &composed)?;
            }
            if opts.mosaic {
                let tile = out.ihc.with_pixels(composed.into_raw())?;
                self.overlay_tiles.lock().expect("tile list poisoned").push(tile);
            }
        }
        if opts.heatmaps {
            let t = heatmap_tumor(&out.he.to_rgb_image(), &out.record.tumor, &opts.heatmap_style);
            self.save_rel(format!("{HEATMAP_DIR}/{coord}_he_{}.png", t.caption), &t.image)?;
            let s = heatmap_stain(
                &out.ihc.to_rgb_image(),
                &out.record.stain,
                &opts.palette,
                &opts.heatmap_style,
            );
            self.save_rel(format!("{HEATMAP_DIR}/{coord}_ihc_{}.png", s.caption), &s.image)?;
        }
        Ok(())
    }

    /// Writes the mosaic and both reports, and fills `report.artifacts`.
    pub fn finish(self, report: &mut CaseReport) -> Result<()> {
        if self.options.mosaic {
            let tiles = self.overlay_tiles.into_inner().expect("tile list poisoned");
            let grid = PatchGrid::from_parts(self.spec, self.source.clone(), tiles)?;
            let image = mosaic(&grid, self.options.grid_lines)?;
            let rel = format!("{MOSAIC_DIR}/{MOSAIC_FILE}");
            save_png(&self.case_dir.join(&rel), &image)?;
            self.written.lock().expect("artifact list poisoned").push(rel);
        }
        let mut written = self.written.into_inner().expect("artifact list poisoned");
        written.push("report.csv".into());
        written.push("report.json".into());
        written.sort();
        report.artifacts = written;

        write_text(&self.case_dir.join("report.csv"), &report.to_csv())?;
        let mut json = report.to_json()?;
        json.push('\n');
        write_text(&self.case_dir.join("report.json"), &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ModelGateway, ModelBindings};
    use crate::mapping::ModalityMapping;
    use crate::pipeline::{run_with_gateway, PipelineConfig};
    use crate::slide::{compute_grid_spec, Modality, SlideImage};

    #[test]
    fn writes_layout_and_indexes_it() {
        let he = SlideImage::filled("case", Modality::He, 40, 20, [255, 255, 255]).unwrap();
        let mut ihc = SlideImage::filled("case", Modality::Ihc, 40, 20, [255, 255, 255]).unwrap();
        ihc.fill_rect(0, 0, 20, 20, [190, 90, 10]);
        let spec = compute_grid_spec(40, 20, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let artifacts =
            CaseArtifacts::new(dir.path(), ihc.identity(), spec, ArtifactOptions::default()).unwrap();
        let gateway = ModelGateway::start(&ModelBindings::default(), 1).unwrap();
        let visit = |o: &PatchOutput<'_>| artifacts.visit(o);
        let mut report = run_with_gateway(
            &he,
            &ihc,
            &ModalityMapping::identity(spec),
            &gateway,
            &PipelineConfig { tile_size_px: 20, ..Default::default() },
            Some(&visit),
        )
        .unwrap();
        artifacts.finish(&mut report).unwrap();

        let case = dir.path().join("case");
        assert!(report.artifacts.contains(&"overlays/r0_c1.png".to_string()));
        assert!(report.artifacts.contains(&"heatmaps/r0_c0_ihc_strong.png".to_string()));
        assert!(report.artifacts.contains(&"heatmaps/r0_c0_he_normal.png".to_string()));
        let mut sorted = report.artifacts.clone();
        sorted.sort();
        assert_eq!(sorted, report.artifacts);
        for rel in &report.artifacts {
            assert!(case.join(rel).is_file(), "{rel}");
        }
        let m = image::open(case.join("mosaics/ihc_overlay.png")).unwrap();
        assert_eq!((m.width(), m.height()), (41, 20));
    }
}
