//! Overlays, heatmaps, mosaics and ground-truth tallies.

mod artifacts;
mod tally;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::gateway::{LabelMap, StainLabel, StainPrediction, TumorLabel, TumorPrediction};
use crate::slide::{implode, PatchGrid};

pub use artifacts::{save_png, ArtifactOptions, CaseArtifacts};
pub use tally::{
    read_tally_csv, tally_csv, tally_report, PatchLabels, RoiBlock, RoiTally, StainTally,
    TallyInput, TALLY_ROWS,
};

/// Label colours (RGBA) for label-map values 0..=4 plus a global opacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: [[u8; 4]; 5],
    pub overlay_alpha: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            colors: [
                [0, 0, 0, 0],
                [0, 0, 255, 255],
                [255, 255, 0, 255],
                [255, 165, 0, 255],
                [255, 0, 0, 255],
            ],
            overlay_alpha: 0.5,
        }
    }
}

impl Palette {
    pub fn transparent() -> Self {
        Palette {
            colors: [[0, 0, 0, 0]; 5],
            overlay_alpha: 0.5,
        }
    }

    fn alpha_of(&self, label: u8) -> f64 {
        self.overlay_alpha * self.colors[label as usize][3] as f64 / 255.0
    }
}

#[inline]
fn blend(src: u8, color: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * src as f64 + alpha * color as f64).round() as u8
}

fn tint(image: &mut RgbImage, color: [u8; 3], alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    for p in image.pixels_mut() {
        for c in 0..3 {
            p[c] = blend(p[c], color[c], alpha);
        }
    }
}

/// `(1 - a) * src + a * colour` per channel, with `a` the palette opacity
/// times the label colour's own alpha.
pub fn overlay(image: &RgbImage, labels: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    if image.width() != labels.width_px() || image.height() != labels.height_px() {
        return Err(Her2Error::InvalidArgument(format!(
            "image {}x{} and label map {}x{} differ",
            image.width(),
            image.height(),
            labels.width_px(),
            labels.height_px()
        )));
    }
    let alphas: [f64; 5] = std::array::from_fn(|k| palette.alpha_of(k as u8));
    let mut out = image.clone();
    for (p, &label) in out.pixels_mut().zip(labels.labels()) {
        let a = alphas[label as usize];
        if a > 0.0 {
            let c = palette.colors[label as usize];
            *p = Rgb([blend(p[0], c[0], a), blend(p[1], c[1], a), blend(p[2], c[2], a)]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image: RgbImage,
    pub caption: String,
}

/// Tint colour and strength at probability 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStyle {
    pub tumor_rgb: [u8; 3],
    pub max_alpha: f64,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle {
            tumor_rgb: [255, 0, 0],
            max_alpha: 0.5,
        }
    }
}

/// Tints the patch toward the tumor colour with strength
/// `P(tumor) * max_alpha`; a certain-normal patch is left untouched.
pub fn heatmap_tumor(image: &RgbImage, prediction: &TumorPrediction, style: &HeatmapStyle) -> Heatmap {
    let mut out = image.clone();
    tint(
        &mut out,
        style.tumor_rgb,
        prediction.probability(TumorLabel::Tumor) * style.max_alpha,
    );
    Heatmap {
        image: out,
        caption: prediction.label.as_str().to_string(),
    }
}

/// Tints with the palette colour of the predicted stain category at
/// strength `P(label) * max_alpha`. No-stain maps to label 1's colour
/// only if the palette gives it one.
pub fn heatmap_stain(image: &RgbImage, prediction: &StainPrediction, palette: &Palette, style: &HeatmapStyle) -> Heatmap {
    let c = palette.colors[prediction.label.map_label() as usize];
    let mut out = image.clone();
    let alpha = if prediction.label == StainLabel::NoStain {
        0.0
    } else {
        prediction.probability(prediction.label) * style.max_alpha * c[3] as f64 / 255.0
    };
    tint(&mut out, [c[0], c[1], c[2]], alpha);
    Heatmap {
        image: out,
        caption: prediction.label.as_str().to_string(),
    }
}

pub const GRID_LINE_RGB: [u8; 3] = [0, 0, 0];

/// Reassembles a grid for display. Without grid lines this is the
/// imploded slide; with them, a 1-px line separates neighbouring patches
/// so the output grows by `cols - 1` by `rows - 1` pixels.
pub fn mosaic(grid: &PatchGrid, grid_lines: bool) -> Result<RgbImage> {
    let slide = implode(grid)?;
    let plain = slide.to_rgb_image();
    if !grid_lines {
        return Ok(plain);
    }
    let spec = grid.spec();
    let f = spec.tile_size_px;
    let (w, h) = plain.dimensions();
    let out_w = w + spec.cols - 1;
    let out_h = h + spec.rows - 1;
    let mut out = RgbImage::from_pixel(out_w, out_h, Rgb(GRID_LINE_RGB));
    for y in 0..h {
        let oy = y + y / f;
        for x in 0..w {
            out.put_pixel(x + x / f, oy, *plain.get_pixel(x, y));
        }
    }
    Ok(out)
}
