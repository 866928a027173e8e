//! Synthetic slide pairs and ROI label fixtures for end-to-end checks.

use std::collections::BTreeMap;

use her2_core::render::{PatchLabels, RoiBlock};
use her2_core::{Modality, Result, SlideImage, StainLabel, TumorLabel};

pub const WHITE: [u8; 3] = [255, 255, 255];
/// Saturated purple; classified as tumor by the built-in rule.
pub const TUMOR_HE: [u8; 3] = [200, 40, 120];
/// `(R - B) / 255 = 0.706`, segmented as label 4.
pub const STRONG_BROWN: [u8; 3] = [190, 90, 10];
/// `(R - B) / 255 = 0.51`, segmented as label 3.
pub const WEAK_BROWN: [u8; 3] = [200, 120, 70];
/// `(R - B) / 255 = 0.2`, segmented as label 2.
pub const FAINT_BROWN: [u8; 3] = [210, 180, 159];

/// Grid cells painted in [`planted_pair`].
pub const PLANTED: [(u32, u32); 4] = [(0, 0), (1, 2), (2, 1), (3, 3)];

fn paint(slide: &mut SlideImage, tile: u32, row: u32, col: u32, rgb: [u8; 3]) {
    slide.fill_rect(col * tile, row * tile, (col + 1) * tile, (row + 1) * tile, rgb);
}

/// 4x4-patch H&E / IHC pair on a white background. The [`PLANTED`] cells
/// are tumor-coloured on H&E and strong brown on IHC, so the case scores
/// 3+ with 25 % coverage.
pub fn planted_pair(case_id: &str, tile: u32) -> Result<(SlideImage, SlideImage)> {
    let side = 4 * tile;
    let mut he = SlideImage::filled(case_id, Modality::He, side, side, WHITE)?;
    let mut ihc = SlideImage::filled(case_id, Modality::Ihc, side, side, WHITE)?;
    for (r, c) in PLANTED {
        paint(&mut he, tile, r, c, TUMOR_HE);
        paint(&mut ihc, tile, r, c, STRONG_BROWN);
    }
    Ok((he, ihc))
}

/// `side x side` pair with a repeating mix of tumor / normal and
/// no, faint, weak and strong stain patches. Inside each stained patch a
/// smaller block carries the next stronger colour so histograms are mixed.
pub fn mixed_pair(case_id: &str, side: u32, tile: u32) -> Result<(SlideImage, SlideImage)> {
    let mut he = SlideImage::filled(case_id, Modality::He, side, side, WHITE)?;
    let mut ihc = SlideImage::filled(case_id, Modality::Ihc, side, side, WHITE)?;
    let n = side.div_ceil(tile);
    let stains = [None, Some(FAINT_BROWN), Some(WEAK_BROWN), Some(STRONG_BROWN)];
    for r in 0..n {
        for c in 0..n {
            let k = (r * 7 + c * 3) as usize;
            if !k.is_multiple_of(3) {
                paint(&mut he, tile, r, c, TUMOR_HE);
            }
            if let Some(rgb) = stains[k % 4] {
                paint(&mut ihc, tile, r, c, rgb);
                let inner = stains[(k + 1) % 4].unwrap_or(WHITE);
                let q = tile / 4;
                ihc.fill_rect(c * tile + q, r * tile + q, c * tile + 2 * q, r * tile + 3 * q, inner);
            }
        }
    }
    Ok((he, ihc))
}

/// Per-ROI counts in the tally row order: tumor, normal, then stain
/// categories no / faint / weak / strong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiCounts {
    pub tumor: u64,
    pub normal: u64,
    pub stain: [u64; 4],
}

fn expand(counts: &RoiCounts) -> Vec<PatchLabels> {
    let mut out = Vec::new();
    for (label, n) in [(TumorLabel::Tumor, counts.tumor), (TumorLabel::Normal, counts.normal)] {
        out.extend((0..n).map(|_| PatchLabels { tumor: label, stain: None }));
    }
    let mut slot = out.iter_mut();
    for (label, &n) in StainLabel::ALL.iter().zip(&counts.stain) {
        for _ in 0..n {
            slot.next().expect("more stain labels than patches").stain = Some(*label);
        }
    }
    out
}

/// Ground truth, predictions and the ROI block holding their patch ids.
pub type RoiFixture = (BTreeMap<String, PatchLabels>, BTreeMap<String, PatchLabels>, RoiBlock);

/// Builds per-patch labels whose tallies reproduce the given real and
/// predicted counts. Patch ids are `<roi>/p<k>`. Fails if the two sides
/// disagree on the patch count.
pub fn roi_fixture(
    roi_id: &str,
    real: &RoiCounts,
    predicted: &RoiCounts,
) -> std::result::Result<RoiFixture, String> {
    let r = expand(real);
    let p = expand(predicted);
    if r.len() != p.len() {
        return Err(format!(
            "{roi_id}: {} real patches but {} predicted",
            r.len(),
            p.len()
        ));
    }
    let ids: Vec<String> = (0..r.len()).map(|k| format!("{roi_id}/p{k}")).collect();
    Ok((
        ids.iter().cloned().zip(r).collect(),
        ids.iter().cloned().zip(p).collect(),
        RoiBlock {
            roi_id: roi_id.to_string(),
            patch_ids: ids,
        },
    ))
}
