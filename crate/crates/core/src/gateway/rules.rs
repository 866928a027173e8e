//! Deterministic colour-rule stand-ins for the three models.
//!
//! These are fixtures for tests and demos, not trained models. The external
//! reference sidecar implements the same rules, so outputs must stay
//! bit-identical to what is documented here.
//!
//! Stain (per pixel, RGB8):
//! * near-white (min channel > 230) or not `R > G > B` → label 0
//! * otherwise `b = clamp((R - B) / 255, 0, 1)` and
//!   `b < 0.05` → 1, `b < 0.35` → 2, `b < 0.65` → 3, else 4
//!
//! Tumor (per patch): mean HSV saturation over non-white pixels
//! `>= 0.25` → Tumor, otherwise Normal. A patch with no non-white pixel is
//! Normal.

use super::{LabelMap, StainLabel, StainPrediction, TumorLabel, TumorPrediction};

pub const WHITE_MIN_CHANNEL: u8 = 230;
pub const TUMOR_SATURATION_THRESHOLD: f64 = 0.25;
pub const STAIN_BANDS: [f64; 3] = [0.05, 0.35, 0.65];
/// Mass given to each losing class in one-hot-with-epsilon outputs.
pub const EPSILON: f64 = 0.01;

#[inline]
fn is_white(r: u8, g: u8, b: u8) -> bool {
    r.min(g).min(b) > WHITE_MIN_CHANNEL
}

#[inline]
pub fn stain_label(r: u8, g: u8, b: u8) -> u8 {
    if is_white(r, g, b) || !(r > g && g > b) {
        return 0;
    }
    let brown = ((r as f64 - b as f64) / 255.0).clamp(0.0, 1.0);
    if brown < STAIN_BANDS[0] {
        1
    } else if brown < STAIN_BANDS[1] {
        2
    } else if brown < STAIN_BANDS[2] {
        3
    } else {
        4
    }
}

pub fn segment(pixels: &[u8], width_px: u32, height_px: u32) -> LabelMap {
    let labels = pixels
        .chunks_exact(3)
        .map(|p| stain_label(p[0], p[1], p[2]))
        .collect();
    LabelMap::new(width_px, height_px, labels).expect("rule labels are in range")
}

#[inline]
fn saturation(r: u8, g: u8, b: u8) -> f64 {
    let max = r.max(g).max(b);
    if max == 0 {
        return 0.0;
    }
    let min = r.min(g).min(b);
    (max - min) as f64 / max as f64
}

pub fn mean_saturation(pixels: &[u8]) -> f64 {
    let (sum, n) = pixels
        .chunks_exact(3)
        .filter(|p| !is_white(p[0], p[1], p[2]))
        .fold((0.0, 0usize), |(s, n), p| (s + saturation(p[0], p[1], p[2]), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn classify_tumor(pixels: &[u8]) -> TumorPrediction {
    let label = if mean_saturation(pixels) >= TUMOR_SATURATION_THRESHOLD {
        TumorLabel::Tumor
    } else {
        TumorLabel::Normal
    };
    TumorPrediction::one_hot(label, EPSILON)
}

/// Dominant stain label over `{1..4}`, ties toward the stronger category.
/// `None` when the map holds only background.
pub fn dominant_stain(counts: &[u64; 5]) -> Option<StainLabel> {
    let mut best: Option<(u64, usize)> = None;
    for (k, &n) in counts.iter().enumerate().skip(1) {
        if n > 0 && best.is_none_or(|(m, _)| n >= m) {
            best = Some((n, k));
        }
    }
    best.map(|(_, k)| StainLabel::from_map_label(k as u8).expect("label in 1..=4"))
}

pub fn classify_stain(labels: &LabelMap) -> StainPrediction {
    let label = dominant_stain(&labels.counts()).unwrap_or(StainLabel::NoStain);
    StainPrediction::one_hot(label, EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_non_brown_are_background() {
        assert_eq!(stain_label(255, 255, 255), 0);
        assert_eq!(stain_label(231, 240, 250), 0);
        assert_eq!(stain_label(180, 60, 200), 0); // purple: B > G
        assert_eq!(stain_label(100, 100, 50), 0); // R == G
    }

    #[test]
    fn brownness_bands() {
        // (R - B) = 10 -> 0.039
        assert_eq!(stain_label(200, 195, 190), 1);
        // 12 -> 0.047, 13 -> 0.051
        assert_eq!(stain_label(200, 195, 188), 1);
        assert_eq!(stain_label(200, 195, 187), 2);
        // 89 -> 0.349, 90 -> 0.353
        assert_eq!(stain_label(189, 150, 100), 2);
        assert_eq!(stain_label(190, 150, 100), 3);
        // 165 -> 0.647, 166 -> 0.651
        assert_eq!(stain_label(185, 100, 20), 3);
        assert_eq!(stain_label(186, 100, 20), 4);
    }

    #[test]
    fn dark_brown_reference_colour() {
        // (101 - 33) / 255 = 0.2667 falls in the second band
        assert_eq!(stain_label(101, 67, 33), 2);
    }

    #[test]
    fn saturation_of_reference_colours() {
        assert_eq!(mean_saturation(&[255, 255, 255]), 0.0);
        let purple = mean_saturation(&[180, 60, 200]);
        assert!((purple - 0.7).abs() < 1e-12);
    }

    #[test]
    fn ties_go_high() {
        assert_eq!(dominant_stain(&[0, 0, 0, 5, 5]), Some(StainLabel::Strong));
        assert_eq!(dominant_stain(&[9, 0, 0, 0, 0]), None);
        assert_eq!(dominant_stain(&[0, 3, 1, 0, 0]), Some(StainLabel::NoStain));
    }
}
