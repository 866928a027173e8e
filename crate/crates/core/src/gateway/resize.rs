use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use super::LabelMap;

/// Bilinear resize of a square RGB8 raster.
pub fn resize_rgb(pixels: &[u8], from_px: u32, to_px: u32) -> Vec<u8> {
    let src = RgbImage::from_raw(from_px, from_px, pixels.to_vec())
        .expect("square RGB raster of the stated size");
    imageops::resize(&src, to_px, to_px, FilterType::Triangle).into_raw()
}

/// Nearest-neighbour resize; never invents label values.
pub fn resize_labels(map: &LabelMap, width_px: u32, height_px: u32) -> LabelMap {
    let src = GrayImage::from_raw(map.width_px(), map.height_px(), map.labels().to_vec())
        .expect("label raster of the stated size");
    let out = imageops::resize(&src, width_px, height_px, FilterType::Nearest);
    LabelMap::new(width_px, height_px, out.into_raw()).expect("nearest keeps the label domain")
}
