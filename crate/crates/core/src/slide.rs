//! Slide rasters and the fixed-size patch grid laid over them.
//!
//! A slide of `W x H` pixels tiled with square patches of side `f` yields a
//! grid of `ceil(H/f)` rows by `ceil(W/f)` columns. Patches on the last row
//! or column are padded to the full `f x f` with opaque white; the pad
//! extents are kept on the patch so that [`implode`] can crop them away and
//! reproduce the slide byte for byte.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};

/// Fill value for padded patch regions.
pub const PAD_RGB: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "IHC")]
    Ihc,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::He => "HE",
            Modality::Ihc => "IHC",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A flat single-modality RGB8 raster.
#[derive(Clone, PartialEq)]
pub struct SlideImage {
    pub case_id: String,
    pub region_id: Option<String>,
    pub modality: Modality,
    width_px: u32,
    height_px: u32,
    pixels: Vec<u8>,
    /// Carried as metadata; tiling is purely pixel based.
    pub microns_per_px: Option<f64>,
}

impl fmt::Debug for SlideImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlideImage")
            .field("case_id", &self.case_id)
            .field("region_id", &self.region_id)
            .field("modality", &self.modality)
            .field("width_px", &self.width_px)
            .field("height_px", &self.height_px)
            .finish_non_exhaustive()
    }
}

impl SlideImage {
    pub fn new(
        case_id: impl Into<String>,
        modality: Modality,
        width_px: u32,
        height_px: u32,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Her2Error::InvalidArgument(format!(
                "slide dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        let expected = width_px as usize * height_px as usize * 3;
        if pixels.len() != expected {
            return Err(Her2Error::InvalidArgument(format!(
                "slide raster has {} bytes, expected {expected} for {width_px}x{height_px} RGB8",
                pixels.len()
            )));
        }
        Ok(SlideImage {
            case_id: case_id.into(),
            region_id: None,
            modality,
            width_px,
            height_px,
            pixels,
            microns_per_px: None,
        })
    }

    /// A slide filled with a single color.
    pub fn filled(
        case_id: impl Into<String>,
        modality: Modality,
        width_px: u32,
        height_px: u32,
        rgb: [u8; 3],
    ) -> Result<Self> {
        let n = width_px as usize * height_px as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(case_id, modality, width_px, height_px, pixels)
    }

    pub fn from_rgb_image(
        case_id: impl Into<String>,
        modality: Modality,
        image: RgbImage,
    ) -> Result<Self> {
        let (w, h) = image.dimensions();
        Self::new(case_id, modality, w, h, image.into_raw())
    }

    /// Reads a flat PNG or TIFF raster. Alpha and 16-bit channels are
    /// converted to RGB8.
    pub fn load(path: &Path, case_id: impl Into<String>, modality: Modality) -> Result<Self> {
        let reader = image::ImageReader::open(path).map_err(|e| Her2Error::io(path, e))?;
        let reader = reader
            .with_guessed_format()
            .map_err(|e| Her2Error::io(path, e))?;
        let decoded = reader.decode().map_err(|source| Her2Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_rgb_image(case_id, modality, decoded.into_rgb8())
    }

    /// Width and height of a raster file without decoding its pixels.
    pub fn read_dimensions(path: &Path) -> Result<(u32, u32)> {
        image::ImageReader::open(path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| Her2Error::io(path, e))?
            .into_dimensions()
            .map_err(|source| Her2Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn width_px(&self) -> u32 {
        self.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.height_px
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width_px, self.height_px, self.pixels.clone())
            .expect("raster length checked at construction")
    }

    /// Paints the axis-aligned rectangle `[x0, x1) x [y0, y1)`, clipped to the slide.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [u8; 3]) {
        let x1 = x1.min(self.width_px);
        let y1 = y1.min(self.height_px);
        for y in y0..y1 {
            let row = y as usize * self.width_px as usize;
            for x in x0..x1 {
                let i = (row + x as usize) * 3;
                self.pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }

    pub fn identity(&self) -> SlideIdentity {
        SlideIdentity {
            case_id: self.case_id.clone(),
            region_id: self.region_id.clone(),
            modality: self.modality,
            width_px: self.width_px,
            height_px: self.height_px,
            microns_per_px: self.microns_per_px,
        }
    }
}

/// Everything about a slide except its pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideIdentity {
    pub case_id: String,
    pub region_id: Option<String>,
    pub modality: Modality,
    pub width_px: u32,
    pub height_px: u32,
    pub microns_per_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub tile_size_px: u32,
    pub cols: u32,
    pub rows: u32,
}

impl GridSpec {
    pub fn patch_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn contains(&self, coord: PatchCoord) -> bool {
        coord.row < self.rows && coord.col < self.cols
    }

    /// All coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = PatchCoord> + '_ {
        let cols = self.cols;
        (0..self.rows).flat_map(move |row| (0..cols).map(move |col| PatchCoord { row, col }))
    }

    pub fn index_of(&self, coord: PatchCoord) -> usize {
        coord.row as usize * self.cols as usize + coord.col as usize
    }

    pub fn coord_at(&self, index: usize) -> PatchCoord {
        PatchCoord {
            row: (index / self.cols as usize) as u32,
            col: (index % self.cols as usize) as u32,
        }
    }

    fn matches(&self, width_px: u32, height_px: u32) -> bool {
        self.cols == width_px.div_ceil(self.tile_size_px)
            && self.rows == height_px.div_ceil(self.tile_size_px)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub row: u32,
    pub col: u32,
}

impl PatchCoord {
    pub fn new(row: u32, col: u32) -> Self {
        PatchCoord { row, col }
    }
}

impl fmt::Display for PatchCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}_c{}", self.row, self.col)
    }
}

#[derive(Clone, PartialEq)]
pub struct Patch {
    pub coord: PatchCoord,
    pub modality: Modality,
    tile_size_px: u32,
    pixels: Vec<u8>,
    pub pad_right_px: u32,
    pub pad_bottom_px: u32,
}

impl fmt::Debug for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Patch")
            .field("coord", &self.coord)
            .field("modality", &self.modality)
            .field("tile_size_px", &self.tile_size_px)
            .field("pad_right_px", &self.pad_right_px)
            .field("pad_bottom_px", &self.pad_bottom_px)
            .finish_non_exhaustive()
    }
}

impl Patch {
    pub fn new(
        coord: PatchCoord,
        modality: Modality,
        tile_size_px: u32,
        pixels: Vec<u8>,
        pad_right_px: u32,
        pad_bottom_px: u32,
    ) -> Result<Self> {
        let f = tile_size_px as usize;
        if tile_size_px == 0 || pixels.len() != f * f * 3 {
            return Err(Her2Error::InvalidArgument(format!(
                "patch {coord} raster has {} bytes, expected {} for a {tile_size_px}px tile",
                pixels.len(),
                f * f * 3
            )));
        }
        if pad_right_px >= tile_size_px || pad_bottom_px >= tile_size_px {
            return Err(Her2Error::InvalidArgument(format!(
                "patch {coord} padding ({pad_right_px}, {pad_bottom_px}) leaves no content in a {tile_size_px}px tile"
            )));
        }
        Ok(Patch {
            coord,
            modality,
            tile_size_px,
            pixels,
            pad_right_px,
            pad_bottom_px,
        })
    }

    /// A patch with uniform content, used by tests and demos.
    pub fn filled(coord: PatchCoord, modality: Modality, tile_size_px: u32, rgb: [u8; 3]) -> Self {
        let n = tile_size_px as usize * tile_size_px as usize;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        Patch::new(coord, modality, tile_size_px, pixels, 0, 0).expect("uniform patch is valid")
    }

    pub fn tile_size_px(&self) -> u32 {
        self.tile_size_px
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Width of the region that came from the slide.
    pub fn content_width(&self) -> u32 {
        self.tile_size_px - self.pad_right_px
    }

    pub fn content_height(&self) -> u32 {
        self.tile_size_px - self.pad_bottom_px
    }

    pub fn is_padding(&self, x: u32, y: u32) -> bool {
        x >= self.content_width() || y >= self.content_height()
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.tile_size_px, self.tile_size_px, self.pixels.clone())
            .expect("patch raster length checked at construction")
    }

    /// Same coordinate and padding with replacement pixels.
    pub fn with_pixels(&self, pixels: Vec<u8>) -> Result<Patch> {
        Patch::new(
            self.coord,
            self.modality,
            self.tile_size_px,
            pixels,
            self.pad_right_px,
            self.pad_bottom_px,
        )
    }
}

/// Ceiling-division grid for a `width_px x height_px` slide.
pub fn compute_grid_spec(width_px: u32, height_px: u32, tile_size_px: u32) -> Result<GridSpec> {
    if width_px == 0 || height_px == 0 || tile_size_px == 0 {
        return Err(Her2Error::InvalidArgument(format!(
            "grid arguments must be positive, got width={width_px} height={height_px} tile={tile_size_px}"
        )));
    }
    Ok(GridSpec {
        tile_size_px,
        cols: width_px.div_ceil(tile_size_px),
        rows: height_px.div_ceil(tile_size_px),
    })
}

fn check_spec(slide: &SlideImage, spec: &GridSpec) -> Result<()> {
    if spec.tile_size_px == 0 || !spec.matches(slide.width_px, slide.height_px) {
        return Err(Her2Error::InvalidArgument(format!(
            "grid {}x{} @ {}px does not tile a {}x{} slide",
            spec.rows, spec.cols, spec.tile_size_px, slide.width_px, slide.height_px
        )));
    }
    Ok(())
}

/// Cuts the single patch at `coord`.
pub fn extract_patch(slide: &SlideImage, spec: &GridSpec, coord: PatchCoord) -> Result<Patch> {
    check_spec(slide, spec)?;
    if !spec.contains(coord) {
        return Err(Her2Error::InvalidArgument(format!(
            "patch {coord} outside {}x{} grid",
            spec.rows, spec.cols
        )));
    }
    Ok(cut(slide, spec.tile_size_px, coord))
}

fn cut(slide: &SlideImage, f: u32, coord: PatchCoord) -> Patch {
    let x0 = coord.col * f;
    let y0 = coord.row * f;
    let w = f.min(slide.width_px - x0);
    let h = f.min(slide.height_px - y0);
    let tile_stride = f as usize * 3;
    let slide_stride = slide.width_px as usize * 3;

    let mut pixels = vec![255u8; tile_stride * f as usize];
    for dy in 0..h as usize {
        let src = (y0 as usize + dy) * slide_stride + x0 as usize * 3;
        let dst = dy * tile_stride;
        pixels[dst..dst + w as usize * 3].copy_from_slice(&slide.pixels[src..src + w as usize * 3]);
    }
    Patch {
        coord,
        modality: slide.modality,
        tile_size_px: f,
        pixels,
        pad_right_px: f - w,
        pad_bottom_px: f - h,
    }
}

/// A (possibly incomplete) set of patches laid on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    spec: GridSpec,
    source: SlideIdentity,
    patches: Vec<Option<Patch>>,
}

impl PatchGrid {
    /// Assembles a grid from loose patches. Duplicate or out-of-bounds
    /// coordinates are rejected; missing ones are reported by [`implode`].
    pub fn from_parts(
        spec: GridSpec,
        source: SlideIdentity,
        patches: impl IntoIterator<Item = Patch>,
    ) -> Result<Self> {
        if !spec.matches(source.width_px, source.height_px) {
            return Err(Her2Error::InvalidArgument(format!(
                "grid {}x{} @ {}px does not tile a {}x{} slide",
                spec.rows, spec.cols, spec.tile_size_px, source.width_px, source.height_px
            )));
        }
        let mut slots: Vec<Option<Patch>> = vec![None; spec.patch_count()];
        for patch in patches {
            if !spec.contains(patch.coord) {
                return Err(Her2Error::InvalidArgument(format!(
                    "patch {} outside {}x{} grid",
                    patch.coord, spec.rows, spec.cols
                )));
            }
            if patch.tile_size_px != spec.tile_size_px {
                return Err(Her2Error::InvalidArgument(format!(
                    "patch {} is {}px, grid uses {}px tiles",
                    patch.coord, patch.tile_size_px, spec.tile_size_px
                )));
            }
            let slot = &mut slots[spec.index_of(patch.coord)];
            if slot.is_some() {
                return Err(Her2Error::InvalidArgument(format!(
                    "duplicate patch {}",
                    patch.coord
                )));
            }
            *slot = Some(patch);
        }
        Ok(PatchGrid {
            spec,
            source,
            patches: slots,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn source(&self) -> &SlideIdentity {
        &self.source
    }

    pub fn get(&self, coord: PatchCoord) -> Option<&Patch> {
        if !self.spec.contains(coord) {
            return None;
        }
        self.patches[self.spec.index_of(coord)].as_ref()
    }

    /// Present patches in row-major order.
    pub fn patches(&self) -> impl Iterator<Item = &Patch> {
        self.patches.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.patches.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_missing(&self) -> Option<PatchCoord> {
        self.patches
            .iter()
            .position(Option::is_none)
            .map(|i| self.spec.coord_at(i))
    }

    pub fn remove(&mut self, coord: PatchCoord) -> Option<Patch> {
        if !self.spec.contains(coord) {
            return None;
        }
        let i = self.spec.index_of(coord);
        self.patches[i].take()
    }

    /// Applies `f` to every present patch, in parallel, keeping grid layout.
    pub fn try_map<F>(&self, f: F) -> Result<PatchGrid>
    where
        F: Fn(&Patch) -> Result<Patch> + Sync + Send,
    {
        let patches = self
            .patches
            .par_iter()
            .map(|slot| slot.as_ref().map(&f).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchGrid {
            spec: self.spec,
            source: self.source.clone(),
            patches,
        })
    }
}

/// Tiles `slide` into the full grid described by `spec`.
pub fn extract_patches(slide: &SlideImage, spec: &GridSpec) -> Result<PatchGrid> {
    check_spec(slide, spec)?;
    let patches = (0..spec.patch_count())
        .into_par_iter()
        .map(|i| Some(cut(slide, spec.tile_size_px, spec.coord_at(i))))
        .collect();
    Ok(PatchGrid {
        spec: *spec,
        source: slide.identity(),
        patches,
    })
}

/// Reassembles a complete grid into a slide, cropping edge padding.
pub fn implode(grid: &PatchGrid) -> Result<SlideImage> {
    if let Some(missing) = grid.first_missing() {
        return Err(Her2Error::IncompleteGrid(missing));
    }
    let src = &grid.source;
    let f = grid.spec.tile_size_px as usize;
    let stride = src.width_px as usize * 3;
    let mut pixels = vec![0u8; stride * src.height_px as usize];
    for patch in grid.patches() {
        let x0 = patch.coord.col as usize * f;
        let y0 = patch.coord.row as usize * f;
        let w = patch.content_width() as usize;
        let h = patch.content_height() as usize;
        for dy in 0..h {
            let dst = (y0 + dy) * stride + x0 * 3;
            let s = dy * f * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&patch.pixels[s..s + w * 3]);
        }
    }
    let mut slide = SlideImage::new(
        src.case_id.clone(),
        src.modality,
        src.width_px,
        src.height_px,
        pixels,
    )?;
    slide.region_id = src.region_id.clone();
    slide.microns_per_px = src.microns_per_px;
    Ok(slide)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub coord: PatchCoord,
    pub file: String,
    pub pad_right_px: u32,
    pub pad_bottom_px: u32,
}

/// On-disk index of a spilled patch directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub case_id: String,
    pub modality: Modality,
    pub width_px: u32,
    pub height_px: u32,
    pub tile_size_px: u32,
    pub rows: u32,
    pub cols: u32,
    pub patches: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Directory holding the patches of one slide: `<root>/<case_id>/<modality>`.
pub fn patch_dir(root: &Path, case_id: &str, modality: Modality) -> PathBuf {
    root.join(case_id).join(modality.as_str())
}

/// Writes every patch as `r<row>_c<col>.png` plus `manifest.json`.
/// File names in the manifest are relative to the manifest's directory.
pub fn write_patch_dir(grid: &PatchGrid, root: &Path) -> Result<PathBuf> {
    let src = &grid.source;
    let dir = patch_dir(root, &src.case_id, src.modality);
    fs::create_dir_all(&dir).map_err(|e| Her2Error::io(&dir, e))?;

    let entries = grid
        .patches
        .par_iter()
        .flatten()
        .map(|patch| {
            let file = format!("{}.png", patch.coord);
            let path = dir.join(&file);
            patch
                .to_rgb_image()
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| Her2Error::Image {
                    path: path.clone(),
                    source,
                })?;
            Ok(ManifestEntry {
                coord: patch.coord,
                file,
                pad_right_px: patch.pad_right_px,
                pad_bottom_px: patch.pad_bottom_px,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = GridManifest {
        case_id: src.case_id.clone(),
        modality: src.modality,
        width_px: src.width_px,
        height_px: src.height_px,
        tile_size_px: grid.spec.tile_size_px,
        rows: grid.spec.rows,
        cols: grid.spec.cols,
        patches: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|source| Her2Error::Json {
        context: "serializing grid manifest".into(),
        source,
    })?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Her2Error::io(&path, e))?;
    Ok(path)
}

/// Loads a grid previously written by [`write_patch_dir`]. Patches listed in
/// the manifest but absent on disk are an error; patches absent from the
/// manifest leave holes in the grid.
pub fn read_patch_dir(manifest_path: &Path) -> Result<PatchGrid> {
    let bytes = fs::read(manifest_path).map_err(|e| Her2Error::io(manifest_path, e))?;
    let manifest: GridManifest =
        serde_json::from_slice(&bytes).map_err(|source| Her2Error::Json {
            context: manifest_path.display().to_string(),
            source,
        })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let spec = GridSpec {
        tile_size_px: manifest.tile_size_px,
        cols: manifest.cols,
        rows: manifest.rows,
    };
    let patches = manifest
        .patches
        .par_iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let img = image::open(&path)
                .map_err(|source| Her2Error::Image {
                    path: path.clone(),
                    source,
                })?
                .into_rgb8();
            if img.width() != spec.tile_size_px || img.height() != spec.tile_size_px {
                return Err(Her2Error::InvalidArgument(format!(
                    "{} is {}x{}, expected {}px tiles",
                    path.display(),
                    img.width(),
                    img.height(),
                    spec.tile_size_px
                )));
            }
            Patch::new(
                entry.coord,
                manifest.modality,
                spec.tile_size_px,
                img.into_raw(),
                entry.pad_right_px,
                entry.pad_bottom_px,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let source = SlideIdentity {
        case_id: manifest.case_id,
        region_id: None,
        modality: manifest.modality,
        width_px: manifest.width_px,
        height_px: manifest.height_px,
        microns_per_px: None,
    };
    PatchGrid::from_parts(spec, source, patches)
}
