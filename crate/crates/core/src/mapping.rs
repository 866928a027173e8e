//! Correspondence between H&E and IHC patch coordinates.
//!
//! The mapping works on grid coordinates only. It is declared in the run
//! configuration; nothing here looks at pixel content.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Her2Error, Result};
use crate::slide::{GridSpec, PatchCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Identity,
    AffineGrid,
}

/// Per-axis affine map `round(scale * index + offset)` from the H&E grid to
/// the IHC grid, rounding half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityMapping {
    pub kind: MappingKind,
    pub scale_row: f64,
    pub scale_col: f64,
    pub offset_row: f64,
    pub offset_col: f64,
    pub he_spec: GridSpec,
    pub ihc_spec: GridSpec,
}

impl ModalityMapping {
    pub fn identity(spec: GridSpec) -> Self {
        ModalityMapping {
            kind: MappingKind::Identity,
            scale_row: 1.0,
            scale_col: 1.0,
            offset_row: 0.0,
            offset_col: 0.0,
            he_spec: spec,
            ihc_spec: spec,
        }
    }

    pub fn affine(
        scale: (f64, f64),
        offset: (f64, f64),
        he_spec: GridSpec,
        ihc_spec: GridSpec,
    ) -> Result<Self> {
        let m = ModalityMapping {
            kind: MappingKind::AffineGrid,
            scale_row: scale.0,
            scale_col: scale.1,
            offset_row: offset.0,
            offset_col: offset.1,
            he_spec,
            ihc_spec,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks the structural invariants (not bijectivity).
    pub fn validate(&self) -> Result<()> {
        if self.he_spec.patch_count() != self.ihc_spec.patch_count() {
            return Err(Her2Error::InvalidArgument(format!(
                "H&E grid {}x{} and IHC grid {}x{} differ in size",
                self.he_spec.rows, self.he_spec.cols, self.ihc_spec.rows, self.ihc_spec.cols
            )));
        }
        if self.kind == MappingKind::Identity && self.he_spec != self.ihc_spec {
            return Err(Her2Error::InvalidArgument(
                "identity mapping requires identical H&E and IHC grids".into(),
            ));
        }
        let params = [self.scale_row, self.scale_col, self.offset_row, self.offset_col];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Her2Error::InvalidArgument(
                "mapping parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Parameter-level inverse with the grids swapped. Unlike [`invert`]
    /// this does not check that the map is a bijection.
    pub fn algebraic_inverse(&self) -> Result<ModalityMapping> {
        match self.kind {
            MappingKind::Identity => Ok(ModalityMapping::identity(self.ihc_spec)),
            MappingKind::AffineGrid => {
                if self.scale_row == 0.0 || self.scale_col == 0.0 {
                    return Err(Her2Error::NotInvertible("zero scale".into()));
                }
                Ok(ModalityMapping {
                    kind: MappingKind::AffineGrid,
                    scale_row: 1.0 / self.scale_row,
                    scale_col: 1.0 / self.scale_col,
                    offset_row: -self.offset_row / self.scale_row + 0.0,
                    offset_col: -self.offset_col / self.scale_col + 0.0,
                    he_spec: self.ihc_spec,
                    ihc_spec: self.he_spec,
                })
            }
        }
    }

    fn project(&self, coord: PatchCoord) -> (i64, i64) {
        match self.kind {
            MappingKind::Identity => (coord.row as i64, coord.col as i64),
            MappingKind::AffineGrid => (
                (self.scale_row * coord.row as f64 + self.offset_row).round() as i64,
                (self.scale_col * coord.col as f64 + self.offset_col).round() as i64,
            ),
        }
    }
}

/// Maps one H&E coordinate onto the IHC grid.
pub fn map_coord(coord: PatchCoord, mapping: &ModalityMapping) -> Result<PatchCoord> {
    if !mapping.he_spec.contains(coord) {
        return Err(Her2Error::InvalidArgument(format!(
            "{coord} outside the {}x{} H&E grid",
            mapping.he_spec.rows, mapping.he_spec.cols
        )));
    }
    let (row, col) = mapping.project(coord);
    let ihc = mapping.ihc_spec;
    if row < 0 || col < 0 || row >= ihc.rows as i64 || col >= ihc.cols as i64 {
        return Err(Her2Error::MappingOutOfRange {
            from: coord,
            row,
            col,
            rows: ihc.rows,
            cols: ihc.cols,
        });
    }
    Ok(PatchCoord::new(row as u32, col as u32))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BijectionReport {
    pub injective: bool,
    pub surjective: bool,
    /// IHC coordinates reached by more than one H&E coordinate.
    pub collisions: Vec<PatchCoord>,
    /// IHC coordinates no H&E coordinate reaches.
    pub unreached: Vec<PatchCoord>,
    /// H&E coordinates whose image leaves the IHC grid.
    pub out_of_range: Vec<PatchCoord>,
}

impl BijectionReport {
    pub fn is_bijective(&self) -> bool {
        self.injective && self.surjective
    }
}

/// Enumerates the whole H&E grid and classifies the mapping.
///
/// A coordinate that leaves the IHC grid makes the map partial, which counts
/// against injectivity.
pub fn verify_bijection(mapping: &ModalityMapping) -> BijectionReport {
    let ihc = mapping.ihc_spec;
    let mut hits = vec![0u32; ihc.patch_count()];
    let mut out_of_range = Vec::new();
    for coord in mapping.he_spec.coords() {
        match map_coord(coord, mapping) {
            Ok(target) => hits[ihc.index_of(target)] += 1,
            Err(_) => out_of_range.push(coord),
        }
    }
    let collisions: Vec<_> = hits
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 1)
        .map(|(i, _)| ihc.coord_at(i))
        .collect();
    let unreached: Vec<_> = hits
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == 0)
        .map(|(i, _)| ihc.coord_at(i))
        .collect();
    BijectionReport {
        injective: collisions.is_empty() && out_of_range.is_empty(),
        surjective: unreached.is_empty(),
        collisions,
        unreached,
        out_of_range,
    }
}

/// Algebraic inverse, checked pointwise over the whole grid.
pub fn invert(mapping: &ModalityMapping) -> Result<ModalityMapping> {
    let report = verify_bijection(mapping);
    if !report.is_bijective() {
        return Err(Her2Error::NotInvertible(format!(
            "{} collisions, {} unreached, {} out of range",
            report.collisions.len(),
            report.unreached.len(),
            report.out_of_range.len()
        )));
    }
    let inverse = mapping.algebraic_inverse()?;
    for coord in mapping.he_spec.coords() {
        let there = map_coord(coord, mapping)?;
        let back = map_coord(there, &inverse).ok();
        if back != Some(coord) {
            return Err(Her2Error::NotInvertible(format!(
                "rounded inverse sends {there} to {back:?}, expected {coord}"
            )));
        }
    }
    Ok(inverse)
}

/// For each IHC coordinate (row-major), the H&E coordinate that maps onto it.
pub fn ihc_to_he_table(mapping: &ModalityMapping) -> Result<Vec<PatchCoord>> {
    let report = verify_bijection(mapping);
    if !report.is_bijective() {
        return Err(Her2Error::NotInvertible(format!(
            "{} collisions, {} unreached, {} out of range",
            report.collisions.len(),
            report.unreached.len(),
            report.out_of_range.len()
        )));
    }
    let ihc = mapping.ihc_spec;
    let mut table = vec![PatchCoord::new(0, 0); ihc.patch_count()];
    for he in mapping.he_spec.coords() {
        let target = map_coord(he, mapping)?;
        table[ihc.index_of(target)] = he;
    }
    Ok(table)
}

/// Distinct images of the H&E grid; handy for callers comparing against
/// the IHC codomain.
pub fn image_set(mapping: &ModalityMapping) -> BTreeSet<PatchCoord> {
    mapping
        .he_spec
        .coords()
        .filter_map(|c| map_coord(c, mapping).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: u32, cols: u32) -> GridSpec {
        GridSpec {
            tile_size_px: 512,
            cols,
            rows,
        }
    }

    #[test]
    fn identity_is_unchanged() {
        let m = ModalityMapping::identity(grid(6, 6));
        assert_eq!(
            map_coord(PatchCoord::new(3, 5), &m).unwrap(),
            PatchCoord::new(3, 5)
        );
        assert!(verify_bijection(&m).is_bijective());
        assert_eq!(invert(&m).unwrap(), m);
    }

    #[test]
    fn shifted_map_and_out_of_range() {
        let m = ModalityMapping::affine((1.0, 1.0), (1.0, 0.0), grid(4, 4), grid(4, 4)).unwrap();
        assert_eq!(
            map_coord(PatchCoord::new(0, 2), &m).unwrap(),
            PatchCoord::new(1, 2)
        );
        assert!(matches!(
            map_coord(PatchCoord::new(3, 2), &m),
            Err(Her2Error::MappingOutOfRange { row: 4, col: 2, .. })
        ));
        let report = verify_bijection(&m);
        assert!(!report.injective);
        assert_eq!(report.out_of_range.len(), 4);
        assert!(matches!(invert(&m), Err(Her2Error::NotInvertible(_))));
    }

    #[test]
    fn zero_scale_collapses() {
        let m = ModalityMapping::affine((0.0, 0.0), (0.0, 0.0), grid(2, 2), grid(2, 2)).unwrap();
        let report = verify_bijection(&m);
        assert_eq!(report.collisions, vec![PatchCoord::new(0, 0)]);
        assert_eq!(report.unreached.len(), 3);
        assert!(!report.injective && !report.surjective);
    }

    #[test]
    fn inverse_of_flip() {
        let m = ModalityMapping::affine((-1.0, 1.0), (5.0, 0.0), grid(6, 6), grid(6, 6)).unwrap();
        let inv = invert(&m).unwrap();
        for c in m.he_spec.coords() {
            assert_eq!(map_coord(map_coord(c, &m).unwrap(), &inv).unwrap(), c);
        }
    }

    #[test]
    fn inverse_offset_negates() {
        let m = ModalityMapping::affine((1.0, 1.0), (1.0, 0.0), grid(4, 4), grid(4, 4)).unwrap();
        let inv = m.algebraic_inverse().unwrap();
        assert_eq!((inv.offset_row, inv.offset_col), (-1.0, 0.0));
        assert_eq!((inv.scale_row, inv.scale_col), (1.0, 1.0));
        // on equal grids the shift leaves the grid, so the checked inverse refuses it
        assert!(matches!(invert(&m), Err(Her2Error::NotInvertible(_))));
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let m = ModalityMapping::affine((1.0, 1.0), (0.5, -0.5), grid(3, 3), grid(3, 3)).unwrap();
        // row: 0 + 0.5 -> 1; col: 1 - 0.5 = 0.5 -> 1
        assert_eq!(
            map_coord(PatchCoord::new(0, 1), &m).unwrap(),
            PatchCoord::new(1, 1)
        );
    }

    #[test]
    fn mismatched_cardinality_rejected() {
        assert!(ModalityMapping::affine((1.0, 1.0), (0.0, 0.0), grid(2, 3), grid(2, 2)).is_err());
        let bad = ModalityMapping {
            ihc_spec: grid(3, 2),
            ..ModalityMapping::identity(grid(2, 3))
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_follows_inverse() {
        let m = ModalityMapping::affine((-1.0, -1.0), (1.0, 2.0), grid(2, 3), grid(2, 3)).unwrap();
        let table = ihc_to_he_table(&m).unwrap();
        for (i, he) in table.iter().enumerate() {
            assert_eq!(map_coord(*he, &m).unwrap(), m.ihc_spec.coord_at(i));
        }
    }
}
