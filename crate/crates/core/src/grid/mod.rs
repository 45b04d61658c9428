//! Voxel grids, ROI masks and the patient record.
//!
//! Linear voxel indices are x-fastest: `index = i + nx * (j + ny * k)`.

mod distance;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use distance::{gaussian_smooth, signed_distance, squared_distance_to, surface_voxels};
pub use io::{
    load_grid, load_patient, read_sparse, read_voxel_dimensions, save_grid, save_patient, write_sparse, LoadOptions,
    CT_FILE, DOSE_FILE, FEASIBLE_FILE, VOXEL_DIMS_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Physical voxel size in mm along x, y, z.
    pub voxel_dims: [f64; 3],
}

impl GridShape {
    pub fn new(nx: usize, ny: usize, nz: usize, voxel_dims: [f64; 3]) -> Result<Self> {
        let shape = GridShape { nx, ny, nz, voxel_dims };
        shape.validate()?;
        Ok(shape)
    }

    pub fn cubic(n: usize, voxel_mm: f64) -> Result<Self> {
        Self::new(n, n, n, [voxel_mm; 3])
    }

    /// OpenKBP benchmark layout.
    pub fn openkbp(voxel_dims: [f64; 3]) -> Result<Self> {
        Self::new(128, 128, 128, voxel_dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidShape(format!(
                "voxel counts must be >= 1, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if self.voxel_dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidShape(format!(
                "voxel dimensions must be positive, got {:?}",
                self.voxel_dims
            )));
        }
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.nz))
            .ok_or_else(|| Error::InvalidShape("voxel count overflows usize".into()))?;
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn unflatten(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.nx;
        let rest = index / self.nx;
        (i, rest % self.ny, rest / self.ny)
    }

    /// Position of a voxel centre in mm; voxel `(0, 0, 0)` sits at the origin.
    pub fn position(&self, index: usize) -> [f64; 3] {
        let (i, j, k) = self.unflatten(index);
        [
            i as f64 * self.voxel_dims[0],
            j as f64 * self.voxel_dims[1],
            k as f64 * self.voxel_dims[2],
        ]
    }

    /// Largest representable centre coordinate along each axis, in mm.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.nx - 1) as f64 * self.voxel_dims[0],
            (self.ny - 1) as f64 * self.voxel_dims[1],
            (self.nz - 1) as f64 * self.voxel_dims[2],
        ]
    }

    /// Voxel volume in cubic centimetres.
    pub fn voxel_volume_cc(&self) -> f64 {
        self.voxel_dims.iter().product::<f64>() / 1000.0
    }

    pub(crate) fn ensure_same(&self, other: &GridShape, context: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{context}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Dense scalar field with one finite value per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid<T> {
    shape: GridShape,
    values: Vec<T>,
}

impl<T: Scalar> ScalarGrid<T> {
    pub fn new(shape: GridShape, values: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid of {} voxels given {} values",
                shape.len(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "scalar grid".into(),
                index,
            });
        }
        Ok(ScalarGrid { shape, values })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: GridShape, value: T) -> Self {
        ScalarGrid {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: GridShape, f: impl FnMut(usize) -> T) -> Result<Self> {
        Self::new(shape, (0..shape.len()).map(f).collect())
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.shape.flatten(i, j, k)]
    }

    /// Applies `f` voxelwise; the result must stay finite.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Checks the dose-grid invariant (elementwise >= 0).
    pub fn ensure_nonnegative(&self) -> Result<()> {
        match self.values.iter().position(|v| *v < T::zero()) {
            Some(index) => Err(Error::NegativeDose {
                index,
                value: self.values[index].as_f64(),
            }),
            None => Ok(()),
        }
    }
}

impl<T> std::ops::Index<usize> for ScalarGrid<T> {
    type Output = T;

    #[inline]
    fn index(&self, index: usize) -> &T {
        &self.values[index]
    }
}

/// Boolean membership per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    shape: GridShape,
    members: Vec<bool>,
}

impl MaskGrid {
    pub fn new(shape: GridShape, members: Vec<bool>) -> Result<Self> {
        shape.validate()?;
        if members.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} voxels given {} flags",
                shape.len(),
                members.len()
            )));
        }
        Ok(MaskGrid { shape, members })
    }

    pub fn empty(shape: GridShape) -> Self {
        MaskGrid {
            shape,
            members: vec![false; shape.len()],
        }
    }

    pub fn full(shape: GridShape) -> Self {
        MaskGrid {
            shape,
            members: vec![true; shape.len()],
        }
    }

    pub fn from_fn(shape: GridShape, f: impl FnMut(usize) -> bool) -> Self {
        MaskGrid {
            shape,
            members: (0..shape.len()).map(f).collect(),
        }
    }

    pub fn from_indices(shape: GridShape, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut members = vec![false; shape.len()];
        for index in indices {
            *members
                .get_mut(index)
                .ok_or_else(|| Error::ShapeMismatch(format!("index {index} outside {} voxels", shape.len())))? = true;
        }
        Ok(MaskGrid { shape, members })
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.members[index]
    }

    #[inline]
    pub fn members(&self) -> &[bool] {
        &self.members
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }

    /// Member voxel indices in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter_map(|(i, &m)| m.then_some(i))
    }

    pub fn union(&self, other: &MaskGrid) -> Result<MaskGrid> {
        self.shape.ensure_same(&other.shape, "mask union")?;
        Ok(MaskGrid {
            shape: self.shape,
            members: self.members.iter().zip(&other.members).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Translates membership by whole voxels; `None` if any member leaves the grid.
    pub fn translate(&self, offset: [isize; 3]) -> Option<MaskGrid> {
        let mut out = MaskGrid::empty(self.shape);
        let dims = self.shape.dims();
        for index in self.indices() {
            let (i, j, k) = self.shape.unflatten(index);
            let mut target = [0usize; 3];
            for (axis, coord) in [i, j, k].into_iter().enumerate() {
                let moved = coord as isize + offset[axis];
                if moved < 0 || moved >= dims[axis] as isize {
                    return None;
                }
                target[axis] = moved as usize;
            }
            out.members[self.shape.flatten(target[0], target[1], target[2])] = true;
        }
        Some(out)
    }

    /// Translates membership by whole voxels, dropping members that leave the grid.
    pub fn translate_clipped(&self, offset: [isize; 3]) -> MaskGrid {
        let mut out = MaskGrid::empty(self.shape);
        let dims = self.shape.dims();
        'voxels: for index in self.indices() {
            let (i, j, k) = self.shape.unflatten(index);
            let mut target = [0usize; 3];
            for (axis, coord) in [i, j, k].into_iter().enumerate() {
                let moved = coord as isize + offset[axis];
                if moved < 0 || moved >= dims[axis] as isize {
                    continue 'voxels;
                }
                target[axis] = moved as usize;
            }
            out.members[self.shape.flatten(target[0], target[1], target[2])] = true;
        }
        out
    }

    pub(crate) fn ensure_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyMask(what.to_string()))
        } else {
            Ok(())
        }
    }
}

/// Voxels where `mask` is set, with their values, in ascending index order.
pub fn masked_region<T: Scalar>(grid: &ScalarGrid<T>, mask: &MaskGrid) -> Result<Vec<(usize, T)>> {
    grid.shape().ensure_same(mask.shape(), "masked_region")?;
    Ok(mask.indices().map(|i| (i, grid[i])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiRole {
    Target,
    Oar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub role: RoiRole,
    pub mask: MaskGrid,
}

/// Harmonized patient data: CT, structures, feasible dose mask, optional
/// reference dose and the target prescription.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord<T> {
    pub id: String,
    pub ct: ScalarGrid<T>,
    pub rois: BTreeMap<String, Roi>,
    pub feasible: MaskGrid,
    pub reference_dose: Option<ScalarGrid<T>>,
    pub prescription: T,
}

impl<T: Scalar> PatientRecord<T> {
    pub fn new(
        id: impl Into<String>,
        ct: ScalarGrid<T>,
        rois: BTreeMap<String, Roi>,
        feasible: MaskGrid,
        reference_dose: Option<ScalarGrid<T>>,
        prescription: T,
    ) -> Result<Self> {
        let record = PatientRecord {
            id: id.into(),
            ct,
            rois,
            feasible,
            reference_dose,
            prescription,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.ct.shape();
        for (name, roi) in &self.rois {
            shape.ensure_same(roi.mask.shape(), &format!("ROI `{name}`"))?;
        }
        shape.ensure_same(self.feasible.shape(), "feasible mask")?;
        self.feasible.ensure_nonempty("feasible dose mask")?;
        if let Some(dose) = &self.reference_dose {
            shape.ensure_same(dose.shape(), "reference dose")?;
            dose.ensure_nonnegative()?;
        }
        if !(self.prescription.is_finite() && self.prescription > T::zero()) {
            return Err(Error::config(format!(
                "prescription must be positive, got {}",
                self.prescription
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> &GridShape {
        self.ct.shape()
    }

    pub fn roi(&self, name: &str) -> Result<&Roi> {
        self.rois.get(name).ok_or_else(|| Error::UnknownRoi(name.to_string()))
    }

    pub fn targets(&self) -> impl Iterator<Item = (&String, &Roi)> {
        self.rois.iter().filter(|(_, r)| r.role == RoiRole::Target)
    }

    pub fn oars(&self) -> impl Iterator<Item = (&String, &Roi)> {
        self.rois.iter().filter(|(_, r)| r.role == RoiRole::Oar)
    }

    /// Union of all target ROIs; errors if the record has none.
    pub fn target_union(&self) -> Result<MaskGrid> {
        let mut union: Option<MaskGrid> = None;
        for (_, roi) in self.targets() {
            union = Some(match union {
                None => roi.mask.clone(),
                Some(u) => u.union(&roi.mask)?,
            });
        }
        union.ok_or_else(|| Error::NoTarget(self.id.clone()))
    }

    pub fn reference(&self) -> Result<&ScalarGrid<T>> {
        self.reference_dose
            .as_ref()
            .ok_or_else(|| Error::MissingReferenceDose(self.id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize) -> GridShape {
        GridShape::cubic(n, 2.0).unwrap()
    }

    #[test]
    fn shape_rejects_degenerate_dims() {
        assert!(GridShape::new(0, 2, 2, [1.0; 3]).is_err());
        assert!(GridShape::new(2, 2, 2, [1.0, 0.0, 1.0]).is_err());
        assert!(GridShape::new(2, 2, 2, [1.0, f64::NAN, 1.0]).is_err());
        assert!(GridShape::new(usize::MAX, 2, 2, [1.0; 3]).is_err());
    }

    #[test]
    fn flatten_is_x_fastest() {
        let s = GridShape::new(3, 4, 5, [1.0; 3]).unwrap();
        assert_eq!(s.flatten(1, 0, 0), 1);
        assert_eq!(s.flatten(0, 1, 0), 3);
        assert_eq!(s.flatten(0, 0, 1), 12);
        assert_eq!(s.unflatten(s.len() - 1), (2, 3, 4));
    }

    #[test]
    fn scalar_grid_rejects_non_finite() {
        let s = shape(2);
        let mut v = vec![0.0f64; 8];
        v[5] = f64::INFINITY;
        assert!(matches!(ScalarGrid::new(s, v), Err(Error::NonFinite { index: 5, .. })));
        assert!(ScalarGrid::new(s, vec![0.0f64; 7]).is_err());
    }

    #[test]
    fn masked_region_identity_and_empty() {
        let s = shape(2);
        let g = ScalarGrid::from_fn(s, |i| i as f64).unwrap();
        let all = masked_region(&g, &MaskGrid::full(s)).unwrap();
        assert_eq!(all, (0..8).map(|i| (i, i as f64)).collect::<Vec<_>>());
        assert!(masked_region(&g, &MaskGrid::empty(s)).unwrap().is_empty());
        assert!(masked_region(&g, &MaskGrid::full(shape(3))).is_err());
    }

    #[test]
    fn translate_moves_members_and_detects_exit() {
        let s = shape(4);
        let m = MaskGrid::from_indices(s, [s.flatten(1, 1, 1)]).unwrap();
        let moved = m.translate([1, 0, 2]).unwrap();
        assert_eq!(moved.indices().collect::<Vec<_>>(), vec![s.flatten(2, 1, 3)]);
        assert!(m.translate([-2, 0, 0]).is_none());
        assert!(m.translate([0, 3, 0]).is_none());
    }

    #[test]
    fn record_requires_nonempty_feasible_mask() {
        let s = shape(2);
        let ct = ScalarGrid::<f64>::zeros(s);
        let err = PatientRecord::new("p", ct, BTreeMap::new(), MaskGrid::empty(s), None, 60.0);
        assert!(matches!(err, Err(Error::EmptyMask(_))));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijective(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in any::<u64>()) {
            let s = GridShape::new(nx, ny, nz, [1.0; 3]).unwrap();
            let idx = (seed as usize) % s.len();
            let (i, j, k) = s.unflatten(idx);
            prop_assert_eq!(s.flatten(i, j, k), idx);
            prop_assert!(i < nx && j < ny && k < nz);
        }

        #[test]
        fn masked_region_matches_filter(values in proptest::collection::vec(-5.0f64..5.0, 64),
                                        flags in proptest::collection::vec(any::<bool>(), 64)) {
            let s = shape(4);
            let g = ScalarGrid::new(s, values.clone()).unwrap();
            let m = MaskGrid::new(s, flags.clone()).unwrap();
            let region = masked_region(&g, &m).unwrap();
            let mut brute = Vec::new();
            for idx in 0..64 {
                if flags[idx] {
                    brute.push((idx, values[idx]));
                }
            }
            prop_assert_eq!(region.len(), m.count());
            prop_assert_eq!(region, brute);
        }
    }
}
