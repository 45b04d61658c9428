//! Sparse CSV patient directories in the OpenKBP layout.
//!
//! Each grid lives in its own file with header `,data` and one row
//! `index,value` per nonzero voxel (0-based linear index). Mask files carry
//! value `1` for membership.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use super::{GridShape, MaskGrid, PatientRecord, Roi, RoiRole, ScalarGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CT_FILE: &str = "ct.csv";
pub const DOSE_FILE: &str = "dose.csv";
pub const FEASIBLE_FILE: &str = "possible_dose_mask.csv";
pub const VOXEL_DIMS_FILE: &str = "voxel_dimensions.csv";

const RESERVED: [&str; 4] = [CT_FILE, DOSE_FILE, FEASIBLE_FILE, VOXEL_DIMS_FILE];

/// How to interpret a patient directory.
#[derive(Clone, Debug)]
pub struct LoadOptions<T> {
    /// ROI names tagged as targets.
    pub target_names: Vec<String>,
    /// ROI names known to be organs-at-risk. Names in neither list are
    /// loaded as OARs with a warning.
    pub oar_names: Vec<String>,
    /// Prescription dose (Gy); not part of the OpenKBP files.
    pub prescription: T,
}

impl<T: Scalar> LoadOptions<T> {
    pub fn new(target_names: impl IntoIterator<Item = impl Into<String>>, prescription: T) -> Self {
        LoadOptions {
            target_names: target_names.into_iter().map(Into::into).collect(),
            oar_names: Vec::new(),
            prescription,
        }
    }

    pub fn with_oars(mut self, oar_names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.oar_names = oar_names.into_iter().map(Into::into).collect();
        self
    }

    fn role_of(&self, name: &str) -> RoiRole {
        if self.target_names.iter().any(|t| t == name) {
            RoiRole::Target
        } else {
            RoiRole::Oar
        }
    }
}

/// Reads the `(index, value)` rows of one sparse file, validating indices.
pub fn read_sparse<T: Scalar>(path: &Path, n_voxels: usize) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if lineno == 0 {
            if line != ",data" {
                return Err(parse_err(1, format!("expected header `,data`, found `{line}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (index_text, value_text) = line
            .split_once(',')
            .ok_or_else(|| parse_err(lineno + 1, format!("expected `index,value`, found `{line}`")))?;
        let index: usize = index_text
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("bad voxel index `{index_text}`")))?;
        let value_text = value_text.trim();
        // OpenKBP mask rows may omit the value.
        let value = if value_text.is_empty() {
            T::one()
        } else {
            value_text
                .parse::<T>()
                .map_err(|_| parse_err(lineno + 1, format!("bad value `{value_text}`")))?
        };
        if index >= n_voxels {
            return Err(Error::IndexOutOfRange {
                path: path.to_path_buf(),
                index,
                len: n_voxels,
            });
        }
        if !seen.insert(index) {
            return Err(Error::DuplicateIndex {
                path: path.to_path_buf(),
                index,
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: path.display().to_string(),
                index,
            });
        }
        rows.push((index, value));
    }
    Ok(rows)
}

/// Writes rows in the given order; callers supply ascending indices.
pub fn write_sparse<T: Scalar>(path: &Path, rows: impl IntoIterator<Item = (usize, T)>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, ",data").map_err(io)?;
    for (index, value) in rows {
        writeln!(w, "{index},{value}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_grid<T: Scalar>(path: &Path, shape: GridShape) -> Result<ScalarGrid<T>> {
    let mut values = vec![T::zero(); shape.len()];
    for (index, value) in read_sparse::<T>(path, shape.len())? {
        values[index] = value;
    }
    ScalarGrid::new(shape, values)
}

fn read_mask(path: &Path, shape: GridShape) -> Result<MaskGrid> {
    let rows = read_sparse::<f64>(path, shape.len())?;
    MaskGrid::from_indices(shape, rows.into_iter().filter(|(_, v)| *v != 0.0).map(|(i, _)| i))
}

fn write_grid<T: Scalar>(path: &Path, grid: &ScalarGrid<T>) -> Result<()> {
    write_sparse(
        path,
        grid.values()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, v)| (i, *v)),
    )
}

fn write_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    write_sparse(path, mask.indices().map(|i| (i, 1.0f64)))
}

pub fn read_voxel_dimensions(path: &Path) -> Result<[f64; 3]> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("bad voxel dimension `{s}`"),
            })
        })
        .collect::<Result<_>>()?;
    match values[..] {
        [x, y, z] if values.iter().all(|v| v.is_finite() && *v > 0.0) => Ok([x, y, z]),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected three positive voxel dimensions, found {values:?}"),
        }),
    }
}

/// Loads a patient directory into dense grids.
///
/// `shape` supplies the voxel counts; `voxel_dimensions.csv`, when present,
/// overrides its spacing. The record id is the directory name.
pub fn load_patient<T: Scalar>(dir: &Path, shape: GridShape, opts: &LoadOptions<T>) -> Result<PatientRecord<T>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut shape = shape;
    let dims_path = dir.join(VOXEL_DIMS_FILE);
    if dims_path.exists() {
        shape.voxel_dims = read_voxel_dimensions(&dims_path)?;
    }
    shape.validate()?;

    let ct = read_grid::<T>(&dir.join(CT_FILE), shape)?;
    let feasible_path = dir.join(FEASIBLE_FILE);
    if !feasible_path.exists() {
        return Err(Error::MissingFile(feasible_path));
    }
    let feasible = read_mask(&feasible_path, shape)?;

    let dose_path = dir.join(DOSE_FILE);
    let reference_dose = if dose_path.exists() {
        let dose = read_grid::<T>(&dose_path, shape)?;
        dose.ensure_nonnegative()?;
        Some(dose)
    } else {
        None
    };

    let mut rois = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut roi_files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| !RESERVED.contains(&n))
        })
        .collect();
    roi_files.sort();
    for path in roi_files {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let role = opts.role_of(&name);
        if role == RoiRole::Oar && !opts.oar_names.contains(&name) {
            warn!(
                "unknown ROI `{name}` in {}; treating it as an organ-at-risk",
                dir.display()
            );
        }
        rois.insert(
            name,
            Roi {
                role,
                mask: read_mask(&path, shape)?,
            },
        );
    }
    for target in &opts.target_names {
        if !rois.contains_key(target) {
            warn!("target ROI `{target}` not present in {}", dir.display());
        }
    }

    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("patient")
        .to_string();
    PatientRecord::new(id, ct, rois, feasible, reference_dose, opts.prescription)
}

/// Writes a record as sparse CSV files; only nonzero / member voxels are
/// emitted, in ascending index order.
pub fn save_patient<T: Scalar>(record: &PatientRecord<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_grid(&dir.join(CT_FILE), &record.ct)?;
    write_mask(&dir.join(FEASIBLE_FILE), &record.feasible)?;
    if let Some(dose) = &record.reference_dose {
        write_grid(&dir.join(DOSE_FILE), dose)?;
    }
    for (name, roi) in &record.rois {
        write_mask(&dir.join(format!("{name}.csv")), &roi.mask)?;
    }
    let dims = record.shape().voxel_dims;
    let path = dir.join(VOXEL_DIMS_FILE);
    fs::write(&path, format!("{}\n{}\n{}\n", dims[0], dims[1], dims[2])).map_err(|e| Error::io(&path, e))
}

/// Writes a single dose-like grid (prediction output).
pub fn save_grid<T: Scalar>(path: &Path, grid: &ScalarGrid<T>) -> Result<()> {
    write_grid(path, grid)
}

pub fn load_grid<T: Scalar>(path: &Path, shape: GridShape) -> Result<ScalarGrid<T>> {
    read_grid(path, shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape2() -> GridShape {
        GridShape::cubic(2, 1.0).unwrap()
    }

    #[test]
    fn single_entry_scatter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ct.csv");
        fs::write(&path, ",data\n0,40.0\n").unwrap();
        let grid = read_grid::<f64>(&path, shape2()).unwrap();
        assert_eq!(grid.values(), &[40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn only_ct_is_missing_feasible_mask() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(CT_FILE), ",data\n0,40.0\n").unwrap();
        let opts = LoadOptions::new(["PTV"], 60.0f64);
        match load_patient(dir.path(), shape2(), &opts) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with(FEASIBLE_FILE)),
            other => panic!("expected missing feasible mask, got {other:?}"),
        }
    }

    #[test]
    fn bad_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, ",data\n8,1\n").unwrap();
        assert!(matches!(
            read_sparse::<f64>(&path, 8),
            Err(Error::IndexOutOfRange { index: 8, .. })
        ));
        fs::write(&path, ",data\n1,1\n1,2\n").unwrap();
        assert!(matches!(
            read_sparse::<f64>(&path, 8),
            Err(Error::DuplicateIndex { index: 1, .. })
        ));
        fs::write(&path, ",data\n1,inf\n").unwrap();
        assert!(matches!(read_sparse::<f64>(&path, 8), Err(Error::NonFinite { .. })));
        fs::write(&path, ",data\n1,NaN\n").unwrap();
        assert!(matches!(read_sparse::<f64>(&path, 8), Err(Error::NonFinite { .. })));
        fs::write(&path, "index,data\n").unwrap();
        assert!(matches!(read_sparse::<f64>(&path, 8), Err(Error::Parse { .. })));
    }

    #[test]
    fn zero_grid_writes_header_only_and_rows_are_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dose.csv");
        save_grid(&path, &ScalarGrid::<f64>::zeros(shape2())).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), ",data\n");

        let mut values = vec![0.0f64; 8];
        values[3] = 2.5;
        values[1] = 7.0;
        save_grid(&path, &ScalarGrid::new(shape2(), values).unwrap()).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), ",data\n1,7\n3,2.5\n");
    }

    #[test]
    fn empty_mask_value_means_member() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, ",data\n2,\n5,1\n").unwrap();
        let m = read_mask(&path, shape2()).unwrap();
        assert_eq!(m.indices().collect::<Vec<_>>(), vec![2, 5]);
    }
}
