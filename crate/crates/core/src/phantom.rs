//! Synthetic sphere phantoms, their analytic ground-truth dose, and rigid
//! anatomical shifts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{signed_distance, squared_distance_to, GridShape, MaskGrid, PatientRecord, Roi, RoiRole, ScalarGrid};
use crate::scalar::Scalar;

pub const TARGET_HU: f64 = 100.0;

/// CT label of the `rank`-th OAR (0-based); distinct from target and background.
pub fn oar_hu(rank: usize) -> f64 {
    -40.0 - 20.0 * rank as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    /// Centre in mm, in the grid frame where voxel (0,0,0) is at the origin.
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    fn rasterize(&self, shape: &GridShape) -> MaskGrid {
        let r2 = self.radius * self.radius;
        MaskGrid::from_fn(*shape, |i| {
            let p = shape.position(i);
            (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() <= r2
        })
    }

    fn inside(&self, shape: &GridShape) -> bool {
        let extent = shape.extent();
        (0..3).all(|a| self.center[a] - self.radius >= 0.0 && self.center[a] + self.radius <= extent[a])
    }

    fn shifted(&self, d: [f64; 3]) -> Sphere {
        Sphere {
            center: [self.center[0] + d[0], self.center[1] + d[1], self.center[2] + d[2]],
            radius: self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OarSpec {
    pub name: String,
    pub sphere: Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec<T> {
    pub id: String,
    pub shape: GridShape,
    pub target_name: String,
    pub target: Sphere,
    pub oars: Vec<OarSpec>,
    pub prescription: T,
    /// Gaussian falloff width of the ground-truth dose outside the target (mm).
    pub kernel_width_mm: f64,
    /// Feasible mask = ROI union dilated by this margin (mm).
    pub feasible_margin_mm: f64,
    /// Standard deviation of the seeded CT texture noise (HU).
    pub ct_noise_hu: f64,
    pub rng_seed: u64,
}

impl<T: Scalar> PhantomSpec<T> {
    /// A 16³ head-and-neck-like layout with one target and two OARs.
    pub fn desk_default(id: impl Into<String>, rng_seed: u64) -> Self {
        let shape = GridShape::cubic(16, 3.0).expect("valid default shape");
        PhantomSpec {
            id: id.into(),
            shape,
            target_name: "PTV".into(),
            target: Sphere {
                center: [21.0, 21.0, 21.0],
                radius: 9.0,
            },
            oars: vec![
                OarSpec {
                    name: "Cord".into(),
                    sphere: Sphere {
                        center: [21.0, 36.0, 21.0],
                        radius: 4.5,
                    },
                },
                OarSpec {
                    name: "Parotid".into(),
                    sphere: Sphere {
                        center: [36.0, 21.0, 21.0],
                        radius: 5.0,
                    },
                },
            ],
            prescription: T::of(60.0),
            kernel_width_mm: 7.0,
            feasible_margin_mm: 9.0,
            ct_noise_hu: 5.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.prescription.is_finite() && self.prescription > T::zero()) {
            return Err(Error::config("phantom prescription must be positive"));
        }
        if !(self.kernel_width_mm > 0.0 && self.kernel_width_mm.is_finite()) {
            return Err(Error::config("kernel width must be positive"));
        }
        if !(self.feasible_margin_mm >= 0.0 && self.ct_noise_hu >= 0.0) {
            return Err(Error::config("feasible margin and CT noise must be >= 0"));
        }
        let spheres =
            std::iter::once((&self.target_name, &self.target)).chain(self.oars.iter().map(|o| (&o.name, &o.sphere)));
        let mut names = std::collections::BTreeSet::new();
        for (name, sphere) in spheres {
            if !names.insert(name) {
                return Err(Error::config(format!("duplicate ROI name `{name}`")));
            }
            if !(sphere.radius > 0.0) || !sphere.inside(&self.shape) {
                return Err(Error::config(format!(
                    "sphere `{name}` (centre {:?}, radius {}) does not lie inside the grid",
                    sphere.center, sphere.radius
                )));
            }
        }
        Ok(())
    }

    /// Same layout with every structure translated by `d` mm.
    pub fn shifted(&self, d: [f64; 3]) -> Self {
        let mut out = self.clone();
        out.target = self.target.shifted(d);
        for oar in &mut out.oars {
            oar.sphere = oar.sphere.shifted(d);
        }
        out
    }
}

/// A rigid anatomical shift applied from `fraction_index` onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvent {
    pub fraction_index: usize,
    pub displacement: [f64; 3],
}

pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec<T>) -> Result<PatientRecord<T>> {
    let shape = spec.shape;
    let target = spec.target.rasterize(&shape);
    if target.is_empty() {
        return Err(Error::EmptyRoi(spec.target_name.clone()));
    }
    spec.validate()?;

    let mut rois = BTreeMap::new();
    rois.insert(
        spec.target_name.clone(),
        Roi {
            role: RoiRole::Target,
            mask: target.clone(),
        },
    );
    let mut union = target.clone();
    let mut ct = vec![0.0f64; shape.len()];
    for (rank, oar) in spec.oars.iter().enumerate() {
        let mask = oar.sphere.rasterize(&shape);
        if mask.is_empty() {
            return Err(Error::EmptyRoi(oar.name.clone()));
        }
        for i in mask.indices() {
            ct[i] = oar_hu(rank);
        }
        union = union.union(&mask)?;
        rois.insert(
            oar.name.clone(),
            Roi {
                role: RoiRole::Oar,
                mask,
            },
        );
    }
    for i in target.indices() {
        ct[i] = TARGET_HU;
    }
    if spec.ct_noise_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let noise = Normal::new(0.0, spec.ct_noise_hu).map_err(|e| Error::config(e.to_string()))?;
        for v in ct.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let margin2 = spec.feasible_margin_mm * spec.feasible_margin_mm;
    let dilated = squared_distance_to(&union);
    let feasible = MaskGrid::from_fn(shape, |i| dilated[i] <= margin2);

    let ct = ScalarGrid::new(shape, ct.into_iter().map(T::of).collect())?;
    let mut record = PatientRecord::new(spec.id.clone(), ct, rois, feasible, None, spec.prescription)?;
    record.reference_dose = Some(oracle_dose(&record, spec.kernel_width_mm)?);
    Ok(record)
}

/// Unit-amplitude falloff `exp(-d²/(2w²))` of the signed surface distance,
/// clamped to 1 inside. Shared by the ground-truth dose and the surrogate's
/// falloff features.
pub fn falloff_profile(signed_distance_mm: &[f64], width_mm: f64) -> Vec<f64> {
    signed_distance_mm
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                1.0
            } else {
                (-(d * d) / (2.0 * width_mm * width_mm)).exp()
            }
        })
        .collect()
}

/// Ground-truth dose: prescription inside the target union, Gaussian
/// falloff with the distance to its surface outside, zero outside the
/// feasible mask.
pub fn oracle_dose<T: Scalar>(record: &PatientRecord<T>, kernel_width_mm: f64) -> Result<ScalarGrid<T>> {
    if !(kernel_width_mm > 0.0) {
        return Err(Error::config("kernel width must be positive"));
    }
    let target = record.target_union()?;
    let profile = falloff_profile(&signed_distance(&target), kernel_width_mm);
    ScalarGrid::from_fn(*record.shape(), |i| {
        if record.feasible.contains(i) {
            record.prescription * T::of(profile[i])
        } else {
            T::zero()
        }
    })
}

/// Rigidly translates the anatomy by `event.displacement`, rounded to whole
/// voxels, and regenerates the ground-truth dose.
///
/// The feasible mask moves with the structures (clipped at the grid edge).
/// Vacated CT voxels take the background value 0 HU.
pub fn apply_shift<T: Scalar>(
    record: &PatientRecord<T>,
    event: &ShiftEvent,
    kernel_width_mm: f64,
) -> Result<PatientRecord<T>> {
    let shape = *record.shape();
    let offset = voxel_offset(&shape, event.displacement);
    let out_of_bounds = || {
        Error::config(format!(
            "shift {:?} mm at fraction {} moves structures outside the grid",
            event.displacement, event.fraction_index
        ))
    };
    let mut rois = BTreeMap::new();
    for (name, roi) in &record.rois {
        let mask = roi.mask.translate(offset).ok_or_else(out_of_bounds)?;
        rois.insert(name.clone(), Roi { role: roi.role, mask });
    }
    let feasible = record.feasible.translate_clipped(offset);

    let dims = shape.dims();
    let mut ct = vec![T::zero(); shape.len()];
    for (index, &value) in record.ct.values().iter().enumerate() {
        let (i, j, k) = shape.unflatten(index);
        let moved: Vec<isize> = [i, j, k].iter().zip(offset).map(|(&c, o)| c as isize + o).collect();
        if moved.iter().zip(dims).all(|(&m, n)| m >= 0 && m < n as isize) {
            ct[shape.flatten(moved[0] as usize, moved[1] as usize, moved[2] as usize)] = value;
        }
    }

    let mut shifted = PatientRecord::new(
        format!("{}_fx{}", record.id, event.fraction_index),
        ScalarGrid::new(shape, ct)?,
        rois,
        feasible,
        None,
        record.prescription,
    )?;
    shifted.reference_dose = Some(oracle_dose(&shifted, kernel_width_mm)?);
    Ok(shifted)
}

fn voxel_offset(shape: &GridShape, displacement: [f64; 3]) -> [isize; 3] {
    let mut out = [0isize; 3];
    for a in 0..3 {
        out[a] = (displacement[a] / shape.voxel_dims[a]).round() as isize;
    }
    out
}

/// A cohort of phantoms whose structure centres are jittered uniformly by up
/// to `jitter_mm` per axis around `base`; ids are `<base.id>_<n>`.
pub fn generate_cohort<T: Scalar>(
    base: &PhantomSpec<T>,
    count: usize,
    jitter_mm: f64,
    seed: u64,
) -> Result<Vec<PatientRecord<T>>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|n| {
            let mut d = [0.0; 3];
            if jitter_mm > 0.0 {
                for v in &mut d {
                    *v = rng.random_range(-jitter_mm..=jitter_mm);
                }
            }
            let mut spec = base.shifted(d);
            spec.id = format!("{}_{n:03}", base.id);
            spec.rng_seed = rng.random();
            generate_phantom(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec<f64> {
        PhantomSpec::desk_default("pt", 7)
    }

    #[test]
    fn tiny_target_is_empty_roi() {
        let mut s = spec();
        // Centre on a voxel corner: nearest voxel centre is sqrt(3)/2 voxels away.
        s.target = Sphere {
            center: [19.5, 19.5, 19.5],
            radius: 1.0,
        };
        assert!(matches!(generate_phantom(&s), Err(Error::EmptyRoi(name)) if name == "PTV"));
    }

    #[test]
    fn single_target_no_oars() {
        let mut s = spec();
        s.oars.clear();
        let rec = generate_phantom(&s).unwrap();
        assert_eq!(rec.rois.len(), 1);
        assert_eq!(rec.rois["PTV"].role, RoiRole::Target);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = generate_phantom(&spec()).unwrap();
        let b = generate_phantom(&spec()).unwrap();
        assert_eq!(a, b);
        let mut other = spec();
        other.rng_seed = 8;
        assert_ne!(a.ct, generate_phantom(&other).unwrap().ct);
    }

    #[test]
    fn out_of_grid_sphere_rejected() {
        let mut s = spec();
        s.target.center = [2.0, 21.0, 21.0];
        assert!(matches!(generate_phantom(&s), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn oracle_dose_pointwise_values() {
        let mut s = spec();
        s.oars.clear();
        s.feasible_margin_mm = 40.0;
        let rec = generate_phantom(&s).unwrap();
        let dose = rec.reference().unwrap();
        let shape = rec.shape();
        // Target centre: clamp at prescription.
        assert_eq!(dose.get(7, 7, 7), 60.0);
        // Surface voxel along +x is (10,7,7) (9 mm = 3 voxels from centre);
        // (11,7,7) is one voxel (3 mm) outside it along x. With w = 3 mm this
        // is exactly one kernel width from the surface.
        let rec_w = {
            let mut r = rec.clone();
            r.reference_dose = Some(oracle_dose(&r, 3.0).unwrap());
            r
        };
        let d = rec_w.reference().unwrap().get(11, 7, 7);
        let hand = 60.0 * (-0.5f64).exp();
        assert!((d - hand).abs() < 1e-12, "{d} vs {hand}");
        assert!(rec.rois["PTV"].mask.contains(shape.flatten(10, 7, 7)));
        assert!(!rec.rois["PTV"].mask.contains(shape.flatten(11, 7, 7)));
    }

    #[test]
    fn oracle_dose_zero_outside_feasible_and_bounded() {
        let rec = generate_phantom(&spec()).unwrap();
        let dose = rec.reference().unwrap();
        for (i, &d) in dose.values().iter().enumerate() {
            assert!((0.0..=60.0).contains(&d));
            if !rec.feasible.contains(i) {
                assert_eq!(d, 0.0);
            }
        }
        assert!(rec.feasible.count() < rec.shape().len());
    }

    #[test]
    fn zero_shift_is_identity_except_id() {
        let rec = generate_phantom(&spec()).unwrap();
        let ev = ShiftEvent {
            fraction_index: 10,
            displacement: [0.0; 3],
        };
        let mut shifted = apply_shift(&rec, &ev, spec().kernel_width_mm).unwrap();
        assert_eq!(shifted.id, "pt_fx10");
        shifted.id = rec.id.clone();
        assert_eq!(shifted, rec);
    }

    #[test]
    fn one_voxel_shift_translates_every_roi_voxel() {
        let rec = generate_phantom(&spec()).unwrap();
        let ev = ShiftEvent {
            fraction_index: 2,
            displacement: [3.0, 0.0, 0.0],
        };
        let shifted = apply_shift(&rec, &ev, spec().kernel_width_mm).unwrap();
        let shape = rec.shape();
        for (name, roi) in &rec.rois {
            let brute: Vec<usize> = roi
                .mask
                .indices()
                .map(|i| {
                    let (x, y, z) = shape.unflatten(i);
                    shape.flatten(x + 1, y, z)
                })
                .collect();
            let got: Vec<usize> = shifted.rois[name].mask.indices().collect();
            assert_eq!(got, brute, "ROI {name}");
        }
    }

    #[test]
    fn shift_out_of_grid_fails() {
        let rec = generate_phantom(&spec()).unwrap();
        let ev = ShiftEvent {
            fraction_index: 3,
            displacement: [30.0, 0.0, 0.0],
        };
        assert!(apply_shift(&rec, &ev, 7.0).is_err());
    }

    #[test]
    fn cohort_is_seeded() {
        let a = generate_cohort(&spec(), 3, 3.0, 11).unwrap();
        let b = generate_cohort(&spec(), 3, 3.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].id, "pt_002");
    }
}
