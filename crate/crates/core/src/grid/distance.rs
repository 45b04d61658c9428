//! Exact Euclidean distance transforms and separable Gaussian smoothing on
//! anisotropic voxel grids. Geometry is computed in `f64` (mm).

use super::{GridShape, MaskGrid};

/// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher).
/// `f` holds squared distances (or `INFINITY` for no seed); `h` is spacing.
fn edt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let h2 = h * h;
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((fq + h2 * qf * qf) - (f[p] + h2 * pf * pf)) / (2.0 * h2 * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = h2 * d * d + f[v[k]];
    }
}

fn transform_axis(values: &mut [f64], shape: &GridShape, axis: usize) {
    let dims = shape.dims();
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let h = shape.voxel_dims[axis];
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let (mut v, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for start in 0..values.len() {
        let (i, j, k) = shape.unflatten(start);
        let coord = [i, j, k][axis];
        if coord != 0 {
            continue;
        }
        for (q, slot) in line.iter_mut().enumerate() {
            *slot = values[start + q * stride];
        }
        edt_line(&line, h, &mut out, &mut v, &mut z);
        for (q, &d) in out.iter().enumerate() {
            values[start + q * stride] = d;
        }
    }
}

/// Squared physical distance (mm²) from every voxel centre to the nearest
/// member of `seeds`; `INFINITY` everywhere when `seeds` is empty.
pub fn squared_distance_to(seeds: &MaskGrid) -> Vec<f64> {
    let shape = *seeds.shape();
    let mut values: Vec<f64> = seeds
        .members()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        transform_axis(&mut values, &shape, axis);
    }
    values
}

/// Members with at least one 6-neighbour outside the mask (grid exterior
/// counts as outside).
pub fn surface_voxels(mask: &MaskGrid) -> MaskGrid {
    let shape = *mask.shape();
    let dims = shape.dims();
    MaskGrid::from_fn(shape, |index| {
        if !mask.contains(index) {
            return false;
        }
        let (i, j, k) = shape.unflatten(index);
        let c = [i, j, k];
        for axis in 0..3 {
            if c[axis] == 0 || c[axis] + 1 == dims[axis] {
                return true;
            }
            let mut lo = c;
            let mut hi = c;
            lo[axis] -= 1;
            hi[axis] += 1;
            if !mask.contains(shape.flatten(lo[0], lo[1], lo[2])) || !mask.contains(shape.flatten(hi[0], hi[1], hi[2]))
            {
                return true;
            }
        }
        false
    })
}

/// Signed distance (mm) to the ROI surface: negative inside, zero on the
/// surface voxels, positive outside. Empty masks give `INFINITY`.
///
/// The nearest member of a mask to any exterior voxel is always a surface
/// voxel, so one transform of the surface set serves both signs.
pub fn signed_distance(mask: &MaskGrid) -> Vec<f64> {
    let surface = surface_voxels(mask);
    squared_distance_to(&surface)
        .into_iter()
        .enumerate()
        .map(|(i, d2)| {
            if surface.contains(i) {
                0.0
            } else if mask.contains(i) {
                -d2.sqrt()
            } else {
                d2.sqrt()
            }
        })
        .collect()
}

fn gaussian_kernel(sigma_mm: f64, spacing: f64) -> Vec<f64> {
    let s = sigma_mm / spacing;
    let radius = (3.0 * s).ceil().max(1.0) as isize;
    (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * s * s)).exp())
        .collect()
}

/// Separable Gaussian smoothing with standard deviation `sigma_mm`.
/// Kernel weights falling outside the grid are dropped and the remainder
/// renormalized, so constant fields are preserved exactly up to rounding.
pub fn gaussian_smooth(values: &[f64], shape: &GridShape, sigma_mm: f64) -> Vec<f64> {
    assert_eq!(values.len(), shape.len());
    let mut current = values.to_vec();
    let dims = shape.dims();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm, shape.voxel_dims[axis]);
        let radius = (kernel.len() / 2) as isize;
        let n = dims[axis] as isize;
        let mut next = vec![0.0; current.len()];
        for (index, slot) in next.iter_mut().enumerate() {
            let (i, j, k) = shape.unflatten(index);
            let c = [i, j, k];
            let centre = c[axis] as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (offset, w) in kernel.iter().enumerate() {
                let q = centre + offset as isize - radius;
                if q < 0 || q >= n {
                    continue;
                }
                let mut p = c;
                p[axis] = q as usize;
                acc += w * current[shape.flatten(p[0], p[1], p[2])];
                wsum += w;
            }
            *slot = acc / wsum;
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_squared(seeds: &MaskGrid) -> Vec<f64> {
        let shape = seeds.shape();
        (0..shape.len())
            .map(|q| {
                let pq = shape.position(q);
                seeds
                    .indices()
                    .map(|p| {
                        let pp = shape.position(p);
                        (0..3).map(|a| (pq[a] - pp[a]).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force_on_anisotropic_grid() {
        let shape = GridShape::new(7, 5, 6, [1.5, 2.0, 2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mask = MaskGrid::from_fn(shape, |_| rng.random_bool(0.08));
            let fast = squared_distance_to(&mask);
            let slow = brute_squared(&mask);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_infinite() {
                    assert!(a.is_infinite());
                } else {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_infinitely_far() {
        let shape = GridShape::cubic(3, 1.0).unwrap();
        assert!(squared_distance_to(&MaskGrid::empty(shape))
            .iter()
            .all(|d| d.is_infinite()));
    }

    #[test]
    fn smoothing_preserves_constants() {
        let shape = GridShape::new(6, 4, 5, [2.0, 2.0, 3.0]).unwrap();
        let out = gaussian_smooth(&vec![3.5; shape.len()], &shape, 4.0);
        assert!(out.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn surface_of_solid_block() {
        let shape = GridShape::cubic(5, 1.0).unwrap();
        let mask = MaskGrid::from_fn(shape, |i| {
            let (x, y, z) = shape.unflatten(i);
            (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z)
        });
        let surface = surface_voxels(&mask);
        assert_eq!(surface.count(), 26);
        assert!(!surface.contains(shape.flatten(2, 2, 2)));
        let sd = signed_distance(&mask);
        assert_eq!(sd[shape.flatten(2, 2, 2)], -1.0);
        assert_eq!(sd[shape.flatten(1, 2, 2)], 0.0);
        assert_eq!(sd[shape.flatten(0, 2, 2)], 1.0);
    }
}
