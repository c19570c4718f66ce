//! Dense displacement fields (mm, pull-back convention): warping, composition,
//! conversion from affines, and log-Jacobian morphometry.
//!
//! A field `u` on grid G maps output voxel `x` to the input sample position
//! `world(x) + u(x)`. Composition follows the same convention: applying `outer` to an
//! image already warped by `inner` equals warping the original by `compose(outer, inner)`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::nifti;
use crate::transform::AffineTransform;
use crate::volume::{Geometry, Mask, Volume, IMPUTE_HU};

/// Value written for non-positive Jacobian determinants before taking the log.
pub const FOLDING_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub geom: Geometry,
    pub vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(geom: Geometry) -> Self {
        DisplacementField {
            vectors: vec![[0.0; 3]; geom.len()],
            geom,
        }
    }

    pub fn constant(geom: Geometry, v: [f64; 3]) -> Self {
        DisplacementField {
            vectors: vec![v; geom.len()],
            geom,
        }
    }

    pub fn from_world_fn(geom: Geometry, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        let vectors = (0..geom.len())
            .into_par_iter()
            .map(|idx| f(geom.world(geom.coords(idx))))
            .collect();
        DisplacementField { geom, vectors }
    }

    /// Trilinear sample at a world point. Points outside the grid take the value at the
    /// nearest in-grid position.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let g = &self.geom;
        let c = g.to_index(p);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let x = c[a].clamp(0.0, (g.dims[a] - 1) as f64);
            let i0 = (x.floor() as usize).min(g.dims[a] - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(g.dims[a] - 1);
            f[a] = x - i0 as f64;
        }
        let mut out = [0.0; 3];
        for (z, wz) in [(lo[2], 1.0 - f[2]), (hi[2], f[2])] {
            for (y, wy) in [(lo[1], 1.0 - f[1]), (hi[1], f[1])] {
                for (x, wx) in [(lo[0], 1.0 - f[0]), (hi[0], f[0])] {
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        let v = self.vectors[g.index(x, y, z)];
                        out[0] += w * v[0];
                        out[1] += w * v[1];
                        out[2] += w * v[2];
                    }
                }
            }
        }
        out
    }

    /// The field re-sampled on another grid (trilinear, clamped at the border).
    pub fn resample_onto(&self, geom: &Geometry) -> DisplacementField {
        if geom.matches(&self.geom) {
            return self.clone();
        }
        DisplacementField::from_world_fn(*geom, |p| self.sample(p))
    }

    pub fn magnitude(&self, idx: usize) -> f64 {
        let v = self.vectors[idx];
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    /// Mean displacement magnitude over `mask` (whole grid when `None`).
    pub fn mean_magnitude(&self, mask: Option<&Mask>) -> f64 {
        let (sum, n) = (0..self.vectors.len())
            .filter(|&i| mask.is_none_or(|m| m.bits[i]))
            .fold((0.0, 0usize), |(s, n), i| (s + self.magnitude(i), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.vectors.len())
            .map(|i| self.magnitude(i))
            .fold(0.0, f64::max)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        nifti::write_vector_field(&self.geom, &self.vectors, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (geom, vectors) = nifti::read_vector_field(path)?;
        Ok(DisplacementField { geom, vectors })
    }
}

#[inline]
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Resamples `vol` onto the field's grid: `out(x) = vol(world(x) + u(x))` with the
/// trilinear validity rule.
pub fn warp(vol: &Volume, field: &DisplacementField) -> Volume {
    let g = field.geom;
    let samples: Vec<(f32, bool)> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let p = add(g.world(g.coords(idx)), field.vectors[idx]);
            match vol.sample_index(vol.geom.to_index(p)) {
                Some(v) => (v as f32, true),
                None => (IMPUTE_HU, false),
            }
        })
        .collect();
    Volume {
        geom: g,
        data: samples.iter().map(|s| s.0).collect(),
        valid: samples.iter().map(|s| s.1).collect(),
    }
}

/// Nearest-neighbour warp of a mask; samples outside the source grid are false.
pub fn warp_mask(mask: &Mask, field: &DisplacementField) -> Mask {
    let g = field.geom;
    let bits = (0..g.len())
        .into_par_iter()
        .map(|idx| mask.sample_nearest(add(g.world(g.coords(idx)), field.vectors[idx])))
        .collect();
    Mask { geom: g, bits }
}

/// Pull-back composition on `outer`'s grid:
/// `u(x) = u_outer(x) + u_inner(x + u_outer(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> DisplacementField {
    let g = outer.geom;
    let vectors = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let u = outer.vectors[idx];
            add(u, inner.sample(add(g.world(g.coords(idx)), u)))
        })
        .collect();
    DisplacementField { geom: g, vectors }
}

/// Exact composition with an affine applied after the field:
/// `u(x) = t(x + u_outer(x)) - x`.
pub fn compose_with_affine(outer: &DisplacementField, t: &AffineTransform) -> DisplacementField {
    let g = outer.geom;
    let vectors = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let x = g.world(g.coords(idx));
            let y = t.apply(add(x, outer.vectors[idx]));
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
        .collect();
    DisplacementField { geom: g, vectors }
}

/// `u(x) = t(world(x)) - world(x)` on `geom`.
pub fn affine_to_field(t: &AffineTransform, geom: &Geometry) -> DisplacementField {
    DisplacementField::from_world_fn(*geom, |x| {
        let y = t.apply(x);
        [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
    })
}

/// Folding statistics from [`log_jacobian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JacobianReport {
    pub folded: usize,
    pub voxels: usize,
}

impl JacobianReport {
    pub fn folding_fraction(&self) -> f64 {
        if self.voxels == 0 {
            0.0
        } else {
            self.folded as f64 / self.voxels as f64
        }
    }
}

/// Determinant of `d(x + u)/dx` per voxel; central differences in mm, one-sided at
/// the grid border, zero derivative along singleton axes.
pub fn jacobian_determinants(field: &DisplacementField) -> Vec<f64> {
    let g = field.geom;
    (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let v = g.coords(idx);
            let mut jac = [[0.0; 3]; 3];
            for b in 0..3 {
                let n = g.dims[b];
                let deriv = if n == 1 {
                    [0.0; 3]
                } else {
                    let (lo, hi) = if v[b] == 0 {
                        (0, 1)
                    } else if v[b] == n - 1 {
                        (n - 2, n - 1)
                    } else {
                        (v[b] - 1, v[b] + 1)
                    };
                    let mut vl = v;
                    vl[b] = lo;
                    let mut vh = v;
                    vh[b] = hi;
                    let ul = field.vectors[g.index(vl[0], vl[1], vl[2])];
                    let uh = field.vectors[g.index(vh[0], vh[1], vh[2])];
                    let h = (hi - lo) as f64 * g.spacing[b];
                    [(uh[0] - ul[0]) / h, (uh[1] - ul[1]) / h, (uh[2] - ul[2]) / h]
                };
                for a in 0..3 {
                    jac[a][b] = deriv[a];
                }
            }
            for (a, row) in jac.iter_mut().enumerate() {
                row[a] += 1.0;
            }
            det3(&jac)
        })
        .collect()
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `ln det(grad(x + u))` per voxel at full precision. Non-positive determinants are
/// floored at [`FOLDING_FLOOR`] and counted in the report.
pub fn log_jacobian_values(field: &DisplacementField) -> (Vec<f64>, JacobianReport) {
    let dets = jacobian_determinants(field);
    let folded = dets.iter().filter(|&&d| !(d > 0.0)).count();
    let values = dets
        .iter()
        .map(|&d| if d > 0.0 { d.ln() } else { FOLDING_FLOOR.ln() })
        .collect();
    (
        values,
        JacobianReport {
            folded,
            voxels: dets.len(),
        },
    )
}

/// Log-Jacobian map as a volume on the field's grid (see [`log_jacobian_values`]).
pub fn log_jacobian(field: &DisplacementField) -> (Volume, JacobianReport) {
    let (values, report) = log_jacobian_values(field);
    (
        Volume {
            geom: field.geom,
            data: values.iter().map(|&v| v as f32).collect(),
            valid: vec![true; field.geom.len()],
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn geom() -> Geometry {
        Geometry::new([10, 9, 8], [1.5, 1.0, 2.0], [-5.0, 3.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_field_is_identity_warp() {
        let g = geom();
        let v = Volume::from_world_fn(g, |p| (p[0] * p[1] - p[2]) as f32);
        assert_eq!(warp(&v, &DisplacementField::zeros(g)), v);
    }

    #[test]
    fn one_voxel_shift_has_invalid_inflow_slab() {
        let g = geom();
        let v = Volume::from_world_fn(g, |p| p[0] as f32);
        let w = warp(&v, &DisplacementField::constant(g, [1.5, 0.0, 0.0]));
        for idx in 0..g.len() {
            let c = g.coords(idx);
            if c[0] == 9 {
                assert!(!w.valid[idx]);
                assert_eq!(w.data[idx], IMPUTE_HU);
            } else {
                assert!(w.valid[idx]);
                assert_eq!(w.data[idx], v.data[g.index(c[0] + 1, c[1], c[2])]);
            }
        }
    }

    #[test]
    fn compose_identity_and_translations() {
        let g = geom();
        let f = DisplacementField::from_world_fn(g, |p| [0.1 * p[1], -0.2 * p[0], 0.05 * p[2]]);
        let z = DisplacementField::zeros(g);
        assert_eq!(compose(&z, &f), f);
        assert_eq!(compose(&f, &z), f);
        let a = DisplacementField::constant(g, [1.0, 2.0, -3.0]);
        let b = DisplacementField::constant(g, [0.5, -0.25, 4.0]);
        assert!(compose(&a, &b).vectors.iter().all(|v| *v == [1.5, 1.75, 1.0]));
    }

    #[test]
    fn affine_field_matches_pointwise_matrix_math() {
        let g = geom();
        assert!(affine_to_field(&AffineTransform::identity(), &g)
            .vectors
            .iter()
            .all(|v| *v == [0.0; 3]));
        let tau = [3.0, -1.0, 0.5];
        let tr = affine_to_field(&AffineTransform::translation(tau), &g);
        assert!(tr.vectors.iter().all(|v| (0..3).all(|a| (v[a] - tau[a]).abs() < 1e-12)));
        let lin = Matrix3::new(1.02, 0.03, -0.01, -0.02, 0.99, 0.04, 0.01, 0.0, 1.05);
        let t = AffineTransform::from_linear_translation(lin, Vector3::new(2.0, -3.0, 1.0)).unwrap();
        let f = affine_to_field(&t, &g);
        for idx in 0..g.len() {
            let x = g.world(g.coords(idx));
            let xv = Vector3::new(x[0], x[1], x[2]);
            let y = lin * xv + Vector3::new(2.0, -3.0, 1.0) - xv;
            for a in 0..3 {
                assert!((f.vectors[idx][a] - y[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scaling_log_jacobian() {
        let g = Geometry::centered([12, 12, 12], [2.0; 3]).unwrap();
        let s = 1.1;
        let f = DisplacementField::from_world_fn(g, |p| p.map(|x| (s - 1.0) * x));
        let (lj, rep) = log_jacobian(&f);
        assert_eq!(rep.folded, 0);
        for v in &lj.data {
            assert!(((*v as f64) - 3.0 * s.ln()).abs() < 1e-6);
        }
        let (vals, _) = log_jacobian_values(&f);
        assert!(vals.iter().all(|v| (v - 3.0 * s.ln()).abs() < 1e-9));
    }

    #[test]
    fn folding_is_floored_and_counted() {
        let g = Geometry::centered([6, 6, 6], [1.0; 3]).unwrap();
        let f = DisplacementField::from_world_fn(g, |p| [-2.0 * p[0], 0.0, 0.0]);
        let (lj, rep) = log_jacobian(&f);
        assert_eq!(rep.folded, g.len());
        assert!(lj.data.iter().all(|&v| v == FOLDING_FLOOR.ln() as f32));
        assert_eq!(rep.folding_fraction(), 1.0);
    }

    #[test]
    fn warp_stays_within_input_range() {
        let g = geom();
        let v = Volume::from_world_fn(g, |p| ((p[0] * 0.7).sin() * 300.0 + p[2] * 10.0) as f32);
        let f = DisplacementField::from_world_fn(g, |p| [(p[1] * 0.3).cos() * 2.0, 0.7, -(p[0] * 0.2).sin()]);
        let w = warp(&v, &f);
        let (lo, hi) = v.valid_range().unwrap();
        for (d, ok) in w.data.iter().zip(&w.valid) {
            if *ok {
                assert!(*d >= lo - 1e-3 && *d <= hi + 1e-3);
            }
        }
    }
}
