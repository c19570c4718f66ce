//! Axis-aligned voxel grids: geometry, scalar volumes with validity, binary masks,
//! trilinear/nearest sampling and resampling.
//!
//! World coordinate of voxel `(i, j, k)` is `origin + (i, j, k) * spacing` (mm). Data is
//! stored x-fastest. Missing data (outside the field of view, NaN in files) is tracked by
//! the `valid` array; invalid voxels hold [`IMPUTE_HU`] so consumers can use the payload
//! directly when they need an imputed image.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// HU of air; the value given to every missing or out-of-grid sample.
pub const IMPUTE_HU: f32 = -1000.0;

/// Continuous indices closer than this to an integer are snapped onto it, so that voxel
/// centres displaced by rounding or sub-micron registration residue still sample
/// exactly one voxel.
const INDEX_SNAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite origin {origin:?}")));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    /// Geometry of `dims` voxels centred on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Geometry::new(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn world(&self, v: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + v[0] as f64 * self.spacing[0],
            self.origin[1] + v[1] as f64 * self.spacing[1],
            self.origin[2] + v[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical size of the grid along each axis (voxel count times spacing).
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// Mean world position of the voxel centres.
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing[a])
    }

    /// Equality up to a tolerance on spacing/origin that absorbs arithmetic rounding.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                let tol = 1e-6 * self.spacing[a].max(1.0);
                (self.spacing[a] - other.spacing[a]).abs() <= tol
                    && (self.origin[a] - other.origin[a]).abs() <= tol
            })
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Grid covering the same physical extent at a new spacing.
    ///
    /// Voxel boundaries at the low end coincide; `dims = ceil(extent / spacing)`.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Geometry> {
        let mut dims = [1usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            if !(spacing[a] > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "output spacing must be positive, got {spacing:?}"
                )));
            }
            let n = (self.extent()[a] / spacing[a] - 1e-9).ceil();
            dims[a] = (n as usize).max(1);
            origin[a] = self.origin[a] - 0.5 * self.spacing[a] + 0.5 * spacing[a];
        }
        Geometry::new(dims, spacing, origin)
    }
}

/// Per-axis interpolation support: the two grid indices bracketing `c` and the weight of
/// the upper one. Points within half a voxel of the outermost centres are clamped onto
/// the grid; anything farther out is outside the field of view.
#[inline]
fn axis_support(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    if !(c >= -0.5 - INDEX_SNAP && c <= n as f64 - 0.5 + INDEX_SNAP) {
        return None;
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let r = c.round();
    if (c - r).abs() < INDEX_SNAP {
        let i = r as usize;
        return Some((i, i, 0.0));
    }
    let i0 = c.floor() as usize;
    Some((i0, i0 + 1, c - i0 as f64))
}

/// Nearest in-grid index along one axis, or `None` outside the physical extent.
#[inline]
fn axis_nearest(c: f64, n: usize) -> Option<usize> {
    if !(c >= -0.5 - INDEX_SNAP && c <= n as f64 - 0.5 + INDEX_SNAP) {
        return None;
    }
    Some((c.round().max(0.0) as usize).min(n - 1))
}

/// A scalar volume (HU, or a unitless derived map) with per-voxel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geom: Geometry,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() || valid.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "payload sizes {} / {} do not match {} voxels",
                data.len(),
                valid.len(),
                geom.len()
            )));
        }
        Ok(Volume { geom, data, valid })
    }

    /// Fully valid volume holding a constant.
    pub fn filled(geom: Geometry, value: f32) -> Self {
        Volume {
            data: vec![value; geom.len()],
            valid: vec![true; geom.len()],
            geom,
        }
    }

    /// Fully valid volume evaluated from the world position of each voxel.
    pub fn from_world_fn(geom: Geometry, f: impl Fn([f64; 3]) -> f32) -> Self {
        let data = (0..geom.len())
            .map(|idx| f(geom.world(geom.coords(idx))))
            .collect();
        Volume {
            data,
            valid: vec![true; geom.len()],
            geom,
        }
    }

    pub fn get(&self, v: [usize; 3]) -> f32 {
        self.data[self.geom.index(v[0], v[1], v[2])]
    }

    pub fn valid_mask(&self) -> Mask {
        Mask {
            geom: self.geom,
            bits: self.valid.clone(),
        }
    }

    /// Copy with every invalid voxel set to [`IMPUTE_HU`].
    pub fn imputed(&self) -> Volume {
        let mut out = self.clone();
        for (d, &v) in out.data.iter_mut().zip(&self.valid) {
            if !v {
                *d = IMPUTE_HU;
            }
        }
        out
    }

    /// Marks voxels outside `mask` invalid (and imputes them).
    pub fn restricted_to(&self, mask: &Mask) -> Result<Volume> {
        self.geom.ensure_matches(&mask.geom, "restrict volume to mask")?;
        let mut out = self.clone();
        for i in 0..out.data.len() {
            if !mask.bits[i] {
                out.valid[i] = false;
                out.data[i] = IMPUTE_HU;
            }
        }
        Ok(out)
    }

    /// Min and max over valid voxels, `None` if nothing is valid.
    pub fn valid_range(&self) -> Option<(f32, f32)> {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .fold(None, |acc, (&d, _)| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }

    /// Trilinear sample at continuous voxel index `c`; `None` when any contributing
    /// corner is invalid or the point is outside the grid's physical extent.
    #[inline]
    pub fn sample_index(&self, c: [f64; 3]) -> Option<f64> {
        let (x0, x1, fx) = axis_support(c[0], self.geom.dims[0])?;
        let (y0, y1, fy) = axis_support(c[1], self.geom.dims[1])?;
        let (z0, z1, fz) = axis_support(c[2], self.geom.dims[2])?;
        let g = &self.geom;
        let mut acc = 0.0;
        for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let idx = g.index(x, y, z);
                    if !self.valid[idx] {
                        return None;
                    }
                    acc += wx * wy * wz * self.data[idx] as f64;
                }
            }
        }
        Some(acc)
    }
}

/// Trilinear interpolation at a world point.
///
/// The sample is valid iff the point lies inside the grid's physical extent and every
/// contributing corner voxel is valid; otherwise the value is [`IMPUTE_HU`].
pub fn trilinear_sample(vol: &Volume, p: [f64; 3]) -> (f32, bool) {
    match vol.sample_index(vol.geom.to_index(p)) {
        Some(v) => (v as f32, true),
        None => (IMPUTE_HU, false),
    }
}

/// A binary volume sharing a [`Geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub geom: Geometry,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(geom: Geometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "mask has {} bits for {} voxels",
                bits.len(),
                geom.len()
            )));
        }
        Ok(Mask { geom, bits })
    }

    pub fn empty(geom: Geometry) -> Self {
        Mask {
            bits: vec![false; geom.len()],
            geom,
        }
    }

    pub fn full(geom: Geometry) -> Self {
        Mask {
            bits: vec![true; geom.len()],
            geom,
        }
    }

    pub fn from_world_fn(geom: Geometry, f: impl Fn([f64; 3]) -> bool) -> Self {
        let bits = (0..geom.len())
            .map(|idx| f(geom.world(geom.coords(idx))))
            .collect();
        Mask { geom, bits }
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        self.bits[self.geom.index(v[0], v[1], v[2])]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.geom.ensure_matches(&other.geom, "mask intersection")?;
        Ok(Mask {
            geom: self.geom,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.geom.ensure_matches(&other.geom, "mask union")?;
        Ok(Mask {
            geom: self.geom,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn not(&self) -> Mask {
        Mask {
            geom: self.geom,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.geom.matches(&other.geom)
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Nearest-neighbour lookup at a world point; false outside the grid.
    #[inline]
    pub fn sample_nearest(&self, p: [f64; 3]) -> bool {
        let c = self.geom.to_index(p);
        match (
            axis_nearest(c[0], self.geom.dims[0]),
            axis_nearest(c[1], self.geom.dims[1]),
            axis_nearest(c[2], self.geom.dims[2]),
        ) {
            (Some(i), Some(j), Some(k)) => self.bits[self.geom.index(i, j, k)],
            _ => false,
        }
    }

    /// Mask as a float volume (1 inside, 0 outside), all voxels valid.
    pub fn to_volume(&self) -> Volume {
        Volume {
            geom: self.geom,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            valid: vec![true; self.geom.len()],
        }
    }

    /// Inverse of [`Mask::to_volume`]: valid voxels above 0.5.
    pub fn from_volume(vol: &Volume) -> Mask {
        Mask {
            geom: vol.geom,
            bits: vol
                .data
                .iter()
                .zip(&vol.valid)
                .map(|(&d, &v)| v && d > 0.5)
                .collect(),
        }
    }
}

/// Sampled 1D Gaussian truncated at `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// In-place 1D convolution along `axis` with zero padding outside the grid.
pub(crate) fn convolve_axis(buf: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let n = dims[axis];
    let r = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let (outer_a, outer_b) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    let mut line = vec![0.0; n];
    for b in 0..outer_b {
        for a in 0..outer_a {
            let base = match axis {
                0 => dims[0] * (a + dims[1] * b),
                1 => a + dims[0] * dims[1] * b,
                _ => a + dims[0] * b,
            };
            for (t, l) in line.iter_mut().enumerate() {
                *l = buf[base + t * stride];
            }
            for t in 0..n {
                let lo = (t as isize - r).max(0);
                let hi = (t as isize + r).min(n as isize - 1);
                let mut acc = 0.0;
                for s in lo..=hi {
                    acc += kernel[(s - t as isize + r) as usize] * line[s as usize];
                }
                buf[base + t * stride] = acc;
            }
        }
    }
}

/// Gaussian smoothing with per-axis sigma (voxels), normalised over the voxels with
/// `weight` true (all voxels when `None`), so missing data and the grid border do not
/// bias the result. Voxels with no weighted neighbour keep their input value.
pub(crate) fn smooth_normalized(
    values: &[f64],
    weight: Option<&[bool]>,
    dims: [usize; 3],
    sigma: [f64; 3],
) -> Vec<f64> {
    let mut num: Vec<f64> = match weight {
        Some(w) => values
            .iter()
            .zip(w)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect(),
        None => values.to_vec(),
    };
    let mut den: Vec<f64> = match weight {
        Some(w) => w.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; values.len()],
    };
    for (axis, &s) in sigma.iter().enumerate() {
        if s > 0.0 && dims[axis] > 1 {
            let k = gaussian_kernel(s);
            convolve_axis(&mut num, dims, axis, &k);
            convolve_axis(&mut den, dims, axis, &k);
        }
    }
    num.iter()
        .zip(&den)
        .zip(values)
        .map(|((&n, &d), &v)| if d > 0.0 { n / d } else { v })
        .collect()
}

/// Trilinear resampling of `vol` onto an arbitrary axis-aligned grid.
pub fn resample_onto(vol: &Volume, geom: &Geometry) -> Volume {
    let mut data = vec![IMPUTE_HU; geom.len()];
    let mut valid = vec![false; geom.len()];
    for idx in 0..geom.len() {
        let (v, ok) = trilinear_sample(vol, geom.world(geom.coords(idx)));
        data[idx] = v;
        valid[idx] = ok;
    }
    Volume {
        geom: *geom,
        data,
        valid,
    }
}

/// `vol` smoothed for sampling at `target_spacing`: a Gaussian of
/// `0.5 * (target / spacing - 1)` voxels per downsampled axis, normalised over valid
/// voxels. Borrowed unchanged when no axis is downsampled.
pub fn presmoothed(vol: &Volume, target_spacing: [f64; 3]) -> Cow<'_, Volume> {
    let sigma = [0, 1, 2].map(|a| 0.5 * (target_spacing[a] / vol.geom.spacing[a] - 1.0).max(0.0));
    if sigma.iter().all(|&s| s == 0.0) {
        return Cow::Borrowed(vol);
    }
    let values: Vec<f64> = vol.data.iter().map(|&d| d as f64).collect();
    let smoothed = smooth_normalized(&values, Some(&vol.valid), vol.geom.dims, sigma);
    Cow::Owned(Volume {
        geom: vol.geom,
        data: smoothed.iter().map(|&d| d as f32).collect(),
        valid: vol.valid.clone(),
    })
}

/// Resample to a new spacing over the same physical extent, pre-smoothing downsampled
/// axes as in [`presmoothed`].
pub fn resample_to_spacing(vol: &Volume, out_spacing: [f64; 3]) -> Result<Volume> {
    let out_geom = vol.geom.with_spacing(out_spacing)?;
    Ok(resample_onto(&presmoothed(vol, out_spacing), &out_geom))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, s: f64) -> Geometry {
        Geometry::new([n, n, n], [s, s, s], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(geom(2, 1.0), vec![0.0; 7], vec![true; 8]).is_err());
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = Volume::filled(geom(5, 1.5), 500.0);
        assert_eq!(trilinear_sample(&v, [2.3, 3.1, 4.9]), (500.0, true));
    }

    #[test]
    fn outside_bounding_box_is_invalid_air() {
        let v = Volume::filled(geom(4, 1.0), 500.0);
        assert_eq!(trilinear_sample(&v, [-0.6, 1.0, 1.0]), (IMPUTE_HU, false));
        assert_eq!(trilinear_sample(&v, [1.0, 1.0, 3.7]), (IMPUTE_HU, false));
    }

    #[test]
    fn midpoint_between_two_slabs() {
        let g = geom(2, 1.0);
        let v = Volume::from_world_fn(g, |p| if p[0] < 0.5 { 0.0 } else { 1000.0 });
        assert_eq!(trilinear_sample(&v, [0.5, 0.3, 0.8]), (500.0, true));
    }

    #[test]
    fn voxel_centres_are_exact_even_next_to_invalid_voxels() {
        let g = Geometry::new([4, 3, 2], [0.7, 1.3, 2.1], [-3.3, 10.1, 0.4]).unwrap();
        let mut v = Volume::from_world_fn(g, |p| (p[0] * 17.0 + p[1] * 3.0 - p[2]) as f32);
        v.valid[g.index(2, 1, 1)] = false;
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let (val, ok) = trilinear_sample(&v, g.world(c));
            assert_eq!(ok, v.valid[idx]);
            if ok {
                assert_eq!(val, v.data[idx]);
            }
        }
    }

    #[test]
    fn invalid_corner_poisons_the_cell() {
        let g = geom(3, 1.0);
        let mut v = Volume::filled(g, 1.0);
        v.valid[g.index(1, 1, 1)] = false;
        assert!(!trilinear_sample(&v, [0.5, 0.5, 0.5]).1);
        assert!(trilinear_sample(&v, [0.5, 0.5, 0.0]).1);
    }

    #[test]
    fn resample_halves_dims() {
        let v = Volume::filled(geom(64, 1.0), 3.0);
        let r = resample_to_spacing(&v, [2.0; 3]).unwrap();
        assert_eq!(r.geom.dims, [32, 32, 32]);
        assert!(r.valid.iter().all(|&b| b));
        assert!(r.data.iter().all(|&d| (d - 3.0).abs() < 1e-5));
    }

    #[test]
    fn resample_identity_spacing() {
        let g = Geometry::new([7, 6, 5], [1.2, 0.8, 2.0], [1.0, -2.0, 3.0]).unwrap();
        let v = Volume::from_world_fn(g, |p| (p[0].sin() * 100.0 + p[1] * p[2]) as f32);
        let r = resample_to_spacing(&v, g.spacing).unwrap();
        assert!(r.geom.matches(&g));
        let (lo, hi) = v.valid_range().unwrap();
        for i in 0..g.len() {
            assert!(r.valid[i]);
            assert!((r.data[i] - v.data[i]).abs() <= 1e-6 * (hi - lo));
        }
    }

    #[test]
    fn ramp_downsample_matches_ramp_at_new_centres() {
        let g = geom(32, 1.0);
        let ramp = |p: [f64; 3]| 10.0 * p[0] + 3.0 * p[1] - 2.0 * p[2];
        let v = Volume::from_world_fn(g, |p| ramp(p) as f32);
        let (lo, hi) = v.valid_range().unwrap();
        let r = resample_to_spacing(&v, [2.0; 3]).unwrap();
        let rg = r.geom;
        for k in 2..rg.dims[2] - 2 {
            for j in 2..rg.dims[1] - 2 {
                for i in 2..rg.dims[0] - 2 {
                    let idx = rg.index(i, j, k);
                    let expect = ramp(rg.world([i, j, k]));
                    assert!((r.data[idx] as f64 - expect).abs() <= 0.02 * (hi - lo) as f64);
                }
            }
        }
    }

    #[test]
    fn smoothing_ignores_invalid_voxels() {
        let g = geom(6, 1.0);
        let mut v = Volume::filled(g, 40.0);
        for k in 0..3 {
            for j in 0..6 {
                for i in 0..6 {
                    let idx = g.index(i, j, k);
                    v.valid[idx] = false;
                    v.data[idx] = IMPUTE_HU;
                }
            }
        }
        let values: Vec<f64> = v.data.iter().map(|&d| d as f64).collect();
        let s = smooth_normalized(&values, Some(&v.valid), g.dims, [1.0; 3]);
        for idx in 0..g.len() {
            if v.valid[idx] {
                assert!((s[idx] - 40.0).abs() < 1e-9);
            }
        }
    }
}
