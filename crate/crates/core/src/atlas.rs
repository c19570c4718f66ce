//! Mean and variance atlases under missing data.
//!
//! Each projected scan contributes only inside its effective region (the part of the
//! standard ROI its deformed field of view covers), so the per-voxel mean is taken over
//! exactly the scans that observe that voxel.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{warp_mask, DisplacementField};
use crate::volume::{Geometry, Mask, Volume};

/// The reference region every atlas is defined on: valid reference voxels inside the
/// reference body.
pub fn standard_roi(reference: &Volume, reference_body: &Mask) -> Result<Mask> {
    reference.valid_mask().and(reference_body)
}

/// Deformed field of view of a moving scan (nearest neighbour) intersected with `roi`.
pub fn effective_region(moving_valid: &Mask, field: &DisplacementField, roi: &Mask) -> Result<Mask> {
    field.geom.ensure_matches(&roi.geom, "standard ROI")?;
    warp_mask(moving_valid, field).and(roi)
}

/// Per-voxel running sums for one map type.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasAccumulator {
    pub geom: Geometry,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
    pub count: Vec<u32>,
}

/// Finalised atlas maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasMaps {
    pub mean: Volume,
    pub variance: Volume,
    pub count: Volume,
}

impl AtlasAccumulator {
    pub fn new(geom: Geometry) -> AtlasAccumulator {
        let n = geom.len();
        AtlasAccumulator {
            geom,
            sum: vec![0.0; n],
            sumsq: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds `map` at every voxel of `region` where the map itself is valid.
    pub fn accumulate(&mut self, map: &Volume, region: &Mask) -> Result<()> {
        self.geom.ensure_matches(&map.geom, "atlas map")?;
        self.geom.ensure_matches(&region.geom, "effective region")?;
        for i in 0..self.sum.len() {
            if region.bits[i] && map.valid[i] {
                let v = map.data[i] as f64;
                self.sum[i] += v;
                self.sumsq[i] += v * v;
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    /// Componentwise sum of two partial accumulators.
    pub fn merge(&mut self, other: &AtlasAccumulator) -> Result<()> {
        self.geom.ensure_matches(&other.geom, "merged accumulator")?;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sumsq[i] += other.sumsq[i];
            self.count[i] += other.count[i];
        }
        Ok(())
    }

    /// Mean where at least one scan contributes; sample variance (n - 1) where at least
    /// two do, clamped at zero. Other voxels are invalid. The count map is always valid.
    pub fn finalize(&self) -> AtlasMaps {
        let n = self.sum.len();
        let mut mean = Volume::filled(self.geom, 0.0);
        let mut variance = Volume::filled(self.geom, 0.0);
        mean.valid = vec![false; n];
        variance.valid = vec![false; n];
        for i in 0..n {
            let c = self.count[i] as f64;
            if self.count[i] >= 1 {
                mean.data[i] = (self.sum[i] / c) as f32;
                mean.valid[i] = true;
            }
            if self.count[i] >= 2 {
                let var = (self.sumsq[i] - self.sum[i] * self.sum[i] / c) / (c - 1.0);
                variance.data[i] = var.max(0.0) as f32;
                variance.valid[i] = true;
            }
        }
        AtlasMaps {
            mean,
            variance,
            count: Volume {
                geom: self.geom,
                data: self.count.iter().map(|&c| c as f32).collect(),
                valid: vec![true; n],
            },
        }
    }
}

/// `a - b` where both are valid.
pub fn atlas_diff(a: &Volume, b: &Volume) -> Result<Volume> {
    a.geom.ensure_matches(&b.geom, "atlas difference operands")?;
    let valid: Vec<bool> = a.valid.iter().zip(&b.valid).map(|(&x, &y)| x && y).collect();
    let data = (0..a.data.len())
        .map(|i| if valid[i] { a.data[i] - b.data[i] } else { crate::volume::IMPUTE_HU })
        .collect();
    Ok(Volume { geom: a.geom, data, valid })
}

/// Mean of the valid voxels of `v` inside `mask`, if any.
pub fn masked_mean(v: &Volume, mask: &Mask) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..v.data.len() {
        if mask.bits[i] && v.valid[i] {
            s += v.data[i] as f64;
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Provenance stored next to an atlas bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasSidecar {
    pub cohort_size: usize,
    pub filter: String,
    pub scans: Vec<String>,
    pub failures: Vec<FailureRecord>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub scan_id: String,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn g() -> Geometry {
        Geometry::centered([3, 1, 1], [1.0; 3]).unwrap()
    }

    fn vol(v: [f32; 3]) -> Volume {
        Volume::new(g(), v.to_vec(), vec![true; 3]).unwrap()
    }

    #[test]
    fn mean_and_variance_examples() {
        let mut acc = AtlasAccumulator::new(g());
        let full = Mask::full(g());
        let first = Mask::new(g(), vec![true, true, false]).unwrap();
        acc.accumulate(&vol([-800.0, 1.0, 5.0]), &full).unwrap();
        acc.accumulate(&vol([-600.0, 2.0, 7.0]), &first).unwrap();
        acc.accumulate(&vol([0.0, 3.0, 9.0]), &Mask::new(g(), vec![false, true, false]).unwrap())
            .unwrap();
        let m = acc.finalize();
        assert_eq!(m.mean.data[0], -700.0);
        assert_eq!(m.mean.data[1], 2.0);
        assert_eq!(m.variance.data[1], 1.0);
        assert_eq!(m.mean.data[2], 5.0);
        assert!(!m.variance.valid[2]);
        assert_eq!(m.count.data, vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn empty_voxels_are_invalid_and_repeats_have_zero_variance() {
        let mut acc = AtlasAccumulator::new(g());
        let m = Mask::new(g(), vec![true, true, false]).unwrap();
        for _ in 0..5 {
            acc.accumulate(&vol([0.1, -3.3, 2.0]), &m).unwrap();
        }
        let out = acc.finalize();
        assert_eq!(out.variance.data[..2], [0.0, 0.0]);
        assert!(!out.mean.valid[2] && !out.variance.valid[2]);
    }

    #[test]
    fn diff_validity() {
        let mut b = vol([1.0, 2.0, 3.0]);
        b.valid[1] = false;
        let d = atlas_diff(&vol([1.0, 5.0, 4.0]), &b).unwrap();
        assert_eq!(d.valid, vec![true, false, true]);
        assert_eq!((d.data[0], d.data[2]), (0.0, 1.0));
        let other = Volume::filled(Geometry::centered([2, 1, 1], [1.0; 3]).unwrap(), 0.0);
        assert!(matches!(atlas_diff(&b, &other), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn region_examples() {
        let g = Geometry::centered([6, 4, 4], [1.0; 3]).unwrap();
        let roi = Mask::from_world_fn(g, |p| p[1] > -1.0);
        let zero = DisplacementField::zeros(g);
        assert_eq!(effective_region(&Mask::full(g), &zero, &roi).unwrap(), roi);
        assert!(effective_region(&Mask::empty(g), &zero, &roi).unwrap().is_empty());
        // Moving FOV is x > 0; pulling back through +1 mm shifts it to x > -1.
        let half = Mask::from_world_fn(g, |p| p[0] > 0.0);
        let shifted = effective_region(&half, &DisplacementField::constant(g, [1.0, 0.0, 0.0]), &roi).unwrap();
        let expect = Mask::from_world_fn(g, |p| p[0] + 1.0 > 0.0 && p[0] + 1.0 < 3.0 && p[1] > -1.0);
        assert_eq!(shifted, expect);
    }
}
