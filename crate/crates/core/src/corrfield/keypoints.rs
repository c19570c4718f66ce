use std::collections::HashSet;

use super::{xyz, KeypointSet};
use crate::volume::Mask;

/// Regular keypoint grid with spacing `dispersion` (in-plane, through-plane) voxels,
/// centred in the mask's bounding box. Nodes outside the mask move to the nearest mask
/// voxel within half a spacing per axis (ties to the lowest index) or are dropped.
pub fn sample_keypoints(mask: &Mask, dispersion: [usize; 2]) -> KeypointSet {
    let g = mask.geom;
    let mut set = KeypointSet {
        spacing: g.spacing,
        ..KeypointSet::default()
    };
    let d = xyz(dispersion).map(|v| v.max(1));
    let mut lo = g.dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for idx in 0..g.len() {
        if mask.bits[idx] {
            any = true;
            let c = g.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return set;
    }
    let axis_nodes = |a: usize| -> Vec<usize> {
        let len = hi[a] - lo[a] + 1;
        let n = (len / d[a]).max(1);
        let first = lo[a] + ((len - 1) - (n - 1) * d[a]) / 2;
        (0..n).map(|i| first + i * d[a]).collect()
    };
    let (xs, ys, zs) = (axis_nodes(0), axis_nodes(1), axis_nodes(2));
    let half = d.map(|v| (v / 2) as isize);
    let mut seen = HashSet::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let node = [x, y, z];
                let chosen = if mask.get(node) {
                    Some(node)
                } else {
                    let mut best: Option<(f64, usize)> = None;
                    for dz in -half[2]..=half[2] {
                        for dy in -half[1]..=half[1] {
                            for dx in -half[0]..=half[0] {
                                let c = [x as isize + dx, y as isize + dy, z as isize + dz];
                                if (0..3).any(|a| c[a] < 0 || c[a] >= g.dims[a] as isize) {
                                    continue;
                                }
                                let idx = g.index(c[0] as usize, c[1] as usize, c[2] as usize);
                                if !mask.bits[idx] {
                                    continue;
                                }
                                let r2 = (dx as f64 * g.spacing[0]).powi(2)
                                    + (dy as f64 * g.spacing[1]).powi(2)
                                    + (dz as f64 * g.spacing[2]).powi(2);
                                if best.is_none_or(|(b, bi)| r2 < b || (r2 == b && idx < bi)) {
                                    best = Some((r2, idx));
                                }
                            }
                        }
                    }
                    best.map(|(_, idx)| g.coords(idx))
                };
                if let Some(p) = chosen {
                    if seen.insert(p) {
                        set.positions.push(p);
                    }
                }
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn empty_mask_gives_no_keypoints() {
        let g = Geometry::centered([8, 8, 8], [1.0; 3]).unwrap();
        assert!(sample_keypoints(&Mask::empty(g), [2, 2]).is_empty());
    }

    #[test]
    fn full_cube_grid_count() {
        let g = Geometry::centered([32, 32, 32], [2.0; 3]).unwrap();
        let k = sample_keypoints(&Mask::full(g), [8, 4]);
        assert_eq!(k.len(), 4 * 4 * 8);
        assert_eq!(k.positions[0], [3, 3, 1]);
    }

    #[test]
    fn half_space_containment() {
        let g = Geometry::centered([20, 17, 13], [1.5, 1.5, 3.0]).unwrap();
        let m = Mask::from_world_fn(g, |p| p[0] + 0.3 * p[1] > 1.0);
        let k = sample_keypoints(&m, [3, 2]);
        assert!(!k.is_empty());
        assert!(k.positions.iter().all(|&p| m.get(p)));
        let unique: HashSet<_> = k.positions.iter().collect();
        assert_eq!(unique.len(), k.len());
    }
}
