use rayon::prelude::*;

use super::knn::KnnIndex;
use super::KeypointSet;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::volume::Geometry;

/// Keypoints averaged per evaluation point.
pub const DENSIFY_NEIGHBORS: usize = 10;

/// Displacements at arbitrary points (mm, same frame as `KeypointSet::position_mm`):
/// Gaussian-weighted mean of the 10 nearest keypoints, distances measured in units of
/// `sigma` (mm per axis).
pub fn densify_at(kps: &KeypointSet, sigma: [f64; 3], points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if kps.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    let scaled = |p: [f64; 3]| [p[0] / sigma[0], p[1] / sigma[1], p[2] / sigma[2]];
    let index = KnnIndex::new((0..kps.len()).map(|k| scaled(kps.position_mm(k))).collect(), 1.0);
    Ok(points
        .par_iter()
        .map_init(Vec::new, |nn, &p| interpolate(&index, kps, scaled(p), nn))
        .collect())
}

fn interpolate(index: &KnnIndex, kps: &KeypointSet, q: [f64; 3], nn: &mut Vec<(f64, usize)>) -> [f64; 3] {
    index.nearest(q, DENSIFY_NEIGHBORS, nn);
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    // Weights relative to the nearest keypoint, which therefore weighs exactly 1.
    let d0 = nn[0].0;
    for &(d2, k) in nn.iter() {
        let w = (-0.5 * (d2 - d0)).exp();
        let d = kps.displacements[k];
        for a in 0..3 {
            acc[a] += w * d[a];
        }
        wsum += w;
    }
    acc.map(|v| v / wsum)
}

/// Dense field on `out` from keypoints indexed on `grid`.
pub fn densify(kps: &KeypointSet, grid: &Geometry, sigma: [f64; 3], out: &Geometry) -> Result<DisplacementField> {
    if kps.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    debug_assert_eq!(kps.spacing, grid.spacing);
    let scaled = |p: [f64; 3]| [p[0] / sigma[0], p[1] / sigma[1], p[2] / sigma[2]];
    let index = KnnIndex::new((0..kps.len()).map(|k| scaled(kps.position_mm(k))).collect(), 1.0);
    let vectors = (0..out.len())
        .into_par_iter()
        .map_init(Vec::new, |nn, idx| {
            let w = out.world(out.coords(idx));
            let rel = [0, 1, 2].map(|a| w[a] - grid.origin[a]);
            interpolate(&index, kps, scaled(rel), nn)
        })
        .collect();
    Ok(DisplacementField { geom: *out, vectors })
}

/// Keeps forward keypoints whose round trip through the densified backward solution
/// returns within `threshold` mm: `e_k = |d_k + b(x_k + d_k)|`. Survivors carry `e_k`.
pub fn symmetry_filter(
    fwd: &KeypointSet,
    bwd: &KeypointSet,
    sigma: [f64; 3],
    threshold: f64,
) -> Result<KeypointSet> {
    let targets: Vec<[f64; 3]> = (0..fwd.len())
        .map(|k| {
            let (x, d) = (fwd.position_mm(k), fwd.displacements[k]);
            [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
        })
        .collect();
    let back = densify_at(bwd, sigma, &targets)?;
    let mut out = KeypointSet {
        spacing: fwd.spacing,
        ..KeypointSet::default()
    };
    for k in 0..fwd.len() {
        let d = fwd.displacements[k];
        let b = back[k];
        let e = ((d[0] + b[0]).powi(2) + (d[1] + b[1]).powi(2) + (d[2] + b[2]).powi(2)).sqrt();
        if e <= threshold {
            out.positions.push(fwd.positions[k]);
            out.displacements.push(d);
            out.consistency_error.push(e);
        }
    }
    if out.is_empty() {
        return Err(Error::StageFailure(format!(
            "all {} keypoints failed the consistency check at {threshold} mm",
            fwd.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(positions: Vec<[usize; 3]>, displacements: Vec<[f64; 3]>) -> KeypointSet {
        KeypointSet {
            spacing: [2.0; 3],
            positions,
            displacements,
            consistency_error: Vec::new(),
        }
    }

    #[test]
    fn single_keypoint_gives_constant_field() {
        let g = Geometry::centered([10, 9, 8], [2.0; 3]).unwrap();
        let k = set(vec![[1, 1, 1]], vec![[1.5, -2.0, 0.25]]);
        let f = densify(&k, &g, [16.0, 16.0, 8.0], &g).unwrap();
        assert!(f.vectors.iter().all(|v| *v == [1.5, -2.0, 0.25]));
        assert!(matches!(densify(&set(vec![], vec![]), &g, [1.0; 3], &g), Err(Error::EmptyKeypoints)));
    }

    #[test]
    fn shared_displacement_is_reproduced() {
        let g = Geometry::centered([12, 12, 12], [2.0; 3]).unwrap();
        let pos: Vec<[usize; 3]> = (0..27).map(|i| [1 + 4 * (i % 3), 1 + 4 * ((i / 3) % 3), 1 + 4 * (i / 9)]).collect();
        let k = set(pos, vec![[3.0, 0.0, -1.0]; 27]);
        let f = densify(&k, &g, [8.0; 3], &g).unwrap();
        for v in &f.vectors {
            for a in 0..3 {
                assert!((v[a] - [3.0, 0.0, -1.0][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_at_keypoint_close_to_own_displacement() {
        let g = Geometry::centered([40, 40, 40], [2.0; 3]).unwrap();
        let pos = vec![[5, 5, 5], [30, 5, 5], [5, 30, 5], [5, 5, 30], [30, 30, 30]];
        let disp = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [-1.0, -1.0, 0.0], [2.0, 2.0, 2.0]];
        let k = set(pos.clone(), disp.clone());
        let sigma = [6.0; 3];
        let f = densify(&k, &g, sigma, &g).unwrap();
        for (p, d) in pos.iter().zip(&disp) {
            // Direct weighted sum over all (fewer than 10) keypoints.
            let mut acc = [0.0; 3];
            let mut ws = 0.0;
            for (q, e) in pos.iter().zip(&disp) {
                let r2: f64 = (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * 2.0 / sigma[a]).powi(2)).sum();
                let w = (-0.5 * r2).exp();
                ws += w;
                for a in 0..3 {
                    acc[a] += w * e[a];
                }
            }
            let v = f.vectors[g.index(p[0], p[1], p[2])];
            for a in 0..3 {
                assert!((v[a] - acc[a] / ws).abs() < 1e-12);
                assert!((v[a] - d[a]).abs() <= 0.1 * d.iter().map(|x| x.abs()).fold(0.0, f64::max));
            }
        }
    }

    #[test]
    fn symmetry_threshold_cases() {
        let f = set(vec![[4, 4, 4]], vec![[10.0, 0.0, 0.0]]);
        // Backward keypoint sits at the mapped point with the opposite displacement.
        let b = set(vec![[9, 4, 4]], vec![[-10.0, 0.0, 0.0]]);
        let out = symmetry_filter(&f, &b, [16.0, 16.0, 8.0], 8.0).unwrap();
        assert_eq!(out.consistency_error, vec![0.0]);
        let zero = set(vec![[9, 4, 4]], vec![[0.0; 3]]);
        assert!(matches!(symmetry_filter(&f, &zero, [16.0, 16.0, 8.0], 8.0), Err(Error::StageFailure(_))));
    }
}
