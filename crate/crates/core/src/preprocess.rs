//! Body and lung segmentation by intensity thresholds and morphology, and removal of
//! ambient content (scan table, clothing) outside the body.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume, IMPUTE_HU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Voxels strictly above this HU are body candidates.
    pub body_threshold: f32,
    pub lung_low: f32,
    pub lung_high: f32,
    pub body_closing_radius: usize,
    pub lung_closing_radius: usize,
    /// The second-largest lung component is kept only if at least this fraction of the
    /// largest.
    pub second_lung_min_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            body_threshold: -500.0,
            lung_low: -950.0,
            lung_high: -400.0,
            body_closing_radius: 2,
            lung_closing_radius: 1,
            second_lung_min_fraction: 0.1,
        }
    }
}

/// Body and lung masks of one scan; the lung mask is contained in the body mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPair {
    pub body: Mask,
    pub lung: Mask,
}

const NEIGHBORS6: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

#[inline]
fn offset(v: [usize; 3], o: [isize; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let x = v[a] as isize + o[a];
        if x < 0 || x >= dims[a] as isize {
            return None;
        }
        out[a] = x as usize;
    }
    Some(out)
}

/// 6-connected component labels (0 = background) and component sizes (index 0 unused).
fn label_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let g = mask.geom;
    let mut labels = vec![0u32; g.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let v = g.coords(idx);
            for o in NEIGHBORS6 {
                if let Some(n) = offset(v, o, g.dims) {
                    let ni = g.index(n[0], n[1], n[2]);
                    if mask.bits[ni] && labels[ni] == 0 {
                        labels[ni] = label;
                        queue.push_back(ni);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// The `keep` largest 6-connected components, ties broken by first occurrence.
fn largest_components(mask: &Mask, keep: usize) -> Vec<Mask> {
    let (labels, sizes) = label_components(mask);
    let mut order: Vec<usize> = (1..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(keep)
        .map(|l| Mask {
            geom: mask.geom,
            bits: labels.iter().map(|&x| x as usize == l).collect(),
        })
        .collect()
}

fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for k in -r..=r {
        for j in -r..=r {
            for i in -r..=r {
                if i * i + j * j + k * k <= r * r {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let g = mask.geom;
    let ball = ball_offsets(radius);
    let bits = (0..g.len())
        .map(|idx| {
            let v = g.coords(idx);
            ball.iter()
                .any(|&o| offset(v, o, g.dims).is_some_and(|n| mask.bits[g.index(n[0], n[1], n[2])]))
        })
        .collect();
    Mask { geom: g, bits }
}

/// Erosion that ignores out-of-grid neighbours, so structures cut by the field of view
/// are not eaten away from the grid border.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    let g = mask.geom;
    let ball = ball_offsets(radius);
    let bits = (0..g.len())
        .map(|idx| {
            mask.bits[idx] && {
                let v = g.coords(idx);
                ball.iter()
                    .all(|&o| offset(v, o, g.dims).is_none_or(|n| mask.bits[g.index(n[0], n[1], n[2])]))
            }
        })
        .collect();
    Mask { geom: g, bits }
}

pub(crate) fn close(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    erode(&dilate(mask, radius), radius)
}

/// Fills background regions of each axial slice not 4-connected to the slice border.
fn fill_holes_per_slice(mask: &Mask) -> Mask {
    let g = mask.geom;
    let [nx, ny, nz] = g.dims;
    let mut out = mask.clone();
    let mut outside = vec![false; nx * ny];
    let mut queue = VecDeque::new();
    for k in 0..nz {
        outside.iter_mut().for_each(|b| *b = false);
        let fg = |i: usize, j: usize| mask.bits[g.index(i, j, k)];
        for j in 0..ny {
            for i in 0..nx {
                let border = i == 0 || j == 0 || i == nx - 1 || j == ny - 1;
                if border && !fg(i, j) && !outside[i + nx * j] {
                    outside[i + nx * j] = true;
                    queue.push_back((i, j));
                }
            }
        }
        while let Some((i, j)) = queue.pop_front() {
            let mut visit = |a: usize, b: usize| {
                if !fg(a, b) && !outside[a + nx * b] {
                    outside[a + nx * b] = true;
                    queue.push_back((a, b));
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < nx {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < ny {
                visit(i, j + 1);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                if !outside[i + nx * j] {
                    out.bits[g.index(i, j, k)] = true;
                }
            }
        }
    }
    out
}

/// Threshold, keep the largest component, close, and fill in-slice holes. The result is
/// confined to valid voxels.
pub fn segment_body(vol: &Volume) -> Result<Mask> {
    segment_body_with(vol, &PreprocessConfig::default())
}

pub fn segment_body_with(vol: &Volume, cfg: &PreprocessConfig) -> Result<Mask> {
    let candidates = Mask {
        geom: vol.geom,
        bits: vol
            .data
            .iter()
            .zip(&vol.valid)
            .map(|(&d, &ok)| ok && d > cfg.body_threshold)
            .collect(),
    };
    let largest = largest_components(&candidates, 1).pop().ok_or_else(|| {
        Error::Degenerate(format!("no valid voxel above {} HU", cfg.body_threshold))
    })?;
    fill_holes_per_slice(&close(&largest, cfg.body_closing_radius)).and(&vol.valid_mask())
}

/// Lung segmentation inside a body mask.
pub fn segment_lung(vol: &Volume, body: &Mask) -> Result<Mask> {
    segment_lung_with(vol, body, &PreprocessConfig::default())
}

pub fn segment_lung_with(vol: &Volume, body: &Mask, cfg: &PreprocessConfig) -> Result<Mask> {
    vol.geom.ensure_matches(&body.geom, "lung segmentation body mask")?;
    let g = vol.geom;
    let [nx, ny, nz] = g.dims;
    let mut cand: Vec<bool> = (0..g.len())
        .map(|i| body.bits[i] && vol.valid[i] && (cfg.lung_low..=cfg.lung_high).contains(&vol.data[i]))
        .collect();

    // Drop in-plane components that reach the body boundary (air leaking in from outside).
    let mut seen = vec![false; nx * ny];
    let mut comp = Vec::new();
    let mut queue = VecDeque::new();
    for k in 0..nz {
        seen.iter_mut().for_each(|b| *b = false);
        for start in 0..nx * ny {
            if seen[start] || !cand[start + nx * ny * k] {
                continue;
            }
            comp.clear();
            let mut touches = false;
            seen[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                comp.push(p);
                let (i, j) = (p % nx, p / nx);
                let neighbors = [
                    (i > 0).then(|| p - 1),
                    (i + 1 < nx).then(|| p + 1),
                    (j > 0).then(|| p - nx),
                    (j + 1 < ny).then(|| p + nx),
                ];
                for n in neighbors {
                    match n {
                        None => touches = true,
                        Some(q) => {
                            if !body.bits[q + nx * ny * k] {
                                touches = true;
                            } else if cand[q + nx * ny * k] && !seen[q] {
                                seen[q] = true;
                                queue.push_back(q);
                            }
                        }
                    }
                }
            }
            if touches {
                for &p in &comp {
                    cand[p + nx * ny * k] = false;
                }
            }
        }
    }

    let mut parts = largest_components(&Mask { geom: g, bits: cand }, 2).into_iter();
    let first = parts
        .next()
        .ok_or_else(|| Error::Degenerate("no lung-range voxels inside the body".into()))?;
    let mut lung = first.clone();
    if let Some(second) = parts.next() {
        if second.count() as f64 >= cfg.second_lung_min_fraction * first.count() as f64 {
            lung = lung.or(&second)?;
        }
    }
    close(&lung, cfg.lung_closing_radius).and(body)
}

/// Sets valid voxels outside the body to air. Missing voxels stay missing.
pub fn remove_ambient(vol: &Volume, body: &Mask) -> Result<Volume> {
    vol.geom.ensure_matches(&body.geom, "ambient removal body mask")?;
    let mut out = vol.clone();
    for i in 0..out.data.len() {
        if !body.bits[i] && out.valid[i] {
            out.data[i] = IMPUTE_HU;
        }
    }
    Ok(out)
}

/// A scan after ambient removal, with its masks.
#[derive(Debug, Clone)]
pub struct PreprocessedScan {
    pub volume: Volume,
    pub masks: SegmentationPair,
}

/// Full preprocessing: body, lung, then ambient removal.
pub fn preprocess(vol: &Volume, cfg: &PreprocessConfig) -> Result<PreprocessedScan> {
    let body = segment_body_with(vol, cfg)?;
    let lung = segment_lung_with(vol, &body, cfg)?;
    let volume = remove_ambient(vol, &body)?;
    Ok(PreprocessedScan {
        volume,
        masks: SegmentationPair { body, lung },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn g(n: usize) -> Geometry {
        Geometry::centered([n, n, n], [1.0; 3]).unwrap()
    }

    #[test]
    fn all_air_is_degenerate() {
        let v = Volume::filled(g(8), -1000.0);
        assert!(matches!(segment_body(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn solid_block_is_entire_valid_region() {
        let mut v = Volume::filled(g(10), 40.0);
        for i in 0..100 {
            v.valid[i] = false;
        }
        let body = segment_body(&v).unwrap();
        assert_eq!(body.bits, v.valid);
    }

    #[test]
    fn body_without_lung_range_is_degenerate() {
        let v = Volume::from_world_fn(g(12), |p| if p.iter().all(|x| x.abs() < 4.0) { 40.0 } else { -1000.0 });
        let body = segment_body(&v).unwrap();
        assert!(matches!(segment_lung(&v, &body), Err(Error::Degenerate(_))));
    }

    #[test]
    fn keeps_largest_component_and_fills_holes() {
        let v = Volume::from_world_fn(g(20), |p| {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if p[0] > 6.0 && p[1] > 6.0 {
                40.0 // small separate blob in the corner
            } else if r < 7.0 && r > 3.0 {
                40.0
            } else {
                -1000.0
            }
        });
        let body = segment_body(&v).unwrap();
        assert!(body.get([10, 10, 10]));
        assert!(!body.get([18, 18, 10]));
    }

    #[test]
    fn remove_ambient_properties() {
        let geo = g(6);
        let mut v = Volume::from_world_fn(geo, |p| (p[0] * 100.0) as f32 + 300.0);
        v.valid[3] = false;
        v.data[3] = IMPUTE_HU;
        let body = Mask::from_world_fn(geo, |p| p[0] > 0.0);
        let out = remove_ambient(&v, &body).unwrap();
        for i in 0..geo.len() {
            if body.bits[i] {
                assert_eq!(out.data[i], v.data[i]);
            } else {
                assert_eq!(out.data[i], IMPUTE_HU);
            }
            assert_eq!(out.valid[i], v.valid[i]);
        }
        assert_eq!(remove_ambient(&out, &body).unwrap(), out);
        assert_eq!(remove_ambient(&v, &Mask::full(geo)).unwrap(), v);
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let v = Volume::filled(g(6), 0.0);
        assert!(matches!(
            remove_ambient(&v, &Mask::full(g(5))),
            Err(Error::GeometryMismatch(_))
        ));
    }

    fn dsc(a: &Mask, b: &Mask) -> f64 {
        let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }

    #[test]
    fn phantom_segmentation_matches_ground_truth() {
        use crate::phantom::{generate_phantom, PhantomSpec};
        for noise in [0.0, 20.0] {
            let mut spec = PhantomSpec::for_grid([64, 64, 48], [3.0; 3], 5);
            spec.noise_sigma = noise;
            let (vol, truth) = generate_phantom(&spec).unwrap();
            let seg = preprocess(&vol, &PreprocessConfig::default()).unwrap();
            let need = if noise == 0.0 { 0.99 } else { 0.98 };
            let (b, l) = (dsc(&seg.masks.body, &truth.body), dsc(&seg.masks.lung, &truth.lung));
            assert!(b >= need && l >= need, "noise {noise}: body {b} lung {l}");
            assert!(seg.masks.lung.is_subset_of(&seg.masks.body));
        }
    }
}
