//! Global affine alignment by block matching on intensity-windowed scans.
//!
//! Coarse to fine over a spacing pyramid. At each level the highest-variance blocks of
//! the reference body region are matched into the currently warped moving scan by
//! exhaustive normalised cross-correlation, and the affine is refitted by
//! least-trimmed-squares over the block correspondences.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::AffineTransform;
use crate::volume::{presmoothed, resample_to_spacing, Geometry, Mask, Volume, IMPUTE_HU};

/// Correspondences needed for a well-posed 12-parameter fit.
pub const MIN_CORRESPONDENCES: usize = 12;

/// Finest pyramid spacing (mm); each coarser level doubles it.
const FINEST_SPACING: f64 = 2.0;

/// Concentration steps of the trimmed fit.
const LTS_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineConfig {
    pub window: (f32, f32),
    pub pyramid_levels: usize,
    pub block_size: usize,
    pub blocks_kept_fraction: f64,
    /// Search radius in blocks; shifts of up to `search_radius_blocks * block_size`
    /// voxels are tried along each axis.
    pub search_radius_blocks: usize,
    pub trim_fraction: f64,
    pub iterations_per_level: usize,
    /// A block match is kept only if, along every axis, the NCC peak exceeds the best
    /// value two voxels away by this margin. Even at zero this drops peaks on the
    /// search boundary, whose true optimum lies outside the searched range.
    pub min_peak_margin: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            window: (0.0, 1000.0),
            pyramid_levels: 2,
            block_size: 4,
            blocks_kept_fraction: 0.25,
            search_radius_blocks: 1,
            trim_fraction: 0.5,
            iterations_per_level: 5,
            min_peak_margin: 0.0,
        }
    }
}

impl AffineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.window.0 < self.window.1) {
            return bad("window low must be below window high");
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction < 1.0) {
            return bad("trim_fraction must lie in (0, 1)");
        }
        if !(self.blocks_kept_fraction > 0.0 && self.blocks_kept_fraction <= 1.0) {
            return bad("blocks_kept_fraction must lie in (0, 1]");
        }
        if !(self.min_peak_margin >= 0.0) {
            return bad("min_peak_margin must be nonnegative");
        }
        if self.pyramid_levels == 0 || self.block_size == 0 || self.iterations_per_level == 0 {
            return bad("pyramid_levels, block_size and iterations_per_level must be positive");
        }
        Ok(())
    }

    /// Level spacings, coarsest first (4 mm then 2 mm by default).
    pub fn level_spacings(&self) -> Vec<f64> {
        (0..self.pyramid_levels)
            .rev()
            .map(|l| FINEST_SPACING * (1u32 << l) as f64)
            .collect()
    }
}

/// Clamps values into `[window.0, window.1]`; validity is unchanged.
pub fn window_clip(vol: &Volume, window: (f32, f32)) -> Volume {
    Volume {
        geom: vol.geom,
        data: vol.data.iter().map(|&v| v.clamp(window.0, window.1)).collect(),
        valid: vol.valid.clone(),
    }
}

/// Reference-to-moving affine. Blocks are drawn from the valid, non-ambient part of the
/// reference (ambient air is exactly -1000 HU after preprocessing).
pub fn register_affine(moving: &Volume, reference: &Volume, cfg: &AffineConfig) -> Result<AffineTransform> {
    let body = Mask {
        geom: reference.geom,
        bits: reference
            .data
            .iter()
            .zip(&reference.valid)
            .map(|(&v, &ok)| ok && v > IMPUTE_HU)
            .collect(),
    };
    register_affine_masked(moving, reference, &body, cfg)
}

/// As [`register_affine`] with an explicit reference body mask.
pub fn register_affine_masked(
    moving: &Volume,
    reference: &Volume,
    body: &Mask,
    cfg: &AffineConfig,
) -> Result<AffineTransform> {
    cfg.validate()?;
    reference.geom.ensure_matches(&body.geom, "reference body mask")?;
    let mov = window_clip(moving, cfg.window);
    let refc = window_clip(reference, cfg.window);
    let com = center_of_mass_init(&mov, &refc, cfg.window.0)?;
    let mut t = translation_search(moving, reference, body, com)?;
    for s in cfg.level_spacings() {
        let level = Level::new(&mov, &refc, body, [s; 3], cfg)?;
        for _ in 0..cfg.iterations_per_level {
            let pairs = level.correspondences(&t);
            let next = fit_trimmed(&pairs, cfg.trim_fraction)?;
            let change = level
                .block_centers
                .iter()
                .map(|&x| dist(next.apply(x), t.apply(x)))
                .fold(0.0, f64::max);
            t = next;
            if change < 1e-3 * s {
                break;
            }
        }
    }
    Ok(t)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Translation aligning the intensity centroids (weights: value above `low`).
fn center_of_mass_init(mov: &Volume, refc: &Volume, low: f32) -> Result<AffineTransform> {
    let com = |v: &Volume, what: &str| -> Result<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut w = 0.0;
        for idx in 0..v.geom.len() {
            if v.valid[idx] {
                let m = (v.data[idx] - low) as f64;
                let p = v.geom.world(v.geom.coords(idx));
                for a in 0..3 {
                    acc[a] += m * p[a];
                }
                w += m;
            }
        }
        if !(w > 0.0) {
            return Err(Error::Degenerate(format!("{what} has no intensity inside the window")));
        }
        Ok(acc.map(|x| x / w))
    };
    let (cm, cr) = (com(mov, "moving scan")?, com(refc, "reference scan")?);
    Ok(AffineTransform::translation([cm[0] - cr[0], cm[1] - cr[1], cm[2] - cr[2]]))
}

/// Spacing (mm) and half-widths (voxels, x/y/z) of the initial translation search.
const INIT_SPACING: f64 = 8.0;
const INIT_RADIUS: [isize; 3] = [3, 3, 8];

/// Refines a translation by exhaustive NCC search on a coarse grid, scored over the
/// reference body voxels that the shifted moving scan covers (at least half of them).
/// Centroid alignment alone is biased when one scan's field of view is cropped.
fn translation_search(mov: &Volume, refc: &Volume, body: &Mask, init: AffineTransform) -> Result<AffineTransform> {
    let refl = resample_to_spacing(refc, [INIT_SPACING; 3])?;
    let g = refl.geom;
    let movs = presmoothed(mov, [INIT_SPACING; 3]);
    let w = Level::pull_back(&movs, &g, &init);
    let pts: Vec<([usize; 3], f64)> = (0..g.len())
        .filter(|&i| refl.valid[i] && body.sample_nearest(g.world(g.coords(i))))
        .map(|i| (g.coords(i), refl.data[i] as f64))
        .collect();
    if pts.is_empty() {
        return Ok(init);
    }
    let shifts: Vec<[isize; 3]> = (-INIT_RADIUS[2]..=INIT_RADIUS[2])
        .flat_map(|z| (-INIT_RADIUS[1]..=INIT_RADIUS[1]).flat_map(move |y| (-INIT_RADIUS[0]..=INIT_RADIUS[0]).map(move |x| [x, y, z])))
        .collect();
    let score = |s: &[isize; 3]| -> Option<f64> {
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &(v, a) in &pts {
            let q: [isize; 3] = std::array::from_fn(|k| v[k] as isize + s[k]);
            if (0..3).any(|k| q[k] < 0 || q[k] >= g.dims[k] as isize) {
                continue;
            }
            let j = g.index(q[0] as usize, q[1] as usize, q[2] as usize);
            if !w.valid[j] {
                continue;
            }
            let b = w.data[j] as f64;
            n += 1;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        if 2 * n < pts.len() {
            return None;
        }
        let nf = n as f64;
        let va = saa - sa * sa / nf;
        let vb = sbb - sb * sb / nf;
        (va > 1e-9 && vb > 1e-9).then(|| (sab - sa * sb / nf) / (va * vb).sqrt())
    };
    let scores: Vec<Option<f64>> = shifts.par_iter().map(score).collect();
    // Highest score; ties go to the smaller shift, which comes first in this order.
    let mut order: Vec<usize> = (0..shifts.len()).collect();
    order.sort_by_key(|&i| shifts[i].iter().map(|v| v * v).sum::<isize>());
    let best = order
        .into_iter()
        .filter_map(|i| scores[i].map(|c| (c, i)))
        .fold(None::<(f64, usize)>, |acc, (c, i)| match acc {
            Some((b, _)) if b >= c => acc,
            _ => Some((c, i)),
        });
    Ok(match best {
        Some((_, i)) => {
            let d = shifts[i].map(|v| v as f64 * INIT_SPACING);
            let t0 = init.translation_part();
            AffineTransform::translation([t0[0] + d[0], t0[1] + d[1], t0[2] + d[2]])
        }
        None => init,
    })
}

/// One pyramid level: resampled reference blocks and the smoothed moving scan.
struct Level<'a> {
    refl: Volume,
    ref_sums: BoxSums,
    mov: std::borrow::Cow<'a, Volume>,
    /// Corner voxel of each kept block and its mean-centred values (x fastest).
    blocks: Vec<([usize; 3], Vec<f32>, f32)>,
    block_centers: Vec<[f64; 3]>,
    bs: usize,
    radius: isize,
    margin: f64,
}

impl<'a> Level<'a> {
    fn new(mov: &'a Volume, refc: &Volume, body: &Mask, spacing: [f64; 3], cfg: &AffineConfig) -> Result<Level<'a>> {
        let refl = resample_to_spacing(refc, spacing)?;
        let g = refl.geom;
        let bs = cfg.block_size;
        let nb = g.dims.map(|d| d / bs);
        let mut cands: Vec<([usize; 3], Vec<f32>, f32)> = Vec::new();
        for bz in 0..nb[2] {
            for by in 0..nb[1] {
                for bx in 0..nb[0] {
                    let c = [bx * bs, by * bs, bz * bs];
                    let inside = (0..bs * bs * bs).all(|k| body.sample_nearest(g.world([c[0] + k % bs, c[1] + (k / bs) % bs, c[2] + k / (bs * bs)])));
                    if let Some((centred, norm)) = inside.then(|| centred_block(&refl, c, bs)).flatten() {
                        cands.push((c, centred, norm));
                    }
                }
            }
        }
        // Highest variance first; ties keep scan order.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let keep = ((cands.len() as f64 * cfg.blocks_kept_fraction).ceil() as usize).min(cands.len());
        cands.truncate(keep);
        if cands.len() < MIN_CORRESPONDENCES {
            return Err(Error::Underdetermined {
                found: cands.len(),
                needed: MIN_CORRESPONDENCES,
            });
        }
        let half = (bs as f64 - 1.0) / 2.0;
        let block_centers = cands
            .iter()
            .map(|(c, _, _)| {
                let o = g.world(*c);
                [0, 1, 2].map(|a| o[a] + half * g.spacing[a])
            })
            .collect();
        Ok(Level {
            ref_sums: BoxSums::new(&refl),
            mov: presmoothed(mov, spacing),
            blocks: cands,
            block_centers,
            refl,
            bs,
            radius: (cfg.search_radius_blocks * bs) as isize,
            margin: cfg.min_peak_margin,
        })
    }

    /// Moving scan pulled back through `t` onto the level grid.
    fn warped(&self, t: &AffineTransform) -> Volume {
        Level::pull_back(&self.mov, &self.refl.geom, t)
    }

    fn pull_back(mov: &Volume, g: &Geometry, t: &AffineTransform) -> Volume {
        let g = *g;
        let samples: Vec<Option<f64>> = (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let p = t.apply(g.world(g.coords(idx)));
                mov.sample_index(mov.geom.to_index(p))
            })
            .collect();
        Volume {
            geom: g,
            data: samples.iter().map(|s| s.unwrap_or(IMPUTE_HU as f64) as f32).collect(),
            valid: samples.iter().map(Option::is_some).collect(),
        }
    }

    /// Best-NCC shift of each block mapped to (reference point, moving point) pairs.
    fn correspondences(&self, t: &AffineTransform) -> Vec<([f64; 3], [f64; 3])> {
        let w = self.warped(t);
        let sums = BoxSums::new(&w);
        let g = w.geom;
        self.blocks
            .par_iter()
            .zip(&self.block_centers)
            .filter_map(|((corner, vals, norm), &centre)| {
                let shift = self.best_shift(&w, &sums, *corner, vals, *norm)?;
                let moved = [0, 1, 2].map(|a| centre[a] + shift[a] * g.spacing[a]);
                Some((centre, t.apply(moved)))
            })
            .collect()
    }

    /// Shift (voxels) maximising NCC, refined per axis by a parabola through the
    /// symmetrised surface: the forward NCC averaged with the NCC of the matched moving
    /// block against the reference shifted the opposite way. The symmetrised surface of
    /// identical images is exactly even, so their refinement is exactly zero.
    fn best_shift(&self, w: &Volume, sums: &BoxSums, corner: [usize; 3], vals: &[f32], norm: f32) -> Option<[f64; 3]> {
        let bs = self.bs;
        let offset = |base: [usize; 3], s: [isize; 3]| -> [isize; 3] { std::array::from_fn(|a| base[a] as isize + s[a]) };
        let ncc = |s: [isize; 3]| block_ncc(vals, norm, w, sums, offset(corner, s), bs);
        let r = self.radius;
        let mut best: Option<(f64, [isize; 3])> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let s = [dx, dy, dz];
                    if let Some(c) = ncc(s) {
                        if best.is_none_or(|(b, _)| c > b) {
                            best = Some((c, s));
                        }
                    }
                }
            }
        }
        let (peak, s) = best?;
        let along = |a: usize, d: isize| {
            let mut q = s;
            q[a] += d;
            ncc(q)
        };
        for a in 0..3 {
            let side = [along(a, -2), along(a, 2)].into_iter().flatten().fold(f64::NEG_INFINITY, f64::max);
            if peak - side < self.margin {
                return None;
            }
        }
        let matched = offset(corner, s).map(|v| v as usize);
        let Some((mvals, mnorm)) = centred_block(w, matched, bs) else {
            return Some(s.map(|v| v as f64));
        };
        let reverse = |d: [isize; 3]| block_ncc(&mvals, mnorm, &self.refl, &self.ref_sums, offset(corner, d.map(|v| -v)), bs);
        let sym = |a: usize, d: isize| -> Option<f64> {
            let mut e = [0isize; 3];
            e[a] = d;
            Some(0.5 * (along(a, d)? + reverse(e)?))
        };
        Some(std::array::from_fn(|a| {
            let sub = match (sym(a, -1), sym(a, 0), sym(a, 1)) {
                (Some(m), Some(c), Some(p)) if m + p - 2.0 * c < 0.0 => (0.5 * (m - p) / (m + p - 2.0 * c)).clamp(-0.5, 0.5),
                _ => 0.0,
            };
            s[a] as f64 + sub
        }))
    }
}

/// Mean-centred values of the block at `lo` (x fastest) and their norm; `None` if any
/// voxel is invalid or the block is flat.
fn centred_block(v: &Volume, lo: [usize; 3], bs: usize) -> Option<(Vec<f32>, f32)> {
    let g = v.geom;
    let mut vals = Vec::with_capacity(bs * bs * bs);
    for z in 0..bs {
        for y in 0..bs {
            for x in 0..bs {
                let idx = g.index(lo[0] + x, lo[1] + y, lo[2] + z);
                if !v.valid[idx] {
                    return None;
                }
                vals.push(v.data[idx]);
            }
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-6) {
        return None;
    }
    let centred: Vec<f32> = vals.iter().map(|&v| (v as f64 - mean) as f32).collect();
    let norm = centred.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
    Some((centred, norm))
}

/// NCC of a centred template against the block of `img` at `lo`, or `None` when the
/// block leaves the grid, touches invalid voxels or is flat.
fn block_ncc(tmpl: &[f32], norm: f32, img: &Volume, sums: &BoxSums, lo: [isize; 3], bs: usize) -> Option<f64> {
    let g = img.geom;
    if (0..3).any(|a| lo[a] < 0 || lo[a] as usize + bs > g.dims[a]) {
        return None;
    }
    let lo = lo.map(|v| v as usize);
    let n = (bs * bs * bs) as f64;
    let (s1, s2, invalid) = sums.block(lo, bs);
    let var = s2 - s1 * s1 / n;
    if invalid > 0 || !(var > 1e-6) {
        return None;
    }
    let mut cross = 0.0f64;
    let mut i = 0;
    for z in 0..bs {
        for y in 0..bs {
            let row = g.index(lo[0], lo[1] + y, lo[2] + z);
            for (a, b) in tmpl[i..i + bs].iter().zip(&img.data[row..row + bs]) {
                cross += *a as f64 * *b as f64;
            }
            i += bs;
        }
    }
    Some(cross / (norm as f64 * var.sqrt()))
}

/// Summed-volume tables of value, squared value and invalid count.
struct BoxSums {
    dims: [usize; 3],
    s1: Vec<f64>,
    s2: Vec<f64>,
    bad: Vec<u32>,
}

impl BoxSums {
    fn new(v: &Volume) -> BoxSums {
        let d = v.geom.dims;
        let e = [d[0] + 1, d[1] + 1, d[2] + 1];
        let n = e[0] * e[1] * e[2];
        let (mut s1, mut s2, mut bad) = (vec![0.0; n], vec![0.0; n], vec![0u32; n]);
        let at = |x: usize, y: usize, z: usize| x + e[0] * (y + e[1] * z);
        for z in 1..e[2] {
            for y in 1..e[1] {
                for x in 1..e[0] {
                    let idx = v.geom.index(x - 1, y - 1, z - 1);
                    let (val, b) = if v.valid[idx] { (v.data[idx] as f64, 0) } else { (0.0, 1) };
                    let i = at(x, y, z);
                    // Inclusion-exclusion over the seven lower neighbours.
                    let combine = |t: &[f64]| {
                        t[at(x - 1, y, z)] + t[at(x, y - 1, z)] + t[at(x, y, z - 1)]
                            - t[at(x - 1, y - 1, z)]
                            - t[at(x - 1, y, z - 1)]
                            - t[at(x, y - 1, z - 1)]
                            + t[at(x - 1, y - 1, z - 1)]
                    };
                    s1[i] = val + combine(&s1);
                    s2[i] = val * val + combine(&s2);
                    bad[i] = (b + bad[at(x - 1, y, z)] + bad[at(x, y - 1, z)] + bad[at(x, y, z - 1)]
                        + bad[at(x - 1, y - 1, z - 1)])
                        - bad[at(x - 1, y - 1, z)]
                        - bad[at(x - 1, y, z - 1)]
                        - bad[at(x, y - 1, z - 1)];
                }
            }
        }
        BoxSums { dims: e, s1, s2, bad }
    }

    /// Sums over the cube of side `bs` with lowest corner `lo`.
    fn block(&self, lo: [usize; 3], bs: usize) -> (f64, f64, u32) {
        let e = self.dims;
        let at = |x: usize, y: usize, z: usize| x + e[0] * (y + e[1] * z);
        let [x0, y0, z0] = lo;
        let (x1, y1, z1) = (x0 + bs, y0 + bs, z0 + bs);
        let corners = [
            (at(x1, y1, z1), 1),
            (at(x0, y1, z1), -1),
            (at(x1, y0, z1), -1),
            (at(x1, y1, z0), -1),
            (at(x0, y0, z1), 1),
            (at(x0, y1, z0), 1),
            (at(x1, y0, z0), 1),
            (at(x0, y0, z0), -1),
        ];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut bad = 0i64;
        for (i, sign) in corners {
            s1 += sign as f64 * self.s1[i];
            s2 += sign as f64 * self.s2[i];
            bad += sign * self.bad[i] as i64;
        }
        (s1, s2, bad as u32)
    }
}

/// Least-squares affine `y = A x + b` over the selected pairs.
fn fit_affine(pairs: &[([f64; 3], [f64; 3])], sel: &[usize]) -> Result<AffineTransform> {
    let n = sel.len() as f64;
    let mut xm = Vector3::zeros();
    let mut ym = Vector3::zeros();
    for &i in sel {
        xm += Vector3::from(pairs[i].0);
        ym += Vector3::from(pairs[i].1);
    }
    xm /= n;
    ym /= n;
    let mut sxx = Matrix3::zeros();
    let mut syx = Matrix3::zeros();
    for &i in sel {
        let dx = Vector3::from(pairs[i].0) - xm;
        let dy = Vector3::from(pairs[i].1) - ym;
        sxx += dx * dx.transpose();
        syx += dy * dx.transpose();
    }
    let inv = sxx
        .try_inverse()
        .filter(|_| sxx.determinant().abs() > 1e-9 * sxx.trace().powi(3))
        .ok_or(Error::Singular(sxx.determinant()))?;
    let a = syx * inv;
    AffineTransform::from_linear_translation(a, ym - a * xm)
}

/// Least-trimmed-squares: repeatedly refit on the `trim_fraction` of pairs with the
/// smallest residuals (at least [`MIN_CORRESPONDENCES`]).
pub(crate) fn fit_trimmed(pairs: &[([f64; 3], [f64; 3])], trim_fraction: f64) -> Result<AffineTransform> {
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::Underdetermined {
            found: pairs.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    let h = ((pairs.len() as f64 * trim_fraction).ceil() as usize).clamp(MIN_CORRESPONDENCES, pairs.len());
    let mut sel: Vec<usize> = (0..pairs.len()).collect();
    let mut t = fit_affine(pairs, &sel)?;
    for _ in 0..LTS_STEPS {
        let mut order: Vec<(f64, usize)> = pairs
            .iter()
            .enumerate()
            .map(|(i, (x, y))| (dist(t.apply(*x), *y), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut next: Vec<usize> = order[..h].iter().map(|&(_, i)| i).collect();
        next.sort_unstable();
        if next == sel {
            break;
        }
        sel = next;
        t = fit_affine(pairs, &sel)?;
    }
    Ok(t)
}

/// Resamples `vol` onto `geom`, sampling at `t(x)` for every output voxel centre `x`.
pub fn apply_affine(vol: &Volume, t: &AffineTransform, geom: &Geometry) -> Result<Volume> {
    t.check_invertible()?;
    let samples: Vec<Option<f64>> = (0..geom.len())
        .into_par_iter()
        .map(|idx| vol.sample_index(vol.geom.to_index(t.apply(geom.world(geom.coords(idx))))))
        .collect();
    Ok(Volume {
        geom: *geom,
        data: samples.iter().map(|s| s.unwrap_or(IMPUTE_HU as f64) as f32).collect(),
        valid: samples.iter().map(Option::is_some).collect(),
    })
}

/// Nearest-neighbour variant for masks; samples outside the source grid are false.
pub fn apply_affine_mask(mask: &Mask, t: &AffineTransform, geom: &Geometry) -> Result<Mask> {
    t.check_invertible()?;
    let bits = (0..geom.len())
        .into_par_iter()
        .map(|idx| mask.sample_nearest(t.apply(geom.world(geom.coords(idx)))))
        .collect();
    Ok(Mask { geom: *geom, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn clip_examples() {
        let g = Geometry::centered([3, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(g, vec![-200.0, 1500.0, 500.0], vec![true, false, true]).unwrap();
        let c = window_clip(&v, (0.0, 1000.0));
        assert_eq!(c.data, vec![0.0, 1000.0, 500.0]);
        assert_eq!(c.valid, v.valid);
    }

    #[test]
    fn config_checks() {
        assert!(AffineConfig::default().validate().is_ok());
        assert_eq!(AffineConfig::default().level_spacings(), vec![4.0, 2.0]);
        for c in [
            AffineConfig { trim_fraction: 1.0, ..Default::default() },
            AffineConfig { window: (10.0, 10.0), ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn box_sums_match_direct_sums() {
        let g = Geometry::centered([6, 5, 7], [1.0; 3]).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|i| ((i * 37) % 11) as f32 - 3.0).collect();
        let valid: Vec<bool> = (0..g.len()).map(|i| i % 13 != 0).collect();
        let v = Volume::new(g, data, valid).unwrap();
        let s = BoxSums::new(&v);
        for lo in [[0, 0, 0], [2, 1, 3], [3, 2, 4]] {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0);
            for z in lo[2]..lo[2] + 3 {
                for y in lo[1]..lo[1] + 3 {
                    for x in lo[0]..lo[0] + 3 {
                        let i = g.index(x, y, z);
                        if v.valid[i] {
                            a += v.data[i] as f64;
                            b += (v.data[i] as f64).powi(2);
                        } else {
                            c += 1;
                        }
                    }
                }
            }
            let (x, y, z) = s.block(lo, 3);
            assert!((x - a).abs() < 1e-9 && (y - b).abs() < 1e-9);
            assert_eq!(z, c);
        }
    }

    #[test]
    fn trimmed_fit_ignores_outliers() {
        let truth = AffineTransform::from_linear_translation(
            Matrix3::new(1.02, 0.01, 0.0, -0.01, 0.98, 0.02, 0.0, 0.0, 1.05),
            Vector3::new(3.0, -2.0, 1.0),
        )
        .unwrap();
        let mut pairs = Vec::new();
        for i in 0..40 {
            let x = [(i % 4) as f64 * 10.0, ((i / 4) % 5) as f64 * 9.0, (i / 20) as f64 * 15.0 + (i % 3) as f64];
            let mut y = truth.apply(x);
            if i % 5 == 0 {
                y[0] += 30.0;
            }
            pairs.push((x, y));
        }
        let t = fit_trimmed(&pairs, 0.5).unwrap();
        for (a, b) in t.matrix().iter().zip(truth.matrix().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(matches!(
            fit_trimmed(&pairs[..11], 0.5),
            Err(Error::Underdetermined { found: 11, needed: 12 })
        ));
    }

    #[test]
    fn identity_and_shift_application() {
        let g = Geometry::centered([8, 8, 8], [2.0; 3]).unwrap();
        let v = Volume::from_world_fn(g, |p| (p[0] + 2.0 * p[1] - p[2]) as f32);
        let same = apply_affine(&v, &AffineTransform::identity(), &g).unwrap();
        assert_eq!(same.data, v.data);
        let shifted = apply_affine(&v, &AffineTransform::translation([2.0, 0.0, 0.0]), &g).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                assert!(!shifted.valid[g.index(7, y, z)]);
                assert_eq!(shifted.get([3, y, z]), v.get([4, y, z]));
            }
        }
    }

    fn small_phantom() -> Volume {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::for_grid([64, 64, 64], [3.0; 3], 3)
        };
        generate_phantom(&spec).unwrap().0
    }

    #[test]
    fn self_registration_is_identity() {
        let v = small_phantom();
        let t = register_affine(&v, &v, &AffineConfig::default()).unwrap();
        let tr = t.translation_part();
        assert!(tr.iter().all(|x| x.abs() < 0.1), "{tr:?}");
        let l = t.linear() - Matrix3::identity();
        assert!(l.iter().all(|x| x.abs() < 0.005), "{l}");
    }

    #[test]
    fn recovers_known_translation() {
        let v = small_phantom();
        let truth = AffineTransform::translation([10.0, -6.0, 4.0]);
        // Moving content sits at x - t, so the pull-back from reference is x + t.
        let moving = apply_affine(&v, &truth.inverse().unwrap(), &v.geom).unwrap();
        let t = register_affine(&moving, &v, &AffineConfig::default()).unwrap();
        let got = t.apply(v.geom.center());
        let want = truth.apply(v.geom.center());
        assert!(dist(got, want) < 0.5, "{got:?} vs {want:?}");
    }
}
