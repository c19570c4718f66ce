use rayon::prelude::*;

use super::ssc::{Packed, SscDescriptor, PACKED_MAX_DISTANCE, SENTINEL};
use super::KeypointSet;
use crate::error::Result;
use crate::volume::{Geometry, Mask};

/// Candidate displacements `k * step` (voxels) for `|k| <= half` per axis, x fastest,
/// starting from the most negative corner.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub half: [usize; 3],
    pub step: [usize; 3],
    /// Voxel spacing (mm) of the grid the offsets are measured on.
    pub spacing: [f64; 3],
}

impl CandidateSet {
    pub fn new(radius: [usize; 3], step: [usize; 3], spacing: [f64; 3]) -> CandidateSet {
        let step = step.map(|s| s.max(1));
        CandidateSet {
            half: [0, 1, 2].map(|a| radius[a] / step[a]),
            step,
            spacing,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        self.half.map(|h| 2 * h + 1)
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offset(&self, label: usize) -> [isize; 3] {
        let c = self.counts();
        let i = [label % c[0], (label / c[0]) % c[1], label / (c[0] * c[1])];
        [0, 1, 2].map(|a| (i[a] as isize - self.half[a] as isize) * self.step[a] as isize)
    }

    pub fn displacement_mm(&self, label: usize) -> [f64; 3] {
        let o = self.offset(label);
        [0, 1, 2].map(|a| o[a] as f64 * self.spacing[a])
    }

    /// Lattice spacing in mm per axis.
    pub fn step_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.step[a] as f64 * self.spacing[a])
    }

    pub fn zero_label(&self) -> usize {
        let c = self.counts();
        self.half[0] + c[0] * (self.half[1] + c[1] * self.half[2])
    }
}

/// Patch positions (voxel offsets) compared between reference and moving descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSampling {
    pub offsets: Vec<[isize; 3]>,
}

impl PatchSampling {
    /// Five positions per axis at `round(r * {-1, -1/2, 0, 1/2, 1})`, duplicates removed.
    pub fn sparse(radius: [usize; 3]) -> PatchSampling {
        let axis = |r: usize| {
            let mut v: Vec<isize> = [-1.0, -0.5, 0.0, 0.5, 1.0]
                .iter()
                .map(|f: &f64| (f * r as f64).round() as isize)
                .collect();
            v.dedup();
            v
        };
        PatchSampling::from_axes(axis(radius[0]), axis(radius[1]), axis(radius[2]))
    }

    /// Every voxel of the box.
    pub fn dense(radius: [usize; 3]) -> PatchSampling {
        let axis = |r: usize| (-(r as isize)..=r as isize).collect::<Vec<_>>();
        PatchSampling::from_axes(axis(radius[0]), axis(radius[1]), axis(radius[2]))
    }

    fn from_axes(xs: Vec<isize>, ys: Vec<isize>, zs: Vec<isize>) -> PatchSampling {
        let mut offsets = Vec::new();
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    offsets.push([x, y, z]);
                }
            }
        }
        PatchSampling { offsets }
    }

    fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.offsets.iter().map(|o| o[a].unsigned_abs()).max().unwrap_or(0))
    }
}

/// Row-major `keypoints x candidates` cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub candidates: CandidateSet,
    pub rows: usize,
    pub data: Vec<f32>,
}

impl CostTable {
    pub fn row(&self, k: usize) -> &[f32] {
        let n = self.candidates.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub(crate) fn row_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.candidates.len();
        &mut self.data[k * n..(k + 1) * n]
    }
}

/// Packed descriptors with a sentinel border wide enough that no lookup needs a bounds
/// check. Voxels outside the effective mask hold the sentinel too.
struct Padded {
    dims: [usize; 3],
    pad: [usize; 3],
    data: Vec<Packed>,
}

impl Padded {
    fn new(desc: &SscDescriptor, mask: &Mask, pad: [usize; 3]) -> Padded {
        let g = desc.geom;
        let dims = [0, 1, 2].map(|a| g.dims[a] + 2 * pad[a]);
        let mut data = vec![SENTINEL; dims[0] * dims[1] * dims[2]];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                let src = g.index(0, j, k);
                let dst = pad[0] + dims[0] * (j + pad[1] + dims[1] * (k + pad[2]));
                for i in 0..g.dims[0] {
                    if mask.bits[src + i] {
                        data[dst + i] = SscDescriptor::pack(&desc.channels[src + i]);
                    }
                }
            }
        }
        Padded { dims, pad, data }
    }

    fn index(&self, v: [usize; 3]) -> usize {
        (v[0] + self.pad[0]) + self.dims[0] * ((v[1] + self.pad[1]) + self.dims[1] * (v[2] + self.pad[2]))
    }

    fn stride(&self, o: [isize; 3]) -> isize {
        o[0] + self.dims[0] as isize * (o[1] + self.dims[1] as isize * o[2])
    }
}

/// Adds, for each of `out.len()` candidates along x, the L1 distances between every
/// reference sample and the moving descriptor it lands on.
#[cfg(target_arch = "x86_64")]
#[inline(always)]
fn row_sums(samples: &[(Packed, usize)], mov: &[Packed], shift: usize, qx: usize, out: &mut [u32]) {
    use std::arch::x86_64::*;
    const LANES: usize = 32;
    for (chunk, out) in out.chunks_mut(LANES).enumerate() {
        let offset = chunk * LANES * qx;
        // SAFETY: SSE2 is part of the x86_64 baseline; all loads are of whole 16-byte
        // descriptors inside `mov` (bounds are checked by the slice indexing).
        unsafe {
            let mut acc = [_mm_setzero_si128(); LANES];
            for (r, base) in samples {
                let rv = _mm_loadu_si128(r.as_ptr().cast());
                let line = &mov[base + shift + offset..];
                for (ix, a) in acc[..out.len()].iter_mut().enumerate() {
                    let m = _mm_loadu_si128(line[ix * qx].as_ptr().cast());
                    *a = _mm_add_epi64(*a, _mm_sad_epu8(rv, m));
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                *o += _mm_cvtsi128_si32(_mm_add_epi64(*a, _mm_srli_si128::<8>(*a))) as u32;
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn row_sums(samples: &[(Packed, usize)], mov: &[Packed], shift: usize, qx: usize, out: &mut [u32]) {
    for (r, base) in samples {
        let line = &mov[base + shift..];
        for (ix, o) in out.iter_mut().enumerate() {
            *o += r.iter().zip(&line[ix * qx]).map(|(a, b)| a.abs_diff(*b) as u32).sum::<u32>();
        }
    }
}

/// `cost(k, d)`: mean over the patch samples of the normalised L1 distance between the
/// packed reference descriptor at `x_k + o` and the moving descriptor at `x_k + o + d`.
/// Moving samples outside the effective mask count as the maximum distance 1. Reference
/// samples outside it would add the same constant to every candidate and are left out.
pub fn unary_costs(
    ref_desc: &SscDescriptor,
    mov_desc: &SscDescriptor,
    effective: &Mask,
    kps: &KeypointSet,
    candidates: &CandidateSet,
    patch: &PatchSampling,
) -> Result<CostTable> {
    let g: Geometry = ref_desc.geom;
    g.ensure_matches(&mov_desc.geom, "moving descriptors")?;
    g.ensure_matches(&effective.geom, "effective mask")?;
    let pe = patch.extent();
    let pad = [0, 1, 2].map(|a| candidates.half[a] * candidates.step[a] + pe[a]);
    let rp = Padded::new(ref_desc, effective, pad);
    let mp = Padded::new(mov_desc, effective, pad);
    let patch_strides: Vec<isize> = patch.offsets.iter().map(|&o| rp.stride(o)).collect();
    let h = candidates.half.map(|v| v as isize);
    let q = candidates.step.map(|v| v as isize);
    let first = rp.stride([-h[0] * q[0], -h[1] * q[1], -h[2] * q[2]]);
    let [cx, cy, cz] = candidates.counts();
    let sy = rp.stride([0, q[1], 0]) as usize;
    let sz = rp.stride([0, 0, q[2]]) as usize;
    let qx = q[0] as usize;
    let n = candidates.len();

    // Consecutive keypoints on the same (y, z) row read the same moving rows, so they
    // are processed together while those rows are cached.
    let mut runs: Vec<std::ops::Range<usize>> = Vec::new();
    for k in 0..kps.len() {
        let p = kps.positions[k];
        match runs.last_mut() {
            Some(r) if kps.positions[r.start][1..] == p[1..] => r.end = k + 1,
            _ => runs.push(k..k + 1),
        }
    }
    let mut data = vec![0f32; kps.len() * n];
    let mut chunks = Vec::with_capacity(runs.len());
    let mut rest = data.as_mut_slice();
    for r in &runs {
        let (head, tail) = rest.split_at_mut(r.len() * n);
        chunks.push((r.clone(), head));
        rest = tail;
    }
    chunks.into_par_iter().for_each(|(run, out)| {
        // Per keypoint: reference samples in row order and the moving index of their
        // first candidate.
        let samples: Vec<Vec<(Packed, usize)>> = run
            .clone()
            .map(|k| {
                let centre = rp.index(kps.positions[k]) as isize;
                patch_strides
                    .iter()
                    .filter_map(|&ps| {
                        let ri = (centre + ps) as usize;
                        let r = rp.data[ri];
                        (r != SENTINEL).then(|| (r, (ri as isize + first) as usize))
                    })
                    .collect()
            })
            .collect();
        let mut acc = vec![0u32; run.len() * n];
        let mut c = 0;
        for iz in 0..cz {
            for iy in 0..cy {
                let shift = iz * sz + iy * sy;
                for (j, smp) in samples.iter().enumerate() {
                    row_sums(smp, &mp.data, shift, qx, &mut acc[j * n + c..j * n + c + cx]);
                }
                c += cx;
            }
        }
        for (j, smp) in samples.iter().enumerate() {
            let used = smp.len();
            let scale = 1.0 / (PACKED_MAX_DISTANCE as f64 * used.max(1) as f64);
            for (o, &a) in out[j * n..(j + 1) * n].iter_mut().zip(&acc[j * n..(j + 1) * n]) {
                *o = if used == 0 { 1.0 } else { (a as f64 * scale) as f32 };
            }
        }
    });
    Ok(CostTable {
        candidates: candidates.clone(),
        rows: kps.len(),
        data,
    })
}
