use crate::volume::{smooth_normalized, Geometry, Volume};

/// Unit neighbour offsets, one per channel: +x, -x, +y, -y, +z, -z.
pub const SSC_OFFSETS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Six-channel self-similarity descriptor, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SscDescriptor {
    pub geom: Geometry,
    pub channels: Vec<[f32; 6]>,
}

/// Bytes per quantized descriptor: six (c, 127 - c) pairs and four zero bytes.
pub(crate) type Packed = [u8; 16];

/// Packed value for voxels outside the effective region. Its L1 distance to every
/// valid packed descriptor is exactly the maximum, 6 * 254.
pub(crate) const SENTINEL: Packed = [254, 127, 254, 127, 254, 127, 254, 127, 254, 127, 254, 127, 0, 0, 0, 0];
pub(crate) const PACKED_MAX_DISTANCE: u32 = 6 * 254;

impl SscDescriptor {
    pub(crate) fn pack(v: &[f32; 6]) -> Packed {
        let mut out = [0u8; 16];
        for (c, &x) in v.iter().enumerate() {
            let q = (x.clamp(0.0, 1.0) * 127.0).round() as u8;
            out[2 * c] = q;
            out[2 * c + 1] = 127 - q;
        }
        out
    }
}

/// Channel `i` is the Gaussian-smoothed (sigma 1 voxel) squared difference between the
/// volume and its copy shifted by offset `i` (edges replicated), divided by the channel
/// mean plus `1e-6 * range^2`, then mapped through `exp(-c)`.
pub fn ssc_descriptor(vol: &Volume) -> SscDescriptor {
    let g = vol.geom;
    let n = g.len();
    let (lo, hi) = vol
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo) as f64;
    let eps = (1e-6 * range * range).max(f64::MIN_POSITIVE);
    let mut dist = vec![[0f32; 6]; n];
    let mut diff = vec![0f64; n];
    for (ch, o) in SSC_OFFSETS.iter().enumerate() {
        let axis = o.iter().position(|&v| v != 0).unwrap_or(0);
        let stride = [1, g.dims[0], g.dims[0] * g.dims[1]][axis];
        let n_axis = g.dims[axis];
        for (idx, d) in diff.iter_mut().enumerate() {
            let c = (idx / stride) % n_axis;
            let s = match o[axis] {
                1 if c + 1 < n_axis => idx + stride,
                -1 if c > 0 => idx - stride,
                _ => idx,
            };
            let t = vol.data[idx] as f64 - vol.data[s] as f64;
            *d = t * t;
        }
        let smoothed = smooth_normalized(&diff, None, g.dims, [1.0; 3]);
        for (out, v) in dist.iter_mut().zip(smoothed) {
            out[ch] = v as f32;
        }
    }
    let channels = dist
        .into_iter()
        .map(|d| {
            let mean = d.iter().map(|&x| x as f64).sum::<f64>() / 6.0;
            d.map(|x| (-(x as f64) / (mean + eps)).exp() as f32)
        })
        .collect();
    SscDescriptor { geom: g, channels }
}
