//! Single-file NIfTI-1 (`.nii`, optionally gzipped) reader and writer for the subset the
//! pipeline needs: 3D int16/float32 scalar volumes on axis-aligned grids, plus 3-component
//! displacement fields (`dim[0] = 5`, intent code 1007).
//!
//! Volumes are always written as float32 with a diagonal sform; missing voxels are NaN.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume, IMPUTE_HU};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const INTENT_VECTOR: i16 = 1007;
pub const MAGIC: &[u8; 4] = b"n+1\0";
/// Raw int16 value reserved for "no data".
pub const INT16_SENTINEL: i16 = -32768;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// The header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

impl NiftiHeader {
    /// Parses the 348-byte header, detecting byte order from `sizeof_hdr`.
    /// Returns the header and whether the file is big-endian.
    pub fn parse(buf: &[u8]) -> Result<(NiftiHeader, bool)> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "file has {} bytes, shorter than a header",
                buf.len()
            )));
        }
        let mut r = Reader {
            buf,
            big_endian: false,
        };
        if r.i32(offsets::SIZEOF_HDR) != HEADER_SIZE as i32 {
            r.big_endian = true;
            if r.i32(offsets::SIZEOF_HDR) != HEADER_SIZE as i32 {
                return Err(Error::MalformedHeader("sizeof_hdr is not 348".into()));
            }
        }
        if &buf[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
            return Err(Error::MalformedHeader(
                "magic is not \"n+1\" (only single-file NIfTI-1 is supported)".into(),
            ));
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = r.i16(offsets::DIM + 2 * i);
            pixdim[i] = r.f32(offsets::PIXDIM + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, s) in srow.iter_mut().enumerate() {
            for (col, v) in s.iter_mut().enumerate() {
                *v = r.f32(offsets::SROW_X + 16 * row + 4 * col);
            }
        }
        let hdr = NiftiHeader {
            dim,
            intent_code: r.i16(offsets::INTENT_CODE),
            datatype: r.i16(offsets::DATATYPE),
            bitpix: r.i16(offsets::BITPIX),
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            qform_code: r.i16(offsets::QFORM_CODE),
            sform_code: r.i16(offsets::SFORM_CODE),
            quatern: [0, 1, 2].map(|i| r.f32(offsets::QUATERN_B + 4 * i)),
            qoffset: [0, 1, 2].map(|i| r.f32(offsets::QOFFSET_X + 4 * i)),
            srow,
        };
        Ok((hdr, r.big_endian))
    }

    /// Little-endian 348-byte encoding followed by the 4-byte empty extension flag.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        let mut put = |off: usize, bytes: &[u8]| b[off..off + bytes.len()].copy_from_slice(bytes);
        put(offsets::SIZEOF_HDR, &(HEADER_SIZE as i32).to_le_bytes());
        for i in 0..8 {
            put(offsets::DIM + 2 * i, &self.dim[i].to_le_bytes());
            put(offsets::PIXDIM + 4 * i, &self.pixdim[i].to_le_bytes());
        }
        put(offsets::INTENT_CODE, &self.intent_code.to_le_bytes());
        put(offsets::DATATYPE, &self.datatype.to_le_bytes());
        put(offsets::BITPIX, &self.bitpix.to_le_bytes());
        put(offsets::VOX_OFFSET, &self.vox_offset.to_le_bytes());
        put(offsets::SCL_SLOPE, &self.scl_slope.to_le_bytes());
        put(offsets::SCL_INTER, &self.scl_inter.to_le_bytes());
        put(offsets::XYZT_UNITS, &[2u8]);
        put(offsets::DESCRIP, b"chestatlas");
        put(offsets::QFORM_CODE, &self.qform_code.to_le_bytes());
        put(offsets::SFORM_CODE, &self.sform_code.to_le_bytes());
        for i in 0..3 {
            put(offsets::QUATERN_B + 4 * i, &self.quatern[i].to_le_bytes());
            put(offsets::QOFFSET_X + 4 * i, &self.qoffset[i].to_le_bytes());
        }
        for row in 0..3 {
            for col in 0..4 {
                put(
                    offsets::SROW_X + 16 * row + 4 * col,
                    &self.srow[row][col].to_le_bytes(),
                );
            }
        }
        put(offsets::MAGIC, MAGIC);
        b
    }

    /// Float32 header on an axis-aligned grid with `dim` voxels per axis.
    fn float32_on(geom: &Geometry, dim: [i16; 8], intent_code: i16) -> NiftiHeader {
        let s = geom.spacing;
        let o = geom.origin;
        NiftiHeader {
            dim,
            intent_code,
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 0.0, 0.0, 0.0, 0.0],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 1,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [o[0] as f32, o[1] as f32, o[2] as f32],
            srow: [
                [s[0] as f32, 0.0, 0.0, o[0] as f32],
                [0.0, s[1] as f32, 0.0, o[1] as f32],
                [0.0, 0.0, s[2] as f32, o[2] as f32],
            ],
        }
    }

    /// Voxel-to-world 3x4 matrix: sform when `sform_code > 0`, else the quaternion form.
    fn voxel_to_world(&self) -> [[f64; 4]; 3] {
        if self.sform_code > 0 {
            return self.srow.map(|r| r.map(|v| v as f64));
        }
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            qfac * self.pixdim[3] as f64,
        ];
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            for col in 0..3 {
                m[r][col] = rot[r][col] * scale[col];
            }
            m[r][3] = self.qoffset[r] as f64;
        }
        m
    }
}

/// How each internal (world-aligned) axis maps onto a file axis.
#[derive(Debug, Clone, Copy)]
struct AxisMap {
    file_axis: usize,
    flipped: bool,
}

/// Reduces a voxel-to-world matrix to an axis-aligned geometry plus the axis
/// permutation/flips needed to reorder the payload. Oblique matrices are rejected.
fn axis_aligned(m: &[[f64; 4]; 3], file_dims: [usize; 3]) -> Result<(Geometry, [AxisMap; 3])> {
    let mut maps = [AxisMap {
        file_axis: 0,
        flipped: false,
    }; 3];
    let mut used = [false; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for row in 0..3 {
        let (col, &big) = m[row][..3]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("three columns");
        let tol = 1e-4 * big.abs();
        let off_axis = (0..3).any(|c| c != col && m[row][c].abs() > tol);
        if big == 0.0 || off_axis || used[col] {
            return Err(Error::Orientation(format!(
                "voxel-to-world matrix {m:?} is not a permutation/flip of the axes"
            )));
        }
        used[col] = true;
        spacing[row] = big.abs();
        let flipped = big < 0.0;
        origin[row] = if flipped {
            m[row][3] + big * (file_dims[col] as f64 - 1.0)
        } else {
            m[row][3]
        };
        maps[row] = AxisMap {
            file_axis: col,
            flipped,
        };
    }
    let dims = [0, 1, 2].map(|a| file_dims[maps[a].file_axis]);
    Ok((Geometry::new(dims, spacing, origin)?, maps))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let out = if gz {
        // Fixed header (no mtime/name) so identical volumes give identical files.
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn payload<'a>(buf: &'a [u8], hdr: &NiftiHeader, n_values: usize) -> Result<&'a [u8]> {
    if !(hdr.vox_offset >= VOX_OFFSET as f32) {
        return Err(Error::MalformedHeader(format!(
            "vox_offset {} is before the end of the header",
            hdr.vox_offset
        )));
    }
    let start = hdr.vox_offset as usize;
    let bytes = n_values * (hdr.bitpix.max(0) as usize / 8);
    buf.get(start..start + bytes).ok_or_else(|| {
        Error::MalformedHeader(format!(
            "payload truncated: need {bytes} bytes at offset {start}, file has {}",
            buf.len()
        ))
    })
}

fn check_datatype(hdr: &NiftiHeader) -> Result<()> {
    match (hdr.datatype, hdr.bitpix) {
        (DT_INT16, 16) | (DT_FLOAT32, 32) => Ok(()),
        (DT_INT16, _) | (DT_FLOAT32, _) => Err(Error::MalformedHeader(format!(
            "bitpix {} inconsistent with datatype {}",
            hdr.bitpix, hdr.datatype
        ))),
        (dt, _) => Err(Error::UnsupportedDatatype(dt)),
    }
}

fn spatial_dims(hdr: &NiftiHeader) -> Result<[usize; 3]> {
    let mut d = [0usize; 3];
    for a in 0..3 {
        let v = hdr.dim[a + 1];
        if v < 1 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {v}", a + 1)));
        }
        d[a] = v as usize;
    }
    for a in 1..=3 {
        if !(hdr.pixdim[a] > 0.0) && hdr.sform_code <= 0 {
            return Err(Error::MalformedHeader(format!(
                "pixdim[{a}] = {} is not positive",
                hdr.pixdim[a]
            )));
        }
    }
    Ok(d)
}

/// Decodes raw values to (value, valid) applying the intensity rescale.
fn decode(bytes: &[u8], hdr: &NiftiHeader, big_endian: bool) -> Vec<(f32, bool)> {
    let slope = if hdr.scl_slope == 0.0 || !hdr.scl_slope.is_finite() {
        1.0
    } else {
        hdr.scl_slope
    };
    let inter = if hdr.scl_inter.is_finite() {
        hdr.scl_inter
    } else {
        0.0
    };
    let identity = slope == 1.0 && inter == 0.0;
    let rescale = |v: f32| if identity { v } else { v * slope + inter };
    match hdr.datatype {
        DT_INT16 => bytes
            .chunks_exact(2)
            .map(|c| {
                let raw = if big_endian {
                    i16::from_be_bytes([c[0], c[1]])
                } else {
                    i16::from_le_bytes([c[0], c[1]])
                };
                if raw == INT16_SENTINEL {
                    (IMPUTE_HU, false)
                } else {
                    (rescale(raw as f32), true)
                }
            })
            .collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                let raw = if big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                };
                let v = rescale(raw);
                if v.is_finite() {
                    (v, true)
                } else {
                    (IMPUTE_HU, false)
                }
            })
            .collect(),
    }
}

/// Reorders a file-order payload into the internal axis-aligned layout.
fn reorder<T: Copy>(src: &[T], file_dims: [usize; 3], geom: &Geometry, maps: &[AxisMap; 3]) -> Vec<T> {
    let identity = maps
        .iter()
        .enumerate()
        .all(|(a, m)| m.file_axis == a && !m.flipped);
    if identity {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(src.len());
    for idx in 0..geom.len() {
        let v = geom.coords(idx);
        let mut f = [0usize; 3];
        for a in 0..3 {
            let m = maps[a];
            f[m.file_axis] = if m.flipped { geom.dims[a] - 1 - v[a] } else { v[a] };
        }
        out.push(src[f[0] + file_dims[0] * (f[1] + file_dims[1] * f[2])]);
    }
    out
}

/// Reads a 3D int16/float32 NIfTI-1 volume. Non-finite floats and the int16 sentinel
/// become invalid voxels.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let (hdr, big_endian) = NiftiHeader::parse(&buf)?;
    if hdr.dim[0] != 3 {
        return Err(Error::Dimension(hdr.dim[0]));
    }
    check_datatype(&hdr)?;
    let file_dims = spatial_dims(&hdr)?;
    let n = file_dims.iter().product();
    let raw = decode(payload(&buf, &hdr, n)?, &hdr, big_endian);
    let (geom, maps) = axis_aligned(&hdr.voxel_to_world(), file_dims)?;
    let values = reorder(&raw, file_dims, &geom, &maps);
    Volume::new(
        geom,
        values.iter().map(|p| p.0).collect(),
        values.iter().map(|p| p.1).collect(),
    )
}

/// Writes a float32 NIfTI-1 volume (gzipped when the path ends in `.gz`); invalid voxels
/// are stored as NaN.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let g = &vol.geom;
    let dim = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    check_dims_fit(g)?;
    let hdr = NiftiHeader::float32_on(g, dim, 0);
    let mut bytes = hdr.to_bytes();
    bytes.reserve(4 * vol.data.len());
    for (&d, &ok) in vol.data.iter().zip(&vol.valid) {
        let v = if ok { d } else { f32::NAN };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

fn check_dims_fit(g: &Geometry) -> Result<()> {
    if g.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidGeometry(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            g.dims
        )));
    }
    Ok(())
}

/// Writes a displacement field as a 5D float32 NIfTI (`dim = [5, nx, ny, nz, 1, 3]`,
/// intent 1007): the x, y and z component volumes concatenated.
pub fn write_vector_field(geom: &Geometry, vectors: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    check_dims_fit(geom)?;
    if vectors.len() != geom.len() {
        return Err(Error::InvalidGeometry("field length does not match geometry".into()));
    }
    let dim = [5, geom.dims[0] as i16, geom.dims[1] as i16, geom.dims[2] as i16, 1, 3, 1, 1];
    let hdr = NiftiHeader::float32_on(geom, dim, INTENT_VECTOR);
    let mut bytes = hdr.to_bytes();
    bytes.reserve(12 * vectors.len());
    for c in 0..3 {
        for v in vectors {
            bytes.extend_from_slice(&(v[c] as f32).to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a field written by [`write_vector_field`].
pub fn read_vector_field(path: impl AsRef<Path>) -> Result<(Geometry, Vec<[f64; 3]>)> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let (hdr, big_endian) = NiftiHeader::parse(&buf)?;
    if hdr.dim[0] != 5 || hdr.dim[4] != 1 || hdr.dim[5] != 3 {
        return Err(Error::Dimension(hdr.dim[0]));
    }
    if hdr.intent_code != INTENT_VECTOR {
        return Err(Error::MalformedHeader(format!(
            "intent code {} is not a vector field",
            hdr.intent_code
        )));
    }
    if hdr.datatype != DT_FLOAT32 || hdr.bitpix != 32 {
        return Err(Error::UnsupportedDatatype(hdr.datatype));
    }
    let file_dims = spatial_dims(&hdr)?;
    let (geom, maps) = axis_aligned(&hdr.voxel_to_world(), file_dims)?;
    if maps.iter().enumerate().any(|(a, m)| m.file_axis != a || m.flipped) {
        return Err(Error::Orientation("vector fields must be stored axis-aligned".into()));
    }
    let n = geom.len();
    let raw = decode(payload(&buf, &hdr, 3 * n)?, &hdr, big_endian);
    let mut out = vec![[0.0; 3]; n];
    for c in 0..3 {
        for i in 0..n {
            let (v, ok) = raw[c * n + i];
            if !ok {
                return Err(Error::MalformedHeader("non-finite displacement".into()));
            }
            out[i][c] = v as f64;
        }
    }
    Ok((geom, out))
}
