//! Reader and writer for a NIfTI-1 subset: single-file (`.nii`),
//! little-endian, 3D, scalar `int16` or `float32` data.
//!
//! Only the fields this pipeline needs are interpreted: dimensions,
//! voxel spacing (`pixdim`), the scale slope/intercept pair, the sform
//! translation (as the world origin), and the magic. Everything else is
//! written as zeros and ignored on read.

use std::fs;
use std::path::Path;

use super::{Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
/// Single-file NIfTI stores 4 extension bytes after the header, so voxel
/// data starts at 352.
const DATA_OFFSET: usize = 352;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Byte offsets of the header fields we touch.
mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40; // i16[8]
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76; // f32[8]
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280; // f32[4]
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344; // char[4]
}

fn read_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}

fn read_i32(buf: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn read_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn write_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn write_i32(buf: &mut [u8], at: usize, v: i32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn write_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// Reads a volume from a single-file NIfTI-1 image.
///
/// `int16` voxels are converted to float through the header's
/// slope/intercept pair (`value = raw * slope + inter`); a zero slope
/// means identity scaling per the format convention. `float32` voxels
/// with identity scaling round-trip bit-exactly.
pub fn read_nifti(path: &Path) -> Result<Volume3D, VolumeError> {
    let bytes = fs::read(path)?;
    if bytes.len() < DATA_OFFSET {
        return Err(VolumeError::MalformedHeader(format!(
            "file is {} bytes, smaller than the {} byte header",
            bytes.len(),
            DATA_OFFSET
        )));
    }

    let sizeof_hdr = read_i32(&bytes, offset::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(VolumeError::MalformedHeader(format!(
            "sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}"
        )));
    }
    let magic = &bytes[offset::MAGIC..offset::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(VolumeError::MalformedHeader(format!("bad magic {magic:?}")));
    }

    let ndim = read_i16(&bytes, offset::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::MalformedHeader(format!("dim[0] is {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = read_i16(&bytes, offset::DIM + 2 * (i + 1));
        if i < ndim as usize {
            if raw <= 0 {
                return Err(VolumeError::MalformedHeader(format!(
                    "dim[{}] is {raw}",
                    i + 1
                )));
            }
            *d = raw as usize;
        }
    }
    // Accept only genuinely 3D images (higher dims present but singleton is fine).
    if dims[3..].iter().any(|&d| d > 1) {
        return Err(VolumeError::MalformedHeader(
            "image has more than three non-singleton dimensions".to_string(),
        ));
    }
    let dims = [dims[0], dims[1], dims[2]];

    let datatype = read_i16(&bytes, offset::DATATYPE);
    let bytes_per_voxel = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };

    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = read_f32(&bytes, offset::PIXDIM + 4 * (i + 1));
    }

    let vox_offset = read_f32(&bytes, offset::VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(VolumeError::MalformedHeader(format!(
            "vox_offset is {vox_offset}"
        )));
    }
    let data_start = vox_offset as usize;

    let slope = read_f32(&bytes, offset::SCL_SLOPE);
    let inter = read_f32(&bytes, offset::SCL_INTER);

    let sform_code = read_i16(&bytes, offset::SFORM_CODE);
    let origin = if sform_code > 0 {
        [
            read_f32(&bytes, offset::SROW_X + 12),
            read_f32(&bytes, offset::SROW_Y + 12),
            read_f32(&bytes, offset::SROW_Z + 12),
        ]
    } else {
        [0.0; 3]
    };

    let n = dims[0] * dims[1] * dims[2];
    let expected = n * bytes_per_voxel;
    let available = bytes.len().saturating_sub(data_start);
    if available < expected {
        return Err(VolumeError::TruncatedData { expected, got: available });
    }
    let payload = &bytes[data_start..data_start + expected];

    // Identity scaling must be a bit-exact pass-through (slope 0 means
    // "no scaling" per the format; slope 1 / inter 0 must not disturb
    // signed zeros), so skip the arithmetic in those cases.
    let identity = slope == 0.0 || (slope == 1.0 && inter == 0.0);
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_INT16 => {
            for chunk in payload.chunks_exact(2) {
                let raw = i16::from_le_bytes([chunk[0], chunk[1]]);
                let v = if identity {
                    raw as f32
                } else {
                    raw as f32 * slope + inter
                };
                data.push(v);
            }
        }
        DT_FLOAT32 => {
            for chunk in payload.chunks_exact(4) {
                let raw = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                let v = if identity { raw } else { raw * slope + inter };
                data.push(v);
            }
        }
        _ => unreachable!("datatype validated above"),
    }

    Volume3D::new(dims, spacing, origin, data)
}

/// Writes a volume as a single-file NIfTI-1 image with `float32` voxels,
/// identity scaling, and an axis-aligned sform carrying the origin.
pub fn write_nifti(path: &Path, vol: &Volume3D) -> Result<(), VolumeError> {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let origin = vol.origin();

    let mut header = vec![0u8; DATA_OFFSET];
    write_i32(&mut header, offset::SIZEOF_HDR, HEADER_SIZE as i32);
    write_i16(&mut header, offset::DIM, 3);
    for i in 0..7 {
        let d = if i < 3 { dims[i] as i16 } else { 1 };
        write_i16(&mut header, offset::DIM + 2 * (i + 1), d);
    }
    write_i16(&mut header, offset::DATATYPE, DT_FLOAT32);
    write_i16(&mut header, offset::BITPIX, 32);
    write_f32(&mut header, offset::PIXDIM, 1.0);
    for i in 0..3 {
        write_f32(&mut header, offset::PIXDIM + 4 * (i + 1), spacing[i]);
    }
    write_f32(&mut header, offset::VOX_OFFSET, DATA_OFFSET as f32);
    write_f32(&mut header, offset::SCL_SLOPE, 1.0);
    write_f32(&mut header, offset::SCL_INTER, 0.0);
    header[offset::XYZT_UNITS] = 2; // millimeters
    write_i16(&mut header, offset::SFORM_CODE, 1);
    write_f32(&mut header, offset::SROW_X, spacing[0]);
    write_f32(&mut header, offset::SROW_X + 12, origin[0]);
    write_f32(&mut header, offset::SROW_Y + 4, spacing[1]);
    write_f32(&mut header, offset::SROW_Y + 12, origin[1]);
    write_f32(&mut header, offset::SROW_Z + 8, spacing[2]);
    write_f32(&mut header, offset::SROW_Z + 12, origin[2]);
    header[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut out = header;
    out.reserve(vol.voxel_count() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
