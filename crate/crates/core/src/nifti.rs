//! Strict single-file NIFTI-1 (`.nii`) codec.
//!
//! Only the subset the pipeline needs is accepted: 2D or 3D volumes stored
//! as `uint8`, `int16` or `float32`. The qform is ignored; the sform is used
//! when `sform_code > 0`, otherwise a diagonal affine is built from
//! `pixdim`. Endianness is detected from `sizeof_hdr`.

use thiserror::Error;

use crate::volume::{diagonal_affine, Affine, ScalarVolume, VolumeError, VolumeGeometry, VoxelGrid};

pub const HEADER_SIZE: usize = 348;
/// Offset of the voxel data in files written by [`write_nifti`].
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiftiError {
    #[error("not a single-file NIFTI-1 payload")]
    BadMagic,
    #[error("unsupported datatype code {0} (expected 2, 4 or 16)")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0] = {0} (expected 2 or 3)")]
    UnsupportedDims(i16),
    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),
    #[error("vox_offset {0} is below 352")]
    BadVoxOffset(f32),
    #[error("value {value} at index {index} does not fit datatype {dtype}")]
    RangeOverflow { index: usize, value: f32, dtype: i16 },
    #[error("invalid output datatype code {0}")]
    InvalidDtype(i16),
    #[error("corrupt gzip stream: {0}")]
    Gzip(String),
    #[error(transparent)]
    Geometry(#[from] VolumeError),
}

/// The three voxel encodings the codec understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    UInt8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Self::UInt8),
            4 => Some(Self::Int16),
            16 => Some(Self::Float32),
            _ => None,
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().expect("slice length checked")
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.array(at)),
            Endian::Big => i16::from_be_bytes(self.array(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.array(at)),
            Endian::Big => f32::from_be_bytes(self.array(at)),
        }
    }
}

/// Decodes a complete `.nii` payload into an intensity volume with
/// `scl_slope`/`scl_inter` applied.
pub fn read_nifti(bytes: &[u8]) -> Result<ScalarVolume, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { expected: HEADER_SIZE, actual: bytes.len() });
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::BadMagic);
    };
    let r = Reader { bytes, endian };
    if bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(NiftiError::BadMagic);
    }

    let ndim = r.i16(offsets::DIM);
    if !(2..=3).contains(&ndim) {
        return Err(NiftiError::UnsupportedDims(ndim));
    }
    let code = r.i16(offsets::DATATYPE);
    let dtype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;

    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let raw = r.i16(offsets::DIM + 2 * (axis + 1));
        if raw < 1 {
            return Err(VolumeError::InvalidGeometry(format!("dim[{}] = {raw}", axis + 1)).into());
        }
        *d = raw as usize;
    }

    let mut spacing = [1.0f64; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let raw = r.f32(offsets::PIXDIM + 4 * (axis + 1)) as f64;
        // 2D files commonly leave pixdim[3] at zero.
        if axis as i16 >= ndim && !(raw.is_finite() && raw > 0.0) {
            continue;
        }
        *s = raw.abs();
    }

    let sform_code = r.i16(offsets::SFORM_CODE);
    let affine: Affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (row, out) in a.iter_mut().take(3).enumerate() {
            for (col, v) in out.iter_mut().enumerate() {
                *v = r.f32(offsets::SROW_X + 16 * row + 4 * col) as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else {
        diagonal_affine(spacing)
    };
    let geometry = VolumeGeometry::new(dims, spacing, affine)?;

    let vox_offset = r.f32(offsets::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= DEFAULT_VOX_OFFSET as f32) {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let start = vox_offset as usize;
    let n = geometry.voxel_count();
    let width = dtype.bytes_per_voxel();
    let expected = start + n * width;
    if bytes.len() < expected {
        return Err(NiftiError::Truncated { expected, actual: bytes.len() });
    }

    let mut slope = r.f32(offsets::SCL_SLOPE);
    let inter = r.f32(offsets::SCL_INTER);
    if slope == 0.0 {
        slope = 1.0;
    }
    let scale = !(slope == 1.0 && inter == 0.0);
    let data = &bytes[start..expected];
    let mut voxels = Vec::with_capacity(n);
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let raw = match dtype {
            Datatype::UInt8 => chunk[0] as f32,
            Datatype::Int16 => r_i16(chunk, endian) as f32,
            Datatype::Float32 => {
                let b: [u8; 4] = chunk.try_into().unwrap();
                match endian {
                    Endian::Little => f32::from_le_bytes(b),
                    Endian::Big => f32::from_be_bytes(b),
                }
            }
        };
        let value = if scale { raw * slope + inter } else { raw };
        if !value.is_finite() {
            return Err(NiftiError::NonFinite(i));
        }
        voxels.push(value);
    }
    Ok(ScalarVolume::new(geometry, voxels)?)
}

fn r_i16(chunk: &[u8], endian: Endian) -> i16 {
    let b = [chunk[0], chunk[1]];
    match endian {
        Endian::Little => i16::from_le_bytes(b),
        Endian::Big => i16::from_be_bytes(b),
    }
}

/// Encodes a volume as little-endian NIFTI-1 with `vox_offset = 352`,
/// `scl_slope = 1` and `scl_inter = 0`.
///
/// Integer datatypes round to the nearest integer; values that do not fit
/// are rejected. Spacing and affine are stored as `f32`.
pub fn write_nifti<V: VoxelGrid + ?Sized>(volume: &V, dtype: i16) -> Result<Vec<u8>, NiftiError> {
    encode_nifti(volume, dtype, Endian::Little)
}

/// [`write_nifti`] with an explicit byte order.
pub fn encode_nifti<V: VoxelGrid + ?Sized>(volume: &V, dtype: i16, endian: Endian) -> Result<Vec<u8>, NiftiError> {
    let datatype = Datatype::from_code(dtype).ok_or(NiftiError::InvalidDtype(dtype))?;
    let geometry = volume.geometry();
    let n = geometry.voxel_count();
    let dims = geometry.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolumeError::InvalidGeometry(format!("dims {dims:?} exceed NIFTI-1 limits")).into());
    }

    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + n * datatype.bytes_per_voxel()];
    let put_i16 = |buf: &mut [u8], at: usize, v: i16| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 2].copy_from_slice(&b);
    };
    let put_i32 = |buf: &mut [u8], at: usize, v: i32| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 4].copy_from_slice(&b);
    };
    let put_f32 = |buf: &mut [u8], at: usize, v: f32| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 4].copy_from_slice(&b);
    };

    put_i32(&mut out, offsets::SIZEOF_HDR, HEADER_SIZE as i32);
    put_i16(&mut out, offsets::DIM, 3);
    for (axis, &d) in dims.iter().enumerate() {
        put_i16(&mut out, offsets::DIM + 2 * (axis + 1), d as i16);
    }
    for axis in 4..8 {
        put_i16(&mut out, offsets::DIM + 2 * axis, 1);
    }
    put_i16(&mut out, offsets::DATATYPE, datatype.code());
    put_i16(&mut out, offsets::BITPIX, (datatype.bytes_per_voxel() * 8) as i16);
    put_f32(&mut out, offsets::PIXDIM, 1.0);
    for (axis, &s) in geometry.spacing().iter().enumerate() {
        put_f32(&mut out, offsets::PIXDIM + 4 * (axis + 1), s as f32);
    }
    put_f32(&mut out, offsets::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut out, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut out, offsets::SCL_INTER, 0.0);
    // NIFTI_UNITS_MM
    out[offsets::XYZT_UNITS] = 2;
    put_i16(&mut out, offsets::QFORM_CODE, 0);
    put_i16(&mut out, offsets::SFORM_CODE, 1);
    for (row, values) in geometry.affine().iter().take(3).enumerate() {
        for (col, &v) in values.iter().enumerate() {
            put_f32(&mut out, offsets::SROW_X + 16 * row + 4 * col, v as f32);
        }
    }
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC);

    let data = &mut out[DEFAULT_VOX_OFFSET..];
    for i in 0..n {
        let value = volume.value_at(i);
        let overflow = || NiftiError::RangeOverflow { index: i, value, dtype };
        match datatype {
            Datatype::UInt8 => {
                let v = value.round();
                if !(0.0..=255.0).contains(&v) {
                    return Err(overflow());
                }
                data[i] = v as u8;
            }
            Datatype::Int16 => {
                let v = value.round();
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&v) {
                    return Err(overflow());
                }
                put_i16(data, 2 * i, v as i16);
            }
            Datatype::Float32 => {
                if !value.is_finite() {
                    return Err(overflow());
                }
                put_f32(data, 4 * i, value);
            }
        }
    }
    Ok(out)
}

/// Like [`read_nifti`], but transparently inflates `.nii.gz` payloads
/// (detected by the gzip magic bytes, not the file name).
pub fn read_nifti_any(bytes: &[u8]) -> Result<ScalarVolume, NiftiError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        std::io::Read::read_to_end(&mut flate2::read::GzDecoder::new(bytes), &mut raw)
            .map_err(|e| NiftiError::Gzip(e.to_string()))?;
        read_nifti(&raw)
    } else {
        read_nifti(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{BinaryMask, ProbabilityVolume};

    /// Builds a header by hand, independent of the writer.
    fn handmade(dtype: i16, dims: [i16; 3], slope: f32, inter: f32, data: &[u8], big: bool) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        let i16b = |v: i16| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        let f32b = |v: f32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        let i32b = |v: i32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        b[0..4].copy_from_slice(&i32b(348));
        b[40..42].copy_from_slice(&i16b(3));
        for (k, d) in dims.iter().enumerate() {
            b[42 + 2 * k..44 + 2 * k].copy_from_slice(&i16b(*d));
        }
        b[70..72].copy_from_slice(&i16b(dtype));
        for k in 0..3 {
            b[80 + 4 * k..84 + 4 * k].copy_from_slice(&f32b(1.0));
        }
        b[108..112].copy_from_slice(&f32b(352.0));
        b[112..116].copy_from_slice(&f32b(slope));
        b[116..120].copy_from_slice(&f32b(inter));
        b[344..348].copy_from_slice(b"n+1\0");
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn slope_and_intercept_are_applied() {
        let bytes = handmade(2, [2, 2, 1], 2.0, 1.0, &[0, 1, 2, 3], false);
        let v = read_nifti(&bytes).unwrap();
        assert_eq!(v.geometry().dims(), [2, 2, 1]);
        assert_eq!(v.voxels(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_slope_means_identity() {
        let bytes = handmade(2, [2, 2, 1], 0.0, 0.0, &[0, 1, 2, 3], false);
        assert_eq!(read_nifti(&bytes).unwrap().voxels(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = handmade(2, [2, 2, 1], 1.0, 0.0, &[0; 4], false);
        bytes[344..348].copy_from_slice(b"x+1\0");
        assert_eq!(read_nifti(&bytes), Err(NiftiError::BadMagic));
        let mut bytes = handmade(2, [2, 2, 1], 1.0, 0.0, &[0; 4], false);
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert_eq!(read_nifti(&bytes), Err(NiftiError::BadMagic));
    }

    #[test]
    fn unsupported_datatype_and_dims() {
        let bytes = handmade(8, [2, 2, 1], 1.0, 0.0, &[0; 16], false);
        assert_eq!(read_nifti(&bytes), Err(NiftiError::UnsupportedDatatype(8)));
        let mut bytes = handmade(2, [2, 2, 1], 1.0, 0.0, &[0; 4], false);
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        assert_eq!(read_nifti(&bytes), Err(NiftiError::UnsupportedDims(4)));
    }

    #[test]
    fn truncated_payload() {
        let bytes = handmade(4, [2, 2, 1], 1.0, 0.0, &[0; 6], false);
        assert_eq!(read_nifti(&bytes), Err(NiftiError::Truncated { expected: 360, actual: 358 }));
        assert!(matches!(read_nifti(&bytes[..100]), Err(NiftiError::Truncated { .. })));
    }

    #[test]
    fn non_finite_float_is_rejected() {
        let mut data = Vec::new();
        for v in [0.0f32, f32::NAN, 1.0, 2.0] {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = handmade(16, [2, 2, 1], 1.0, 0.0, &data, false);
        assert_eq!(read_nifti(&bytes), Err(NiftiError::NonFinite(1)));
    }

    #[test]
    fn big_endian_twin_decodes_identically() {
        let values = [-7i16, 0, 300, 12000, -32768, 32767];
        let le: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let be: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        let a = read_nifti(&handmade(4, [3, 2, 1], 1.5, -2.0, &le, false)).unwrap();
        let b = read_nifti(&handmade(4, [3, 2, 1], 1.5, -2.0, &be, true)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.voxels()[2], 448.0);
    }

    #[test]
    fn zero_mask_layout() {
        let g = VolumeGeometry::from_spacing([3, 4, 5], [1.0, 1.0, 2.5]).unwrap();
        let bytes = write_nifti(&BinaryMask::zeros(g), 2).unwrap();
        assert_eq!(bytes.len(), 352 + 60);
        assert!(bytes[352..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(f32::from_le_bytes(bytes[108..112].try_into().unwrap()), 352.0);
        assert_eq!(f32::from_le_bytes(bytes[112..116].try_into().unwrap()), 1.0);
    }

    #[test]
    fn writer_rejects_overflow_and_bad_dtype() {
        let g = VolumeGeometry::from_spacing([2, 1, 1], [1.0; 3]).unwrap();
        let v = ScalarVolume::new(g, vec![1.0, 300.0]).unwrap();
        assert!(matches!(write_nifti(&v, 2), Err(NiftiError::RangeOverflow { index: 1, .. })));
        assert!(write_nifti(&v, 4).is_ok());
        assert_eq!(write_nifti(&v, 64), Err(NiftiError::InvalidDtype(64)));
    }

    #[test]
    fn probability_roundtrip_is_bit_exact() {
        let g = VolumeGeometry::from_spacing([3, 1, 1], [0.5, 0.7, 3.0]).unwrap();
        let p = ProbabilityVolume::new(g, vec![0.0, 0.123_456_79, 1.0]).unwrap();
        let back = read_nifti(&write_nifti(&p, 16).unwrap()).unwrap();
        let bits = |xs: &[f32]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.voxels()), bits(p.probabilities()));
        assert_eq!(back.geometry().spacing(), [0.5, 0.7f32 as f64, 3.0]);
    }

    #[test]
    fn sform_is_preferred_over_pixdim_diagonal() {
        let affine = [[0.0, -2.0, 0.0, 10.0], [2.0, 0.0, 0.0, -4.0], [0.0, 0.0, 3.0, 1.5], [0.0, 0.0, 0.0, 1.0]];
        let g = VolumeGeometry::new([2, 2, 2], [2.0, 2.0, 3.0], affine).unwrap();
        let v = ScalarVolume::new(g, vec![0.0; 8]).unwrap();
        let back = read_nifti(&write_nifti(&v, 16).unwrap()).unwrap();
        assert_eq!(back.geometry().affine(), &affine);
    }

    #[test]
    fn gzip_payloads_are_inflated() {
        use std::io::Write;
        let g = VolumeGeometry::from_spacing([2, 2, 1], [1.0; 3]).unwrap();
        let v = ScalarVolume::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let raw = write_nifti(&v, 16).unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(read_nifti_any(&gz).unwrap(), v);
        assert_eq!(read_nifti_any(&raw).unwrap(), v);
        assert!(matches!(read_nifti_any(&gz[..20]), Err(NiftiError::Gzip(_))));
    }
}
