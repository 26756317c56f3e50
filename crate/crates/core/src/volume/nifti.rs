//! Minimal single-file NIfTI-1 (`.nii`, optionally gzipped) reader/writer.
//!
//! Only little-endian files with datatypes uint8, int16, float32 and
//! float64 are handled. Orientation is reduced to an axis-aligned origin:
//! `sform` translation when `sform_code > 0`, else the `qform` offsets.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Geometry, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self, VolumeError> {
        match code {
            2 => Ok(Self::Uint8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::BadHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn read_all(path: &Path) -> Result<Vec<u8>, VolumeError> {
    let io = |source| VolumeError::Io { path: path.to_path_buf(), source };
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(io)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_nifti(path: &Path) -> Result<Volume3D, VolumeError> {
    let bytes = read_all(path)?;
    parse_nifti(&bytes, path)
}

fn parse_nifti(bytes: &[u8], path: &Path) -> Result<Volume3D, VolumeError> {
    if bytes.len() < HEADER_SIZE {
        return Err(bad(path, format!("file is {} bytes, shorter than the 348-byte header", bytes.len())));
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    if le != HEADER_SIZE as i32 {
        if le.swap_bytes() == HEADER_SIZE as i32 {
            return Err(bad(path, "big-endian NIfTI is not supported"));
        }
        return Err(bad(path, format!("sizeof_hdr is {le}, expected 348")));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(bad(path, "magic is not n+1 (only single-file NIfTI-1 is supported)"));
    }
    let i16_at = |off: usize| LittleEndian::read_i16(&bytes[off..off + 2]);
    let f32_at = |off: usize| LittleEndian::read_f32(&bytes[off..off + 4]);

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(bad(path, format!("dim[0] = {ndim} is out of range")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = i16_at(42 + 2 * a);
        if v <= 0 {
            return Err(bad(path, format!("dim[{}] = {v} must be positive", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(bad(path, "only 3D volumes are supported"));
        }
    }
    let datatype = NiftiDatatype::from_code(i16_at(70))?;
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a) as f64;
        *s = if a < ndim as usize { v.abs() } else { 1.0 };
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(bad(path, format!("vox_offset {vox_offset} is invalid")));
    }
    let vox_offset = vox_offset as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let origin = if sform_code > 0 {
        [f32_at(280 + 12) as f64, f32_at(296 + 12) as f64, f32_at(312 + 12) as f64]
    } else if qform_code > 0 {
        [f32_at(268) as f64, f32_at(272) as f64, f32_at(276) as f64]
    } else {
        [0.0; 3]
    };

    let geom = Geometry::new(dims, spacing, origin)?;
    let expected = geom.len();
    let payload = bytes.get(vox_offset..).unwrap_or(&[]);
    let got = payload.len() / datatype.bytes();
    if got < expected {
        return Err(VolumeError::DimensionMismatch { expected, got });
    }
    let mut data = Vec::with_capacity(expected);
    let w = datatype.bytes();
    for i in 0..expected {
        let b = &payload[i * w..(i + 1) * w];
        let v = match datatype {
            NiftiDatatype::Uint8 => b[0] as f64,
            NiftiDatatype::Int16 => LittleEndian::read_i16(b) as f64,
            NiftiDatatype::Float32 => LittleEndian::read_f32(b) as f64,
            NiftiDatatype::Float64 => LittleEndian::read_f64(b),
        };
        data.push(v);
    }
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume3D::new(geom, data)
}

fn encode_header(vol: &Volume3D, datatype: NiftiDatatype) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let g = vol.geometry();
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[39] = 0;
    let dim: [i16; 8] = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (a, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * a..42 + 2 * a], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], datatype.code());
    LittleEndian::write_i16(&mut h[72..74], (datatype.bytes() * 8) as i16);
    let pixdim: [f32; 8] = [1.0, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (a, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * a..80 + 4 * a], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    LittleEndian::write_f32(&mut h[116..120], 0.0);
    // mm + seconds
    h[123] = 2 | 8;
    // qform: identity rotation, origin offsets
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..272 + 4 * a], g.origin[a] as f32);
    }
    for row in 0..3 {
        let base = 280 + 16 * row;
        for col in 0..4 {
            let v = if col == 3 {
                g.origin[row]
            } else if col == row {
                g.spacing[row]
            } else {
                0.0
            };
            LittleEndian::write_f32(&mut h[base + 4 * col..base + 4 * col + 4], v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Write a volume. Gzip compression is applied when the path ends in `.gz`.
pub fn save_nifti(vol: &Volume3D, path: &Path, datatype: NiftiDatatype) -> Result<(), VolumeError> {
    let mut bytes = encode_header(vol, datatype);
    bytes.reserve(vol.data().len() * datatype.bytes());
    let mut buf = [0u8; 8];
    for &v in vol.data() {
        match datatype {
            NiftiDatatype::Uint8 => bytes.push(v.round().clamp(0.0, 255.0) as u8),
            NiftiDatatype::Int16 => {
                LittleEndian::write_i16(&mut buf, v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
                bytes.extend_from_slice(&buf[..2]);
            }
            NiftiDatatype::Float32 => {
                LittleEndian::write_f32(&mut buf, v as f32);
                bytes.extend_from_slice(&buf[..4]);
            }
            NiftiDatatype::Float64 => {
                LittleEndian::write_f64(&mut buf, v);
                bytes.extend_from_slice(&buf);
            }
        }
    }
    let io = |source| VolumeError::Io { path: path.to_path_buf(), source };
    let mut file = File::create(path).map_err(io)?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(&bytes).map_err(io)?;
        let compressed = enc.finish().map_err(io)?;
        file.write_all(&compressed).map_err(io)?;
    } else {
        file.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample(spacing: [f64; 3]) -> Volume3D {
        let g = Geometry::new([5, 4, 3], spacing, [1.5, -2.0, 3.25]).unwrap();
        Volume3D::from_fn(g, |i, j, k| (i + 5 * j + 20 * k) as f64 * 0.5)
    }

    #[test]
    fn header_spacing_is_preserved() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("scan.nii");
        let vol = sample([0.39, 0.39, 0.6]);
        save_nifti(&vol, &p, NiftiDatatype::Float32).unwrap();
        let back = load_nifti(&p).unwrap();
        let sp = back.spacing();
        assert_eq!(sp, [0.39f32 as f64, 0.39f32 as f64, 0.6f32 as f64]);
        assert!((sp[0] - 0.39).abs() < 1e-6 && (sp[2] - 0.6).abs() < 1e-6);
        assert_eq!(back.data(), vol.data());
        assert_eq!(back.origin(), [1.5, -2.0, 3.25]);
    }

    #[test]
    fn all_datatypes_roundtrip_integer_values() {
        let dir = tempdir().unwrap();
        for (dt, name) in [
            (NiftiDatatype::Uint8, "u8.nii"),
            (NiftiDatatype::Int16, "i16.nii.gz"),
            (NiftiDatatype::Float32, "f32.nii"),
            (NiftiDatatype::Float64, "f64.nii.gz"),
        ] {
            let p = dir.path().join(name);
            let vol = sample([1.0; 3]).map(|v| v.floor());
            save_nifti(&vol, &p, dt).unwrap();
            assert_eq!(load_nifti(&p).unwrap().data(), vol.data(), "{name}");
        }
    }

    #[test]
    fn truncated_payload_is_dimension_mismatch() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("short.nii");
        save_nifti(&sample([1.0; 3]), &p, NiftiDatatype::Float32).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_nifti(&p), Err(VolumeError::DimensionMismatch { expected: 60, got: 58 })));
    }

    #[test]
    fn unsupported_datatype_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        save_nifti(&sample([1.0; 3]), &p, NiftiDatatype::Float32).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 512);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_nifti(&p), Err(VolumeError::UnsupportedDatatype(512))));
    }

    #[test]
    fn garbage_is_bad_header() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("garbage.nii");
        std::fs::write(&p, vec![7u8; 400]).unwrap();
        assert!(matches!(load_nifti(&p), Err(VolumeError::BadHeader { .. })));
        assert!(matches!(load_nifti(&dir.path().join("missing.nii")), Err(VolumeError::Io { .. })));
    }
}
