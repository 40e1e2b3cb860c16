//! Minimal NIfTI-1 reader and writer.
//!
//! Supports single-file `n+1` images and `ni1` header/image pairs, either
//! byte order, optional gzip, and the uint8 / int16 / float32 datatypes.
//! Only the voxel spacing is taken from the geometry: qform/sform
//! orientation is ignored, with a warning when present.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gzip(&bytes) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

#[derive(Debug, Clone)]
struct Header {
    dims: Dims,
    spacing: Spacing,
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    single_file: bool,
    big_endian: bool,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(path, format!("{} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(malformed(path, format!("sizeof_hdr is {le}, expected 348"))),
    };
    let single_file = match &bytes[344..348] {
        b"n+1\0" => true,
        b"ni1\0" => false,
        m => return Err(malformed(path, format!("magic {:?} is neither n+1 nor ni1", String::from_utf8_lossy(m)))),
    };
    let r = Reader { bytes, big_endian };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(path, format!("dim[0] = {ndim}")));
    }
    let mut d = [1usize; 3];
    for (a, slot) in d.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let n = r.i16(42 + 2 * a);
        if n < 1 {
            return Err(malformed(path, format!("dim[{}] = {n}", a + 1)));
        }
        *slot = n as usize;
    }
    for a in 3..ndim as usize {
        let n = r.i16(42 + 2 * a);
        if n > 1 {
            return Err(malformed(path, format!("only 3D volumes are supported, dim[{}] = {n}", a + 1)));
        }
    }
    let mut s = [1.0f64; 3];
    for (a, slot) in s.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * a).abs() as f64;
        *slot = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }
    let datatype = r.i16(70);
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(malformed(path, format!("vox_offset = {vox_offset}")));
    }
    let vox_offset = if single_file {
        (vox_offset as usize).max(HEADER_SIZE)
    } else {
        vox_offset as usize
    };
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let (qform, sform) = (r.i16(252), r.i16(254));
    if qform > 0 || sform > 0 {
        log::warn!(
            "{}: orientation (qform {qform}, sform {sform}) ignored; only voxel spacing is used",
            path.display()
        );
    }
    Ok(Header {
        dims: Dims(d),
        spacing: Spacing(s),
        datatype,
        vox_offset,
        slope: if slope.is_finite() && slope != 0.0 { slope } else { 1.0 },
        inter: if inter.is_finite() { inter } else { 0.0 },
        single_file,
        big_endian,
    })
}

fn companion_image(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(stem) = name.strip_suffix(".hdr.gz") {
        path.with_file_name(format!("{stem}.img.gz"))
    } else {
        path.with_extension("img")
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_maybe_gz(path)?;
    let hdr = parse_header(path, &bytes)?;
    let (payload, payload_path) = if hdr.single_file {
        (bytes, path.to_path_buf())
    } else {
        let img = companion_image(path);
        (read_maybe_gz(&img)?, img)
    };
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(Error::UnsupportedDatatype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let n = hdr.dims.len();
    let expected = hdr.vox_offset + n * width;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: payload_path,
            expected,
            found: payload.len(),
        });
    }
    let raw = &payload[hdr.vox_offset..expected];
    let r = Reader {
        bytes: raw,
        big_endian: hdr.big_endian,
    };
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let v = match hdr.datatype {
                DT_UINT8 => raw[i] as f64,
                DT_INT16 => r.i16(2 * i) as f64,
                _ => r.f32(4 * i) as f64,
            };
            v * hdr.slope + hdr.inter
        })
        .collect();
    Volume::new(hdr.dims, hdr.spacing, data).map_err(|e| malformed(path, e.to_string()))
}

/// Builds a little-endian single-file header for a 3D volume.
pub fn build_header(dims: Dims, spacing: Spacing, datatype: i16) -> [u8; HEADER_SIZE] {
    let mut h = [0u8; HEADER_SIZE];
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims.0[0] as i16, dims.0[1] as i16, dims.0[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [1.0f32, spacing.0[0] as f32, spacing.0[1] as f32, spacing.0[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Writes a float32 single-file image; gzip when the name ends in `.gz`.
pub fn write_nifti(vol: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(352 + vol.data().len() * 4);
    bytes.extend_from_slice(&build_header(vol.dims(), vol.spacing(), DT_FLOAT32));
    bytes.extend_from_slice(&[0u8; 4]);
    for &v in vol.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
