//! Minimal single-file NIfTI-1 (`.nii`) support.
//!
//! Accepted subset: `n+1` magic, either byte order (detected from
//! `sizeof_hdr`), exactly three dimensions, datatype 16 (float32) or
//! 4 (int16). Gzip streams, header/image pairs and any other datatype are
//! rejected with a [`NiftiError`].

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::volume::{Modality, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NiftiError {
    #[error("gzip-compressed NIfTI is not supported")]
    Compressed,
    #[error("file truncated: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("sizeof_hdr is {0} in both byte orders, expected 348")]
    BadHeaderSize(i32),
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} does not match datatype {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },
    #[error("dimension error: {0}")]
    Dims(String),
    #[error("vox_offset {0} points inside the header")]
    BadVoxOffset(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Float32,
    Int16,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Float32 => DT_FLOAT32,
            NiftiDatatype::Int16 => DT_INT16,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            NiftiDatatype::Float32 => 32,
            NiftiDatatype::Int16 => 16,
        }
    }
}

/// The header fields this reader interprets.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct WriteOptions {
    pub endian: Endian,
    pub datatype: NiftiDatatype,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            endian: Endian::Little,
            datatype: NiftiDatatype::Float32,
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>, modality: Modality) -> crate::Result<Volume> {
    let bytes = fs::read(path)?;
    parse_nifti(&bytes, modality)
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(NiftiError::Compressed);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    let endian = if le == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::BadHeaderSize(le));
    };
    match endian {
        Endian::Little => header_with::<LittleEndian>(bytes, endian),
        Endian::Big => header_with::<BigEndian>(bytes, endian),
    }
}

fn header_with<B: ByteOrder>(bytes: &[u8], endian: Endian) -> Result<NiftiHeader, NiftiError> {
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    if &magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&bytes[76 + 4 * i..]);
    }
    Ok(NiftiHeader {
        endian,
        dim,
        datatype: B::read_i16(&bytes[70..]),
        bitpix: B::read_i16(&bytes[72..]),
        pixdim,
        vox_offset: B::read_f32(&bytes[108..]),
        scl_slope: B::read_f32(&bytes[112..]),
        scl_inter: B::read_f32(&bytes[116..]),
    })
}

pub fn parse_nifti(bytes: &[u8], modality: Modality) -> crate::Result<Volume> {
    let h = parse_header(bytes)?;
    let elem = match h.datatype {
        DT_FLOAT32 if h.bitpix == 32 => 4,
        DT_INT16 if h.bitpix == 16 => 2,
        DT_FLOAT32 | DT_INT16 => {
            return Err(NiftiError::BitpixMismatch {
                datatype: h.datatype,
                bitpix: h.bitpix,
            }
            .into())
        }
        other => return Err(NiftiError::UnsupportedDatatype(other).into()),
    };
    if h.dim[0] != 3 {
        return Err(NiftiError::Dims(format!("dim[0] = {}, expected 3", h.dim[0])).into());
    }
    if h.dim[1..4].iter().any(|&d| d <= 0) {
        return Err(NiftiError::Dims(format!("non-positive extent in {:?}", &h.dim[1..4])).into());
    }
    if !(h.vox_offset >= HEADER_SIZE as f32) || h.vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(h.vox_offset).into());
    }
    let dims = [h.dim[1] as usize, h.dim[2] as usize, h.dim[3] as usize];
    let n: usize = dims.iter().product();
    let start = h.vox_offset as usize;
    let needed = start + n * elem;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            found: bytes.len(),
        }
        .into());
    }
    let payload = &bytes[start..needed];
    let mut data = vec![0f32; n];
    let mut cur = Cursor::new(payload);
    match (h.datatype, h.endian) {
        (DT_FLOAT32, Endian::Little) => cur.read_f32_into::<LittleEndian>(&mut data)?,
        (DT_FLOAT32, Endian::Big) => cur.read_f32_into::<BigEndian>(&mut data)?,
        (_, endian) => {
            let mut raw = vec![0i16; n];
            match endian {
                Endian::Little => cur.read_i16_into::<LittleEndian>(&mut raw)?,
                Endian::Big => cur.read_i16_into::<BigEndian>(&mut raw)?,
            }
            for (d, r) in data.iter_mut().zip(raw) {
                *d = r as f32;
            }
        }
    }
    let identity = h.scl_slope == 0.0 || (h.scl_slope == 1.0 && h.scl_inter == 0.0);
    if !identity && h.scl_slope.is_finite() && h.scl_inter.is_finite() {
        for d in data.iter_mut() {
            *d = *d * h.scl_slope + h.scl_inter;
        }
    }
    let spacing = [h.pixdim[1].abs(), h.pixdim[2].abs(), h.pixdim[3].abs()];
    let spacing = spacing.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    Volume::new(dims, spacing, modality, data)
}

pub fn write_nifti(path: impl AsRef<Path>, volume: &Volume) -> crate::Result<()> {
    fs::write(path, encode_nifti(volume, WriteOptions::default())?)?;
    Ok(())
}

/// Serialises `volume` as a single-file NIfTI-1 image. Int16 output rounds
/// and saturates.
pub fn encode_nifti(volume: &Volume, opts: WriteOptions) -> crate::Result<Vec<u8>> {
    match opts.endian {
        Endian::Little => encode_with::<LittleEndian>(volume, opts.datatype),
        Endian::Big => encode_with::<BigEndian>(volume, opts.datatype),
    }
}

fn encode_with<B: ByteOrder>(volume: &Volume, dt: NiftiDatatype) -> crate::Result<Vec<u8>> {
    if volume.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(crate::Error::Data(format!("{:?} too large for NIfTI-1", volume.dims)));
    }
    let mut hdr = vec![0u8; DEFAULT_VOX_OFFSET];
    B::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dim = [3, volume.dims[0] as i16, volume.dims[1] as i16, volume.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        B::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    B::write_i16(&mut hdr[70..], dt.code());
    B::write_i16(&mut hdr[72..], dt.bitpix());
    let pixdim = [1.0, volume.spacing[0], volume.spacing[1], volume.spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        B::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    B::write_f32(&mut hdr[108..], DEFAULT_VOX_OFFSET as f32);
    B::write_f32(&mut hdr[112..], 1.0);
    B::write_f32(&mut hdr[116..], 0.0);
    hdr[123] = 2; // xyzt_units: millimetres
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut out = hdr;
    out.reserve(volume.len() * 4);
    match dt {
        NiftiDatatype::Float32 => {
            for &v in &volume.data {
                out.write_f32::<B>(v)?;
            }
        }
        NiftiDatatype::Int16 => {
            for &v in &volume.data {
                out.write_i16::<B>(v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let data = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        Volume::new([4, 3, 2], [0.8, 1.0, 2.5], Modality::Ct, data).unwrap()
    }

    #[test]
    fn little_endian_round_trip() {
        let v = ramp();
        let bytes = encode_nifti(&v, WriteOptions::default()).unwrap();
        assert_eq!(bytes.len(), 352 + 24 * 4);
        let back = parse_nifti(&bytes, Modality::Ct).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn big_endian_detected() {
        let v = ramp();
        let opts = WriteOptions {
            endian: Endian::Big,
            ..Default::default()
        };
        let bytes = encode_nifti(&v, opts).unwrap();
        assert_eq!(&bytes[0..4], &348i32.to_be_bytes());
        assert_eq!(parse_header(&bytes).unwrap().endian, Endian::Big);
        assert_eq!(parse_nifti(&bytes, Modality::Ct).unwrap().data, v.data);
    }

    #[test]
    fn uint8_is_rejected() {
        let mut bytes = encode_nifti(&ramp(), WriteOptions::default()).unwrap();
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&8i16.to_le_bytes());
        assert!(matches!(
            parse_nifti(&bytes, Modality::Ct),
            Err(crate::Error::Nifti(NiftiError::UnsupportedDatatype(2)))
        ));
    }
}
