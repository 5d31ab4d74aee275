//! Internal raw volume container, little-endian throughout:
//!
//! ```text
//! magic    12 bytes "PEMMA-RAWVOL"
//! version  u32      1
//! dims     3 × u32  (x, y, z)
//! spacing  3 × f32  (mm)
//! modality u8       0 = CT, 1 = PET
//! dtype    u8       1 = f32, 2 = u8 labels
//! payload  x-fastest values
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::volume::{LabelGrid, Modality, Volume};
use crate::{Error, Result};

pub const RAW_MAGIC: &[u8; 12] = b"PEMMA-RAWVOL";
pub const RAW_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

fn write_head<W: Write>(w: &mut W, dims: [usize; 3], spacing: [f32; 3], modality: u8, dtype: u8) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_u32::<LittleEndian>(RAW_VERSION)?;
    for d in dims {
        w.write_u32::<LittleEndian>(u32::try_from(d).map_err(|_| Error::Data("extent too large".into()))?)?;
    }
    for s in spacing {
        w.write_f32::<LittleEndian>(s)?;
    }
    w.write_u8(modality)?;
    w.write_u8(dtype)?;
    Ok(())
}

struct Head {
    dims: [usize; 3],
    spacing: [f32; 3],
    modality: u8,
    dtype: u8,
}

fn read_head<R: Read>(r: &mut R) -> Result<Head> {
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Data("not a raw volume file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != RAW_VERSION {
        return Err(Error::Data(format!("raw volume version {version} is not supported")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in spacing.iter_mut() {
        *s = r.read_f32::<LittleEndian>()?;
    }
    Ok(Head {
        dims,
        spacing,
        modality: r.read_u8()?,
        dtype: r.read_u8()?,
    })
}

pub fn write_volume<W: Write>(mut w: W, v: &Volume) -> Result<()> {
    let m = match v.modality {
        Modality::Ct => 0,
        Modality::Pet => 1,
    };
    write_head(&mut w, v.dims, v.spacing, m, DTYPE_F32)?;
    for &x in &v.data {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<Volume> {
    let h = read_head(&mut r)?;
    if h.dtype != DTYPE_F32 {
        return Err(Error::Data(format!("expected f32 payload, dtype code {}", h.dtype)));
    }
    let modality = match h.modality {
        0 => Modality::Ct,
        1 => Modality::Pet,
        m => return Err(Error::Data(format!("unknown modality code {m}"))),
    };
    let mut data = vec![0f32; h.dims.iter().product()];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Volume::new(h.dims, h.spacing, modality, data)
}

pub fn write_labels<W: Write>(mut w: W, l: &LabelGrid) -> Result<()> {
    write_head(&mut w, l.dims, [1.0; 3], 0, DTYPE_U8)?;
    w.write_all(&l.data)?;
    Ok(())
}

pub fn read_labels<R: Read>(mut r: R) -> Result<LabelGrid> {
    let h = read_head(&mut r)?;
    if h.dtype != DTYPE_U8 {
        return Err(Error::Data(format!("expected label payload, dtype code {}", h.dtype)));
    }
    let mut data = vec![0u8; h.dims.iter().product()];
    r.read_exact(&mut data)?;
    Ok(LabelGrid { dims: h.dims, data })
}
