//! Weight container. Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "PEMMACKP"
//! version      u32      1
//! entry count  u32
//! manifest, per entry:
//!   name length u16, name (UTF-8)
//!   group u8, frozen u8 (0/1), ndim u8, dims u32 × ndim
//! payload: the f32 values of every entry, in manifest order
//! ```
//!
//! Full and adapter-only checkpoints share this layout; the group byte tags
//! which part of the model an entry belongs to.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamGroup, ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PEMMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub frozen: bool,
    pub data: Vec<f32>,
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[CheckpointEntry]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize || e.shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("entry `{}` cannot be encoded", e.name)));
        }
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Checkpoint(format!("entry `{}` shape/data mismatch", e.name)));
        }
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(e.group.code())?;
        w.write_u8(e.frozen as u8)?;
        w.write_u8(e.shape.len() as u8)?;
        for &d in &e.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
    }
    for e in entries {
        for &v in &e.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    let trunc = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let code = r.read_u8().map_err(trunc)?;
        let group = ParamGroup::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group code {code}")))?;
        let frozen = match r.read_u8().map_err(trunc)? {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b}"))),
        };
        let ndim = r.read_u8().map_err(trunc)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        entries.push(CheckpointEntry {
            name,
            shape,
            group,
            frozen,
            data: Vec::new(),
        });
    }
    for e in entries.iter_mut() {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(trunc)?;
        e.data = data;
    }
    Ok(entries)
}

impl<E: Real> ParamStore<E> {
    pub fn to_entries(&self, pred: impl Fn(&super::Param<E>) -> bool) -> Vec<CheckpointEntry> {
        self.iter()
            .filter(|p| pred(p))
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: p.group,
                frozen: p.frozen,
                data: p.value.data().iter().map(|v| v.to_f32()).collect(),
            })
            .collect()
    }

    /// Overwrites matching entries; unknown names are inserted when
    /// `insert_missing`, otherwise rejected.
    pub fn apply_entries(&mut self, entries: &[CheckpointEntry], insert_missing: bool) -> Result<()> {
        for e in entries {
            let value = Tensor::new(e.shape.clone(), e.data.iter().map(|&v| E::from_f32(v)).collect())
                .map_err(|err| Error::Checkpoint(format!("entry `{}`: {err}", e.name)))?;
            if self.contains(&e.name) {
                let p = self.get_mut(&e.name)?;
                if p.value.shape() != e.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "entry `{}` has shape {:?}, model expects {:?}",
                        e.name,
                        e.shape,
                        p.value.shape()
                    )));
                }
                p.value = value;
                p.group = e.group;
                p.frozen = e.frozen;
            } else if insert_missing {
                self.insert(e.name.clone(), value, e.group)?;
                self.get_mut(&e.name)?.frozen = e.frozen;
            } else {
                return Err(Error::UnknownParam(e.name.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<CheckpointEntry> {
        vec![
            CheckpointEntry {
                name: "blocks.0.attn.q.weight".into(),
                shape: vec![2, 3],
                group: ParamGroup::Base,
                frozen: true,
                data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7.0],
            },
            CheckpointEntry {
                name: "beta".into(),
                shape: vec![1],
                group: ParamGroup::PetSkip,
                frozen: false,
                data: vec![0.125],
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(sample()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.group, b.group);
            assert_eq!(a.frozen, b.frozen);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
        // header layout
        assert_eq!(&buf[..8], b"PEMMACKP");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn apply_entries_checks_shapes() {
        let mut store = ParamStore::<f64>::new();
        store.insert("beta", Tensor::zeros([1]), ParamGroup::PetSkip).unwrap();
        let entries = sample();
        assert!(store.apply_entries(&entries, false).is_err());
        store.apply_entries(&entries[1..], false).unwrap();
        assert_eq!(store.tensor("beta").unwrap().data(), &[0.125]);
        store.apply_entries(&entries, true).unwrap();
        assert!(store.get("blocks.0.attn.q.weight").unwrap().frozen);

        let wrong = vec![CheckpointEntry { shape: vec![2], data: vec![0.0, 0.0], ..entries[1].clone() }];
        assert!(store.apply_entries(&wrong, false).is_err());
    }
}
