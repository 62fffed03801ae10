//! Dataset file layout:
//!
//! ```text
//! "VAMG" | u16 version | u32 H | u32 W | u32 C | u32 T | u8 tag
//!   (bit 0: incremental phase, bit 1: test split)
//! u16 group_count | per group: u16 name_len, name, u8 kind, u16 levels
//! f32 little-endian values, frame-major then row-major, channels fastest
//! ```

use std::path::Path;

use crate::bytes::{put_u16, put_u32, to_u16, to_u32, Reader};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Phase, VariableCatalog, VariableGroup, VariableKind};

pub const MAGIC: [u8; 4] = *b"VAMG";
pub const VERSION: u16 = 1;

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + ds.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    for v in [ds.height, ds.width, ds.channels(), ds.frames()] {
        put_u32(&mut out, to_u32(v, "dimension")?);
    }
    let tag = u8::from(ds.phase == Phase::Incremental) | (u8::from(ds.split == Split::Test) << 1);
    out.push(tag);
    put_u16(&mut out, to_u16(ds.catalog.len(), "group count")?);
    for g in ds.catalog.groups() {
        put_u16(&mut out, to_u16(g.name.len(), "name length")?);
        out.extend_from_slice(g.name.as_bytes());
        out.push(g.kind.tag());
        put_u16(&mut out, to_u16(g.levels, "levels")?);
    }
    for &v in ds.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let t = r.u32()? as usize;
    let tag = r.u8()?;
    if tag > 3 {
        return Err(Error::Malformed(format!("tag byte {tag}")));
    }
    let phase = if tag & 1 == 1 {
        Phase::Incremental
    } else {
        Phase::Initial
    };
    let split = if tag & 2 == 2 { Split::Test } else { Split::Train };
    let count = r.u16()? as usize;
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let kind_tag = r.u8()?;
        let kind = VariableKind::from_tag(kind_tag)
            .ok_or_else(|| Error::Malformed(format!("variable kind {kind_tag}")))?;
        let levels = r.u16()? as usize;
        groups.push(match kind {
            VariableKind::UpperAir => VariableGroup::upper_air(&name, levels),
            VariableKind::Surface => VariableGroup::surface(&name, levels),
        });
    }
    let catalog = VariableCatalog::new(groups)?;
    if catalog.channels() != c {
        return Err(Error::CatalogMismatch {
            expected: c,
            actual: catalog.channels(),
        });
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(t))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Malformed("dimensions overflow".into()))?;
    let raw = r.take(n)?;
    if r.remaining() > 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(catalog, h, w, phase, split, data)
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
