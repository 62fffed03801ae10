//! Binary checkpoint format.
//!
//! ```text
//! "VAMO" | u16 version | u32 meta_len | meta (UTF-8 TOML: config, phase,
//!   catalog, index groups, expert groups per block)
//! u32 param_count | per param: u16 name_len, name, u8 rank, u32 dims[rank],
//!   u8 dtype (0 = f32, 1 = f64), u8 frozen, u64 byte offset into data
//! data: raw little-endian values, parameters in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{put_u16, put_u32, put_u64, to_u16, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::block::VaMoeBlock;
use crate::model::cae::ChannelAdaptiveExpert;
use crate::model::catalog::{VariableCatalog, VariableGroup};
use crate::model::index::IndexEmbedding;
use crate::model::network::{Model, ModelConfig, Phase};
use crate::tensor::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"VAMO";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    phase: Phase,
    catalog: Vec<VariableGroup>,
    index_groups: Vec<String>,
    experts: Vec<Vec<String>>,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub frozen: bool,
    pub offset: u64,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let meta = Meta {
        config: model.config.clone(),
        phase: model.phase,
        catalog: model.catalog.groups().to_vec(),
        index_groups: model.index.groups().to_vec(),
        experts: model
            .blocks
            .iter()
            .map(|b| b.experts.iter().map(|e| e.group.clone()).collect())
            .collect(),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, to_u32(meta.len(), "meta length")?);
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, to_u32(model.params.len(), "parameter count")?);
    let mut offset = 0u64;
    for p in model.params.iter() {
        put_u16(&mut out, to_u16(p.name.len(), "name length")?);
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::try_from(p.value.rank()).map_err(|_| Error::Malformed("rank".into()))?);
        for &d in p.value.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        out.push(T::DTYPE.tag());
        out.push(u8::from(p.frozen));
        put_u64(&mut out, offset);
        offset += (p.numel() * T::DTYPE.size_of()) as u64;
    }
    for p in model.params.iter() {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parse header and manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    Ok(parse_header(bytes)?.1)
}

fn parse_header(bytes: &[u8]) -> Result<(Meta, Vec<ManifestEntry>, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let meta: Meta = toml::from_str(&meta).map_err(|e| Error::Malformed(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("dtype tag {tag}")))?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Malformed(format!("frozen flag {f}"))),
        };
        let offset = r.u64()?;
        manifest.push(ManifestEntry {
            name,
            shape,
            dtype,
            frozen,
            offset,
        });
    }
    Ok((meta, manifest, r.position()))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (meta, manifest, data_start) = parse_header(bytes)?;
    meta.config.validate()?;
    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for e in &manifest {
        if e.dtype != T::DTYPE {
            return Err(Error::Malformed(format!(
                "parameter `{}` stored as {:?}, requested {:?}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        if e.offset != expected_offset {
            return Err(Error::Malformed(format!("offset of `{}`", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        let nbytes = numel * T::DTYPE.size_of();
        let mut r = Reader::new(bytes);
        r.take(data_start + e.offset as usize)?;
        let raw = r.take(nbytes)?;
        let data = raw.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        if params.id(&e.name).is_some() {
            return Err(Error::Malformed(format!("duplicate parameter `{}`", e.name)));
        }
        let id = params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        params.get_mut(id).frozen = e.frozen;
        expected_offset += nbytes as u64;
    }
    let total = data_start + expected_offset as usize;
    if bytes.len() > total {
        return Err(Error::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - total
        )));
    }

    let catalog = VariableCatalog::new(meta.catalog)?;
    let n_index = meta.index_groups.len();
    let prefix_names: Vec<&str> = catalog.groups()[..n_index.min(catalog.len())]
        .iter()
        .map(|g| g.name.as_str())
        .collect();
    if n_index > catalog.len() || prefix_names != meta.index_groups {
        return Err(Error::Malformed("index groups are not a catalog prefix".into()));
    }
    let index_cat = VariableCatalog::new(catalog.groups()[..n_index].to_vec())?;
    if meta.experts.len() != meta.config.blocks {
        return Err(Error::Malformed("expert list per block".into()));
    }
    let mut blocks = Vec::with_capacity(meta.config.blocks);
    for (b, groups) in meta.experts.iter().enumerate() {
        let mut block = VaMoeBlock::new(b, meta.config.latent, meta.config.heads, meta.config.k)?;
        for g in groups {
            block.experts.push(ChannelAdaptiveExpert::new(
                &format!("{}.moe", block.prefix),
                g,
                meta.config.latent,
                meta.config.k,
            )?);
        }
        blocks.push(block);
    }
    Ok(Model {
        config: meta.config,
        catalog,
        index: IndexEmbedding::from_catalog(&index_cat),
        blocks,
        params,
        phase: meta.phase,
    })
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
