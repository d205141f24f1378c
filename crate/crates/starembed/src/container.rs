//! Binary tensor container ("SEMB1").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   5 bytes  b"SEMB1"
//! config  u32 n_layers, u32 n_heads, u32 d_model, u32 vocab, u32 max_pos,
//!         f32 rope_base, u64 seed
//! dir     u32 tensor count, then per tensor:
//!         u16 name length, name bytes (UTF-8),
//!         u8 ndim, u64 dims[ndim], u64 byte offset into the payload
//! payload concatenated row-major f32 values
//! ```
//!
//! The same container carries model weights and persisted KV-cache entries;
//! round trips are bit-exact because payloads are raw f32 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 5] = b"SEMB1";

/// One named tensor: row-major f32 data plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Tensor {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
        t
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// A decoded container: the model config block plus named tensors in file order.
#[derive(Debug, Clone)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Truncated(format!("missing tensor `{name}`")))
    }
}

pub fn write(path: &Path, config: &ModelConfig, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(config.n_layers as u32)?;
    w.write_u32::<LittleEndian>(config.n_heads as u32)?;
    w.write_u32::<LittleEndian>(config.d_model as u32)?;
    w.write_u32::<LittleEndian>(config.vocab as u32)?;
    w.write_u32::<LittleEndian>(config.max_pos as u32)?;
    w.write_f32::<LittleEndian>(config.rope_base)?;
    w.write_u64::<LittleEndian>(config.seed)?;

    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    let mut offset = 0u64;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(t.dims.len() as u8)?;
        for &d in &t.dims {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        w.write_u64::<LittleEndian>(offset)?;
        offset += (t.numel() * 4) as u64;
    }
    for t in tensors {
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }

    let header_err = |what: &str| Error::Truncated(format!("header ends inside {what}"));
    let n_layers = r.read_u32::<LittleEndian>().map_err(|_| header_err("config"))? as usize;
    let n_heads = r.read_u32::<LittleEndian>().map_err(|_| header_err("config"))? as usize;
    let d_model = r.read_u32::<LittleEndian>().map_err(|_| header_err("config"))? as usize;
    let vocab = r.read_u32::<LittleEndian>().map_err(|_| header_err("config"))? as usize;
    let max_pos = r.read_u32::<LittleEndian>().map_err(|_| header_err("config"))? as usize;
    let rope_base = r.read_f32::<LittleEndian>().map_err(|_| header_err("config"))?;
    let seed = r.read_u64::<LittleEndian>().map_err(|_| header_err("config"))?;
    let config = ModelConfig {
        n_layers,
        n_heads,
        d_model,
        vocab,
        rope_base,
        max_pos,
        seed,
    };

    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| header_err("tensor count"))? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r
            .read_u16::<LittleEndian>()
            .map_err(|_| header_err("tensor directory"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| header_err("tensor name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Truncated("tensor name is not UTF-8".into()))?;
        let ndim = r.read_u8().map_err(|_| header_err("tensor rank"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(
                r.read_u64::<LittleEndian>()
                    .map_err(|_| header_err("tensor dims"))? as usize,
            );
        }
        let offset = r
            .read_u64::<LittleEndian>()
            .map_err(|_| header_err("tensor offset"))? as usize;
        entries.push((name, dims, offset));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(Error::Truncated(format!(
            "payload length {} is not a multiple of 4",
            payload.len()
        )));
    }

    let mut tensors = Vec::with_capacity(count);
    for (name, dims, offset) in entries {
        let numel: usize = dims.iter().product();
        let end = offset + numel * 4;
        if end > payload.len() {
            return Err(Error::Truncated(format!(
                "tensor `{name}` needs bytes {offset}..{end}, payload has {}",
                payload.len()
            )));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }

    Ok(Container { config, tensors })
}
