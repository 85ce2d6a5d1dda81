//! Versioned binary container for model weights: a config echo followed by
//! named tensors in little-endian byte order. Training checkpoints store
//! 64-bit floats; inference export stores 32-bit floats.

use std::io::{Read, Write};

use crate::error::{CodecError, Result};

pub const MAGIC: [u8; 4] = *b"SCCP";
pub const VERSION: u32 = 1;

/// Element precision of the stored tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::F64),
            1 => Ok(Precision::F32),
            other => Err(CodecError::Corruption(format!("unknown dtype tag {other}"))),
        }
    }
}

/// One named tensor; data is kept as `f64` in memory regardless of the
/// serialized precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// A parsed checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Human-readable configuration echo (structured text).
    pub config_echo: String,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W, precision: Precision) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let echo = self.config_echo.as_bytes();
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for tensor in &self.tensors {
            let name = tensor.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[precision.tag()])?;
            w.write_all(&[tensor.dims.len() as u8])?;
            let count: usize = tensor.dims.iter().product();
            if count != tensor.data.len() {
                return Err(CodecError::Config(format!(
                    "tensor {} dims {:?} do not match {} elements",
                    tensor.name,
                    tensor.dims,
                    tensor.data.len()
                )));
            }
            for &d in &tensor.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match precision {
                Precision::F64 => {
                    for &v in &tensor.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Precision::F32 => {
                    for &v in &tensor.data {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CodecError::Corruption("checkpoint too short for magic".into()))?;
        if magic != MAGIC {
            return Err(CodecError::Corruption(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CodecError::Corruption(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let echo_len = read_u32(r)? as usize;
        let mut echo = vec![0u8; echo_len];
        r.read_exact(&mut echo)
            .map_err(|_| CodecError::Corruption("checkpoint truncated in config echo".into()))?;
        let config_echo = String::from_utf8(echo)
            .map_err(|_| CodecError::Corruption("config echo is not valid UTF-8".into()))?;
        let tensor_count = read_u32(r)? as usize;
        if tensor_count > 1_000_000 {
            return Err(CodecError::Corruption(format!(
                "implausible tensor count {tensor_count}"
            )));
        }
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(CodecError::Corruption(format!("implausible name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| CodecError::Corruption("checkpoint truncated in tensor name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| CodecError::Corruption("tensor name is not valid UTF-8".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)
                .map_err(|_| CodecError::Corruption("checkpoint truncated at dtype".into()))?;
            let precision = Precision::from_tag(tag[0])?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)
                .map_err(|_| CodecError::Corruption("checkpoint truncated at rank".into()))?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                let mut bytes = [0u8; 8];
                r.read_exact(&mut bytes)
                    .map_err(|_| CodecError::Corruption("checkpoint truncated in dims".into()))?;
                dims.push(u64::from_le_bytes(bytes) as usize);
            }
            let count: usize = dims.iter().product();
            if count > 100_000_000 {
                return Err(CodecError::Corruption(format!("implausible tensor size {count}")));
            }
            let mut data = Vec::with_capacity(count);
            match precision {
                Precision::F64 => {
                    let mut bytes = vec![0u8; count * 8];
                    r.read_exact(&mut bytes)
                        .map_err(|_| CodecError::Corruption("checkpoint truncated in data".into()))?;
                    for chunk in bytes.chunks_exact(8) {
                        data.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
                    }
                }
                Precision::F32 => {
                    let mut bytes = vec![0u8; count * 4];
                    r.read_exact(&mut bytes)
                        .map_err(|_| CodecError::Corruption("checkpoint truncated in data".into()))?;
                    for chunk in bytes.chunks_exact(4) {
                        data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64);
                    }
                }
            }
            tensors.push(TensorEntry { name, dims, data });
        }
        Ok(Self {
            config_echo,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CodecError::Corruption(format!("checkpoint is missing tensor {name:?}")))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut bytes = [0u8; 4];
    r.read_exact(&mut bytes)
        .map_err(|_| CodecError::Corruption("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(bytes))
}
