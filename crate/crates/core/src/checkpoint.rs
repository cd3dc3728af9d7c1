//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! magic "SCTC" | version u32 (1)
//! config JSON length u32 | config JSON (CodecConfig)
//! config hash u64
//! parameter count u32
//!   per parameter: name length u16 | name | rank u8 | dims u32 x rank | f32 data
//! optimizer flag u8
//!   if 1: Adam step u64 | first moments (f32, parameter order) | second moments
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::net::{CodecConfig, Model};
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: [u8; 4] = *b"SCTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Adam>,
}

fn put_tensor_data(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model<f32>, optimizer: Option<&Adam>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&model.config().hash().to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_tensor_data(&mut out, t);
    }
    match optimizer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.step.to_le_bytes());
            for t in adam.m.iter().chain(&adam.v) {
                put_tensor_data(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut b = vec![0; n];
        self.0.read_exact(&mut b).map_err(|_| {
            CheckpointError::Corrupt(format!(
                "unexpected end of file at byte {}",
                self.0.position()
            ))
        })?;
        Ok(b)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses a checkpoint. With `expected_hash`, refuses checkpoints whose
/// configuration differs.
pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let len = r.u32()? as usize;
    let json = r.bytes(len)?;
    let config: CodecConfig = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let stored = r.u64()?;
    if stored != config.hash() {
        return Err(CheckpointError::Corrupt(format!(
            "stored hash {stored:016x} does not match embedded config {:016x}",
            config.hash()
        ))
        .into());
    }
    if let Some(expected) = expected_hash {
        if expected != stored {
            return Err(CheckpointError::HashMismatch {
                expected,
                found: stored,
            }
            .into());
        }
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let data = r.f32s(shape.iter().product())?;
        named.push((name, Tensor::new(&shape, data)?));
    }
    let model = Model::from_params(config, named)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut read_all = || -> Result<Vec<Tensor<f32>>> {
                model
                    .params()
                    .iter()
                    .map(|p| Ok(Tensor::new(p.shape(), r.f32s(p.len())?)?))
                    .collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(Adam { m, v, step })
        }
        f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}")).into()),
    };
    if r.0.position() as usize != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()).into());
    }
    Ok(Checkpoint { model, optimizer })
}

pub fn save(path: &Path, model: &Model<f32>, optimizer: Option<&Adam>) -> Result<()> {
    fs::write(path, to_bytes(model, optimizer)).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, expected_hash)
}
