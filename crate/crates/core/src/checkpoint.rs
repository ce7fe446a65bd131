//! Binary key-to-array container for client prompts and heads.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "EVCK"
//! version    u32      1
//! seed       u64      backbone seed
//! entries    u32
//! per entry:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 x product(dims)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub backbone_seed: u64,
    pub arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn new(backbone_seed: u64) -> Self {
        Self {
            backbone_seed,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("checkpoint array", &shape, &[data.len()]));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate array {name}")));
        }
        self.arrays.push(Array {
            name,
            shape,
            data: data.to_vec(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.backbone_seed.to_le_bytes())?;
        out.write_all(&len_u32(self.arrays.len())?.to_le_bytes())?;
        for a in &self.arrays {
            out.write_all(&len_u32(a.name.len())?.to_le_bytes())?;
            out.write_all(a.name.as_bytes())?;
            out.write_all(&len_u32(a.shape.len())?.to_le_bytes())?;
            for &d in &a.shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &a.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let backbone_seed = read_u64(&mut input)?;
        let count = read_u32(&mut input)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            arrays.push(Array { name, shape, data });
        }
        Ok(Self { backbone_seed, arrays })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
