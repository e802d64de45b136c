//! GDFT binary tensor container and the plain-text manifest that names
//! GDFT files.
//!
//! Layout of one record (all integers little-endian):
//!
//! ```text
//! b"GDFT" | u32 version = 1 | u32 rank | rank × u64 extents | f64 data (row-major)
//! ```
//!
//! A stream may hold several records back to back; state bundles use that
//! to serialize multi-tensor states in a fixed order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDFT";
pub const VERSION: u32 = 1;

/// Exact encoded byte length of a tensor with these extents.
pub fn encoded_len(dims: &[usize]) -> usize {
    4 + 4 + 4 + 8 * dims.len() + 8 * dims.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.dims()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated record".into()),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 12];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8)?;
        let d = u64::from_le_bytes(b8);
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&l| l > 0 && l <= (1 << 34))
        .ok_or_else(|| Error::Format(format!("invalid extents {dims:?}")))?;
    let mut raw = vec![0u8; 8 * len];
    read_exact(r, &mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

/// Encode several tensors back to back.
pub fn encode_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    }
    out
}

/// Decode exactly `count` back-to-back records.
pub fn decode_all(bytes: &[u8], count: usize) -> Result<Vec<Tensor>> {
    let mut cursor = bytes;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_tensor(&mut cursor)?);
    }
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(out)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// A `key=value` manifest naming the tensor files of a dump. Keys are kept
/// sorted so writing is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            m.insert(k.trim(), v.trim());
        }
        Ok(m)
    }

    /// Write each named tensor to `<dir>/<name>.gdft` and record it under `name`.
    pub fn write_tensors<'a>(
        &mut self,
        dir: &Path,
        named: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in named {
            let file = format!("{name}.gdft");
            save(&dir.join(&file), t)?;
            self.insert(name, file);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
