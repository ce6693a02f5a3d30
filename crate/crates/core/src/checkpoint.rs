//! Named-tensor container used for model checkpoints and classifier state.
//!
//! Layout:
//!
//! ```text
//! DILHYFS-TENSORS 1\n
//! <name> <trainable 0|1> <frozen 0|1> <ndim> <dim0> ... <dimN-1>\n   (one line per tensor)
//! end\n
//! <payload>
//! ```
//!
//! The payload is every tensor's data in header order as little-endian
//! IEEE-754 f64 values, row-major, with no padding. Names contain no whitespace.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "DILHYFS-TENSORS 1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub frozen: bool,
}

impl NamedTensor {
    pub fn constant(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
            trainable: false,
            frozen: true,
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    for t in tensors {
        if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("tensor name {:?} is empty or has whitespace", t.name)));
        }
        write!(out, "{} {} {} {}", t.name, u8::from(t.trainable), u8::from(t.frozen), t.tensor.ndim())?;
        for d in t.tensor.shape() {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
    }
    writeln!(out, "end")?;
    for t in tensors {
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::Format { offset: start, reason: "unterminated header line".into() })?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::Format { offset: start, reason: "header is not UTF-8".into() })?;
        Ok((start, line.to_string()))
    };
    let (_, magic) = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, reason: format!("bad magic {magic:?}") });
    }
    let mut headers = Vec::new();
    loop {
        let (offset, line) = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let bad = |reason: &str| Error::Format { offset, reason: reason.to_string() };
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() < 4 {
            return Err(bad("header line needs name, flags and rank"));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad("flag must be 0 or 1")),
        };
        let ndim: usize = f[3].parse().map_err(|_| bad("bad rank"))?;
        if f.len() != 4 + ndim {
            return Err(bad("rank does not match dimension count"));
        }
        let shape = f[4..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| bad("bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        headers.push((f[0].to_string(), flag(f[1])?, flag(f[2])?, shape));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, trainable, frozen, shape) in headers {
        let n: usize = shape.iter().product();
        let need = n * 8;
        if bytes.len() - pos < need {
            return Err(Error::Format { offset: bytes.len(), reason: format!("payload for {name} truncated") });
        }
        let data = bytes[pos..pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += need;
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(&shape, data)?,
            trainable,
            frozen,
        });
    }
    if pos != bytes.len() {
        return Err(Error::Format { offset: pos, reason: "trailing bytes after payload".into() });
    }
    Ok(out)
}

pub fn from_store(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            tensor: p.value.clone(),
            trainable: true,
            frozen: p.frozen,
        })
        .collect()
}

/// Copies container values into the parameters of the same names and shapes.
pub fn load_into_store(store: &mut ParamStore, tensors: &[NamedTensor]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Data(format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len())));
    }
    for t in tensors {
        let id = store
            .find(&t.name)
            .ok_or_else(|| Error::Data(format!("checkpoint tensor {} not in model", t.name)))?;
        if store.get(id).shape() != t.tensor.shape() {
            return Err(Error::dim("load_into_store", store.get(id).shape(), t.tensor.shape()));
        }
        *store.get_mut(id) = t.tensor.clone();
        store.set_frozen(id, t.frozen);
    }
    Ok(())
}

/// Writes to a sibling temp file then renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path)?)
}
