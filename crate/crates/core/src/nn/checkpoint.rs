//! Parameter checkpoints.
//!
//! Layout, all integers in decimal ASCII and payloads little-endian:
//!
//! ```text
//! CACCKPT1
//! tensors <count>
//! index <name> <offset> <length>      (one line per tensor)
//! data
//! name <name>                          (record, at data_start + offset)
//! shape <d0> <d1> ...
//! dtype float64 trainable|buffer
//! <payload>
//! ```
//!
//! Offsets and lengths are in bytes and cover the whole record. Values are
//! stored as float64 so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use super::layers::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "CACCKPT1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut records = Vec::new();
    let mut index = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        let name = store.name(id);
        let start = records.len();
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let kind = if store.is_trainable(id) { "trainable" } else { "buffer" };
        records.extend_from_slice(format!("name {name}\nshape {}\ndtype float64 {kind}\n", shape.join(" ")).as_bytes());
        for v in t.data() {
            records.extend_from_slice(&v.to_le_bytes());
        }
        index.push(format!("index {name} {start} {}\n", records.len() - start));
    }
    let mut out = format!("{MAGIC}\ntensors {}\n", index.len()).into_bytes();
    for line in index {
        out.extend_from_slice(line.as_bytes());
    }
    out.extend_from_slice(b"data\n");
    out.extend_from_slice(&records);
    out
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Lines<'a> {
    rest: &'a [u8],
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let end = self
            .rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("truncated checkpoint header"))?;
        let line = std::str::from_utf8(&self.rest[..end]).map_err(|_| fmt_err("non-utf8 header"))?;
        self.rest = &self.rest[end + 1..];
        Ok(line)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut lines = Lines { rest: bytes };
    if lines.next()? != MAGIC {
        return Err(fmt_err("bad checkpoint magic"));
    }
    let count: usize = lines
        .next()?
        .strip_prefix("tensors ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fmt_err("bad tensors line"))?;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next()?;
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["index", name, off, len] => {
                let off: usize = off.parse().map_err(|_| fmt_err("bad index offset"))?;
                let len: usize = len.parse().map_err(|_| fmt_err("bad index length"))?;
                index.push((name.to_string(), off, len));
            }
            _ => return Err(fmt_err(format!("bad index line {line:?}"))),
        }
    }
    if lines.next()? != "data" {
        return Err(fmt_err("missing data marker"));
    }
    let data = lines.rest;

    let mut store = ParamStore::new();
    for (name, off, len) in index {
        let rec = data
            .get(off..off + len)
            .ok_or_else(|| fmt_err(format!("record {name} out of bounds")))?;
        let mut rl = Lines { rest: rec };
        if rl.next()? != format!("name {name}") {
            return Err(fmt_err(format!("record name does not match index entry {name}")));
        }
        let shape: Vec<usize> = rl
            .next()?
            .strip_prefix("shape")
            .ok_or_else(|| fmt_err("bad shape line"))?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| fmt_err("bad shape value")))
            .collect::<Result<_>>()?;
        let trainable = match rl.next()? {
            "dtype float64 trainable" => true,
            "dtype float64 buffer" => false,
            other => return Err(fmt_err(format!("bad dtype line {other:?}"))),
        };
        let payload = rl.rest;
        let n: usize = shape.iter().product();
        if payload.len() != n * 8 {
            return Err(fmt_err(format!("payload of {name} has {} bytes, expected {}", payload.len(), n * 8)));
        }
        let vals = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = if shape.is_empty() { Tensor::scalar(f64::NAN) } else { Tensor::new(&shape, vals)? };
        store.add(name, t, trainable);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(fmt_err(format!("checkpoint has {} tensors, model has {}", src.len(), dst.len())));
    }
    for id in dst.ids().collect::<Vec<_>>() {
        let sid = src
            .find(dst.name(id))
            .ok_or_else(|| fmt_err(format!("checkpoint lacks {}", dst.name(id))))?;
        let (s, d) = (src.get(sid), dst.get(id));
        if s.shape() != d.shape() {
            return Err(Error::Shape(format!("{}: {:?} vs {:?}", dst.name(id), s.shape(), d.shape())));
        }
        let vals = s.data().to_vec();
        dst.get_mut(id).data_mut().copy_from_slice(&vals);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![0.1, -0.0, 1e-300, f64::MIN_POSITIVE, 3.5, -7.25]).unwrap(), true);
        s.add("a.running_var", Tensor::new(&[2], vec![1.0, 0.5]).unwrap(), false);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert!(s.bit_identical(&back));
    }

    #[test]
    fn corrupted_index_rejected() {
        let mut bytes = encode(&sample());
        let text = String::from_utf8_lossy(&bytes).to_string();
        let pos = text.find("index a.weight 0").unwrap() + "index a.weight ".len();
        bytes[pos] = b'7';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn restore_requires_matching_names() {
        let mut other = ParamStore::new();
        other.add("b.weight", Tensor::zeros(&[2, 3]), true);
        other.add("a.running_var", Tensor::zeros(&[2]), false);
        assert!(restore_into(&mut other, &sample()).is_err());
    }
}
