//! Single-file checkpoint container.
//!
//! A UTF-8 manifest terminated by an `end` line, followed by the payload.
//! Manifest lines:
//!
//! ```text
//! frlab-checkpoint
//! format_version 1
//! meta <key> <value>
//! blob <name> <offset> <bytes>
//! tensor <name> f32 <d0>x<d1>... <offset> <bytes>
//! end
//! ```
//!
//! Offsets are relative to the first payload byte. Tensors are stored as
//! little-endian IEEE 754 single precision, row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &str = "frlab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub blobs: BTreeMap<String, Vec<u8>>,
    pub tensors: Vec<Tensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn check_token(s: &str) {
    assert!(
        !s.is_empty() && !s.chars().any(char::is_whitespace),
        "checkpoint token `{s}` must be non-empty without whitespace"
    );
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a value by its `Debug` text, which round-trips floats exactly.
    pub fn set_meta(&mut self, key: &str, value: impl std::fmt::Debug) {
        let v = format!("{value:?}");
        check_token(key);
        check_token(&v);
        self.meta.insert(key.to_string(), v);
    }

    pub fn set_meta_str(&mut self, key: &str, value: &str) {
        check_token(key);
        check_token(value);
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| corrupt(format!("missing meta `{key}`")))?;
        v.parse().map_err(|_| corrupt(format!("bad meta `{key}` = `{v}`")))
    }

    pub fn add_blob(&mut self, name: &str, bytes: Vec<u8>) {
        check_token(name);
        self.blobs.insert(name.to_string(), bytes);
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| corrupt(format!("missing blob `{name}`")))
    }

    pub fn add_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        check_token(name);
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor `{name}` shape mismatch");
        assert!(self.tensor(name).is_none(), "duplicate tensor `{name}`");
        self.tensors.push(Tensor { name: name.to_string(), shape, data });
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_data(&self, name: &str, len: usize) -> Result<&[f32]> {
        let t = self.tensor(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        if t.data.len() != len {
            return Err(corrupt(format!("tensor `{name}` has {} values, expected {len}", t.data.len())));
        }
        Ok(&t.data)
    }

    pub fn add_params<P: Parameters<f32> + ?Sized>(&mut self, model: &P) {
        for t in model.tensors() {
            self.add_tensor(&t.name, t.shape.clone(), t.data.to_vec());
        }
    }

    /// Overwrites `model` with the stored tensors of the same names and shapes.
    pub fn load_params<P: Parameters<f32> + ?Sized>(&self, model: &mut P) -> Result<()> {
        let specs: Vec<(String, Vec<usize>)> =
            model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        for ((name, shape), dst) in specs.iter().zip(model.tensors_mut()) {
            let t = self.tensor(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
            if &t.shape != shape {
                return Err(corrupt(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape)));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut m = format!("{MAGIC}\nformat_version {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(m, "meta {k} {v}");
        }
        let mut offset = 0usize;
        for (name, b) in &self.blobs {
            let _ = writeln!(m, "blob {name} {offset} {}", b.len());
            offset += b.len();
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let bytes = 4 * t.data.len();
            let _ = writeln!(m, "tensor {} f32 {} {offset} {bytes}", t.name, shape.join("x"));
            offset += bytes;
        }
        m.push_str("end\n");
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.manifest().into_bytes();
        for b in self.blobs.values() {
            out.extend_from_slice(b);
        }
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| corrupt("manifest has no `end` line"))?;
        let head = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let payload = &bytes[end + 5..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("bad magic line"));
        }
        let version_line = lines.next().ok_or_else(|| corrupt("missing format_version"))?;
        let found: u32 = version_line
            .strip_prefix("format_version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("bad version line `{version_line}`")))?;
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found, expected: FORMAT_VERSION });
        }
        let slice = |off: &str, len: &str| -> Result<&[u8]> {
            let off: usize = off.parse().map_err(|_| corrupt(format!("bad offset `{off}`")))?;
            let len: usize = len.parse().map_err(|_| corrupt(format!("bad length `{len}`")))?;
            payload
                .get(off..off.checked_add(len).ok_or_else(|| corrupt("length overflow"))?)
                .ok_or_else(|| corrupt("entry extends past the payload"))
        };
        let mut ck = Checkpoint::new();
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["blob", name, off, len] => {
                    ck.blobs.insert(name.to_string(), slice(off, len)?.to_vec());
                }
                ["tensor", name, "f32", shape, off, len] => {
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape `{shape}`"))))
                        .collect::<Result<_>>()?;
                    let raw = slice(off, len)?;
                    if raw.len() != 4 * shape.iter().product::<usize>() {
                        return Err(corrupt(format!("tensor `{name}` size does not match its shape")));
                    }
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    ck.tensors.push(Tensor { name: name.to_string(), shape, data });
                }
                _ => return Err(corrupt(format!("unrecognized manifest line `{line}`"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
