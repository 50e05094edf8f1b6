//! Self-describing key-value checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "L2RCKPT\0"
//! version  u32
//! count    u32
//! entry*   key_len u32, key utf-8, tag u8, payload
//!   tag 0  f64 array: ndim u32, dims u64 * ndim, values f64 * prod(dims)
//!   tag 1  u64
//!   tag 2  utf-8 text: len u64, bytes
//!   tag 3  raw bytes:  len u64, bytes
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::ParamStore;

use super::NetworkState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"L2RCKPT\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("missing checkpoint entry `{0}`")]
    Missing(String),
    #[error("entry `{key}` has the wrong type (expected {expected})")]
    WrongType { key: String, expected: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64(u64),
    Text(String),
    Bytes(Vec<u8>),
}

/// Ordered list of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: Entry) {
        let key = key.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some((_, e)) => *e = entry,
            None => self.entries.push((key, entry)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, e)| e)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn insert_matrix(&mut self, key: impl Into<String>, m: &Array2<f64>) {
        self.insert(
            key,
            Entry::F64 {
                shape: vec![m.nrows(), m.ncols()],
                data: m.iter().copied().collect(),
            },
        );
    }

    pub fn matrix(&self, key: &str) -> Result<Array2<f64>, CheckpointError> {
        match self.get(key) {
            Some(Entry::F64 { shape, data }) if shape.len() == 2 => {
                Array2::from_shape_vec((shape[0], shape[1]), data.clone())
                    .map_err(|e| CheckpointError::Malformed(format!("{key}: {e}")))
            }
            Some(_) => Err(CheckpointError::WrongType {
                key: key.into(),
                expected: "2-d f64 array",
            }),
            None => Err(CheckpointError::Missing(key.into())),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, CheckpointError> {
        match self.get(key) {
            Some(Entry::U64(v)) => Ok(*v),
            Some(_) => Err(CheckpointError::WrongType {
                key: key.into(),
                expected: "u64",
            }),
            None => Err(CheckpointError::Missing(key.into())),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str, CheckpointError> {
        match self.get(key) {
            Some(Entry::Text(v)) => Ok(v),
            Some(_) => Err(CheckpointError::WrongType {
                key: key.into(),
                expected: "text",
            }),
            None => Err(CheckpointError::Missing(key.into())),
        }
    }

    pub fn bytes(&self, key: &str) -> Result<&[u8], CheckpointError> {
        match self.get(key) {
            Some(Entry::Bytes(v)) => Ok(v),
            Some(_) => Err(CheckpointError::WrongType {
                key: key.into(),
                expected: "bytes",
            }),
            None => Err(CheckpointError::Missing(key.into())),
        }
    }

    /// Stores every slot of `params` under `prefix.<slot>.<name>`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamStore) {
        self.insert(format!("{prefix}.count"), Entry::U64(params.len() as u64));
        for (i, (name, value)) in params.names().iter().zip(params.values()).enumerate() {
            self.insert_matrix(format!("{prefix}.{i}.{name}"), value);
        }
    }

    pub fn params(&self, prefix: &str) -> Result<ParamStore, CheckpointError> {
        let count = self.u64(&format!("{prefix}.count"))? as usize;
        let mut store = ParamStore::new();
        for i in 0..count {
            let head = format!("{prefix}.{i}.");
            let key = self
                .keys()
                .find(|k| k.starts_with(&head))
                .ok_or_else(|| CheckpointError::Missing(format!("{head}*")))?
                .to_string();
            let value = self.matrix(&key)?;
            store.push(&key[head.len()..], value);
        }
        Ok(store)
    }

    pub fn insert_state(&mut self, prefix: &str, state: &NetworkState) {
        self.insert(format!("{prefix}.layers"), Entry::U64(state.h.len() as u64));
        for (l, (h, w)) in state.h.iter().zip(&state.w).enumerate() {
            self.insert_matrix(format!("{prefix}.h.{l}"), h);
            self.insert_matrix(format!("{prefix}.w.{l}"), w);
        }
    }

    pub fn state(&self, prefix: &str) -> Result<NetworkState, CheckpointError> {
        let layers = self.u64(&format!("{prefix}.layers"))? as usize;
        let mut h = Vec::with_capacity(layers);
        let mut w = Vec::with_capacity(layers);
        for l in 0..layers {
            h.push(self.matrix(&format!("{prefix}.h.{l}"))?);
            w.push(self.matrix(&format!("{prefix}.w.{l}"))?);
        }
        Ok(NetworkState { h, w })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (key, entry) in &self.entries {
            out.write_all(&(key.len() as u32).to_le_bytes())?;
            out.write_all(key.as_bytes())?;
            match entry {
                Entry::F64 { shape, data } => {
                    out.write_all(&[0])?;
                    out.write_all(&(shape.len() as u32).to_le_bytes())?;
                    for &d in shape {
                        out.write_all(&(d as u64).to_le_bytes())?;
                    }
                    let mut buf = Vec::with_capacity(data.len() * 8);
                    for x in data {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    out.write_all(&buf)?;
                }
                Entry::U64(v) => {
                    out.write_all(&[1])?;
                    out.write_all(&v.to_le_bytes())?;
                }
                Entry::Text(s) => {
                    out.write_all(&[2])?;
                    out.write_all(&(s.len() as u64).to_le_bytes())?;
                    out.write_all(s.as_bytes())?;
                }
                Entry::Bytes(b) => {
                    out.write_all(&[3])?;
                    out.write_all(&(b.len() as u64).to_le_bytes())?;
                    out.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut input)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let key_len = read_u32(&mut input)? as usize;
            let key = String::from_utf8(read_vec(&mut input, key_len)?)
                .map_err(|_| CheckpointError::Malformed("key is not utf-8".into()))?;
            let mut tag = [0u8; 1];
            input.read_exact(&mut tag)?;
            let entry = match tag[0] {
                0 => {
                    let ndim = read_u32(&mut input)? as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(read_u64(&mut input)? as usize);
                    }
                    let n: usize = shape.iter().product();
                    let raw = read_vec(&mut input, n * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    Entry::F64 { shape, data }
                }
                1 => Entry::U64(read_u64(&mut input)?),
                2 => {
                    let len = read_u64(&mut input)? as usize;
                    Entry::Text(
                        String::from_utf8(read_vec(&mut input, len)?)
                            .map_err(|_| CheckpointError::Malformed(format!("{key}: not utf-8")))?,
                    )
                }
                3 => {
                    let len = read_u64(&mut input)? as usize;
                    Entry::Bytes(read_vec(&mut input, len)?)
                }
                t => return Err(CheckpointError::Malformed(format!("{key}: unknown tag {t}"))),
            };
            ckpt.entries.push((key, entry));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: usize) -> io::Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(len as u64).read_to_end(&mut v)?;
    if v.len() != len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut bytes = Checkpoint::new().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut c = Checkpoint::new();
        c.insert_matrix("m", &array![[1.0, 2.0], [3.0, 4.0]]);
        let bytes = c.to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn typed_accessors() {
        let mut c = Checkpoint::new();
        c.insert("step", Entry::U64(40));
        c.insert("cfg", Entry::Text("a=1".into()));
        c.insert("rng", Entry::Bytes(vec![1, 2, 3]));
        let back = Checkpoint::read_from(c.to_bytes().as_slice()).unwrap();
        assert_eq!(back.u64("step").unwrap(), 40);
        assert_eq!(back.text("cfg").unwrap(), "a=1");
        assert_eq!(back.bytes("rng").unwrap(), &[1, 2, 3]);
        assert!(matches!(back.u64("cfg"), Err(CheckpointError::WrongType { .. })));
        assert!(matches!(back.u64("nope"), Err(CheckpointError::Missing(_))));
    }
}
