//! Checkpoint container: named parameter blobs of 32-bit floats behind a
//! versioned header, plus a small string metadata map.
//!
//! Layout (all integers little-endian u32):
//! `"VXCK" | version | meta_count | {key_len,key,val_len,val}* |`
//! `blob_count | {name_len, name, ndim, dims[ndim], f32 data}*`

use super::DenseTensor;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    blobs: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)
            .ok_or_else(|| Error::Format {
                path: "<checkpoint>".into(),
                detail: format!("missing meta key '{key}'"),
            })?
            .parse()
            .map_err(|_| Error::Format {
                path: "<checkpoint>".into(),
                detail: format!("meta key '{key}' is not an integer"),
            })
    }

    /// Stores a tensor, narrowing to f32.
    pub fn put(&mut self, name: &str, tensor: &DenseTensor) {
        let data = tensor.data().iter().map(|&v| v as f32).collect();
        self.blobs
            .insert(name.to_string(), (tensor.shape().to_vec(), data));
    }

    /// Loads a tensor, widening to f64. Errors on a missing name or a shape
    /// that disagrees with the stored one.
    pub fn get(&self, name: &str, expect_shape: &[usize]) -> Result<DenseTensor> {
        let (shape, data) = self.blobs.get(name).ok_or_else(|| Error::Format {
            path: "<checkpoint>".into(),
            detail: format!("missing blob '{name}'"),
        })?;
        if shape != expect_shape {
            return Err(Error::ShapeMismatch(format!(
                "blob '{name}': stored shape {shape:?}, expected {expect_shape:?}"
            )));
        }
        Ok(DenseTensor::from_vec(
            shape.clone(),
            data.iter().map(|&v| v as f64).collect(),
        ))
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        put_u32(&mut buf, self.blobs.len() as u32);
        for (name, (shape, data)) in &self.blobs {
            put_str(&mut buf, name);
            put_u32(&mut buf, shape.len() as u32);
            for &d in shape {
                put_u32(&mut buf, d as u32);
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&display, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: &display,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(&display, "bad magic (not a checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                &display,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut ckpt = Checkpoint::new();
        let meta_count = r.u32()?;
        for _ in 0..meta_count {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.meta.insert(k, v);
        }
        let blob_count = r.u32()?;
        for _ in 0..blob_count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            ckpt.blobs.insert(name, (shape, data));
        }
        Ok(ckpt)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(self.path, "non-utf8 string in checkpoint"))
    }
}
