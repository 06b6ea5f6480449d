//! Flat parameter storage for all field networks, with a matching gradient
//! buffer and a binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic "VACT", format version u32,
//! layout table (count u32, then per entry: name len u16 + utf8 bytes,
//! offset u64, len u64), value count u64, raw f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Result, VolactError};

const MAGIC: &[u8; 4] = b"VACT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            grads: Vec::new(),
            layout: Vec::new(),
        }
    }

    /// Append a named block and return its range. Blocks are contiguous by
    /// construction, so ranges are disjoint and cover the vector exactly.
    pub fn register(&mut self, name: &str, len: usize) -> Range<usize> {
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.grads.resize(offset + len, 0.0);
        self.layout.push(LayoutEntry {
            name: name.to_string(),
            offset,
            len,
        });
        offset..offset + len
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.offset..e.offset + e.len)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        for e in &self.layout {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.offset as u64).to_le_bytes())?;
            w.write_all(&(e.len as u64).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(VolactError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(VolactError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let n_entries = read_u32(&mut r)? as usize;
        let mut layout = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let offset = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            layout.push(LayoutEntry {
                name: String::from_utf8(name)
                    .map_err(|_| VolactError::Checkpoint("non-utf8 block name".into()))?,
                offset,
                len,
            });
        }
        let n_values = read_u64(&mut r)? as usize;
        let mut values = Vec::with_capacity(n_values);
        let mut buf = [0u8; 8];
        for _ in 0..n_values {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let covered: usize = layout.iter().map(|e| e.len).sum();
        if covered != n_values {
            return Err(VolactError::Checkpoint(
                "layout table does not cover the value vector".into(),
            ));
        }
        let grads = vec![0.0; n_values];
        Ok(ParamStore {
            values,
            grads,
            layout,
        })
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
