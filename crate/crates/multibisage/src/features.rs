//! Per-pin visual and textual feature vectors with a compact binary
//! format: magic `BSFT`, u32 count, u32 d_v, u32 d_t, then per pin a
//! u64 id followed by d_v + d_t little-endian f32 values.

use std::collections::HashMap;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad magic: expected BSFT")]
    BadMagic,
    #[error("truncated feature file: {0}")]
    Truncated(String),
    #[error("malformed feature file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const MAGIC: &[u8; 4] = b"BSFT";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    d_v: usize,
    d_t: usize,
    ids: Vec<u64>,
    index: HashMap<u64, u32>,
    /// Per pin: d_v visual then d_t textual values, insertion order.
    data: Vec<f64>,
}

impl FeatureStore {
    pub fn new(d_v: usize, d_t: usize) -> Self {
        FeatureStore {
            d_v,
            d_t,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    /// Insert or replace one pin's vectors.
    pub fn insert(&mut self, id: u64, visual: &[f64], textual: &[f64]) {
        assert_eq!(visual.len(), self.d_v, "visual width");
        assert_eq!(textual.len(), self.d_t, "textual width");
        let stride = self.d_v + self.d_t;
        match self.index.get(&id) {
            Some(&row) => {
                let off = row as usize * stride;
                self.data[off..off + self.d_v].copy_from_slice(visual);
                self.data[off + self.d_v..off + stride].copy_from_slice(textual);
            }
            None => {
                self.index.insert(id, self.ids.len() as u32);
                self.ids.push(id);
                self.data.extend_from_slice(visual);
                self.data.extend_from_slice(textual);
            }
        }
    }

    pub fn visual(&self, id: u64) -> Option<&[f64]> {
        self.index.get(&id).map(|&row| {
            let off = row as usize * (self.d_v + self.d_t);
            &self.data[off..off + self.d_v]
        })
    }

    pub fn textual(&self, id: u64) -> Option<&[f64]> {
        self.index.get(&id).map(|&row| {
            let off = row as usize * (self.d_v + self.d_t) + self.d_v;
            &self.data[off..off + self.d_t]
        })
    }

    pub fn write_bsft<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.d_v as u32).to_le_bytes())?;
        w.write_all(&(self.d_t as u32).to_le_bytes())?;
        let stride = self.d_v + self.d_t;
        for (row, &id) in self.ids.iter().enumerate() {
            w.write_all(&id.to_le_bytes())?;
            for &v in &self.data[row * stride..(row + 1) * stride] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), FeatureError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_bsft(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, FeatureError> {
        let bytes = std::fs::read(path)?;
        parse_features(&bytes)
    }
}

/// Decode a BSFT byte buffer. Rejects short buffers, trailing bytes,
/// duplicate ids, and non-finite values; never panics on garbage.
pub fn parse_features(bytes: &[u8]) -> Result<FeatureStore, FeatureError> {
    if bytes.len() < 16 {
        return Err(FeatureError::Truncated("missing header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let d_v = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let d_t = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let stride = 8u64 + 4 * (d_v + d_t);
    let body = bytes.len() as u64 - 16;
    let expect = count
        .checked_mul(stride)
        .ok_or_else(|| FeatureError::Malformed("size overflow".into()))?;
    if body < expect {
        return Err(FeatureError::Truncated(format!(
            "need {expect} body bytes, have {body}"
        )));
    }
    if body > expect {
        return Err(FeatureError::Malformed(format!(
            "{} trailing bytes",
            body - expect
        )));
    }

    let (d_v, d_t) = (d_v as usize, d_t as usize);
    let mut store = FeatureStore::new(d_v, d_t);
    let mut off = 16usize;
    let mut visual = vec![0.0f64; d_v];
    let mut textual = vec![0.0f64; d_t];
    for _ in 0..count {
        let id = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        if store.contains(id) {
            return Err(FeatureError::Malformed(format!("duplicate pin id {id}")));
        }
        for slot in visual.iter_mut().chain(textual.iter_mut()) {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(FeatureError::Malformed(format!(
                    "non-finite feature for pin {id}"
                )));
            }
            *slot = v as f64;
            off += 4;
        }
        store.insert(id, &visual, &textual);
    }
    Ok(store)
}
