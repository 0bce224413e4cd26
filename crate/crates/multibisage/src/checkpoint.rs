//! Named-tensor checkpoint container.
//!
//! Layout: magic `BSCK`, u32 entry count; per entry a u16 name length,
//! UTF-8 name, u32 rank, rank u32 dims, then row-major 32-bit IEEE-754
//! values. All integers and floats little-endian.
//!
//! Values are kept as raw f32 bit patterns end to end; nothing here casts
//! through f64, so entries that smuggle integers in float bits (sketch
//! cells, counters) survive round trips exactly.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BSCK";

/// Ranks above this are rejected as corrupt rather than allocated.
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered collection of named f32 tensors with unique names.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate checkpoint entry {name}"
        );
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        assert!(dims.len() <= MAX_RANK, "entry rank too large");
        let len: usize = dims.iter().product();
        assert_eq!(len, values.len(), "dims {dims:?} vs {} values", values.len());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, dims, values });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for &d in &e.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| CheckpointError::Malformed(format!("{what} length overflows")))?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Strict parser for untrusted checkpoint bytes: verifies magic, bounds
/// every read, rejects duplicate names, oversized ranks, dim overflow, and
/// trailing bytes. Never panics on malformed input.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = c.u32("entry count")?;
    let mut ck = Checkpoint::new();
    for idx in 0..count {
        let name_len = c.u16(&format!("entry {idx} name length"))? as usize;
        let name_bytes = c.take(name_len, &format!("entry {idx} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed(format!("entry {idx} name is not UTF-8")))?
            .to_string();
        if ck.index.contains_key(&name) {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
        let rank = c.u32(&format!("entry {name} rank"))? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!(
                "entry {name} rank {rank} exceeds {MAX_RANK}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for d in 0..rank {
            let dim = c.u32(&format!("entry {name} dim {d}"))? as usize;
            len = len
                .checked_mul(dim)
                .ok_or_else(|| CheckpointError::Malformed(format!("entry {name} size overflows")))?;
            dims.push(dim);
        }
        let byte_len = len
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::Malformed(format!("entry {name} size overflows")))?;
        let raw = c.take(byte_len, &format!("entry {name} values"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        ck.index.insert(name.clone(), ck.entries.len());
        ck.entries.push(Entry { name, dims, values });
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last entry",
            bytes.len() - c.pos
        )));
    }
    Ok(ck)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a.w", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 4.5, -0.125]);
        ck.push("a.b", vec![3], vec![0.5, 0.25, -0.75]);
        // integer bits smuggled through f32, including NaN patterns
        ck.push(
            "meta/counters",
            vec![4],
            vec![
                f32::from_bits(0xFFFF_FFFF),
                f32::from_bits(0x7FC0_0001),
                f32::from_bits(123_456_789),
                f32::from_bits(0),
            ],
        );
        ck
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let buf = bytes(&ck);
        let parsed = parse_checkpoint(&buf).unwrap();
        assert_eq!(parsed.len(), ck.len());
        let buf2 = bytes(&parsed);
        assert_eq!(buf, buf2);
        // bit patterns preserved exactly, NaNs included
        let c = parsed.get("meta/counters").unwrap();
        assert_eq!(c.values[0].to_bits(), 0xFFFF_FFFF);
        assert_eq!(c.values[1].to_bits(), 0x7FC0_0001);
        assert_eq!(c.values[2].to_bits(), 123_456_789);
        let a = parsed.get("a.w").unwrap();
        assert_eq!(a.dims, vec![2, 3]);
        assert_eq!(a.values[3], 3.25);
    }

    #[test]
    fn every_truncation_point_errors_cleanly() {
        let buf = bytes(&sample());
        for cut in 0..buf.len() {
            match parse_checkpoint(&buf[..cut]) {
                Err(_) => {}
                Ok(_) => panic!("truncation at {cut} of {} parsed", buf.len()),
            }
        }
    }

    #[test]
    fn rejects_corrupt_buffers() {
        let good = bytes(&sample());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad_magic), Err(CheckpointError::BadMagic)));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            parse_checkpoint(&trailing),
            Err(CheckpointError::Malformed(_))
        ));

        // absurd rank
        let mut ck_bytes = Vec::new();
        ck_bytes.extend_from_slice(MAGIC);
        ck_bytes.extend_from_slice(&1u32.to_le_bytes());
        ck_bytes.extend_from_slice(&1u16.to_le_bytes());
        ck_bytes.push(b'x');
        ck_bytes.extend_from_slice(&100u32.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&ck_bytes),
            Err(CheckpointError::Malformed(_))
        ));

        // dim product overflowing usize
        let mut of = Vec::new();
        of.extend_from_slice(MAGIC);
        of.extend_from_slice(&1u32.to_le_bytes());
        of.extend_from_slice(&1u16.to_le_bytes());
        of.push(b'y');
        of.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            of.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(parse_checkpoint(&of), Err(CheckpointError::Malformed(_))));

        // duplicate names
        let mut dup = Checkpoint::new();
        dup.push("same", vec![1], vec![1.0]);
        let mut buf = bytes(&dup);
        // splice the single entry in twice
        let entry = buf[8..].to_vec();
        buf.extend_from_slice(&entry);
        buf[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(parse_checkpoint(&buf), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn parse_survives_garbage() {
        let mut rng_state = 0x12345u64;
        for len in [0usize, 1, 4, 7, 8, 64, 4096] {
            let data: Vec<u8> = (0..len)
                .map(|_| {
                    rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (rng_state >> 33) as u8
                })
                .collect();
            let _ = parse_checkpoint(&data);
            let mut with_magic = MAGIC.to_vec();
            with_magic.extend_from_slice(&data);
            let _ = parse_checkpoint(&with_magic);
        }
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bsck");
        let ck = sample();
        ck.save(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(bytes(&ck), bytes(&loaded));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ck = Checkpoint::new();
        let buf = bytes(&ck);
        assert_eq!(buf.len(), 8);
        let parsed = parse_checkpoint(&buf).unwrap();
        assert!(parsed.is_empty());
    }
}
