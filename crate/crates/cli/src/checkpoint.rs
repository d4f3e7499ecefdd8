//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!   magic  b"M2O1"
//!   count  u32
//!   entry, repeated `count` times in sorted-name order:
//!     name_len u32, name UTF-8 bytes
//!     rank     u32, extents u32 each
//!     values   f32 each, row-major, extent product many
//!
//! Round-trips are bit-exact: values are stored as f32 and training runs in
//! 32-bit arithmetic, so save(load(x)) reproduces the original bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use m2ost_core::params::Parameter;
use m2ost_core::ParamStore;

use crate::error::{CmdError, CmdResult};

const MAGIC: &[u8; 4] = b"M2O1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &e in &p.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CmdResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CmdError::Io(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> CmdResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8], seed: u64) -> CmdResult<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CmdError::Io("not a parameter checkpoint (bad magic)".into()));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new(seed);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| CmdError::Io(format!("entry {i}: invalid UTF-8 name: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(4, "value")?;
            values.push(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        store
            .insert(&name, shape, values)
            .map_err(|e| CmdError::Io(format!("entry {i} (`{name}`): {e}")))?;
    }
    if r.pos != buf.len() {
        return Err(CmdError::Io(format!(
            "{} trailing bytes after the last checkpoint entry",
            buf.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> CmdResult<()> {
    let bytes = encode(store);
    // Cross-check on every save: the scalar count reconstructed from the
    // encoded extents must equal the live parameter count.
    let reparsed = decode(&bytes, store.rng_seed)?;
    let encoded_scalars: usize = reparsed.iter().map(|(_, p)| entry_len(p)).sum();
    if encoded_scalars != m2ost_core::eval::count_parameters(store) {
        return Err(CmdError::Io(format!(
            "checkpoint self-check failed: {} scalars encoded, store holds {}",
            encoded_scalars,
            m2ost_core::eval::count_parameters(store)
        )));
    }
    let mut f = fs::File::create(path)
        .map_err(|e| CmdError::Io(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path, seed: u64) -> CmdResult<ParamStore> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| CmdError::Io(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf, seed)
}

/// Shape compatibility between a loaded store and a freshly initialized one.
pub fn check_compatible(loaded: &ParamStore, expected: &ParamStore) -> CmdResult<()> {
    if loaded.len() != expected.len() {
        return Err(CmdError::Compat(format!(
            "checkpoint has {} parameters, configuration wants {}",
            loaded.len(),
            expected.len()
        )));
    }
    for ((ln, lp), (en, ep)) in loaded.iter().zip(expected.iter()) {
        if ln != en {
            return Err(CmdError::Compat(format!(
                "checkpoint parameter `{ln}` does not match expected `{en}`"
            )));
        }
        if lp.shape != ep.shape {
            return Err(CmdError::Compat(format!(
                "parameter `{ln}`: checkpoint shape {:?}, configuration wants {:?}",
                lp.shape, ep.shape
            )));
        }
    }
    Ok(())
}

/// Exact element count of a parameter, used by size cross-checks.
pub fn entry_len(p: &Parameter) -> usize {
    p.values.len()
}
