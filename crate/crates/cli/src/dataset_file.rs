//! Dataset container file.
//!
//! Layout (integers little-endian, floats IEEE 754 LE):
//!   magic   b"M2OD"
//!   version u32 = 1
//!   metadata:
//!     spot_diameter_um f64, spacing_um f64
//!     level_count u32, image_h u32, image_w u32
//!     seed u64
//!     ceiling_count u32, ceilings f64 each
//!     gene_count u32, per gene: name_len u32 + UTF-8 bytes
//!     sample_count u32
//!   per sample:
//!     spot_id  len u32 + bytes
//!     slide_id len u32 + bytes
//!     center   f64 row_um, f64 col_um
//!     images   level_count blobs of 3*h*w raw bytes (planes R, G, B)
//!     raw_counts flag u8 (0 absent, 1 present), then gene_count u32 each
//!     values   gene_count f64 each (log-normalized)
//!
//! Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use m2ost_core::data::{DatasetMeta, ImagePatch, MultiScaleSample, SpotExpression, StDataset};

use crate::error::{CmdError, CmdResult};

const MAGIC: &[u8; 4] = b"M2OD";
const VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(ds: &StDataset) -> CmdResult<Vec<u8>> {
    let k = ds.gene_names.len();
    let (h, w) = (ds.meta.image_h, ds.meta.image_w);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ds.meta.spot_diameter_um.to_le_bytes());
    out.extend_from_slice(&ds.meta.spacing_um.to_le_bytes());
    out.extend_from_slice(&(ds.meta.level_count as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&ds.meta.seed.to_le_bytes());
    out.extend_from_slice(&(ds.meta.oracle_pcc_ceiling.len() as u32).to_le_bytes());
    for &c in &ds.meta.oracle_pcc_ceiling {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for name in ds.gene_names.iter() {
        put_str(&mut out, name);
    }
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for s in &ds.samples {
        if s.images.len() != ds.meta.level_count {
            return Err(CmdError::Io(format!(
                "sample {} has {} levels, metadata says {}",
                s.spot_id,
                s.images.len(),
                ds.meta.level_count
            )));
        }
        put_str(&mut out, &s.spot_id);
        put_str(&mut out, &s.slide_id);
        out.extend_from_slice(&s.spot_center_um.0.to_le_bytes());
        out.extend_from_slice(&s.spot_center_um.1.to_le_bytes());
        for img in &s.images {
            if img.h != h || img.w != w {
                return Err(CmdError::Io(format!(
                    "sample {}: image {}x{} does not match metadata {}x{}",
                    s.spot_id, img.h, img.w, h, w
                )));
            }
            out.extend_from_slice(&img.data);
        }
        match &s.target.raw_counts {
            Some(counts) => {
                out.push(1);
                for &c in counts {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        for &v in &s.target.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CmdResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CmdError::Io(format!(
                "dataset file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> CmdResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> CmdResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> CmdResult<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> CmdResult<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> CmdResult<String> {
        let len = self.u32(what)? as usize;
        Ok(std::str::from_utf8(self.take(len, what)?)
            .map_err(|e| CmdError::Io(format!("invalid UTF-8 in {what}: {e}")))?
            .to_string())
    }
}

pub fn decode(buf: &[u8]) -> CmdResult<StDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CmdError::Io("not a dataset container (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CmdError::Io(format!(
            "dataset container version {version} unsupported (expected {VERSION})"
        )));
    }
    let spot_diameter_um = r.f64("spot diameter")?;
    let spacing_um = r.f64("spacing")?;
    let level_count = r.u32("level count")? as usize;
    let image_h = r.u32("image height")? as usize;
    let image_w = r.u32("image width")? as usize;
    let seed = r.u64("seed")?;
    let ceiling_count = r.u32("ceiling count")? as usize;
    let mut oracle_pcc_ceiling = Vec::with_capacity(ceiling_count);
    for _ in 0..ceiling_count {
        oracle_pcc_ceiling.push(r.f64("ceiling")?);
    }
    let k = r.u32("gene count")? as usize;
    let mut gene_names = Vec::with_capacity(k);
    for _ in 0..k {
        gene_names.push(r.string("gene name")?);
    }
    let gene_names = Arc::new(gene_names);
    let sample_count = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let spot_id = r.string("spot id")?;
        let slide_id = r.string("slide id")?;
        let row = r.f64("center row")?;
        let col = r.f64("center col")?;
        let mut images = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let blob = r.take(3 * image_h * image_w, "image blob")?;
            images.push(
                ImagePatch::new(image_h, image_w, blob.to_vec())
                    .map_err(|e| CmdError::Io(e.to_string()))?,
            );
        }
        let raw_counts = match r.u8("raw-count flag")? {
            0 => None,
            1 => {
                let mut counts = Vec::with_capacity(k);
                for _ in 0..k {
                    counts.push(r.u32("raw count")?);
                }
                Some(counts)
            }
            other => {
                return Err(CmdError::Io(format!("invalid raw-count flag {other}")));
            }
        };
        let mut values = Vec::with_capacity(k);
        for _ in 0..k {
            values.push(r.f64("expression value")?);
        }
        let mut target = SpotExpression::new(values, Arc::clone(&gene_names))
            .map_err(|e| CmdError::Io(e.to_string()))?;
        target.raw_counts = raw_counts;
        samples.push(MultiScaleSample {
            images,
            level_present: vec![true; level_count],
            target,
            spot_id,
            slide_id,
            spot_center_um: (row, col),
        });
    }
    if r.pos != buf.len() {
        return Err(CmdError::Io(format!(
            "{} trailing bytes after the last sample record",
            buf.len() - r.pos
        )));
    }
    Ok(StDataset {
        samples,
        gene_names,
        meta: DatasetMeta {
            spot_diameter_um,
            spacing_um,
            level_count,
            image_h,
            image_w,
            seed,
            oracle_pcc_ceiling,
        },
    })
}

pub fn save(ds: &StDataset, path: &Path) -> CmdResult<()> {
    let bytes = encode(ds)?;
    let mut f = fs::File::create(path)
        .map_err(|e| CmdError::Io(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> CmdResult<StDataset> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| CmdError::Io(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf)
}

/// Analytic file size of a dataset with fixed-width ids, used by tests.
pub fn expected_size(
    samples: usize,
    levels: usize,
    h: usize,
    w: usize,
    genes: usize,
    gene_name_bytes: usize,
    spot_id_bytes: usize,
    slide_id_bytes: usize,
    ceilings: usize,
    with_raw_counts: bool,
) -> usize {
    let header = 4 + 4 + 8 + 8 + 4 + 4 + 4 + 8 + 4 + 8 * ceilings + 4 + gene_name_bytes + 4 * genes + 4;
    let per_sample = (4 + spot_id_bytes)
        + (4 + slide_id_bytes)
        + 16
        + levels * 3 * h * w
        + 1
        + if with_raw_counts { 4 * genes } else { 0 }
        + 8 * genes;
    header + samples * per_sample
}
