//! UCKP checkpoint container.
//!
//! Layout: magic `UCKP` (4 bytes), version u8 = 1, u32 entry count; per
//! entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims LE, f32
//! payload. Optimizer state lives under the `opt.` prefix, batch-norm
//! running statistics under `bn.`, model configuration under `cfg.`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UCKP";
pub const VERSION: u8 = 1;

/// Reserved name prefixes for non-weight entries.
pub const PREFIX_OPT: &str = "opt.";
pub const PREFIX_BN: &str = "bn.";
pub const PREFIX_CFG: &str = "cfg.";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn scalar(v: f32) -> Self {
        Entry { dims: vec![1], data: vec![v] }
    }
}

pub type Entries = BTreeMap<String, Entry>;

pub fn write(path: &Path, entries: &Entries) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION])?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::format("too many checkpoint entries"))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, entry) in entries {
        let expected: usize = entry.dims.iter().map(|&d| d as usize).product();
        if expected != entry.data.len() {
            return Err(Error::shape(format!(
                "entry {name}: dims {:?} do not match payload {}",
                entry.dims,
                entry.data.len()
            )));
        }
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::format(format!("entry name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let ndim = u8::try_from(entry.dims.len())
            .map_err(|_| Error::format("too many dims in checkpoint entry"))?;
        out.write_all(&[ndim])?;
        for d in &entry.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &entry.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Entries> {
    let mut input = BufReader::new(File::open(path)?);
    let mut head = [0u8; 5];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if head[0..4] != MAGIC {
        return Err(Error::format(format!("{}: bad magic", path.display())));
    }
    if head[4] != VERSION {
        return Err(Error::format(format!("{}: unsupported version {}", path.display(), head[4])));
    }
    let mut buf4 = [0u8; 4];
    input
        .read_exact(&mut buf4)
        .map_err(|_| Error::format(format!("{}: truncated entry count", path.display())))?;
    let count = u32::from_le_bytes(buf4);
    let mut entries = Entries::new();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        input
            .read_exact(&mut buf2)
            .map_err(|_| Error::format(format!("{}: truncated entry", path.display())))?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input
            .read_exact(&mut name_bytes)
            .map_err(|_| Error::format(format!("{}: truncated entry name", path.display())))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(format!("{}: entry name is not UTF-8", path.display())))?;
        let mut b1 = [0u8; 1];
        input
            .read_exact(&mut b1)
            .map_err(|_| Error::format(format!("{}: truncated ndim", path.display())))?;
        let ndim = b1[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input
                .read_exact(&mut buf4)
                .map_err(|_| Error::format(format!("{}: truncated dims", path.display())))?;
            dims.push(u32::from_le_bytes(buf4));
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d as usize).ok_or_else(|| Error::format("dim product overflows"))
        })?;
        let mut raw = vec![0u8; n * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::format(format!("{}: truncated payload for {name}", path.display())))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if entries.insert(name.clone(), Entry { dims, data }).is_some() {
            return Err(Error::format(format!("{}: duplicate entry {name}", path.display())));
        }
    }
    Ok(entries)
}
