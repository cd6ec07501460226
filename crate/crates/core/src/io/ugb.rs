//! UGB grid container.
//!
//! Layout: magic `UGB1` (4 bytes), version u8 = 1, dtype u8 (0 = f32,
//! 1 = u8), ndim u8 = 3, then 3 x u32 little-endian dims (T, H, W), then the
//! payload row-major (t outermost, then row, then col). Masks use dtype 1
//! with values in {0, 1}.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{GridBlock, GridSeries};
use crate::error::{Error, Result};
use crate::masking::MaskBlock;

pub const MAGIC: [u8; 4] = *b"UGB1";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

pub enum UgbPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

pub struct Ugb {
    pub dims: [u32; 3],
    pub payload: UgbPayload,
}

fn write_header(out: &mut impl Write, dtype: u8, dims: [u32; 3]) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION, dtype, 3])?;
    for d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f32(path: &Path, t: usize, h: usize, w: usize, data: &[f32]) -> Result<()> {
    if data.len() != t * h * w {
        return Err(Error::shape("ugb payload length mismatch"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("ugb payload must be finite"));
    }
    let dims = dims_u32(t, h, w)?;
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, DTYPE_F32, dims)?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_u8(path: &Path, t: usize, h: usize, w: usize, data: &[u8]) -> Result<()> {
    if data.len() != t * h * w {
        return Err(Error::shape("ugb payload length mismatch"));
    }
    let dims = dims_u32(t, h, w)?;
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, DTYPE_U8, dims)?;
    out.write_all(data)?;
    out.flush()?;
    Ok(())
}

fn dims_u32(t: usize, h: usize, w: usize) -> Result<[u32; 3]> {
    let conv = |d: usize| {
        u32::try_from(d).map_err(|_| Error::format(format!("dim {} overflows u32", d)))
    };
    Ok([conv(t)?, conv(h)?, conv(w)?])
}

pub fn read(path: &Path) -> Result<Ugb> {
    let mut input = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if head[0..4] != MAGIC {
        return Err(Error::format(format!("{}: bad magic", path.display())));
    }
    if head[4] != VERSION {
        return Err(Error::format(format!("{}: unsupported version {}", path.display(), head[4])));
    }
    let dtype = head[5];
    if head[6] != 3 {
        return Err(Error::format(format!("{}: expected ndim 3, got {}", path.display(), head[6])));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::format(format!("{}: truncated dims", path.display())))?;
        *d = u32::from_le_bytes(buf);
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize).ok_or_else(|| Error::format("dim product overflows"))
    })?;
    let payload = match dtype {
        DTYPE_F32 => {
            let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::format("payload size overflows"))?];
            input
                .read_exact(&mut raw)
                .map_err(|_| Error::format(format!("{}: truncated payload", path.display())))?;
            let mut data = Vec::with_capacity(n);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            UgbPayload::F32(data)
        }
        DTYPE_U8 => {
            let mut data = vec![0u8; n];
            input
                .read_exact(&mut data)
                .map_err(|_| Error::format(format!("{}: truncated payload", path.display())))?;
            UgbPayload::U8(data)
        }
        other => return Err(Error::format(format!("{}: unknown dtype {}", path.display(), other))),
    };
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok(Ugb { dims, payload })
}

pub fn write_grid_block(path: &Path, block: &GridBlock) -> Result<()> {
    write_f32(path, block.t(), block.h(), block.w(), block.data())
}

pub fn read_grid_block(path: &Path) -> Result<GridBlock> {
    let ugb = read(path)?;
    match ugb.payload {
        UgbPayload::F32(data) => {
            GridBlock::new(ugb.dims[0] as usize, ugb.dims[1] as usize, ugb.dims[2] as usize, data)
        }
        UgbPayload::U8(_) => {
            Err(Error::format(format!("{}: expected f32 grid, found u8 payload", path.display())))
        }
    }
}

pub fn write_mask_block(path: &Path, mask: &MaskBlock) -> Result<()> {
    write_u8(path, mask.t(), mask.h(), mask.w(), mask.data())
}

pub fn read_mask_block(path: &Path) -> Result<MaskBlock> {
    let ugb = read(path)?;
    match ugb.payload {
        UgbPayload::U8(data) => {
            MaskBlock::new(ugb.dims[0] as usize, ugb.dims[1] as usize, ugb.dims[2] as usize, data)
                .map_err(|e| Error::format(format!("{}: {}", path.display(), e)))
        }
        UgbPayload::F32(_) => {
            Err(Error::format(format!("{}: expected u8 mask, found f32 payload", path.display())))
        }
    }
}

/// A series is a UGB file with T = frame count plus a line-oriented sidecar
/// `<path>.meta` carrying `start_time=` and `bin_hours=`.
pub fn series_meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

pub fn write_series(path: &Path, series: &GridSeries) -> Result<()> {
    write_f32(path, series.n_frames(), series.h(), series.w(), series.data())?;
    let meta = [
        ("start_time".to_string(), series.start_time.format("%Y-%m-%dT%H:%M:%S").to_string()),
        ("bin_hours".to_string(), series.bin_hours.to_string()),
    ];
    super::kv::write_kv(&series_meta_path(path), &meta)
}

pub fn read_series(path: &Path) -> Result<GridSeries> {
    let block = read_grid_block(path)?;
    let meta = super::kv::read_kv(&series_meta_path(path))?;
    let start_time = meta
        .iter()
        .find(|(k, _)| k == "start_time")
        .ok_or_else(|| Error::format("series meta missing start_time"))
        .and_then(|(_, v)| {
            chrono::NaiveDateTime::parse_from_str(v, "%Y-%m-%dT%H:%M:%S")
                .map_err(|e| Error::format(format!("series meta start_time: {e}")))
        })?;
    let bin_hours = meta
        .iter()
        .find(|(k, _)| k == "bin_hours")
        .ok_or_else(|| Error::format("series meta missing bin_hours"))
        .and_then(|(_, v)| {
            v.parse::<u32>().map_err(|e| Error::format(format!("series meta bin_hours: {e}")))
        })?;
    GridSeries::new(
        block.h(),
        block.w(),
        block.t(),
        start_time,
        bin_hours,
        block.data().to_vec(),
    )
}
