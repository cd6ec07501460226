pub mod chunk;
pub mod errmap;
pub mod eval;
pub mod gradcheck;
pub mod impute;
pub mod mask;
pub mod rasterize;
pub mod scenario;
pub mod synth;
pub mod train;

use std::path::Path;

use gridmend_core::data::{AnomalyDay, GridBlock, Hotspot, RegionSpec, SyntheticCitySpec};
use gridmend_core::io::kv;
use gridmend_core::masking::MaskGenConfig;
use gridmend_core::{Error, Result};

/// Width scale as `num/den` or a bare integer.
pub fn parse_width(s: &str) -> Result<(u32, u32)> {
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s.trim(), "1"),
    };
    let num: u32 = num.parse().map_err(|_| Error::Param(format!("bad width scale '{s}'")))?;
    let den: u32 = den.parse().map_err(|_| Error::Param(format!("bad width scale '{s}'")))?;
    if num == 0 || den == 0 {
        return Err(Error::Param("width scale must be positive".into()));
    }
    Ok((num, den))
}

pub fn parse_timestamp(s: &str) -> Result<chrono::NaiveDateTime> {
    chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map_err(|e| Error::Param(format!("timestamp '{s}': {e}")))
}

pub fn load_region(path: &Path) -> Result<RegionSpec> {
    let pairs = kv::read_kv(path)?;
    RegionSpec::new(
        kv::required(&pairs, "lon_min")?,
        kv::required(&pairs, "lon_max")?,
        kv::required(&pairs, "lat_min")?,
        kv::required(&pairs, "lat_max")?,
        kv::optional(&pairs, "grid_w", 64)?,
        kv::optional(&pairs, "grid_h", 64)?,
        kv::optional(&pairs, "bin_hours", 1)?,
    )
}

/// Synthetic city from a key=value file: repeated `hotspot = row,col,radius,peak`
/// lines and `anomaly = day,row0,col0,row1,col1,multiplier` rectangles.
pub fn load_synth_spec(path: Option<&Path>, seed: u64) -> Result<SyntheticCitySpec> {
    let mut spec = SyntheticCitySpec::default_city();
    if let Some(path) = path {
        let pairs = kv::read_kv(path)?;
        spec.grid_h = kv::optional(&pairs, "grid_h", 64)?;
        spec.grid_w = kv::optional(&pairs, "grid_w", 64)?;
        spec.diurnal_amplitude = kv::optional(&pairs, "diurnal_amplitude", 0.6)?;
        let hotspots = kv::repeated(&pairs, "hotspot");
        if !hotspots.is_empty() {
            spec.hotspots.clear();
            for line in hotspots {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 4 {
                    return Err(Error::Format(format!(
                        "hotspot '{line}': expected row,col,radius,peak"
                    )));
                }
                spec.hotspots.push(Hotspot {
                    row: f[0].parse().map_err(|_| Error::Format(format!("hotspot '{line}'")))?,
                    col: f[1].parse().map_err(|_| Error::Format(format!("hotspot '{line}'")))?,
                    radius: f[2].parse().map_err(|_| Error::Format(format!("hotspot '{line}'")))?,
                    peak_rate: f[3]
                        .parse()
                        .map_err(|_| Error::Format(format!("hotspot '{line}'")))?,
                });
            }
        }
        spec.anomaly_days.clear();
        for line in kv::repeated(&pairs, "anomaly") {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::Format(format!(
                    "anomaly '{line}': expected day,row0,col0,row1,col1,multiplier"
                )));
            }
            let day: usize =
                f[0].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let r0: usize = f[1].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let c0: usize = f[2].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let r1: usize = f[3].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let c1: usize = f[4].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let mult: f64 =
                f[5].parse().map_err(|_| Error::Format(format!("anomaly '{line}'")))?;
            let mut cells = Vec::new();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    cells.push((r, c));
                }
            }
            spec.anomaly_days.push(AnomalyDay { day, cells, multiplier: mult });
        }
    }
    spec.noise_seed = seed;
    Ok(spec)
}

/// Mask generation config; also carries `mask_file` for scenario mode.
pub fn load_mask_cfg(path: Option<&Path>) -> Result<(MaskGenConfig, Option<String>)> {
    let mut cfg = MaskGenConfig::default();
    let mut mask_file = None;
    if let Some(path) = path {
        let pairs = kv::read_kv(path)?;
        cfg.walk_steps = kv::optional(&pairs, "walk_steps", cfg.walk_steps)?;
        cfg.brush_radius = kv::optional(&pairs, "brush_radius", cfg.brush_radius)?;
        cfg.blur_sigma = kv::optional(&pairs, "blur_sigma", cfg.blur_sigma)?;
        cfg.threshold_percentile =
            kv::optional(&pairs, "threshold_percentile", cfg.threshold_percentile)?;
        cfg.per_frame_independent =
            kv::optional(&pairs, "per_frame_independent", cfg.per_frame_independent)?;
        mask_file = pairs.iter().find(|(k, _)| k == "mask_file").map(|(_, v)| v.clone());
    }
    cfg.validate()?;
    Ok((cfg, mask_file))
}

/// Blocks for training: a directory of UGB block files (sorted by name) or a
/// single series file chunked at `t`.
pub fn load_blocks(data: &Path, t: usize) -> Result<Vec<GridBlock>> {
    if data.is_dir() {
        let mut paths: Vec<_> = std::fs::read_dir(data)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "ugb").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format(format!("{}: no .ugb blocks found", data.display())));
        }
        let mut blocks = Vec::with_capacity(paths.len());
        for p in paths {
            let b = gridmend_core::io::ugb::read_grid_block(&p)?;
            if b.t() != t {
                return Err(Error::Format(format!(
                    "{}: block T={} does not match --t {}",
                    p.display(),
                    b.t(),
                    t
                )));
            }
            blocks.push(b);
        }
        Ok(blocks)
    } else {
        let series = gridmend_core::io::ugb::read_series(data)?;
        gridmend_core::data::chunk_series(&series, t)
    }
}
