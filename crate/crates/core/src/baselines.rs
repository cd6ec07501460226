//! Classical imputers: temporal global mean, 2D/3D nearest-neighbor, and
//! 2D/3D thin-plate-spline RBF interpolation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{GridBlock, GridSeries};
use crate::error::{Error, Result};
use crate::masking::MaskBlock;

/// Per-pixel, per-hour-of-day training means (24 x H x W) with sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanTable {
    h: usize,
    w: usize,
    means: Vec<f32>,
    counts: Vec<u32>,
}

impl MeanTable {
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn mean(&self, hour: u32, r: usize, c: usize) -> f32 {
        self.means[(hour as usize * self.h + r) * self.w + c]
    }
    pub fn count(&self, hour: u32, r: usize, c: usize) -> u32 {
        self.counts[(hour as usize * self.h + r) * self.w + c]
    }
    pub fn means(&self) -> &[f32] {
        &self.means
    }

    /// Persist as UGB with T = 24 (means only).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::ugb::write_f32(path, 24, self.h, self.w, &self.means)
    }

    pub fn load(path: &std::path::Path) -> Result<MeanTable> {
        let block = crate::io::ugb::read_grid_block(path)?;
        if block.t() != 24 {
            return Err(Error::format(format!(
                "{}: mean table must have T=24, got {}",
                path.display(),
                block.t()
            )));
        }
        Ok(MeanTable {
            h: block.h(),
            w: block.w(),
            means: block.data().to_vec(),
            counts: vec![0; 24 * block.h() * block.w()],
        })
    }
}

/// Average demand at each pixel for each hour of the day over the training
/// series. Cells never observed default to mean 0.
pub fn fit_global_mean(train: &GridSeries) -> Result<MeanTable> {
    if (train.n_frames() as u64) * (train.bin_hours as u64) < 24 {
        return Err(Error::param("training series must cover at least one full day"));
    }
    let (h, w) = (train.h(), train.w());
    let mut sums = vec![0.0f64; 24 * h * w];
    let mut counts = vec![0u32; 24 * h * w];
    for k in 0..train.n_frames() {
        let hour = train.hour_of_frame(k) as usize;
        let frame = train.frame(k);
        let base = hour * h * w;
        for (i, &v) in frame.iter().enumerate() {
            sums[base + i] += v as f64;
            counts[base + i] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    Ok(MeanTable { h, w, means, counts })
}

/// Fill the holes of one frame from the mean table; valid cells pass through.
pub fn predict_global_mean(
    table: &MeanTable,
    frame: &[f32],
    mask_frame: &[u8],
    hour_of_day: u32,
) -> Result<Vec<f32>> {
    if hour_of_day > 23 {
        return Err(Error::param(format!("hour_of_day {hour_of_day} outside 0..=23")));
    }
    if frame.len() != table.h * table.w || mask_frame.len() != frame.len() {
        return Err(Error::shape("predict_global_mean: frame/table size mismatch"));
    }
    Ok(frame
        .iter()
        .zip(mask_frame)
        .enumerate()
        .map(|(i, (&v, &m))| {
            if m == 1 {
                v
            } else {
                table.means[hour_of_day as usize * table.h * table.w + i]
            }
        })
        .collect())
}

/// Nearest valid voxel by Euclidean distance in index space (voxels
/// unit-spaced on every axis). `dims` = 2 searches within each frame, 3 over
/// the whole block. Ties break toward the smallest t, then row, then col.
pub fn nn_impute(block: &GridBlock, mask: &MaskBlock, dims: u8) -> Result<GridBlock> {
    if block.dims() != mask.dims() {
        return Err(Error::shape("nn_impute: block/mask dims differ"));
    }
    if dims != 2 && dims != 3 {
        return Err(Error::param("nn_impute dims must be 2 or 3"));
    }
    let (t, h, w) = block.dims();
    let mut out = block.clone();
    // valid voxels in (t, row, col) lexicographic order; a strict `<` scan
    // then lands on the lexicographically first of any equidistant set
    let collect_valid = |t_range: std::ops::Range<usize>| -> Vec<(usize, usize, usize)> {
        let mut valid = Vec::new();
        for tt in t_range {
            for r in 0..h {
                for c in 0..w {
                    if mask.get(tt, r, c) == 1 {
                        valid.push((tt, r, c));
                    }
                }
            }
        }
        valid
    };
    let fill = |out: &mut GridBlock,
                t_range: std::ops::Range<usize>,
                valid: &[(usize, usize, usize)]|
     -> Result<()> {
        if valid.is_empty() {
            return Err(Error::Imputer(format!(
                "no valid voxel in {} scope",
                if dims == 2 { "frame" } else { "block" }
            )));
        }
        for tt in t_range {
            for r in 0..h {
                for c in 0..w {
                    if mask.get(tt, r, c) == 1 {
                        continue;
                    }
                    let mut best = usize::MAX;
                    let mut best_val = 0.0f32;
                    for &(vt, vr, vc) in valid {
                        let dt = vt as isize - tt as isize;
                        let dr = vr as isize - r as isize;
                        let dc = vc as isize - c as isize;
                        let d2 = (dt * dt + dr * dr + dc * dc) as usize;
                        if d2 < best {
                            best = d2;
                            best_val = block.get(vt, vr, vc);
                        }
                    }
                    out.set(tt, r, c, best_val);
                }
            }
        }
        Ok(())
    };
    if dims == 2 {
        for tt in 0..t {
            let valid = collect_valid(tt..tt + 1);
            fill(&mut out, tt..tt + 1, &valid)?;
        }
    } else {
        let valid = collect_valid(0..t);
        fill(&mut out, 0..t, &valid)?;
    }
    Ok(out)
}

/// Thin-plate-spline RBF with a linear polynomial tail, fitted on a seeded
/// uniform sample of valid voxels.
#[derive(Clone, Debug)]
pub struct RbfConfig {
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig { sample_count: 500, seed: 0 }
    }
}

const RBF_RIDGE: f64 = 1e-8;

fn tps(r2: f64) -> f64 {
    // phi(r) = r^2 ln r = 0.5 * r^2 ln(r^2)
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Fit + evaluate one scattered-data system. `coords` rows are sample
/// positions, `holes` the positions to predict; linear tail has one column
/// per coordinate axis plus a constant.
fn rbf_solve(coords: &[Vec<f64>], values: &[f64], holes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = coords.len();
    let dof = coords[0].len() + 1;
    if n < dof + 1 {
        return Err(Error::Imputer(format!(
            "rbf needs at least {} samples, got {n}",
            dof + 1
        )));
    }
    let size = n + dof;
    let mut a = DMatrix::<f64>::zeros(size, size);
    for i in 0..n {
        for j in 0..n {
            let r2: f64 =
                coords[i].iter().zip(&coords[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            a[(i, j)] = tps(r2);
        }
        a[(i, i)] += RBF_RIDGE;
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
        for d in 0..dof - 1 {
            a[(i, n + 1 + d)] = coords[i][d];
            a[(n + 1 + d, i)] = coords[i][d];
        }
    }
    let mut rhs = DVector::<f64>::zeros(size);
    for i in 0..n {
        rhs[i] = values[i];
    }
    let solution = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Imputer("rbf system is singular".into()))?;
    let mut out = Vec::with_capacity(holes.len());
    for hx in holes {
        let mut acc = solution[n];
        for d in 0..dof - 1 {
            acc += solution[n + 1 + d] * hx[d];
        }
        for i in 0..n {
            let r2: f64 = coords[i].iter().zip(hx).map(|(x, y)| (x - y) * (x - y)).sum();
            acc += solution[i] * tps(r2);
        }
        out.push(acc);
    }
    Ok(out)
}

pub fn rbf_impute(block: &GridBlock, mask: &MaskBlock, dims: u8, cfg: &RbfConfig) -> Result<GridBlock> {
    if block.dims() != mask.dims() {
        return Err(Error::shape("rbf_impute: block/mask dims differ"));
    }
    if dims != 2 && dims != 3 {
        return Err(Error::param("rbf_impute dims must be 2 or 3"));
    }
    let (t, h, w) = block.dims();
    let mut out = block.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run = |t_range: std::ops::Range<usize>, use_t: bool| -> Result<()> {
        let mut valid = Vec::new();
        let mut holes = Vec::new();
        let mut hole_pos = Vec::new();
        for tt in t_range.clone() {
            for r in 0..h {
                for c in 0..w {
                    let coord = if use_t {
                        vec![tt as f64, r as f64, c as f64]
                    } else {
                        vec![r as f64, c as f64]
                    };
                    if mask.get(tt, r, c) == 1 {
                        valid.push((coord, block.get(tt, r, c) as f64));
                    } else {
                        holes.push(coord);
                        hole_pos.push((tt, r, c));
                    }
                }
            }
        }
        if holes.is_empty() {
            return Ok(());
        }
        let k = cfg.sample_count.min(valid.len());
        let picks = rand::seq::index::sample(&mut rng, valid.len(), k);
        let mut coords = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for idx in picks.iter() {
            coords.push(valid[idx].0.clone());
            values.push(valid[idx].1);
        }
        let predicted = rbf_solve(&coords, &values, &holes)?;
        for ((tt, r, c), v) in hole_pos.into_iter().zip(predicted) {
            out.set(tt, r, c, v as f32);
        }
        Ok(())
    };
    if dims == 2 {
        for tt in 0..t {
            run(tt..tt + 1, false)?;
        }
    } else {
        run(0..t, true)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_start_time;
    use rand::Rng;

    fn series_from_frames(h: usize, w: usize, frames: Vec<Vec<f32>>) -> GridSeries {
        let n = frames.len();
        let data: Vec<f32> = frames.into_iter().flatten().collect();
        GridSeries::new(h, w, n, synth_start_time(), 1, data).unwrap()
    }

    #[test]
    fn mean_table_averages_per_hour() {
        // two days, 2x1 grid; pixel 0 has values 2 (day 1) and 4 (day 2) at hour 8
        let mut frames = Vec::new();
        for day in 0..2 {
            for hour in 0..24 {
                let v = if hour == 8 {
                    if day == 0 {
                        2.0
                    } else {
                        4.0
                    }
                } else {
                    0.0
                };
                frames.push(vec![v, 1.0]);
            }
        }
        let series = series_from_frames(2, 1, frames);
        let table = fit_global_mean(&series).unwrap();
        assert_eq!(table.mean(8, 0, 0), 3.0);
        assert_eq!(table.count(8, 0, 0), 2);
        let imputed = predict_global_mean(&table, &[7.0, 7.0], &[0, 1], 8).unwrap();
        assert_eq!(imputed, vec![3.0, 7.0]);
    }

    #[test]
    fn mean_table_unobserved_is_zero_and_constant_series() {
        let frames = vec![vec![5.0, 5.0]; 24];
        let series = series_from_frames(1, 2, frames);
        let table = fit_global_mean(&series).unwrap();
        for hour in 0..24 {
            assert_eq!(table.mean(hour, 0, 0), 5.0);
        }
        assert!(predict_global_mean(&table, &[0.0, 0.0], &[0, 0], 24).is_err());
        assert!(fit_global_mean(&series_from_frames(1, 2, vec![vec![0.0, 0.0]; 10])).is_err());
    }

    #[test]
    fn nn_takes_sole_neighbor() {
        let mut block = GridBlock::zeros(1, 1, 2);
        block.set(0, 0, 1, 7.0);
        let mask = MaskBlock::new(1, 1, 2, vec![0, 1]).unwrap();
        let out = nn_impute(&block, &mask, 2).unwrap();
        assert_eq!(out.get(0, 0, 0), 7.0);
    }

    #[test]
    fn nn_tie_breaks_toward_smaller_row() {
        let mut block = GridBlock::zeros(1, 3, 1);
        block.set(0, 0, 0, 3.0);
        block.set(0, 2, 0, 9.0);
        let mask = MaskBlock::new(1, 3, 1, vec![1, 0, 1]).unwrap();
        let out = nn_impute(&block, &mask, 2).unwrap();
        assert_eq!(out.get(0, 1, 0), 3.0);
    }

    #[test]
    fn nn_2d_vs_3d_differ_when_temporal_neighbor_closer() {
        // hole at frame 1 center; frame 1 has a far valid cell, frame 0 has
        // the same cell valid right at the hole position
        let (t, h, w) = (2usize, 5usize, 5usize);
        let mut block = GridBlock::zeros(t, h, w);
        let mut mask_data = vec![0u8; t * h * w];
        // frame 0: all valid, value 1 at (2,2)
        for i in 0..h * w {
            mask_data[i] = 1;
        }
        block.set(0, 2, 2, 1.0);
        // frame 1: only corner (0,0) valid with value 9
        mask_data[h * w] = 1;
        block.set(1, 0, 0, 9.0);
        let mask = MaskBlock::new(t, h, w, mask_data).unwrap();
        let out2 = nn_impute(&block, &mask, 2).unwrap();
        let out3 = nn_impute(&block, &mask, 3).unwrap();
        assert_eq!(out2.get(1, 2, 2), 9.0); // same-frame corner
        assert_eq!(out3.get(1, 2, 2), 1.0); // temporally adjacent, distance 1
    }

    #[test]
    fn nn_matches_exhaustive_oracle() {
        // independent oracle: enumerate all voxels, rank by (d2, t, r, c)
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..60 {
            let (t, h, w) = (3usize, 8usize, 8usize);
            let mut data = vec![0.0f32; t * h * w];
            for v in data.iter_mut() {
                *v = rng.gen_range(0.0..10.0);
            }
            let block = GridBlock::new(t, h, w, data).unwrap();
            let mut mask_data: Vec<u8> =
                (0..t * h * w).map(|_| if rng.gen_bool(0.5) { 1 } else { 0 }).collect();
            for tt in 0..t {
                mask_data[tt * h * w + rng.gen_range(0..h * w)] = 1;
            }
            let mask = MaskBlock::new(t, h, w, mask_data).unwrap();
            for dims in [2u8, 3u8] {
                let got = nn_impute(&block, &mask, dims).unwrap();
                for tt in 0..t {
                    for r in 0..h {
                        for c in 0..w {
                            if mask.get(tt, r, c) == 1 {
                                assert_eq!(got.get(tt, r, c), block.get(tt, r, c));
                                continue;
                            }
                            let mut candidates = Vec::new();
                            let trange = if dims == 2 { tt..tt + 1 } else { 0..t };
                            for vt in trange {
                                for vr in 0..h {
                                    for vc in 0..w {
                                        if mask.get(vt, vr, vc) == 1 {
                                            let d2 = (vt as isize - tt as isize).pow(2)
                                                + (vr as isize - r as isize).pow(2)
                                                + (vc as isize - c as isize).pow(2);
                                            candidates.push((d2, vt, vr, vc));
                                        }
                                    }
                                }
                            }
                            candidates.sort();
                            let best = candidates[0];
                            assert_eq!(
                                got.get(tt, r, c),
                                block.get(best.1, best.2, best.3),
                                "case {case} dims {dims} voxel ({tt},{r},{c})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn nn_no_valid_voxel_errors() {
        let block = GridBlock::zeros(1, 2, 2);
        let mask = MaskBlock::new(1, 2, 2, vec![0, 0, 0, 0]).unwrap();
        assert!(nn_impute(&block, &mask, 2).is_err());
    }

    #[test]
    fn baselines_leave_valid_voxels_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (t, h, w) = (2usize, 6usize, 6usize);
        let data: Vec<f32> = (0..t * h * w).map(|_| rng.gen_range(0.0..5.0)).collect();
        let block = GridBlock::new(t, h, w, data).unwrap();
        let mut mask_data: Vec<u8> =
            (0..t * h * w).map(|_| if rng.gen_bool(0.6) { 1 } else { 0 }).collect();
        mask_data[0] = 1;
        mask_data[h * w] = 1;
        let mask = MaskBlock::new(t, h, w, mask_data).unwrap();
        for out in [
            nn_impute(&block, &mask, 3).unwrap(),
            rbf_impute(&block, &mask, 3, &RbfConfig::default()).unwrap(),
        ] {
            for i in 0..t * h * w {
                if mask.data()[i] == 1 {
                    assert_eq!(out.data()[i], block.data()[i]);
                }
            }
        }
    }

    #[test]
    fn rbf_reproduces_constant_field() {
        let (t, h, w) = (1usize, 8usize, 8usize);
        let block = GridBlock::new(t, h, w, vec![4.25; h * w]).unwrap();
        let mut mask_data = vec![1u8; h * w];
        for i in 20..36 {
            mask_data[i] = 0;
        }
        let mask = MaskBlock::new(t, h, w, mask_data).unwrap();
        let out = rbf_impute(&block, &mask, 2, &RbfConfig::default()).unwrap();
        for &v in out.data() {
            assert!((v - 4.25).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn rbf_interpolates_sample_sites() {
        // with sample_count >= valid count every valid voxel is a sample site;
        // fit residual at the sites themselves stays within the ridge term
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (7usize, 7usize);
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..3.0)).collect();
        let block = GridBlock::new(1, h, w, data).unwrap();
        let mut mask_data = vec![1u8; h * w];
        mask_data[24] = 0;
        let mask = MaskBlock::new(1, h, w, mask_data).unwrap();
        let coords: Vec<Vec<f64>> = (0..h * w)
            .filter(|&i| i != 24)
            .map(|i| vec![(i / w) as f64, (i % w) as f64])
            .collect();
        let values: Vec<f64> =
            (0..h * w).filter(|&i| i != 24).map(|i| block.data()[i] as f64).collect();
        let at_sites = rbf_solve(&coords, &values, &coords).unwrap();
        for (got, want) in at_sites.iter().zip(&values) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        // and the hole prediction is finite and bounded sanely
        let out = rbf_impute(&block, &mask, 2, &RbfConfig::default()).unwrap();
        assert!(out.get(0, 24 / w, 24 % w).is_finite());
    }

    #[test]
    fn rbf_recovers_linear_field() {
        let (t, h, w) = (2usize, 10usize, 10usize);
        let mut data = vec![0.0f32; t * h * w];
        for tt in 0..t {
            for r in 0..h {
                for c in 0..w {
                    data[(tt * h + r) * w + c] = (1.5 * r as f64 - 0.75 * c as f64 + 2.0) as f32;
                }
            }
        }
        let block = GridBlock::new(t, h, w, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut mask_data: Vec<u8> =
            (0..t * h * w).map(|_| if rng.gen_bool(0.7) { 1 } else { 0 }).collect();
        for i in 0..8 {
            mask_data[i] = 1;
        }
        let mask = MaskBlock::new(t, h, w, mask_data).unwrap();
        for dims in [2u8, 3u8] {
            let out = rbf_impute(&block, &mask, dims, &RbfConfig::default()).unwrap();
            for i in 0..t * h * w {
                assert!(
                    (out.data()[i] - block.data()[i]).abs() < 1e-5,
                    "dims {dims} voxel {i}: {} vs {}",
                    out.data()[i],
                    block.data()[i]
                );
            }
        }
    }

    #[test]
    fn rbf_sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (12usize, 12usize);
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..9.0)).collect();
        let block = GridBlock::new(1, h, w, data).unwrap();
        let mut mask_data = vec![1u8; h * w];
        for i in 60..80 {
            mask_data[i] = 0;
        }
        let mask = MaskBlock::new(1, h, w, mask_data).unwrap();
        let cfg = RbfConfig { sample_count: 40, seed: 77 };
        let a = rbf_impute(&block, &mask, 2, &cfg).unwrap();
        let b = rbf_impute(&block, &mask, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_table_round_trips_via_ugb() {
        use tempfile::tempdir;
        let frames = vec![vec![1.0, 2.0, 3.0, 4.0]; 24];
        let series = series_from_frames(2, 2, frames);
        let table = fit_global_mean(&series).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("mean.ugb");
        table.save(&path).unwrap();
        let back = MeanTable::load(&path).unwrap();
        assert_eq!(back.means(), table.means());
    }
}
