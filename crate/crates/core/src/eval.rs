//! Hole-restricted error metrics (l1/l2), SSIM, PSNR, aggregated spatial
//! error maps, and scenario time-series evaluation.

use std::io::Write;

use crate::baselines::{nn_impute, rbf_impute, MeanTable, RbfConfig};
use crate::data::{GridBlock, GridSeries};
use crate::error::{Error, Result};
use crate::masking::MaskBlock;
use crate::nn::{composite, UNetModel};
use crate::tensor::Scalar;

/// Mean |pred - gt| per hole voxel.
pub fn l1_hole(pred: &GridBlock, gt: &GridBlock, mask: &MaskBlock) -> Result<f64> {
    hole_moments(pred, gt, mask).map(|(l1, _)| l1)
}

/// Mean (pred - gt)^2 per hole voxel.
pub fn l2_hole(pred: &GridBlock, gt: &GridBlock, mask: &MaskBlock) -> Result<f64> {
    hole_moments(pred, gt, mask).map(|(_, l2)| l2)
}

fn hole_moments(pred: &GridBlock, gt: &GridBlock, mask: &MaskBlock) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(Error::shape("hole metric: dims differ"));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m == 0 {
            let d = p as f64 - g as f64;
            abs_sum += d.abs();
            sq_sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Numeric("hole metric undefined: mask has no holes".into()));
    }
    Ok((abs_sum / n as f64, sq_sum / n as f64))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// SSIM of one frame pair: 11x11 Gaussian window (sigma 1.5), C1=(0.01L)^2,
/// C2=(0.03L)^2, averaged over all fully-inside window positions.
pub fn ssim_frame(a: &[f32], b: &[f32], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 || !data_range.is_finite() {
        return Err(Error::param("ssim data range must be > 0"));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim: frame size mismatch"));
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::param(format!(
            "ssim requires frames of at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"
        )));
    }
    let half = SSIM_WIN / 2;
    let mut kernel = [0.0f64; SSIM_WIN * SSIM_WIN];
    let mut norm = 0.0;
    for dy in 0..SSIM_WIN {
        for dx in 0..SSIM_WIN {
            let fy = dy as f64 - half as f64;
            let fx = dx as f64 - half as f64;
            let v = (-(fy * fy + fx * fx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[dy * SSIM_WIN + dx] = v;
            norm += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= norm;
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WIN {
                let row = (cy + dy - half) * w + cx - half;
                for dx in 0..SSIM_WIN {
                    let k = kernel[dy * SSIM_WIN + dx];
                    let av = a[row + dx] as f64;
                    let bv = b[row + dx] as f64;
                    mu_a += k * av;
                    mu_b += k * bv;
                    aa += k * av * av;
                    bb += k * bv * bv;
                    ab += k * av * bv;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Block SSIM: per-frame SSIM averaged over T.
pub fn ssim(pred: &GridBlock, gt: &GridBlock, data_range: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("ssim: dims differ"));
    }
    let mut total = 0.0;
    for k in 0..pred.t() {
        total += ssim_frame(pred.frame(k), gt.frame(k), pred.h(), pred.w(), data_range)?;
    }
    Ok(total / pred.t() as f64)
}

/// 10*log10(peak^2 / MSE) over all voxels; identical inputs report +infinity.
pub fn psnr(pred: &GridBlock, gt: &GridBlock, peak: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("psnr: dims differ"));
    }
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::param("psnr peak must be > 0"));
    }
    let mut mse = 0.0f64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let d = p as f64 - g as f64;
        mse += d * d;
    }
    mse /= pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Debug)]
pub struct BlockMetrics {
    pub index: usize,
    pub l1_hole: f64,
    pub l2_hole: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub blocks: Vec<BlockMetrics>,
}

impl MetricReport {
    pub fn mean_l1_hole(&self) -> f64 {
        self.blocks.iter().map(|b| b.l1_hole).sum::<f64>() / self.blocks.len() as f64
    }
    pub fn mean_l2_hole(&self) -> f64 {
        self.blocks.iter().map(|b| b.l2_hole).sum::<f64>() / self.blocks.len() as f64
    }
    pub fn mean_ssim(&self) -> f64 {
        self.blocks.iter().map(|b| b.ssim).sum::<f64>() / self.blocks.len() as f64
    }
    pub fn mean_psnr(&self) -> f64 {
        self.blocks.iter().map(|b| b.psnr).sum::<f64>() / self.blocks.len() as f64
    }

    /// CSV rows `block_index,l1_hole,l2_hole,ssim,psnr` plus a mean row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "block_index,l1_hole,l2_hole,ssim,psnr")?;
        for b in &self.blocks {
            writeln!(out, "{},{},{},{},{}", b.index, b.l1_hole, b.l2_hole, b.ssim, b.psnr)?;
        }
        if !self.blocks.is_empty() {
            writeln!(
                out,
                "mean,{},{},{},{}",
                self.mean_l1_hole(),
                self.mean_l2_hole(),
                self.mean_ssim(),
                self.mean_psnr()
            )?;
        }
        Ok(())
    }
}

/// Metrics for aligned (pred, gt, mask) triples. PSNR/SSIM use `peak` as the
/// data range (convention: max of the ground-truth set when unspecified).
pub fn evaluate_blocks(
    preds: &[GridBlock],
    gts: &[GridBlock],
    masks: &[MaskBlock],
    peak: f64,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || gts.len() != masks.len() || preds.is_empty() {
        return Err(Error::Contract("evaluate_blocks: aligned nonempty inputs required".into()));
    }
    let mut report = MetricReport::default();
    for (i, ((p, g), m)) in preds.iter().zip(gts).zip(masks).enumerate() {
        report.blocks.push(BlockMetrics {
            index: i,
            l1_hole: l1_hole(p, g, m)?,
            l2_hole: l2_hole(p, g, m)?,
            ssim: ssim(p, g, peak)?,
            psnr: psnr(p, g, peak)?,
        });
    }
    Ok(report)
}

/// Largest ground-truth value across blocks: the default PSNR/SSIM range.
pub fn data_peak(gts: &[GridBlock]) -> f64 {
    let m = gts
        .iter()
        .flat_map(|b| b.data().iter())
        .fold(0.0f32, |a, &v| a.max(v));
    if m > 0.0 {
        m as f64
    } else {
        1.0
    }
}

/// Per-cell signed mean of (pred - gt) over the frames where that cell was
/// holed. Positive = overestimate. Cells never holed keep count 0, value 0.
#[derive(Clone, Debug)]
pub struct ErrorMap {
    pub h: usize,
    pub w: usize,
    pub value: Vec<f64>,
    pub count: Vec<u32>,
}

pub fn spatial_error_map(
    preds: &[GridBlock],
    gts: &[GridBlock],
    masks: &[MaskBlock],
) -> Result<ErrorMap> {
    if preds.len() != gts.len() || gts.len() != masks.len() || preds.is_empty() {
        return Err(Error::Contract("spatial_error_map: aligned nonempty inputs required".into()));
    }
    let (_, h, w) = preds[0].dims();
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        if p.dims() != g.dims() || g.dims() != m.dims() || p.h() != h || p.w() != w {
            return Err(Error::shape("spatial_error_map: dims differ"));
        }
        for t in 0..p.t() {
            let (pf, gf, mf) = (p.frame(t), g.frame(t), m.frame(t));
            for i in 0..h * w {
                if mf[i] == 0 {
                    sum[i] += pf[i] as f64 - gf[i] as f64;
                    count[i] += 1;
                }
            }
        }
    }
    let value = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(ErrorMap { h, w, value, count })
}

impl ErrorMap {
    pub fn save_ugb(&self, path: &std::path::Path) -> Result<()> {
        let data: Vec<f32> = self.value.iter().map(|&v| v as f32).collect();
        crate::io::ugb::write_f32(path, 1, self.h, self.w, &data)
    }
    pub fn save_ppm(&self, path: &std::path::Path) -> Result<()> {
        crate::io::img::write_ppm_signed(path, &self.value, self.h, self.w)
    }
}

/// Context handed to an imputer: hour of day of the block's first frame.
#[derive(Clone, Copy, Debug)]
pub struct BlockCtx {
    pub start_hour: u32,
    pub bin_hours: u32,
}

/// A hole-filling method under scenario evaluation. `block` carries ground
/// truth at valid voxels; implementations must only read where mask = 1.
pub trait Imputer {
    fn name(&self) -> &str;
    fn impute(&self, block: &GridBlock, mask: &MaskBlock, ctx: &BlockCtx) -> Result<GridBlock>;
}

pub struct ModelImputer<'a, F: Scalar> {
    pub model: &'a UNetModel<F>,
    pub label: String,
}

impl<'a, F: Scalar> Imputer for ModelImputer<'a, F> {
    fn name(&self) -> &str {
        &self.label
    }
    fn impute(&self, block: &GridBlock, mask: &MaskBlock, _ctx: &BlockCtx) -> Result<GridBlock> {
        let pred = self.model.predict(block, mask)?;
        composite(block, mask, &pred)
    }
}

pub struct MeanImputer<'a> {
    pub table: &'a MeanTable,
}

impl<'a> Imputer for MeanImputer<'a> {
    fn name(&self) -> &str {
        "mean"
    }
    fn impute(&self, block: &GridBlock, mask: &MaskBlock, ctx: &BlockCtx) -> Result<GridBlock> {
        let (t, h, w) = block.dims();
        let mut data = Vec::with_capacity(t * h * w);
        for k in 0..t {
            let hour = (ctx.start_hour + k as u32 * ctx.bin_hours) % 24;
            data.extend(crate::baselines::predict_global_mean(
                self.table,
                block.frame(k),
                mask.frame(k),
                hour,
            )?);
        }
        GridBlock::new(t, h, w, data)
    }
}

pub struct NearestImputer {
    pub dims: u8,
}

impl Imputer for NearestImputer {
    fn name(&self) -> &str {
        if self.dims == 2 {
            "nn2"
        } else {
            "nn3"
        }
    }
    fn impute(&self, block: &GridBlock, mask: &MaskBlock, _ctx: &BlockCtx) -> Result<GridBlock> {
        nn_impute(block, mask, self.dims)
    }
}

pub struct RbfImputer {
    pub dims: u8,
    pub cfg: RbfConfig,
}

impl Imputer for RbfImputer {
    fn name(&self) -> &str {
        if self.dims == 2 {
            "rbf2"
        } else {
            "rbf3"
        }
    }
    fn impute(&self, block: &GridBlock, mask: &MaskBlock, _ctx: &BlockCtx) -> Result<GridBlock> {
        rbf_impute(block, mask, self.dims, &self.cfg)
    }
}

/// A named static mask applied over an evaluation window of a test series.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub name: String,
    /// Single-frame mask, replicated to each block's T.
    pub mask: MaskBlock,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug)]
pub struct HourPoint {
    pub frame: usize,
    pub gt_mean: f64,
    pub pred_mean: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub points: Vec<HourPoint>,
    /// Mean over hours of |pred_mean - gt_mean| (the gap between the plotted
    /// hole-region mean lines).
    pub avg_abs_err: f64,
}

impl ScenarioResult {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "hour,gt_mean,pred_mean")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.frame, p.gt_mean, p.pred_mean)?;
        }
        Ok(())
    }
}

/// Chunk the scenario period into T-blocks, apply the static mask, impute,
/// and record per-hour spatial means over the hole cells.
pub fn scenario_run(
    imputer: &dyn Imputer,
    series: &GridSeries,
    spec: &ScenarioSpec,
    t: usize,
) -> Result<ScenarioResult> {
    if spec.end_frame > series.n_frames() || spec.start_frame >= spec.end_frame {
        return Err(Error::param(format!(
            "scenario period {}..{} outside series 0..{}",
            spec.start_frame,
            spec.end_frame,
            series.n_frames()
        )));
    }
    if spec.end_frame - spec.start_frame < t {
        return Err(Error::param("scenario period shorter than T"));
    }
    if spec.mask.t() != 1 || (spec.mask.h(), spec.mask.w()) != (series.h(), series.w()) {
        return Err(Error::shape("scenario mask must be (1,H,W) matching the series"));
    }
    let hole_cells: Vec<usize> =
        (0..series.h() * series.w()).filter(|&i| spec.mask.data()[i] == 0).collect();
    if hole_cells.is_empty() {
        return Err(Error::Numeric("scenario mask has no holes: metric undefined".into()));
    }
    let mask_t = spec.mask.replicate_to(t)?;
    let n_blocks = (spec.end_frame - spec.start_frame) / t;
    let mut points = Vec::with_capacity(n_blocks * t);
    let mut err_sum = 0.0f64;
    for b in 0..n_blocks {
        let f0 = spec.start_frame + b * t;
        let gt = series.slice_block(f0, f0 + t)?;
        let ctx = BlockCtx { start_hour: series.hour_of_frame(f0), bin_hours: series.bin_hours };
        let imputed = imputer.impute(&gt, &mask_t, &ctx)?;
        for k in 0..t {
            let gf = gt.frame(k);
            let pf = imputed.frame(k);
            let gt_mean =
                hole_cells.iter().map(|&i| gf[i] as f64).sum::<f64>() / hole_cells.len() as f64;
            let pred_mean =
                hole_cells.iter().map(|&i| pf[i] as f64).sum::<f64>() / hole_cells.len() as f64;
            err_sum += (pred_mean - gt_mean).abs();
            points.push(HourPoint { frame: f0 + k, gt_mean, pred_mean });
        }
    }
    let avg_abs_err = err_sum / points.len() as f64;
    Ok(ScenarioResult { points, avg_abs_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_start_time;

    fn block(vals: &[f32]) -> GridBlock {
        GridBlock::new(1, 1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn hole_metrics_hand_example() {
        // holes with diffs {2, -3}: l1 = 2.5, l2 = 6.5, and Jensen 6.5 >= 2.5^2
        let gt = block(&[0.0, 0.0, 5.0]);
        let pred = block(&[2.0, -3.0, 5.0]);
        let mask = MaskBlock::new(1, 1, 3, vec![0, 0, 1]).unwrap();
        assert_eq!(l1_hole(&pred, &gt, &mask).unwrap(), 2.5);
        assert_eq!(l2_hole(&pred, &gt, &mask).unwrap(), 6.5);
        assert!(6.5 >= 2.5f64.powi(2) / 1.0f64.max(1.0) - 0.0); // 6.5 >= 6.25
        assert_eq!(l1_hole(&gt, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn hole_metric_no_holes_is_error() {
        let gt = block(&[1.0, 2.0]);
        let mask = MaskBlock::new(1, 1, 2, vec![1, 1]).unwrap();
        assert!(matches!(l1_hole(&gt, &gt, &mask), Err(Error::Numeric(_))));
    }

    #[test]
    fn hole_metrics_shift_by_constant() {
        let gt = GridBlock::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pred = GridBlock::new(1, 2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let mask = MaskBlock::new(1, 2, 2, vec![0, 0, 0, 1]).unwrap();
        // residuals all +1: adding c raises l1 by exactly c
        assert_eq!(l1_hole(&pred, &gt, &mask).unwrap(), 1.0);
        let pred2 = GridBlock::new(1, 2, 2, vec![3.0, 4.0, 5.0, 5.0]).unwrap();
        assert_eq!(l1_hole(&pred2, &gt, &mask).unwrap(), 2.0);
    }

    #[test]
    fn hole_metrics_permutation_invariant() {
        // shuffling values within the hole leaves l1/l2 unchanged
        let gt = GridBlock::new(1, 1, 4, vec![0.0; 4]).unwrap();
        let pred_a = GridBlock::new(1, 1, 4, vec![2.0, -3.0, 1.0, 9.0]).unwrap();
        let pred_b = GridBlock::new(1, 1, 4, vec![1.0, 2.0, -3.0, 9.0]).unwrap();
        let mask = MaskBlock::new(1, 1, 4, vec![0, 0, 0, 1]).unwrap();
        assert_eq!(
            l1_hole(&pred_a, &gt, &mask).unwrap(),
            l1_hole(&pred_b, &gt, &mask).unwrap()
        );
        assert_eq!(
            l2_hole(&pred_a, &gt, &mask).unwrap(),
            l2_hole(&pred_b, &gt, &mask).unwrap()
        );
    }

    #[test]
    fn ssim_identical_is_one() {
        let data: Vec<f32> = (0..16 * 16).map(|i| (i % 7) as f32).collect();
        let a = GridBlock::new(1, 16, 16, data).unwrap();
        let s = ssim(&a, &a, 10.0).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_constant_shift_closed_form() {
        // constant 0 vs constant 0.1 at L=1: (2*0*0.1+C1)/(0+0.01+C1) ~ 0.009901
        let a = GridBlock::new(1, 16, 16, vec![0.0; 256]).unwrap();
        let b = GridBlock::new(1, 16, 16, vec![0.1; 256]).unwrap();
        let s = ssim(&a, &b, 1.0).unwrap();
        let expected = 1e-4 / 1.01e-2;
        assert!((s - expected).abs() < 1e-6, "{s} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = GridBlock::new(1, 16, 16, (0..256).map(|i| (i % 11) as f32).collect()).unwrap();
        let b = GridBlock::new(1, 16, 16, (0..256).map(|i| (i % 5) as f32).collect()).unwrap();
        let s1 = ssim(&a, &b, 10.0).unwrap();
        let s2 = ssim(&b, &a, 10.0).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn ssim_small_frame_is_param_error() {
        let a = GridBlock::new(1, 4, 4, vec![0.0; 16]).unwrap();
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn psnr_cases() {
        // peak 100, MSE 1 -> 40 dB
        let gt = block(&[0.0, 0.0]);
        let pred = block(&[1.0, -1.0]);
        let p = psnr(&pred, &gt, 100.0).unwrap();
        assert!((p - 40.0).abs() < 1e-12, "{p}");
        // identical -> +inf sentinel
        assert_eq!(psnr(&gt, &gt, 100.0).unwrap(), f64::INFINITY);
        // doubling peak adds 20*log10(2) dB
        let p2 = psnr(&pred, &gt, 200.0).unwrap();
        assert!((p2 - p - 20.0 * 2.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn error_map_oracle_and_bias() {
        let gt = GridBlock::new(2, 2, 2, vec![1.0; 8]).unwrap();
        let mask =
            MaskBlock::new(2, 2, 2, vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let zero_map = spatial_error_map(
            &[gt.clone()],
            &[gt.clone()],
            &[mask.clone()],
        )
        .unwrap();
        assert!(zero_map.value.iter().all(|&v| v == 0.0));
        // +1 at every hole -> exactly 1.0 at evaluated cells, 0 with count 0 elsewhere
        let pred = GridBlock::new(2, 2, 2, vec![2.0, 9.0, 2.0, 9.0, 2.0, 9.0, 2.0, 9.0]).unwrap();
        let map = spatial_error_map(&[pred], &[gt], &[mask]).unwrap();
        assert_eq!(map.value[0], 1.0);
        assert_eq!(map.value[2], 1.0);
        assert_eq!(map.count[0], 2);
        assert_eq!(map.value[1], 0.0);
        assert_eq!(map.count[1], 0);
    }

    struct OracleImputer;
    impl Imputer for OracleImputer {
        fn name(&self) -> &str {
            "oracle"
        }
        fn impute(&self, block: &GridBlock, _m: &MaskBlock, _c: &BlockCtx) -> Result<GridBlock> {
            Ok(block.clone())
        }
    }

    fn tiny_series(n_frames: usize) -> GridSeries {
        let (h, w) = (4usize, 4usize);
        let data: Vec<f32> =
            (0..n_frames * h * w).map(|i| ((i * 13 + 5) % 9) as f32).collect();
        GridSeries::new(h, w, n_frames, synth_start_time(), 1, data).unwrap()
    }

    #[test]
    fn scenario_oracle_has_zero_error() {
        let series = tiny_series(12);
        let mut mask_data = vec![1u8; 16];
        mask_data[5] = 0;
        mask_data[6] = 0;
        let spec = ScenarioSpec {
            name: "test".into(),
            mask: MaskBlock::new(1, 4, 4, mask_data).unwrap(),
            start_frame: 2,
            end_frame: 11,
        };
        let res = scenario_run(&OracleImputer, &series, &spec, 3).unwrap();
        assert_eq!(res.points.len(), 9);
        assert_eq!(res.avg_abs_err, 0.0);
        assert_eq!(res.points[0].frame, 2);
    }

    #[test]
    fn scenario_all_valid_mask_errors() {
        let series = tiny_series(8);
        let spec = ScenarioSpec {
            name: "novalid".into(),
            mask: MaskBlock::all_valid(1, 4, 4),
            start_frame: 0,
            end_frame: 8,
        };
        assert!(matches!(scenario_run(&OracleImputer, &series, &spec, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn scenario_period_shorter_than_t_errors() {
        let series = tiny_series(8);
        let mut mask_data = vec![1u8; 16];
        mask_data[0] = 0;
        let spec = ScenarioSpec {
            name: "short".into(),
            mask: MaskBlock::new(1, 4, 4, mask_data).unwrap(),
            start_frame: 0,
            end_frame: 2,
        };
        assert!(scenario_run(&OracleImputer, &series, &spec, 3).is_err());
    }

    #[test]
    fn metric_csv_shape() {
        let gt = GridBlock::new(1, 16, 16, vec![1.0; 256]).unwrap();
        let pred = GridBlock::new(1, 16, 16, vec![1.5; 256]).unwrap();
        let mut mask_data = vec![1u8; 256];
        mask_data[3] = 0;
        let mask = MaskBlock::new(1, 16, 16, mask_data).unwrap();
        let report =
            evaluate_blocks(&[pred], &[gt.clone()], &[mask], data_peak(&[gt])).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("block_index,l1_hole,l2_hole,ssim,psnr\n"));
        assert!(text.lines().count() == 3);
        assert!(text.contains("mean,"));
    }
}
