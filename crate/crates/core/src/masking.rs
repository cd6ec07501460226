//! Hole-mask generation: random-walk masks, biased masks seeded inside
//! blurred high-percentile regions, and static scenario masks.
//!
//! Masks are binary T x H x W blocks, 1 = valid, 0 = hole.

use std::path::Path;

use rand::Rng;

use crate::data::GridBlock;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBlock {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl MaskBlock {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape("mask dims must be >= 1"));
        }
        if data.len() != t * h * w {
            return Err(Error::shape(format!(
                "mask data length {} != {}x{}x{}",
                data.len(),
                t,
                h,
                w
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::format(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(MaskBlock { t, h, w, data })
    }

    pub fn all_valid(t: usize, h: usize, w: usize) -> Self {
        MaskBlock { t, h, w, data: vec![1; t * h * w] }
    }

    pub fn t(&self) -> usize {
        self.t
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn frame(&self, k: usize) -> &[u8] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }
    pub fn get(&self, t: usize, r: usize, c: usize) -> u8 {
        self.data[(t * self.h + r) * self.w + c]
    }
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
    pub fn hole_count(&self) -> usize {
        self.data.len() - self.valid_count()
    }
    /// Holes / valid cells, the annotation of the scenario-mask figures.
    pub fn hole_ratio(&self) -> f64 {
        let holes = self.hole_count();
        let valid = self.data.len() - holes;
        if valid == 0 {
            f64::INFINITY
        } else {
            holes as f64 / valid as f64
        }
    }
    /// Replicate a single-frame mask across `t` frames.
    pub fn replicate_to(&self, t: usize) -> Result<MaskBlock> {
        if self.t != 1 {
            return Err(Error::shape("replicate_to requires a single-frame mask"));
        }
        let mut data = Vec::with_capacity(t * self.h * self.w);
        for _ in 0..t {
            data.extend_from_slice(&self.data);
        }
        MaskBlock::new(t, self.h, self.w, data)
    }
}

/// Mask-generation hyperparameters. The paper leaves walk length, brush size
/// and thresholds open; these defaults are the artifact's calibrated choices.
#[derive(Clone, Debug)]
pub struct MaskGenConfig {
    pub walk_steps: usize,
    pub brush_radius: usize,
    pub blur_sigma: f64,
    pub threshold_percentile: f64,
    pub per_frame_independent: bool,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        MaskGenConfig {
            walk_steps: 300,
            brush_radius: 1,
            blur_sigma: 2.0,
            threshold_percentile: 90.0,
            per_frame_independent: true,
        }
    }
}

impl MaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma <= 0.0 {
            return Err(Error::param("blur_sigma must be > 0"));
        }
        if !(0.0 < self.threshold_percentile && self.threshold_percentile < 100.0) {
            return Err(Error::param("threshold_percentile must lie in (0, 100)"));
        }
        Ok(())
    }
}

fn reflect(idx: isize, n: usize) -> usize {
    // mirror with edge inclusion, folded until in range
    let n = n as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable discrete Gaussian: kernel half-width ceil(3 sigma), weights
/// normalized to sum 1, reflect padding at the borders.
pub fn gaussian_blur(frame: &[f32], h: usize, w: usize, sigma: f64) -> Result<Vec<f32>> {
    if sigma <= 0.0 {
        return Err(Error::param("blur sigma must be > 0"));
    }
    assert_eq!(frame.len(), h * w);
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for d in -half..=half {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();

    // horizontal pass
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = reflect(c as isize + ki as isize - half, w);
                acc += kv * frame[r * w + cc] as f64;
            }
            tmp[r * w + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + ki as isize - half, h);
                acc += kv * tmp[rr * w + c];
            }
            out[r * w + c] = acc as f32;
        }
    }
    Ok(out)
}

/// Connected components (8-connectivity) of cells at or above the given
/// percentile of the frame values (linear-interpolated order statistic).
/// An all-zero frame has no populous region to seed from: `None` signals the
/// caller to fall back to random masking.
pub fn threshold_regions(
    frame: &[f32],
    h: usize,
    w: usize,
    percentile: f64,
) -> Result<Option<Vec<Vec<usize>>>> {
    assert_eq!(frame.len(), h * w);
    if frame.is_empty() {
        return Err(Error::param("threshold_regions: empty frame"));
    }
    if !frame.iter().any(|&v| v > 0.0) {
        return Ok(None);
    }
    let mut sorted: Vec<f32> = frame.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let tau = if lo + 1 < sorted.len() {
        sorted[lo] as f64 * (1.0 - frac) + sorted[lo + 1] as f64 * frac
    } else {
        sorted[lo] as f64
    };
    let candidate: Vec<bool> = frame.iter().map(|&v| v as f64 >= tau).collect();
    // BFS in row-major discovery order keeps component order deterministic
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if !candidate[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = std::collections::VecDeque::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let (r, c) = (idx / w, idx % w);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if candidate[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        queue.push_back(nidx);
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    Ok(Some(components))
}

/// Pick a component index with probability proportional to its cell count.
pub fn pick_component(components: &[Vec<usize>], rng: &mut impl Rng) -> usize {
    debug_assert!(!components.is_empty());
    let total: usize = components.iter().map(|c| c.len()).sum();
    let mut draw = rng.gen_range(0..total);
    for (i, comp) in components.iter().enumerate() {
        if draw < comp.len() {
            return i;
        }
        draw -= comp.len();
    }
    components.len() - 1
}

/// Paint the hole set of one random walk: a square brush stamps at the start
/// and after every 4-connected step; moves off-grid are clamped to the border.
/// Returns a boolean grid, true = hole.
pub fn random_walk_mask(
    h: usize,
    w: usize,
    start: (usize, usize),
    cfg: &MaskGenConfig,
    rng: &mut impl Rng,
) -> Vec<bool> {
    assert!(start.0 < h && start.1 < w, "walk start outside grid");
    let mut hole = vec![false; h * w];
    let r = cfg.brush_radius as isize;
    let paint = |row: isize, col: isize, hole: &mut Vec<bool>| {
        for pr in (row - r).max(0)..=(row + r).min(h as isize - 1) {
            for pc in (col - r).max(0)..=(col + r).min(w as isize - 1) {
                hole[pr as usize * w + pc as usize] = true;
            }
        }
    };
    let (mut row, mut col) = (start.0 as isize, start.1 as isize);
    paint(row, col, &mut hole);
    for _ in 0..cfg.walk_steps {
        match rng.gen_range(0..4u8) {
            0 => row -= 1,
            1 => row += 1,
            2 => col -= 1,
            _ => col += 1,
        }
        row = row.clamp(0, h as isize - 1);
        col = col.clamp(0, w as isize - 1);
        paint(row, col, &mut hole);
    }
    hole
}

fn frame_from_holes(h: usize, w: usize, holes: &[bool]) -> Vec<u8> {
    let mut frame: Vec<u8> = holes.iter().map(|&x| if x { 0 } else { 1 }).collect();
    // generator contract: at least one valid cell per frame
    if frame.iter().all(|&v| v == 0) {
        frame[0] = 1;
    }
    let _ = (h, w);
    frame
}

/// Random masking: uniform start cell, then a random walk. With
/// `per_frame_independent` each frame gets its own start and walk; otherwise a
/// single 2D mask is replicated across T.
pub fn random_mask_block(
    t: usize,
    h: usize,
    w: usize,
    cfg: &MaskGenConfig,
    rng: &mut impl Rng,
) -> MaskBlock {
    let frames = if cfg.per_frame_independent { t } else { 1 };
    let mut data = Vec::with_capacity(t * h * w);
    for _ in 0..frames {
        let start = (rng.gen_range(0..h), rng.gen_range(0..w));
        let holes = random_walk_mask(h, w, start, cfg, rng);
        data.extend_from_slice(&frame_from_holes(h, w, &holes));
    }
    if !cfg.per_frame_independent {
        let frame = data.clone();
        for _ in 1..t {
            data.extend_from_slice(&frame);
        }
    }
    MaskBlock::new(t, h, w, data).expect("generated mask is binary")
}

/// Start cell for biased masking: blur, threshold at the percentile, choose a
/// component area-proportionally, then a uniform cell inside it. `None` means
/// the frame is all-zero and the caller must fall back to a uniform start.
pub fn biased_start(
    frame: &[f32],
    h: usize,
    w: usize,
    cfg: &MaskGenConfig,
    rng: &mut impl Rng,
) -> Result<Option<(usize, usize)>> {
    let blurred = gaussian_blur(frame, h, w, cfg.blur_sigma)?;
    let components = match threshold_regions(&blurred, h, w, cfg.threshold_percentile)? {
        None => return Ok(None),
        Some(c) => c,
    };
    let comp = &components[pick_component(&components, rng)];
    let idx = comp[rng.gen_range(0..comp.len())];
    Ok(Some((idx / w, idx % w)))
}

/// Biased masking over a data block: per frame, seed the walk inside the
/// blurred high-percentile region of that frame; all-zero frames degrade to
/// the random-masking start distribution.
pub fn biased_mask_block(
    block: &GridBlock,
    cfg: &MaskGenConfig,
    rng: &mut impl Rng,
) -> Result<MaskBlock> {
    cfg.validate()?;
    let (t, h, w) = block.dims();
    let frames = if cfg.per_frame_independent { t } else { 1 };
    let mut data = Vec::with_capacity(t * h * w);
    for k in 0..frames {
        let start = match biased_start(block.frame(k), h, w, cfg, rng)? {
            Some(s) => s,
            None => (rng.gen_range(0..h), rng.gen_range(0..w)),
        };
        let holes = random_walk_mask(h, w, start, cfg, rng);
        data.extend_from_slice(&frame_from_holes(h, w, &holes));
    }
    if !cfg.per_frame_independent {
        let frame = data.clone();
        for _ in 1..t {
            data.extend_from_slice(&frame);
        }
    }
    MaskBlock::new(t, h, w, data)
}

/// Load a static scenario mask (UGB u8, dims (1,H,W)), replicate it to `t`
/// frames, and report its hole ratio.
pub fn load_scenario_mask(path: &Path, t: usize) -> Result<(MaskBlock, f64)> {
    let mask = crate::io::ugb::read_mask_block(path)?;
    if mask.t() != 1 {
        return Err(Error::format(format!(
            "{}: scenario mask must have dims (1,H,W), got T={}",
            path.display(),
            mask.t()
        )));
    }
    let ratio = mask.hole_ratio();
    Ok((mask.replicate_to(t)?, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blur_preserves_constant() {
        let frame = vec![3.25f32; 8 * 8];
        let out = gaussian_blur(&frame, 8, 8, 2.0).unwrap();
        for v in out {
            assert!((v - 3.25).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_interior_impulse_mass() {
        let mut frame = vec![0.0f32; 32 * 32];
        frame[16 * 32 + 16] = 5.0;
        let out = gaussian_blur(&frame, 32, 32, 1.0).unwrap();
        let total: f64 = out.iter().map(|&v| v as f64).sum();
        assert!((total - 5.0).abs() < 1e-5, "total {total}");
    }

    #[test]
    fn blur_center_weight_matches_normalized_kernel() {
        // oracle: evaluate exp(-(dx^2+dy^2)/2s^2) on the offset grid, normalize
        let sigma = 1.0f64;
        let half = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for dy in -half..=half {
            for dx in -half..=half {
                weights.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let norm: f64 = weights.iter().sum();
        let center_weight = weights[(half * (2 * half + 1) + half) as usize] / norm;

        let n = 16usize;
        let mut frame = vec![0.0f32; n * n];
        frame[(n / 2) * n + n / 2] = 1.0;
        let out = gaussian_blur(&frame, n, n, sigma).unwrap();
        let got = out[(n / 2) * n + n / 2] as f64;
        assert!((got - center_weight).abs() < 1e-6, "{got} vs {center_weight}");
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        assert!(gaussian_blur(&[1.0; 4], 2, 2, 0.0).is_err());
    }

    #[test]
    fn threshold_constant_frame_is_one_component() {
        let frame = vec![2.0f32; 6 * 7];
        let comps = threshold_regions(&frame, 6, 7, 90.0).unwrap().unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 42);
    }

    #[test]
    fn threshold_two_blobs() {
        // 16x16 frame: a 2x5 blob (10 cells) and a 5x6 blob (30 cells), far apart
        let (h, w) = (16usize, 16usize);
        let mut frame = vec![0.0f32; h * w];
        for r in 0..2 {
            for c in 0..5 {
                frame[r * w + c] = 9.0;
            }
        }
        for r in 10..15 {
            for c in 9..15 {
                frame[r * w + c] = 7.0;
            }
        }
        let comps = threshold_regions(&frame, h, w, 90.0).unwrap().unwrap();
        let mut sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![10, 30]);
    }

    #[test]
    fn threshold_all_zero_signals_fallback() {
        let frame = vec![0.0f32; 16];
        assert!(threshold_regions(&frame, 4, 4, 90.0).unwrap().is_none());
    }

    #[test]
    fn walk_zero_steps_paints_one_brush() {
        let cfg = MaskGenConfig { walk_steps: 0, brush_radius: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let holes = random_walk_mask(8, 8, (4, 4), &cfg, &mut rng);
        let count = holes.iter().filter(|&&x| x).count();
        assert_eq!(count, 9);
        for r in 3..=5 {
            for c in 3..=5 {
                assert!(holes[r * 8 + c]);
            }
        }
    }

    #[test]
    fn walk_hole_size_nondecreasing_in_steps() {
        for seed in 0..10u64 {
            let mut sizes = Vec::new();
            for steps in [0usize, 50, 150, 300] {
                let cfg = MaskGenConfig { walk_steps: steps, ..Default::default() };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let holes = random_walk_mask(16, 16, (8, 8), &cfg, &mut rng);
                sizes.push(holes.iter().filter(|&&x| x).count());
            }
            assert!(sizes.windows(2).all(|p| p[0] <= p[1]), "sizes {sizes:?}");
        }
    }

    #[test]
    fn walk_is_deterministic_given_seed() {
        let cfg = MaskGenConfig::default();
        let a = random_walk_mask(16, 16, (3, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = random_walk_mask(16, 16, (3, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn random_block_per_frame_vs_replicated() {
        let cfg = MaskGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let independent = random_mask_block(3, 16, 16, &cfg, &mut rng);
        assert!(
            independent.frame(0) != independent.frame(1)
                || independent.frame(1) != independent.frame(2),
            "independent frames should differ almost surely"
        );
        let cfg_rep = MaskGenConfig { per_frame_independent: false, ..Default::default() };
        let rep = random_mask_block(3, 16, 16, &cfg_rep, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(rep.frame(0), rep.frame(1));
        assert_eq!(rep.frame(1), rep.frame(2));
    }

    #[test]
    fn mask_counts_are_complementary() {
        let cfg = MaskGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask_block(2, 12, 12, &cfg, &mut rng);
        assert!(m.data().iter().all(|&v| v <= 1));
        assert_eq!(m.valid_count() + m.hole_count(), 2 * 12 * 12);
        for k in 0..2 {
            assert!(m.frame(k).iter().any(|&v| v == 1), "frame {k} has no valid cell");
        }
    }

    #[test]
    fn default_hole_fraction_matches_calibration() {
        // Monte Carlo calibration constant, frozen from a 10,000-sample run of
        // the default config on 64x64 (see test below via a smaller re-estimate)
        let cfg = MaskGenConfig::default();
        let samples = 2_000usize;
        let mut total_holes = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA11);
        for _ in 0..samples {
            let m = random_mask_block(1, 64, 64, &cfg, &mut rng);
            total_holes += m.hole_count();
        }
        let frac = total_holes as f64 / (samples * 64 * 64) as f64;
        // frozen constant: 0.05329 mean hole fraction (10k samples, seed 0xCA11)
        assert!(
            (frac - CALIBRATED_HOLE_FRACTION).abs() < 0.004,
            "hole fraction {frac} drifted from {CALIBRATED_HOLE_FRACTION}"
        );
    }

    #[test]
    fn biased_start_lands_in_hotspot_blob() {
        // single hotspot at (10,10), rest zero: every seeded start must lie in
        // the thresholded blob around it
        let (h, w) = (32usize, 32usize);
        let mut frame = vec![0.0f32; h * w];
        for r in 8..13 {
            for c in 8..13 {
                frame[r * w + c] = 10.0;
            }
        }
        let cfg = MaskGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (r, c) = biased_start(&frame, h, w, &cfg, &mut rng).unwrap().unwrap();
            let dr = r as f64 - 10.0;
            let dc = c as f64 - 10.0;
            assert!(
                dr.abs() <= 8.0 && dc.abs() <= 8.0,
                "start ({r},{c}) far from hotspot"
            );
            // membership check against the candidate set itself
            let blurred = gaussian_blur(&frame, h, w, cfg.blur_sigma).unwrap();
            let comps = threshold_regions(&blurred, h, w, cfg.threshold_percentile)
                .unwrap()
                .unwrap();
            assert!(comps.iter().any(|comp| comp.contains(&(r * w + c))));
            break; // full membership check once; the loop above checks locality
        }
        // locality for the remaining draws without the expensive recheck
        for _ in 0..999 {
            let (r, c) = biased_start(&frame, h, w, &cfg, &mut rng).unwrap().unwrap();
            assert!((r as isize - 10).abs() <= 8 && (c as isize - 10).abs() <= 8);
        }
    }

    #[test]
    fn component_selection_is_area_proportional() {
        // components of size 10 and 30 -> expect 0.25/0.75 within 3 sigma
        let comps = vec![(0..10).collect::<Vec<_>>(), (100..130).collect::<Vec<_>>()];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000usize;
        let mut first = 0usize;
        for _ in 0..n {
            if pick_component(&comps, &mut rng) == 0 {
                first += 1;
            }
        }
        let p = first as f64 / n as f64;
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((p - 0.25).abs() <= 3.0 * sigma, "p {p}, sigma {sigma}");
    }

    #[test]
    fn biased_on_constant_frame_matches_uniform_start_distribution() {
        // constant frame -> candidate set is the whole grid -> the start-cell
        // distribution equals random masking's uniform draw
        let (h, w) = (8usize, 8usize);
        let block = GridBlock::new(1, h, w, vec![4.0; h * w]).unwrap();
        let cfg = MaskGenConfig::default();
        let mut counts = vec![0usize; h * w];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 64_000usize;
        for _ in 0..n {
            let (r, c) = biased_start(block.frame(0), h, w, &cfg, &mut rng).unwrap().unwrap();
            counts[r * w + c] += 1;
        }
        let expect = n as f64 / (h * w) as f64;
        let sigma = (n as f64 * (1.0 / 64.0) * (63.0 / 64.0)).sqrt();
        for (i, &cnt) in counts.iter().enumerate() {
            assert!(
                (cnt as f64 - expect).abs() <= 5.0 * sigma,
                "cell {i}: {cnt} vs {expect}"
            );
        }
    }

    #[test]
    fn biased_block_deterministic_and_binary() {
        let mut frame = vec![0.0f32; 24 * 24];
        for r in 10..14 {
            for c in 10..14 {
                frame[r * 24 + c] = 8.0;
            }
        }
        let mut data = frame.clone();
        data.extend_from_slice(&frame);
        let block = GridBlock::new(2, 24, 24, data).unwrap();
        let cfg = MaskGenConfig::default();
        let a = biased_mask_block(&block, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = biased_mask_block(&block, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (2, 24, 24));
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(MaskBlock::new(1, 2, 2, vec![0, 1, 2, 1]).is_err());
    }

    #[test]
    fn scenario_mask_ratio() {
        use tempfile::tempdir;
        let dir = tempdir().unwrap();
        let path = dir.path().join("scn.ugb");
        let mut data = vec![1u8; 64 * 64];
        for i in 0..41 {
            data[i] = 0;
        }
        crate::io::ugb::write_u8(&path, 1, 64, 64, &data).unwrap();
        let (mask, ratio) = load_scenario_mask(&path, 3).unwrap();
        assert_eq!(mask.dims(), (3, 64, 64));
        assert!((ratio - 41.0 / (4096.0 - 41.0)).abs() < 1e-12);

        let all_valid = vec![1u8; 16];
        let p2 = dir.path().join("v.ugb");
        crate::io::ugb::write_u8(&p2, 1, 4, 4, &all_valid).unwrap();
        let (_, r2) = load_scenario_mask(&p2, 1).unwrap();
        assert_eq!(r2, 0.0);

        let bad = vec![0u8, 1, 2, 1];
        let p3 = dir.path().join("bad.ugb");
        crate::io::ugb::write_u8(&p3, 1, 2, 2, &bad).unwrap();
        assert!(load_scenario_mask(&p3, 1).is_err());
    }

    #[test]
    fn biased_start_always_in_candidate_set() {
        // any frame with a nonzero cell: the start must lie in the >= tau set
        // of its blurred version
        let cfg = MaskGenConfig::default();
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let (h, w) = (24usize, 24usize);
            let mut frame = vec![0.0f32; h * w];
            for _ in 0..rng.gen_range(1..6) {
                let r = rng.gen_range(0..h);
                let c = rng.gen_range(0..w);
                frame[r * w + c] = rng.gen_range(0.5..20.0);
            }
            let blurred = gaussian_blur(&frame, h, w, cfg.blur_sigma).unwrap();
            let comps = threshold_regions(&blurred, h, w, cfg.threshold_percentile)
                .unwrap()
                .unwrap();
            let (r, c) = biased_start(&frame, h, w, &cfg, &mut rng).unwrap().unwrap();
            assert!(
                comps.iter().any(|comp| comp.contains(&(r * w + c))),
                "seed {seed}: start ({r},{c}) outside candidate set"
            );
        }
    }

    /// Frozen Monte Carlo calibration: mean hole fraction of the default
    /// config on a 64x64 frame. Derived once from 10,000 samples.
    const CALIBRATED_HOLE_FRACTION: f64 = 0.05329;
}

#[cfg(test)]
mod calibration {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Source of the frozen CALIBRATED_HOLE_FRACTION constant; run with
    /// --ignored to re-derive after changing mask defaults.
    #[test]
    #[ignore]
    fn estimate_default_hole_fraction() {
        let cfg = MaskGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA11);
        let samples = 10_000usize;
        let mut total = 0usize;
        for _ in 0..samples {
            let m = random_mask_block(1, 64, 64, &cfg, &mut rng);
            total += m.hole_count();
        }
        println!("hole fraction = {}", total as f64 / (samples * 64 * 64) as f64);
    }
}
