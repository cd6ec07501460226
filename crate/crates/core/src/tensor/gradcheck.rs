//! Finite-difference gradient verification (f64, central differences).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, VarId};
use super::Tensor;

const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, coordinate, relative error) above tolerance.
    pub offenders: Vec<(usize, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }
}

/// Compare the tape's gradients of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the function on the given graph from leaves in the
/// order of `inputs` and return the scalar output node.
pub fn gradient_check<B>(
    name: &str,
    build: B,
    inputs: &[Tensor<f64>],
    rel_tol: f64,
) -> GradCheckReport
where
    B: Fn(&mut Graph<f64>, &[VarId]) -> VarId,
{
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        assert_eq!(g.value(out).numel(), 1, "gradient_check requires a scalar output");
        let val = g.value(out).item();
        let grads = g.backward(out).expect("backward failed");
        let gs = ids.iter().map(|&id| grads.get(id).cloned()).collect();
        (val, gs)
    };
    let (_, analytic) = eval(inputs);

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        offenders: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let a = match &analytic[ii] {
            Some(a) => a.clone(),
            None => continue,
        };
        for coord in 0..input.numel() {
            let orig = input.data()[coord];
            work[ii].data_mut()[coord] = orig + FD_STEP;
            let (fp, _) = eval(&work);
            work[ii].data_mut()[coord] = orig - FD_STEP;
            let (fm, _) = eval(&work);
            work[ii].data_mut()[coord] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let ana = a.data()[coord];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > rel_tol {
                report.offenders.push((ii, coord, rel));
            }
        }
    }
    report
}

fn rng_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, scale, rng)
}

/// Shift values away from zero so finite differences never straddle an
/// activation or |.| kink.
fn away_from_kinks(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

/// The fixed check suite behind the `gradcheck` CLI subcommand: one report per
/// differentiable building block at rel_tol 1e-4 (1e-10 for the exactly linear
/// case).
pub fn run_standard_suite() -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9d5c);

    // linear: sum(w .* x) — analytic gradient is exactly the other factor
    let x = rng_tensor(&[2, 1, 1, 3, 3], 1.0, &mut rng);
    let w = rng_tensor(&[2, 1, 1, 3, 3], 1.0, &mut rng);
    reports.push(gradient_check(
        "linear_sum_wx",
        |g, ids| {
            let p = g.mul(ids[0], ids[1]).unwrap();
            g.sum(p)
        },
        &[x, w],
        1e-10,
    ));

    // conv3d + mean
    let x = rng_tensor(&[2, 2, 3, 5, 5], 1.0, &mut rng);
    let w = rng_tensor(&[3, 2, 2, 3, 3], 0.7, &mut rng);
    let b = rng_tensor(&[3], 0.5, &mut rng);
    reports.push(gradient_check(
        "conv3d_mean",
        |g, ids| {
            let y = g.conv3d(ids[0], ids[1], Some(ids[2]), [1, 2, 2], [1, 1, 1]).unwrap();
            g.mean(y)
        },
        &[x, w, b],
        1e-4,
    ));

    // partial_conv3d: weights, bias, input under a ragged mask
    let x = rng_tensor(&[1, 2, 3, 5, 5], 1.0, &mut rng);
    let w = rng_tensor(&[2, 2, 2, 3, 3], 0.7, &mut rng);
    let b = rng_tensor(&[2], 0.5, &mut rng);
    let mut mask = Tensor::<f64>::zeros(&[1, 2, 3, 5, 5]);
    {
        use rand::Rng;
        for v in mask.data_mut() {
            *v = if rng.gen_bool(0.6) { 1.0 } else { 0.0 };
        }
        // keep at least one valid voxel
        mask.data_mut()[0] = 1.0;
    }
    let gmask = super::graph::GroupedMask::from_full(&mask).unwrap();
    reports.push(gradient_check(
        "partial_conv3d_mean",
        |g, ids| {
            let (y, _) =
                g.partial_conv3d(ids[0], &gmask, ids[1], ids[2], [1, 1, 1], [0, 1, 1]).unwrap();
            g.mean(y)
        },
        &[x, w, b],
        1e-4,
    ));

    // batch norm (train mode)
    let x = rng_tensor(&[3, 2, 2, 4, 4], 1.5, &mut rng);
    let gamma = rng_tensor(&[2], 1.0, &mut rng);
    let beta = rng_tensor(&[2], 1.0, &mut rng);
    reports.push(gradient_check(
        "batch_norm_train",
        |g, ids| {
            let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], 1e-5, None).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.mean(sq)
        },
        &[x, gamma, beta],
        1e-4,
    ));

    // three-layer toy net with leaky relu
    let mut x = rng_tensor(&[1, 1, 2, 6, 6], 1.0, &mut rng);
    away_from_kinks(&mut x, 0.05);
    let w1 = rng_tensor(&[2, 1, 1, 3, 3], 0.8, &mut rng);
    let b1 = rng_tensor(&[2], 0.3, &mut rng);
    let w2 = rng_tensor(&[2, 2, 2, 3, 3], 0.8, &mut rng);
    let b2 = rng_tensor(&[2], 0.3, &mut rng);
    let w3 = rng_tensor(&[1, 2, 1, 1, 1], 0.8, &mut rng);
    reports.push(gradient_check(
        "toy_net_leaky",
        |g, ids| {
            let h1 = g.conv3d(ids[0], ids[1], Some(ids[2]), [1, 1, 1], [0, 1, 1]).unwrap();
            let a1 = g.leaky_relu(h1, 0.2);
            let h2 = g.conv3d(a1, ids[3], Some(ids[4]), [1, 2, 2], [1, 1, 1]).unwrap();
            let a2 = g.leaky_relu(h2, 0.2);
            let h3 = g.conv3d(a2, ids[5], None, [1, 1, 1], [0, 0, 0]).unwrap();
            g.mean(h3)
        },
        &[x, w1, b1, w2, b2, w3],
        1e-4,
    ));

    // hole/valid separated L1 loss
    let mut pred = rng_tensor(&[1, 1, 2, 4, 4], 1.0, &mut rng);
    let target = rng_tensor(&[1, 1, 2, 4, 4], 1.0, &mut rng);
    // keep |pred - target| away from the kink
    for (p, t) in pred.data_mut().iter_mut().zip(target.data()) {
        if (*p - t).abs() < 0.05 {
            *p = t + 0.1;
        }
    }
    let mut maskt = Tensor::<f64>::zeros(&[1, 1, 2, 4, 4]);
    for (i, v) in maskt.data_mut().iter_mut().enumerate() {
        *v = if i % 3 == 0 { 0.0 } else { 1.0 };
    }
    let hole_w = maskt.map(|m| 1.0 - m);
    let n_hole = hole_w.data().iter().sum::<f64>();
    let n_valid = maskt.data().iter().sum::<f64>();
    let lambda = 12.0;
    let maskt2 = maskt.clone();
    let target2 = target.clone();
    reports.push(gradient_check(
        "loss_hole_valid",
        move |g, ids| {
            let hole = g.masked_l1(ids[0], &target2, &hole_w, 1.0 / n_hole).unwrap();
            let valid = g.masked_l1(ids[0], &target2, &maskt2, 1.0 / n_valid).unwrap();
            g.add_scaled(valid, hole, lambda).unwrap()
        },
        &[pred],
        1e-4,
    ));

    let _ = maskt;
    let _ = target;
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_suite_passes() {
        for report in run_standard_suite() {
            assert!(
                report.passed(),
                "{} failed: max rel err {:.3e}, offenders {:?}",
                report.name,
                report.max_rel_err,
                &report.offenders[..report.offenders.len().min(5)]
            );
        }
    }

    #[test]
    fn upsample_and_concat_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = rng_tensor(&[1, 1, 1, 2, 2], 1.0, &mut rng);
        let b = rng_tensor(&[1, 2, 2, 4, 4], 1.0, &mut rng);
        let report = gradient_check(
            "upsample_concat",
            |g, ids| {
                let up = g.upsample_nearest_to(ids[0], [2, 4, 4]).unwrap();
                let cat = g.concat_channels(up, ids[1]).unwrap();
                let sq = g.mul(cat, cat).unwrap();
                g.mean(sq)
            },
            &[a, b],
            1e-4,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn randomized_small_shapes_many_seeds() {
        // property: every differentiable op passes at 1e-4 across >= 20 seeds.
        // Draws whose pre-activations sit within the finite-difference step of
        // the leaky-relu kink are resampled (the check contract requires
        // inputs perturbed away from kinks).
        let mut checked = 0u32;
        let mut seed = 0u64;
        while checked < 20 {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = rng_tensor(&[1, 1, 2, 4, 4], 1.0, &mut rng);
            let w = rng_tensor(&[2, 1, 2, 3, 3], 0.7, &mut rng);
            let pre = {
                let mut g = Graph::<f64>::new();
                let xi = g.leaf(x.clone(), false);
                let wi = g.leaf(w.clone(), false);
                let y = g.conv3d(xi, wi, None, [1, 1, 1], [1, 1, 1]).unwrap();
                g.value(y).clone()
            };
            if pre.data().iter().any(|v| v.abs() < 0.02) {
                continue;
            }
            let report = gradient_check(
                "conv_leaky_mean_seeded",
                |g, ids| {
                    let y = g.conv3d(ids[0], ids[1], None, [1, 1, 1], [1, 1, 1]).unwrap();
                    let a = g.leaky_relu(y, 0.2);
                    g.mean(a)
                },
                &[x, w],
                1e-4,
            );
            assert!(report.passed(), "seed {} max rel err {}", seed, report.max_rel_err);
            checked += 1;
        }
    }
}
