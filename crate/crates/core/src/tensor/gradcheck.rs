//! Finite-difference gradient checking.
//!
//! The harness rebuilds the graph from scratch for every probe, perturbs one
//! input element at a time by `step`, and compares the central difference
//! `(f(x+h) - f(x-h)) / 2h` against the gradient produced by the reverse
//! sweep. The relative error uses a floor in the denominator so that
//! near-zero gradients are compared absolutely.
//!
//! Most checks weight the operation's output with a fixed random mask before
//! summing to a scalar; a uniform cotangent would let index-permutation bugs
//! in a backward rule slip through.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Tape, TensorError, TensorId};

/// Central-difference step used by the operation suite.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// Acceptance tolerance for a single operation's gradient.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Acceptance tolerance for an end-to-end model gradient.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Result of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub name: String,
    /// Worst relative error over every probed input element.
    pub max_rel_err: f64,
    /// Number of input elements probed.
    pub checked: usize,
}

/// Relative error with an absolute floor for tiny denominators.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar-valued graph with respect to every
/// element of every leaf in `leaves`.
///
/// `build` receives a fresh tape plus one leaf id per entry of `leaves` (in
/// order) and must return the scalar output node. It is called once with
/// gradients enabled for the reverse sweep and then `2 * total_elements`
/// times for the finite-difference probes.
pub fn fd_check<F>(
    name: &str,
    leaves: &[(Vec<f64>, Vec<usize>)],
    step: f64,
    build: F,
) -> Result<FdCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape: Tape<f64> = Tape::new();
    let ids = leaves
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone(), true))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let eval = |datas: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut t: Tape<f64> = Tape::new();
        let ids = datas
            .iter()
            .zip(leaves)
            .map(|(data, (_, shape))| t.leaf(data.clone(), shape.clone(), false))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut t, &ids)?;
        Ok(t.data(out)[0])
    };

    let mut datas: Vec<Vec<f64>> = leaves.iter().map(|(data, _)| data.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for li in 0..datas.len() {
        for i in 0..datas[li].len() {
            let orig = datas[li][i];
            datas[li][i] = orig + step;
            let fp = eval(&datas)?;
            datas[li][i] = orig - step;
            let fm = eval(&datas)?;
            datas[li][i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            max_rel = max_rel.max(rel_err(analytic[li][i], numeric));
            checked += 1;
        }
    }
    Ok(FdCheck { name: name.to_string(), max_rel_err: max_rel, checked })
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform samples kept at least `margin` away from each kink point, so the
/// central difference never straddles a non-smooth point.
fn uniform_away(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// Signed mask values bounded away from zero, so every output element gets a
/// distinct nonzero cotangent.
fn mask(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.5..1.5)
        })
        .collect()
}

/// Shuffled lattice values with pairwise gaps far above the probe step, so a
/// perturbation can never flip a max-pool or argmax winner.
fn distinct(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.25 - n as f64 * 0.125).collect();
    vals.shuffle(rng);
    vals
}

fn weighted_sum(t: &mut Tape<f64>, y: TensorId, m: &[f64]) -> Result<TensorId, TensorError> {
    let mid = t.constant(m.to_vec(), t.shape(y).to_vec())?;
    let p = t.mul(y, mid)?;
    Ok(t.sum(p))
}

/// Runs the finite-difference check across every differentiable operation,
/// with inputs drawn from the given seed. Callers compare each result
/// against [`OP_TOLERANCE`].
pub fn op_gradient_suite(seed: u64) -> Result<Vec<FdCheck>, TensorError> {
    let rng = &mut ChaCha20Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let step = FD_STEP;

    {
        let a = uniform(rng, 6, -1.0, 1.0);
        let b = uniform(rng, 6, -1.0, 1.0);
        let m = mask(rng, 6);
        checks.push(fd_check("add", &[(a.clone(), vec![2, 3]), (b.clone(), vec![2, 3])], step, |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted_sum(t, y, &m)
        })?);
        let m = mask(rng, 6);
        checks.push(fd_check("sub", &[(a.clone(), vec![2, 3]), (b.clone(), vec![2, 3])], step, |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            weighted_sum(t, y, &m)
        })?);
        let m = mask(rng, 6);
        checks.push(fd_check("mul", &[(a, vec![2, 3]), (b, vec![2, 3])], step, |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let a = uniform(rng, 8, -1.0, 1.0);
        let m = mask(rng, 8);
        checks.push(fd_check("scale", &[(a, vec![8])], step, |t, ids| {
            let y = t.scale(ids[0], -1.7);
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 8, -1.0, 1.0);
        let m = mask(rng, 8);
        checks.push(fd_check("add_scalar", &[(a, vec![8])], step, |t, ids| {
            let y = t.add_scalar(ids[0], 0.37);
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let a = uniform_away(rng, 10, -1.0, 1.0, &[0.0], 1e-3);
        let m = mask(rng, 10);
        checks.push(fd_check("relu", &[(a, vec![10])], step, |t, ids| {
            let y = t.relu(ids[0]);
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 10, -2.0, 2.0);
        let m = mask(rng, 10);
        checks.push(fd_check("sigmoid", &[(a, vec![10])], step, |t, ids| {
            let y = t.sigmoid(ids[0]);
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 10, -2.0, 2.0);
        let m = mask(rng, 10);
        checks.push(fd_check("tanh", &[(a, vec![10])], step, |t, ids| {
            let y = t.tanh(ids[0]);
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 10, 0.2, 2.0);
        let m = mask(rng, 10);
        checks.push(fd_check("ln", &[(a, vec![10])], step, |t, ids| {
            let y = t.ln(ids[0]);
            weighted_sum(t, y, &m)
        })?);
        let a = uniform_away(rng, 10, -1.0, 1.0, &[-0.5, 0.5], 1e-3);
        let m = mask(rng, 10);
        checks.push(fd_check("clamp", &[(a, vec![10])], step, |t, ids| {
            let y = t.clamp(ids[0], -0.5, 0.5)?;
            weighted_sum(t, y, &m)
        })?);
        let a = uniform_away(rng, 10, -2.0, 2.0, &[-1.0, 1.0], 1e-3);
        let m = mask(rng, 10);
        checks.push(fd_check("smooth_l1", &[(a, vec![10])], step, |t, ids| {
            let y = t.smooth_l1(ids[0]);
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let a = uniform(rng, 7, -1.0, 1.0);
        checks.push(fd_check("sum", &[(a, vec![7])], step, |t, ids| Ok(t.sum(ids[0])))?);
        let a = uniform(rng, 12, -1.0, 1.0);
        let m = mask(rng, 12);
        checks.push(fd_check("reshape", &[(a, vec![2, 6])], step, |t, ids| {
            let y = t.reshape(ids[0], vec![3, 4])?;
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 12, -1.0, 1.0);
        let m = mask(rng, 4);
        checks.push(fd_check("row", &[(a, vec![3, 4])], step, |t, ids| {
            let y = t.row(ids[0], 1)?;
            weighted_sum(t, y, &m)
        })?);
        let a = uniform(rng, 3, -1.0, 1.0);
        let b = uniform(rng, 4, -1.0, 1.0);
        let m = mask(rng, 7);
        checks.push(fd_check("concat", &[(a, vec![3]), (b, vec![4])], step, |t, ids| {
            let y = t.concat(ids[0], ids[1])?;
            weighted_sum(t, y, &m)
        })?);
        let rows: Vec<(Vec<f64>, Vec<usize>)> =
            (0..3).map(|_| (uniform(rng, 4, -1.0, 1.0), vec![4])).collect();
        let m = mask(rng, 12);
        checks.push(fd_check("stack", &rows, step, |t, ids| {
            let y = t.stack(ids)?;
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let x = uniform(rng, 24, -1.0, 1.0);
        let w = uniform(rng, 20, -1.0, 1.0);
        let b = uniform(rng, 5, -1.0, 1.0);
        let m = mask(rng, 30);
        checks.push(fd_check(
            "linear",
            &[(x, vec![2, 3, 4]), (w, vec![5, 4]), (b, vec![5])],
            step,
            |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
                weighted_sum(t, y, &m)
            },
        )?);
        let x = uniform(rng, 10, -2.0, 2.0);
        let m = mask(rng, 10);
        checks.push(fd_check("softmax_last_axis", &[(x, vec![2, 5])], step, |t, ids| {
            let y = t.softmax(ids[0], &[1])?;
            weighted_sum(t, y, &m)
        })?);
        let x = uniform(rng, 24, -2.0, 2.0);
        let m = mask(rng, 24);
        checks.push(fd_check("softmax_spatial_axes", &[(x, vec![2, 3, 2, 2])], step, |t, ids| {
            let y = t.softmax(ids[0], &[1, 2, 3])?;
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let x = uniform(rng, 54, -1.0, 1.0);
        let w = uniform(rng, 108, -0.5, 0.5);
        let b = uniform(rng, 2, -0.5, 0.5);
        let m = mask(rng, 54);
        checks.push(fd_check(
            "conv3d_padded",
            &[(x, vec![2, 3, 3, 3]), (w, vec![2, 2, 3, 3, 3]), (b, vec![2])],
            step,
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], ids[2], [1, 1, 1], [1, 1, 1])?;
                weighted_sum(t, y, &m)
            },
        )?);
        let x = uniform(rng, 160, -1.0, 1.0);
        let w = uniform(rng, 72, -0.5, 0.5);
        let b = uniform(rng, 3, -0.5, 0.5);
        let m = mask(rng, 90);
        checks.push(fd_check(
            "conv3d_strided",
            &[(x, vec![2, 4, 5, 4]), (w, vec![3, 2, 2, 3, 2]), (b, vec![3])],
            step,
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], ids[2], [2, 1, 2], [1, 1, 0])?;
                weighted_sum(t, y, &m)
            },
        )?);
    }

    {
        let x = distinct(rng, 128);
        let m = mask(rng, 16);
        checks.push(fd_check("maxpool3d", &[(x, vec![2, 4, 4, 4])], step, |t, ids| {
            let y = t.maxpool3d(ids[0], [2, 2, 2], [2, 2, 2])?;
            weighted_sum(t, y, &m)
        })?);
        let x = uniform(rng, 16, -1.0, 1.0);
        let m = mask(rng, 96);
        checks.push(fd_check("upsample_nearest3d", &[(x, vec![2, 2, 2, 2])], step, |t, ids| {
            let y = t.upsample_nearest3d(ids[0], [2, 1, 3])?;
            weighted_sum(t, y, &m)
        })?);
    }

    {
        let x = uniform(rng, 32, -1.0, 1.0);
        let gamma = uniform(rng, 4, 0.5, 1.5);
        let beta = uniform(rng, 4, -0.5, 0.5);
        let m = mask(rng, 32);
        checks.push(fd_check(
            "group_norm",
            &[(x, vec![4, 2, 2, 2]), (gamma, vec![4]), (beta, vec![4])],
            step,
            |t, ids| {
                let y = t.group_norm(ids[0], 2, ids[1], ids[2], 1e-5)?;
                weighted_sum(t, y, &m)
            },
        )?);
    }

    {
        let x = uniform(rng, 48, -1.0, 1.0);
        let m = mask(rng, 12);
        checks.push(fd_check("depth_sequence_mean", &[(x, vec![3, 4, 2, 2])], step, |t, ids| {
            let y = t.depth_sequence_mean(ids[0])?;
            weighted_sum(t, y, &m)
        })?);
        let x = uniform(rng, 24, -1.0, 1.0);
        let m = mask(rng, 3);
        checks.push(fd_check("global_avg_pool", &[(x, vec![3, 2, 2, 2])], step, |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            weighted_sum(t, y, &m)
        })?);
        let x = uniform(rng, 24, -2.0, 2.0);
        let m = mask(rng, 6);
        checks.push(fd_check("integrate_coords", &[(x, vec![2, 2, 3, 2])], step, |t, ids| {
            let p = t.softmax(ids[0], &[1, 2, 3])?;
            let y = t.integrate_coords(p)?;
            weighted_sum(t, y, &m)
        })?);
    }

    Ok(checks)
}
