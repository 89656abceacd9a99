//! Differentiable conversion of per-vertebra heatmaps into centroid
//! coordinates.
//!
//! Raw logit maps are normalized per channel with a spatial softmax so each
//! channel is a probability mass over the crop, then the expected voxel
//! coordinate is taken under that mass. The composition (`soft_argmax`)
//! replaces the usual maximum lookup with an integral, which keeps the whole
//! localization path differentiable and adds no trainable parameters. The
//! non-differentiable `hard_argmax` stays available for the ablation mode
//! that reads peaks off the heatmap directly.
//!
//! Coordinates are crop-local voxel units ordered `(x, y, z)`, with the
//! origin at the crop's first voxel center; conversion to world millimeters
//! happens in the inference layer. Arrays themselves are indexed `(z, y, x)`,
//! and the coordinate grid handles the flip.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::tensor::{Element, Tape, TensorError, TensorId};

/// Per-voxel coordinate lookup for a `D x H x W` crop: entry `(z, y, x)` is
/// the triple `(x, y, z)` in crop-local voxel units. Values are exact
/// integers `0..extent-1` per axis. Grids are immutable; [`CoordinateGrid::shared`]
/// caches one instance per shape.
#[derive(Debug)]
pub struct CoordinateGrid {
    extents: [usize; 3],
    /// `(z, y, x)`-major, 3 values per voxel, ordered `(x, y, z)`.
    data: Vec<f64>,
}

impl CoordinateGrid {
    pub fn new(d: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(d * h * w * 3);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(x as f64);
                    data.push(y as f64);
                    data.push(z as f64);
                }
            }
        }
        CoordinateGrid { extents: [d, h, w], data }
    }

    /// Cached grid for a shape; repeated calls share one allocation.
    pub fn shared(d: usize, h: usize, w: usize) -> Arc<CoordinateGrid> {
        static CACHE: OnceLock<Mutex<HashMap<[usize; 3], Arc<CoordinateGrid>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("grid cache poisoned");
        map.entry([d, h, w]).or_insert_with(|| Arc::new(CoordinateGrid::new(d, h, w))).clone()
    }

    /// Extents `[D, H, W]`.
    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    /// Coordinate triple `(x, y, z)` of voxel `(z, y, x)`.
    pub fn at(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let [_, h, w] = [self.extents[0], self.extents[1], self.extents[2]];
        let base = ((z * h + y) * w + x) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }
}

/// A channel-per-vertebra heatmap pair: raw logits and their normalized
/// probability maps, both `[N, D, H, W]` nodes on the same tape. Each
/// normalized channel is nonnegative and sums to one over its voxels.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapStack {
    pub raw: TensorId,
    pub probs: TensorId,
}

impl HeatmapStack {
    /// Normalizes raw logits into probability maps.
    pub fn from_logits<E: Element>(tape: &mut Tape<E>, raw: TensorId) -> Result<Self, TensorError> {
        let probs = normalize_heatmap(tape, raw)?;
        Ok(HeatmapStack { raw, probs })
    }
}

/// Per-channel spatial softmax: each `[D, H, W]` slab of the `[N, D, H, W]`
/// input becomes a probability mass (nonnegative, sums to 1). Max-subtracted
/// for overflow safety and differentiable.
pub fn normalize_heatmap<E: Element>(tape: &mut Tape<E>, y: TensorId) -> Result<TensorId, TensorError> {
    if tape.shape(y).len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "normalize_heatmap",
            detail: format!("expected [N,D,H,W] logits, got {:?}", tape.shape(y)),
        });
    }
    tape.softmax(y, &[1, 2, 3])
}

/// Expected coordinate of each probability map under the grid:
/// `C_j = sum_z sum_y sum_x P_j(z,y,x) * (x, y, z)`, a `[N, 3]` tensor in
/// crop-local voxel units. Fully differentiable in `P`.
pub fn integrate_coordinates<E: Element>(
    tape: &mut Tape<E>,
    probs: TensorId,
    grid: &CoordinateGrid,
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(probs);
    if shape.len() != 4 || [shape[1], shape[2], shape[3]] != grid.extents() {
        return Err(TensorError::ShapeMismatch {
            op: "integrate_coordinates",
            detail: format!(
                "probability maps {:?} do not match grid extents {:?}",
                shape,
                grid.extents()
            ),
        });
    }
    tape.integrate_coords(probs)
}

/// Differentiable argmax surrogate: normalize the logits, then integrate the
/// coordinate grid under the resulting mass. Output rows are `(x, y, z)` and
/// always lie inside the crop's convex hull `[0,W-1] x [0,H-1] x [0,D-1]`.
/// The operation has no trainable parameters.
pub fn soft_argmax<E: Element>(tape: &mut Tape<E>, y: TensorId) -> Result<TensorId, TensorError> {
    let probs = normalize_heatmap(tape, y)?;
    let shape = tape.shape(probs);
    let grid = CoordinateGrid::shared(shape[1], shape[2], shape[3]);
    integrate_coordinates(tape, probs, &grid)
}

/// Peak voxel coordinate per channel as `(x, y, z)`, ties broken toward the
/// lowest linear index. Inference only: backward through the result is an
/// explicit error.
pub fn hard_argmax<E: Element>(tape: &mut Tape<E>, y: TensorId) -> Result<TensorId, TensorError> {
    tape.hard_argmax(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{fd_check, FD_STEP, OP_TOLERANCE};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn soft_coords(logits: Vec<f64>, shape: Vec<usize>) -> Vec<f64> {
        let mut t: Tape<f64> = Tape::new();
        let y = t.leaf(logits, shape, false).unwrap();
        let c = soft_argmax(&mut t, y).unwrap();
        t.data(c).to_vec()
    }

    #[test]
    fn grid_is_cached_and_exact() {
        let g1 = CoordinateGrid::shared(3, 4, 5);
        let g2 = CoordinateGrid::shared(3, 4, 5);
        assert!(Arc::ptr_eq(&g1, &g2));
        assert_eq!(g1.at(0, 0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(g1.at(2, 3, 4), [4.0, 3.0, 2.0]);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(g1.at(z, y, x), [x as f64, y as f64, z as f64]);
                }
            }
        }
    }

    #[test]
    fn constant_channel_normalizes_to_uniform() {
        let mut t: Tape<f64> = Tape::new();
        let y = t.leaf(vec![7.5; 24], vec![1, 2, 3, 4], false).unwrap();
        let p = normalize_heatmap(&mut t, y).unwrap();
        for &v in t.data(p) {
            assert!((v - 1.0 / 24.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_becomes_near_delta() {
        let mut t: Tape<f64> = Tape::new();
        let mut logits = vec![0.0; 27];
        logits[13] = 100.0;
        let y = t.leaf(logits, vec![1, 3, 3, 3], false).unwrap();
        let p = normalize_heatmap(&mut t, y).unwrap();
        assert!(t.data(p)[13] >= 1.0 - 1e-10);
    }

    #[test]
    fn normalization_matches_exp_sum_oracle() {
        let rng = &mut ChaCha20Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut t: Tape<f64> = Tape::new();
        let y = t.leaf(logits.clone(), vec![1, 2, 2, 2], false).unwrap();
        let p = normalize_heatmap(&mut t, y).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (got, want) in t.data(p).iter().zip(logits.iter().map(|v| v.exp() / z)) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn delta_mass_integrates_to_its_voxel() {
        let mut t: Tape<f64> = Tape::new();
        let (d, h, w) = (5, 4, 3);
        let mut p = vec![0.0; d * h * w];
        p[(3 * h + 2) * w + 1] = 1.0;
        let pid = t.leaf(p, vec![1, d, h, w], false).unwrap();
        let grid = CoordinateGrid::new(d, h, w);
        let c = integrate_coordinates(&mut t, pid, &grid).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn uniform_mass_integrates_to_center() {
        let mut t: Tape<f64> = Tape::new();
        let (d, h, w) = (4, 5, 6);
        let n = (d * h * w) as f64;
        let pid = t.leaf(vec![1.0 / n; d * h * w], vec![1, d, h, w], false).unwrap();
        let grid = CoordinateGrid::new(d, h, w);
        let c = integrate_coordinates(&mut t, pid, &grid).unwrap();
        let got = t.data(c);
        let want = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_matches_triple_loop_oracle() {
        let rng = &mut ChaCha20Rng::seed_from_u64(23);
        let raw: Vec<f64> = (0..27).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let grid = CoordinateGrid::new(3, 3, 3);
        let mut want = [0.0f64; 3];
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let p = probs[(z * 3 + y) * 3 + x];
                    let c = grid.at(z, y, x);
                    for k in 0..3 {
                        want[k] += p * c[k];
                    }
                }
            }
        }

        let mut t: Tape<f64> = Tape::new();
        let pid = t.leaf(probs, vec![1, 3, 3, 3], false).unwrap();
        let c = integrate_coordinates(&mut t, pid, &grid).unwrap();
        let got = t.data(c);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_rejects_grid_shape_mismatch() {
        let mut t: Tape<f64> = Tape::new();
        let pid = t.leaf(vec![0.0; 8], vec![1, 2, 2, 2], false).unwrap();
        let grid = CoordinateGrid::new(2, 2, 3);
        assert!(integrate_coordinates(&mut t, pid, &grid).is_err());
    }

    /// Gaussian-bump logits centered at `(cz, cy, cx)` on a `D x H x W` lattice.
    fn blob_logits(d: usize, h: usize, w: usize, cz: f64, cy: f64, cx: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r2 = (z as f64 - cz).powi(2) + (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    out.push(50.0 * (-r2 / 2.0).exp());
                }
            }
        }
        out
    }

    #[test]
    fn circular_shift_in_z_moves_coordinate_by_one() {
        let (d, h, w) = (9, 7, 7);
        let logits = blob_logits(d, h, w, 4.0, 3.0, 3.0);
        let mut shifted = vec![0.0; d * h * w];
        for z in 0..d {
            let src = &logits[z * h * w..(z + 1) * h * w];
            shifted[((z + 1) % d) * h * w..(((z + 1) % d) + 1) * h * w].copy_from_slice(src);
        }
        let base = soft_coords(logits, vec![1, d, h, w]);
        let moved = soft_coords(shifted, vec![1, d, h, w]);
        assert!((moved[2] - base[2] - 1.0).abs() < 1e-9, "z moved by {}", moved[2] - base[2]);
        assert!((moved[0] - base[0]).abs() < 1e-9);
        assert!((moved[1] - base[1]).abs() < 1e-9);
    }

    #[test]
    fn temperature_sharpens_toward_peak_voxel() {
        // Fixed logits with a unique peak (1.9 at linear index 7) that leads
        // the runner-up (1.2) by a clear margin.
        let logits = vec![
            0.31, -0.47, 0.02, -0.88, 0.54, -0.12, 0.77, 1.90, -0.65, 0.21, -0.33, 0.48, -0.95,
            0.10, 0.66, -0.27, 1.20, 0.05,
        ];

        let mut t: Tape<f64> = Tape::new();
        let y = t.leaf(logits.clone(), vec![1, 2, 3, 3], false).unwrap();
        let peak = hard_argmax(&mut t, y).unwrap();
        let peak = t.data(peak).to_vec();
        assert_eq!(peak, vec![1.0, 2.0, 0.0]);

        let dist = |temp: f64| -> f64 {
            let scaled: Vec<f64> = logits.iter().map(|v| v * temp).collect();
            let c = soft_coords(scaled, vec![1, 2, 3, 3]);
            (0..3).map(|k| (c[k] - peak[k]).powi(2)).sum::<f64>().sqrt()
        };
        let (d1, d10, d100) = (dist(1.0), dist(10.0), dist(100.0));
        assert!(d1 > d10 && d10 > d100, "distances {d1} {d10} {d100} not decreasing");
        assert!(d100 < 1e-3, "temperature 100 should pin the peak, got {d100}");
    }

    #[test]
    fn hard_argmax_picks_delta_and_breaks_ties_low() {
        let mut t: Tape<f64> = Tape::new();
        let mut m = vec![0.0; 24];
        m[(1 * 3 + 2) * 4 + 3] = 9.0;
        let y = t.leaf(m, vec![1, 2, 3, 4], false).unwrap();
        let c = hard_argmax(&mut t, y).unwrap();
        assert_eq!(t.data(c), &[3.0, 2.0, 1.0]);

        let flat = t.leaf(vec![1.0; 24], vec![1, 2, 3, 4], false).unwrap();
        let c = hard_argmax(&mut t, flat).unwrap();
        assert_eq!(t.data(c), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_argmax_matches_scan_oracle() {
        let rng = &mut ChaCha20Rng::seed_from_u64(41);
        for _ in 0..20 {
            let (d, h, w) = (3, 4, 5);
            let vals: Vec<f64> = (0..2 * d * h * w).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut t: Tape<f64> = Tape::new();
            let y = t.leaf(vals.clone(), vec![2, d, h, w], false).unwrap();
            let c = hard_argmax(&mut t, y).unwrap();
            let got = t.data(c);
            for j in 0..2 {
                let slab = &vals[j * d * h * w..(j + 1) * d * h * w];
                let mut best = 0;
                for (k, &v) in slab.iter().enumerate() {
                    if v > slab[best] {
                        best = k;
                    }
                }
                let (bz, by, bx) = (best / (h * w), (best / w) % h, best % w);
                assert_eq!(&got[j * 3..j * 3 + 3], &[bx as f64, by as f64, bz as f64]);
            }
        }
    }

    #[test]
    fn hard_argmax_refuses_gradient_flow() {
        let mut t: Tape<f64> = Tape::new();
        let y = t.leaf(vec![0.5, 1.5, -0.5, 0.0], vec![1, 1, 2, 2], true).unwrap();
        let c = hard_argmax(&mut t, y).unwrap();
        let r = t.reshape(c, vec![3]).unwrap();
        let s = t.sum(r);
        assert!(matches!(t.backward(s), Err(TensorError::NonDifferentiable)));
    }

    #[test]
    fn squared_distance_gradient_matches_finite_differences() {
        let rng = &mut ChaCha20Rng::seed_from_u64(53);
        let logits: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = [1.2, 0.8, 1.9, 0.4, 1.1, 0.6];
        let report = fd_check("soft_argmax_sq_dist", &[(logits, vec![2, 3, 3, 3])], FD_STEP, |t, ids| {
            let c = soft_argmax(t, ids[0])?;
            let tgt = t.constant(target.to_vec(), vec![2, 3])?;
            let d = t.sub(c, tgt)?;
            let sq = t.mul(d, d)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < OP_TOLERANCE, "rel err {}", report.max_rel_err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// For any finite logits the normalized mass sums to one and the
        /// integrated coordinate stays inside the crop's convex hull.
        #[test]
        fn coords_stay_in_hull_and_mass_sums_to_one(
            vals in proptest::collection::vec(-1e3f64..1e3, 24)
        ) {
            let mut t: Tape<f64> = Tape::new();
            let y = t.leaf(vals, vec![1, 2, 3, 4], false).unwrap();
            let p = normalize_heatmap(&mut t, y).unwrap();
            let sum: f64 = t.data(p).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(t.data(p).iter().all(|&v| v >= 0.0));

            let grid = CoordinateGrid::shared(2, 3, 4);
            let c = integrate_coordinates(&mut t, p, &grid).unwrap();
            let c = t.data(c);
            // The hull bound holds up to rounding of the softmax quotients,
            // which can overshoot by an ulp when all mass sits on one face.
            let slop = 1e-9;
            prop_assert!((-slop..=3.0 + slop).contains(&c[0]));
            prop_assert!((-slop..=2.0 + slop).contains(&c[1]));
            prop_assert!((-slop..=1.0 + slop).contains(&c[2]));
        }

        /// Adding any constant to the logits leaves the coordinates unchanged.
        #[test]
        fn shift_invariance(
            vals in proptest::collection::vec(-5.0f64..5.0, 18),
            c in -1e3f64..1e3
        ) {
            let base = soft_coords(vals.clone(), vec![1, 2, 3, 3]);
            let shifted = soft_coords(vals.iter().map(|v| v + c).collect(), vec![1, 2, 3, 3]);
            for k in 0..3 {
                prop_assert!((base[k] - shifted[k]).abs() < 1e-12);
            }
        }
    }
}
