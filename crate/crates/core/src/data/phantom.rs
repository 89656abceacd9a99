//! Synthetic spine phantoms: bright vertebra-like blobs along a curved
//! centerline in a noisy background, with optional metal artifacts and a
//! configurable field-of-view window. These stand in for clinical CT at
//! desk scale while keeping ground truth exact.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{invalid, DataError, Label, LabelSet, Volume, CLASS_NAMES};

/// Generation recipe. Determinism contract: `(spec, seed)` fully determines
/// the output, bit for bit.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    /// Size of the label space (the model's class count), at most 26.
    pub classes: usize,
    /// How many consecutive vertebrae are actually in view.
    pub count: usize,
    /// First visible class: the field-of-view window is
    /// `fov_start .. fov_start + count`.
    pub fov_start: usize,
    /// Generated volume extents `[D, H, W]`.
    pub extents: [usize; 3],
    /// Generated voxel spacing in mm, `(z, y, x)` order. Deliberately
    /// anisotropic by default so the resampling path does real work.
    pub voxel_mm: [f64; 3],
    /// Inter-vertebra distance along z in mm.
    pub spacing_mm: f64,
    /// Uniform jitter applied to each vertebra's z position; must stay below
    /// `0.45 * spacing_mm` so the z ordering cannot invert.
    pub spacing_jitter_mm: f64,
    /// Base blob radius in mm; per-class growth models larger lower-spine
    /// bodies and doubles as the size cue that makes classes visually
    /// distinguishable.
    pub radius_mm: f64,
    pub radius_growth_mm: f64,
    /// Peak blob intensity above the soft-tissue background, HU-like.
    pub peak_intensity: f64,
    /// Lateral amplitude of the curved centerline in mm.
    pub curve_amplitude_mm: f64,
    /// Standard deviation of additive Gaussian noise, HU-like.
    pub noise_std: f64,
    /// Probability that the scan carries a small metal cluster.
    pub metal_probability: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            classes: 6,
            count: 6,
            fov_start: 0,
            extents: [40, 44, 44],
            voxel_mm: [2.4, 1.6, 1.6],
            spacing_mm: 14.0,
            spacing_jitter_mm: 2.0,
            radius_mm: 5.0,
            radius_growth_mm: 0.7,
            peak_intensity: 600.0,
            curve_amplitude_mm: 6.0,
            noise_std: 20.0,
            metal_probability: 0.15,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(invalid(format!("classes must be 1..=26, got {}", self.classes)));
        }
        if self.count == 0 || self.fov_start + self.count > self.classes {
            return Err(invalid(format!(
                "field of view {}..{} does not fit in {} classes",
                self.fov_start,
                self.fov_start + self.count,
                self.classes
            )));
        }
        if self.extents.iter().any(|&e| e < 2) {
            return Err(invalid(format!("extents {:?} too small to render into", self.extents)));
        }
        if self.voxel_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid(format!("voxel spacing must be positive, got {:?}", self.voxel_mm)));
        }
        if !(self.spacing_mm > 0.0) || !(self.radius_mm > 0.0) || self.peak_intensity <= 0.0 {
            return Err(invalid("spacing, radius, and peak intensity must be positive"));
        }
        if self.spacing_jitter_mm < 0.0 || self.spacing_jitter_mm > 0.45 * self.spacing_mm {
            return Err(invalid(format!(
                "z jitter {} must lie in [0, {}] to keep the ordering strict",
                self.spacing_jitter_mm,
                0.45 * self.spacing_mm
            )));
        }
        if self.noise_std < 0.0 || self.radius_growth_mm < 0.0 || self.curve_amplitude_mm < 0.0 {
            return Err(invalid("noise, radius growth, and curvature must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.metal_probability) {
            return Err(invalid(format!(
                "metal probability must lie in [0, 1], got {}",
                self.metal_probability
            )));
        }
        Ok(())
    }

    /// Blob radius of a class, growing toward the lumbar end.
    pub fn class_radius(&self, class: usize) -> f64 {
        self.radius_mm + self.radius_growth_mm * class as f64
    }
}

/// Renders one phantom scan. Draw order from the seeded stream is fixed:
/// curve phase, per-vertebra z jitter, per-voxel noise, metal decision and
/// placement; changing it would silently break stored-dataset determinism.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelSet), DataError> {
    spec.validate()?;
    let rng = &mut ChaCha20Rng::seed_from_u64(seed);
    let [d, h, w] = spec.extents;
    let size = [
        (d - 1) as f64 * spec.voxel_mm[0],
        (h - 1) as f64 * spec.voxel_mm[1],
        (w - 1) as f64 * spec.voxel_mm[2],
    ];

    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let run = (spec.count - 1) as f64 * spec.spacing_mm;
    let z0 = (size[0] - run) / 2.0;
    let denom = (spec.count.max(2) - 1) as f64;

    // Centroids in world mm, one per visible vertebra.
    let mut centers = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let jitter = if spec.spacing_jitter_mm > 0.0 {
            rng.gen_range(-spec.spacing_jitter_mm..spec.spacing_jitter_mm)
        } else {
            0.0
        };
        let t = k as f64 / denom;
        let z = z0 + k as f64 * spec.spacing_mm + jitter;
        let y = size[1] / 2.0 + spec.curve_amplitude_mm * (std::f64::consts::PI * (t - 0.5)).sin();
        let x = size[2] / 2.0
            + 0.6 * spec.curve_amplitude_mm * (std::f64::consts::TAU * t + phase).sin();
        centers.push([x, y, z]);
    }
    for (k, c) in centers.iter().enumerate() {
        let inside = c[2] >= 0.0
            && c[2] <= size[0]
            && c[1] >= 0.0
            && c[1] <= size[1]
            && c[0] >= 0.0
            && c[0] <= size[2];
        if !inside {
            return Err(invalid(format!(
                "vertebra {} centroid {:?} mm falls outside the {:?} mm volume; \
                 enlarge the extents or shrink the spacing",
                spec.fov_start + k,
                c,
                [size[2], size[1], size[0]]
            )));
        }
    }

    // Soft-tissue background with ellipsoidal blobs; render in f64, quantize
    // once to f32 so on-disk round trips are bitwise.
    let mut field = vec![0.0f64; d * h * w];
    for (k, c) in centers.iter().enumerate() {
        let class = spec.fov_start + k;
        let r = spec.class_radius(class);
        // Classes grow in cross-section, not thickness: the z radius stays at
        // the base value so neighbors never merge, while the lateral radii
        // carry the class-size cue.
        let (rz, ry, rx) = (0.9 * spec.radius_mm, r, 1.1 * r);
        let zr = voxel_range(c[2], rz, spec.voxel_mm[0], d);
        let yr = voxel_range(c[1], ry, spec.voxel_mm[1], h);
        let xr = voxel_range(c[0], rx, spec.voxel_mm[2], w);
        for z in zr.0..=zr.1 {
            let dz = (z as f64 * spec.voxel_mm[0] - c[2]) / rz;
            for y in yr.0..=yr.1 {
                let dy = (y as f64 * spec.voxel_mm[1] - c[1]) / ry;
                for x in xr.0..=xr.1 {
                    let dx = (x as f64 * spec.voxel_mm[2] - c[0]) / rx;
                    let rho2 = dz * dz + dy * dy + dx * dx;
                    if rho2 < 1.0 {
                        let fall = 1.0 - rho2;
                        field[(z * h + y) * w + x] += spec.peak_intensity * fall * fall;
                    }
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std)
            .map_err(|e| invalid(format!("noise model: {e}")))?;
        for v in &mut field {
            *v += normal.sample(rng);
        }
    }

    if rng.gen_bool(spec.metal_probability) {
        let k = rng.gen_range(0..spec.count);
        let r = spec.class_radius(spec.fov_start + k);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(2.5 * r..3.5 * r);
        let cx = centers[k][0] + dist * angle.cos();
        let cy = centers[k][1] + dist * angle.sin();
        let cz = centers[k][2];
        let zr = voxel_range(cz, 3.0, spec.voxel_mm[0], d);
        let yr = voxel_range(cy, 3.0, spec.voxel_mm[1], h);
        let xr = voxel_range(cx, 3.0, spec.voxel_mm[2], w);
        for z in zr.0..=zr.1 {
            for y in yr.0..=yr.1 {
                for x in xr.0..=xr.1 {
                    let dz = z as f64 * spec.voxel_mm[0] - cz;
                    let dy = y as f64 * spec.voxel_mm[1] - cy;
                    let dx = x as f64 * spec.voxel_mm[2] - cx;
                    if dz * dz + dy * dy + dx * dx < 9.0 {
                        field[(z * h + y) * w + x] = 3000.0;
                    }
                }
            }
        }
    }

    let data: Vec<f32> = field.iter().map(|&v| v as f32).collect();
    let vol = Volume::new(spec.extents, spec.voxel_mm, [0.0; 3], data)?;
    let labels = LabelSet::new(
        centers
            .iter()
            .enumerate()
            .map(|(k, &world)| Label { class: spec.fov_start + k, world })
            .collect(),
    )?;
    labels.validate_within(&vol)?;
    Ok((vol, labels))
}

/// Inclusive voxel index range covering `center ± reach` mm, clamped to the
/// volume.
fn voxel_range(center: f64, reach: f64, step: f64, extent: usize) -> (usize, usize) {
    let lo = ((center - reach) / step).ceil().max(0.0) as usize;
    let hi = (((center + reach) / step).floor() as isize).min(extent as isize - 1).max(0) as usize;
    (lo.min(extent - 1), hi)
}
