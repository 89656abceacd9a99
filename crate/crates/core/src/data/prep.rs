//! Preprocessing and sampling: intensity normalization, isotropic
//! resampling, and multi-label random crops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{invalid, Crop, DataError, LabelSet, Volume};
use crate::loss::CropTarget;

/// Default isotropic grid step in millimeters for the training resolution.
pub const TARGET_SPACING_MM: f64 = 2.0;

/// Clamps intensities to a floor of -1000 (air), then z-scores the whole
/// volume to zero mean and unit variance. The `(mean, std)` actually used
/// are recorded on the result. A constant volume has no scale and is an
/// error.
pub fn preprocess(vol: &Volume) -> Result<Volume, DataError> {
    let n = vol.numel() as f64;
    let clamped: Vec<f64> = vol.data.iter().map(|&v| (v as f64).max(-1000.0)).collect();
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(invalid(format!(
            "volume is constant (std {std:.3e}) and cannot be normalized"
        )));
    }
    let data: Vec<f32> = clamped.iter().map(|v| ((v - mean) / std) as f32).collect();
    Ok(Volume { norm: Some((mean, std)), data, ..vol.clone() })
}

/// Resamples intensities onto an isotropic grid of `target_mm` spacing with
/// trilinear interpolation. The first voxel center is kept, so the new
/// extents follow `floor((e - 1) * s / target) + 1` per axis and sampling
/// never extrapolates. Label world coordinates are untouched; their voxel
/// coordinates simply re-derive under the new geometry.
pub fn resample_isotropic(
    vol: &Volume,
    labels: &LabelSet,
    target_mm: f64,
) -> Result<(Volume, LabelSet), DataError> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(invalid(format!("target spacing must be positive, got {target_mm}")));
    }
    if vol.spacing.iter().all(|&s| s == target_mm) {
        return Ok((vol.clone(), labels.clone()));
    }
    let ne: Vec<usize> = (0..3)
        .map(|a| ((vol.extents[a] - 1) as f64 * vol.spacing[a] / target_mm).floor() as usize + 1)
        .collect();
    let extents = [ne[0], ne[1], ne[2]];
    let ratio = [
        target_mm / vol.spacing[0],
        target_mm / vol.spacing[1],
        target_mm / vol.spacing[2],
    ];
    let mut data = Vec::with_capacity(extents[0] * extents[1] * extents[2]);
    for z in 0..extents[0] {
        let sz = z as f64 * ratio[0];
        for y in 0..extents[1] {
            let sy = y as f64 * ratio[1];
            for x in 0..extents[2] {
                let sx = x as f64 * ratio[2];
                data.push(sample_trilinear(vol, sz, sy, sx) as f32);
            }
        }
    }
    let out = Volume { extents, spacing: [target_mm; 3], data, ..vol.clone() };
    Ok((out, labels.clone()))
}

/// Trilinear sample at a continuous `(z, y, x)` voxel coordinate, assumed
/// inside `[0, extent-1]` per axis.
fn sample_trilinear(vol: &Volume, z: f64, y: f64, x: f64) -> f64 {
    let split = |c: f64, extent: usize| -> (usize, usize, f64) {
        let i = (c.floor() as usize).min(extent - 1);
        let j = (i + 1).min(extent - 1);
        (i, j, c - i as f64)
    };
    let (z0, z1, fz) = split(z, vol.extents[0]);
    let (y0, y1, fy) = split(y, vol.extents[1]);
    let (x0, x1, fx) = split(x, vol.extents[2]);
    let v = |zi: usize, yi: usize, xi: usize| vol.at(zi, yi, xi) as f64;
    let c00 = v(z0, y0, x0) * (1.0 - fx) + v(z0, y0, x1) * fx;
    let c01 = v(z0, y1, x0) * (1.0 - fx) + v(z0, y1, x1) * fx;
    let c10 = v(z1, y0, x0) * (1.0 - fx) + v(z1, y0, x1) * fx;
    let c11 = v(z1, y1, x0) * (1.0 - fx) + v(z1, y1, x1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Copies the `shape`-sized subvolume whose lowest corner is `corner`
/// (both `[D, H, W]`-ordered), keeping world geometry consistent.
pub fn crop_at(vol: &Volume, corner: [usize; 3], shape: [usize; 3]) -> Result<Volume, DataError> {
    for a in 0..3 {
        if corner[a] + shape[a] > vol.extents[a] {
            return Err(invalid(format!(
                "crop corner {corner:?} + shape {shape:?} exceeds extents {:?}",
                vol.extents
            )));
        }
        if shape[a] == 0 {
            return Err(invalid("crop shape must be nonzero"));
        }
    }
    let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let base = vol.index(corner[0] + z, corner[1] + y, corner[2]);
            data.extend_from_slice(&vol.data[base..base + shape[2]]);
        }
    }
    let origin = [
        vol.origin[0] + corner[0] as f64 * vol.spacing[0],
        vol.origin[1] + corner[1] as f64 * vol.spacing[1],
        vol.origin[2] + corner[2] as f64 * vol.spacing[2],
    ];
    Ok(Volume { extents: shape, origin, data, ..vol.clone() })
}

/// Supervision for a crop: class `n` is present iff its centroid's
/// continuous crop-local voxel coordinate lies in `[0, extent-1]` on every
/// axis, and present coordinates are crop-local voxels `(x, y, z)`.
pub fn crop_target_for(crop: &Volume, labels: &LabelSet, classes: usize) -> CropTarget {
    let ext = [crop.extents[2], crop.extents[1], crop.extents[0]];
    let mut present = vec![false; classes];
    let mut coords = vec![[0.0f64; 3]; classes];
    for l in labels.labels() {
        if l.class >= classes {
            continue;
        }
        let v = crop.world_to_voxel(l.world);
        let inside = (0..3).all(|a| v[a] >= 0.0 && v[a] <= (ext[a] - 1) as f64);
        if inside {
            present[l.class] = true;
            coords[l.class] = v;
        }
    }
    CropTarget::new(present, coords).expect("in-bounds voxel coordinates are finite")
}

/// Uniform random crop: the corner is drawn uniformly over all valid
/// positions. Crops containing zero vertebrae are legitimate samples.
pub fn random_crop(
    vol: &Volume,
    labels: &LabelSet,
    shape: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<Crop, DataError> {
    random_crop_biased(vol, labels, shape, classes, 0.0, seed)
}

/// Random crop whose corner is, with probability `bias`, drawn uniformly
/// from the corners that contain one randomly chosen labeled centroid;
/// otherwise uniform over all corners. `bias = 0` is the pure uniform
/// sampler. Crop axes must divide by 8 so the crop survives the network's
/// three pooling halvings.
pub fn random_crop_biased(
    vol: &Volume,
    labels: &LabelSet,
    shape: [usize; 3],
    classes: usize,
    bias: f64,
    seed: u64,
) -> Result<Crop, DataError> {
    if shape.iter().any(|&c| c == 0 || c % 8 != 0) {
        return Err(invalid(format!("crop shape {shape:?} axes must be positive multiples of 8")));
    }
    for a in 0..3 {
        if shape[a] > vol.extents[a] {
            return Err(invalid(format!(
                "crop shape {shape:?} larger than volume extents {:?}",
                vol.extents
            )));
        }
    }
    if !(0.0..=1.0).contains(&bias) {
        return Err(invalid(format!("containment bias must lie in [0, 1], got {bias}")));
    }
    let rng = &mut ChaCha20Rng::seed_from_u64(seed);
    let max_corner = [
        vol.extents[0] - shape[0],
        vol.extents[1] - shape[1],
        vol.extents[2] - shape[2],
    ];

    let mut corner = None;
    if bias > 0.0 && !labels.is_empty() && rng.gen_bool(bias) {
        let l = labels.labels()[rng.gen_range(0..labels.len())];
        let v = vol.world_to_voxel(l.world);
        // Containment demands corner <= coord <= corner + extent - 1 per
        // axis; v is (x, y, z), corners are (z, y, x).
        let mut c = [0usize; 3];
        let mut ok = true;
        for a in 0..3 {
            let coord = v[2 - a];
            let lo = (coord - (shape[a] - 1) as f64).ceil().max(0.0) as usize;
            let hi = (coord.floor() as usize).min(max_corner[a]);
            if lo > hi {
                ok = false;
                break;
            }
            c[a] = rng.gen_range(lo..=hi);
        }
        if ok {
            corner = Some(c);
        }
    }
    let corner = corner.unwrap_or_else(|| {
        [
            rng.gen_range(0..=max_corner[0]),
            rng.gen_range(0..=max_corner[1]),
            rng.gen_range(0..=max_corner[2]),
        ]
    });

    let volume = crop_at(vol, corner, shape)?;
    let target = crop_target_for(&volume, labels, classes);
    Ok(Crop { volume, target })
}

/// Pre-samples a fixed crop list over a scan set: `per_scan` biased random
/// crops from each scan, in scan order. The crop at position
/// `s * per_scan + k` is drawn with seed `seed + s * per_scan + k`, so the
/// list is fully determined by `(scans, shape, per_scan, bias, seed)` and
/// is independent of how many scans follow. An epoch of training is one
/// pass over such a list.
pub fn sample_crops(
    scans: &[(Volume, LabelSet)],
    shape: [usize; 3],
    classes: usize,
    per_scan: usize,
    bias: f64,
    seed: u64,
) -> Result<Vec<Crop>, DataError> {
    if per_scan == 0 {
        return Err(invalid("per_scan must be at least 1"));
    }
    let mut crops = Vec::with_capacity(scans.len() * per_scan);
    for (s, (vol, labels)) in scans.iter().enumerate() {
        for k in 0..per_scan {
            let crop_seed = seed + (s * per_scan + k) as u64;
            crops.push(random_crop_biased(vol, labels, shape, classes, bias, crop_seed)?);
        }
    }
    Ok(crops)
}

/// Clamps intensities, normalizes, and resamples one scan to an isotropic
/// grid: the shared preparation step before both training and inference.
pub fn prepare_scan(
    vol: &Volume,
    labels: &LabelSet,
    target_mm: f64,
) -> Result<(Volume, LabelSet), DataError> {
    let prepped = preprocess(vol)?;
    resample_isotropic(&prepped, labels, target_mm)
}
