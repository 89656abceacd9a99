//! Whole-scan inference: tile a preprocessed volume with overlapping
//! crops, run the network on each window, collect per-class votes where
//! the presence probability clears a threshold, and fuse each class's
//! votes into one world-millimeter centroid.
//!
//! Aggregation is a one-cluster fit with outlier rejection: votes farther
//! than [`OUTLIER_RADIUS_MM`] from the per-axis median are dropped, the
//! rest are averaged weighted by confidence. Votes are put in a canonical
//! order first, so the result is exactly invariant to vote order.

pub mod metrics;

pub use metrics::{
    identification_metrics, mean_average_precision, render_metrics_csv, render_metrics_table,
    ApReport, MetricsReport, ScopeMetrics, ID_THRESHOLD_MM, METRICS_HEADER,
};

use crate::data::{class_name, crop_at, DataError, LabelSet, Volume};
use crate::integral::hard_argmax;
use crate::loss::LossError;
use crate::nn::{LocMode, Model, NnError};
use crate::tensor::TensorError;
use std::path::Path;
use thiserror::Error;

/// Errors surfaced by inference, aggregation, and the report formats.
#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(detail: impl Into<String>) -> InferError {
    InferError::Config(detail.into())
}

/// Votes below or at this presence probability are not emitted.
pub const DEFAULT_VOTE_THRESHOLD: f64 = 0.5;

/// Votes farther than this from their class's median are rejected before
/// averaging (twice the identification threshold).
pub const OUTLIER_RADIUS_MM: f64 = 40.0;

/// One window's opinion about one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub class: usize,
    /// Presence probability that cleared the threshold.
    pub prob: f64,
    /// Crop-local coordinate in voxels, `(x, y, z)`.
    pub local: [f64; 3],
    /// The window's world origin in mm, `(z, y, x)` (volume convention).
    pub origin: [f64; 3],
    /// The vote's position in world mm, `(x, y, z)`.
    pub world: [f64; 3],
}

/// Fused per-class result. Absent classes keep zeroed fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub present: bool,
    /// Predicted centroid in world mm, `(x, y, z)`; meaningful only when
    /// present.
    pub world: [f64; 3],
    /// Highest probability among the votes that survived rejection.
    pub confidence: f64,
}

impl ClassPrediction {
    fn absent() -> Self {
        ClassPrediction { present: false, world: [0.0; 3], confidence: 0.0 }
    }
}

/// Whole-scan prediction: one fused entry per class, plus the raw votes
/// they were fused from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPrediction {
    pub classes: Vec<ClassPrediction>,
    pub votes: Vec<Vote>,
}

impl ScanPrediction {
    pub fn present_count(&self) -> usize {
        self.classes.iter().filter(|c| c.present).count()
    }
}

/// Half the crop per axis (at least 1): adjacent windows overlap 50%.
pub fn default_stride(crop: [usize; 3]) -> [usize; 3] {
    crop.map(|c| (c / 2).max(1))
}

/// Window origins along one axis: `0, stride, 2*stride, ...`, with the
/// last origin clamped so the final window ends exactly at the edge.
/// Requires `extent >= crop`.
fn window_origins(extent: usize, crop: usize, stride: usize) -> Vec<usize> {
    debug_assert!(extent >= crop && stride > 0);
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + crop >= extent {
            out.push(extent - crop);
            return out;
        }
        out.push(o);
        o += stride;
    }
}

/// Grows any axis smaller than the crop to the crop size, centering the
/// original content and filling with the volume's clamp-floor intensity
/// (-1000, or its z-scored image after preprocessing). The world origin
/// shifts so every original voxel keeps its world position.
fn pad_to_crop(vol: &Volume, crop: [usize; 3]) -> Volume {
    let fill = match vol.norm {
        Some((mean, std)) => ((-1000.0 - mean) / std) as f32,
        None => -1000.0_f32,
    };
    let target = [
        vol.extents[0].max(crop[0]),
        vol.extents[1].max(crop[1]),
        vol.extents[2].max(crop[2]),
    ];
    let lo = [
        (target[0] - vol.extents[0]) / 2,
        (target[1] - vol.extents[1]) / 2,
        (target[2] - vol.extents[2]) / 2,
    ];
    let mut out = Volume::filled(
        target,
        vol.spacing,
        [
            vol.origin[0] - lo[0] as f64 * vol.spacing[0],
            vol.origin[1] - lo[1] as f64 * vol.spacing[1],
            vol.origin[2] - lo[2] as f64 * vol.spacing[2],
        ],
        fill,
    );
    out.norm = vol.norm;
    let [d, h, w] = vol.extents;
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = ((z + lo[0]) * target[1] + (y + lo[1])) * target[2] + lo[2];
            out.data[dst..dst + w].copy_from_slice(&vol.data[src..src + w]);
        }
    }
    out
}

/// Runs the model over a tiling of `vol` and returns every vote whose
/// presence probability exceeds `threshold`.
///
/// Windows start every `stride` voxels per axis; the last window per axis
/// is clamped to end at the volume edge. A volume smaller than the crop
/// on some axis is first center-padded on that axis, which for a volume
/// smaller in every direction degenerates to a single padded window.
/// Localization variants with differentiable coordinates report them
/// directly; the argmax variant decodes each heatmap's peak voxel.
pub fn sliding_infer(
    model: &Model,
    vol: &Volume,
    stride: [usize; 3],
    threshold: f64,
) -> Result<Vec<Vote>, InferError> {
    if stride.iter().any(|&s| s == 0) {
        return Err(config_err("stride must be positive on every axis"));
    }
    if !threshold.is_finite() {
        return Err(config_err("vote threshold must be finite"));
    }
    let crop = model.config().crop;
    let classes = model.config().classes;
    let padded;
    let vol = if vol.extents.iter().zip(crop).any(|(&e, c)| e < c) {
        padded = pad_to_crop(vol, crop);
        &padded
    } else {
        vol
    };

    let mut votes = Vec::new();
    for &oz in &window_origins(vol.extents[0], crop[0], stride[0]) {
        for &oy in &window_origins(vol.extents[1], crop[1], stride[1]) {
            for &ox in &window_origins(vol.extents[2], crop[2], stride[2]) {
                let window = crop_at(vol, [oz, oy, ox], crop)?;
                let mut fwd = model.begin();
                let data: Vec<f64> = window.data.iter().map(|&v| v as f64).collect();
                let input = fwd.tape.constant(data, vec![1, crop[0], crop[1], crop[2]])?;
                let out = model.forward(&mut fwd, input)?;
                let coords_id = match model.config().loc_mode {
                    LocMode::Integral | LocMode::DirectFc => {
                        out.coords.expect("coordinate modes emit coordinates")
                    }
                    LocMode::HeatmapArgmax => {
                        let stack = out.heatmaps.expect("heatmap mode emits heatmaps");
                        hard_argmax(&mut fwd.tape, stack.probs)?
                    }
                };
                let probs = fwd.tape.data(out.probs).to_vec();
                let coords = fwd.tape.data(coords_id).to_vec();
                for n in 0..classes {
                    if probs[n] > threshold {
                        let local = [coords[n * 3], coords[n * 3 + 1], coords[n * 3 + 2]];
                        votes.push(Vote {
                            class: n,
                            prob: probs[n],
                            local,
                            origin: window.origin,
                            world: window.voxel_to_world(local),
                        });
                    }
                }
            }
        }
    }
    Ok(votes)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn axis_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fuses one class's votes: per-axis median, rejection of votes farther
/// than [`OUTLIER_RADIUS_MM`] from it, then a confidence-weighted mean of
/// the survivors. If rejection removes everything, the single
/// highest-confidence vote stands. Votes are sorted into a canonical
/// order first, so any permutation of the same votes fuses identically.
fn aggregate_class(votes: &[&Vote]) -> ClassPrediction {
    if votes.is_empty() {
        return ClassPrediction::absent();
    }
    let mut vs: Vec<&Vote> = votes.to_vec();
    vs.sort_by(|a, b| {
        a.world[0]
            .total_cmp(&b.world[0])
            .then(a.world[1].total_cmp(&b.world[1]))
            .then(a.world[2].total_cmp(&b.world[2]))
            .then(a.prob.total_cmp(&b.prob))
    });

    let median = {
        let mut m = [0.0; 3];
        for (axis, slot) in m.iter_mut().enumerate() {
            let mut xs: Vec<f64> = vs.iter().map(|v| v.world[axis]).collect();
            xs.sort_by(f64::total_cmp);
            *slot = axis_median(&xs);
        }
        m
    };

    let kept: Vec<&Vote> =
        vs.iter().copied().filter(|v| dist(v.world, median) <= OUTLIER_RADIUS_MM).collect();
    if kept.is_empty() {
        let top = vs.iter().max_by(|a, b| a.prob.total_cmp(&b.prob)).unwrap();
        return ClassPrediction { present: true, world: top.world, confidence: top.prob };
    }
    // Weighted mean of deviations from the median, then shift back: votes
    // sitting exactly on the median fuse to it without rounding drift.
    let weight: f64 = kept.iter().map(|v| v.prob).sum();
    let mut world = [0.0; 3];
    for v in &kept {
        for axis in 0..3 {
            world[axis] += v.prob * (v.world[axis] - median[axis]);
        }
    }
    for (w, m) in world.iter_mut().zip(median) {
        *w = m + *w / weight;
    }
    let confidence = kept.iter().map(|v| v.prob).fold(0.0, f64::max);
    ClassPrediction { present: true, world, confidence }
}

/// Fuses votes into a whole-scan prediction: a class is present iff it
/// received at least one vote.
pub fn aggregate_votes(votes: &[Vote], classes: usize) -> ScanPrediction {
    let mut by_class: Vec<Vec<&Vote>> = vec![Vec::new(); classes];
    for v in votes {
        if v.class < classes {
            by_class[v.class].push(v);
        }
    }
    ScanPrediction {
        classes: by_class.iter().map(|vs| aggregate_class(vs)).collect(),
        votes: votes.to_vec(),
    }
}

/// Sliding-window inference plus aggregation in one call.
pub fn infer_scan(
    model: &Model,
    vol: &Volume,
    stride: [usize; 3],
    threshold: f64,
) -> Result<ScanPrediction, InferError> {
    let votes = sliding_infer(model, vol, stride, threshold)?;
    Ok(aggregate_votes(&votes, model.config().classes))
}

/// Runs whole-scan inference on matched `(volume, labels)` pairs and
/// scores the predictions against the labels.
pub fn evaluate_scans(
    model: &Model,
    scans: &[(Volume, LabelSet)],
    stride: [usize; 3],
    threshold: f64,
) -> Result<(Vec<ScanPrediction>, MetricsReport), InferError> {
    let mut preds = Vec::with_capacity(scans.len());
    for (vol, _) in scans {
        preds.push(infer_scan(model, vol, stride, threshold)?);
    }
    let truths: Vec<LabelSet> = scans.iter().map(|(_, l)| l.clone()).collect();
    let report = identification_metrics(&preds, &truths)?;
    Ok((preds, report))
}

// ---------------------------------------------------------------------------
// Prediction files

/// One line per class: `<class_name> <present 0|1> <x_mm> <y_mm> <z_mm>
/// <confidence>`. Floats use the shortest round-trip form, so a written
/// file parses back to identical values.
pub fn render_predictions(pred: &ScanPrediction) -> String {
    let mut out = String::new();
    for (i, c) in pred.classes.iter().enumerate() {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            class_name(i),
            u8::from(c.present),
            c.world[0],
            c.world[1],
            c.world[2],
            c.confidence
        ));
    }
    out
}

pub fn write_predictions(pred: &ScanPrediction, path: impl AsRef<Path>) -> Result<(), InferError> {
    std::fs::write(path, render_predictions(pred))?;
    Ok(())
}

/// Reads a prediction file written by [`write_predictions`]. The raw
/// votes are not part of the format, so they come back empty.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<ScanPrediction, InferError> {
    let path = path.as_ref();
    let err = |detail: String| InferError::Format { path: path.display().to_string(), detail };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut classes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(format!("line {}: want 6 fields, got {}", ln + 1, fields.len())));
        }
        let want = class_name(classes.len());
        if fields[0] != want {
            return Err(err(format!("line {}: expected class {want}, got {}", ln + 1, fields[0])));
        }
        let present = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("line {}: bad present flag {other:?}", ln + 1))),
        };
        let mut nums = [0.0; 4];
        for (k, f) in fields[2..].iter().enumerate() {
            nums[k] = f
                .parse::<f64>()
                .map_err(|_| err(format!("line {}: bad number {f:?}", ln + 1)))?;
        }
        classes.push(ClassPrediction {
            present,
            world: [nums[0], nums[1], nums[2]],
            confidence: nums[3],
        });
        if classes.len() > crate::data::CLASS_NAMES.len() {
            return Err(err("more lines than vertebra classes".into()));
        }
    }
    if classes.is_empty() {
        return Err(err("no prediction lines".into()));
    }
    Ok(ScanPrediction { classes, votes: Vec::new() })
}
