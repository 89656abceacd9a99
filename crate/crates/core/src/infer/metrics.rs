//! Evaluation: identification rate and localization error against
//! ground-truth labels (with a per-region breakdown), and classification
//! quality as mean average precision over ranked presence probabilities.

use super::{InferError, ScanPrediction};
use crate::data::{LabelSet, Region};

/// A ground-truth vertebra counts as identified only when the nearest
/// estimate (over all predicted classes) has the correct class and lies
/// closer than this, in world mm.
pub const ID_THRESHOLD_MM: f64 = 20.0;

/// Identification and localization quality for one scope (the whole
/// spine, or one anatomical region).
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeMetrics {
    /// `"ALL"`, `"Cer"`, `"Tho"`, `"Lum"`, or `"Sac"`.
    pub scope: &'static str,
    /// Ground-truth vertebrae in this scope.
    pub truths: usize,
    /// How many of them were identified.
    pub identified: usize,
    /// `100 * identified / truths`, absent when the scope has no truths.
    pub id_rate: Option<f64>,
    /// Count of measured same-class distances.
    pub errors: usize,
    /// Mean / population standard deviation of those distances (mm);
    /// absent when nothing was measurable.
    pub mean_mm: Option<f64>,
    pub std_mm: Option<f64>,
}

/// Identification/localization metrics over the whole spine and per
/// region (the four regions partition the classes).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub all: ScopeMetrics,
    pub regions: Vec<ScopeMetrics>,
}

impl MetricsReport {
    /// Scope rows in reporting order: ALL, then the four regions.
    pub fn rows(&self) -> Vec<&ScopeMetrics> {
        std::iter::once(&self.all).chain(self.regions.iter()).collect()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn region_slot(class: usize) -> usize {
    match Region::of(class) {
        Region::Cervical => 1,
        Region::Thoracic => 2,
        Region::Lumbar => 3,
        Region::Sacral => 4,
    }
}

/// Scores matched scan lists.
///
/// Per ground-truth vertebra, the nearest predicted centroid over all
/// present classes is found (ties broken toward the lower class index);
/// the vertebra is identified iff that estimate carries the correct class
/// and sits closer than [`ID_THRESHOLD_MM`]. The localization-error
/// statistic collects the distance from each predicted class to its
/// same-class label, restricted to classes present in both the prediction
/// and the truth; predictions with no ground-truth counterpart affect
/// neither statistic. All distances are world mm, independent of voxel
/// spacing.
pub fn identification_metrics(
    preds: &[ScanPrediction],
    truths: &[LabelSet],
) -> Result<MetricsReport, InferError> {
    if preds.len() != truths.len() {
        return Err(InferError::Config(format!(
            "{} predictions for {} label sets",
            preds.len(),
            truths.len()
        )));
    }
    let mut truth_count = [0usize; 5];
    let mut identified = [0usize; 5];
    let mut errors: [Vec<f64>; 5] = Default::default();

    for (pred, truth) in preds.iter().zip(truths) {
        let candidates: Vec<(usize, [f64; 3])> = pred
            .classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.present)
            .map(|(i, c)| (i, c.world))
            .collect();
        for label in truth.labels() {
            let slot = region_slot(label.class);
            truth_count[0] += 1;
            truth_count[slot] += 1;

            let nearest = candidates
                .iter()
                .map(|&(class, w)| (class, dist(w, label.world)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((class, d)) = nearest {
                if class == label.class && d < ID_THRESHOLD_MM {
                    identified[0] += 1;
                    identified[slot] += 1;
                }
            }

            if let Some(cp) = pred.classes.get(label.class) {
                if cp.present {
                    let d = dist(cp.world, label.world);
                    errors[0].push(d);
                    errors[slot].push(d);
                }
            }
        }
    }

    let build = |slot: usize, scope: &'static str| -> ScopeMetrics {
        let errs = &errors[slot];
        let (mean, std) = if errs.is_empty() {
            (None, None)
        } else {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        ScopeMetrics {
            scope,
            truths: truth_count[slot],
            identified: identified[slot],
            id_rate: (truth_count[slot] > 0)
                .then(|| 100.0 * identified[slot] as f64 / truth_count[slot] as f64),
            errors: errs.len(),
            mean_mm: mean,
            std_mm: std,
        }
    };

    Ok(MetricsReport {
        all: build(0, "ALL"),
        regions: Region::ALL
            .iter()
            .enumerate()
            .map(|(i, r)| build(i + 1, r.tag()))
            .collect(),
    })
}

/// Average precision per class and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// Per-class average precision; `None` marks a skipped class (no
    /// positive examples to rank).
    pub per_class: Vec<Option<f64>>,
    /// Mean over the evaluated classes; `None` when every class was
    /// skipped.
    pub map: Option<f64>,
}

impl ApReport {
    /// Indices of the classes that had no positives.
    pub fn skipped(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(i, ap)| ap.is_none().then_some(i))
            .collect()
    }
}

/// Average precision over ranked probabilities, per class.
///
/// Rows are crops: `probs[k][c]` is the predicted presence probability of
/// class `c` in crop `k` and `truth[k][c]` whether it is actually there.
/// Each class's crops are ranked by descending probability (stable for
/// ties) and AP is the mean of the precisions at each positive's rank —
/// the step-wise, all-thresholds area under the precision-recall curve.
/// Classes with no positives are skipped and reported, not averaged as
/// zeros.
pub fn mean_average_precision(
    probs: &[Vec<f64>],
    truth: &[Vec<bool>],
) -> Result<ApReport, InferError> {
    if probs.len() != truth.len() {
        return Err(InferError::Config(format!(
            "{} probability rows for {} truth rows",
            probs.len(),
            truth.len()
        )));
    }
    if probs.is_empty() {
        return Err(InferError::Config("no crops to evaluate".into()));
    }
    let classes = probs[0].len();
    for (k, (p, t)) in probs.iter().zip(truth).enumerate() {
        if p.len() != classes || t.len() != classes {
            return Err(InferError::Config(format!(
                "crop {k} has {} probabilities and {} truths, expected {classes}",
                p.len(),
                t.len()
            )));
        }
    }

    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let mut items: Vec<(f64, bool)> =
                probs.iter().zip(truth).map(|(p, t)| (p[c], t[c])).collect();
            items.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut tp = 0usize;
            let mut precision_sum = 0.0;
            for (rank0, &(_, positive)) in items.iter().enumerate() {
                if positive {
                    tp += 1;
                    precision_sum += tp as f64 / (rank0 + 1) as f64;
                }
            }
            (tp > 0).then(|| precision_sum / tp as f64)
        })
        .collect();

    let evaluated: Vec<f64> = per_class.iter().filter_map(|ap| *ap).collect();
    let map = (!evaluated.is_empty())
        .then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    Ok(ApReport { per_class, map })
}

// ---------------------------------------------------------------------------
// Rendering

/// Header of the metrics CSV; one row per scope follows.
pub const METRICS_HEADER: &str = "scope,id_rate,mean_mm,std_mm";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the report as CSV. Scopes without data leave their cells
/// empty. Floats use the shortest round-trip form.
pub fn render_metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in report.rows() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.scope,
            opt_cell(row.id_rate),
            opt_cell(row.mean_mm),
            opt_cell(row.std_mm)
        ));
    }
    out
}

fn table_cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "-".into(),
    }
}

/// Renders the report as an aligned text table, with an optional mean
/// average precision footer.
pub fn render_metrics_table(report: &MetricsReport, map: Option<f64>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
        "scope", "vertebrae", "found", "id rate %", "mean mm", "std mm"
    ));
    for row in report.rows() {
        out.push_str(&format!(
            "{:<6} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
            row.scope,
            row.truths,
            row.identified,
            table_cell(row.id_rate, 1),
            table_cell(row.mean_mm, 2),
            table_cell(row.std_mm, 2)
        ));
    }
    if let Some(m) = map {
        out.push_str(&format!("mAP %: {:.1}\n", 100.0 * m));
    }
    out
}
