//! Joint multi-label classification + localization objective.
//!
//! Each crop is scored by two terms built on the same tape:
//!
//! * a balanced cross-entropy over per-vertebra presence probabilities,
//!   where positive classes are up-weighted by a balance factor to offset
//!   how few vertebrae appear in any one crop, and
//! * a masked Huber (smooth-L1) penalty on the regressed centroid
//!   coordinates, applied only to vertebrae that are actually present.
//!
//! Coordinate residuals are in crop-local voxel units, so the Huber
//! transition at |x| = 1 sits at a one-voxel error. Per-crop losses sum over
//! vertebrae; averaging over a batch is the training loop's concern.

use thiserror::Error;

use crate::tensor::{Element, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("crop target: {0}")]
    InvalidTarget(String),
    #[error("loss config: {0}")]
    InvalidConfig(String),
}

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Up-weighting of present-vertebra log terms in the classification
    /// loss. Sensible values are 2 to 4.
    pub balance: f64,
    /// Scale of the localization term relative to classification.
    pub lambda: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before the logarithm so
    /// saturated predictions keep the loss finite.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { balance: 3.0, lambda: 0.4, eps: 1e-7 }
    }
}

impl LossConfig {
    /// Hard invariants. Violations are errors; soft ranges go through
    /// [`LossConfig::warnings`].
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(LossError::InvalidConfig(format!(
                "eps must lie in (0, 0.5), got {}",
                self.eps
            )));
        }
        if !self.balance.is_finite() || self.balance <= 0.0 {
            return Err(LossError::InvalidConfig(format!(
                "balance must be positive and finite, got {}",
                self.balance
            )));
        }
        Ok(())
    }

    /// Advisory messages for values outside the recommended ranges.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.balance < 2.0 || self.balance > 4.0 {
            out.push(format!(
                "balance factor {} is outside the recommended range [2, 4]",
                self.balance
            ));
        }
        out
    }
}

/// Supervision for one crop: which of the `N` vertebra classes are present,
/// and the centroid of each present one in crop-local voxel units. Absent
/// entries carry no meaningful coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CropTarget {
    present: Vec<bool>,
    coords: Vec<[f64; 3]>,
}

impl CropTarget {
    /// `coords[n]` must be finite wherever `present[n]`; absent entries are
    /// stored as given but never read.
    pub fn new(present: Vec<bool>, coords: Vec<[f64; 3]>) -> Result<Self, LossError> {
        if present.len() != coords.len() {
            return Err(LossError::InvalidTarget(format!(
                "{} presence flags but {} coordinate rows",
                present.len(),
                coords.len()
            )));
        }
        for (n, (&p, c)) in present.iter().zip(&coords).enumerate() {
            if p && c.iter().any(|v| !v.is_finite()) {
                return Err(LossError::InvalidTarget(format!(
                    "class {n} is present but its coordinates {c:?} are not finite"
                )));
            }
        }
        Ok(CropTarget { present, coords })
    }

    /// A target with every class absent.
    pub fn empty(classes: usize) -> Self {
        CropTarget { present: vec![false; classes], coords: vec![[0.0; 3]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.present.len()
    }

    pub fn is_present(&self, n: usize) -> bool {
        self.present[n]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Centroid of class `n`; only meaningful when [`CropTarget::is_present`].
    pub fn coord(&self, n: usize) -> [f64; 3] {
        self.coords[n]
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Huber penalty: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`. Continuous with
/// continuous first derivative at the transition.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Balanced multi-label cross-entropy over presence probabilities:
/// present classes contribute `-B * ln(p_n)`, absent ones `-ln(1 - p_n)`.
/// Probabilities are clamped to `[eps, 1 - eps]` first, so the result is
/// finite even for saturated inputs. Returns a `[1]` tensor.
pub fn classification_loss<E: Element>(
    tape: &mut Tape<E>,
    probs: TensorId,
    target: &CropTarget,
    cfg: &LossConfig,
) -> Result<TensorId, LossError> {
    cfg.validate()?;
    let n = target.classes();
    if tape.shape(probs) != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "classification_loss",
            detail: format!("expected [{n}] probabilities, got {:?}", tape.shape(probs)),
        }
        .into());
    }
    let clamped = tape.clamp(probs, E::lit(cfg.eps), E::lit(1.0 - cfg.eps))?;

    // -B * u_n picks out present classes of ln(p); -(1 - u_n) picks out
    // absent classes of ln(1 - p).
    let pos_w: Vec<E> =
        target.present().iter().map(|&p| if p { E::lit(-cfg.balance) } else { E::ZERO }).collect();
    let neg_w: Vec<E> =
        target.present().iter().map(|&p| if p { E::ZERO } else { E::lit(-1.0) }).collect();

    let ln_p = tape.ln(clamped);
    let pos_mask = tape.constant(pos_w, vec![n])?;
    let pos = tape.mul(ln_p, pos_mask)?;
    let pos = tape.sum(pos);

    let neg_p = tape.scale(clamped, E::lit(-1.0));
    let one_minus = tape.add_scalar(neg_p, E::ONE);
    let ln_q = tape.ln(one_minus);
    let neg_mask = tape.constant(neg_w, vec![n])?;
    let neg = tape.mul(ln_q, neg_mask)?;
    let neg = tape.sum(neg);

    Ok(tape.add(pos, neg)?)
}

/// Masked Huber penalty on regressed centroids: present classes contribute
/// `lambda * sum_axis smooth_l1(pred - target)`, absent classes contribute
/// exactly zero loss and zero gradient. Returns a `[1]` tensor.
pub fn localization_loss<E: Element>(
    tape: &mut Tape<E>,
    pred_coords: TensorId,
    target: &CropTarget,
    cfg: &LossConfig,
) -> Result<TensorId, LossError> {
    cfg.validate()?;
    let n = target.classes();
    if tape.shape(pred_coords) != [n, 3] {
        return Err(TensorError::ShapeMismatch {
            op: "localization_loss",
            detail: format!("expected [{n}, 3] coordinates, got {:?}", tape.shape(pred_coords)),
        }
        .into());
    }
    if tape.data(pred_coords).iter().any(|v| v.is_nan()) {
        return Err(LossError::InvalidTarget("predicted coordinates contain NaN".into()));
    }

    let mut tgt = Vec::with_capacity(n * 3);
    let mut mask = Vec::with_capacity(n * 3);
    for c in 0..n {
        let w = if target.is_present(c) { E::lit(cfg.lambda) } else { E::ZERO };
        let v = target.coord(c);
        for axis in 0..3 {
            // Absent rows are masked out, so their target value is moot;
            // zero keeps the residual finite.
            tgt.push(if target.is_present(c) { E::lit(v[axis]) } else { E::ZERO });
            mask.push(w);
        }
    }
    let tgt = tape.constant(tgt, vec![n, 3])?;
    let mask = tape.constant(mask, vec![n, 3])?;
    let diff = tape.sub(pred_coords, tgt)?;
    let huber = tape.smooth_l1(diff);
    let masked = tape.mul(huber, mask)?;
    Ok(tape.sum(masked))
}

/// Joint objective: the exact sum of the two branch losses.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    l_cls: TensorId,
    l_reg: TensorId,
) -> Result<TensorId, LossError> {
    Ok(tape.add(l_cls, l_reg)?)
}
