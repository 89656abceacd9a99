//! The epoch loop: deterministic shuffling over pre-sampled crops,
//! batch-mean objectives, Adam updates, plateau scheduling, and best/last
//! checkpoint tracking.

use super::checkpoint::Checkpoint;
use super::optim::{adam_step, OptimizerState, PlateauScheduler};
use super::{config_err, EpochRow, Split, TrainConfig, TrainError};
use crate::data::Crop;
use crate::loss::{classification_loss, localization_loss, total_loss, CropTarget};
use crate::nn::params::Forward;
use crate::nn::{LocMode, Model};
use crate::tensor::{Tape, TensorId};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// ChaCha stream for the epoch shuffle; streams 0–3 belong to parameter
/// initialization, so one seed drives both without overlap.
pub(crate) const SHUFFLE_STREAM: u64 = 4;

/// What a finished (or resumed) run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the final epoch.
    pub last: Checkpoint,
    /// State after the epoch with the lowest monitored loss (validation
    /// when present, else training), over the epochs this call ran.
    pub best: Checkpoint,
    /// The monitored loss of `best` (infinite if no epoch ran).
    pub best_monitor: f64,
    /// One row per split per epoch, training split first.
    pub log: Vec<EpochRow>,
}

/// Fresh training state for a configuration: initialized parameters,
/// zeroed optimizer moments, an untriggered scheduler, and the shuffle
/// generator at its starting position. Epoch 0.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let opt = OptimizerState::new(model.store(), cfg.lr, cfg.weight_decay);
    let sched = PlateauScheduler::new(cfg.patience, cfg.factor, cfg.min_lr, cfg.threshold);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    Ok(Checkpoint::snapshot(&model, &opt, &sched, &rng, 0))
}

/// Trains from scratch. See [`resume_with`] for the loop's contract.
pub fn train(
    cfg: &TrainConfig,
    train_crops: &[Crop],
    val_crops: &[Crop],
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, train_crops, val_crops, &mut |_| {})
}

/// [`train`] with a per-row callback (e.g. live progress printing).
pub fn train_with(
    cfg: &TrainConfig,
    train_crops: &[Crop],
    val_crops: &[Crop],
    on_row: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    let start = init_checkpoint(cfg)?;
    resume_with(start, cfg, train_crops, val_crops, on_row)
}

/// Continues a checkpoint. See [`resume_with`].
pub fn resume(
    start: Checkpoint,
    cfg: &TrainConfig,
    train_crops: &[Crop],
    val_crops: &[Crop],
) -> Result<TrainOutcome, TrainError> {
    resume_with(start, cfg, train_crops, val_crops, &mut |_| {})
}

/// Runs epochs `start.epoch + 1 ..= cfg.epochs`, continuing `start`
/// exactly: given the same configuration and crops, an interrupted run
/// resumed from its last checkpoint reproduces the uninterrupted run's
/// losses and parameters to the last bit.
///
/// Each epoch shuffles the fixed crop list with the checkpointed
/// generator, walks it in batches of `cfg.batch_size`, and applies one
/// Adam update per batch on the batch-mean objective. Epoch means of the
/// objective and its two parts are logged per split; the learning rate
/// column shows the rate in effect during that epoch (the scheduler runs
/// at epoch end on the monitored loss). A non-finite model output or loss
/// aborts with the last finished epoch's state.
pub fn resume_with(
    start: Checkpoint,
    cfg: &TrainConfig,
    train_crops: &[Crop],
    val_crops: &[Crop],
    on_row: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if start.config != cfg.model {
        return Err(config_err("checkpoint was built for a different model configuration"));
    }
    for (what, crops) in [("training", train_crops), ("validation", val_crops)] {
        for crop in crops {
            if crop.volume.extents != cfg.model.crop {
                return Err(config_err(format!(
                    "a {what} crop has extents {:?}, the model expects {:?}",
                    crop.volume.extents, cfg.model.crop
                )));
            }
            if crop.target.classes() != cfg.model.classes {
                return Err(config_err(format!(
                    "a {what} crop is labeled over {} classes, the model has {}",
                    crop.target.classes(),
                    cfg.model.classes
                )));
            }
        }
    }
    if start.epoch > cfg.epochs {
        return Err(config_err(format!(
            "checkpoint is already at epoch {}, beyond the requested {}",
            start.epoch, cfg.epochs
        )));
    }
    if cfg.epochs > start.epoch && train_crops.is_empty() {
        return Err(config_err("no training crops"));
    }

    let mut model = start.build_model()?;
    let mut opt = start.optimizer.clone();
    let mut sched = start.scheduler.clone();
    let mut rng = start.rng.restore();
    let mut log: Vec<EpochRow> = Vec::new();
    let mut best = start.clone();
    let mut best_monitor = f64::INFINITY;
    let mut last = start;

    for epoch in (last.epoch + 1)..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_crops.len()).collect();
        order.shuffle(&mut rng);
        let lr_epoch = opt.lr;
        let mut sums = [0.0f64; 3];

        for chunk in order.chunks(cfg.batch_size) {
            let mut fwd = model.begin();
            let mut parts = Vec::with_capacity(chunk.len());
            for &ix in chunk {
                match crop_objective(&model, &mut fwd, &train_crops[ix], cfg)? {
                    Some(p) => parts.push(p),
                    None => {
                        return Err(TrainError::Diverged { epoch, last_good: Box::new(last) })
                    }
                }
            }
            let mut acc = parts[0].0;
            for &(t, _, _) in &parts[1..] {
                acc = fwd.tape.add(acc, t)?;
            }
            let batch_loss = if parts.len() > 1 {
                fwd.tape.scale(acc, 1.0 / parts.len() as f64)
            } else {
                acc
            };
            if !fwd.tape.value(batch_loss).is_finite() {
                return Err(TrainError::Diverged { epoch, last_good: Box::new(last) });
            }
            for &(t, c, r) in &parts {
                sums[0] += fwd.tape.value(t);
                sums[1] += fwd.tape.value(c);
                sums[2] += fwd.tape.value(r);
            }
            fwd.tape.backward(batch_loss)?;
            let grads: Vec<Vec<f64>> =
                model.store().iter().map(|(id, _)| fwd.grad_of(id)).collect();
            drop(fwd);
            adam_step(model.store_mut(), &grads, &mut opt)?;
        }

        let n = train_crops.len() as f64;
        let train_row = EpochRow {
            epoch,
            split: Split::Train,
            loss_total: sums[0] / n,
            loss_cls: sums[1] / n,
            loss_reg: sums[2] / n,
            lr: lr_epoch,
        };
        on_row(&train_row);
        log.push(train_row);

        let monitor = if val_crops.is_empty() {
            sums[0] / n
        } else {
            match eval_split(&model, val_crops, cfg)? {
                Some((vt, vc, vr)) => {
                    let val_row = EpochRow {
                        epoch,
                        split: Split::Val,
                        loss_total: vt,
                        loss_cls: vc,
                        loss_reg: vr,
                        lr: lr_epoch,
                    };
                    on_row(&val_row);
                    log.push(val_row);
                    vt
                }
                None => return Err(TrainError::Diverged { epoch, last_good: Box::new(last) }),
            }
        };
        if !monitor.is_finite() {
            return Err(TrainError::Diverged { epoch, last_good: Box::new(last) });
        }

        opt.lr = sched.step(monitor, opt.lr);
        last = Checkpoint::snapshot(&model, &opt, &sched, &rng, epoch);
        if monitor < best_monitor {
            best_monitor = monitor;
            best = last.clone();
        }
    }

    Ok(TrainOutcome { last, best, best_monitor, log })
}

/// Forward pass plus objective for one crop on the shared batch tape.
/// Returns `(total, classification, localization)` loss tensors, or
/// `None` when the model's outputs are non-finite (the divergence signal).
fn crop_objective(
    model: &Model,
    fwd: &mut Forward<'_>,
    crop: &Crop,
    cfg: &TrainConfig,
) -> Result<Option<(TensorId, TensorId, TensorId)>, TrainError> {
    let [d, h, w] = crop.volume.extents;
    let data: Vec<f64> = crop.volume.data.iter().map(|&v| v as f64).collect();
    let input = fwd.tape.constant(data, vec![1, d, h, w])?;
    let out = model.forward(fwd, input)?;
    if fwd.tape.data(out.logits).iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let reg = match cfg.model.loc_mode {
        LocMode::Integral | LocMode::DirectFc => {
            let coords = out.coords.expect("coordinate modes emit coordinates");
            if fwd.tape.data(coords).iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            localization_loss(&mut fwd.tape, coords, &crop.target, &cfg.loss)?
        }
        LocMode::HeatmapArgmax => {
            let stack = out.heatmaps.expect("heatmap mode emits heatmaps");
            if fwd.tape.data(stack.probs).iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            heatmap_matching_loss(&mut fwd.tape, stack.probs, &crop.target, cfg)?
        }
    };
    let cls = classification_loss(&mut fwd.tape, out.probs, &crop.target, &cfg.loss)?;
    let total = total_loss(&mut fwd.tape, cls, reg)?;
    Ok(Some((total, cls, reg)))
}

/// Localization objective for the argmax-decoded variant, which has no
/// differentiable coordinates: cross-entropy between each present class's
/// normalized heatmap and a unit-mass Gaussian centered on its label. Uses
/// the same weight as the coordinate penalty. Its floor is the target's
/// entropy rather than zero.
fn heatmap_matching_loss(
    tape: &mut Tape<f64>,
    probs: TensorId,
    target: &CropTarget,
    cfg: &TrainConfig,
) -> Result<TensorId, TrainError> {
    let shape = tape.shape(probs).to_vec();
    let tgt = gaussian_stack(&shape, target, cfg.heatmap_sigma);
    let tgt = tape.constant(tgt, shape)?;
    let clamped = tape.clamp(probs, cfg.loss.eps, 1.0)?;
    let lnp = tape.ln(clamped);
    let weighted = tape.mul(lnp, tgt)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -cfg.loss.lambda))
}

/// Per-class target heatmaps `[N, D, H, W]`: absent classes are all zero;
/// each present class is a Gaussian of width `sigma` (voxels) around its
/// crop-local coordinate, normalized to sum to one.
fn gaussian_stack(shape: &[usize], target: &CropTarget, sigma: f64) -> Vec<f64> {
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; n * d * h * w];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for c in 0..n {
        if !target.is_present(c) {
            continue;
        }
        let [x, y, z] = target.coord(c);
        let base = c * d * h * w;
        let mut sum = 0.0;
        for zi in 0..d {
            let dz = zi as f64 - z;
            for yi in 0..h {
                let dy = yi as f64 - y;
                for xi in 0..w {
                    let dx = xi as f64 - x;
                    let g = (-(dx * dx + dy * dy + dz * dz) * inv).exp();
                    out[base + (zi * h + yi) * w + xi] = g;
                    sum += g;
                }
            }
        }
        for v in &mut out[base..base + d * h * w] {
            *v /= sum;
        }
    }
    out
}

/// Mean losses over a split without gradients. `None` when any value is
/// non-finite.
fn eval_split(
    model: &Model,
    crops: &[Crop],
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64, f64)>, TrainError> {
    let mut sums = [0.0f64; 3];
    for crop in crops {
        let mut fwd = model.begin();
        match crop_objective(model, &mut fwd, crop, cfg)? {
            Some((t, c, r)) => {
                let v = fwd.tape.value(t);
                if !v.is_finite() {
                    return Ok(None);
                }
                sums[0] += v;
                sums[1] += fwd.tape.value(c);
                sums[2] += fwd.tape.value(r);
            }
            None => return Ok(None),
        }
    }
    let n = crops.len() as f64;
    Ok(Some((sums[0] / n, sums[1] / n, sums[2] / n)))
}
