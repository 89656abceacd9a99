//! Release-gate checks. Each test prints one `criterion N (...): pass/FAIL`
//! line (visible with `--nocapture`; shown automatically on failure).
//!
//! The two training fixtures are expensive and shared: the full synthetic
//! end-to-end run backs criterion 6, and a smaller four-way comparison run
//! (three localization modes plus a pooled classification head, identical
//! data and seed) backs criteria 7 and 8.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use vertlab::data::{
    generate_phantom, prepare_scan, read_labels, read_volume, sample_crops, write_labels,
    write_volume, Crop, Label, LabelSet, PhantomSpec, Volume, TARGET_SPACING_MM,
};
use vertlab::infer::{
    default_stride, evaluate_scans, identification_metrics, mean_average_precision,
    read_predictions, render_metrics_table, write_predictions, ClassPrediction, MetricsReport,
    ScanPrediction, DEFAULT_VOTE_THRESHOLD,
};
use vertlab::integral::{hard_argmax, integrate_coordinates, soft_argmax, CoordinateGrid};
use vertlab::loss::{
    classification_loss, localization_loss, smooth_l1, total_loss, CropTarget, LossConfig,
};
use vertlab::nn::lstm::BiLstm;
use vertlab::nn::params::{Forward, Init, ParamId, ParamStore};
use vertlab::nn::{ClsMode, LocMode, Model, ModelConfig};
use vertlab::tensor::gradcheck::{op_gradient_suite, rel_err, MODEL_TOLERANCE, OP_TOLERANCE};
use vertlab::tensor::Tape;
use vertlab::train::{
    load_checkpoint, render_log_csv, resume, save_checkpoint, train, TrainConfig,
};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "pass" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} — {detail}");
    assert!(pass, "criterion {n} ({name}): {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// Generates `n` phantoms and prepares each for the network (intensity
/// clamp + normalization + isotropic resampling).
fn prepared_phantoms(n: usize, seed: u64) -> Vec<(Volume, LabelSet)> {
    let spec = PhantomSpec::default();
    (0..n)
        .map(|i| {
            let (vol, labels) = generate_phantom(&spec, seed + i as u64).expect("generation");
            prepare_scan(&vol, &labels, TARGET_SPACING_MM).expect("preparation")
        })
        .collect()
}

struct FitScore {
    train_wall: Duration,
    report: MetricsReport,
    /// Mean average precision over the held-out crops.
    val_map: Option<f64>,
}

/// Trains `cfg` on all but the last `val_n` scans and scores the best
/// checkpoint on the held-out scans (whole-scan metrics) and held-out
/// crops (ranked-probability classification quality).
fn fit_and_score(
    scans: &[(Volume, LabelSet)],
    cfg: &TrainConfig,
    val_n: usize,
    crops_per_scan: usize,
) -> FitScore {
    let bias = 0.8;
    let (train_scans, val_scans) = scans.split_at(scans.len() - val_n);
    let model_cfg = &cfg.model;
    let train_crops = sample_crops(
        train_scans,
        model_cfg.crop,
        model_cfg.classes,
        crops_per_scan,
        bias,
        cfg.seed,
    )
    .expect("training crops");
    let val_crops = sample_crops(
        val_scans,
        model_cfg.crop,
        model_cfg.classes,
        crops_per_scan,
        bias,
        cfg.seed + train_crops.len() as u64,
    )
    .expect("validation crops");

    let t0 = Instant::now();
    let outcome = train(cfg, &train_crops, &val_crops).expect("training");
    let train_wall = t0.elapsed();

    let model = outcome.best.build_model().expect("checkpoint rebuild");
    let (_, report) = evaluate_scans(
        &model,
        val_scans,
        default_stride(model_cfg.crop),
        DEFAULT_VOTE_THRESHOLD,
    )
    .expect("held-out evaluation");

    // Ranked-probability quality is scored on a dedicated, larger crop
    // sample from the held-out scans so direction comparisons have
    // statistical room beyond the training-time validation crops.
    let eval_crops = sample_crops(
        val_scans,
        model_cfg.crop,
        model_cfg.classes,
        8,
        bias,
        cfg.seed + 777,
    )
    .expect("evaluation crops");

    FitScore { train_wall, report, val_map: crop_map(&model, &eval_crops) }
}

/// Ranked-probability classification quality of `model` on fixed crops.
fn crop_map(model: &Model, crops: &[Crop]) -> Option<f64> {
    let mut probs = Vec::with_capacity(crops.len());
    let mut truth = Vec::with_capacity(crops.len());
    for crop in crops {
        let mut fwd = model.begin();
        let [d, h, w] = crop.volume.extents;
        let data: Vec<f64> = crop.volume.data.iter().map(|&v| v as f64).collect();
        let x = fwd.tape.constant(data, vec![1, d, h, w]).expect("input");
        let out = model.forward(&mut fwd, x).expect("forward");
        probs.push(fwd.tape.data(out.probs).to_vec());
        truth.push(crop.target.present().to_vec());
    }
    mean_average_precision(&probs, &truth).expect("ranked precision").map
}

// The full end-to-end run: dataset size and thresholds declared for the
// synthetic task.
const DESK_SCANS: usize = 40;
const DESK_VAL: usize = 8;
const DESK_EPOCHS: usize = 15;
const DESK_CROPS_PER_SCAN: usize = 3;
const DESK_SEED: u64 = 0;

static DESK: OnceLock<FitScore> = OnceLock::new();

fn desk_run() -> &'static FitScore {
    DESK.get_or_init(|| {
        let scans = prepared_phantoms(DESK_SCANS, DESK_SEED);
        let mut cfg = TrainConfig::new(ModelConfig::desk());
        cfg.epochs = DESK_EPOCHS;
        cfg.seed = DESK_SEED;
        fit_and_score(&scans, &cfg, DESK_VAL, DESK_CROPS_PER_SCAN)
    })
}

// The four-way comparison run (smaller, identical across variants).
const CMP_SCANS: usize = 12;
const CMP_VAL: usize = 3;
const CMP_EPOCHS: usize = 8;
const CMP_CROPS_PER_SCAN: usize = 3;
const CMP_SEED: u64 = 101;

struct Comparison {
    integral: FitScore,
    direct_fc: FitScore,
    heatmap_argmax: FitScore,
    global_pool: FitScore,
}

static CMP: OnceLock<Comparison> = OnceLock::new();

fn comparison_run() -> &'static Comparison {
    CMP.get_or_init(|| {
        let scans = prepared_phantoms(CMP_SCANS, CMP_SEED);
        let run = |loc: LocMode, cls: ClsMode| {
            let mut model = ModelConfig::desk();
            model.loc_mode = loc;
            model.cls_mode = cls;
            let mut cfg = TrainConfig::new(model);
            cfg.epochs = CMP_EPOCHS;
            cfg.seed = CMP_SEED;
            fit_and_score(&scans, &cfg, CMP_VAL, CMP_CROPS_PER_SCAN)
        };
        Comparison {
            integral: run(LocMode::Integral, ClsMode::BiLstm),
            direct_fc: run(LocMode::DirectFc, ClsMode::BiLstm),
            heatmap_argmax: run(LocMode::HeatmapArgmax, ClsMode::BiLstm),
            global_pool: run(LocMode::Integral, ClsMode::GlobalPool),
        }
    })
}

// ---------------------------------------------------------------------------
// 1. Finite-difference audit: every op, then the whole tiny network.

#[test]
fn c01_finite_difference_audit() {
    let t0 = Instant::now();
    let checks = op_gradient_suite(0).expect("op audit");
    let worst_op = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let ops_pass = !checks.is_empty() && worst_op < OP_TOLERANCE;

    // Whole-network check on the smallest configuration: a smooth scalar
    // objective touching both heads, probed per parameter tensor.
    let mut model = Model::new(ModelConfig::tiny(), 9).expect("model");
    let [d, h, w] = model.config().crop;
    let classes = model.config().classes;
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let xdata: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coord_mask: Vec<f64> =
        (0..classes * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let logit_mask: Vec<f64> = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |model: &Model, want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut fwd = model.begin();
        let x = fwd.tape.constant(xdata.clone(), vec![1, d, h, w]).unwrap();
        let out = model.forward(&mut fwd, x).unwrap();
        let cm = fwd.tape.constant(coord_mask.clone(), vec![classes, 3]).unwrap();
        let wc = fwd.tape.mul(out.coords.unwrap(), cm).unwrap();
        let lm = fwd.tape.constant(logit_mask.clone(), vec![classes]).unwrap();
        let wl = fwd.tape.mul(out.probs, lm).unwrap();
        let sc = fwd.tape.sum(wc);
        let sl = fwd.tape.sum(wl);
        let y = fwd.tape.add(sc, sl).unwrap();
        let value = fwd.tape.value(y);
        if !want_grads {
            return (value, None);
        }
        fwd.tape.backward(y).unwrap();
        let grads =
            (0..model.store().len()).map(|i| fwd.grad_of(ParamId(i))).collect();
        (value, Some(grads))
    };

    let (_, grads) = objective(&model, true);
    let grads = grads.unwrap();
    let step = 1e-5;
    let mut worst_model = 0.0f64;
    let mut probed = 0usize;
    for pi in 0..model.store().len() {
        let numel = model.store().get(ParamId(pi)).data.len();
        // The strongest-gradient entry plus one random entry per tensor.
        let peak = (0..numel)
            .max_by(|&a, &b| grads[pi][a].abs().total_cmp(&grads[pi][b].abs()))
            .unwrap();
        let mut coords = vec![peak, rng.gen_range(0..numel)];
        coords.dedup();
        for c in coords {
            let orig = model.store().get(ParamId(pi)).data[c];
            model.store_mut().get_mut(ParamId(pi)).data[c] = orig + step;
            let (up, _) = objective(&model, false);
            model.store_mut().get_mut(ParamId(pi)).data[c] = orig - step;
            let (dn, _) = objective(&model, false);
            model.store_mut().get_mut(ParamId(pi)).data[c] = orig;
            worst_model = worst_model.max(rel_err(grads[pi][c], (up - dn) / (2.0 * step)));
            probed += 1;
        }
    }
    let wall = t0.elapsed();
    let pass =
        ops_pass && worst_model < MODEL_TOLERANCE && wall < Duration::from_secs(300);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops worst {worst_op:.2e} (< {OP_TOLERANCE:.0e}), network worst {worst_model:.2e} \
             over {probed} probes (< {MODEL_TOLERANCE:.0e}), {wall:.1?}",
            checks.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Brute-force oracles, 20 seeds per operation, 1e-10.

const ORACLE_TOL: f64 = 1e-10;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle shape mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_operation_oracles() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);

        // conv3d against a direct seven-loop sum.
        {
            let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let (d, h, w) =
                (rng.gen_range(3..6usize), rng.gen_range(3..6usize), rng.gen_range(3..6usize));
            let k = rng.gen_range(1..4usize).min(d).min(h).min(w);
            let stride = [rng.gen_range(1..3usize); 3];
            let pad = [rng.gen_range(0..2usize); 3];
            let x: Vec<f64> = (0..ci * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> =
                (0..co * ci * k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape: Tape<f64> = Tape::new();
            let xi = tape.constant(x.clone(), vec![ci, d, h, w]).unwrap();
            let wi = tape.constant(wt.clone(), vec![co, ci, k, k, k]).unwrap();
            let bi = tape.constant(b.clone(), vec![co]).unwrap();
            let out = tape.conv3d(xi, wi, bi, stride, pad).unwrap();
            let got = tape.data(out).to_vec();
            let os = tape.shape(out).to_vec();

            let (od, oh, ow) = (os[1], os[2], os[3]);
            let mut want = vec![0.0; co * od * oh * ow];
            for c_out in 0..co {
                for z in 0..od {
                    for y in 0..oh {
                        for xq in 0..ow {
                            let mut acc = b[c_out];
                            for c_in in 0..ci {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (z * stride[0] + kz) as isize - pad[0] as isize;
                                            let iy = (y * stride[1] + ky) as isize - pad[1] as isize;
                                            let ix = (xq * stride[2] + kx) as isize - pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= w {
                                                continue;
                                            }
                                            acc += x[((c_in * d + iz) * h + iy) * w + ix]
                                                * wt[(((c_out * ci + c_in) * k + kz) * k + ky) * k
                                                    + kx];
                                        }
                                    }
                                }
                            }
                            want[((c_out * od + z) * oh + y) * ow + xq] = acc;
                        }
                    }
                }
            }
            worst = worst.max(max_abs_diff(&got, &want));
        }

        // maxpool3d against direct window maxima.
        {
            let c = rng.gen_range(1..3usize);
            let (d, h, w) =
                (rng.gen_range(2..6usize), rng.gen_range(2..6usize), rng.gen_range(2..6usize));
            let win = [
                rng.gen_range(1..=d.min(3)),
                rng.gen_range(1..=h.min(3)),
                rng.gen_range(1..=w.min(3)),
            ];
            let stride = [rng.gen_range(1..3usize); 3];
            let x: Vec<f64> = (0..c * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let xi = tape.constant(x.clone(), vec![c, d, h, w]).unwrap();
            let out = tape.maxpool3d(xi, win, stride).unwrap();
            let got = tape.data(out).to_vec();
            let os = tape.shape(out).to_vec();
            let (od, oh, ow) = (os[1], os[2], os[3]);
            let mut want = Vec::with_capacity(got.len());
            for cc in 0..c {
                for z in 0..od {
                    for y in 0..oh {
                        for xq in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for kz in 0..win[0] {
                                for ky in 0..win[1] {
                                    for kx in 0..win[2] {
                                        best = best.max(
                                            x[((cc * d + z * stride[0] + kz) * h
                                                + y * stride[1]
                                                + ky)
                                                * w
                                                + xq * stride[2]
                                                + kx],
                                        );
                                    }
                                }
                            }
                            want.push(best);
                        }
                    }
                }
            }
            worst = worst.max(max_abs_diff(&got, &want));
        }

        // linear against a direct matrix-vector product.
        {
            let (m, fin, fout) =
                (rng.gen_range(1..4usize), rng.gen_range(1..5usize), rng.gen_range(1..5usize));
            let x: Vec<f64> = (0..m * fin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..fout * fin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..fout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let xi = tape.constant(x.clone(), vec![m, fin]).unwrap();
            let wi = tape.constant(wt.clone(), vec![fout, fin]).unwrap();
            let bi = tape.constant(b.clone(), vec![fout]).unwrap();
            let out = tape.linear(xi, wi, Some(bi)).unwrap();
            let got = tape.data(out).to_vec();
            let mut want = vec![0.0; m * fout];
            for r in 0..m {
                for j in 0..fout {
                    let mut acc = b[j];
                    for i in 0..fin {
                        acc += x[r * fin + i] * wt[j * fin + i];
                    }
                    want[r * fout + j] = acc;
                }
            }
            worst = worst.max(max_abs_diff(&got, &want));
        }

        // One bidirectional recurrent step against the gate equations.
        {
            let (input, hidden) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
            let mut store = ParamStore::new();
            let mut init = Init::branch(seed, 0);
            let cell = BiLstm::build(&mut init, &mut store, "t", input, hidden);
            let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut fwd = Forward::new(&store);
            let seq = fwd.tape.constant(x.clone(), vec![1, input]).unwrap();
            let out = cell.forward(&mut fwd, seq).unwrap();
            let got = fwd.tape.data(out).to_vec();

            let by_name = |suffix: &str| -> Vec<f64> {
                store
                    .iter()
                    .find(|(_, p)| p.name == format!("t.{suffix}"))
                    .map(|(_, p)| p.data.clone())
                    .expect("parameter present")
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let dir = |prefix: &str| -> Vec<f64> {
                let w_ih = by_name(&format!("{prefix}.w_ih"));
                let bias = by_name(&format!("{prefix}.bias"));
                // Zero initial state: the hidden-to-hidden term vanishes.
                let gate = |g: usize, j: usize| -> f64 {
                    let row = g * hidden + j;
                    bias[row]
                        + (0..input).map(|i| w_ih[row * input + i] * x[i]).sum::<f64>()
                };
                (0..hidden)
                    .map(|j| {
                        let i = sig(gate(0, j));
                        let g = gate(2, j).tanh();
                        let o = sig(gate(3, j));
                        let c = i * g;
                        o * c.tanh()
                    })
                    .collect()
            };
            let mut want = dir("fwd");
            want.extend(dir("bwd"));
            worst = worst.max(max_abs_diff(&got, &want));
        }

        // softmax against shifted exponentials.
        {
            let n = rng.gen_range(2..7usize);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let xi = tape.constant(x.clone(), vec![n]).unwrap();
            let out = tape.softmax(xi, &[0]).unwrap();
            let got = tape.data(out).to_vec();
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let want: Vec<f64> = exps.iter().map(|e| e / z).collect();
            worst = worst.max(max_abs_diff(&got, &want));
        }

        // Coordinate integration against the direct expectation.
        {
            let n = rng.gen_range(1..3usize);
            let (d, h, w) =
                (rng.gen_range(2..5usize), rng.gen_range(2..5usize), rng.gen_range(2..5usize));
            let mut p: Vec<f64> = (0..n * d * h * w).map(|_| rng.gen_range(0.01..1.0)).collect();
            for row in p.chunks_mut(d * h * w) {
                let z: f64 = row.iter().sum();
                for v in row {
                    *v /= z;
                }
            }
            let grid = CoordinateGrid::shared(d, h, w);
            let mut tape: Tape<f64> = Tape::new();
            let pi = tape.constant(p.clone(), vec![n, d, h, w]).unwrap();
            let out = integrate_coordinates(&mut tape, pi, &grid).unwrap();
            let got = tape.data(out).to_vec();
            let mut want = vec![0.0; n * 3];
            for row in 0..n {
                for z in 0..d {
                    for y in 0..h {
                        for xq in 0..w {
                            let pv = p[((row * d + z) * h + y) * w + xq];
                            want[row * 3] += pv * xq as f64;
                            want[row * 3 + 1] += pv * y as f64;
                            want[row * 3 + 2] += pv * z as f64;
                        }
                    }
                }
            }
            worst = worst.max(max_abs_diff(&got, &want));
        }
    }
    report(
        2,
        "operation oracles",
        worst < ORACLE_TOL,
        &format!("6 operations x 20 seeds, worst abs diff {worst:.2e} (< {ORACLE_TOL:.0e})"),
    );
}

// ---------------------------------------------------------------------------
// 3. Differentiable-argmax properties.

#[test]
fn c03_integral_regression_properties() {
    let t0 = Instant::now();
    let (d, h, w) = (4usize, 3usize, 5usize);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut pass = true;
    let mut notes = Vec::new();

    // Delta heatmaps decode to exactly their peak voxel.
    {
        let (zi, yi, xi) = (2usize, 1usize, 3usize);
        let mut y = vec![0.0; d * h * w];
        y[(zi * h + yi) * w + xi] = 60.0; // sharp enough to saturate softmax
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.constant(y, vec![1, d, h, w]).unwrap();
        let c = soft_argmax(&mut tape, t).unwrap();
        let got = tape.data(c).to_vec();
        let err = max_abs_diff(&got, &[xi as f64, yi as f64, zi as f64]);
        pass &= err < 1e-12;
        notes.push(format!("delta {err:.1e}"));
    }

    // A uniform heatmap decodes to the grid centroid.
    {
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.constant(vec![0.7; d * h * w], vec![1, d, h, w]).unwrap();
        let c = soft_argmax(&mut tape, t).unwrap();
        let want = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
        let err = max_abs_diff(tape.data(c), &want);
        pass &= err < 1e-12;
        notes.push(format!("uniform {err:.1e}"));
    }

    // Adding a constant to the logits leaves the coordinates unchanged.
    {
        let y: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(y.clone(), vec![1, d, h, w]).unwrap();
        let b = tape.constant(y.iter().map(|v| v + 11.25).collect(), vec![1, d, h, w]).unwrap();
        let ca = soft_argmax(&mut tape, a).unwrap();
        let cb = soft_argmax(&mut tape, b).unwrap();
        let err = max_abs_diff(tape.data(ca), &tape.data(cb).to_vec());
        pass &= err < 1e-12;
        notes.push(format!("shift {err:.1e}"));
    }

    // Decoded coordinates always lie inside the grid's convex hull.
    {
        let mut hull_ok = true;
        for _ in 0..50 {
            let y: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let t = tape.constant(y, vec![1, d, h, w]).unwrap();
            let c = soft_argmax(&mut tape, t).unwrap();
            let got = tape.data(c);
            hull_ok &= (0.0..=(w - 1) as f64).contains(&got[0])
                && (0.0..=(h - 1) as f64).contains(&got[1])
                && (0.0..=(d - 1) as f64).contains(&got[2]);
        }
        pass &= hull_ok;
        notes.push(format!("hull {}", if hull_ok { "ok" } else { "violated" }));
    }

    // Sharpening the logits converges to the hard argmax.
    {
        let mut y: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        y[(1 * h + 2) * w + 4] = 3.0; // unique, well-separated peak
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.constant(y.clone(), vec![1, d, h, w]).unwrap();
        let hard = hard_argmax(&mut tape, t).unwrap();
        let hard_c = tape.data(hard).to_vec();
        let dist_at = |tau: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let t = tape.constant(y.clone(), vec![1, d, h, w]).unwrap();
            let s = tape.scale(t, tau);
            let c = soft_argmax(&mut tape, s).unwrap();
            max_abs_diff(tape.data(c), &hard_c)
        };
        let (d1, d10, d100) = (dist_at(1.0), dist_at(10.0), dist_at(100.0));
        let sharp_ok = d10 < d1 && d100 < d10 && d100 < 1e-9;
        pass &= sharp_ok;
        notes.push(format!("sharpen {d1:.1e}>{d10:.1e}>{d100:.1e}"));
    }

    let wall = t0.elapsed();
    pass &= wall < Duration::from_secs(60);
    report(3, "integral properties", pass, &format!("{} in {wall:.1?}", notes.join(", ")));
}

// ---------------------------------------------------------------------------
// 4. Hand-evaluated objective values.

#[test]
fn c04_loss_arithmetic() {
    let tol = 1e-9;
    let mut worst = 0.0f64;

    // One present class at probability 0.5 with balance 2: -2 ln(1/2).
    {
        let cfg = LossConfig { balance: 2.0, lambda: 0.4, eps: 1e-7 };
        let target = CropTarget::new(vec![true], vec![[0.0; 3]]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![0.5], vec![1]).unwrap();
        let l = classification_loss(&mut tape, p, &target, &cfg).unwrap();
        worst = worst.max((tape.value(l) - 2.0 * std::f64::consts::LN_2).abs());
    }

    // The robust distance kernel at 2.0: linear branch, 2 - 0.5.
    worst = worst.max((smooth_l1(2.0) - 1.5).abs());
    {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![2.0], vec![1]).unwrap();
        let s = tape.smooth_l1(x);
        worst = worst.max((tape.value(s) - 1.5).abs());
    }

    // One present class, predicted one voxel off along a single axis,
    // weighted 0.4: 0.4 * smooth(1.0) = 0.4 * 0.5.
    {
        let cfg = LossConfig { balance: 2.0, lambda: 0.4, eps: 1e-7 };
        let target = CropTarget::new(vec![true], vec![[2.0, 3.0, 1.0]]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let pred = tape.constant(vec![3.0, 3.0, 1.0], vec![1, 3]).unwrap();
        let l = localization_loss(&mut tape, pred, &target, &cfg).unwrap();
        worst = worst.max((tape.value(l) - 0.2).abs());
    }

    // The joint objective is the exact sum of its parts.
    {
        let cfg = LossConfig::default();
        let target = CropTarget::new(vec![true, false], vec![[1.0; 3], [0.0; 3]]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![0.8, 0.3], vec![2]).unwrap();
        let pred = tape.constant(vec![1.0, 1.5, 1.0, 9.0, 9.0, 9.0], vec![2, 3]).unwrap();
        let lc = classification_loss(&mut tape, p, &target, &cfg).unwrap();
        let lr = localization_loss(&mut tape, pred, &target, &cfg).unwrap();
        let lt = total_loss(&mut tape, lc, lr).unwrap();
        worst = worst
            .max((tape.value(lt) - (tape.value(lc) + tape.value(lr))).abs());
    }

    report(4, "loss arithmetic", worst < tol, &format!("worst abs error {worst:.2e} (< {tol:.0e})"));
}

// ---------------------------------------------------------------------------
// 5. Memorization: the tiny setup overfits two crops.

#[test]
fn c05_overfit_two_crops() {
    let t0 = Instant::now();
    let spec = PhantomSpec {
        classes: 3,
        count: 3,
        extents: [16, 12, 12],
        voxel_mm: [2.0, 2.0, 2.0],
        spacing_mm: 8.0,
        spacing_jitter_mm: 1.0,
        radius_mm: 3.5,
        metal_probability: 0.0,
        ..PhantomSpec::default()
    };
    let (vol, labels) = generate_phantom(&spec, 5).unwrap();
    let (vol, labels) = prepare_scan(&vol, &labels, TARGET_SPACING_MM).unwrap();
    let crops =
        sample_crops(&[(vol, labels)], [8, 8, 8], 3, 2, 1.0, 31).expect("two crops");
    assert_eq!(crops.len(), 2);

    let mut cfg = TrainConfig::new(ModelConfig::tiny());
    cfg.epochs = 200; // two crops in one batch: one update per epoch
    cfg.batch_size = 2;
    cfg.patience = 200; // hold the step size: this probes capacity, not scheduling
    cfg.seed = 5;
    let outcome = train(&cfg, &crops, &[]).expect("training");

    let first = outcome.log.first().expect("first epoch row").loss_total;
    let last = outcome.log.last().expect("last epoch row").loss_total;
    let wall = t0.elapsed();
    let pass = last < 0.05 * first && wall < Duration::from_secs(600);
    report(
        5,
        "overfit oracle",
        pass,
        &format!(
            "loss {first:.4} -> {last:.4} ({:.1}%) over 200 updates in {wall:.1?}",
            100.0 * last / first
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Full synthetic end-to-end run.

#[test]
fn c06_end_to_end_identification() {
    let run = desk_run();
    let id = run.report.all.id_rate.unwrap_or(0.0);
    let mean = run.report.all.mean_mm.unwrap_or(f64::INFINITY);
    let pass = run.train_wall < Duration::from_secs(1800) && id >= 90.0 && mean <= 4.0;
    print!("{}", render_metrics_table(&run.report, run.val_map));
    report(
        6,
        "end-to-end",
        pass,
        &format!(
            "{DESK_SCANS} scans ({DESK_VAL} held out), trained {:.0?}: id rate {id:.1}% (>= 90), \
             mean error {mean:.2} mm (<= 4)",
            run.train_wall
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Localization-mode comparison on identical data and seed.

#[test]
fn c07_localization_mode_comparison() {
    let cmp = comparison_run();
    let rows = [
        ("integral", &cmp.integral),
        ("direct_fc", &cmp.direct_fc),
        ("heatmap_argmax", &cmp.heatmap_argmax),
    ];
    println!("{:<16} {:>10} {:>9} {:>9}", "mode", "id rate %", "mean mm", "std mm");
    for (name, score) in &rows {
        let m = &score.report.all;
        println!(
            "{name:<16} {:>10} {:>9} {:>9}",
            m.id_rate.map(|v| format!("{v:.1}")).unwrap_or("-".into()),
            m.mean_mm.map(|v| format!("{v:.2}")).unwrap_or("-".into()),
            m.std_mm.map(|v| format!("{v:.2}")).unwrap_or("-".into()),
        );
    }
    let mean = |s: &FitScore| s.report.all.mean_mm.unwrap_or(f64::INFINITY);
    let (mi, md, mh) = (mean(&cmp.integral), mean(&cmp.direct_fc), mean(&cmp.heatmap_argmax));
    let pass = mi <= md && mi <= mh;
    report(
        7,
        "mode comparison",
        pass,
        &format!("integral {mi:.2} mm <= direct_fc {md:.2} mm and <= heatmap_argmax {mh:.2} mm"),
    );
}

// ---------------------------------------------------------------------------
// 8. Sequence head against plain pooling, same data and seed.

#[test]
fn c08_sequence_head_comparison() {
    let cmp = comparison_run();
    let seq = cmp.integral.val_map;
    let pooled = cmp.global_pool.val_map;
    let pass = match (seq, pooled) {
        (Some(s), Some(p)) => s >= p,
        _ => false,
    };
    report(
        8,
        "sequence head",
        pass,
        &format!(
            "held-out crop mAP: sequence {:.4} >= pooled {:.4}",
            seq.unwrap_or(f64::NAN),
            pooled.unwrap_or(f64::NAN)
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Metric golden cases.

#[test]
fn c09_metric_goldens() {
    let mut pass = true;
    let mut notes = Vec::new();

    let labels = |entries: &[(usize, [f64; 3])]| {
        LabelSet::new(entries.iter().map(|&(class, world)| Label { class, world }).collect())
            .unwrap()
    };
    let prediction = |entries: &[(usize, [f64; 3])], classes: usize| {
        let mut out = vec![
            ClassPrediction { present: false, world: [0.0; 3], confidence: 0.0 };
            classes
        ];
        for &(class, world) in entries {
            out[class] = ClassPrediction { present: true, world, confidence: 0.9 };
        }
        ScanPrediction { classes: out, votes: Vec::new() }
    };

    // Perfect predictions.
    {
        let truth = [labels(&[(0, [0.0; 3]), (1, [0.0, 0.0, 20.0])])];
        let preds = [prediction(&[(0, [0.0; 3]), (1, [0.0, 0.0, 20.0])], 2)];
        let r = identification_metrics(&preds, &truth).unwrap();
        pass &= r.all.id_rate == Some(100.0) && r.all.mean_mm == Some(0.0);
        notes.push("perfect".into());
    }

    // Boundary cases: 25 mm and exactly 20 mm miss; just inside counts.
    {
        let truth = [labels(&[(0, [0.0; 3])])];
        let at = |x: f64| identification_metrics(&[prediction(&[(0, [x, 0.0, 0.0])], 1)], &truth)
            .unwrap()
            .all
            .id_rate;
        pass &= at(25.0) == Some(0.0) && at(20.0) == Some(0.0) && at(19.99) == Some(100.0);
        notes.push("20/25 mm boundaries".into());
    }

    // Swapped classes: nothing identified, same-class errors measured.
    {
        let truth = [labels(&[(0, [0.0; 3]), (1, [50.0, 0.0, 0.0])])];
        let preds = [prediction(&[(0, [45.0, 0.0, 0.0]), (1, [5.0, 0.0, 0.0])], 2)];
        let r = identification_metrics(&preds, &truth).unwrap();
        pass &= r.all.id_rate == Some(0.0)
            && r.all.mean_mm == Some(45.0)
            && r.all.std_mm == Some(0.0);
        notes.push("swapped classes".into());
    }

    // Ranked precision: positive, negative, positive.
    {
        let probs = vec![vec![0.9], vec![0.8], vec![0.7]];
        let truth = vec![vec![true], vec![false], vec![true]];
        let ap = mean_average_precision(&probs, &truth).unwrap().per_class[0].unwrap();
        pass &= (ap - 5.0 / 6.0).abs() < 1e-12;
        notes.push(format!("interleaved AP {ap:.12}"));
    }

    // Random scores land near the positive prevalence.
    {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let prevalence = 0.35;
        let n = 1500;
        let probs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>()]).collect();
        let truth: Vec<Vec<bool>> =
            (0..n).map(|_| vec![rng.gen::<f64>() < prevalence]).collect();
        let ap = mean_average_precision(&probs, &truth).unwrap().per_class[0].unwrap();
        pass &= (ap - prevalence).abs() < 0.05;
        notes.push(format!("random AP {ap:.3} ~ {prevalence}"));
    }

    report(9, "metric goldens", pass, &notes.join(", "));
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence.

#[test]
fn c10_determinism_and_persistence() {
    let mut pass = true;
    let mut notes = Vec::new();
    let tmp = tempfile::tempdir().unwrap();

    // Fixture: four 8^3 crops from two small scans.
    let spec = PhantomSpec {
        classes: 3,
        count: 3,
        extents: [16, 12, 12],
        voxel_mm: [2.0, 2.0, 2.0],
        spacing_mm: 8.0,
        spacing_jitter_mm: 1.0,
        radius_mm: 3.5,
        metal_probability: 0.0,
        ..PhantomSpec::default()
    };
    let scans: Vec<(Volume, LabelSet)> = (0..2)
        .map(|i| {
            let (v, l) = generate_phantom(&spec, 40 + i).unwrap();
            prepare_scan(&v, &l, TARGET_SPACING_MM).unwrap()
        })
        .collect();
    let crops = sample_crops(&scans, [8, 8, 8], 3, 2, 0.8, 13).unwrap();
    let mut cfg = TrainConfig::new(ModelConfig::tiny());
    cfg.epochs = 4;
    cfg.seed = 21;

    // Identical loss logs on rerun.
    {
        let a = train(&cfg, &crops, &[]).unwrap();
        let b = train(&cfg, &crops, &[]).unwrap();
        let identical = render_log_csv(&a.log) == render_log_csv(&b.log);
        pass &= identical;
        notes.push(format!("rerun logs {}", if identical { "identical" } else { "DIFFER" }));
    }

    // Interrupt/resume equals the uninterrupted run, through actual files.
    {
        let straight = train(&cfg, &crops, &[]).unwrap();
        let mut half = cfg.clone();
        half.epochs = 2;
        let part = train(&half, &crops, &[]).unwrap();
        let ckpt_path = tmp.path().join("mid.ckpt");
        save_checkpoint(&part.last, &ckpt_path).unwrap();
        let reloaded = load_checkpoint(&ckpt_path).unwrap();
        pass &= reloaded == part.last;
        let resumed = resume(reloaded, &cfg, &crops, &[]).unwrap();
        let same = resumed.last == straight.last
            && resumed.log == straight.log[straight.log.len() - resumed.log.len()..];
        pass &= same;
        notes.push(format!("resume {}", if same { "matches" } else { "DIVERGES" }));
    }

    // Volume, label, and prediction files round-trip bitwise.
    {
        let vol_path = tmp.path().join("t.vol");
        write_volume(&vol_path, &scans[0].0).unwrap();
        let back = read_volume(&vol_path).unwrap();
        let vol_ok = back.extents == scans[0].0.extents
            && back.spacing == scans[0].0.spacing
            && back.origin == scans[0].0.origin
            && back.data.iter().zip(&scans[0].0.data).all(|(a, b)| a.to_bits() == b.to_bits());

        let lab_path = tmp.path().join("t.lab");
        write_labels(&lab_path, &scans[0].1).unwrap();
        let lab_ok = read_labels(&lab_path).unwrap().labels() == scans[0].1.labels();

        let pred = ScanPrediction {
            classes: vec![
                ClassPrediction { present: true, world: [0.1 + 0.2, -0.0, 1e-17], confidence: 0.5 },
                ClassPrediction { present: false, world: [0.0; 3], confidence: 0.0 },
            ],
            votes: Vec::new(),
        };
        let pred_path = tmp.path().join("t.pred");
        write_predictions(&pred, &pred_path).unwrap();
        let back = read_predictions(&pred_path).unwrap();
        let pred_ok = back.classes.len() == 2
            && back.classes.iter().zip(&pred.classes).all(|(a, b)| {
                a.present == b.present
                    && a.confidence.to_bits() == b.confidence.to_bits()
                    && a.world.iter().zip(&b.world).all(|(x, y)| x.to_bits() == y.to_bits())
            });

        pass &= vol_ok && lab_ok && pred_ok;
        notes.push(format!(
            "file round-trips vol:{} lab:{} pred:{}",
            if vol_ok { "ok" } else { "BAD" },
            if lab_ok { "ok" } else { "BAD" },
            if pred_ok { "ok" } else { "BAD" }
        ));
    }

    report(10, "determinism and persistence", pass, &notes.join(", "));
}
