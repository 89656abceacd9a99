//! Command-line front end: dataset generation, training, whole-scan
//! inference, evaluation, localization-mode comparison, and the
//! finite-difference gradient audit.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (bad file, diverged
//! run), 2 on malformed flags.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{phantom_spec_from_kv, train_setup_from_kv, TrainSetup};
use crate::data::{
    generate_phantom, prepare_scan, read_dataset, read_labels, read_volume, sample_crops,
    write_dataset, LabelSet, PhantomSpec, Volume,
};
use crate::infer::{
    default_stride, evaluate_scans, infer_scan, read_predictions, render_metrics_csv,
    render_metrics_table, write_predictions, DEFAULT_VOTE_THRESHOLD,
};
use crate::nn::LocMode;
use crate::tensor::gradcheck::{op_gradient_suite, OP_TOLERANCE};
use crate::train::{
    load_checkpoint, render_log_csv, save_checkpoint, train_with, TrainError, TrainOutcome,
};

type CmdResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "vertlab",
    version,
    about = "Vertebra labeling: finds which vertebrae a 3-d scan contains and where"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("want three comma-separated values, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: numbered volume/label pairs.
    Phantom {
        /// Output directory for scan_NNN.vol / scan_NNN.lab pairs.
        #[arg(long)]
        out: PathBuf,
        /// key=value recipe file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// How many scans to generate.
        #[arg(long, default_value_t = 40)]
        scans: usize,
        /// Scan i is generated from seed + i; a fixed seed reproduces the
        /// dataset bit for bit.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory; writes the loss log and checkpoints.
    Train {
        /// Dataset directory produced by `phantom` (or matching its layout).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for loss.csv, best.ckpt, last.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// key=value training configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Localize vertebrae in one volume; writes a prediction file.
    Infer {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volume file (raw scan; it is clamped, normalized, and
        /// resampled before inference).
        #[arg(long)]
        volume: PathBuf,
        /// Prediction file to write: one line per class.
        #[arg(long)]
        out: PathBuf,
        /// Presence-probability threshold for emitting a vote.
        #[arg(long, default_value_t = DEFAULT_VOTE_THRESHOLD)]
        threshold: f64,
        /// Window stride `z,y,x` in voxels; default is half the crop.
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
        /// Isotropic resampling target in mm; must match training.
        #[arg(long, default_value_t = crate::data::TARGET_SPACING_MM)]
        spacing: f64,
    },
    /// Score prediction files against ground-truth labels.
    Eval {
        /// Directory of scan_NNN.pred files (from `infer`).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of matching scan_NNN.lab files.
        #[arg(long)]
        truth: PathBuf,
        /// Also write the metrics as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the three localization modes on identical data and seed and
    /// compare their held-out localization quality.
    Ablate {
        /// Dataset directory produced by `phantom`.
        #[arg(long)]
        data: PathBuf,
        /// key=value training configuration shared by all three runs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the comparison as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit every differentiable operation against central finite
    /// differences.
    Gradcheck {
        /// Seed for the randomized probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `argv` (including the program name) and runs the chosen
/// command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Phantom { out, spec, scans, seed } => cmd_phantom(&out, spec.as_deref(), scans, seed),
        Command::Train { data, out, config } => cmd_train(&data, &out, config.as_deref()),
        Command::Infer { checkpoint, volume, out, threshold, stride, spacing } => {
            cmd_infer(&checkpoint, &volume, &out, threshold, stride, spacing)
        }
        Command::Eval { pred, truth, out } => cmd_eval(&pred, &truth, out.as_deref()),
        Command::Ablate { data, config, out } => cmd_ablate(&data, config.as_deref(), out.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn load_setup(path: Option<&Path>) -> Result<TrainSetup, Box<dyn std::error::Error>> {
    match path {
        None => Ok(TrainSetup::default()),
        Some(p) => Ok(train_setup_from_kv(&fs::read_to_string(p)?)?),
    }
}

fn cmd_phantom(out: &Path, spec: Option<&Path>, scans: usize, seed: u64) -> CmdResult {
    let spec = match spec {
        None => PhantomSpec::default(),
        Some(p) => phantom_spec_from_kv(&fs::read_to_string(p)?)?,
    };
    if scans == 0 {
        return Err("need at least one scan".into());
    }
    let mut dataset = Vec::with_capacity(scans);
    for i in 0..scans {
        dataset.push(generate_phantom(&spec, seed.wrapping_add(i as u64))?);
    }
    write_dataset(out, &dataset)?;
    println!("wrote {scans} scans to {}", out.display());
    Ok(())
}

/// Prepares a dataset directory for training: preprocess + resample every
/// scan, split off the validation tail, and pre-sample the crop lists.
struct Assembled {
    train_crops: Vec<crate::data::Crop>,
    val_crops: Vec<crate::data::Crop>,
    val_scans: Vec<(Volume, LabelSet)>,
}

fn assemble(setup: &TrainSetup, scans: &[(Volume, LabelSet)]) -> Result<Assembled, Box<dyn std::error::Error>> {
    if setup.val_scans >= scans.len() {
        return Err(format!(
            "cannot hold out {} of {} scans for validation",
            setup.val_scans,
            scans.len()
        )
        .into());
    }
    let mut prepared = Vec::with_capacity(scans.len());
    for (vol, labels) in scans {
        prepared.push(prepare_scan(vol, labels, setup.target_spacing_mm)?);
    }
    let (train_scans, val_scans) = prepared.split_at(prepared.len() - setup.val_scans);
    let model = &setup.train.model;
    let train_crops = sample_crops(
        train_scans,
        model.crop,
        model.classes,
        setup.crops_per_scan,
        setup.containment_bias,
        setup.train.seed,
    )?;
    let val_crops = sample_crops(
        val_scans,
        model.crop,
        model.classes,
        setup.crops_per_scan,
        setup.containment_bias,
        setup.train.seed + train_crops.len() as u64,
    )?;
    Ok(Assembled { train_crops, val_crops, val_scans: val_scans.to_vec() })
}

/// Runs one training and handles the divergence contract: on a non-finite
/// loss the last good checkpoint is saved next to the other artifacts.
fn fit(
    setup: &TrainSetup,
    assembled: &Assembled,
    out_dir: &Path,
) -> Result<TrainOutcome, Box<dyn std::error::Error>> {
    fs::create_dir_all(out_dir)?;
    let outcome = train_with(
        &setup.train,
        &assembled.train_crops,
        &assembled.val_crops,
        &mut |row| {
            println!(
                "epoch {:>3} {:<5} loss {:.6} (cls {:.6}, reg {:.6}) lr {}",
                row.epoch,
                row.split.as_str(),
                row.loss_total,
                row.loss_cls,
                row.loss_reg,
                row.lr
            );
        },
    );
    match outcome {
        Ok(outcome) => Ok(outcome),
        Err(TrainError::Diverged { epoch, last_good }) => {
            let path = out_dir.join("last_good.ckpt");
            save_checkpoint(&last_good, &path)?;
            Err(format!(
                "loss became non-finite in epoch {epoch}; wrote the last good state (epoch {}) to {}",
                last_good.epoch,
                path.display()
            )
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_train(data: &Path, out: &Path, config: Option<&Path>) -> CmdResult {
    let setup = load_setup(config)?;
    let scans = read_dataset(data)?;
    println!(
        "{} scans ({} held out), {} crops per scan",
        scans.len(),
        setup.val_scans,
        setup.crops_per_scan
    );
    let assembled = assemble(&setup, &scans)?;
    let outcome = fit(&setup, &assembled, out)?;
    fs::write(out.join("loss.csv"), render_log_csv(&outcome.log))?;
    save_checkpoint(&outcome.best, out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, out.join("last.ckpt"))?;
    println!(
        "best monitored loss {:.6} at epoch {}; wrote loss.csv, best.ckpt, last.ckpt to {}",
        outcome.best_monitor,
        outcome.best.epoch,
        out.display()
    );
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    volume: &Path,
    out: &Path,
    threshold: f64,
    stride: Option<[usize; 3]>,
    spacing: f64,
) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.build_model()?;
    let raw = read_volume(volume)?;
    let (prepared, _) = prepare_scan(&raw, &LabelSet::new(Vec::new())?, spacing)?;
    let stride = stride.unwrap_or_else(|| default_stride(model.config().crop));
    let pred = infer_scan(&model, &prepared, stride, threshold)?;
    write_predictions(&pred, out)?;
    println!(
        "{} of {} classes present ({} votes); wrote {}",
        pred.present_count(),
        pred.classes.len(),
        pred.votes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(pred_dir: &Path, truth_dir: &Path, out: Option<&Path>) -> CmdResult {
    let mut lab_paths: Vec<PathBuf> = fs::read_dir(truth_dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "lab"))
        .collect();
    lab_paths.sort();
    if lab_paths.is_empty() {
        return Err(format!("no .lab files in {}", truth_dir.display()).into());
    }
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for lp in &lab_paths {
        truths.push(read_labels(lp)?);
        let stem = lp.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        preds.push(read_predictions(pred_dir.join(format!("{stem}.pred")))?);
    }
    let report = crate::infer::identification_metrics(&preds, &truths)?;
    print!("{}", render_metrics_table(&report, None));
    if let Some(path) = out {
        fs::write(path, render_metrics_csv(&report))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(data: &Path, config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let base = load_setup(config)?;
    let scans = read_dataset(data)?;
    let modes =
        [LocMode::Integral, LocMode::DirectFc, LocMode::HeatmapArgmax];
    let mode_name = |m: LocMode| match m {
        LocMode::Integral => "integral",
        LocMode::DirectFc => "direct_fc",
        LocMode::HeatmapArgmax => "heatmap_argmax",
    };

    let mut rows = Vec::new();
    for mode in modes {
        let mut setup = base.clone();
        setup.train.model.loc_mode = mode;
        println!("training {} ...", mode_name(mode));
        let assembled = assemble(&setup, &scans)?;
        let tmp = tempdir_for(data, mode_name(mode))?;
        let outcome = fit(&setup, &assembled, &tmp)?;
        let model = outcome.best.build_model()?;
        let stride = default_stride(model.config().crop);
        let (_, report) =
            evaluate_scans(&model, &assembled.val_scans, stride, DEFAULT_VOTE_THRESHOLD)?;
        rows.push((mode_name(mode), report.all.clone()));
    }

    let cell = |v: Option<f64>, d: usize| v.map(|x| format!("{x:.d$}")).unwrap_or("-".into());
    println!("{:<16} {:>10} {:>9} {:>9}", "mode", "id rate %", "mean mm", "std mm");
    for (name, m) in &rows {
        println!(
            "{name:<16} {:>10} {:>9} {:>9}",
            cell(m.id_rate, 1),
            cell(m.mean_mm, 2),
            cell(m.std_mm, 2)
        );
    }
    if let Some(path) = out {
        let mut csv = String::from("mode,id_rate,mean_mm,std_mm\n");
        for (name, m) in &rows {
            let oc = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{name},{},{},{}\n",
                oc(m.id_rate),
                oc(m.mean_mm),
                oc(m.std_mm)
            ));
        }
        fs::write(path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Scratch output directory for one ablation run, next to the dataset.
fn tempdir_for(data: &Path, mode: &str) -> Result<PathBuf, std::io::Error> {
    let dir = data.join(format!("ablate_{mode}"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_gradcheck(seed: u64) -> CmdResult {
    let checks = op_gradient_suite(seed)?;
    let mut failed = 0usize;
    for c in &checks {
        let verdict = if c.max_rel_err < OP_TOLERANCE { "ok" } else { "FAIL" };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "{:<28} max rel err {:>12.3e} over {:>4} probes  {verdict}",
            c.name, c.max_rel_err, c.checked
        );
    }
    if failed > 0 {
        return Err(format!("{failed} of {} operations exceeded {OP_TOLERANCE:e}", checks.len()).into());
    }
    println!("all {} operations within {OP_TOLERANCE:e}", checks.len());
    Ok(())
}
