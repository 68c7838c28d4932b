use std::path::{Path, PathBuf};
use std::time::Instant;

use cct::autograd::softmax_tensor;
use cct::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cct::data::{load_npz, normalize, DatasetBundle, Split, CLASS_NAMES};
use cct::metrics::{write_report_dir, EvalReport};
use cct::model::predict_logits;
use cct::train::{TrainLog, TrainOptions};
use cct::Tensor;

use crate::error::CliError;
use crate::plot::{read_roc_csv, roc_svg, training_svg, trapezoid_auc, write_atomic, Series};
use crate::run_config::RunConfig;
use crate::{EvalArgs, Overrides, PlotArgs, PredictArgs, TrainArgs};

const EVAL_BATCH: usize = 256;
pub const TRAINLOG: &str = "trainlog.csv";
pub const CHECKPOINT: &str = "best.ckpt";

fn apply_overrides(run: &mut RunConfig, o: &Overrides) {
    let m = &mut run.model;
    if let Some(v) = o.seed {
        m.seed = v;
    }
    if let Some(v) = o.epochs {
        m.epochs = v;
    }
    if let Some(v) = o.batch_size {
        m.batch_size = v;
    }
    if let Some(v) = o.lr {
        m.lr = v;
    }
    if let Some(v) = o.weight_decay {
        m.weight_decay = v;
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require_data(flag: Option<PathBuf>, run: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| run.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset given: pass --data or set `data` in the config".into()))
}

/// Reject splits whose images do not match the model input.
fn check_image_dims(split: &Split, cfg: &cct::CctConfig, what: &str) -> Result<(), CliError> {
    let (h, w, c) = split.image_dims();
    if (h, w, c) != (cfg.input_hw, cfg.input_hw, cfg.input_channels) {
        return Err(CliError::Usage(format!(
            "{what} has {h}x{w}x{c} images but the model expects {0}x{0}x{1}",
            cfg.input_hw, cfg.input_channels
        )));
    }
    Ok(())
}

fn class_name(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("class {i}"))
}

fn pick_split<'a>(bundle: &'a DatasetBundle, name: &str) -> &'a Split {
    bundle.split(name).expect("split names come from the SplitName enum")
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut run, &a.overrides);
    if let Some(d) = a.data.clone() {
        run.data = Some(d);
    }
    if let Some(c) = a.checkpoint.clone() {
        run.checkpoint_out = Some(c);
    }
    let checkpoint_path = run.checkpoint_out.get_or_insert_with(|| a.out.join(CHECKPOINT)).clone();
    run.model.validate()?;
    let data = require_data(None, &run)?;

    let bundle = load_npz(&data)?;
    check_image_dims(&bundle.train, &run.model, &data.display().to_string())?;
    create_dir(&a.out)?;
    run.echo_into(&a.out)?;

    let opts = TrainOptions { augment: !a.no_augment, record_wall_time: a.wall_time, ..TrainOptions::default() };
    let epochs = run.model.epochs;
    let started = Instant::now();
    let outcome = cct::train(&run.model, &bundle, &opts, |r| {
        println!(
            "epoch {}/{epochs}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  [{:.1}s]",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss,
            r.val_acc,
            started.elapsed().as_secs_f64()
        );
    })?;
    if let Some(parent) = checkpoint_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&outcome.checkpoint, &checkpoint_path)?;
    outcome.log.write_csv(a.out.join(TRAINLOG))?;
    println!(
        "best epoch {} (val_acc {:.4}); checkpoint written to {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val_accuracy,
        checkpoint_path.display()
    );
    Ok(())
}

/// Softmax probabilities `[N, K]` of a checkpoint on a stack of images.
fn probabilities(ck: &Checkpoint, images: &Tensor<f32>) -> Result<Tensor<f32>, CliError> {
    let logits = predict_logits(&ck.params, &ck.config, images, EVAL_BATCH)?;
    Ok(softmax_tensor(&logits, 1))
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut run = match &a.config {
        Some(p) => {
            let run = RunConfig::load(p)?;
            ck.ensure_compatible(&run.model)?;
            run
        }
        None => RunConfig::default(),
    };
    run.model = ck.config.clone();
    let data = require_data(a.data.clone(), &run)?;
    let bundle = load_npz(&data)?;
    let split = pick_split(&bundle, a.split.as_str());
    check_image_dims(split, &ck.config, &format!("{} split of {}", a.split.as_str(), data.display()))?;

    let probs = probabilities(&ck, &split.images)?;
    let labels: Vec<usize> = split.labels.iter().map(|&l| l as usize).collect();
    let (report, roc) = EvalReport::compute(a.split.as_str(), &probs, &labels, &bundle.class_names)?;

    let dir = a.out.clone().or_else(|| run.report_dir.clone()).unwrap_or_else(|| {
        let parent = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
        parent.join(format!("eval_{}", a.split.as_str()))
    });
    write_report_dir(&dir, &report, &roc)?;
    run.data = Some(data);
    run.report_dir = Some(dir.clone());
    run.echo_into(&dir)?;
    println!(
        "{} split: {} samples  accuracy {:.4}  top-2 accuracy {:.4}  micro-average AUC {:.4}",
        report.split, report.num_samples, report.top1_accuracy, report.top2_accuracy, report.auc_micro
    );
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = &ck.config;
    let (hw, c) = (cfg.input_hw, cfg.input_channels);
    let expected = hw * hw * c;
    let names: Vec<String> = if cfg.num_classes == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cfg.num_classes).map(|i| format!("class {i}")).collect()
    };

    let (image, truth) = match (&a.image, &a.data, a.index) {
        (Some(path), _, _) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            if bytes.len() != expected {
                return Err(CliError::Usage(format!(
                    "{}: expected {expected} bytes ({hw}x{hw}x{c} uint8), found {}",
                    path.display(),
                    bytes.len()
                )));
            }
            (Tensor::new([1, hw, hw, c], normalize(&bytes))?, None)
        }
        (None, Some(data), Some(index)) => {
            let bundle = load_npz(data)?;
            let split = pick_split(&bundle, a.split.as_str());
            check_image_dims(split, cfg, &data.display().to_string())?;
            if index >= split.len() {
                return Err(CliError::Usage(format!(
                    "index {index} out of range for the {} split ({} images)",
                    a.split.as_str(),
                    split.len()
                )));
            }
            (split.images.slice_leading(index, index + 1)?, Some(split.labels[index] as usize))
        }
        _ => return Err(CliError::Usage("pass --image FILE, or --data FILE with --index N".into())),
    };

    let logits = predict_logits(&ck.params, cfg, &image, 1)?;
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let best = cct::model::argmax_rows(&logits)[0];

    println!("predicted_class: {best}");
    println!("predicted_name: {}", class_name(&names, best));
    let joined: Vec<String> = probs.iter().map(|p| format!("{p:.9}")).collect();
    println!("probabilities: {}", joined.join(" "));
    if let Some(t) = truth {
        println!("true_class: {t}");
        println!("true_name: {}", class_name(&names, t));
    }
    Ok(())
}

fn roc_class_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("roc_class_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(i) = i.parse::<usize>() {
                found.push((i, entry.path()));
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let roc_dir = a.roc_dir.clone().unwrap_or_else(|| a.dir.clone());
    let out_dir = a.out.clone().unwrap_or_else(|| a.dir.clone());
    let log_path = a.dir.join(TRAINLOG);
    let micro_path = roc_dir.join("roc_micro.csv");
    let (have_log, have_roc) = (log_path.is_file(), micro_path.is_file());
    if !have_log && !have_roc {
        return Err(CliError::Usage(format!(
            "nothing to plot; missing inputs: {}, {}",
            log_path.display(),
            micro_path.display()
        )));
    }

    // Render everything before writing anything.
    let mut outputs = Vec::new();
    if have_log {
        let text = std::fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        let log = TrainLog::parse_csv(&text)?;
        let svg = training_svg(&log).map_err(|e| CliError::Usage(format!("{}: {e}", log_path.display())))?;
        outputs.push(("training_curves.svg", svg));
    }
    if have_roc {
        let mut series = Vec::new();
        for (i, path) in roc_class_files(&roc_dir)? {
            let points = read_roc_csv(&path)?;
            let name = CLASS_NAMES.get(i).copied().unwrap_or("");
            let label = format!("class {i} {name} (AUC {:.4})", trapezoid_auc(&points));
            series.push(Series { label, points, dashed: false });
        }
        let points = read_roc_csv(&micro_path)?;
        let label = format!("micro-average (AUC {:.4})", trapezoid_auc(&points));
        series.push(Series { label, points, dashed: true });
        outputs.push(("roc.svg", roc_svg(&series)));
    }

    create_dir(&out_dir)?;
    for (name, svg) in outputs {
        let path = out_dir.join(name);
        write_atomic(&path, &svg)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
