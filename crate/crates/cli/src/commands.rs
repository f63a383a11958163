use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amil_core::bags::imageio::{read_image, write_image, Rgb8};
use amil_core::bags::{load_dataset, split_train_val, synth_generate, tile, Bag, SourceImage, SynthConfig, TilingSpec};
use amil_core::checkpoint::Checkpoint;
use amil_core::localization::{heatmap_csv, render_overlay, scores_to_weights, weights_to_heatmap};
use amil_core::model::{AmilModel, PoolingMode};
use amil_core::training::{metrics_csv, predict_label, Trainer};
use amil_core::Error;

use crate::config::RunConfig;
use crate::{EvalArgs, HeatmapArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Accept `run/best`, `run/best.manifest` or `run/best.bin`.
fn checkpoint_prefix(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("manifest" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn labels_csv<'a>(rows: impl Iterator<Item = &'a SourceImage>) -> String {
    let mut out = String::from("path,label\n");
    for img in rows {
        let _ = writeln!(out, "{},{}", img.id, img.label as u8);
    }
    out
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_bags: args.bags as usize,
        rows: args.grid.0,
        cols: args.grid.1,
        patch_size: args.patch as usize,
        positive_fraction: args.positive_fraction,
        motif_rate: args.motif_rate,
        seed: args.seed,
    };
    let samples = synth_generate(&config)?;
    let images_dir = args.out.join("images");
    create_dir(&images_dir)?;
    let mut labels = String::from("path,label\n");
    let mut truth = String::from("path,motif_cells\n");
    for s in &samples {
        let rel = format!("images/{}.png", s.image.id);
        write_image(&args.out.join(&rel), &Rgb8::from(&s.image))?;
        let _ = writeln!(labels, "{rel},{}", s.image.label as u8);
        let cells: Vec<String> = s.motif_cells.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(truth, "{rel},{}", cells.join(" "));
    }
    write_text(&args.out.join("labels.csv"), &labels)?;
    write_text(&args.out.join("truth.csv"), &truth)?;
    let positives = samples.iter().filter(|s| s.image.label).count();
    let motifs: usize = samples.iter().map(|s| s.motif_cells.len()).sum();
    println!(
        "wrote {} images ({} positive, {} motif cells, {}x{} grid of {}px patches) to {}",
        samples.len(),
        positives,
        motifs,
        config.rows,
        config.cols,
        config.patch_size,
        args.out.display()
    );
    Ok(())
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            c.set(key, &v)?;
        }
        Ok(())
    };
    set("learning_rate", args.lr.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("pooling", args.pooling.clone())?;
    set("optimizer", args.optimizer.clone())?;
    set("weight_decay", args.weight_decay.map(|v| v.to_string()))?;
    set("augment", args.augment.map(|v| v.to_string()))?;
    set("patch_size", args.patch.map(|v| v.to_string()))?;
    set("stride", args.stride.map(|v| v.to_string()))?;
    set("attention_dim", args.attention_dim.map(|v| v.to_string()))?;
    set("timing", args.timing.map(|v| v.to_string()))?;
    if let Some(p) = &args.data {
        c.data = Some(p.clone());
    }
    if let Some(p) = &args.labels {
        c.labels = Some(p.clone());
    }
    if let Some(p) = &args.out {
        c.out = Some(p.clone());
    }
    Ok(c)
}

fn save_model(prefix: &Path, model: &AmilModel<f32>, tiling: TilingSpec, extra: &[(&str, String)]) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.put_model("", model)?;
    ckpt.set_meta("stride", tiling.stride)?;
    for (k, v) in extra {
        ckpt.set_meta(k, v)?;
    }
    Ok(ckpt.save(prefix)?)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let run = run_config(&args)?;
    let config = run.train_config()?;
    let data = run
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("train needs a dataset (--data or `data` in the config)".into()))?;
    let out = run
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("train needs an output directory (--out or `out` in the config)".into()))?;
    let labels = run.labels.clone().unwrap_or_else(|| data.join("labels.csv"));

    let images = load_dataset(&data, &labels)?;
    if images.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 images to split, found {}", images.len())).into());
    }
    let (train, val) = split_train_val(&images, 0.8, config.seed)?;
    create_dir(&out)?;
    write_text(&out.join("train_labels.csv"), &labels_csv(train.iter()))?;
    write_text(&out.join("val_labels.csv"), &labels_csv(val.iter()))?;
    let val_bags = val
        .iter()
        .map(|img| tile(img, config.tiling))
        .collect::<amil_core::Result<Vec<Bag>>>()?;
    println!(
        "training on {} images, validating on {} ({} pooling, {} at lr {})",
        train.len(),
        val.len(),
        config.pooling,
        config.optimizer,
        config.learning_rate
    );

    let mut trainer = Trainer::new(config.clone())?;
    let mut history = Vec::new();
    while trainer.epoch < config.epochs {
        let m = trainer.run_epoch(&train, &val_bags)?;
        println!(
            "epoch {:>3}  loss {:.6}  train_acc {:.4}  val_acc {:.4}  {:.1}s",
            m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy, m.seconds
        );
        history.push(m);
        write_text(&out.join("metrics.csv"), &metrics_csv(&history, run.timing))?;
        trainer.save(&out.join("last"))?;
    }
    let best = trainer.best.as_ref().expect("at least one epoch ran");
    save_model(
        &out.join("best"),
        &best.model,
        config.tiling,
        &[("epoch", best.epoch.to_string()), ("val_accuracy", best.val_accuracy.to_string())],
    )?;
    println!(
        "best val_acc {:.4} at epoch {}; checkpoint {}",
        best.val_accuracy,
        best.epoch,
        out.join("best").display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(AmilModel<f32>, TilingSpec)> {
    let ckpt = Checkpoint::load(&checkpoint_prefix(path))?;
    let model: AmilModel<f32> = ckpt.get_model("")?;
    let patch = model.config.patch_size;
    let stride = match ckpt.meta("stride") {
        Some(_) => ckpt.meta_parse("stride")?,
        None => patch,
    };
    let tiling = TilingSpec::new(patch, stride).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((model, tiling))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (model, tiling) = load_checkpoint(&args.checkpoint)?;
    let labels = args.labels.clone().unwrap_or_else(|| args.data.join("labels.csv"));
    let images = load_dataset(&args.data, &labels)?;
    if images.is_empty() {
        return Err(Error::Contract(format!("{} lists no images", labels.display())).into());
    }
    let mut rows = String::from("path,label,probability,predicted\n");
    let mut correct = 0usize;
    for img in &images {
        let bag = tile(img, tiling)?;
        let p = model.forward_bag(&bag)?.probability as f64;
        let predicted = predict_label(p);
        if predicted == img.label {
            correct += 1;
        }
        let _ = writeln!(rows, "{},{},{p:.6},{}", img.id, img.label as u8, predicted as u8);
    }
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => checkpoint_prefix(&args.checkpoint)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    if !out.as_os_str().is_empty() {
        create_dir(&out)?;
    }
    write_text(&out.join("predictions.csv"), &rows)?;
    println!("accuracy={:.4}", correct as f64 / images.len() as f64);
    Ok(())
}

/// Attention weights, or a softmax over per-instance head logits for models
/// trained with max or mean pooling.
fn instance_weights(model: &AmilModel<f32>, bag: &Bag) -> Result<Vec<f64>> {
    if model.config.pooling == PoolingMode::Attention {
        let att = model.forward_bag(bag)?.attention.expect("attention mode returns weights");
        Ok(att.weights.iter().map(|&w| w as f64).collect())
    } else {
        let logits: Vec<f64> = model.instance_logits(&bag.patches)?.iter().map(|&v| v as f64).collect();
        Ok(scores_to_weights(&logits))
    }
}

pub fn heatmap(args: HeatmapArgs) -> Result<()> {
    let (model, tiling) = load_checkpoint(&args.checkpoint)?;
    create_dir(&args.out)?;
    for path in &args.images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Usage(format!("cannot name outputs for {}", path.display())))?;
        let image = read_image(path)?.into_source(false, stem)?;
        let bag = tile(&image, tiling)?;
        let heatmap = weights_to_heatmap(&instance_weights(&model, &bag)?, &bag)?;
        let overlay = render_overlay(&image, &heatmap, args.alpha)?;
        let overlay_path = args.out.join(format!("{stem}.overlay.{}", args.format));
        write_image(&overlay_path, &Rgb8::from(&overlay))?;
        write_text(&args.out.join(format!("{stem}.attention.csv")), &heatmap_csv(&heatmap))?;
        let top = heatmap.argmax();
        println!(
            "{stem}: {}x{} cells, strongest at row {} col {} (weight {:.4})",
            heatmap.rows,
            heatmap.cols,
            top / heatmap.cols,
            top % heatmap.cols,
            heatmap.weights[top]
        );
    }
    Ok(())
}
