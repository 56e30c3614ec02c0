//! The `objn` command line.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::{parse_class_list, RunConfig};
use crate::data::{self, class_tallies, Dataset, SampleSource, Split};
use crate::detector::{nms, predict_distribution, NmsParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{HeadKind, Model};
use crate::trainer::{self, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "objn", version, about = "Class-generic object detection over a discretized box space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classify,
    Detect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Heldout,
    Transfer,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset and write its manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classification or detection network.
    Train {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint's trunk.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Classes whose boxes are withheld, e.g. "8,9" (overrides the config).
        #[arg(long)]
        held_out: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print detections for one image: score x_min y_min x_max y_max.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        iou_nms: Option<f64>,
        #[arg(long)]
        score_min: Option<f64>,
        #[arg(long)]
        max_det: Option<usize>,
    },
    /// Detection AUC over the validation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to these classes, e.g. "8,9".
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment grid on freshly generated data.
    Experiment {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allow writing into an existing, non-empty directory.
        #[arg(long)]
        force: bool,
    },
}

/// Caps the worker pool when `OBJN_THREADS` is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("OBJN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("OBJN_THREADS must be a positive integer, got `{v}`")))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { config, out: dir } => gen_data(&RunConfig::load(&config)?, &dir, out),
        Command::Train {
            task,
            config,
            data,
            init,
            held_out,
            out: ckpt,
        } => train(task, &RunConfig::load(&config)?, &data, init, held_out.as_deref(), &ckpt, out),
        Command::Detect {
            model,
            image,
            iou_nms,
            score_min,
            max_det,
        } => {
            let d = NmsParams::default();
            let params = NmsParams {
                iou_threshold: iou_nms.unwrap_or(d.iou_threshold),
                score_threshold: score_min.unwrap_or(d.score_threshold),
                max_detections: max_det.unwrap_or(d.max_detections),
            };
            detect(&model, &image, &params, out)
        }
        Command::Eval {
            model,
            data,
            classes,
            out: report,
        } => evaluate(&model, &data, classes.as_deref(), &report, out),
        Command::Experiment {
            protocol,
            config,
            out: dir,
            force,
        } => experiment(protocol, &RunConfig::load(&config)?, &dir, force, out),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// SHA-256 over the manifest followed by every image it lists, in order.
pub fn dataset_checksum(manifest: &Path, records: &[data::SampleRecord]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?);
    for r in records {
        h.update(std::fs::read(&r.image_path).map_err(|e| Error::io(&r.image_path, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (manifest, records) = data::generate(&cfg.data, dir)?;
    emit(out, &format!("manifest {}", manifest.display()))?;
    for split in [Split::Train, Split::Val] {
        for (c, (n, boxes)) in class_tallies(&records, Some(split)) {
            emit(out, &format!("{} class {c} ({}): {n} images, {boxes} boxes", split.name(), data::class_name(c)))?;
        }
    }
    emit(out, &format!("checksum sha256:{}", dataset_checksum(&manifest, &records)?))
}

fn load_dataset(manifest: &Path, cfg_dims: Option<[usize; 3]>) -> Result<Dataset> {
    let ds = Dataset::from_manifest(manifest)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("{} lists no records", manifest.display())));
    }
    if let (Some(want), Some(got)) = (cfg_dims, ds.image_dims()) {
        if got != want {
            return Err(Error::Data(format!(
                "images are {got:?} but the network expects {want:?}"
            )));
        }
    }
    Ok(ds)
}

fn train(
    task: Task,
    cfg: &RunConfig,
    manifest: &Path,
    init: Option<PathBuf>,
    held_out: Option<&str>,
    ckpt_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let ds = load_dataset(manifest, Some(cfg.network.input_dims))?;
    let outcome: TrainOutcome = match task {
        Task::Classify => {
            if held_out.is_some() {
                return Err(Error::Config("--held-out only applies to --task detect".into()));
            }
            let tc = trainer::TrainConfig {
                init,
                ..cfg.classify_train()
            };
            let net = cfg.classify_network(ds.num_classes());
            trainer::train_classification(&ds, &tc, &net)?
        }
        Task::Detect => {
            let held: BTreeSet<usize> = match held_out {
                Some(s) => parse_class_list(s)?,
                None => cfg.train.held_out_classes.clone(),
            };
            let tc = trainer::TrainConfig {
                init,
                held_out_classes: held.clone(),
                ..cfg.detect_train()
            };
            let used = ds.withhold(&held)?;
            emit(out, &format!("held-out classes: {held:?}"))?;
            for (c, (n, boxes)) in class_tallies(used.records(), Some(Split::Train)) {
                emit(out, &format!("train class {c}: {n} images, {boxes} boxes used"))?;
            }
            trainer::train_detection(&ds, &tc, &cfg.network)?
        }
    };
    if let Some(src) = &outcome.log.init_from {
        emit(out, &format!("head swap from {src}"))?;
    }
    for e in &outcome.log.entries {
        let val = e.val_metric.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        emit(
            out,
            &format!(
                "epoch {} lr {} loss {:.4} {} {val} ({:.1}s)",
                e.epoch,
                e.learning_rate,
                e.train_loss,
                outcome.log.metric.name(),
                e.seconds
            ),
        )?;
    }
    outcome.checkpoint.save(ckpt_path)?;
    let log_path = ckpt_path.with_extension("log.csv");
    outcome.log.write_csv(&log_path)?;
    emit(out, &format!("checkpoint {}", ckpt_path.display()))?;
    emit(out, &format!("log {}", log_path.display()))
}

fn load_detector(path: &Path) -> Result<Model> {
    let model = Model::load(path)?;
    if model.head().kind() != HeadKind::BBox {
        return Err(Error::WrongHead {
            expected: HeadKind::BBox.name(),
            found: model.head().kind().name(),
        });
    }
    Ok(model)
}

fn detect(model: &Path, image: &Path, params: &NmsParams, out: &mut dyn Write) -> Result<()> {
    let model = load_detector(model)?;
    let img = data::load_image(image)?;
    let want = model.config().input_dims;
    if img.dims() != want {
        return Err(Error::Image {
            path: image.to_path_buf(),
            reason: format!("shape {:?}, the model expects {want:?}", img.dims()),
        });
    }
    let dist = predict_distribution(&model, &img)?;
    for d in nms(&dist, model.grid()?, params)? {
        let [x0, y0, x1, y1] = d.box_.to_array();
        emit(out, &format!("{:.6} {x0:.6} {y0:.6} {x1:.6} {y1:.6}", d.score))?;
    }
    Ok(())
}

fn evaluate(model: &Path, manifest: &Path, classes: Option<&str>, report: &Path, out: &mut dyn Write) -> Result<()> {
    let model = load_detector(model)?;
    let ds = load_dataset(manifest, Some(model.config().input_dims))?;
    let keep: Option<BTreeSet<usize>> = classes.map(parse_class_list).transpose()?;
    let idx: Vec<usize> = ds
        .indices(Split::Val)
        .into_iter()
        .filter(|&i| keep.as_ref().is_none_or(|k| k.contains(&ds.class_id(i))))
        .collect();
    if idx.iter().all(|&i| !ds.has_bbox_labels(i)) {
        return Err(Error::Data("no labeled validation records to evaluate".into()));
    }
    let rep = eval::evaluate_model(&model, &ds, &idx, &NmsParams::default(), eval::DEFAULT_MATCH_IOU)?;
    rep.write_csv(report)?;
    emit(out, &format!("images {} ground truth {}", idx.len(), rep.total_gt))?;
    emit(out, &format!("auc {:.6}", rep.auc))
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(Error::Config(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn experiment(protocol: Protocol, cfg: &RunConfig, dir: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    prepare_out_dir(dir, force)?;
    let (manifest, _) = data::generate(&cfg.data, &dir.join("data"))?;
    let ds = load_dataset(&manifest, Some(cfg.network.input_dims))?;
    let exp = cfg.experiment();
    let mut progress = |s: &str| eprintln!("{s}");
    match protocol {
        Protocol::Heldout => {
            let rep = trainer::run_heldout_experiment(&ds, &exp, &mut progress)?;
            rep.write(dir)?;
            emit(out, &format!("held-out classes {:?}", rep.held_out_classes))?;
            emit(out, "cell                 auc_heldout  auc_all")?;
            for c in trainer::Cell::ALL {
                emit(
                    out,
                    &format!("{:<20} {:>11.4} {:>8.4}", c.label(), rep.mean_auc(c, true), rep.mean_auc(c, false)),
                )?;
            }
            emit(
                out,
                &format!("{:<20} {:>11.4} {:>8.4}", "uniform", rep.baseline_heldout, rep.baseline_all),
            )?;
        }
        Protocol::Transfer => {
            let rep = trainer::run_recognition_transfer(&ds, &exp, &mut progress)?;
            rep.write(dir)?;
            let (p1, r1) = rep.mean_top1();
            let (p5, r5) = rep.mean_top5();
            emit(out, "init          top1     top5")?;
            emit(out, &format!("detection  {p1:>7.4}  {p5:>7.4}"))?;
            emit(out, &format!("random     {r1:>7.4}  {r5:>7.4}"))?;
        }
    }
    emit(out, &format!("summary {}", dir.join("summary.csv").display()))
}
