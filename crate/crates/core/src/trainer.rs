//! Momentum SGD and the training protocols: classification, detection with
//! optionally withheld box labels, and the two pretraining experiments.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, CellDistribution};
use crate::checkpoint::Checkpoint;
use crate::data::{SampleSource, Split};
use crate::detector::NmsParams;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, DEFAULT_MATCH_IOU};
use crate::loss::softmax_xent_soft;
use crate::model::{head_swap, HeadSpec, Model, NetworkConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiply the learning rate by this factor every `lr_decay_every` epochs.
    pub lr_decay: f64,
    /// 0 disables decay.
    pub lr_decay_every: usize,
    pub held_out_classes: BTreeSet<usize>,
    /// Checkpoint to start from (through a head swap); `None` means random init.
    pub init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            lr_decay: 0.1,
            lr_decay_every: 0,
            held_out_classes: BTreeSet::new(),
            init: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!("lr_decay must be > 0, got {}", self.lr_decay)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            every => self.learning_rate * self.lr_decay.powi((epoch / every) as i32),
        }
    }

    fn sgd(&self, epoch: usize) -> SgdParams {
        SgdParams {
            learning_rate: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v - lr * (g + weight_decay * p)`, then `p <- p + v`.
pub fn sgd_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    velocity: &mut [Tensor<f32>],
    sgd: &SgdParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.dims() != g.dims() || p.dims() != v.dims() {
            return Err(Error::Shape(format!(
                "parameter {i}: {:?}, gradient {:?}, velocity {:?}",
                p.dims(),
                g.dims(),
                v.dims()
            )));
        }
    }
    let lr = sgd.learning_rate as f32;
    let m = sgd.momentum as f32;
    let wd = sgd.weight_decay as f32;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = m * *v - lr * (g + wd * *p);
            *p += *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1Error,
    DetectionAuc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Top1Error => "top1_error",
            Metric::DetectionAuc => "detection_auc",
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Top1Error => a < b,
            Metric::DetectionAuc => a > b,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// `None` when there is no validation data.
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

/// Wall time is not compared.
impl PartialEq for EpochEntry {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.learning_rate.to_bits() == o.learning_rate.to_bits()
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.val_metric.map(f64::to_bits) == o.val_metric.map(f64::to_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub metric: Metric,
    pub entries: Vec<EpochEntry>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub train_records: usize,
    pub val_records: usize,
    pub init_from: Option<String>,
}

impl TrainLog {
    pub fn best_metric(&self) -> Option<f64> {
        self.best_epoch.and_then(|e| self.entries[e].val_metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,learning_rate,train_loss,{},seconds\n", self.metric.name());
        for e in &self.entries {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.learning_rate, e.train_loss, val, e.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// View of a source with box labels hidden for some classes; the boxes of those
/// records are never read through it.
pub struct Withheld<'a, S> {
    inner: &'a S,
    held_out: &'a BTreeSet<usize>,
}

impl<'a, S: SampleSource> Withheld<'a, S> {
    pub fn new(inner: &'a S, held_out: &'a BTreeSet<usize>) -> Result<Self> {
        let observed: BTreeSet<usize> = (0..inner.len()).map(|i| inner.class_id(i)).collect();
        if let Some(c) = held_out.iter().find(|c| !observed.contains(c)) {
            return Err(Error::Data(format!("held-out class {c} does not occur in the data")));
        }
        Ok(Withheld { inner, held_out })
    }
}

impl<S: SampleSource> SampleSource for Withheld<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn split(&self, i: usize) -> Split {
        self.inner.split(i)
    }
    fn class_id(&self, i: usize) -> usize {
        self.inner.class_id(i)
    }
    fn has_bbox_labels(&self, i: usize) -> bool {
        !self.held_out.contains(&self.inner.class_id(i)) && self.inner.has_bbox_labels(i)
    }
    fn boxes(&self, i: usize) -> &[BBox] {
        if self.held_out.contains(&self.inner.class_id(i)) {
            &[]
        } else {
            self.inner.boxes(i)
        }
    }
    fn image(&self, i: usize) -> &Tensor<f32> {
        self.inner.image(i)
    }
}

fn start_model(
    net: &NetworkConfig,
    init: Option<&Checkpoint>,
) -> Result<Model> {
    match init {
        Some(ckpt) => head_swap(ckpt, net),
        None => Model::build(net),
    }
}

fn load_init(cfg: &TrainConfig) -> Result<Option<Checkpoint>> {
    cfg.init.as_ref().map(Checkpoint::load).transpose()
}

/// Shared minibatch loop. `targets[j]` belongs to `train[j]`; `validate`
/// scores the current model.
#[allow(clippy::too_many_arguments)]
fn fit<S: SampleSource>(
    source: &S,
    cfg: &TrainConfig,
    mut model: Model,
    train: &[usize],
    targets: &[CellDistribution],
    metric: Metric,
    val_records: usize,
    init_from: Option<String>,
    validate: &dyn Fn(&Model) -> Result<Option<f64>>,
) -> Result<TrainOutcome> {
    let mut velocity: Vec<Tensor<f32>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.dims()))
        .collect();
    let mut log = TrainLog {
        metric,
        entries: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        train_records: train.len(),
        val_records,
        init_from,
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let sgd = cfg.sgd(epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor<f32>> = batch.iter().map(|&j| source.image(train[j])).collect();
            let x = Tensor::stack(&imgs)?;
            let t: Vec<CellDistribution> = batch.iter().map(|&j| targets[j].clone()).collect();
            let acts = model.forward_train(&x)?;
            let (loss, d_logits) = softmax_xent_soft(&acts.logits, &t)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += loss * batch.len() as f64;
            let grads = model.backward(&acts, &d_logits)?;
            let mut params: Vec<&mut Tensor<f32>> =
                model.params_mut().iter_mut().map(|p| &mut p.value).collect();
            sgd_step(&mut params, &grads, &mut velocity, &sgd)?;
        }
        let val = validate(&model)?;
        log.entries.push(EpochEntry {
            epoch,
            learning_rate: sgd.learning_rate,
            train_loss: loss_sum / train.len() as f64,
            val_metric: val,
            seconds: started.elapsed().as_secs_f64(),
        });
        // without validation data the last epoch is kept
        let improved = match (val, &best) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(v), Some((b, _))) => metric.better(v, *b),
        };
        if improved {
            best = Some((val.unwrap_or(f64::NAN), model.checkpoint()));
            log.best_epoch = Some(epoch);
        }
    }
    let checkpoint = best.map(|(_, c)| c).unwrap_or_else(|| model.checkpoint());
    Ok(TrainOutcome { checkpoint, log })
}

fn label_source(init: Option<&Checkpoint>, path: Option<&PathBuf>) -> Option<String> {
    init.map(|c| match path {
        Some(p) => format!("{} ({} head)", p.display(), c.head_kind().name()),
        None => format!("in-memory {} checkpoint", c.head_kind().name()),
    })
}

/// Trains a classification head on one-hot class targets.
pub fn train_classification<S: SampleSource>(
    source: &S,
    cfg: &TrainConfig,
    net: &NetworkConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = load_init(cfg)?;
    train_classification_from(source, cfg, net, init.as_ref())
}

/// [`train_classification`] with an in-memory initial checkpoint; `cfg.init`
/// is ignored.
pub fn train_classification_from<S: SampleSource>(
    source: &S,
    cfg: &TrainConfig,
    net: &NetworkConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let HeadSpec::Classification { num_classes } = net.head else {
        return Err(Error::Config("classification training needs a classification head".into()));
    };
    let train = source.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let targets = train
        .iter()
        .map(|&i| {
            let c = source.class_id(i);
            CellDistribution::one_hot(num_classes, c).map_err(|_| {
                Error::Data(format!("record {i} has class {c}, head has {num_classes} classes"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let val = source.indices(Split::Val);
    let model = start_model(net, init)?;
    let validate = |m: &Model| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        eval::topk_error(m, source, &val, 1).map(Some)
    };
    fit(
        source,
        cfg,
        model,
        &train,
        &targets,
        Metric::Top1Error,
        val.len(),
        label_source(init, cfg.init.as_ref()),
        &validate,
    )
}

/// Trains a box head on smoothed cell targets, using only records that still
/// carry box labels after `cfg.held_out_classes` are withheld.
pub fn train_detection<S: SampleSource>(
    source: &S,
    cfg: &TrainConfig,
    net: &NetworkConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = load_init(cfg)?;
    train_detection_from(source, cfg, net, init.as_ref())
}

/// [`train_detection`] with an in-memory initial checkpoint; `cfg.init` is
/// ignored.
pub fn train_detection_from<S: SampleSource>(
    source: &S,
    cfg: &TrainConfig,
    net: &NetworkConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let HeadSpec::BBox { grid } = &net.head else {
        return Err(Error::Config("detection training needs a bbox head".into()));
    };
    let source = Withheld::new(source, &cfg.held_out_classes)?;
    let labeled = |split| -> Vec<usize> {
        source
            .indices(split)
            .into_iter()
            .filter(|&i| source.has_bbox_labels(i))
            .collect()
    };
    let train = labeled(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("no bbox-labeled records in the training split".into()));
    }
    let targets = train
        .iter()
        .map(|&i| grid.target_distribution(source.boxes(i)))
        .collect::<Result<Vec<_>>>()?;
    let val = labeled(Split::Val);
    let model = start_model(net, init)?;
    let nms = NmsParams::default();
    let validate = |m: &Model| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        eval::evaluate_model(m, &source, &val, &nms, DEFAULT_MATCH_IOU).map(|r| Some(r.auc))
    };
    fit(
        &source,
        cfg,
        model,
        &train,
        &targets,
        Metric::DetectionAuc,
        val.len(),
        label_source(init, cfg.init.as_ref()),
        &validate,
    )
}

/// Settings shared by both experiment protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Network with a bbox head; classification variants swap the head.
    pub network: NetworkConfig,
    pub classify: TrainConfig,
    /// `held_out_classes` here defines the held-out set of the experiment.
    pub detect: TrainConfig,
    pub seeds: Vec<u64>,
    pub nms: NmsParams,
    pub iou_match: f64,
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        self.network.validate()?;
        self.classify.validate()?;
        self.detect.validate()?;
        self.nms.validate()?;
        if !matches!(self.network.head, HeadSpec::BBox { .. }) {
            return Err(Error::Config("experiment network must have a bbox head".into()));
        }
        Ok(())
    }

    fn seeded(&self, seed: u64, num_classes: usize) -> (NetworkConfig, NetworkConfig, TrainConfig, TrainConfig) {
        let det_net = NetworkConfig {
            init_seed: seed,
            ..self.network.clone()
        };
        let cls_net = det_net.with_head(HeadSpec::Classification { num_classes });
        let cls = TrainConfig {
            seed,
            init: None,
            held_out_classes: BTreeSet::new(),
            ..self.classify.clone()
        };
        let det = TrainConfig {
            seed,
            init: None,
            ..self.detect.clone()
        };
        (det_net, cls_net, cls, det)
    }
}

/// Progress messages from long-running protocols.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub pretrained: bool,
    pub withheld: bool,
}

impl Cell {
    pub const ALL: [Cell; 4] = [
        Cell { pretrained: true, withheld: true },
        Cell { pretrained: false, withheld: true },
        Cell { pretrained: true, withheld: false },
        Cell { pretrained: false, withheld: false },
    ];

    pub fn label(self) -> &'static str {
        match (self.pretrained, self.withheld) {
            (true, true) => "pretrained_withheld",
            (false, true) => "random_withheld",
            (true, false) => "pretrained_allboxes",
            (false, false) => "random_allboxes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldoutRow {
    pub seed: u64,
    pub cell: Cell,
    /// AUC on validation images of the held-out classes.
    pub auc_heldout: f64,
    /// AUC on all validation images.
    pub auc_all: f64,
}

#[derive(Debug, Clone)]
pub struct HeldoutReport {
    pub held_out_classes: BTreeSet<usize>,
    pub rows: Vec<HeldoutRow>,
    /// Uniform-distribution AUC on the held-out validation images.
    pub baseline_heldout: f64,
    pub baseline_all: f64,
    /// Held-out PR curves and checkpoints of the first seed, one per cell.
    pub curves: Vec<(Cell, EvalReport)>,
    pub checkpoints: Vec<(Cell, Checkpoint)>,
    pub logs: Vec<(u64, String, TrainLog)>,
}

impl HeldoutReport {
    pub fn mean_auc(&self, cell: Cell, heldout_eval: bool) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| if heldout_eval { r.auc_heldout } else { r.auc_all })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("seed,cell,auc_heldout,auc_all\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.seed, r.cell.label(), r.auc_heldout, r.auc_all));
        }
        for c in Cell::ALL {
            s.push_str(&format!("mean,{},{},{}\n", c.label(), self.mean_auc(c, true), self.mean_auc(c, false)));
        }
        s.push_str(&format!(
            "baseline,uniform,{},{}\n",
            self.baseline_heldout, self.baseline_all
        ));
        s
    }

    /// Writes `summary.csv`, `pr_<cell>.csv`, `<cell>.ckpt` and per-run logs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("summary.csv"), &self.summary_csv())?;
        for (cell, rep) in &self.curves {
            rep.write_csv(&dir.join(format!("pr_{}.csv", cell.label())))?;
        }
        for (cell, ckpt) in &self.checkpoints {
            ckpt.save(dir.join(format!("{}.ckpt", cell.label())))?;
        }
        write_logs(dir, &self.logs)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_logs(dir: &Path, logs: &[(u64, String, TrainLog)]) -> Result<()> {
    let logs_dir = dir.join("logs");
    std::fs::create_dir_all(&logs_dir).map_err(|e| Error::io(&logs_dir, e))?;
    for (seed, name, log) in logs {
        log.write_csv(&logs_dir.join(format!("seed{seed}_{name}.csv")))?;
    }
    Ok(())
}

fn num_classes<S: SampleSource>(source: &S) -> usize {
    (0..source.len()).map(|i| source.class_id(i) + 1).max().unwrap_or(0)
}

/// The four-cell held-out experiment: {classification-pretrained, random init}
/// x {held-out boxes withheld, all boxes}, repeated per seed.
pub fn run_heldout_experiment<S: SampleSource>(
    source: &S,
    cfg: &ExperimentConfig,
    progress: Progress<'_>,
) -> Result<HeldoutReport> {
    cfg.validate()?;
    let held = cfg.detect.held_out_classes.clone();
    if held.is_empty() {
        return Err(Error::Config("held-out experiment needs held-out classes".into()));
    }
    Withheld::new(source, &held)?;
    let val = source.indices(Split::Val);
    let val_held: Vec<usize> = val
        .iter()
        .copied()
        .filter(|&i| held.contains(&source.class_id(i)))
        .collect();
    let grid = match &cfg.network.head {
        HeadSpec::BBox { grid } => *grid,
        HeadSpec::Classification { .. } => unreachable!("validated"),
    };
    let baseline_heldout = eval::uniform_baseline(&grid, source, &val_held, &cfg.nms, cfg.iou_match)?.auc;
    let baseline_all = eval::uniform_baseline(&grid, source, &val, &cfg.nms, cfg.iou_match)?.auc;
    let classes = num_classes(source);

    let mut report = HeldoutReport {
        held_out_classes: held.clone(),
        rows: Vec::new(),
        baseline_heldout,
        baseline_all,
        curves: Vec::new(),
        checkpoints: Vec::new(),
        logs: Vec::new(),
    };
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let (det_net, cls_net, cls_cfg, det_cfg) = cfg.seeded(seed, classes);
        progress(&format!("seed {seed}: classification pretraining"));
        let pre = train_classification_from(source, &cls_cfg, &cls_net, None)?;
        report.logs.push((seed, "pretrain_classification".into(), pre.log));
        for cell in Cell::ALL {
            progress(&format!("seed {seed}: detection {}", cell.label()));
            let det_cfg = TrainConfig {
                held_out_classes: if cell.withheld { held.clone() } else { BTreeSet::new() },
                ..det_cfg.clone()
            };
            let init = cell.pretrained.then_some(&pre.checkpoint);
            let out = train_detection_from(source, &det_cfg, &det_net, init)?;
            let model = Model::from_checkpoint(&out.checkpoint)?;
            let on_held = eval::evaluate_model(&model, source, &val_held, &cfg.nms, cfg.iou_match)?;
            let on_all = eval::evaluate_model(&model, source, &val, &cfg.nms, cfg.iou_match)?;
            progress(&format!(
                "seed {seed}: {} auc held-out {:.4}, all {:.4}",
                cell.label(),
                on_held.auc,
                on_all.auc
            ));
            report.rows.push(HeldoutRow {
                seed,
                cell,
                auc_heldout: on_held.auc,
                auc_all: on_all.auc,
            });
            report.logs.push((seed, cell.label().into(), out.log));
            if si == 0 {
                report.curves.push((cell, on_held));
                report.checkpoints.push((cell, out.checkpoint));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub seed: u64,
    pub pretrained_top1: f64,
    pub pretrained_top5: f64,
    pub random_top1: f64,
    pub random_top5: f64,
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
    pub logs: Vec<(u64, String, TrainLog)>,
}

impl TransferReport {
    fn mean(&self, f: impl Fn(&TransferRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean top-1 error of (detection-pretrained, random-init) classifiers.
    pub fn mean_top1(&self) -> (f64, f64) {
        (self.mean(|r| r.pretrained_top1), self.mean(|r| r.random_top1))
    }

    pub fn mean_top5(&self) -> (f64, f64) {
        (self.mean(|r| r.pretrained_top5), self.mean(|r| r.random_top5))
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("seed,pretrained_top1,pretrained_top5,random_top1,random_top5\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.seed, r.pretrained_top1, r.pretrained_top5, r.random_top1, r.random_top5
            ));
        }
        let (p1, r1) = self.mean_top1();
        let (p5, r5) = self.mean_top5();
        s.push_str(&format!("mean,{p1},{p5},{r1},{r5}\n"));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("summary.csv"), &self.summary_csv())?;
        write_logs(dir, &self.logs)
    }
}

/// Detection-pretrained vs randomly initialized classifiers with equal
/// classification budgets.
pub fn run_recognition_transfer<S: SampleSource>(
    source: &S,
    cfg: &ExperimentConfig,
    progress: Progress<'_>,
) -> Result<TransferReport> {
    cfg.validate()?;
    let classes = num_classes(source);
    let k5 = classes.min(5);
    let val = source.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("transfer experiment needs a validation split".into()));
    }
    let mut report = TransferReport {
        rows: Vec::new(),
        logs: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let (det_net, cls_net, cls_cfg, det_cfg) = cfg.seeded(seed, classes);
        let det_cfg = TrainConfig {
            held_out_classes: BTreeSet::new(),
            ..det_cfg
        };
        progress(&format!("seed {seed}: detection pretraining"));
        let det = train_detection_from(source, &det_cfg, &det_net, None)?;
        report.logs.push((seed, "pretrain_detection".into(), det.log));
        let mut errs = Vec::new();
        for (name, init) in [("classify_pretrained", Some(&det.checkpoint)), ("classify_random", None)] {
            progress(&format!("seed {seed}: {name}"));
            let out = train_classification_from(source, &cls_cfg, &cls_net, init)?;
            let model = Model::from_checkpoint(&out.checkpoint)?;
            let e = eval::topk_errors(&model, source, &val, &[1, k5])?;
            progress(&format!("seed {seed}: {name} top-1 {:.4}, top-{k5} {:.4}", e[0], e[1]));
            errs.push(e);
            report.logs.push((seed, name.into(), out.log));
        }
        report.rows.push(TransferRow {
            seed,
            pretrained_top1: errs[0][0],
            pretrained_top5: errs[0][1],
            random_top1: errs[1][0],
            random_top5: errs[1][1],
        });
    }
    Ok(report)
}
