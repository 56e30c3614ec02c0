mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;

use common::MemSource;
use objn_core::data::{self, Dataset, SampleSource, Split, SynthConfig};
use objn_core::layers::LayerSpec;
use objn_core::loss::softmax_xent_soft;
use objn_core::trainer::{
    sgd_step, train_classification, train_detection, train_detection_from, SgdParams, TrainConfig,
};
use objn_core::{BBox, BBoxGrid, HeadSpec, Model, NetworkConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_images: 64,
        val_images: 24,
        ..SynthConfig::default()
    };
    let (m, _) = data::generate(&cfg, dir.path()).unwrap();
    let ds = Dataset::from_manifest(&m).unwrap();
    (dir, ds)
}

fn bbox_net() -> NetworkConfig {
    NetworkConfig::desk_default(HeadSpec::BBox { grid: BBoxGrid::default() })
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (_d, ds) = tiny_dataset();
    let net = bbox_net();
    let cfg = TrainConfig { learning_rate: 0.0, ..quick(2) };
    let out = train_detection(&ds, &cfg, &net).unwrap();
    let init = Model::build(&net).unwrap().checkpoint();
    assert_eq!(out.checkpoint.to_bytes().unwrap(), init.to_bytes().unwrap());
    let cls = net.with_head(HeadSpec::Classification { num_classes: 10 });
    let out = train_classification(&ds, &cfg, &cls).unwrap();
    assert_eq!(out.checkpoint.to_bytes().unwrap(), Model::build(&cls).unwrap().checkpoint().to_bytes().unwrap());
}

#[test]
fn training_is_reproducible() {
    let (_d, ds) = tiny_dataset();
    let a = train_detection(&ds, &quick(2), &bbox_net()).unwrap();
    let b = train_detection(&ds, &quick(2), &bbox_net()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let c = train_detection(&ds, &TrainConfig { seed: 1, ..quick(2) }, &bbox_net()).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn repeated_minibatch_loss_never_increases() {
    let (_d, ds) = tiny_dataset();
    let net = bbox_net();
    let grid = BBoxGrid::default();
    let mut model = Model::build(&net).unwrap();
    let idx: Vec<usize> = ds.indices(Split::Train).into_iter().take(16).collect();
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| ds.image(i)).collect();
    let x = Tensor::stack(&imgs).unwrap();
    let t: Vec<_> = idx.iter().map(|&i| grid.target_distribution(ds.boxes(i)).unwrap()).collect();
    let d = TrainConfig::default();
    let sgd = SgdParams { learning_rate: 1e-3, momentum: d.momentum, weight_decay: d.weight_decay };
    let mut v: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.value.dims())).collect();
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let acts = model.forward_train(&x).unwrap();
        let (loss, g) = softmax_xent_soft(&acts.logits, &t).unwrap();
        assert!(loss <= last, "step {step}: loss rose from {last} to {loss}");
        last = loss;
        let grads = model.backward(&acts, &g).unwrap();
        let mut ps: Vec<&mut Tensor<f32>> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        sgd_step(&mut ps, &grads, &mut v, &sgd).unwrap();
    }
}

/// Records every box lookup so the test can check which records were read.
struct Spy<'a> {
    inner: &'a Dataset,
    unlabeled: BTreeSet<usize>,
    reads: RefCell<BTreeSet<usize>>,
}

impl SampleSource for Spy<'_> {
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
        !self.unlabeled.contains(&i)
    }
    fn boxes(&self, i: usize) -> &[BBox] {
        self.reads.borrow_mut().insert(i);
        self.inner.boxes(i)
    }
    fn image(&self, i: usize) -> &Tensor<f32> {
        self.inner.image(i)
    }
}

#[test]
fn detection_never_reads_withheld_boxes() {
    let (_d, ds) = tiny_dataset();
    let unlabeled: BTreeSet<usize> = (0..ds.len()).filter(|&i| ds.class_id(i) == 9).collect();
    let spy = Spy { inner: &ds, unlabeled: unlabeled.clone(), reads: RefCell::new(BTreeSet::new()) };
    let cfg = TrainConfig { held_out_classes: [8].into(), ..quick(1) };
    train_detection(&spy, &cfg, &bbox_net()).unwrap();
    let reads = spy.reads.borrow();
    assert!(!reads.is_empty());
    for &i in reads.iter() {
        assert!(!unlabeled.contains(&i), "read boxes of unlabeled record {i}");
        assert_ne!(ds.class_id(i), 8, "read boxes of held-out record {i}");
    }
}

#[test]
fn all_classes_held_out_is_rejected() {
    let (_d, ds) = tiny_dataset();
    let cfg = TrainConfig { held_out_classes: (0..10).collect(), ..quick(1) };
    let err = train_detection(&ds, &cfg, &bbox_net()).unwrap_err();
    assert!(err.to_string().contains("no bbox-labeled"), "{err}");
}

#[test]
fn classification_init_changes_detection_run() {
    let (_d, ds) = tiny_dataset();
    let cls_net = bbox_net().with_head(HeadSpec::Classification { num_classes: 10 });
    let pre = train_classification(&ds, &quick(1), &cls_net).unwrap();
    let from_pre = train_detection_from(&ds, &quick(1), &bbox_net(), Some(&pre.checkpoint)).unwrap();
    let random = train_detection(&ds, &quick(1), &bbox_net()).unwrap();
    assert!(Model::from_checkpoint(&from_pre.checkpoint).is_ok());
    assert!(Model::from_checkpoint(&random.checkpoint).is_ok());
    assert!(from_pre.log.init_from.is_some());
    assert_ne!(from_pre.log, random.log);
}

#[test]
fn separable_two_class_toy_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut src = MemSource { images: vec![], classes: vec![], boxes: vec![], labeled: vec![], splits: vec![] };
    for i in 0..240 {
        let class = i % 2;
        let shift = if class == 0 { 0.25 } else { -0.25 };
        let v: Vec<f64> = (0..3 * 8 * 8).map(|k| rng.random_range(-0.2..0.2) + if k < 64 { shift } else { 0.0 }).collect();
        src.images.push(Tensor::from_f64(&[3, 8, 8], &v).unwrap());
        src.classes.push(class);
        src.boxes.push(vec![]);
        src.labeled.push(false);
        src.splits.push(if i < 200 { Split::Train } else { Split::Val });
    }
    let trunk: Vec<LayerSpec> = "conv(4,3,1,1) relu maxpool(2,2) dense(8) relu"
        .split_whitespace()
        .map(|s| s.parse().unwrap())
        .collect();
    let net = NetworkConfig {
        input_dims: [3, 8, 8],
        trunk,
        feature_dim: 8,
        head: HeadSpec::Classification { num_classes: 2 },
        init_seed: 0,
        init_std: None,
    };
    let out = train_classification(&src, &TrainConfig { epochs: 20, batch_size: 10, ..TrainConfig::default() }, &net).unwrap();
    let err = out.log.best_metric().unwrap();
    assert!(err < 0.05, "top-1 error {err}");
}
