//! Run configuration: one TOML document whose dotted keys cover data
//! generation, network, grid, NMS, optimizer and experiment settings.
//!
//! Every key is optional and falls back to the defaults in
//! `configs/default.toml`; unknown keys are rejected by name.

use std::collections::BTreeSet;
use std::path::Path;

use crate::bbox::BBoxGrid;
use crate::data::SynthConfig;
use crate::detector::NmsParams;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_MATCH_IOU;
use crate::layers::LayerSpec;
use crate::model::{HeadSpec, NetworkConfig};
use crate::trainer::{ExperimentConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: SynthConfig,
    /// Network with the bbox head built from `grid`.
    pub network: NetworkConfig,
    pub grid: BBoxGrid,
    pub nms: NmsParams,
    /// Optimizer settings shared by both tasks; epochs come from the fields below.
    pub train: TrainConfig,
    pub classify_epochs: usize,
    pub detect_epochs: usize,
    pub iou_match: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = BBoxGrid::default();
        RunConfig {
            data: SynthConfig::default(),
            network: NetworkConfig::desk_default(HeadSpec::BBox { grid }),
            grid,
            nms: NmsParams::default(),
            train: TrainConfig {
                held_out_classes: [8, 9].into(),
                ..TrainConfig::default()
            },
            classify_epochs: 5,
            detect_epochs: 5,
            iou_match: DEFAULT_MATCH_IOU,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            v => out.push((key, v.clone())),
        }
    }
}

fn bad(key: &str, want: &str, v: &toml::Value) -> Error {
    Error::Config(format!("`{key}` must be {want}, got {v}"))
}

fn float(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn uint(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn usize_(key: &str, v: &toml::Value) -> Result<usize> {
    uint(key, v).map(|u| u as usize)
}

fn floats<const N: usize>(key: &str, v: &toml::Value) -> Result<[f64; N]> {
    let arr = v.as_array().filter(|a| a.len() == N).ok_or_else(|| bad(key, &format!("an array of {N} numbers"), v))?;
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = float(key, x)?;
    }
    Ok(out)
}

fn uints(key: &str, v: &toml::Value) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| bad(key, "an array of integers", v))?
        .iter()
        .map(|x| uint(key, x))
        .collect()
}

fn pair(key: &str, v: &toml::Value) -> Result<(f64, f64)> {
    floats::<2>(key, v).map(|[a, b]| (a, b))
}

/// Parses a comma-separated class list such as `"8,9"`.
pub fn parse_class_list(s: &str) -> Result<BTreeSet<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("`{t}` is not a class id")))
        })
        .collect()
}

/// Trunk layers from whitespace-separated layer specs.
pub fn parse_trunk(s: &str) -> Result<Vec<LayerSpec>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|e| Error::Config(format!("trunk layer `{t}`: {e}"))))
        .collect()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        let mut c = RunConfig::default();
        let mut init_std = None;
        for (key, v) in &entries {
            let k = key.as_str();
            match k {
                "data.num_classes" => c.data.num_classes = usize_(k, v)?,
                "data.train_images" => c.data.train_images = usize_(k, v)?,
                "data.val_images" => c.data.val_images = usize_(k, v)?,
                "data.image_size" => c.data.image_size = usize_(k, v)?,
                "data.max_objects" => c.data.max_objects = usize_(k, v)?,
                "data.object_scale" => c.data.object_scale = pair(k, v)?,
                "data.aspect_jitter" => c.data.aspect_jitter = pair(k, v)?,
                "data.clutter_density" => c.data.clutter_density = float(k, v)?,
                "data.seed" => c.data.seed = uint(k, v)?,

                "network.trunk" => {
                    let s = v.as_str().ok_or_else(|| bad(k, "a string of layer specs", v))?;
                    c.network.trunk = parse_trunk(s)?;
                }
                "network.feature_dim" => c.network.feature_dim = usize_(k, v)?,
                "network.init_seed" => c.network.init_seed = uint(k, v)?,
                "network.init_std" => init_std = Some(float(k, v)?),

                "grid.nx" => c.grid.nx = usize_(k, v)?,
                "grid.ny" => c.grid.ny = usize_(k, v)?,
                "grid.scales" => c.grid.ns = usize_(k, v)?,
                "grid.aspects" => c.grid.na = usize_(k, v)?,
                "grid.scale_range" => c.grid.scale_range = pair(k, v)?,
                "grid.aspect_range" => c.grid.aspect_range = pair(k, v)?,
                "grid.sigma" => c.grid.sigma = floats::<4>(k, v)?,

                "nms.iou_threshold" => c.nms.iou_threshold = float(k, v)?,
                "nms.score_threshold" => c.nms.score_threshold = float(k, v)?,
                "nms.max_detections" => c.nms.max_detections = usize_(k, v)?,

                "train.learning_rate" => c.train.learning_rate = float(k, v)?,
                "train.momentum" => c.train.momentum = float(k, v)?,
                "train.weight_decay" => c.train.weight_decay = float(k, v)?,
                "train.batch_size" => c.train.batch_size = usize_(k, v)?,
                "train.lr_decay" => c.train.lr_decay = float(k, v)?,
                "train.lr_decay_every" => c.train.lr_decay_every = usize_(k, v)?,
                "train.seed" => c.train.seed = uint(k, v)?,
                "train.classify_epochs" => c.classify_epochs = usize_(k, v)?,
                "train.detect_epochs" => c.detect_epochs = usize_(k, v)?,
                "train.held_out_classes" => {
                    c.train.held_out_classes = uints(k, v)?.into_iter().map(|u| u as usize).collect()
                }

                "eval.iou_match" => c.iou_match = float(k, v)?,
                "experiment.seeds" => c.seeds = uints(k, v)?,
                _ => return Err(Error::UnknownKey(key.clone())),
            }
        }
        c.network.init_std = init_std;
        c.network.input_dims = [3, c.data.image_size, c.data.image_size];
        c.network.head = HeadSpec::BBox { grid: c.grid };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.grid.validate()?;
        self.nms.validate()?;
        self.train.validate()?;
        self.network.validate()?;
        if !(0.0..=1.0).contains(&self.iou_match) {
            return Err(Error::Config(format!("eval.iou_match must lie in [0,1], got {}", self.iou_match)));
        }
        if let Some(c) = self.train.held_out_classes.iter().find(|&&c| c >= self.data.num_classes) {
            return Err(Error::Config(format!(
                "held-out class {c} is outside 0..{}",
                self.data.num_classes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn classify_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.classify_epochs,
            held_out_classes: BTreeSet::new(),
            ..self.train.clone()
        }
    }

    pub fn detect_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.detect_epochs,
            ..self.train.clone()
        }
    }

    pub fn classify_network(&self, num_classes: usize) -> NetworkConfig {
        self.network.with_head(HeadSpec::Classification { num_classes })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            network: self.network.clone(),
            classify: self.classify_train(),
            detect: self.detect_train(),
            seeds: self.seeds.clone(),
            nms: self.nms,
            iou_match: self.iou_match,
        }
    }
}
