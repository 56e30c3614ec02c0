//! Network assembly: a trunk of [`LayerSpec`]s ending in a feature vector,
//! followed by a dense classification or bounding-box head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBoxGrid;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{self, LayerSpec, LrnParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadSpec {
    Classification { num_classes: usize },
    #[serde(rename = "bbox")]
    BBox { grid: BBoxGrid },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification = 0,
    BBox = 1,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::BBox => "bbox",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HeadKind::Classification),
            1 => Some(HeadKind::BBox),
            _ => None,
        }
    }
}

impl HeadSpec {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadSpec::Classification { .. } => HeadKind::Classification,
            HeadSpec::BBox { .. } => HeadKind::BBox,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            HeadSpec::Classification { num_classes } => *num_classes,
            HeadSpec::BBox { grid } => grid.num_cells(),
        }
    }
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input image shape `(C, H, W)`.
    pub input_dims: [usize; 3],
    pub trunk: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub head: HeadSpec,
    pub init_seed: u64,
    /// Standard deviation of the zero-mean Gaussian weight init. When absent,
    /// each layer uses `sqrt(2 / fan_in)` (`sqrt(1 / fan_in)` for the head).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

impl NetworkConfig {
    /// Desk-scale trunk: three conv stages and one dense feature layer.
    pub fn default_trunk() -> Vec<LayerSpec> {
        "conv(16,5,1,2) relu lrn maxpool(2,2) conv(32,5,1,2) relu lrn maxpool(2,2) \
         conv(32,3,1,1) relu dense(128) relu"
            .split_whitespace()
            .map(|s| s.parse().expect("default trunk parses"))
            .collect()
    }

    pub fn desk_default(head: HeadSpec) -> Self {
        NetworkConfig {
            input_dims: [3, 32, 32],
            trunk: Self::default_trunk(),
            feature_dim: 128,
            head,
            init_seed: 0,
            init_std: None,
        }
    }

    pub fn with_head(&self, head: HeadSpec) -> Self {
        NetworkConfig {
            head,
            ..self.clone()
        }
    }

    /// Shape after each trunk layer, validating the chain.
    pub fn trunk_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_dims.contains(&0) {
            return Err(Error::Config(format!(
                "input dims must be positive, got {:?}",
                self.input_dims
            )));
        }
        let mut shape = self.input_dims.to_vec();
        let mut shapes = Vec::with_capacity(self.trunk.len());
        for (i, spec) in self.trunk.iter().enumerate() {
            shape = spec.output_shape(&shape).map_err(|reason| Error::Build {
                layer: i,
                kind: spec.to_string(),
                reason,
            })?;
            shapes.push(shape.clone());
        }
        let flat: usize = shape.iter().product();
        if flat != self.feature_dim {
            return Err(Error::Build {
                layer: self.trunk.len().saturating_sub(1),
                kind: self
                    .trunk
                    .last()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "input".into()),
                reason: format!(
                    "trunk ends with {flat} features but feature_dim is {}",
                    self.feature_dim
                ),
            });
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(std) = self.init_std {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("init_std must be >= 0, got {std}")));
            }
        }
        if let HeadSpec::BBox { grid } = &self.head {
            grid.validate()?;
        }
        if self.head.outputs() == 0 {
            return Err(Error::Config("head must have at least one output".into()));
        }
        self.trunk_shapes().map(|_| ())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { stride: usize, pad: usize, w: usize, b: usize },
    Relu,
    Lrn(LrnParams),
    MaxPool { window: usize, stride: usize },
    Dense { w: usize, b: usize },
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

/// Per-layer inputs saved by [`Model::forward_train`], plus the logits.
#[derive(Debug)]
pub struct Activations {
    inputs: Vec<Tensor<f32>>,
    pub logits: Tensor<f32>,
}

impl Model {
    /// Builds a model with zero-mean Gaussian weights and zero biases.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.trunk_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        // gain 0 marks a zero-initialized bias
        let mut add = |name: String, dims: Vec<usize>, fan_in: usize, gain: f64, params: &mut Vec<Param>| {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = if gain > 0.0 {
                let std = config.init_std.unwrap_or_else(|| (gain / fan_in as f64).sqrt());
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (std * z) as f32
                    })
                    .collect()
            } else {
                vec![0.0; len]
            };
            params.push(Param {
                name,
                value: Tensor::new(dims, data).expect("consistent parameter dims"),
            });
            params.len() - 1
        };

        let mut in_shape = config.input_dims.to_vec();
        for (i, spec) in config.trunk.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel_size,
                    stride,
                    pad,
                } => {
                    let w = add(
                        format!("trunk.{i}.weight"),
                        vec![out_channels, in_shape[0], kernel_size, kernel_size],
                        in_shape[0] * kernel_size * kernel_size,
                        2.0,
                        &mut params,
                    );
                    let b = add(format!("trunk.{i}.bias"), vec![out_channels], 0, 0.0, &mut params);
                    Layer::Conv { stride, pad, w, b }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Lrn { k, n, alpha, beta } => Layer::Lrn(LrnParams { k, n, alpha, beta }),
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::Dense { out_features, .. } => {
                    let d: usize = in_shape.iter().product();
                    let w = add(
                        format!("trunk.{i}.weight"),
                        vec![d, out_features],
                        d,
                        2.0,
                        &mut params,
                    );
                    let b = add(format!("trunk.{i}.bias"), vec![out_features], 0, 0.0, &mut params);
                    Layer::Dense { w, b }
                }
            };
            layers.push(layer);
            in_shape = shapes[i].clone();
        }
        let outputs = config.head.outputs();
        let w = add(
            "head.weight".into(),
            vec![config.feature_dim, outputs],
            config.feature_dim,
            1.0,
            &mut params,
        );
        let b = add("head.bias".into(), vec![outputs], 0, 0.0, &mut params);
        layers.push(Layer::Dense { w, b });

        Ok(Model {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn head(&self) -> &HeadSpec {
        &self.config.head
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn grid(&self) -> Result<&BBoxGrid> {
        match &self.config.head {
            HeadSpec::BBox { grid } => Ok(grid),
            HeadSpec::Classification { .. } => Err(Error::WrongHead {
                expected: "bbox",
                found: "classification",
            }),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        match &self.config.head {
            HeadSpec::Classification { num_classes } => Ok(*num_classes),
            HeadSpec::BBox { .. } => Err(Error::WrongHead {
                expected: "classification",
                found: "bbox",
            }),
        }
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let d = x.dims();
        if d.len() != 4 || d[1..] != self.config.input_dims {
            return Err(Error::Shape(format!(
                "model expects N x {:?} input, got {d:?}",
                self.config.input_dims
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, layer: &Layer, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = |i: usize| &self.params[i].value;
        match *layer {
            Layer::Conv { stride, pad, w, b } => layers::conv2d_forward(x, p(w), p(b), stride, pad),
            Layer::Relu => Ok(layers::relu_forward(x)),
            Layer::Lrn(ref lp) => layers::lrn_forward(x, lp),
            Layer::MaxPool { window, stride } => layers::maxpool_forward(x, window, stride),
            Layer::Dense { w, b } => layers::dense_forward(x, p(w), p(b)),
        }
    }

    /// Head logits `[N, outputs]` for an image batch `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let mut cur = self.layer_forward(&self.layers[0], x)?;
        for layer in &self.layers[1..] {
            cur = self.layer_forward(layer, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_train(&self, x: &Tensor<f32>) -> Result<Activations> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = self.layer_forward(layer, &cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(Activations {
            inputs,
            logits: cur,
        })
    }

    /// Gradients for every parameter, aligned with [`Model::params`].
    pub fn backward(&self, acts: &Activations, d_logits: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        if d_logits.dims() != acts.logits.dims() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                d_logits.dims(),
                acts.logits.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; self.params.len()];
        let mut d = d_logits.clone();
        let p = |i: usize| &self.params[i].value;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts.inputs[li];
            let first = li == 0;
            d = match *layer {
                Layer::Conv { stride, pad, w, b } => {
                    let g = layers::conv2d_backward(x, p(w), &d, stride, pad)?;
                    grads[w] = Some(g.d_weights);
                    grads[b] = Some(g.d_bias);
                    g.d_input
                }
                Layer::Dense { w, b } => {
                    let g = layers::dense_backward(x, p(w), &d)?;
                    grads[w] = Some(g.d_weights);
                    grads[b] = Some(g.d_bias);
                    g.d_input.reshape(x.dims())?
                }
                // the input gradient of the first layer is never needed
                _ if first => break,
                Layer::Relu => layers::relu_backward(x, &d)?,
                Layer::Lrn(ref lp) => layers::lrn_backward(x, &d, lp)?,
                Layer::MaxPool { window, stride } => layers::maxpool_backward(x, &d, window, stride)?,
            };
        }
        Ok(grads
            .into_iter()
            .map(|g| g.expect("every parameter receives a gradient"))
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.config.clone(),
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        )
    }

    /// Rebuilds a model from a checkpoint, requiring an exact parameter match.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::build(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
        for (name, _) in ckpt.tensors() {
            if model.param(name).is_none() {
                return Err(Error::UnexpectedParameter(name.clone()));
            }
        }
        for p in model.params.iter_mut() {
            let src = ckpt
                .tensor(&p.name)
                .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
            if src.dims() != p.value.dims() {
                return Err(Error::ParameterShape {
                    name: p.name.clone(),
                    expected: p.value.dims().to_vec(),
                    found: src.dims().to_vec(),
                });
            }
            p.value = src.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Copies the trunk of `source` into a freshly initialized model for
/// `new_config`. Head parameters come from `new_config.init_seed`; nothing is
/// frozen.
pub fn head_swap(source: &Checkpoint, new_config: &NetworkConfig) -> Result<Model> {
    let old = &source.config;
    if old.input_dims != new_config.input_dims
        || old.trunk != new_config.trunk
        || old.feature_dim != new_config.feature_dim
    {
        return Err(Error::TrunkMismatch(format!(
            "checkpoint trunk {:?} -> {} does not match {:?} -> {}",
            old.trunk.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
            old.feature_dim,
            new_config.trunk.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
            new_config.feature_dim
        )));
    }
    let mut model = Model::build(new_config)?;
    for p in model.params.iter_mut().filter(|p| !Model::is_head_param(&p.name)) {
        let src = source
            .tensor(&p.name)
            .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
        if src.dims() != p.value.dims() {
            return Err(Error::TrunkMismatch(format!(
                "`{}` has shape {:?} in the checkpoint, {:?} in the new model",
                p.name,
                src.dims(),
                p.value.dims()
            )));
        }
        p.value = src.clone();
    }
    Ok(model)
}
