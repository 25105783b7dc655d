//! Feed-forward classifiers with exact reverse-mode gradients.
//!
//! All parameters of a model live in one flat `Vec<f64>`; each layer owns
//! a contiguous slice (weights first, then bias). Gradients use the same
//! layout, which keeps the optimizer, checkpoints and finite-difference
//! checks layout-agnostic.

mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, RngStream};

pub(crate) use layers::Layer;

const INIT_STREAM: u64 = 0x1417;

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

fn next_instance() -> u64 {
    NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Architecture {
    /// Dense layers with rectifiers.
    Mlp { hidden: Vec<usize> },
    /// Two `conv 3x3 → relu → maxpool 2x2` blocks followed by the
    /// classification layer. Input is a single-channel `height × width`
    /// image flattened row-major.
    Conv {
        height: usize,
        width: usize,
        channels: [usize; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub architecture: Architecture,
    /// Dropout rate applied to the input of the classification layer.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, dropout: f64) -> Self {
        Self {
            input_dim,
            num_classes,
            architecture: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            dropout,
        }
    }

    fn build_layers(&self) -> Result<(Vec<Layer>, usize)> {
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let mut layers: Vec<Layer> = Vec::new();
        let offset = |layers: &[Layer]| layers.iter().map(Layer::param_len).sum::<usize>();
        let push = |layer: Layer, layers: &mut Vec<Layer>| layers.push(layer);
        let mut width = self.input_dim;
        if width == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                for &h in hidden {
                    if h == 0 {
                        return Err(Error::Config("zero-width hidden layer".into()));
                    }
                    push(Layer::dense(width, h, offset(&layers)), &mut layers);
                    push(Layer::Relu, &mut layers);
                    width = h;
                }
            }
            Architecture::Conv {
                height,
                width: img_w,
                channels,
            } => {
                if height * img_w != self.input_dim {
                    return Err(Error::Config(format!(
                        "conv input {height}x{img_w} does not match input_dim {}",
                        self.input_dim
                    )));
                }
                if channels.contains(&0) {
                    return Err(Error::Config("zero-width conv layer".into()));
                }
                let (mut h, mut w, mut ch) = (*height, *img_w, 1);
                for &out in channels {
                    if h < 2 || w < 2 {
                        return Err(Error::Config("image too small for two pooling stages".into()));
                    }
                    push(Layer::conv(ch, out, h, w, 3, offset(&layers)), &mut layers);
                    push(Layer::Relu, &mut layers);
                    push(Layer::MaxPool { ch: out, h, w }, &mut layers);
                    h /= 2;
                    w /= 2;
                    ch = out;
                }
                width = ch * h * w;
            }
        }
        push(Layer::Dropout { rate: self.dropout }, &mut layers);
        push(Layer::dense(width, self.num_classes, offset(&layers)), &mut layers);
        let count = offset(&layers);
        Ok((layers, count))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Name and shape of one parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub struct ClassifierModel {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
    instance: u64,
    version: u64,
}

impl Clone for ClassifierModel {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.clone(),
            instance: next_instance(),
            version: 0,
        }
    }
}

impl PartialEq for ClassifierModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Flat gradient vector laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

/// Intermediate values recorded by [`ClassifierModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    instance: u64,
    version: u64,
    batch: usize,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Per-layer auxiliary data: dropout scale masks, pooling argmax.
    aux: Vec<layers::Aux>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

impl ClassifierModel {
    /// He-normal weights for layers feeding a rectifier, LeCun-normal for
    /// the classification layer; zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (layers, count) = spec.build_layers()?;
        let mut params = vec![0.0; count];
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let last_dense = layers.iter().rposition(|l| matches!(l, Layer::Dense { .. }));
        for (i, layer) in layers.iter().enumerate() {
            if let Some((range, fan_in)) = layer.weight_range() {
                let gain = if Some(i) == last_dense { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                for w in &mut params[range] {
                    *w = std * rng.normal();
                }
            }
        }
        Ok(Self {
            spec,
            layers,
            params,
            instance: next_instance(),
            version: 0,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        let (layers, count) = spec.build_layers()?;
        if params.len() != count {
            return Err(Error::InvalidInput(format!(
                "spec needs {count} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self {
            spec,
            layers,
            params,
            instance: next_instance(),
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors(i));
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            values: vec![0.0; self.params.len()],
        }
    }

    /// Computes logits for a batch (`N × input_dim`). Train mode applies
    /// inverted dropout (kept units scaled by `1 / keep`); eval mode never
    /// draws from `rng`.
    pub fn forward(&self, batch: &Matrix, mode: Mode, rng: &mut RngStream) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.spec.input_dim {
            return Err(Error::InvalidInput(format!(
                "batch width {} does not match model input {}",
                batch.cols(),
                self.spec.input_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, a) = layer.forward(&self.params, &x, mode, rng);
            inputs.push(x);
            aux.push(a);
            x = y;
        }
        Ok((
            x,
            ForwardCache {
                instance: self.instance,
                version: self.version,
                batch: batch.rows(),
                inputs,
                aux,
            },
        ))
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        let mut unused = RngStream::new(0, 0);
        Ok(self.forward(batch, Mode::Eval, &mut unused)?.0)
    }

    /// Gradients of `Σ dlogits ⊙ logits` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        if cache.instance != self.instance || cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidState(
                "forward cache does not belong to this model state".into(),
            ));
        }
        if dlogits.shape() != (cache.batch, self.spec.num_classes) {
            return Err(Error::InvalidInput(format!(
                "dlogits shape {:?} does not match ({}, {})",
                dlogits.shape(),
                cache.batch,
                self.spec.num_classes
            )));
        }
        let mut grads = self.zero_gradients();
        let mut dy = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0;
            dy = layer.backward(
                &self.params,
                &cache.inputs[i],
                &cache.aux[i],
                &dy,
                &mut grads.values,
                need_dx,
            );
        }
        Ok(grads)
    }
}
