//! Dense feed-forward networks with exact backpropagation.
//!
//! Everything is `f64`. Weight matrices are stored `[out x in]`; batched
//! inputs are row-major `[batch x in]`.

mod gradcheck;
mod loss;
mod optim;

pub use gradcheck::finite_diff_grad;
pub use loss::{cross_entropy, log_softmax_row, soft_cross_entropy, softmax_row, softmax_rows};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A stack of affine layers, each followed by an activation.
///
/// Parameters can only be mutated through methods that bump an internal
/// generation counter, which lets [`DenseNet::backward`] reject caches
/// produced before the last update.
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<Layer>,
    id: u64,
    generation: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: NetGrads,
    /// Gradient with respect to the network input, `[batch x input_dim]`.
    pub input: Array2<f64>,
}

impl DenseNet {
    /// He-uniform initialization: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    /// zero biases. `dims` lists every layer width including input and output;
    /// hidden layers use `hidden`, the last layer uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least an input and an output width".into(),
            ));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("layer width {pos} is zero")));
        }
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.uniform(-limit, limit));
            let activation = if i + 1 == n_layers { output } else { hidden };
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
                activation,
            });
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim(format!("layer {i} bias"), l.out_dim(), l.bias.len()));
            }
            if !l.weight.is_standard_layout() {
                return Err(Error::InvalidArgument(format!("layer {i} weight is not row-major")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!("layer {} input", i + 1), pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(Self {
            layers,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable views of every parameter tensor (weight then bias, per layer).
    /// Invalidates outstanding forward caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim("flat parameter vector", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&params[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass returning the output and the cache for backward.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let z = affine(current.view(), layer);
            let a = activate(&z, layer.activation);
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        let cache = ForwardCache {
            net_id: self.id,
            generation: self.generation,
            inputs,
            pre,
        };
        Ok((current, cache))
    }

    /// Batched forward pass without recording a cache.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut current: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let z = match &current {
                None => affine(x, layer),
                Some(a) => affine(a.view(), layer),
            };
            current = Some(match layer.activation {
                Activation::Identity => z,
                Activation::Relu => z.mapv_into(|v| v.max(0.0)),
            });
        }
        Ok(current.expect("at least one layer"))
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let (out, cache) = self.forward(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `grad_output` (`[batch x output_dim]`) through the
    /// activations recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<'_, f64>) -> Result<Backward> {
        if cache.net_id != self.id {
            return Err(Error::StaleCache("cache was produced by a different network".into()));
        }
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "parameters changed since the forward pass (generation {} vs {})",
                cache.generation, self.generation
            )));
        }
        let batch = cache.batch_size();
        if grad_output.nrows() != batch {
            return Err(Error::dim("grad_output rows", batch, grad_output.nrows()));
        }
        if grad_output.ncols() != self.output_dim() {
            return Err(Error::dim("grad_output columns", self.output_dim(), grad_output.ncols()));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = grad_output.to_owned();
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut grad).and(&cache.pre[idx]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            weights.push(grad.t().dot(&cache.inputs[idx]));
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok(Backward {
            params: NetGrads { weights, biases },
            input: grad,
        })
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), x.ncols()));
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("forward pass on an empty batch".into()));
        }
        Ok(())
    }

    pub(crate) fn encode_shape(&self) -> Vec<(usize, usize, u8)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim(), l.activation.tag())).collect()
    }

    pub(crate) fn decode(shape: &[(usize, usize, u8)], params: &[f64]) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.len());
        let mut offset = 0;
        for (i, &(out, inp, tag)) in shape.iter().enumerate() {
            let activation = Activation::from_tag(tag).ok_or_else(|| Error::Format(format!("layer {i}: unknown activation tag {tag}")))?;
            let need = out * inp + out;
            if params.len() < offset + need {
                return Err(Error::Format(format!("layer {i}: parameter payload too short")));
            }
            let weight = Array2::from_shape_vec((out, inp), params[offset..offset + out * inp].to_vec())
                .map_err(|e| Error::Format(e.to_string()))?;
            offset += out * inp;
            let bias = Array1::from_vec(params[offset..offset + out].to_vec());
            offset += out;
            layers.push(Layer { weight, bias, activation });
        }
        if offset != params.len() {
            return Err(Error::Format("trailing parameter payload".into()));
        }
        Self::from_layers(layers)
    }
}

fn affine(x: ArrayView2<'_, f64>, layer: &Layer) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn activate(z: &Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => z.mapv(|v| v.max(0.0)),
    }
}
