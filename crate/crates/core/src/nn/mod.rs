//! Feed-forward networks split at a cut layer into a feature extractor `h`
//! (layers before the cut) and a head `g` (layers from the cut on), with
//! hand-written reverse-mode gradients.

mod checkpoint;
mod layers;
mod linalg;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::LayerSpec;
pub use linalg::{spectral_norm, spectral_norm_op, LinearOperator};

use crate::error::{config, contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer sequence, per-sample input shape and the cut index.
///
/// `h` is layers `[0, cut_index)`, `g` is layers `[cut_index, len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub cut_index: usize,
}

impl NetworkSpec {
    /// Checks layer compatibility and returns the per-sample activation
    /// shapes, `layers.len() + 1` entries starting with the input.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.cut_index > self.layers.len() {
            return config(format!(
                "cut index {} beyond {} layers",
                self.cut_index,
                self.layers.len()
            ));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return config(format!("invalid input shape {:?}", self.input_shape));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|msg| Error::Config(format!("layer {i}: {msg}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.activation_shapes()?.pop().unwrap())
    }

    pub fn hidden_shape(&self) -> Result<Vec<usize>> {
        Ok(self.activation_shapes()?.swap_remove(self.cut_index))
    }

    /// The 4-layer perceptron used on the two-Gaussian task:
    /// 10 → 500 → 2 → 100 → 2 with ReLU between, cut after the second
    /// linear layer's ReLU so `h(x)` lives in R².
    pub fn synthetic_mlp() -> Self {
        use LayerSpec::*;
        Self {
            input_shape: vec![10],
            layers: vec![
                Linear { in_dim: 10, out_dim: 500 },
                Relu,
                Linear { in_dim: 500, out_dim: 2 },
                Relu,
                Linear { in_dim: 2, out_dim: 100 },
                Relu,
                Linear { in_dim: 100, out_dim: 2 },
            ],
            cut_index: 4,
        }
    }

    /// LeNet5 variant for `channels`×28×28 inputs, cut after the second
    /// convolution block (256 hidden features).
    pub fn lenet5(channels: usize) -> Self {
        use LayerSpec::*;
        Self {
            input_shape: vec![channels, 28, 28],
            layers: vec![
                Conv2d { in_ch: channels, out_ch: 6, kernel_h: 5, kernel_w: 5 },
                Relu,
                MaxPool2d { kh: 2, kw: 2 },
                Conv2d { in_ch: 6, out_ch: 16, kernel_h: 5, kernel_w: 5 },
                Relu,
                MaxPool2d { kh: 2, kw: 2 },
                Flatten,
                Linear { in_dim: 256, out_dim: 120 },
                Relu,
                Linear { in_dim: 120, out_dim: 84 },
                Relu,
                Linear { in_dim: 84, out_dim: 10 },
            ],
            cut_index: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two extra 100-unit Linear+ReLU groups after the third linear layer.
    Deeper,
    /// Third linear layer widened from 100 to 2048 units.
    Wider,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deeper" => Ok(Variant::Deeper),
            "wider" => Ok(Variant::Wider),
            other => config(format!("unknown network variant '{other}'")),
        }
    }
}

/// Enlarges the head `g` of the synthetic perceptron. The cut is unchanged.
pub fn make_variant(spec: &NetworkSpec, kind: Variant) -> Result<NetworkSpec> {
    if *spec != NetworkSpec::synthetic_mlp() {
        return config("network variants are defined only for the synthetic perceptron");
    }
    let mut out = spec.clone();
    match kind {
        Variant::Deeper => {
            let extra = [
                LayerSpec::Linear { in_dim: 100, out_dim: 100 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_dim: 100, out_dim: 100 },
                LayerSpec::Relu,
            ];
            out.layers.splice(6..6, extra);
        }
        Variant::Wider => {
            out.layers[4] = LayerSpec::Linear { in_dim: 2, out_dim: 2048 };
            out.layers[6] = LayerSpec::Linear { in_dim: 2048, out_dim: 2 };
        }
    }
    Ok(out)
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Init {
    /// Per layer draw `u ~ N(0, alpha)` (alpha is a variance), then every
    /// weight and bias entry i.i.d. `N(u, 1)`.
    Gaussian { alpha: f64 },
    /// Every entry uniform in `±1/sqrt(fan_in)`.
    UniformFanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    /// Per layer: `[weight, bias]` or empty.
    pub params: Vec<Vec<Tensor>>,
}

/// Parameter gradients with the same nesting as [`Network::params`].
pub type Gradients = Vec<Vec<Tensor>>;

/// Activations retained from a forward pass over layers `[0, end)`.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[k]` is the input of layer `k`; `acts[end]` is the last output.
    acts: Vec<Tensor>,
    batched: bool,
}

impl Tape {
    /// Number of layers recorded.
    pub fn layer_count(&self) -> usize {
        self.acts.len() - 1
    }

    /// Input of layer `k` (or the final output for `k == layer_count()`),
    /// always with a leading batch axis.
    pub fn activation(&self, k: usize) -> &Tensor {
        &self.acts[k]
    }
}

/// Gaussian initialization, see [`Init::Gaussian`]. Deterministic in `seed`.
pub fn init_params(spec: &NetworkSpec, alpha: f64, seed: u64) -> Result<Network> {
    Ok(init_params_recorded(spec, alpha, seed)?.0)
}

/// Gaussian initialization that also returns the per-layer means `u_k`
/// (one entry per parameterized layer).
pub fn init_params_recorded(spec: &NetworkSpec, alpha: f64, seed: u64) -> Result<(Network, Vec<f64>)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return config(format!("init alpha must be finite and non-negative, got {alpha}"));
    }
    spec.activation_shapes()?;
    let mut rng = Rng::new(seed);
    let mut means = Vec::new();
    let params = spec
        .layers
        .iter()
        .map(|layer| {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                return Vec::new();
            }
            let u = alpha.sqrt() * rng.normal();
            means.push(u);
            shapes
                .iter()
                .map(|s| {
                    let mut t = Tensor::zeros(s);
                    t.data_mut().iter_mut().for_each(|v| *v = rng.normal_with(u, 1.0));
                    t
                })
                .collect()
        })
        .collect();
    Ok((Network { spec: spec.clone(), params }, means))
}

pub fn init_network(spec: &NetworkSpec, init: Init, seed: u64) -> Result<Network> {
    match init {
        Init::Gaussian { alpha } => init_params(spec, alpha, seed),
        Init::UniformFanIn => {
            spec.activation_shapes()?;
            let mut rng = Rng::new(seed);
            let params = spec
                .layers
                .iter()
                .map(|layer| {
                    let bound = 1.0 / (layer.fan_in().max(1) as f64).sqrt();
                    layer
                        .param_shapes()
                        .iter()
                        .map(|s| {
                            let mut t = Tensor::zeros(s);
                            t.data_mut()
                                .iter_mut()
                                .for_each(|v| *v = rng.uniform_in(-bound, bound));
                            t
                        })
                        .collect()
                })
                .collect();
            Ok(Network { spec: spec.clone(), params })
        }
    }
}

impl Network {
    /// Builds a network from explicit parameters, validating every shape.
    pub fn from_params(spec: NetworkSpec, params: Vec<Vec<Tensor>>) -> Result<Self> {
        spec.activation_shapes()?;
        if params.len() != spec.layers.len() {
            return contract(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            ));
        }
        for (i, (layer, group)) in spec.layers.iter().zip(&params).enumerate() {
            let want = layer.param_shapes();
            if want.len() != group.len() || want.iter().zip(group).any(|(s, t)| s != t.shape()) {
                return Err(Error::Shape {
                    layer: i,
                    msg: format!("parameters do not match {layer:?}"),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// Flat iterator over all parameter tensors in layer order.
    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten()
    }

    /// Plain gradient step `w ← w − lr·grad`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params.iter_mut().flatten().zip(grads.iter().flatten()) {
            p.add_scaled(g, -lr);
        }
    }

    /// Accepts batched `[N, ..input]` or single-sample `input` tensors.
    fn batch_input(&self, x: &Tensor, per_sample: &[usize]) -> Result<(Tensor, bool)> {
        if x.shape() == per_sample {
            let mut shape = vec![1];
            shape.extend_from_slice(per_sample);
            Ok((x.clone().reshape(&shape)?, false))
        } else if x.rank() == per_sample.len() + 1 && &x.shape()[1..] == per_sample {
            Ok((x.clone(), true))
        } else {
            Err(Error::Shape {
                layer: 0,
                msg: format!("input {:?} does not match per-sample shape {per_sample:?}", x.shape()),
            })
        }
    }

    fn unbatch(t: Tensor, batched: bool) -> Tensor {
        if batched {
            t
        } else {
            let shape = t.shape()[1..].to_vec();
            if shape.is_empty() {
                t.reshape(&[1]).unwrap()
            } else {
                t.reshape(&shape).unwrap()
            }
        }
    }

    /// Runs layers `[0, end)` and records the tape.
    pub fn forward_prefix(&self, x: &Tensor, end: usize) -> Result<(Tensor, Tape)> {
        let shapes = self.spec.activation_shapes()?;
        if end > self.spec.layers.len() {
            return contract(format!("prefix end {end} beyond network"));
        }
        let (x, batched) = self.batch_input(x, &shapes[0])?;
        let mut acts = Vec::with_capacity(end + 1);
        acts.push(x);
        for k in 0..end {
            let y = layers::forward(&self.spec.layers[k], &self.params[k], &acts[k], &shapes[k + 1]);
            acts.push(y);
        }
        let out = Self::unbatch(acts[end].clone(), batched);
        Ok((out, Tape { acts, batched }))
    }

    /// Full forward pass `f(x) = g(h(x))`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.forward_prefix(x, self.spec.layers.len())
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.run_layers(x, 0, self.spec.layers.len())
    }

    /// Output of `h`: the activations entering layer `cut_index`. With
    /// `cut_index == 0` this is `x` itself.
    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        self.run_layers(x, 0, self.spec.cut_index)
    }

    /// Applies `g` to hidden features.
    pub fn head(&self, hidden: &Tensor) -> Result<Tensor> {
        self.run_layers(hidden, self.spec.cut_index, self.spec.layers.len())
    }

    fn run_layers(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let shapes = self.spec.activation_shapes()?;
        let (mut cur, batched) = self.batch_input(x, &shapes[start])?;
        for k in start..end {
            cur = layers::forward(&self.spec.layers[k], &self.params[k], &cur, &shapes[k + 1]);
        }
        Ok(Self::unbatch(cur, batched))
    }

    /// Gradients of `⟨grad_y, f(x)⟩ + ⟨grad_hidden, h(x)⟩` with respect to
    /// every parameter and to `x`. The tape may cover a prefix of the
    /// network, in which case `grad_y` refers to the prefix output.
    pub fn backward(&self, tape: &Tape, grad_y: &Tensor, grad_hidden: Option<&Tensor>) -> Result<(Gradients, Tensor)> {
        let (grads, dx) = self.backward_impl(tape, grad_y, grad_hidden, true)?;
        Ok((grads, dx))
    }

    /// Input gradient only; skips parameter gradients.
    pub fn input_gradient(&self, tape: &Tape, grad_y: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(tape, grad_y, None, false)?.1)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_y: &Tensor,
        grad_hidden: Option<&Tensor>,
        want_params: bool,
    ) -> Result<(Gradients, Tensor)> {
        let end = tape.layer_count();
        if end > self.spec.layers.len() {
            return contract("tape longer than the network");
        }
        let lift = |g: &Tensor, want: &Tensor, what: &str| -> Result<Tensor> {
            if g.shape() == want.shape() {
                Ok(g.clone())
            } else if !tape.batched && g.len() == want.len() {
                g.clone().reshape(want.shape())
            } else {
                Err(Error::Contract(format!(
                    "{what} shape {:?} does not match activation {:?}",
                    g.shape(),
                    want.shape()
                )))
            }
        };
        let cut = self.spec.cut_index;
        let mut dy = lift(grad_y, &tape.acts[end], "output gradient")?;
        let hidden_grad = match grad_hidden {
            Some(g) if cut <= end => Some(lift(g, &tape.acts[cut], "hidden gradient")?),
            Some(_) => return contract("hidden gradient given but the tape stops before the cut"),
            None => None,
        };
        if cut == end {
            if let Some(g) = &hidden_grad {
                dy.add_scaled(g, 1.0);
            }
        }
        let mut grads: Gradients = self
            .params
            .iter()
            .map(|group| group.iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        for k in (0..end).rev() {
            let (mut dx, g) = layers::backward(
                &self.spec.layers[k],
                &self.params[k],
                &tape.acts[k],
                &tape.acts[k + 1],
                &dy,
                want_params,
            );
            if want_params && !g.is_empty() {
                grads[k] = g;
            }
            if k == cut {
                if let Some(h) = &hidden_grad {
                    dx.add_scaled(h, 1.0);
                }
            }
            dy = dx;
        }
        Ok((grads, Self::unbatch(dy, tape.batched)))
    }
}

/// Index of the largest `|y_i|`, lowest index on ties.
pub fn predict_class(y: &[f64]) -> Result<usize> {
    if y.is_empty() {
        return contract("cannot classify an empty score vector");
    }
    let mut best = 0;
    for (i, v) in y.iter().enumerate() {
        if v.abs() > y[best].abs() {
            best = i;
        }
    }
    Ok(best)
}

/// Row-wise softmax of a batch of scores.
pub fn softmax_rows(scores: &Tensor) -> Tensor {
    let c = *scores.shape().last().unwrap();
    let mut out = Tensor::zeros(scores.shape());
    for (o, s) in out.data_mut().chunks_mut(c).zip(scores.data().chunks(c)) {
        layers::softmax_into(s, o);
    }
    out
}
