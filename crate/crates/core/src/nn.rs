//! Multilayer perceptrons built from dense, batch-norm and activation layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

/// Architecture of a fully connected network: `hidden` blocks of
/// `dense → [batch norm] → activation`, then `dense → output_activation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output_dim: usize,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be at least 1".into()));
        }
        let acts = self
            .hidden
            .iter()
            .map(|h| h.activation)
            .chain(std::iter::once(self.output_activation));
        for a in acts {
            if let Activation::LeakyRelu(s) = a {
                if !(s > 0.0 && s < 1.0) {
                    return Err(Error::Config(format!("LeakyReLU slope {s} outside (0, 1)")));
                }
            }
        }
        if self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    /// Generator for the circular experiment: `concat(z, sin x, cos x)` through six
    /// `fc→100, BN, ReLU` blocks to a 2-D output.
    pub fn circular_generator() -> Self {
        Self {
            input_dim: 4,
            hidden: vec![
                HiddenLayer {
                    width: 100,
                    activation: Activation::Relu,
                    batch_norm: true,
                };
                6
            ],
            output_dim: 2,
            output_activation: Activation::Identity,
        }
    }

    /// Discriminator for the circular experiment: `concat(y, sin x, cos x)` through
    /// five `fc→100, ReLU` blocks to a sigmoid probability.
    pub fn circular_discriminator() -> Self {
        Self {
            input_dim: 4,
            hidden: vec![
                HiddenLayer {
                    width: 100,
                    activation: Activation::Relu,
                    batch_norm: false,
                };
                5
            ],
            output_dim: 1,
            output_activation: Activation::Sigmoid,
        }
    }

    /// Generator for the multivariate Gaussian experiment with a `p`-dimensional
    /// condition and `q = k - p` dimensional output (noise has the same size as the output).
    pub fn mvn_generator(p: usize, q: usize) -> Self {
        Self {
            input_dim: p + q,
            hidden: vec![
                HiddenLayer {
                    width: 512,
                    activation: Activation::LeakyRelu(0.1),
                    batch_norm: false,
                };
                3
            ],
            output_dim: q,
            output_activation: Activation::Identity,
        }
    }

    /// Wasserstein critic for the multivariate Gaussian experiment (no output sigmoid).
    pub fn mvn_discriminator(p: usize, q: usize) -> Self {
        Self {
            input_dim: p + q,
            hidden: vec![
                HiddenLayer {
                    width: 512,
                    activation: Activation::LeakyRelu(0.1),
                    batch_norm: false,
                };
                3
            ],
            output_dim: 1,
            output_activation: Activation::Identity,
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip, default = "empty")]
    pub grad: Tensor,
}

fn empty() -> Tensor {
    Tensor::zeros(0, 0)
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Tensor::zeros(self.value.rows(), self.value.cols());
        } else {
            self.grad.fill(0.0);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    /// `(in, out)`; the layer computes `x·W + b`.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Retention factor of the running estimates.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn update(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        // running variance tracks the unbiased estimate
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * stats.mean[j];
            self.running_var[j] =
                m * self.running_var[j] + (1.0 - m) * stats.var[j] * correction;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Activation(Activation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm layers normalize with batch statistics.
    Train,
    /// Batch-norm layers use their running statistics.
    Eval,
}

/// Result of recording a forward pass on a [`Graph`].
pub struct Forward {
    pub output: Var,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
    /// One entry per batch-norm layer (train mode only).
    pub stats: Vec<BatchStats>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Dense weights and biases ~ U(-1/√fan_in, 1/√fan_in); batch norm starts at γ=1, β=0.
    pub fn new<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        for h in &spec.hidden {
            layers.push(Layer::Dense(Dense::uniform(fan_in, h.width, rng)));
            if h.batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm {
                    gamma: Param::new(Tensor::filled(1, h.width, 1.0)),
                    beta: Param::new(Tensor::zeros(1, h.width)),
                    running_mean: vec![0.0; h.width],
                    running_var: vec![1.0; h.width],
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                }));
            }
            layers.push(Layer::Activation(h.activation));
            fan_in = h.width;
        }
        layers.push(Layer::Dense(Dense::uniform(fan_in, spec.output_dim, rng)));
        layers.push(Layer::Activation(spec.output_activation));
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Records a forward pass. Parameters enter the graph as leaves that require
    /// gradients only when `track_params` is set.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: Var,
        mode: Mode,
        track_params: bool,
    ) -> Result<Forward> {
        let cols = g.value(input).cols();
        if cols != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {cols}",
                self.spec.input_dim
            )));
        }
        let mut h = input;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    let w = g.leaf(d.weight.value.clone(), track_params);
                    let b = g.leaf(d.bias.value.clone(), track_params);
                    params.push(w);
                    params.push(b);
                    let xw = g.matmul(h, w)?;
                    g.add_bias(xw, b)?
                }
                Layer::BatchNorm(bn) => {
                    let gamma = g.leaf(bn.gamma.value.clone(), track_params);
                    let beta = g.leaf(bn.beta.value.clone(), track_params);
                    params.push(gamma);
                    params.push(beta);
                    match mode {
                        Mode::Train => {
                            let (out, s) = g.batch_norm_train(h, gamma, beta, bn.eps)?;
                            stats.push(s);
                            out
                        }
                        Mode::Eval => g.batch_norm_eval(
                            h,
                            gamma,
                            beta,
                            &bn.running_mean,
                            &bn.running_var,
                            bn.eps,
                        )?,
                    }
                }
                Layer::Activation(a) => apply_activation(g, h, *a),
            };
        }
        if !g.value(h).is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(Forward {
            output: h,
            params,
            stats,
        })
    }

    /// Plain forward pass without keeping a tape. Running statistics are not updated.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let f = self.forward_graph(&mut g, x, mode, false)?;
        Ok(g.value(f.output).clone())
    }

    /// Adds the gradients of the recorded parameter leaves into the accumulators.
    pub fn accumulate_grads(&mut self, grads: &Gradients, fwd: &Forward) {
        for (p, v) in self.params_mut().into_iter().zip(&fwd.params) {
            if let Some(gv) = grads.get(*v) {
                if p.grad.shape() != p.value.shape() {
                    p.zero_grad();
                }
                p.grad.add_assign(gv);
            }
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        let mut it = fwd.stats.iter();
        for l in &mut self.layers {
            if let Layer::BatchNorm(bn) = l {
                if let Some(s) = it.next() {
                    bn.update(s);
                }
            }
        }
    }

    /// Copies all parameter values into one flat vector.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| {
                if p.grad.shape() == p.value.shape() {
                    p.grad.data().to_vec()
                } else {
                    vec![0.0; p.value.len()]
                }
            })
            .collect()
    }
}

impl Dense {
    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |r, c| Tensor::from_fn(r, c, |_, _| rng.gen_range(-bound..bound));
        let weight = draw(fan_in, fan_out);
        let bias = draw(1, fan_out);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }
}

pub fn apply_activation(g: &mut Graph, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Identity => x,
    }
}
