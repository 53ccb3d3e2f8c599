//! Fully connected networks with explicit forward caches and hand-written
//! backpropagation. Used for every bottom model, the server's top model and
//! the attack probes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::Parameterized;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(x · W + b)` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Per-layer intermediates kept by [`DenseNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients in the same layout as [`DenseNet::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<LayerGrad>,
}

impl DenseGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape("DenseNet::new bias", l.output_dim(), l.bias.len()));
            }
            if !l.weight.all_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("DenseNet::new"));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::shape(
                    "DenseNet::new chaining",
                    layers[i - 1].output_dim(),
                    l.input_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Multi-layer perceptron `sizes[0] → … → sizes[last]` with relu on hidden
    /// layers and identity on the output. Weights and biases are drawn
    /// uniformly from `±1/√fan_in`.
    pub fn mlp<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                DenseLayer {
                    weight: Matrix::from_raw(fan_in, fan_out, weight),
                    bias,
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("DenseNet::forward", self.input_dim(), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            let act = layer.activation;
            let out = z.map(|v| act.apply(v));
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("DenseNet::infer", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            let act = layer.activation;
            h = z.map(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<(Matrix, DenseGrads)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape(
                "DenseNet::backward cache depth",
                self.layers.len(),
                cache.inputs.len(),
            ));
        }
        let batch = cache.inputs[0].rows();
        grad_out.expect_shape("DenseNet::backward grad_out", batch, self.output_dim())?;
        for (i, (l, z)) in self.layers.iter().zip(&cache.pre_activations).enumerate() {
            if z.shape() != (batch, l.output_dim()) || cache.inputs[i].cols() != l.input_dim() {
                return Err(Error::shape(
                    "DenseNet::backward stale cache",
                    format!("{batch}x{}", l.output_dim()),
                    format!("{}x{}", z.rows(), z.cols()),
                ));
            }
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let dz = g.zip_map(&cache.pre_activations[i], |g, z| g * act.derivative(z))?;
            let weight = cache.inputs[i].t_matmul(&dz)?;
            let bias = dz.column_sums();
            g = dz.matmul_t(&layer.weight)?;
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((g, DenseGrads { layers: grads }))
    }
}

impl Parameterized for DenseNet {
    fn parameters(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}
