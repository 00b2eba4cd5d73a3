//! A small MLP feature extractor with manual forward/backward.
//!
//! Stands in for a large convolutional backbone: it turns raw inputs into the
//! d-dimensional feature vectors the heads score. The final layer is always
//! Identity so features may be signed.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{outer, LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("layer {index} expects input dim {expected}, previous layer produces {got}")]
    DimChain {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("final layer activation must be Identity")]
    FinalActivation,
    #[error("network needs at least one layer")]
    Empty,
    #[error("tape does not match this network (layer {index}: {detail})")]
    TapeMismatch { index: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Subgradient; ReLU uses g(0) = 0 so gradient checks are reproducible.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer `act(W a + b)`; weight is out×in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Pre-activations and layer inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Vector>,
    pre_activations: Vec<Vector>,
}

/// Gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, BackboneError> {
        if layers.is_empty() {
            return Err(BackboneError::Empty);
        }
        for i in 1..layers.len() {
            if layers[i].input_dim() != layers[i - 1].output_dim() {
                return Err(BackboneError::DimChain {
                    index: i,
                    expected: layers[i].input_dim(),
                    got: layers[i - 1].output_dim(),
                });
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(BackboneError::FinalActivation);
        }
        Ok(Self { layers })
    }

    /// He-style init: hidden ReLU layers use std sqrt(2/fan_in), the Identity
    /// output layer sqrt(1/fan_in); biases start at zero.
    /// `dims` chains input through hidden sizes to the feature dim.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, BackboneError> {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let last = i == dims.len() - 2;
            let activation = if last {
                Activation::Identity
            } else {
                Activation::ReLU
            };
            let gain = if last { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                })
                .collect();
            layers.push(DenseLayer {
                weight: Matrix::new(fan_out, fan_in, data).expect("consistent dims"),
                bias: Vector::zeros(fan_out),
                activation,
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable layer access for optimizer updates. Callers must keep shapes
    /// unchanged; the slice cannot grow or shrink.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, input: &Vector) -> Result<(Vector, Tape), BackboneError> {
        let mut tape = Tape {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut a = input.clone();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&a)?;
            for (zi, &bi) in z.as_mut_slice().iter_mut().zip(layer.bias.as_slice()) {
                *zi += bi;
            }
            tape.layer_inputs.push(a);
            let out =
                Vector::from_vec(z.as_slice().iter().map(|&v| layer.activation.apply(v)).collect());
            tape.pre_activations.push(z);
            a = out;
        }
        Ok((a, tape))
    }

    /// Features only, when no backward pass will follow.
    pub fn features(&self, input: &Vector) -> Result<Vector, BackboneError> {
        Ok(self.forward(input)?.0)
    }

    /// Backpropagates `grad_features` through the tape, returning per-layer
    /// gradients (outermost first, matching layer order) and the gradient wrt
    /// the network input.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_features: &Vector,
    ) -> Result<(Vec<LayerGradient>, Vector), BackboneError> {
        if tape.layer_inputs.len() != self.layers.len() {
            return Err(BackboneError::TapeMismatch {
                index: tape.layer_inputs.len(),
                detail: format!("{} layers recorded, network has {}", tape.layer_inputs.len(), self.layers.len()),
            });
        }
        if grad_features.dim() != self.output_dim() {
            return Err(BackboneError::TapeMismatch {
                index: self.layers.len() - 1,
                detail: format!(
                    "gradient dim {} vs output dim {}",
                    grad_features.dim(),
                    self.output_dim()
                ),
            });
        }
        let mut grads: Vec<LayerGradient> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_features.clone();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre_activations[index];
            let a_in = &tape.layer_inputs[index];
            if z.dim() != layer.output_dim() || a_in.dim() != layer.input_dim() {
                return Err(BackboneError::TapeMismatch {
                    index,
                    detail: format!(
                        "tape dims ({}, {}) vs layer dims ({}, {})",
                        a_in.dim(),
                        z.dim(),
                        layer.input_dim(),
                        layer.output_dim()
                    ),
                });
            }
            let dz = Vector::from_vec(
                delta
                    .as_slice()
                    .iter()
                    .zip(z.as_slice())
                    .map(|(&g, &zi)| g * layer.activation.derivative(zi))
                    .collect(),
            );
            grads.push(LayerGradient {
                weight: outer(&dz, a_in),
                bias: dz.clone(),
            });
            delta = layer.weight.tmatvec(&dz)?;
        }
        grads.reverse();
        Ok((grads, delta))
    }
}

/// Zero-filled gradient buffers shaped like the network's parameters.
pub fn zero_gradients(mlp: &Mlp) -> Vec<LayerGradient> {
    mlp.layers()
        .iter()
        .map(|l| LayerGradient {
            weight: Matrix::zeros(l.output_dim(), l.input_dim()),
            bias: Vector::zeros(l.output_dim()),
        })
        .collect()
}
