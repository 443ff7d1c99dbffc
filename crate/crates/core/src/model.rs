//! Trainable embedding map `feat ↦ normalize(net(feat))`.
//!
//! `net` is a stack of dense layers with ReLU between consecutive layers and
//! no activation after the last one. Zero layers gives the passthrough model
//! (embeddings are the normalized input features).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, normalize, normalize_vjp, Matrix, UnitEmbedding};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Embedding is the normalized input; requires `D = d`.
    Identity,
    /// One dense layer.
    Affine,
    /// Dense → ReLU → dense.
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Identity => "identity",
            Architecture::Affine => "affine",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    pub fn hidden(self) -> usize {
        match self {
            Architecture::Mlp { hidden } => hidden,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.random_range(-a..a)).collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("shape matches"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    arch: Architecture,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Dense>,
}

/// Gradients with the same layout as [`EmbeddingModel`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub layers: Vec<Dense>,
}

impl ModelGrad {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    /// `self += alpha * other`
    pub fn accumulate(&mut self, alpha: f64, other: &ModelGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            linalg::axpy(alpha, b.weight.data(), a.weight.data_mut());
            linalg::axpy(alpha, &b.bias, &mut a.bias);
        }
    }
}

impl EmbeddingModel {
    /// Randomly initialized model drawn from `rng`.
    pub fn new<R: Rng>(arch: Architecture, input_dim: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        let layers = match arch {
            Architecture::Identity => Vec::new(),
            Architecture::Affine => vec![Dense::glorot(input_dim, output_dim, rng)],
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::contract("hidden width must be positive"));
                }
                vec![
                    Dense::glorot(input_dim, hidden, rng),
                    Dense::glorot(hidden, output_dim, rng),
                ]
            }
        };
        Self::from_layers(arch, input_dim, output_dim, layers)
    }

    pub fn from_layers(arch: Architecture, input_dim: usize, output_dim: usize, layers: Vec<Dense>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        let expected: Vec<(usize, usize)> = match arch {
            Architecture::Identity => {
                if input_dim != output_dim {
                    return Err(Error::contract(format!(
                        "identity model needs D = d, got D={input_dim} d={output_dim}"
                    )));
                }
                vec![]
            }
            Architecture::Affine => vec![(input_dim, output_dim)],
            Architecture::Mlp { hidden } => vec![(input_dim, hidden), (hidden, output_dim)],
        };
        let actual: Vec<(usize, usize)> = layers.iter().map(|l| (l.input_dim(), l.output_dim())).collect();
        if actual != expected || layers.iter().any(|l| l.bias.len() != l.output_dim()) {
            return Err(Error::contract(format!(
                "{} layers {actual:?} do not match expected {expected:?}",
                arch.name()
            )));
        }
        Ok(Self {
            arch,
            input_dim,
            output_dim,
            layers,
        })
    }

    /// Affine model with identity weight and zero bias (`D = d`).
    pub fn identity_affine(dim: usize) -> Result<Self> {
        let layer = Dense {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        };
        Self::from_layers(Architecture::Affine, dim, dim, vec![layer])
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    fn check_input(&self, feat: &[f64]) -> Result<()> {
        if feat.len() != self.input_dim {
            return Err(Error::contract(format!(
                "model expects {} input features, got {}",
                self.input_dim,
                feat.len()
            )));
        }
        Ok(())
    }

    /// Activations entering each layer plus the final pre-normalization output.
    fn activations(&self, feat: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = feat.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.apply(&h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                a.iter().map(|v| v.max(0.0)).collect()
            } else {
                a.clone()
            };
            pre.push(a);
        }
        inputs.push(h);
        (inputs, pre)
    }

    /// The network output before normalization.
    pub fn raw_output(&self, feat: &[f64]) -> Result<Vec<f64>> {
        self.check_input(feat)?;
        let (mut inputs, _) = self.activations(feat);
        Ok(inputs.pop().expect("at least the input is recorded"))
    }

    pub fn forward(&self, feat: &[f64]) -> Result<UnitEmbedding> {
        normalize(&self.raw_output(feat)?)
    }

    /// Parameter gradients and input gradient for a loss whose gradient with
    /// respect to the embedding is `grad_embedding`.
    pub fn backward(&self, feat: &[f64], grad_embedding: &[f64]) -> Result<(ModelGrad, Vec<f64>)> {
        self.check_input(feat)?;
        if grad_embedding.len() != self.output_dim {
            return Err(Error::contract("embedding gradient has wrong dimension"));
        }
        let (inputs, pre) = self.activations(feat);
        let out = inputs.last().expect("output recorded");
        let mut g = normalize_vjp(out, grad_embedding)?;
        let mut grads = self.zero_grad();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (gi, ai) in g.iter_mut().zip(&pre[i]) {
                    if *ai <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            grads.layers[i].weight.add_outer(1.0, &g, &inputs[i]);
            grads.layers[i].bias.copy_from_slice(&g);
            g = self.layers[i].weight.matvec_t(&g);
        }
        Ok((grads, g))
    }
}
