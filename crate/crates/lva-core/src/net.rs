//! Multilayer perceptrons: forward passes, truncated latents, exact
//! Jacobians, Lipschitz bookkeeping, and a JSON wire format.
//!
//! A network is a plain stack of affine layers with pointwise activations.
//! `weight` is `out x in`, so a layer maps a column vector `z` to
//! `act(weight * z + bias)`; batched calls put one sample per row and use
//! `X * W^T + b` internally.

use crate::error::{Error, Result};
use crate::linalg::{matmul, spectral_norm, Matrix, SPECTRAL_NORM_MAX_ITER, SPECTRAL_NORM_TOL};
use serde::{Deserialize, Serialize};

/// Pointwise activation.
///
/// The rectifier's derivative at exactly zero is taken as 0 (the value of the
/// flat branch), and the leaky variant's as its slope; both choices make the
/// Jacobians one-sided limits rather than anything exotic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Activation {
    Identity,
    ReLU,
    LeakyReLU { slope: f64 },
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::ReLU => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Smallest Lipschitz constant of the pointwise map.
    pub fn lipschitz_constant(&self) -> f64 {
        match *self {
            Activation::Identity | Activation::ReLU | Activation::Tanh => 1.0,
            Activation::LeakyReLU { slope } => slope.max(1.0),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if let Activation::LeakyReLU { slope } = *self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::argument(
                    "Activation",
                    format!("leaky slope {slope} must lie in (0, 1)"),
                ));
            }
        }
        Ok(())
    }
}

/// One affine layer plus its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Matrix,
    /// Length `out`.
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Layer> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "Layer::new",
                format!("weight is {}x{} but bias has {} entries", weight.rows(), weight.cols(), bias.len()),
            ));
        }
        activation.validate()?;
        Ok(Layer { weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A stack of layers. The field is public because the adaptation routines
/// build modified copies layer by layer; [`Mlp::validate`] re-checks the
/// chain after surgery.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Mlp> {
        let net = Mlp { layers };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer-to-layer dimension chaining, finite parameters, and
    /// activation domains.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::argument("Mlp", "a network needs at least one layer"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::shape(
                    "Mlp::validate",
                    format!("layer {i}: bias length {} vs {} rows", layer.bias.len(), layer.weight.rows()),
                ));
            }
            if !layer.weight.all_finite() || !layer.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::data("Mlp::validate", format!("layer {i} has non-finite parameters")));
            }
            layer.activation.validate()?;
            if i > 0 && layer.in_dim() != self.layers[i - 1].out_dim() {
                return Err(Error::shape(
                    "Mlp::validate",
                    format!(
                        "layer {i} expects {} inputs but layer {} produces {}",
                        layer.in_dim(),
                        i - 1,
                        self.layers[i - 1].out_dim()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Batched forward pass; one sample per row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.latent(x, self.n_layers())
    }

    /// Output of the first `k` layers (`k = 0` returns the input unchanged).
    pub fn latent(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        if k > self.n_layers() {
            return Err(Error::argument(
                "Mlp::latent",
                format!("k = {k} exceeds the {} layers", self.n_layers()),
            ));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Mlp::latent",
                format!("input has {} columns, network expects {}", x.cols(), self.input_dim()),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers[..k] {
            h = affine_activate(&h, layer)?;
        }
        Ok(h)
    }

    /// Exact Jacobian of the sub-network formed by `layers[range]`, evaluated
    /// at `z`, which must be the input fed to layer `range.start` (for the
    /// whole network that is the raw input itself).
    ///
    /// Forward accumulation: the running Jacobian is multiplied by `W` and
    /// scaled row-wise by the activation derivatives at each step, which is
    /// the chain rule written out with no approximation.
    pub fn jacobian(&self, z: &[f64], range: std::ops::Range<usize>) -> Result<Matrix> {
        if range.end > self.n_layers() || range.start > range.end {
            return Err(Error::argument(
                "Mlp::jacobian",
                format!("layer range {range:?} outside 0..{}", self.n_layers()),
            ));
        }
        let d0 = if range.start == range.end {
            z.len()
        } else {
            self.layers[range.start].in_dim()
        };
        if z.len() != d0 {
            return Err(Error::shape(
                "Mlp::jacobian",
                format!("input has {} entries, layer {} expects {d0}", z.len(), range.start),
            ));
        }
        let mut j = Matrix::identity(d0);
        let mut h = z.to_vec();
        for layer in &self.layers[range] {
            // pre = W h + b
            let mut pre = layer.bias.clone();
            for (o, p) in pre.iter_mut().enumerate() {
                let row = layer.weight.row(o);
                for (&w, &x) in row.iter().zip(&h) {
                    *p = w.mul_add(x, *p);
                }
            }
            // j <- diag(act'(pre)) * (W * j)
            let wj = matmul(&layer.weight, &j)?;
            let mut next = wj;
            for o in 0..next.rows() {
                let d = layer.activation.derivative(pre[o]);
                for v in next.row_mut(o) {
                    *v *= d;
                }
            }
            j = next;
            h = pre.iter().map(|&p| layer.activation.apply(p)).collect();
        }
        Ok(j)
    }

    /// Forward pass for a single sample given as a slice.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.row(0).to_vec())
    }

    /// Per-layer Lipschitz bounds and their running products.
    pub fn lipschitz_profile(&self) -> Result<LipschitzProfile> {
        let mut per_layer = Vec::with_capacity(self.n_layers());
        for layer in &self.layers {
            let sn = spectral_norm(&layer.weight, SPECTRAL_NORM_TOL, SPECTRAL_NORM_MAX_ITER)?;
            per_layer.push(sn * layer.activation.lipschitz_constant());
        }
        Ok(LipschitzProfile { per_layer })
    }

    pub fn to_json(&self) -> String {
        let dto = MlpDto {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDto {
                    weight: (0..l.weight.rows()).map(|i| l.weight.row(i).to_vec()).collect(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Mlp> {
        let dto: MlpDto = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: "network json".into(),
            details: e.to_string(),
        })?;
        let mut layers = Vec::with_capacity(dto.layers.len());
        for (i, l) in dto.layers.into_iter().enumerate() {
            let weight = Matrix::from_rows(l.weight).map_err(|e| Error::Parse {
                source_name: "network json".into(),
                details: format!("layer {i}: {e}"),
            })?;
            layers.push(Layer::new(weight, l.bias, l.activation)?);
        }
        Mlp::new(layers)
    }
}

/// Spectral-norm-based Lipschitz bounds, one per layer.
#[derive(Clone, Debug)]
pub struct LipschitzProfile {
    pub per_layer: Vec<f64>,
}

impl LipschitzProfile {
    /// Bound for the composite of `layers[range]`.
    pub fn product(&self, range: std::ops::Range<usize>) -> f64 {
        self.per_layer[range].iter().product()
    }

    /// Bound for the whole network.
    pub fn total(&self) -> f64 {
        self.product(0..self.per_layer.len())
    }
}

pub(crate) fn affine_activate(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let wt = layer.weight.transpose();
    let mut out = matmul(x, &wt)?;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, &b) in row.iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MlpDto {
    layers: Vec<LayerDto>,
}

#[derive(Serialize, Deserialize)]
struct LayerDto {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}
