//! Feed-forward network with hand-written backward pass.

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `y = act(x W + b)`, with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Affine output of each layer, before activation.
    pre: Vec<Matrix>,
    /// Layer shapes at forward time, used to reject mismatched caches.
    shapes: Vec<(usize, usize)>,
}

impl MlpCache {
    /// Smallest absolute pre-activation of any ReLU unit; used to keep
    /// finite-difference probes away from kinks.
    pub fn min_relu_margin(&self, params: &MlpParams) -> f64 {
        let mut m = f64::INFINITY;
        for (layer, pre) in params.layers.iter().zip(&self.pre) {
            if layer.activation == Activation::Relu {
                for v in pre.data() {
                    m = m.min(v.abs());
                }
            }
        }
        m
    }
}

impl MlpParams {
    /// Chains `dims[0] → dims[1] → …` with ReLU hidden layers and an affine
    /// output. Weights and biases ~ U(−1/√fan_in, 1/√fan_in).
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("bad MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Dense {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias,
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    /// Parameter gradients shaped like `self`, all zero.
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Flat tensor views in a fixed order: `w0, b0, w1, b1, …`.
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

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.in_dim(), l.out_dim()), (1, l.out_dim())])
            .collect()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }
}

pub fn mlp_apply(params: &MlpParams, x: &Matrix) -> Result<(Matrix, MlpCache)> {
    if x.cols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "MLP expects {} input columns, got {}",
            params.in_dim(),
            x.cols()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for layer in &params.layers {
        let mut a = h.matmul(&layer.weight)?;
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let out = match layer.activation {
            Activation::Identity => a.clone(),
            Activation::Relu => {
                let mut o = a.clone();
                o.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                o
            }
        };
        inputs.push(h);
        pre.push(a);
        h = out;
    }
    Ok((
        h,
        MlpCache {
            inputs,
            pre,
            shapes: params.shapes(),
        },
    ))
}

/// Backward pass of [`mlp_apply`]. Returns `(dParams, dX)`.
pub fn mlp_grad(params: &MlpParams, cache: &MlpCache, dy: &Matrix) -> Result<(MlpParams, Matrix)> {
    if cache.shapes != params.shapes() || cache.pre.len() != params.layers.len() {
        return Err(Error::Contract("MLP cache does not belong to these parameters".into()));
    }
    let last = cache.pre.last().ok_or_else(|| Error::Contract("empty MLP".into()))?;
    if dy.shape() != last.shape() {
        return Err(Error::Shape(format!(
            "output cotangent is {}x{}, forward output was {}x{}",
            dy.rows(),
            dy.cols(),
            last.rows(),
            last.cols()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = dy.clone();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            for (d, p) in delta.data_mut().iter_mut().zip(cache.pre[li].data()) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        grads.layers[li].weight = cache.inputs[li].matmul_tn(&delta)?;
        grads.layers[li].bias = delta.column_sums();
        delta = delta.matmul_nt(&layer.weight)?;
    }
    Ok((grads, delta))
}
