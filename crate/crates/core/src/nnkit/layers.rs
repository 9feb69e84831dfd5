use rand::Rng;

use super::network::Network;
use super::Tensor;
use crate::error::{param_err, Error, Result};

/// One trainable array with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(dims: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            dims,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn uniform<R: Rng + ?Sized>(dims: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(dims, value)
    }
}

/// Fully connected layer `y = x W^T + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub(crate) w: Param,
    pub(crate) b: Param,
}

impl Dense {
    /// Uniform fan-in initialization in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            w: Param::uniform(vec![outputs, inputs], bound, rng),
            b: Param::uniform(vec![outputs], bound, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Param::new(vec![outputs, inputs], vec![0.0; inputs * outputs]),
            b: Param::new(vec![outputs], vec![0.0; outputs]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.w.value[i * n + i] = 1.0;
        }
        d
    }

    pub fn inputs(&self) -> usize {
        self.w.dims[1]
    }

    pub fn outputs(&self) -> usize {
        self.w.dims[0]
    }

    pub fn weights(&self) -> &[f64] {
        &self.w.value
    }

    pub fn bias(&self) -> &[f64] {
        &self.b.value
    }
}

/// Strided 2-D convolution without padding, weights `[out_c, in_c, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub(crate) w: Param,
    pub(crate) b: Param,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_c * kernel * kernel).max(1) as f64).sqrt();
        Self {
            w: Param::uniform(vec![out_c, in_c, kernel, kernel], bound, rng),
            b: Param::uniform(vec![out_c], bound, rng),
            stride: stride.max(1),
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.w.dims[0], self.w.dims[1], self.w.dims[2])
    }

    pub(crate) fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (_, _, k) = self.shape();
        if h < k || w < k {
            return None;
        }
        Some(((h - k) / self.stride + 1, (w - k) / self.stride + 1))
    }
}

/// Batch normalization over the feature axis of `[B, n]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub(crate) gamma: Param,
    pub(crate) beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(n: usize) -> Self {
        Self {
            gamma: Param::new(vec![n], vec![1.0; n]),
            beta: Param::new(vec![n], vec![0.0; n]),
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Sigmoid,
    BatchNorm(BatchNorm),
    /// `[B, d1, d2, ...] -> [B, d1 * d2 * ...]`
    Flatten,
    /// `y = x + f(x)`.
    Residual(Box<Network>),
}

impl Layer {
    /// Residual block whose inner network's final dense layer starts at zero, so
    /// the block is the identity until trained.
    pub fn residual(mut inner: Network) -> Result<Layer> {
        if inner.input_dims() != inner.output_dims() {
            return param_err("residual block must preserve its input shape");
        }
        let last = inner
            .layers_mut()
            .iter_mut()
            .rev()
            .find_map(|l| {
                if let Layer::Dense(d) = l {
                    Some(d)
                } else {
                    None
                }
            })
            .ok_or_else(|| Error::Parameter("residual block needs a dense layer".into()))?;
        last.w.value.iter_mut().for_each(|x| *x = 0.0);
        last.b.value.iter_mut().for_each(|x| *x = 0.0);
        Ok(Layer::Residual(Box::new(inner)))
    }

    /// Per-item output dims for per-item input dims.
    pub(crate) fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return param_err(format!(
                        "dense layer expects [{}], got {input:?}",
                        d.inputs()
                    ));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2d(c) => {
                let (oc, ic, _) = c.shape();
                if input.len() != 3 || input[0] != ic {
                    return param_err(format!("conv layer expects [{ic}, H, W], got {input:?}"));
                }
                let (oh, ow) = c.out_hw(input[1], input[2]).ok_or_else(|| {
                    Error::Parameter(format!("conv input {input:?} smaller than kernel"))
                })?;
                Ok(vec![oc, oh, ow])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::BatchNorm(bn) => {
                if input != [bn.running_mean.len()] {
                    return param_err(format!(
                        "batch norm expects [{}], got {input:?}",
                        bn.running_mean.len()
                    ));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Residual(inner) => {
                if input != inner.input_dims() {
                    return param_err(format!(
                        "residual block expects {:?}, got {input:?}",
                        inner.input_dims()
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => vec![&d.w, &d.b],
            Layer::Conv2d(c) => vec![&c.w, &c.b],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Residual(inner) => inner.params(),
            _ => vec![],
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            Layer::Conv2d(c) => vec![&mut c.w, &mut c.b],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Residual(inner) => inner.params_mut(),
            _ => vec![],
        }
    }
}

/// Values a layer keeps from the forward pass for its backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Tensor),
    Output(Tensor),
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    },
    Shape(Vec<usize>),
    Nested(Vec<Cache>),
}

pub(crate) fn forward_layer(layer: &Layer, x: &Tensor, training: bool) -> Result<(Tensor, Cache)> {
    let b = x.batch();
    match layer {
        Layer::Dense(d) => {
            let (n_in, n_out) = (d.inputs(), d.outputs());
            let mut y = Tensor::zeros(vec![b, n_out]);
            for i in 0..b {
                let xi = x.item(i);
                let yi = y.item_mut(i);
                for o in 0..n_out {
                    let w = &d.w.value[o * n_in..(o + 1) * n_in];
                    yi[o] = d.b.value[o] + dot(w, xi);
                }
            }
            Ok((y, Cache::Input(x.clone())))
        }
        Layer::Conv2d(c) => {
            let (oc, ic, k) = c.shape();
            let (h, w) = (x.dims[2], x.dims[3]);
            let (oh, ow) = c.out_hw(h, w).expect("shape validated at construction");
            let s = c.stride;
            let mut y = Tensor::zeros(vec![b, oc, oh, ow]);
            for n in 0..b {
                let xn = x.item(n);
                let yn = y.item_mut(n);
                for co in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = c.b.value[co];
                            for ci in 0..ic {
                                for ky in 0..k {
                                    let wrow = &c.w.value[((co * ic + ci) * k + ky) * k..][..k];
                                    let xrow = &xn[(ci * h + oy * s + ky) * w + ox * s..][..k];
                                    acc += dot(wrow, xrow);
                                }
                            }
                            yn[(co * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            Ok((y, Cache::Input(x.clone())))
        }
        Layer::Relu => {
            let y = Tensor {
                dims: x.dims.clone(),
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            };
            Ok((y.clone(), Cache::Output(y)))
        }
        Layer::Sigmoid => {
            let y = Tensor {
                dims: x.dims.clone(),
                data: x.data.iter().map(|&v| sigmoid(v)).collect(),
            };
            Ok((y.clone(), Cache::Output(y)))
        }
        Layer::BatchNorm(bn) => {
            let n = bn.running_mean.len();
            // A single-item batch carries no batch statistics; use the running ones.
            let batch_stats = training && b > 1;
            let (mean, var) = if batch_stats {
                let mut mean = vec![0.0; n];
                let mut var = vec![0.0; n];
                for i in 0..b {
                    for (m, v) in mean.iter_mut().zip(x.item(i)) {
                        *m += v / b as f64;
                    }
                }
                for i in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(x.item(i)).zip(&mean) {
                        *s += (v - m).powi(2) / b as f64;
                    }
                }
                (mean, var)
            } else {
                (bn.running_mean.clone(), bn.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut xhat = vec![0.0; b * n];
            let mut y = Tensor::zeros(x.dims.clone());
            for i in 0..b {
                let xi = x.item(i);
                let yi = y.item_mut(i);
                for j in 0..n {
                    let h = (xi[j] - mean[j]) * inv_std[j];
                    xhat[i * n + j] = h;
                    yi[j] = bn.gamma.value[j] * h + bn.beta.value[j];
                }
            }
            Ok((
                y,
                Cache::Bn {
                    xhat,
                    inv_std,
                    mean,
                    var,
                    batch_stats,
                },
            ))
        }
        Layer::Flatten => {
            let y = Tensor {
                dims: vec![b, x.item_len()],
                data: x.data.clone(),
            };
            Ok((y, Cache::Shape(x.dims.clone())))
        }
        Layer::Residual(inner) => {
            let (fx, caches) = inner.run(x, training)?;
            let mut y = fx;
            for (a, v) in y.data.iter_mut().zip(&x.data) {
                *a += v;
            }
            Ok((y, Cache::Nested(caches)))
        }
    }
}

/// Accumulate parameter gradients and return the input gradient.
pub(crate) fn backward_layer(layer: &mut Layer, cache: Cache, g: &Tensor) -> Result<Tensor> {
    let b = g.batch();
    match (layer, cache) {
        (Layer::Dense(d), Cache::Input(x)) => {
            let (n_in, n_out) = (d.inputs(), d.outputs());
            let mut dx = Tensor::zeros(x.dims.clone());
            for i in 0..b {
                let gi = g.item(i);
                let xi = x.item(i);
                let dxi = dx.item_mut(i);
                for o in 0..n_out {
                    let go = gi[o];
                    if go == 0.0 {
                        continue;
                    }
                    d.b.grad[o] += go;
                    let wg = &mut d.w.grad[o * n_in..(o + 1) * n_in];
                    axpy(go, xi, wg);
                    axpy(go, &d.w.value[o * n_in..(o + 1) * n_in], dxi);
                }
            }
            Ok(dx)
        }
        (Layer::Conv2d(c), Cache::Input(x)) => {
            let (oc, ic, k) = c.shape();
            let (h, w) = (x.dims[2], x.dims[3]);
            let (oh, ow) = (g.dims[2], g.dims[3]);
            let s = c.stride;
            let mut dx = Tensor::zeros(x.dims.clone());
            for n in 0..b {
                let xn = x.item(n);
                let gn = g.item(n);
                let dxn = dx.item_mut(n);
                for co in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gn[(co * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            c.b.grad[co] += go;
                            for ci in 0..ic {
                                for ky in 0..k {
                                    let wi = ((co * ic + ci) * k + ky) * k;
                                    let xi = (ci * h + oy * s + ky) * w + ox * s;
                                    axpy(go, &xn[xi..xi + k], &mut c.w.grad[wi..wi + k]);
                                    axpy(go, &c.w.value[wi..wi + k], &mut dxn[xi..xi + k]);
                                }
                            }
                        }
                    }
                }
            }
            Ok(dx)
        }
        (Layer::Relu, Cache::Output(y)) => Ok(Tensor {
            dims: g.dims.clone(),
            data: g
                .data
                .iter()
                .zip(&y.data)
                .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                .collect(),
        }),
        (Layer::Sigmoid, Cache::Output(y)) => Ok(Tensor {
            dims: g.dims.clone(),
            data: g
                .data
                .iter()
                .zip(&y.data)
                .map(|(gv, yv)| gv * yv * (1.0 - yv))
                .collect(),
        }),
        (
            Layer::BatchNorm(bn),
            Cache::Bn {
                xhat,
                inv_std,
                batch_stats,
                ..
            },
        ) => {
            let n = inv_std.len();
            let mut dx = Tensor::zeros(g.dims.clone());
            let mut sum_g = vec![0.0; n];
            let mut sum_gx = vec![0.0; n];
            for i in 0..b {
                let gi = g.item(i);
                for j in 0..n {
                    sum_g[j] += gi[j];
                    sum_gx[j] += gi[j] * xhat[i * n + j];
                }
            }
            for j in 0..n {
                bn.beta.grad[j] += sum_g[j];
                bn.gamma.grad[j] += sum_gx[j];
            }
            let bf = b as f64;
            for i in 0..b {
                let gi = g.item(i).to_vec();
                let dxi = dx.item_mut(i);
                for j in 0..n {
                    let gamma = bn.gamma.value[j];
                    dxi[j] = if batch_stats {
                        gamma * inv_std[j] / bf
                            * (bf * gi[j] - sum_g[j] - xhat[i * n + j] * sum_gx[j])
                    } else {
                        gamma * inv_std[j] * gi[j]
                    };
                }
            }
            Ok(dx)
        }
        (Layer::Flatten, Cache::Shape(dims)) => Ok(Tensor {
            dims,
            data: g.data.clone(),
        }),
        (Layer::Residual(inner), Cache::Nested(caches)) => {
            let mut dx = inner.backward_with(caches, g)?;
            for (a, v) in dx.data.iter_mut().zip(&g.data) {
                *a += v;
            }
            Ok(dx)
        }
        _ => Err(Error::State("layer cache does not match layer kind".into())),
    }
}

/// Fold batch statistics from a training forward pass into running estimates.
pub(crate) fn update_running_stats(layer: &mut Layer, cache: &Cache) {
    match (layer, cache) {
        (
            Layer::BatchNorm(bn),
            Cache::Bn {
                mean,
                var,
                batch_stats: true,
                ..
            },
        ) => {
            let m = bn.momentum;
            for j in 0..mean.len() {
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * mean[j];
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * var[j];
            }
        }
        (Layer::Residual(inner), Cache::Nested(caches)) => inner.update_running_stats(caches),
        _ => {}
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
