use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    backward_layer, forward_layer, update_running_stats, Cache, Dense, Layer, Param,
};
use super::Tensor;
use crate::error::{param_err, Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// An ordered stack of layers with its parameters, Adam state and the trace of
/// the most recent forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    training: bool,
    adam_steps: u64,
    trace: Option<Vec<Cache>>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_dims == other.input_dims
            && self.training == other.training
            && self.adam_steps == other.adam_steps
    }
}

impl Network {
    /// `input_dims` are per-item dims (no batch axis).
    pub fn new(input_dims: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut dims = input_dims.clone();
        for (i, l) in layers.iter().enumerate() {
            dims = l
                .output_dims(&dims)
                .map_err(|e| Error::Parameter(format!("layer {i}: {e}")))?;
        }
        Ok(Self {
            layers,
            input_dims,
            output_dims: dims,
            training: true,
            adam_steps: 0,
            trace: None,
        })
    }

    /// Dense layers with ReLU between them and a linear output.
    pub fn mlp<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return param_err("an MLP needs at least input and output sizes");
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            layers.push(Layer::Dense(Dense::new(w[0], w[1], rng)));
            if i + 2 < sizes.len() {
                layers.push(Layer::Relu);
            }
        }
        Self::new(vec![sizes[0]], layers)
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_dims.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Training mode uses batch statistics in batch-norm layers; inference mode
    /// uses the running estimates.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        for l in &mut self.layers {
            if let Layer::Residual(inner) = l {
                inner.set_training(training);
            }
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims.len() != self.input_dims.len() + 1 || x.dims[1..] != self.input_dims[..] {
            return param_err(format!(
                "network expects [batch, {:?}] input, got {:?}",
                self.input_dims, x.dims
            ));
        }
        if x.batch() == 0 {
            return param_err("empty batch");
        }
        Ok(())
    }

    pub(crate) fn run(&self, x: &Tensor, training: bool) -> Result<(Tensor, Vec<Cache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = forward_layer(l, &cur, training)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Forward pass recording the trace needed by [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, caches) = self.run(x, self.training)?;
        if self.training {
            self.update_running_stats(&caches);
        }
        self.trace = Some(caches);
        Ok(y)
    }

    /// Inference-mode forward pass that leaves the network untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    pub(crate) fn update_running_stats(&mut self, caches: &[Cache]) {
        for (l, c) in self.layers.iter_mut().zip(caches) {
            update_running_stats(l, c);
        }
    }

    /// Backpropagate `grad_out` through the last forward pass. Parameter
    /// gradients are accumulated; the input gradient is returned.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let caches = self.trace.take().ok_or_else(|| {
            Error::State("backward called without a preceding forward pass".into())
        })?;
        self.backward_with(caches, grad_out)
    }

    pub(crate) fn backward_with(
        &mut self,
        caches: Vec<Cache>,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        if grad_out.dims.len() != self.output_dims.len() + 1
            || grad_out.dims[1..] != self.output_dims[..]
        {
            return param_err(format!(
                "output gradient must be [batch, {:?}], got {:?}",
                self.output_dims, grad_out.dims
            ));
        }
        let mut g = grad_out.clone();
        for (l, c) in self.layers.iter_mut().zip(caches).rev() {
            g = backward_layer(l, c, &g)?;
        }
        Ok(g)
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn parameters(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_parameters(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len()
            || params
                .iter()
                .zip(values)
                .any(|(p, v)| p.value.len() != v.len())
        {
            return param_err("parameter shapes do not match the network");
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.value.copy_from_slice(v);
        }
        Ok(())
    }

    /// Accumulated gradients, one vector per parameter array.
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.grad.clone()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One bias-corrected Adam update with the supplied gradients.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<()> {
        {
            let params = self.params();
            if params.len() != grads.len()
                || params
                    .iter()
                    .zip(grads)
                    .any(|(p, g)| p.value.len() != g.len())
            {
                return param_err("gradient shapes do not match the network parameters");
            }
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            for i in 0..g.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Apply Adam with the accumulated gradients, then clear them.
    pub fn step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let g = self.gradients();
        self.adam_step(&g, cfg)?;
        self.zero_grad();
        Ok(())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare backpropagated gradients of a random linear functional of the output
/// with central differences. At least 200 parameters are sampled (all of them
/// for smaller networks), plus up to 64 input entries. Returns the largest
/// relative error.
pub fn grad_check(network: &Network, input: &Tensor, epsilon: f64, seed: u64) -> Result<f64> {
    let mut net = network.clone();
    let training = net.is_training();
    let mut rng = rng_from(seed);
    let out = net.infer(input)?;
    let r = Tensor {
        dims: out.dims.clone(),
        data: (0..out.data.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let loss = |n: &Network, x: &Tensor| -> Result<f64> {
        let (y, _) = n.run(x, training)?;
        Ok(y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum())
    };
    net.zero_grad();
    net.forward(input)?;
    let dx = net.backward(&r)?;
    let grads = net.gradients();

    let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= 256 {
        (0..total).collect()
    } else {
        sample(&mut rng, total, 256).into_vec()
    };
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let orig = net.params()[pi].value[off];
        net.params_mut()[pi].value[off] = orig + epsilon;
        let lp = loss(&net, input)?;
        net.params_mut()[pi].value[off] = orig - epsilon;
        let lm = loss(&net, input)?;
        net.params_mut()[pi].value[off] = orig;
        worst = worst.max(rel_err(grads[pi][off], (lp - lm) / (2.0 * epsilon)));
    }
    let n_in = input.data.len();
    let in_picks: Vec<usize> = if n_in <= 64 {
        (0..n_in).collect()
    } else {
        sample(&mut rng, n_in, 64).into_vec()
    };
    for i in in_picks {
        let mut xp = input.clone();
        xp.data[i] += epsilon;
        let lp = loss(&net, &xp)?;
        xp.data[i] -= 2.0 * epsilon;
        let lm = loss(&net, &xp)?;
        worst = worst.max(rel_err(dx.data[i], (lp - lm) / (2.0 * epsilon)));
    }
    Ok(worst)
}
