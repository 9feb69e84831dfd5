//! Vertical federated training of per-vehicle precoding models.
//!
//! Each vehicle owns a local model that maps its received pilots and whatever
//! sensors it carries to its own precoding vector. Vehicles upload quantized
//! precoders, the RSU evaluates the sum-rate loss and unicasts each vehicle the
//! gradient with respect to its column; raw sensor features never leave the
//! vehicle.

use std::borrow::Cow;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{dft_codebook, synthesize_channel, ChannelConfig, Codebook};
use crate::error::{param_err, Error, Result};
use crate::linalg::{fro_sqr, from_real, to_real, CMatrix, CVector, C64};
use crate::nnkit::{
    concat_features, read_checkpoint, split_features, write_checkpoint, AdamConfig, BatchNorm,
    Conv2d, Dense, Layer, Network, Tensor,
};
use crate::pilots::{
    build_pilot_matrix, dequantize_feedback, quantize_feedback, transmit_downlink, PilotMatrix,
    QuantizerConfig,
};
use crate::precode::{sum_rate, zf_precoder, RateReport};
use crate::rng::{derive, derive_named, rng_from};
use crate::scene::{corrupt_snapshot, sample_snapshot, CorruptionConfig, Scene, SensorFlags};
use crate::sensing::{extract_features, FeatureConfig, VehicleFeatures};

/// Layer widths of the local models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pilot_width: usize,
    pub gps_width: usize,
    pub rgb_width: usize,
    pub lidar_width: usize,
    /// Hidden widths of the integration network.
    pub integration: Vec<usize>,
    /// Batch normalization after the first two integration layers.
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pilot_width: 128,
            gps_width: 256,
            rgb_width: 256,
            lidar_width: 512,
            integration: vec![256, 512, 128],
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Base of the heterogeneity regularizer.
    pub lambda: f64,
    /// Rate threshold of the regularizer, bits/s/Hz.
    pub rate_threshold: f64,
    pub regularizer: Regularizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub feedback_bits: u32,
    /// Quantizer clip; `None` uses three times the RMS precoder component.
    pub clip: Option<f64>,
    pub power: f64,
    pub noise_var: f64,
    pub pilot_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            rate_threshold: 0.3,
            regularizer: Regularizer::Penalty,
            lr: 1e-3,
            epochs: 600,
            batch_size: 8,
            feedback_bits: 8,
            clip: None,
            power: 1.0,
            noise_var: 0.1,
            pilot_len: 8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 1.0) {
            return param_err(format!("lambda must exceed 1, got {}", self.lambda));
        }
        if !(self.rate_threshold > 0.0) {
            return param_err("rate threshold must be positive");
        }
        if !(self.power > 0.0) || !(self.noise_var > 0.0) {
            return param_err("power and noise variance must be positive");
        }
        if self.batch_size == 0 || self.pilot_len == 0 {
            return param_err("batch size and pilot length must be at least 1");
        }
        if !(self.lr >= 0.0) {
            return param_err("learning rate must be non-negative");
        }
        Ok(())
    }

    pub fn quantizer(&self, n: usize, k: usize) -> Result<QuantizerConfig> {
        match self.clip {
            Some(c) => QuantizerConfig::new(self.feedback_bits, c),
            None => {
                QuantizerConfig::with_default_clip(self.feedback_bits, n, self.power / k as f64)
            }
        }
    }
}

/// Form of the rate-threshold term `lambda^(R_T - R_k)` in the RSU loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Plain negative sum rate.
    Off,
    /// `-sum_k (R_k + lambda^(R_T - R_k))`. Minimizing this pushes rates below
    /// roughly `R_T + log_lambda(ln lambda)` towards zero.
    AsWritten,
    /// `-sum_k R_k + sum_k lambda^(R_T - R_k)`: a penalty that is steep for users
    /// below the threshold and fades as their rate grows.
    #[default]
    Penalty,
}

impl Regularizer {
    fn term(self, lambda: f64, rate_threshold: f64, rate: f64) -> f64 {
        match self {
            Regularizer::Off => 0.0,
            Regularizer::AsWritten => -lambda.powf(rate_threshold - rate),
            Regularizer::Penalty => lambda.powf(rate_threshold - rate),
        }
    }

    /// Derivative of [`Regularizer::term`] with respect to the rate.
    fn slope(self, lambda: f64, rate_threshold: f64, rate: f64) -> f64 {
        -lambda.ln() * self.term(lambda, rate_threshold, rate)
    }
}

/// What one vehicle observes in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleInput {
    /// Received DL pilots, one entry per training codeword.
    pub pilots: CVector,
    pub features: VehicleFeatures,
}

/// One scene snapshot with its true channels and every vehicle's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub h_dl: Vec<CVector>,
    pub h_ul: Vec<CVector>,
    pub inputs: Vec<VehicleInput>,
}

impl Sample {
    pub fn channel_matrix(&self) -> CMatrix {
        CMatrix::from_columns(&self.h_dl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub flags: Vec<SensorFlags>,
    pub n: usize,
    pub pilots: PilotMatrix,
}

impl Dataset {
    pub fn num_vehicles(&self) -> usize {
        self.flags.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `L_P` evenly spaced DFT codewords at power `P`, the offline training pilots.
pub fn offline_pilots(codebook: &Codebook, pilot_len: usize, power: f64) -> Result<PilotMatrix> {
    let n = codebook.n();
    if pilot_len == 0 || pilot_len > n {
        return param_err(format!("pilot length must be in 1..={n}, got {pilot_len}"));
    }
    let idx: Vec<usize> = (0..pilot_len).map(|i| i * n / pilot_len).collect();
    build_pilot_matrix(&idx, codebook, power)
}

/// How observations are produced from a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub channel: &'a ChannelConfig,
    pub features: &'a FeatureConfig,
    pub corruption: Option<&'a CorruptionConfig>,
}

/// Draw `count` snapshots of `scene` (fresh vehicle positions each) with true
/// channels, received offline pilots and extracted sensor features.
pub fn build_dataset(
    scene: &Scene,
    obs: Observation<'_>,
    train: &TrainingConfig,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    train.validate()?;
    let n = obs.channel.n();
    let codebook = dft_codebook(n);
    let pilots = offline_pilots(&codebook, train.pilot_len, train.power)?;
    let flags: Vec<SensorFlags> = scene.vehicles.iter().map(|v| v.sensors).collect();
    let samples = (0..count)
        .into_par_iter()
        .map(|s| {
            let s_seed = derive(seed, s as u64);
            let snap = scene.resample_vehicles(derive_named(s_seed, "placement"))?;
            draw_sample(&snap, obs, &pilots, train.noise_var, s_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        flags,
        n,
        pilots,
    })
}

/// Observations for the vehicles exactly as placed in `scene`.
pub fn draw_sample(
    scene: &Scene,
    obs: Observation<'_>,
    pilots: &PilotMatrix,
    noise_var: f64,
    seed: u64,
) -> Result<Sample> {
    let k = scene.vehicles.len();
    let mut h_dl = Vec::with_capacity(k);
    let mut h_ul = Vec::with_capacity(k);
    let mut inputs = Vec::with_capacity(k);
    let ch_seed = derive_named(seed, "channel");
    for (i, v) in scene.vehicles.iter().enumerate() {
        let ch = synthesize_channel(scene, i, obs.channel, ch_seed)?;
        let v_seed = derive(seed, i as u64);
        let mut snapshot = sample_snapshot(scene, i, derive_named(v_seed, "sensors"))?;
        if let Some(c) = obs.corruption {
            snapshot = corrupt_snapshot(&snapshot, c, derive_named(v_seed, "corruption"))?;
        }
        let features = extract_features(
            &snapshot,
            v.sensors,
            scene.rsu_position,
            &scene.sensors.camera,
            obs.features,
            derive_named(v_seed, "features"),
        )?;
        let y = transmit_downlink(
            &ch.h_dl,
            &pilots.s,
            noise_var,
            derive_named(v_seed, "pilots"),
        )?;
        h_dl.push(ch.h_dl);
        h_ul.push(ch.h_ul);
        inputs.push(VehicleInput {
            pilots: y,
            features,
        });
    }
    Ok(Sample { h_dl, h_ul, inputs })
}

/// One vehicle's branch networks plus its integration network.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub flags: SensorFlags,
    pub pilot: Network,
    pub gps: Option<Network>,
    pub rgb: Option<Network>,
    pub lidar: Option<Network>,
    pub integration: Network,
    n: usize,
    pilot_len: usize,
    column_power: f64,
    lidar_dims: [usize; 2],
    trace: Option<Vec<CVector>>,
}

fn branch<R: rand::Rng + ?Sized>(input: usize, width: usize, rng: &mut R) -> Result<Network> {
    Network::new(
        vec![input],
        vec![
            Layer::Dense(Dense::new(input, width, rng)),
            Layer::Relu,
            Layer::Dense(Dense::new(width, width, rng)),
            Layer::Relu,
        ],
    )
}

impl LocalModel {
    /// Fresh randomly initialized model. `column_power` is the power of the
    /// precoding vector the model emits (`P / K`).
    pub fn new(
        flags: SensorFlags,
        cfg: &ModelConfig,
        features: &FeatureConfig,
        n: usize,
        pilot_len: usize,
        column_power: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from(seed);
        let pilot = branch(2 * pilot_len, cfg.pilot_width, &mut rng)?;
        let gps = flags
            .has_gps
            .then(|| branch(features.gps_len(), cfg.gps_width, &mut rng))
            .transpose()?;
        let rgb = flags
            .has_rgb
            .then(|| branch(features.rgb_len(), cfg.rgb_width, &mut rng))
            .transpose()?;
        let (lx, ly) = (features.bev.lx, features.bev.ly);
        let lidar = if flags.has_lidar {
            let c1 = Conv2d::new(1, 8, 3, 2, &mut rng);
            let c2 = Conv2d::new(8, 16, 3, 2, &mut rng);
            let h1 = ((lx - 3) / 2 + 1, (ly - 3) / 2 + 1);
            let h2 = ((h1.0 - 3) / 2 + 1, (h1.1 - 3) / 2 + 1);
            Some(Network::new(
                vec![1, lx, ly],
                vec![
                    Layer::Conv2d(c1),
                    Layer::Relu,
                    Layer::Conv2d(c2),
                    Layer::Flatten,
                    Layer::Dense(Dense::new(16 * h2.0 * h2.1, cfg.lidar_width, &mut rng)),
                    Layer::Relu,
                ],
            )?)
        } else {
            None
        };
        let mut width = cfg.pilot_width;
        if flags.has_gps {
            width += cfg.gps_width;
        }
        if flags.has_rgb {
            width += cfg.rgb_width;
        }
        if flags.has_lidar {
            width += cfg.lidar_width;
        }
        let mut layers = Vec::new();
        let mut prev = width;
        for (i, &h) in cfg.integration.iter().enumerate() {
            layers.push(Layer::Dense(Dense::new(prev, h, &mut rng)));
            if cfg.batch_norm && i < 2 {
                layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            }
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense(Dense::new(prev, 2 * n, &mut rng)));
        let integration = Network::new(vec![width], layers)?;
        Ok(Self {
            flags,
            pilot,
            gps,
            rgb,
            lidar,
            integration,
            n,
            pilot_len,
            column_power,
            lidar_dims: [lx, ly],
            trace: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn integration_input_len(&self) -> usize {
        self.integration.input_len()
    }

    pub fn networks(&self) -> Vec<&Network> {
        let mut v = vec![&self.pilot];
        v.extend(self.gps.iter());
        v.extend(self.rgb.iter());
        v.extend(self.lidar.iter());
        v.push(&self.integration);
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        let mut v = vec![&mut self.pilot];
        v.extend(self.gps.iter_mut());
        v.extend(self.rgb.iter_mut());
        v.extend(self.lidar.iter_mut());
        v.push(&mut self.integration);
        v
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    pub fn set_training(&mut self, training: bool) {
        for n in self.networks_mut() {
            n.set_training(training);
        }
    }

    pub fn zero_grad(&mut self) {
        for n in self.networks_mut() {
            n.zero_grad();
        }
    }

    pub fn step(&mut self, adam: &AdamConfig) -> Result<()> {
        for n in self.networks_mut() {
            n.step(adam)?;
        }
        Ok(())
    }

    fn branch_inputs(&self, batch: &[&VehicleInput]) -> Result<Vec<Tensor>> {
        let b = batch.len();
        let mut pilot = Vec::with_capacity(b);
        for x in batch {
            if x.pilots.len() != self.pilot_len {
                return param_err(format!(
                    "expected {} received pilots, got {}",
                    self.pilot_len,
                    x.pilots.len()
                ));
            }
            let norm = x.pilots.norm();
            let scale = if norm > 0.0 {
                (self.pilot_len as f64).sqrt() / norm
            } else {
                0.0
            };
            pilot.push(to_real(&(&x.pilots * C64::from(scale))));
        }
        let mut out = vec![Tensor::from_rows(&pilot)?];
        let pick = |name: &str,
                    has: bool,
                    get: &dyn Fn(&VehicleFeatures) -> Option<&Vec<f64>>|
         -> Result<Option<Vec<Vec<f64>>>> {
            let mut rows = Vec::with_capacity(b);
            for x in batch {
                match (has, get(&x.features)) {
                    (true, Some(v)) => rows.push(v.clone()),
                    (false, None) => {}
                    (true, None) => {
                        return param_err(format!(
                            "{name} features missing for a vehicle with {name}"
                        ))
                    }
                    (false, Some(_)) => {
                        return param_err(format!(
                            "{name} features supplied but the model has no {name} branch"
                        ))
                    }
                }
            }
            Ok(has.then_some(rows))
        };
        if let Some(rows) = pick("GPS", self.flags.has_gps, &|f| f.gps.as_ref())? {
            out.push(Tensor::from_rows(&rows)?);
        }
        if let Some(rows) = pick("RGB", self.flags.has_rgb, &|f| f.rgb.as_ref())? {
            out.push(Tensor::from_rows(&rows)?);
        }
        if let Some(rows) = pick("LiDAR", self.flags.has_lidar, &|f| f.lidar.as_ref())? {
            let [lx, ly] = self.lidar_dims;
            let mut t = Tensor::from_rows(&rows)?;
            if t.item_len() != lx * ly {
                return param_err(format!("LiDAR grid must have {} cells", lx * ly));
            }
            t.dims = vec![b, 1, lx, ly];
            out.push(t);
        }
        Ok(out)
    }

    fn normalize_outputs(&self, out: &Tensor) -> Vec<CVector> {
        let c = self.column_power.sqrt();
        (0..out.batch())
            .map(|i| {
                let u = from_real(out.item(i));
                let norm = u.norm();
                if norm > 0.0 {
                    u * C64::from(c / norm)
                } else {
                    u
                }
            })
            .collect()
    }

    /// Training forward pass; keeps the trace for [`LocalModel::backward`].
    pub fn forward(&mut self, batch: &[&VehicleInput]) -> Result<Vec<CVector>> {
        let inputs = self.branch_inputs(batch)?;
        let mut feats = Vec::with_capacity(inputs.len());
        let mut nets = self.networks_mut();
        let integration = nets.pop().expect("integration network always present");
        for (net, x) in nets.into_iter().zip(&inputs) {
            feats.push(net.forward(x)?);
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let out = integration.forward(&concat_features(&refs)?)?;
        let raw: Vec<CVector> = (0..out.batch()).map(|i| from_real(out.item(i))).collect();
        let v = self.normalize_outputs(&out);
        self.trace = Some(raw);
        Ok(v)
    }

    /// Inference-mode forward pass; the model is not modified.
    pub fn infer(&self, batch: &[&VehicleInput]) -> Result<Vec<CVector>> {
        let inputs = self.branch_inputs(batch)?;
        let nets = self.networks();
        let (integration, branches) = nets
            .split_last()
            .expect("integration network always present");
        let feats = branches
            .iter()
            .zip(&inputs)
            .map(|(n, x)| n.infer(x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = feats.iter().collect();
        let out = integration.infer(&concat_features(&refs)?)?;
        Ok(self.normalize_outputs(&out))
    }

    /// Backpropagate gradients with respect to the emitted precoding vectors
    /// (complex form `dL/dRe v + j dL/dIm v`) into every branch.
    pub fn backward(&mut self, grads: &[CVector]) -> Result<()> {
        let raw = self
            .trace
            .take()
            .ok_or_else(|| Error::State("local model backward called without forward".into()))?;
        if grads.len() != raw.len() {
            return param_err("one gradient per batch item is required");
        }
        let c = self.column_power.sqrt();
        let mut rows = Vec::with_capacity(raw.len());
        for (u, g) in raw.iter().zip(grads) {
            let norm = u.norm();
            if norm == 0.0 {
                rows.push(vec![0.0; 2 * self.n]);
                continue;
            }
            let unit = u / C64::from(norm);
            let radial: f64 = unit
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum();
            let gu = (g - &unit * C64::from(radial)) * C64::from(c / norm);
            rows.push(to_real(&gu));
        }
        let g_out = Tensor::from_rows(&rows)?;
        let mut nets = self.networks_mut();
        let integration = nets.pop().expect("integration network always present");
        let g_concat = integration.backward(&g_out)?;
        let sizes: Vec<usize> = nets.iter().map(|n| n.output_len()).collect();
        let pieces = split_features(&g_concat, &sizes)?;
        for (net, g) in nets.into_iter().zip(&pieces) {
            net.backward(g)?;
        }
        Ok(())
    }

    /// All networks' checkpoints back to back.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for n in self.networks() {
            write_checkpoint(n, &mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(&mut self, mut r: R) -> Result<()> {
        for n in self.networks_mut() {
            read_checkpoint(n, &mut r)?;
        }
        Ok(())
    }
}

/// Build one fresh local model per vehicle of the dataset.
pub fn fresh_models(
    flags: &[SensorFlags],
    cfg: &ModelConfig,
    features: &FeatureConfig,
    n: usize,
    train: &TrainingConfig,
    seed: u64,
) -> Result<Vec<LocalModel>> {
    let k = flags.len();
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            LocalModel::new(
                f,
                cfg,
                features,
                n,
                train.pilot_len,
                train.power / k as f64,
                derive(seed, i as u64),
            )
        })
        .collect()
}

/// Negative sum rate plus the chosen rate-threshold term.
pub fn rsu_loss(
    v: &CMatrix,
    h: &CMatrix,
    noise_var: f64,
    lambda: f64,
    rate_threshold: f64,
    regularizer: Regularizer,
) -> Result<(f64, RateReport)> {
    if !(lambda > 0.0) {
        return param_err("lambda must be positive");
    }
    let rates = sum_rate(h, v, noise_var)?;
    let reg: f64 = rates
        .per_user
        .iter()
        .map(|&r| regularizer.term(lambda, rate_threshold, r))
        .sum();
    Ok((reg - rates.total, rates))
}

/// Loss together with its gradient with respect to `V`, returned in the complex
/// form `dL/dRe V + j dL/dIm V`.
pub fn rsu_loss_grad(
    v: &CMatrix,
    h: &CMatrix,
    noise_var: f64,
    lambda: f64,
    rate_threshold: f64,
    regularizer: Regularizer,
) -> Result<(f64, RateReport, CMatrix)> {
    let (loss, rates) = rsu_loss(v, h, noise_var, lambda, rate_threshold, regularizer)?;
    let k = h.ncols();
    let g = h.ad_mul(v);
    let ln2 = std::f64::consts::LN_2;
    let mut grad = CMatrix::zeros(v.nrows(), v.ncols());
    for u in 0..k {
        let dl_dr = -1.0 + regularizer.slope(lambda, rate_threshold, rates.per_user[u]);
        let total: f64 = (0..k).map(|i| g[(u, i)].norm_sqr()).sum::<f64>() + noise_var;
        let interference = total - g[(u, u)].norm_sqr();
        let hu = h.column(u);
        for i in 0..k {
            // d|h_u^H v_i|^2 = 2 h_u (h_u^H v_i)
            let mut coef = 1.0 / total;
            if i != u {
                coef -= 1.0 / interference;
            }
            let scale = dl_dr * coef / ln2 * 2.0;
            let mut col = grad.column_mut(i);
            col.axpy(g[(u, i)] * scale, &hu, C64::from(1.0));
        }
    }
    Ok((loss, rates, grad))
}

/// Scale `V` to `trace(V V^H) = P`, returning the scaled matrix and a closure
/// state to map gradients back through the scaling.
pub fn normalize_trace(v: &CMatrix, power: f64) -> (CMatrix, f64) {
    let norm = fro_sqr(v).sqrt();
    if norm == 0.0 {
        return (v.clone(), 0.0);
    }
    (v * C64::from(power.sqrt() / norm), norm)
}

/// Gradient with respect to the unnormalized `V` given the gradient `g` at the
/// normalized matrix.
pub fn normalize_trace_backward(v: &CMatrix, norm: f64, power: f64, g: &CMatrix) -> CMatrix {
    if norm == 0.0 {
        return CMatrix::zeros(v.nrows(), v.ncols());
    }
    let unit = v / C64::from(norm);
    let radial: f64 = unit
        .iter()
        .zip(g.iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum();
    (g - unit * C64::from(radial)) * C64::from(power.sqrt() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    /// Quantized precoder bits, vehicle to RSU.
    PrecoderUpload,
    /// Loss gradient for one vehicle's column, RSU to vehicle.
    GradientUnicast,
}

/// Which channel the RSU used when computing a unicast gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientSource {
    TrueChannel,
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub epoch: usize,
    pub vehicle: usize,
    pub kind: MessageKind,
    pub bytes: u64,
    pub source: Option<GradientSource>,
}

/// Record of everything sent over the air during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageLedger {
    pub messages: Vec<Message>,
}

impl MessageLedger {
    pub fn bytes(&self, kind: MessageKind) -> u64 {
        self.messages
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| m.bytes)
            .sum()
    }

    fn bytes_in_epoch(&self, epoch: usize, kind: MessageKind) -> u64 {
        self.messages
            .iter()
            .filter(|m| m.epoch == epoch && m.kind == kind)
            .map(|m| m.bytes)
            .sum()
    }

    pub fn gradient_sources(&self) -> impl Iterator<Item = GradientSource> + '_ {
        self.messages.iter().filter_map(|m| m.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean true-channel sum rate over the epoch's samples.
    pub sum_rate: f64,
    /// Mean over samples of the smallest per-user true rate.
    pub min_rate: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,loss,sum_rate,min_rate,bytes_up,bytes_down")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.loss, r.sum_rate, r.min_rate, r.bytes_up, r.bytes_down
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub ledger: MessageLedger,
}

/// Channels the RSU should use for the loss of each sample.
pub enum LossChannels<'a> {
    True,
    Pseudo(&'a [Vec<CVector>]),
}

fn gradient_bytes(n: usize) -> u64 {
    (2 * n * 4) as u64
}

/// Run `epochs` of federated training over `data`, starting at epoch index
/// `first_epoch`. The loss uses the true channels or pseudo labels as chosen by
/// `labels`; reported rates always use the true channels.
pub fn federated_epochs(
    models: &mut [LocalModel],
    data: &Dataset,
    labels: LossChannels<'_>,
    cfg: &TrainingConfig,
    first_epoch: usize,
    seed: u64,
    ledger: &mut MessageLedger,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let k = data.num_vehicles();
    if models.len() != k {
        return param_err(format!("{} models for {k} vehicles", models.len()));
    }
    if data.is_empty() {
        return param_err("training set is empty");
    }
    if let LossChannels::Pseudo(p) = &labels {
        if p.len() != data.len() || p.iter().any(|s| s.len() != k) {
            return param_err("pseudo labels must cover every sample and vehicle");
        }
    }
    let n = data.n;
    let q = cfg.quantizer(n, k)?;
    let upload = q.payload_bits(n).div_ceil(8) as u64;
    let adam = AdamConfig::with_lr(cfg.lr);
    let source = match labels {
        LossChannels::True => GradientSource::TrueChannel,
        LossChannels::Pseudo(_) => GradientSource::PseudoLabel,
    };
    for m in models.iter_mut() {
        m.set_training(true);
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = first_epoch + e;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(derive(seed, epoch as u64)));
        let (mut loss_sum, mut rate_sum, mut min_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            // Local forward and quantized upload.
            let outputs = models
                .par_iter_mut()
                .enumerate()
                .map(|(i, m)| {
                    let inputs: Vec<&VehicleInput> =
                        batch.iter().map(|&s| &data.samples[s].inputs[i]).collect();
                    m.forward(&inputs)
                })
                .collect::<Result<Vec<_>>>()?;
            let bits: Vec<Vec<Vec<u8>>> = outputs
                .iter()
                .map(|vs| vs.iter().map(|v| quantize_feedback(v, &q)).collect())
                .collect();
            for i in 0..k {
                ledger.messages.push(Message {
                    epoch,
                    vehicle: i,
                    kind: MessageKind::PrecoderUpload,
                    bytes: upload * b as u64,
                    source: None,
                });
            }
            // RSU aggregation, loss and per-vehicle gradients.
            let mut grads: Vec<Vec<CVector>> = vec![Vec::with_capacity(b); k];
            for (j, &s) in batch.iter().enumerate() {
                let cols = (0..k)
                    .map(|i| dequantize_feedback(&bits[i][j], n, &q))
                    .collect::<Result<Vec<_>>>()?;
                let v_raw = CMatrix::from_columns(&cols);
                let (v, norm) = normalize_trace(&v_raw, cfg.power);
                let h_true = data.samples[s].channel_matrix();
                let h_loss = match labels {
                    LossChannels::True => h_true.clone(),
                    LossChannels::Pseudo(p) => CMatrix::from_columns(&p[s]),
                };
                let (loss, _, g) = rsu_loss_grad(
                    &v,
                    &h_loss,
                    cfg.noise_var,
                    cfg.lambda,
                    cfg.rate_threshold,
                    cfg.regularizer,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("non-finite loss on sample {s}"),
                    });
                }
                let g_raw = normalize_trace_backward(&v_raw, norm, cfg.power, &g);
                // Straight-through across the quantizer: the gradient at the
                // dequantized column is applied to the emitted column.
                for (i, gi) in grads.iter_mut().enumerate() {
                    gi.push(g_raw.column(i) / C64::from(b as f64));
                }
                let report = sum_rate(&h_true, &v, cfg.noise_var)?;
                loss_sum += loss;
                rate_sum += report.total;
                min_sum += report.min();
            }
            for i in 0..k {
                ledger.messages.push(Message {
                    epoch,
                    vehicle: i,
                    kind: MessageKind::GradientUnicast,
                    bytes: gradient_bytes(n) * b as u64,
                    source: Some(source),
                });
            }
            // Local backward and update.
            models
                .par_iter_mut()
                .zip(grads.par_iter())
                .map(|(m, g)| {
                    m.backward(g)?;
                    m.step(&adam)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        let count = data.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / count,
            sum_rate: rate_sum / count,
            min_rate: min_sum / count,
            bytes_up: ledger.bytes_in_epoch(epoch, MessageKind::PrecoderUpload),
            bytes_down: ledger.bytes_in_epoch(epoch, MessageKind::GradientUnicast),
        };
        if !rec.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite mean loss".into(),
            });
        }
        history.push(rec);
    }
    Ok(history)
}

/// Where each epoch's training slots come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// The same slots every epoch.
    Fixed(&'a Dataset),
    /// `per_epoch` freshly drawn slots of `scene` every epoch, as moving
    /// vehicles would provide.
    Fresh {
        scene: &'a Scene,
        obs: Observation<'a>,
        per_epoch: usize,
    },
}

impl<'a> DataSource<'a> {
    pub fn epoch_data(
        &self,
        cfg: &TrainingConfig,
        epoch: usize,
        seed: u64,
    ) -> Result<Cow<'a, Dataset>> {
        match *self {
            DataSource::Fixed(d) => Ok(Cow::Borrowed(d)),
            DataSource::Fresh {
                scene,
                obs,
                per_epoch,
            } => Ok(Cow::Owned(build_dataset(
                scene,
                obs,
                cfg,
                per_epoch,
                derive(derive_named(seed, "epoch-data"), epoch as u64),
            )?)),
        }
    }
}

/// Computes loss channels for a set of slots; the seed is per epoch.
pub type Labeler<'a> = dyn Fn(&Dataset, u64) -> Result<Vec<Vec<CVector>>> + Sync + 'a;

/// Federated training over `cfg.epochs` epochs. Without a labeler the RSU uses
/// the true channels; with one, only the labeler's output enters the loss.
pub fn train_federated(
    models: &mut [LocalModel],
    source: &DataSource<'_>,
    labeler: Option<&Labeler<'_>>,
    cfg: &TrainingConfig,
    seed: u64,
    ledger: &mut MessageLedger,
) -> Result<Vec<EpochRecord>> {
    let run = |models: &mut [LocalModel],
               data: &Dataset,
               cfg: &TrainingConfig,
               first: usize,
               ledger: &mut MessageLedger| {
        match labeler {
            None => federated_epochs(models, data, LossChannels::True, cfg, first, seed, ledger),
            Some(f) => {
                let labels = f(data, derive(derive_named(seed, "labels"), first as u64))?;
                federated_epochs(
                    models,
                    data,
                    LossChannels::Pseudo(&labels),
                    cfg,
                    first,
                    seed,
                    ledger,
                )
            }
        }
    };
    match source {
        DataSource::Fixed(d) => run(models, d, cfg, 0, ledger),
        DataSource::Fresh { .. } => {
            let one = TrainingConfig {
                epochs: 1,
                ..cfg.clone()
            };
            let mut history = Vec::with_capacity(cfg.epochs);
            for e in 0..cfg.epochs {
                let data = source.epoch_data(cfg, e, seed)?;
                history.extend(run(models, &data, &one, e, ledger)?);
            }
            Ok(history)
        }
    }
}

/// Offline training against true channels.
pub fn offline_train(
    models: &mut [LocalModel],
    source: &DataSource<'_>,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut ledger = MessageLedger::default();
    let history = train_federated(models, source, None, cfg, seed, &mut ledger)?;
    Ok(TrainOutcome { history, ledger })
}

/// First epoch (1-based count) whose mean minimum rate exceeds `threshold`.
pub fn epochs_to_threshold(history: &[EpochRecord], threshold: f64) -> Option<usize> {
    history
        .iter()
        .position(|r| r.min_rate > threshold)
        .map(|i| i + 1)
}

/// First epoch (1-based count) whose mean sum rate reaches `level`.
pub fn epochs_to_sum_rate(history: &[EpochRecord], level: f64) -> Option<usize> {
    history
        .iter()
        .position(|r| r.sum_rate >= level)
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_sum_rate: f64,
    pub mean_min_rate: f64,
    pub per_user: Vec<f64>,
}

/// Inference-mode precoders of every vehicle for one sample, as the RSU would
/// assemble them (optionally through the quantizer), normalized to power `P`.
pub fn assemble_precoder(
    models: &[LocalModel],
    sample: &Sample,
    cfg: &TrainingConfig,
    quantized: bool,
) -> Result<CMatrix> {
    let k = models.len();
    let n = models.first().map(|m| m.n()).unwrap_or(0);
    let q = cfg.quantizer(n, k)?;
    let cols = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let v = m.infer(&[&sample.inputs[i]])?.remove(0);
            if quantized {
                dequantize_feedback(&quantize_feedback(&v, &q), n, &q)
            } else {
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_trace(&CMatrix::from_columns(&cols), cfg.power).0)
}

/// Mean true-channel rates of the models on `data`.
pub fn evaluate(
    models: &[LocalModel],
    data: &Dataset,
    cfg: &TrainingConfig,
    quantized: bool,
) -> Result<EvalReport> {
    let k = data.num_vehicles();
    if models.len() != k {
        return param_err(format!("{} models for {k} vehicles", models.len()));
    }
    let reports = data
        .samples
        .par_iter()
        .map(|s| {
            sum_rate(
                &s.channel_matrix(),
                &assemble_precoder(models, s, cfg, quantized)?,
                cfg.noise_var,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let count = reports.len().max(1) as f64;
    let mut per_user = vec![0.0; k];
    for r in &reports {
        for (a, b) in per_user.iter_mut().zip(&r.per_user) {
            *a += b / count;
        }
    }
    Ok(EvalReport {
        mean_sum_rate: reports.iter().map(|r| r.total).sum::<f64>() / count,
        mean_min_rate: reports.iter().map(|r| r.min()).sum::<f64>() / count,
        per_user,
    })
}

/// Mean ZF-with-true-CSI sum rate on `data`; rank-deficient samples count as zero.
pub fn zf_reference(data: &Dataset, power: f64, noise_var: f64) -> Result<f64> {
    let rates = data
        .samples
        .par_iter()
        .map(|s| {
            let h = s.channel_matrix();
            match zf_precoder(&h, power) {
                Ok(p) => Ok(sum_rate(&h, &p.v, noise_var)?.total),
                Err(Error::Numerical(_)) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len().max(1) as f64)
}

/// Communication cost of the training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadReport {
    /// Precoder uploads over all offline epochs and vehicles.
    pub vfl_upload_bytes: u64,
    /// Labeled pairs per user: one quantized CSI report plus `M1 + M2` 32-bit indices each.
    pub d1_bytes_per_user: u64,
    /// Unlabeled tuples per user: `M` quantized received pilots each.
    pub d2_bytes_per_user: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadParams {
    pub epochs: u64,
    pub k: u64,
    pub n: u64,
    pub bits: u64,
    pub n_c: u64,
    pub n_g: u64,
    pub label_indices: u64,
    pub pilots_per_tuple: u64,
}

impl Default for OverheadParams {
    fn default() -> Self {
        Self {
            epochs: 600,
            k: 7,
            n: 128,
            bits: 8,
            n_c: 120,
            n_g: 1000,
            label_indices: 5,
            pilots_per_tuple: 12,
        }
    }
}

pub fn overhead_report(p: &OverheadParams) -> OverheadReport {
    let csi_bytes = 2 * p.n * p.bits / 8;
    OverheadReport {
        vfl_upload_bytes: p.epochs * p.k * csi_bytes,
        d1_bytes_per_user: p.n_c * (csi_bytes + 4 * p.label_indices),
        d2_bytes_per_user: p.n_g * p.pilots_per_tuple * (2 * p.bits / 8),
    }
}

/// Bytes to KiB.
pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_gaussian;

    #[test]
    fn loss_at_threshold() {
        // Construct a single-user instance whose rate is exactly 0.3.
        let snr: f64 = 2f64.powf(0.3) - 1.0;
        let h = CMatrix::from_element(1, 1, C64::new(snr.sqrt(), 0.0));
        let v = CMatrix::from_element(1, 1, C64::new(1.0, 0.0));
        let (loss, rates) = rsu_loss(&v, &h, 1.0, 10.0, 0.3, Regularizer::AsWritten).unwrap();
        assert!((rates.total - 0.3).abs() < 1e-12);
        assert!((loss + 1.3).abs() < 1e-12);
        let (loss, _) = rsu_loss(&v, &h, 1.0, 10.0, 0.3, Regularizer::Penalty).unwrap();
        assert!((loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = rng_from(3);
        let h = CMatrix::from_fn(4, 2, |_, _| complex_gaussian(&mut rng, 1.0));
        let v = CMatrix::from_fn(4, 2, |_, _| complex_gaussian(&mut rng, 0.5));
        for reg in [
            Regularizer::Off,
            Regularizer::AsWritten,
            Regularizer::Penalty,
        ] {
            let (_, _, g) = rsu_loss_grad(&v, &h, 0.3, 10.0, 0.3, reg).unwrap();
            let eps = 1e-6;
            for idx in 0..8 {
                for part in 0..2 {
                    let d = if part == 0 {
                        C64::new(eps, 0.0)
                    } else {
                        C64::new(0.0, eps)
                    };
                    let mut vp = v.clone();
                    vp[idx] += d;
                    let mut vm = v.clone();
                    vm[idx] -= d;
                    let lp = rsu_loss(&vp, &h, 0.3, 10.0, 0.3, reg).unwrap().0;
                    let lm = rsu_loss(&vm, &h, 0.3, 10.0, 0.3, reg).unwrap().0;
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = if part == 0 { g[idx].re } else { g[idx].im };
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn overhead_matches_reference_numbers() {
        let r = overhead_report(&OverheadParams::default());
        assert_eq!(r.vfl_upload_bytes, 600 * 7 * 256);
        assert_eq!(kib(r.vfl_upload_bytes), 1050.0);
        assert_eq!(r.d1_bytes_per_user, 120 * 276);
        assert_eq!(r.d2_bytes_per_user, 24_000);
        assert!((kib(r.d2_bytes_per_user) - 23.4).abs() < 0.05);
    }

    #[test]
    fn offline_pilots_are_spread() {
        let p = offline_pilots(&dft_codebook(16), 4, 2.0).unwrap();
        assert_eq!(p.source_indices, vec![0, 4, 8, 12]);
        assert!(offline_pilots(&dft_codebook(16), 0, 1.0).is_err());
    }
}
