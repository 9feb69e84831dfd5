//! Experiment configuration and seeded sweeps.
//!
//! Sweep points run on the rayon pool. Each point draws from its own stream
//! derived from the master seed and the point index, and results are merged
//! by index, so output does not depend on the thread count.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_all, ChannelConfig};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::pcsi::{online_update, LabelSource, OnlineConfig, PcsiConfig};
use crate::precode::{mf_precoder, sum_rate, wmmse_precoder, zf_precoder};
use crate::rng::{derive, derive_named};
use crate::scene::{generate_scene, CorruptionConfig, Scene, SceneConfig, SensorFlags};
use crate::sensing::FeatureConfig;
use crate::vfl::{
    build_dataset, evaluate, fresh_models, offline_train, write_history_csv, zf_reference,
    DataSource, LocalModel, ModelConfig, Observation, OverheadParams, Regularizer, TrainingConfig,
};

/// Array size, fleet size, power budget and pilot/feedback budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_v: usize,
    pub n_h: usize,
    pub k: usize,
    pub power: f64,
    /// `10 log10(P / sigma^2)`; give this or `noise_var`, not both.
    pub snr_db: Option<f64>,
    pub noise_var: Option<f64>,
    pub pilot_len: usize,
    pub feedback_bits: u32,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_v: 16,
            n_h: 8,
            k: 7,
            power: 1.0,
            snr_db: Some(10.0),
            noise_var: None,
            pilot_len: 8,
            feedback_bits: 8,
        }
    }
}

pub fn noise_var_from_snr(power: f64, snr_db: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}

pub fn snr_db_from_noise_var(power: f64, noise_var: f64) -> f64 {
    10.0 * (power / noise_var).log10()
}

impl SystemConfig {
    pub fn n(&self) -> usize {
        self.n_v * self.n_h
    }

    pub fn noise_var(&self) -> Result<f64> {
        match (self.snr_db, self.noise_var) {
            (Some(s), None) => Ok(noise_var_from_snr(self.power, s)),
            (None, Some(v)) => Ok(v),
            _ => Err(Error::Config(
                "give exactly one of system.snr_db and system.noise_var".into(),
            )),
        }
    }

    pub fn snr_db(&self) -> Result<f64> {
        Ok(match self.snr_db {
            Some(s) => s,
            None => snr_db_from_noise_var(self.power, self.noise_var()?),
        })
    }
}

/// Carrier frequencies and propagation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    pub dl_carrier_hz: f64,
    pub ul_carrier_hz: f64,
    pub reference_distance: f64,
    pub reflection_loss: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        let c = ChannelConfig::default();
        Self {
            dl_carrier_hz: c.dl_carrier_hz,
            ul_carrier_hz: c.ul_carrier_hz,
            reference_distance: c.reference_distance,
            reflection_loss: c.reflection_loss,
        }
    }
}

/// Learning hyperparameters of offline training; budgets live in [`SystemConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lambda: f64,
    pub rate_threshold: f64,
    pub regularizer: Regularizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: Option<f64>,
    /// Slots per epoch.
    pub samples: usize,
    /// Draw new slots every epoch instead of reusing one set.
    pub fresh_samples: bool,
    /// Held-out slots for evaluation.
    pub test_samples: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            lambda: t.lambda,
            rate_threshold: t.rate_threshold,
            regularizer: t.regularizer,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip: t.clip,
            samples: 256,
            fresh_samples: true,
            test_samples: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSection {
    pub epochs: usize,
    pub samples: usize,
    pub labels: LabelSource,
    pub fresh_samples: bool,
    /// Vehicles joining before the online phase.
    pub joining: Vec<SensorFlags>,
}

impl Default for OnlineSection {
    fn default() -> Self {
        let o = OnlineConfig::default();
        Self {
            epochs: o.epochs,
            samples: o.samples,
            labels: o.labels,
            fresh_samples: true,
            joining: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub k: Vec<usize>,
    pub levels: Vec<String>,
    /// Channel draws per baseline point.
    pub samples: usize,
    pub wmmse_iterations: usize,
    pub wmmse_tolerance: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            k: vec![2, 3, 4, 5, 6, 7],
            levels: vec!["none".into(), "low".into(), "medium".into(), "high".into()],
            samples: 32,
            wmmse_iterations: 200,
            wmmse_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub system: SystemConfig,
    pub propagation: PropagationConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub pcsi: PcsiConfig,
    pub online: OnlineSection,
    pub sweep: SweepConfig,
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.n_v == 0 || s.n_h == 0 {
            return Err(Error::Config("array dimensions must be at least 1".into()));
        }
        if s.k == 0 || s.k != self.scene.vehicles.len() {
            return Err(Error::Config(format!(
                "system.k = {} but the scene lists {} vehicles",
                s.k,
                self.scene.vehicles.len()
            )));
        }
        if !(s.power > 0.0) {
            return Err(Error::Config("power must be positive".into()));
        }
        let nv = s.noise_var()?;
        if !(nv > 0.0) || !nv.is_finite() {
            return Err(Error::Config(
                "noise variance must be positive and finite".into(),
            ));
        }
        if s.pilot_len == 0 || s.pilot_len > s.n() {
            return Err(Error::Config(format!(
                "pilot_len must be in 1..={} for orthogonal DFT pilots",
                s.n()
            )));
        }
        self.scene.validate().map_err(cfg_err)?;
        self.channel().validate().map_err(cfg_err)?;
        self.training_config()?.validate().map_err(cfg_err)?;
        self.pcsi
            .validate(s.n(), s.k + self.online.joining.len())
            .map_err(cfg_err)?;
        self.features.bev.validate().map_err(cfg_err)?;
        for l in &self.sweep.levels {
            CorruptionConfig::level(l)?;
        }
        for &k in &self.sweep.k {
            if k == 0 || k > s.n() {
                return Err(Error::Config(format!(
                    "sweep K = {k} must be in 1..={}",
                    s.n()
                )));
            }
        }
        Ok(())
    }

    pub fn channel(&self) -> ChannelConfig {
        let p = &self.propagation;
        ChannelConfig {
            n_v: self.system.n_v,
            n_h: self.system.n_h,
            dl_carrier_hz: p.dl_carrier_hz,
            ul_carrier_hz: p.ul_carrier_hz,
            reference_distance: p.reference_distance,
            reflection_loss: p.reflection_loss,
        }
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        let t = &self.training;
        Ok(TrainingConfig {
            lambda: t.lambda,
            rate_threshold: t.rate_threshold,
            regularizer: t.regularizer,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            feedback_bits: self.system.feedback_bits,
            clip: t.clip,
            power: self.system.power,
            noise_var: self.system.noise_var()?,
            pilot_len: self.system.pilot_len,
        })
    }

    /// Stable hash of the validated configuration, for tagging output rows.
    pub fn hash(&self) -> String {
        // FNV-1a over the canonical TOML rendering.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Signalling-overhead inputs for this system. A labeled pair names the
    /// `M1 + M2` strongest codewords; an unlabeled tuple carries every pilot of
    /// both rounds, `K (M1 + M2)` of them.
    pub fn overhead_params(&self) -> OverheadParams {
        let per_user = (self.pcsi.m1 + self.pcsi.m2) as u64;
        OverheadParams {
            epochs: self.training.epochs as u64,
            k: self.system.k as u64,
            n: self.system.n() as u64,
            bits: self.system.feedback_bits as u64,
            n_c: self.pcsi.n_c as u64,
            n_g: self.pcsi.n_g as u64,
            label_indices: per_user,
            pilots_per_tuple: self.system.k as u64 * per_user,
        }
    }

    /// The configured fleet cycled or truncated to `k` vehicles.
    pub fn fleet(&self, k: usize) -> Vec<SensorFlags> {
        self.scene
            .vehicles
            .iter()
            .copied()
            .cycle()
            .take(k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub k: usize,
    pub n: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub mf: f64,
    pub zf: f64,
    pub wmmse: f64,
}

pub const RATE_COLUMNS: &str = "scheme,K,N,snr_db,seed,sum_rate";

/// MF, ZF and WMMSE mean sum rates per (K, SNR, seed). Every SNR of a given
/// (K, seed) sees the same channel draws.
pub fn run_baselines(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<BaselineRow>> {
    cfg.validate()?;
    let channel = cfg.channel();
    let power = cfg.system.power;
    let mut points = Vec::new();
    for &k in &cfg.sweep.k {
        for &snr in &cfg.sweep.snr_db {
            for &seed in seeds {
                points.push((k, snr, seed));
            }
        }
    }
    points
        .par_iter()
        .map(|&(k, snr, seed)| {
            let draw_seed = derive(derive(seed, k as u64), 0);
            let mut sc = cfg.scene.clone();
            sc.vehicles = cfg.fleet(k);
            let scene = generate_scene(&sc, derive_named(draw_seed, "scene"))?;
            let noise_var = noise_var_from_snr(power, snr);
            let (mut mf, mut zf, mut wm) = (0.0, 0.0, 0.0);
            for s in 0..cfg.sweep.samples {
                let slot_seed = derive(draw_seed, s as u64);
                let placed = scene.resample_vehicles(derive_named(slot_seed, "placement"))?;
                let chans = synthesize_all(&placed, &channel, derive_named(slot_seed, "channel"))?;
                let h = CMatrix::from_columns(
                    &chans.iter().map(|c| c.h_dl.clone()).collect::<Vec<_>>(),
                );
                mf += sum_rate(&h, &mf_precoder(&h, power).v, noise_var)?.total;
                zf += match zf_precoder(&h, power) {
                    Ok(p) => sum_rate(&h, &p.v, noise_var)?.total,
                    Err(Error::Numerical(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                let w = wmmse_precoder(
                    &h,
                    power,
                    noise_var,
                    cfg.sweep.wmmse_iterations,
                    cfg.sweep.wmmse_tolerance,
                )?;
                wm += sum_rate(&h, &w.precoder.v, noise_var)?.total;
            }
            let c = cfg.sweep.samples.max(1) as f64;
            Ok(BaselineRow {
                k,
                n: channel.n(),
                snr_db: snr,
                seed,
                mf: mf / c,
                zf: zf / c,
                wmmse: wm / c,
            })
        })
        .collect()
}

/// One long-format row per (scheme, point).
pub fn write_baselines_csv<W: Write>(mut w: W, rows: &[BaselineRow]) -> Result<()> {
    writeln!(w, "{RATE_COLUMNS}")?;
    for r in rows {
        for (scheme, rate) in [("mf", r.mf), ("zf", r.zf), ("wmmse", r.wmmse)] {
            writeln!(w, "{scheme},{},{},{},{},{rate}", r.k, r.n, r.snr_db, r.seed)?;
        }
    }
    Ok(())
}

/// Everything needed to rebuild a fleet's local models from checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub flags: Vec<SensorFlags>,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub n: usize,
    pub training: TrainingConfig,
}

impl ModelManifest {
    pub fn fresh(&self, seed: u64) -> Result<Vec<LocalModel>> {
        fresh_models(
            &self.flags,
            &self.model,
            &self.features,
            self.n,
            &self.training,
            seed,
        )
    }
}

/// Write `models.json` plus one `vehicle_<k>.ckpt` per model into `dir`.
pub fn save_models(dir: &Path, manifest: &ModelManifest, models: &[LocalModel]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("models.json"),
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    for (k, m) in models.iter().enumerate() {
        let mut w =
            std::io::BufWriter::new(fs::File::create(dir.join(format!("vehicle_{k}.ckpt")))?);
        m.write_to(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<(ModelManifest, Vec<LocalModel>)> {
    let manifest: ModelManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("models.json"))?)
            .map_err(|e| Error::Format(format!("models.json: {e}")))?;
    let mut models = manifest.fresh(0)?;
    for (k, m) in models.iter_mut().enumerate() {
        m.read_from(std::io::BufReader::new(fs::File::open(
            dir.join(format!("vehicle_{k}.ckpt")),
        )?))?;
    }
    Ok((manifest, models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRow {
    pub seed: u64,
    pub phase: String,
    pub k: usize,
    pub epochs: usize,
    pub sum_rate: f64,
    pub min_rate: f64,
    pub zf_sum_rate: f64,
}

pub const PIPELINE_COLUMNS: &str = "seed,phase,k,epochs,sum_rate,min_rate,zf_sum_rate";

pub fn write_pipeline_csv<W: Write>(mut w: W, rows: &[PipelineRow]) -> Result<()> {
    writeln!(w, "{PIPELINE_COLUMNS}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.seed, r.phase, r.k, r.epochs, r.sum_rate, r.min_rate, r.zf_sum_rate
        )?;
    }
    Ok(())
}

/// Offline training on a generated scene followed by online updating for the
/// (possibly grown) fleet. Per-seed scenes, histories and checkpoints go under
/// `out/seed_<s>/` when `out` is given.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<PipelineRow>> {
    cfg.validate()?;
    let per_seed = seeds
        .iter()
        .map(|&seed| pipeline_seed(cfg, seed, out))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn pipeline_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<PipelineRow>> {
    let channel = cfg.channel();
    let train = cfg.training_config()?;
    let obs = Observation {
        channel: &channel,
        features: &cfg.features,
        corruption: None,
    };
    let scene = generate_scene(&cfg.scene, derive_named(seed, "scene"))?;
    let dir = out.map(|o| o.join(format!("seed_{seed}")));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
        scene.write_binary(fs::File::create(d.join("scene.bin"))?)?;
    }
    let test = build_dataset(
        &scene,
        obs,
        &train,
        cfg.training.test_samples,
        derive_named(seed, "test"),
    )?;
    let fixed;
    let source = if cfg.training.fresh_samples {
        DataSource::Fresh {
            scene: &scene,
            obs,
            per_epoch: cfg.training.samples,
        }
    } else {
        fixed = build_dataset(
            &scene,
            obs,
            &train,
            cfg.training.samples,
            derive_named(seed, "train"),
        )?;
        DataSource::Fixed(&fixed)
    };
    let n = channel.n();
    let manifest = ModelManifest {
        flags: test.flags.clone(),
        model: cfg.model.clone(),
        features: cfg.features,
        n,
        training: train.clone(),
    };
    let mut models = manifest.fresh(derive_named(seed, "models"))?;
    let outcome = offline_train(&mut models, &source, &train, derive_named(seed, "offline"))?;
    let eval = evaluate(&models, &test, &train, true)?;
    let mut rows = vec![PipelineRow {
        seed,
        phase: "offline".into(),
        k: test.num_vehicles(),
        epochs: train.epochs,
        sum_rate: eval.mean_sum_rate,
        min_rate: eval.mean_min_rate,
        zf_sum_rate: zf_reference(&test, train.power, train.noise_var)?,
    }];
    if let Some(d) = &dir {
        write_history_csv(
            fs::File::create(d.join("offline_history.csv"))?,
            &outcome.history,
        )?;
        save_models(&d.join("offline_models"), &manifest, &models)?;
    }
    if cfg.online.epochs == 0 {
        return Ok(rows);
    }
    let mut fleet: Vec<SensorFlags> = test.flags.clone();
    fleet.extend(&cfg.online.joining);
    let scene2 = scene.with_fleet(&fleet, derive_named(seed, "online-placement"))?;
    let mut train2 = train.clone();
    train2.epochs = cfg.online.epochs;
    let manifest2 = ModelManifest {
        flags: fleet.clone(),
        training: train2.clone(),
        ..manifest
    };
    let newcomers = manifest2.fresh(derive_named(seed, "joining"))?;
    models.extend(newcomers.into_iter().skip(models.len()));
    let online = OnlineConfig {
        epochs: cfg.online.epochs,
        samples: cfg.online.samples,
        labels: cfg.online.labels,
        fresh_samples: cfg.online.fresh_samples,
    };
    let (_, outcome) = online_update(
        &scene2,
        &mut models,
        obs,
        &train2,
        &cfg.pcsi,
        &online,
        derive_named(seed, "online"),
    )?;
    let test2 = build_dataset(
        &scene2,
        obs,
        &train2,
        cfg.training.test_samples,
        derive_named(seed, "online-test"),
    )?;
    let eval2 = evaluate(&models, &test2, &train2, true)?;
    rows.push(PipelineRow {
        seed,
        phase: "online".into(),
        k: fleet.len(),
        epochs: cfg.online.epochs,
        sum_rate: eval2.mean_sum_rate,
        min_rate: eval2.mean_min_rate,
        zf_sum_rate: zf_reference(&test2, train2.power, train2.noise_var)?,
    });
    if let Some(d) = &dir {
        write_history_csv(
            fs::File::create(d.join("online_history.csv"))?,
            &outcome.history,
        )?;
        save_models(&d.join("online_models"), &manifest2, &models)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub level: String,
    pub seed: u64,
    pub sum_rate: f64,
    pub min_rate: f64,
    /// Sum rate relative to the uncorrupted evaluation of the same models.
    pub relative: f64,
}

pub const ROBUSTNESS_COLUMNS: &str = "level,seed,sum_rate,min_rate,relative";

pub fn write_robustness_csv<W: Write>(mut w: W, rows: &[RobustnessRow]) -> Result<()> {
    writeln!(w, "{ROBUSTNESS_COLUMNS}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.level, r.seed, r.sum_rate, r.min_rate, r.relative
        )?;
    }
    Ok(())
}

/// Train on clean sensing, then evaluate the same models on held-out slots
/// whose sensing is corrupted at each named level. All levels of a seed share
/// placements, channels and noise.
pub fn run_robustness(
    cfg: &ExperimentConfig,
    levels: &[String],
    seeds: &[u64],
) -> Result<Vec<RobustnessRow>> {
    cfg.validate()?;
    let corruptions = levels
        .iter()
        .map(|l| CorruptionConfig::level(l))
        .collect::<Result<Vec<_>>>()?;
    let channel = cfg.channel();
    let train = cfg.training_config()?;
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let scene = generate_scene(&cfg.scene, derive_named(seed, "scene"))?;
            let obs = Observation {
                channel: &channel,
                features: &cfg.features,
                corruption: None,
            };
            let models = train_models(cfg, &scene, &train, seed)?;
            let test_seed = derive_named(seed, "test");
            let clean = evaluate(
                &models,
                &build_dataset(&scene, obs, &train, cfg.training.test_samples, test_seed)?,
                &train,
                true,
            )?;
            levels
                .par_iter()
                .zip(&corruptions)
                .map(|(name, c)| {
                    let o = Observation {
                        corruption: Some(c),
                        ..obs
                    };
                    let data =
                        build_dataset(&scene, o, &train, cfg.training.test_samples, test_seed)?;
                    let e = evaluate(&models, &data, &train, true)?;
                    Ok(RobustnessRow {
                        level: name.clone(),
                        seed,
                        sum_rate: e.mean_sum_rate,
                        min_rate: e.mean_min_rate,
                        relative: e.mean_sum_rate / clean.mean_sum_rate,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Offline-train fresh models for `scene` as configured.
pub fn train_models(
    cfg: &ExperimentConfig,
    scene: &Scene,
    train: &TrainingConfig,
    seed: u64,
) -> Result<Vec<LocalModel>> {
    let channel = cfg.channel();
    let obs = Observation {
        channel: &channel,
        features: &cfg.features,
        corruption: None,
    };
    let flags: Vec<SensorFlags> = scene.vehicles.iter().map(|v| v.sensors).collect();
    let mut models = fresh_models(
        &flags,
        &cfg.model,
        &cfg.features,
        channel.n(),
        train,
        derive_named(seed, "models"),
    )?;
    let fixed;
    let source = if cfg.training.fresh_samples {
        DataSource::Fresh {
            scene,
            obs,
            per_epoch: cfg.training.samples,
        }
    } else {
        fixed = build_dataset(
            scene,
            obs,
            train,
            cfg.training.samples,
            derive_named(seed, "train"),
        )?;
        DataSource::Fixed(&fixed)
    };
    offline_train(&mut models, &source, train, derive_named(seed, "offline"))?;
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.system = SystemConfig {
            n_v: 4,
            n_h: 4,
            k: 2,
            pilot_len: 4,
            ..Default::default()
        };
        c.scene.vehicles = vec![SensorFlags::PILOT_ONLY; 2];
        c
    }

    #[test]
    fn snr_round_trip() {
        for snr in [-10.0, 0.0, 3.0, 17.5, 30.0] {
            let v = noise_var_from_snr(2.0, snr);
            assert!((snr_db_from_noise_var(2.0, v) - snr).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_rejects_inconsistencies() {
        assert!(toy().validate().is_ok());
        let mut c = toy();
        c.pcsi.m1 = 5;
        c.pcsi.m2 = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy();
        c.system.pilot_len = 17;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy();
        c.system.noise_var = Some(0.1);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy();
        c.system.k = 3;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.sweep.levels.push("extreme".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = toy();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
    }
}
