//! Pseudo downlink CSI labels for label-free online updating.
//!
//! The RSU probes each slot with two rounds of DFT codewords: an initial round
//! picked from uplink estimates and a residual round picked by a learned
//! selector. LS estimates of both rounds pass through residual refiners and are
//! summed into a pseudo label. The selector learns from a small codeword
//! teacher trained on a few labeled pairs, and the refiners learn from the
//! l1 fit to the received pilots alone.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{dft_codebook, to_beamspace, Codebook};
use crate::error::{param_err, Error, Result};
use crate::linalg::{
    complex_gaussian_vector, from_real, norm_sqr, to_real, top_k_indices, CMatrix, CVector, C64,
};
use crate::nnkit::{AdamConfig, BatchNorm, Dense, Layer, Network, Tensor};
use crate::pilots::{build_pilot_matrix, ls_estimate, transmit_downlink, PilotMatrix};
use crate::rng::{derive, derive_named, rng_from};
use crate::scene::Scene;
use crate::vfl::{
    build_dataset, evaluate, train_federated, zf_reference, DataSource, Dataset, EpochRecord,
    Labeler, LocalModel, MessageLedger, Observation, Sample, TrainingConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcsiConfig {
    /// Initial codewords per user.
    pub m1: usize,
    /// Residual codewords per user.
    pub m2: usize,
    /// Weight of the selector-vs-teacher loss.
    pub lambda1: f64,
    /// Weight of the pilot-fit loss.
    pub lambda2: f64,
    /// Labeled pairs per user for the teacher.
    pub n_c: usize,
    /// Unlabeled probe tuples per user for the simulator.
    pub n_g: usize,
    pub teacher_epochs: usize,
    pub pcsi_epochs: usize,
    pub teacher_lr: f64,
    pub pcsi_lr: f64,
    /// Epochs at which the teacher learning rate halves.
    pub teacher_milestones: Vec<usize>,
    /// Epochs at which the simulator learning rate halves.
    pub pcsi_milestones: Vec<usize>,
    pub batch_size: usize,
    /// Hidden widths of the teacher and the residual selectors.
    pub selector_hidden: Vec<usize>,
    /// Hidden width of the refiners.
    pub refiner_hidden: usize,
}

impl Default for PcsiConfig {
    fn default() -> Self {
        Self {
            m1: 2,
            m2: 2,
            lambda1: 1.0,
            lambda2: 1.0,
            n_c: 120,
            n_g: 1000,
            teacher_epochs: 100,
            pcsi_epochs: 150,
            teacher_lr: 2e-4,
            pcsi_lr: 1e-3,
            teacher_milestones: vec![20, 40, 60, 100],
            pcsi_milestones: vec![10, 20, 40, 60, 100],
            batch_size: 32,
            selector_hidden: vec![256, 512, 128],
            refiner_hidden: 256,
        }
    }
}

impl PcsiConfig {
    pub fn validate(&self, n: usize, k: usize) -> Result<()> {
        if self.m1 == 0 || self.m2 == 0 {
            return param_err("M1 and M2 must be at least 1");
        }
        if k * (self.m1 + self.m2) > n {
            return param_err(format!(
                "K(M1+M2) = {} exceeds N = {n}",
                k * (self.m1 + self.m2)
            ));
        }
        if self.batch_size == 0 {
            return param_err("batch size must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return param_err("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate after halving at every milestone already passed.
pub fn scheduled_lr(base: f64, epoch: usize, milestones: &[usize]) -> f64 {
    base * 0.5f64.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
}

/// Union over users of the `m1` strongest beamspace indices of each uplink
/// estimate, sorted ascending.
pub fn select_initial_codewords(
    ul_estimates: &[CVector],
    codebook: &Codebook,
    m1: usize,
) -> Result<Vec<usize>> {
    if m1 == 0 {
        return param_err("M1 must be at least 1");
    }
    let mut out = Vec::new();
    for h in ul_estimates {
        let mags: Vec<f64> = to_beamspace(h, codebook)?
            .iter()
            .map(|c| c.norm())
            .collect();
        out.extend(top_k_indices(&mags, m1));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSelection {
    pub indices: Vec<usize>,
    /// Some user had fewer than `m2` usable nonzero scores and was padded with
    /// the lowest unused indices.
    pub padded: bool,
}

/// Zero the already transmitted indices, take each user's `m2` highest scores
/// and return the sorted union.
pub fn select_residual_codewords(
    scores: &[Vec<f64>],
    initial: &[usize],
    m2: usize,
) -> Result<ResidualSelection> {
    if m2 == 0 {
        return param_err("M2 must be at least 1");
    }
    let mut out = Vec::new();
    let mut padded = false;
    for p in scores {
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return param_err("selection scores must lie in [0, 1]");
        }
        if initial.len() + m2 > p.len() {
            return param_err("not enough codewords left for the residual round");
        }
        let mut masked = p.clone();
        for &i in initial {
            if i >= masked.len() {
                return param_err(format!("initial index {i} out of range"));
            }
            masked[i] = 0.0;
        }
        let mut picked: Vec<usize> = top_k_indices(&masked, m2)
            .into_iter()
            .filter(|&i| masked[i] > 0.0)
            .collect();
        if picked.len() < m2 {
            padded = true;
            for i in 0..masked.len() {
                if picked.len() == m2 {
                    break;
                }
                if !initial.contains(&i) && !picked.contains(&i) {
                    picked.push(i);
                }
            }
        }
        out.extend(picked);
    }
    out.sort_unstable();
    out.dedup();
    Ok(ResidualSelection {
        indices: out,
        padded,
    })
}

/// Mean binary cross-entropy per element, predictions clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &[f64], label: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

fn bce_grad(pred: &[f64], label: &[f64], scale: f64) -> Vec<f64> {
    pred.iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            scale * (p - y) / (p * (1.0 - p))
        })
        .collect()
}

/// `(1/M) || y - h^H S ||_1` for one user.
pub fn online_loss(y: &CVector, s: &CMatrix, h: &CVector) -> f64 {
    residual_row(y, s, h).iter().map(|c| c.norm()).sum::<f64>() / y.len().max(1) as f64
}

fn residual_row(y: &CVector, s: &CMatrix, h: &CVector) -> CVector {
    // h^H s_m for every column m
    let hs = s.tr_mul(&h.conjugate());
    y - hs
}

/// Gradient of [`online_loss`] with respect to `h` in the form
/// `dL/dRe h + j dL/dIm h`.
pub fn online_loss_grad(y: &CVector, s: &CMatrix, h: &CVector) -> CVector {
    let r = residual_row(y, s, h);
    let m = y.len().max(1) as f64;
    let mut g = CVector::zeros(h.len());
    for (j, rj) in r.iter().enumerate() {
        let mag = rj.norm();
        if mag > 0.0 {
            g.axpy(-(rj.conj() / mag) / m, &s.column(j), C64::from(1.0));
        }
    }
    g
}

/// Multilayer perceptron with optional batch norm after the first two hidden
/// layers and a sigmoid output.
fn selector_network<R: rand::Rng + ?Sized>(
    input: usize,
    hidden: &[usize],
    output: usize,
    rng: &mut R,
) -> Result<Network> {
    let mut layers = Vec::new();
    let mut prev = input;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(Layer::Dense(Dense::new(prev, h, rng)));
        if i < 2 {
            layers.push(Layer::BatchNorm(BatchNorm::new(h)));
        }
        layers.push(Layer::Relu);
        prev = h;
    }
    layers.push(Layer::Dense(Dense::new(prev, output, rng)));
    layers.push(Layer::Sigmoid);
    Network::new(vec![input], layers)
}

fn refiner_network<R: rand::Rng + ?Sized>(n: usize, hidden: usize, rng: &mut R) -> Result<Network> {
    let inner = Network::mlp(&[2 * n, hidden, 2 * n], rng)?;
    Network::new(vec![2 * n], vec![Layer::residual(inner)?])
}

/// Scale-free selector input: the LS estimate scaled to RMS magnitude one.
pub fn selector_input(ls: &CVector) -> Vec<f64> {
    let norm = ls.norm();
    if norm == 0.0 {
        return vec![0.0; 2 * ls.len()];
    }
    to_real(&(ls * C64::from((ls.len() as f64).sqrt() / norm)))
}

/// One user's observations from a two-round probe.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProbe {
    pub y_initial: CVector,
    pub y_residual: CVector,
    pub ls_initial: CVector,
    pub ls_residual: CVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotProbe {
    pub initial: Vec<usize>,
    pub residual: Vec<usize>,
    pub padded: bool,
    pub users: Vec<UserProbe>,
}

impl SlotProbe {
    pub fn pilot_count(&self) -> usize {
        self.initial.len() + self.residual.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub h: Vec<CVector>,
    pub initial: Vec<usize>,
    pub residual: Vec<usize>,
}

/// Which network picks the residual codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chooser {
    Teacher,
    Selector,
}

/// Previous-slot uplink estimate: the UL channel plus LS noise of variance
/// `noise_var / power` per entry.
pub fn uplink_estimate(h_ul: &CVector, power: f64, noise_var: f64, seed: u64) -> CVector {
    h_ul + complex_gaussian_vector(&mut rng_from(seed), h_ul.len(), noise_var / power)
}

/// Simulator parameters and datasets for one fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct PcsiState {
    pub config: PcsiConfig,
    pub codebook: Codebook,
    pub power: f64,
    pub noise_var: f64,
    pub teacher: Network,
    pub teacher_trained: bool,
    pub selectors: Vec<Network>,
    pub main_refiners: Vec<Network>,
    pub residual_refiners: Vec<Network>,
    /// Per user: (selector input, 0/1 label over all codewords).
    pub d1: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Per user probe tuples with the residual round chosen by the teacher.
    pub d2: Vec<Vec<ProbeTuple>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTuple {
    pub initial: Vec<usize>,
    pub residual: Vec<usize>,
    pub probe: UserProbe,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PcsiTrainReport {
    /// Mean selector loss per epoch.
    pub selector_loss: Vec<f64>,
    /// Mean pilot-fit loss per epoch.
    pub fit_loss: Vec<f64>,
}

impl PcsiState {
    pub fn new(
        config: &PcsiConfig,
        n: usize,
        k: usize,
        power: f64,
        noise_var: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate(n, k)?;
        if !(power > 0.0) || !(noise_var > 0.0) {
            return param_err("power and noise variance must be positive");
        }
        let mut rng = rng_from(seed);
        let teacher = selector_network(2 * n, &config.selector_hidden, n, &mut rng)?;
        let mut selectors = Vec::with_capacity(k);
        let mut main_refiners = Vec::with_capacity(k);
        let mut residual_refiners = Vec::with_capacity(k);
        for _ in 0..k {
            selectors.push(selector_network(
                2 * n,
                &config.selector_hidden,
                n,
                &mut rng,
            )?);
            main_refiners.push(refiner_network(n, config.refiner_hidden, &mut rng)?);
            residual_refiners.push(refiner_network(n, config.refiner_hidden, &mut rng)?);
        }
        Ok(Self {
            config: config.clone(),
            codebook: dft_codebook(n),
            power,
            noise_var,
            teacher,
            teacher_trained: false,
            selectors,
            main_refiners,
            residual_refiners,
            d1: vec![Vec::new(); k],
            d2: vec![Vec::new(); k],
        })
    }

    pub fn n(&self) -> usize {
        self.codebook.n()
    }

    pub fn num_users(&self) -> usize {
        self.selectors.len()
    }

    fn pilots(&self, indices: &[usize]) -> Result<PilotMatrix> {
        build_pilot_matrix(indices, &self.codebook, self.power)
    }

    /// Initial round only: the codeword set and each user's LS estimate.
    pub fn probe_initial(
        &self,
        h_dl: &[CVector],
        h_ul: &[CVector],
        seed: u64,
    ) -> Result<(Vec<usize>, Vec<CVector>, Vec<CVector>)> {
        if h_dl.len() != self.num_users() || h_ul.len() != h_dl.len() {
            return param_err(format!("expected channels for {} users", self.num_users()));
        }
        let ul: Vec<CVector> = h_ul
            .iter()
            .enumerate()
            .map(|(k, h)| {
                uplink_estimate(
                    h,
                    self.power,
                    self.noise_var,
                    derive(derive_named(seed, "uplink"), k as u64),
                )
            })
            .collect();
        let initial = select_initial_codewords(&ul, &self.codebook, self.config.m1)?;
        let s = self.pilots(&initial)?;
        let mut ys = Vec::with_capacity(h_dl.len());
        let mut ls = Vec::with_capacity(h_dl.len());
        for (k, h) in h_dl.iter().enumerate() {
            let y = transmit_downlink(
                h,
                &s.s,
                self.noise_var,
                derive(derive_named(seed, "initial"), k as u64),
            )?;
            ls.push(ls_estimate(&y, &s.s)?);
            ys.push(y);
        }
        Ok((initial, ys, ls))
    }

    /// Residual-round scores of one user.
    pub fn scores(&self, chooser: Chooser, user: usize, ls_initial: &CVector) -> Result<Vec<f64>> {
        let net = match chooser {
            Chooser::Teacher => &self.teacher,
            Chooser::Selector => &self.selectors[user],
        };
        let x = Tensor::from_rows(&[selector_input(ls_initial)])?;
        Ok(net.infer(&x)?.data)
    }

    /// Both probing rounds for one slot. `h_dl` only drives the simulated
    /// over-the-air reception.
    pub fn probe_slot(
        &self,
        h_dl: &[CVector],
        h_ul: &[CVector],
        chooser: Chooser,
        seed: u64,
    ) -> Result<SlotProbe> {
        let (initial, y_i, ls_i) = self.probe_initial(h_dl, h_ul, seed)?;
        let scores = (0..h_dl.len())
            .map(|k| self.scores(chooser, k, &ls_i[k]))
            .collect::<Result<Vec<_>>>()?;
        let sel = select_residual_codewords(&scores, &initial, self.config.m2)?;
        let s_r = self.pilots(&sel.indices)?;
        let mut users = Vec::with_capacity(h_dl.len());
        for (k, h) in h_dl.iter().enumerate() {
            let y_r = transmit_downlink(
                h,
                &s_r.s,
                self.noise_var,
                derive(derive_named(seed, "residual"), k as u64),
            )?;
            let ls_r = ls_estimate(&y_r, &s_r.s)?;
            users.push(UserProbe {
                y_initial: y_i[k].clone(),
                y_residual: y_r,
                ls_initial: ls_i[k].clone(),
                ls_residual: ls_r,
            });
        }
        Ok(SlotProbe {
            initial,
            residual: sel.indices,
            padded: sel.padded,
            users,
        })
    }

    /// Phase A: `n_c` labeled pairs per user. The label marks the `M1 + M2`
    /// strongest DL beamspace entries as reported by the user.
    pub fn collect_labeled(&mut self, slots: &[Sample], seed: u64) -> Result<()> {
        let k = self.num_users();
        let per_slot = slots
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let (_, _, ls) = self.probe_initial(&s.h_dl, &s.h_ul, derive(seed, i as u64))?;
                (0..k)
                    .map(|u| {
                        let mags: Vec<f64> = to_beamspace(&s.h_dl[u], &self.codebook)?
                            .iter()
                            .map(|c| c.norm())
                            .collect();
                        let mut label = vec![0.0; self.n()];
                        for j in top_k_indices(&mags, self.config.m1 + self.config.m2) {
                            label[j] = 1.0;
                        }
                        Ok((selector_input(&ls[u]), label))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.d1 = vec![Vec::with_capacity(slots.len()); k];
        for pairs in per_slot {
            for (u, p) in pairs.into_iter().enumerate() {
                self.d1[u].push(p);
            }
        }
        Ok(())
    }

    /// Phase B: supervised BCE training of the teacher on all users' pairs.
    /// Returns the mean loss per epoch.
    pub fn teacher_train(&mut self, epochs: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let data: Vec<&(Vec<f64>, Vec<f64>)> = self.d1.iter().flatten().collect();
        if data.is_empty() {
            return param_err("labeled set D1 is empty");
        }
        let n = self.n() as f64;
        let mut losses = Vec::with_capacity(epochs);
        self.teacher.set_training(true);
        for e in 0..epochs {
            let adam = AdamConfig::with_lr(scheduled_lr(lr, e, &self.config.teacher_milestones));
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng_from(derive(seed, e as u64)));
            let mut total = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let x = Tensor::from_rows(
                    &batch.iter().map(|&i| data[i].0.clone()).collect::<Vec<_>>(),
                )?;
                let p = self.teacher.forward(&x)?;
                let mut g = Tensor::zeros(p.dims.clone());
                for (j, &i) in batch.iter().enumerate() {
                    total += bce_loss(p.item(j), &data[i].1);
                    g.item_mut(j).copy_from_slice(&bce_grad(
                        p.item(j),
                        &data[i].1,
                        1.0 / (n * batch.len() as f64),
                    ));
                }
                self.teacher.backward(&g)?;
                self.teacher.step(&adam)?;
            }
            let mean = total / data.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence {
                    epoch: e,
                    detail: "teacher loss is not finite".into(),
                });
            }
            losses.push(mean);
        }
        self.teacher.set_training(false);
        self.teacher_trained = true;
        Ok(losses)
    }

    /// Phase C: `n_g` probe tuples per user with the residual round picked by
    /// the trained teacher.
    pub fn collect_unlabeled(&mut self, slots: &[Sample], seed: u64) -> Result<()> {
        if !self.teacher_trained {
            return Err(Error::State(
                "teacher must be trained before collecting probe tuples".into(),
            ));
        }
        let probes = slots
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                self.probe_slot(&s.h_dl, &s.h_ul, Chooser::Teacher, derive(seed, i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = self.num_users();
        self.d2 = vec![Vec::with_capacity(slots.len()); k];
        for p in probes {
            for (u, up) in p.users.into_iter().enumerate() {
                self.d2[u].push(ProbeTuple {
                    initial: p.initial.clone(),
                    residual: p.residual.clone(),
                    probe: up,
                });
            }
        }
        Ok(())
    }

    /// Pseudo label of one user from its probe.
    pub fn refine(&self, user: usize, probe: &UserProbe) -> Result<CVector> {
        synthesize_pseudo_csi(
            probe,
            &self.main_refiners[user],
            &self.residual_refiners[user],
        )
    }

    /// Phase D: train each user's selector against the teacher and its
    /// refiners against the pilot fit.
    pub fn pcsi_train(&mut self, epochs: usize, lr: f64, seed: u64) -> Result<PcsiTrainReport> {
        if !self.teacher_trained {
            return Err(Error::State(
                "teacher must be trained before the simulator".into(),
            ));
        }
        if self.d2.iter().all(|d| d.is_empty()) {
            return param_err("probe set D2 is empty");
        }
        let cfg = self.config.clone();
        let codebook = &self.codebook;
        let power = self.power;
        let teacher = &self.teacher;
        let per_user = self
            .selectors
            .par_iter_mut()
            .zip(self.main_refiners.par_iter_mut())
            .zip(self.residual_refiners.par_iter_mut())
            .zip(self.d2.par_iter())
            .enumerate()
            .map(|(u, (((sel, main), resid), data))| {
                train_user(
                    sel,
                    main,
                    resid,
                    teacher,
                    data,
                    codebook,
                    power,
                    &cfg,
                    epochs,
                    lr,
                    derive(seed, u as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut report = PcsiTrainReport {
            selector_loss: vec![0.0; epochs],
            fit_loss: vec![0.0; epochs],
        };
        for (lc, lh) in per_user {
            for e in 0..epochs {
                report.selector_loss[e] += lc[e];
                report.fit_loss[e] += lh[e];
            }
        }
        Ok(report)
    }

    /// Two-round probe with the trained selectors followed by refinement.
    pub fn pseudo_labels(&self, sample: &Sample, seed: u64) -> Result<PseudoLabelBatch> {
        let probe = self.probe_slot(&sample.h_dl, &sample.h_ul, Chooser::Selector, seed)?;
        let h = probe
            .users
            .iter()
            .enumerate()
            .map(|(u, p)| self.refine(u, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(PseudoLabelBatch {
            h,
            initial: probe.initial,
            residual: probe.residual,
        })
    }

    /// Fraction of the true `M2` strongest DL codewords that appear among the
    /// teacher's `M2` highest scores, averaged over users and slots.
    pub fn teacher_hit_rate(&self, slots: &[Sample], seed: u64) -> Result<f64> {
        let m2 = self.config.m2;
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, s) in slots.iter().enumerate() {
            let (_, _, ls) = self.probe_initial(&s.h_dl, &s.h_ul, derive(seed, i as u64))?;
            for (u, h) in s.h_dl.iter().enumerate() {
                let mags: Vec<f64> = to_beamspace(h, &self.codebook)?
                    .iter()
                    .map(|c| c.norm())
                    .collect();
                let truth = top_k_indices(&mags, m2);
                let guess = top_k_indices(&self.scores(Chooser::Teacher, u, &ls[u])?, m2);
                hits += guess.iter().filter(|g| truth.contains(g)).count();
                total += m2;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_user(
    sel: &mut Network,
    main: &mut Network,
    resid: &mut Network,
    teacher: &Network,
    data: &[ProbeTuple],
    codebook: &Codebook,
    power: f64,
    cfg: &PcsiConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lc_hist = Vec::with_capacity(epochs);
    let mut lh_hist = Vec::with_capacity(epochs);
    if data.is_empty() {
        return Ok((vec![0.0; epochs], vec![0.0; epochs]));
    }
    let pilots = data
        .iter()
        .map(|t| {
            let mut idx = t.initial.clone();
            idx.extend(&t.residual);
            let s = build_pilot_matrix(&idx, codebook, power)?.s;
            let y = CVector::from_iterator(
                idx.len(),
                t.probe
                    .y_initial
                    .iter()
                    .chain(t.probe.y_residual.iter())
                    .copied(),
            );
            Ok((s, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Vec<f64>> = data
        .iter()
        .map(|t| selector_input(&t.probe.ls_initial))
        .collect();
    let targets = teacher.infer(&Tensor::from_rows(&inputs)?)?;
    sel.set_training(true);
    main.set_training(true);
    resid.set_training(true);
    for e in 0..epochs {
        let adam = AdamConfig::with_lr(scheduled_lr(lr, e, &cfg.pcsi_milestones));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(derive(seed, e as u64)));
        let (mut lc_sum, mut lh_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let x =
                Tensor::from_rows(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let p = sel.forward(&x)?;
            let mut gp = Tensor::zeros(p.dims.clone());
            for (j, &i) in batch.iter().enumerate() {
                let t = targets.item(i);
                for ((g, &pv), &tv) in gp.item_mut(j).iter_mut().zip(p.item(j)).zip(t) {
                    lc_sum += (tv - pv).powi(2);
                    *g = cfg.lambda1 * 2.0 * (pv - tv) / b;
                }
            }
            sel.backward(&gp)?;
            sel.step(&adam)?;

            let xi = Tensor::from_rows(
                &batch
                    .iter()
                    .map(|&i| to_real(&data[i].probe.ls_initial))
                    .collect::<Vec<_>>(),
            )?;
            let xr = Tensor::from_rows(
                &batch
                    .iter()
                    .map(|&i| to_real(&data[i].probe.ls_residual))
                    .collect::<Vec<_>>(),
            )?;
            let hi = main.forward(&xi)?;
            let hr = resid.forward(&xr)?;
            let mut gh = Tensor::zeros(hi.dims.clone());
            for (j, &i) in batch.iter().enumerate() {
                let h = from_real(hi.item(j)) + from_real(hr.item(j));
                let (s, y) = &pilots[i];
                lh_sum += online_loss(y, s, &h);
                let g = online_loss_grad(y, s, &h) * C64::from(cfg.lambda2 / b);
                gh.item_mut(j).copy_from_slice(&to_real(&g));
            }
            main.backward(&gh)?;
            resid.backward(&gh)?;
            main.step(&adam)?;
            resid.step(&adam)?;
        }
        let count = data.len() as f64;
        if !(lc_sum.is_finite() && lh_sum.is_finite()) {
            return Err(Error::Divergence {
                epoch: e,
                detail: "simulator loss is not finite".into(),
            });
        }
        lc_hist.push(lc_sum / count);
        lh_hist.push(lh_sum / count);
    }
    sel.set_training(false);
    main.set_training(false);
    resid.set_training(false);
    Ok((lc_hist, lh_hist))
}

/// `h = G_MC(LS_initial) + G_RC(LS_residual)`.
pub fn synthesize_pseudo_csi(
    probe: &UserProbe,
    main: &Network,
    resid: &Network,
) -> Result<CVector> {
    let hi = main.infer(&Tensor::from_rows(&[to_real(&probe.ls_initial)])?)?;
    let hr = resid.infer(&Tensor::from_rows(&[to_real(&probe.ls_residual)])?)?;
    Ok(from_real(&hi.data) + from_real(&hr.data))
}

/// Normalized squared error `||est - h||^2 / ||h||^2`.
pub fn nmse(est: &CVector, h: &CVector) -> f64 {
    norm_sqr(&(est - h)) / norm_sqr(h).max(f64::MIN_POSITIVE)
}

/// Where the loss channels of online updating come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Pseudo labels from the two-round probe.
    #[default]
    Pcsi,
    /// Previous-slot uplink estimates used directly as DL labels.
    UplinkEstimate,
    /// True DL channels; a benchmark that is not available in deployment.
    TrueChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Federated epochs after the simulator is trained.
    pub epochs: usize,
    /// Slots in the online training set.
    pub samples: usize,
    pub labels: LabelSource,
    /// Draw `samples` new slots every epoch instead of reusing one set.
    pub fresh_samples: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            samples: 256,
            labels: LabelSource::Pcsi,
            fresh_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutcome {
    pub history: Vec<EpochRecord>,
    pub ledger: MessageLedger,
    pub teacher_loss: Vec<f64>,
    pub simulator: PcsiTrainReport,
    /// Mean NMSE of the labels used for training.
    pub label_nmse: f64,
    /// Mean ZF-with-true-CSI sum rate of the online slots, for reference.
    pub zf_sum_rate: f64,
    /// True-channel rates of the models before the first update.
    pub initial_sum_rate: f64,
}

/// Train the simulator for the fleet of `scene`, then update `models` against
/// its pseudo labels. True channels drive the simulated receptions and the
/// reported rates only.
pub fn online_update(
    scene: &Scene,
    models: &mut [LocalModel],
    obs: Observation<'_>,
    train: &TrainingConfig,
    pcsi: &PcsiConfig,
    online: &OnlineConfig,
    seed: u64,
) -> Result<(PcsiState, OnlineOutcome)> {
    let k = scene.num_vehicles();
    if models.len() != k {
        return param_err(format!("{} models for {k} vehicles", models.len()));
    }
    let n = obs.channel.n();
    let mut state = PcsiState::new(
        pcsi,
        n,
        k,
        train.power,
        train.noise_var,
        derive_named(seed, "pcsi-init"),
    )?;
    let mut teacher_loss = Vec::new();
    let mut simulator = PcsiTrainReport::default();
    if online.labels == LabelSource::Pcsi {
        // Phases A and B.
        let d1 = build_dataset(scene, obs, train, pcsi.n_c, derive_named(seed, "d1"))?;
        state.collect_labeled(&d1.samples, derive_named(seed, "d1-probe"))?;
        teacher_loss = state.teacher_train(
            pcsi.teacher_epochs,
            pcsi.teacher_lr,
            derive_named(seed, "teacher"),
        )?;
        // Phases C and D.
        let d2 = build_dataset(scene, obs, train, pcsi.n_g, derive_named(seed, "d2"))?;
        state.collect_unlabeled(&d2.samples, derive_named(seed, "d2-probe"))?;
        simulator = state.pcsi_train(
            pcsi.pcsi_epochs,
            pcsi.pcsi_lr,
            derive_named(seed, "simulator"),
        )?;
    }
    // Phase E.
    let data = build_dataset(
        scene,
        obs,
        train,
        online.samples,
        derive_named(seed, "online"),
    )?;
    let labels = make_labels(&state, &data, online.labels, derive_named(seed, "labels"))?;
    let label_nmse = labels
        .iter()
        .zip(&data.samples)
        .flat_map(|(l, s)| l.iter().zip(&s.h_dl).map(|(a, b)| nmse(a, b)))
        .sum::<f64>()
        / (data.len() * k).max(1) as f64;
    let initial_sum_rate = evaluate(models, &data, train, true)?.mean_sum_rate;
    let zf_sum_rate = zf_reference(&data, train.power, train.noise_var)?;
    let mut ledger = MessageLedger::default();
    let mut cfg = train.clone();
    cfg.epochs = online.epochs;
    let source = if online.fresh_samples {
        DataSource::Fresh {
            scene,
            obs,
            per_epoch: online.samples,
        }
    } else {
        DataSource::Fixed(&data)
    };
    let labeler = |d: &Dataset, s: u64| {
        if online.fresh_samples {
            make_labels(&state, d, online.labels, s)
        } else {
            Ok(labels.clone())
        }
    };
    let labeler: Option<&Labeler<'_>> = match online.labels {
        LabelSource::TrueChannel => None,
        _ => Some(&labeler),
    };
    let history = train_federated(
        models,
        &source,
        labeler,
        &cfg,
        derive_named(seed, "update"),
        &mut ledger,
    )?;
    Ok((
        state,
        OnlineOutcome {
            history,
            ledger,
            teacher_loss,
            simulator,
            label_nmse,
            zf_sum_rate,
            initial_sum_rate,
        },
    ))
}

/// Loss channels for every slot of `data`.
pub fn make_labels(
    state: &PcsiState,
    data: &Dataset,
    source: LabelSource,
    seed: u64,
) -> Result<Vec<Vec<CVector>>> {
    data.samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let slot_seed = derive(seed, i as u64);
            match source {
                LabelSource::Pcsi => Ok(state.pseudo_labels(s, slot_seed)?.h),
                LabelSource::UplinkEstimate => Ok(s
                    .h_ul
                    .iter()
                    .enumerate()
                    .map(|(k, h)| {
                        uplink_estimate(
                            h,
                            state.power,
                            state.noise_var,
                            derive(derive_named(slot_seed, "uplink"), k as u64),
                        )
                    })
                    .collect()),
                LabelSource::TrueChannel => Ok(s.h_dl.clone()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub alpha: f64,
    /// `N M alpha^2 sigma^2 / P`.
    pub bound: f64,
    pub violation_rate: f64,
    /// Mean squared error of the closed-form minimizer against the part of `h`
    /// inside the pilot span.
    pub mean_error: f64,
    /// `sigma^2 M / P`.
    pub predicted_mean: f64,
    /// `exp(-(N/2)(alpha - 1)^2)`, the allowed violation probability.
    pub probability_bound: f64,
    /// Mean `||h - P_S h||^2`, the part no pilot observes.
    pub projection_residual: f64,
}

/// Monte Carlo check of the error bound of the l1 pilot-fit minimizer with
/// orthogonal pilots from `m` random distinct codewords.
pub fn verify_lemma1(
    n: usize,
    m: usize,
    power: f64,
    noise_var: f64,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if !(alpha > 1.0) {
        return param_err("alpha must exceed 1");
    }
    if m == 0 || m > n {
        return param_err(format!("M must be in 1..={n}"));
    }
    if !(power > 0.0) || !(noise_var >= 0.0) || trials == 0 {
        return param_err(
            "power must be positive, noise variance non-negative and trials at least 1",
        );
    }
    let codebook = dft_codebook(n);
    let bound = n as f64 * m as f64 * alpha * alpha * noise_var / power;
    let stats = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(derive(seed, t as u64));
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let s = build_pilot_matrix(&all[..m], &codebook, power)?.s;
            let h = complex_gaussian_vector(&mut rng, n, 1.0);
            let y = s.tr_mul(&h.conjugate()) + complex_gaussian_vector(&mut rng, m, noise_var);
            let est = ls_estimate(&y, &s)?;
            let projected = &s * s.ad_mul(&h) / C64::from(power);
            let err = norm_sqr(&(est - &projected));
            Ok((err, norm_sqr(&(h - projected))))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let count = trials as f64;
    Ok(Lemma1Report {
        alpha,
        bound,
        violation_rate: stats.iter().filter(|(e, _)| *e > bound).count() as f64 / count,
        mean_error: stats.iter().map(|s| s.0).sum::<f64>() / count,
        predicted_mean: noise_var * m as f64 / power,
        probability_bound: (-(n as f64) / 2.0 * (alpha - 1.0).powi(2)).exp(),
        projection_residual: stats.iter().map(|s| s.1).sum::<f64>() / count,
    })
}

pub fn write_lemma1_csv<W: Write>(mut w: W, reports: &[Lemma1Report]) -> Result<()> {
    writeln!(w, "alpha,bound,violation_rate,mean_error,predicted_mean")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.alpha, r.bound, r.violation_rate, r.mean_error, r.predicted_mean
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::steering;

    #[test]
    fn initial_selection_examples() {
        let cb = dft_codebook(4);
        // Build h whose beamspace magnitudes are [0.1, 3.0, 0.5, 2.0].
        let target = [0.1, 3.0, 0.5, 2.0];
        let mut h = CVector::zeros(4);
        for (m, &a) in target.iter().enumerate() {
            // beamspace = F^T conj(h); F columns orthogonal with norm^2 = 1/4.
            h += cb.column(m) * C64::from(4.0 * a);
        }
        let mags: Vec<f64> = to_beamspace(&h, &cb)
            .unwrap()
            .iter()
            .map(|c| c.norm())
            .collect();
        for (a, b) in mags.iter().zip(target) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(
            select_initial_codewords(&[h.clone()], &cb, 2).unwrap(),
            vec![1, 3]
        );
        assert_eq!(
            select_initial_codewords(&[h.clone(), h], &cb, 2)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn residual_selection_examples() {
        let mut p = vec![0.1; 8];
        p[0] = 0.9;
        p[1] = 0.8;
        let r = select_residual_codewords(&[p], &[0], 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        let uniform = vec![vec![0.5; 6]];
        let r = select_residual_codewords(&uniform, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(r.indices, vec![4, 5]);
        let zeros = vec![vec![0.0; 6]];
        let r = select_residual_codewords(&zeros, &[0, 2], 2).unwrap();
        assert!(r.padded);
        assert_eq!(r.indices, vec![1, 3]);
    }

    #[test]
    fn bce_closed_forms() {
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
        assert!(
            (bce_loss(&[0.5; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]) - 2f64.ln()).abs() < 1e-12
        );
    }

    #[test]
    fn online_loss_zero_at_truth_and_gradient_matches() {
        let cb = dft_codebook(8);
        let s = build_pilot_matrix(&[0, 3, 5], &cb, 2.0).unwrap().s;
        let h = steering(8, 0.3) * C64::from(8.0);
        let y = s.tr_mul(&h.conjugate());
        assert!(online_loss(&y, &s, &h) < 1e-12);
        let mut rng = rng_from(4);
        let h0 = complex_gaussian_vector(&mut rng, 8, 1.0);
        let g = online_loss_grad(&y, &s, &h0);
        let eps = 1e-7;
        for i in 0..8 {
            for d in [C64::new(eps, 0.0), C64::new(0.0, eps)] {
                let mut hp = h0.clone();
                hp[i] += d;
                let mut hm = h0.clone();
                hm[i] -= d;
                let fd = (online_loss(&y, &s, &hp) - online_loss(&y, &s, &hm)) / (2.0 * eps);
                let an = if d.re != 0.0 { g[i].re } else { g[i].im };
                assert!((fd - an).abs() < 1e-6, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn identity_refiners_sum_ls() {
        let state = PcsiState::new(
            &PcsiConfig {
                selector_hidden: vec![8, 8],
                refiner_hidden: 8,
                ..Default::default()
            },
            8,
            1,
            1.0,
            0.1,
            1,
        )
        .unwrap();
        let mut rng = rng_from(2);
        let probe = UserProbe {
            y_initial: complex_gaussian_vector(&mut rng, 2, 1.0),
            y_residual: complex_gaussian_vector(&mut rng, 2, 1.0),
            ls_initial: complex_gaussian_vector(&mut rng, 8, 1.0),
            ls_residual: complex_gaussian_vector(&mut rng, 8, 1.0),
        };
        let h = state.refine(0, &probe).unwrap();
        assert!(norm_sqr(&(h - &probe.ls_initial - &probe.ls_residual)) < 1e-24);
    }

    #[test]
    fn lemma1_small() {
        let r = verify_lemma1(32, 4, 10.0, 1.0, 1.5, 2000, 3).unwrap();
        assert_eq!(r.violation_rate, 0.0);
        assert!((r.mean_error / r.predicted_mean - 1.0).abs() < 0.1);
        let r = verify_lemma1(32, 4, 10.0, 0.0, 1.5, 10, 3).unwrap();
        assert!(r.mean_error < 1e-20);
        assert!(r.projection_residual > 0.0);
        assert!(verify_lemma1(32, 4, 10.0, 1.0, 1.0, 10, 3).is_err());
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(scheduled_lr(1.0, 0, &[10, 20]), 1.0);
        assert_eq!(scheduled_lr(1.0, 10, &[10, 20]), 0.5);
        assert_eq!(scheduled_lr(1.0, 25, &[10, 20]), 0.25);
    }
}
