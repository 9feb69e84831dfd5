//! Sum-rate evaluation and the ZF / WMMSE precoders used as full-CSI references.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::linalg::{fro_sqr, CMatrix, CVector, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingMatrix {
    /// `N x K`, column `k` serves user `k`.
    pub v: CMatrix,
    pub power_budget: f64,
}

impl PrecodingMatrix {
    pub fn power(&self) -> f64 {
        fro_sqr(&self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub per_user: Vec<f64>,
    pub total: f64,
}

impl RateReport {
    pub fn min(&self) -> f64 {
        self.per_user.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `R_k = log2(1 + |h_k^H v_k|^2 / (sum_{i != k} |h_k^H v_i|^2 + sigma^2))`.
pub fn sum_rate(h: &CMatrix, v: &CMatrix, noise_var: f64) -> Result<RateReport> {
    if h.nrows() != v.nrows() || h.ncols() != v.ncols() {
        return param_err(format!(
            "channel {}x{} and precoder {}x{} disagree",
            h.nrows(),
            h.ncols(),
            v.nrows(),
            v.ncols()
        ));
    }
    if !(noise_var > 0.0) {
        return param_err(format!("noise variance must be positive, got {noise_var}"));
    }
    // g[(k, i)] = h_k^H v_i
    let g = h.ad_mul(v);
    let k = h.ncols();
    let per_user: Vec<f64> = (0..k)
        .map(|u| {
            let signal = g[(u, u)].norm_sqr();
            let interference: f64 = (0..k)
                .filter(|&i| i != u)
                .map(|i| g[(u, i)].norm_sqr())
                .sum();
            (1.0 + signal / (interference + noise_var)).log2()
        })
        .collect();
    let total = per_user.iter().sum();
    Ok(RateReport { per_user, total })
}

/// Scale `v` so that `trace(V V^H) = power`. Zero matrices are returned unchanged.
pub fn normalize_power(v: &CMatrix, power: f64) -> CMatrix {
    let p = fro_sqr(v);
    if p > 0.0 {
        v * C64::from((power / p).sqrt())
    } else {
        v.clone()
    }
}

fn equal_power_columns(dirs: &CMatrix, power: f64) -> CMatrix {
    let k = dirs.ncols();
    let per = (power / k as f64).sqrt();
    let mut out = dirs.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col *= C64::from(per / n);
        }
    }
    out
}

/// Matched-filter precoder with equal per-user power.
pub fn mf_precoder(h: &CMatrix, power: f64) -> PrecodingMatrix {
    PrecodingMatrix {
        v: equal_power_columns(h, power),
        power_budget: power,
    }
}

fn most_coherent_pair(h: &CMatrix) -> (usize, usize, f64) {
    let k = h.ncols();
    let mut best = (0, 0, -1.0);
    for i in 0..k {
        for j in (i + 1)..k {
            let (a, b) = (h.column(i), h.column(j));
            let denom = a.norm() * b.norm();
            let c = if denom > 0.0 {
                a.dotc(&b).norm() / denom
            } else {
                1.0
            };
            if c > best.2 {
                best = (i, j, c);
            }
        }
    }
    best
}

/// Zero-forcing: directions are the columns of `H (H^H H)^{-1}`, each normalized
/// and given power `P/K`.
pub fn zf_precoder(h: &CMatrix, power: f64) -> Result<PrecodingMatrix> {
    let (n, k) = h.shape();
    if k == 0 || k > n {
        return param_err(format!(
            "zero forcing needs 1 <= K <= N, got K = {k}, N = {n}"
        ));
    }
    if !(power > 0.0) {
        return param_err(format!("power budget must be positive, got {power}"));
    }
    for u in 0..k {
        if h.column(u).norm() == 0.0 {
            return Err(Error::Numerical(format!(
                "user {u} has an all-zero channel"
            )));
        }
    }
    let gram = h.ad_mul(h);
    let scale = gram.diagonal().iter().map(|z| z.re).fold(0.0, f64::max);
    let rank_error = || {
        let (i, j, c) = most_coherent_pair(h);
        Error::Numerical(format!(
            "channel matrix is rank deficient; users {i} and {j} are nearly collinear (coherence {c:.6})"
        ))
    };
    let chol = gram.cholesky().ok_or_else(rank_error)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|z| z.re * z.re)
        .fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-12 * scale {
        return Err(rank_error());
    }
    let dirs = h * chol.inverse();
    Ok(PrecodingMatrix {
        v: equal_power_columns(&dirs, power),
        power_budget: power,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseOutcome {
    /// Best iterate found.
    pub precoder: PrecodingMatrix,
    /// Sum rate of the initial point followed by every iterate.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iters` was hit before the improvement fell below `tol`.
    pub converged: bool,
}

/// Solve `v_k = (A + mu I)^{-1} b_k` with the smallest `mu >= 0` meeting
/// `sum_k ||v_k||^2 <= P`, using one eigendecomposition of `A`.
fn power_constrained_solve(a: &CMatrix, b: &CMatrix, power: f64) -> CMatrix {
    let eig = a.clone().symmetric_eigen();
    let q = &eig.eigenvectors;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let lam_max = lam.iter().copied().fold(0.0, f64::max);
    let qb = q.ad_mul(b);
    let c: Vec<f64> = (0..lam.len())
        .map(|i| qb.row(i).iter().map(|z| z.norm_sqr()).sum())
        .collect();
    // Directions with no eigenvalue and no excitation contribute nothing.
    let active: Vec<bool> = (0..lam.len())
        .map(|i| lam[i] > 1e-12 * lam_max.max(1e-300) || c[i] > 1e-24)
        .collect();
    let total_c: f64 = c
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(x, _)| x)
        .sum();
    let power_at = |mu: f64| -> f64 {
        (0..lam.len())
            .filter(|&i| active[i])
            .map(|i| c[i] / (lam[i] + mu).powi(2))
            .sum()
    };
    let zero_ok =
        (0..lam.len()).all(|i| !active[i] || lam[i] > 1e-12 * lam_max) && power_at(0.0) <= power;
    let mu = if zero_ok || total_c == 0.0 {
        0.0
    } else {
        let mut hi = 1e-6 * (lam_max + 1e-12);
        while power_at(hi) > power {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..300 {
            if hi - lo <= 1e-15 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if power_at(mid) > power {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let mut scaled = qb;
    for i in 0..lam.len() {
        let f = if active[i] && lam[i] + mu > 0.0 {
            1.0 / (lam[i] + mu)
        } else {
            0.0
        };
        scaled.row_mut(i).scale_mut(f);
    }
    q * scaled
}

/// Weighted-MMSE block-coordinate ascent on the sum rate.
pub fn wmmse_precoder(
    h: &CMatrix,
    power: f64,
    noise_var: f64,
    max_iters: usize,
    tol: f64,
) -> Result<WmmseOutcome> {
    let (n, k) = h.shape();
    if k == 0 || n == 0 {
        return param_err("WMMSE needs at least one user and one antenna");
    }
    if !(power > 0.0) || !(noise_var > 0.0) {
        return param_err("power budget and noise variance must be positive");
    }
    let init = zf_precoder(h, power).unwrap_or_else(|_| mf_precoder(h, power));
    // Both initializers already spend the full budget.
    let mut v = init.v;
    let mut rate = sum_rate(h, &v, noise_var)?.total;
    let mut history = vec![rate];
    let mut best = (rate, v.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let g = h.ad_mul(&v);
        let mut a = CMatrix::zeros(n, n);
        let mut b = CMatrix::zeros(n, k);
        for u in 0..k {
            let total: f64 = (0..k).map(|i| g[(u, i)].norm_sqr()).sum::<f64>() + noise_var;
            let rx = g[(u, u)] / total;
            let mse = 1.0 - (rx.conj() * g[(u, u)]).re;
            let w = 1.0 / mse.max(1e-300);
            let hu: CVector = h.column(u).into_owned();
            a += (&hu * hu.adjoint()) * C64::from(w * rx.norm_sqr());
            b.set_column(u, &(hu * (rx * w)));
        }
        let next = power_constrained_solve(&a, &b, power);
        if !next.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::Numerical(format!(
                "WMMSE produced non-finite precoder at iteration {iterations}"
            )));
        }
        // More power never lowers the sum rate, so use the full budget.
        v = normalize_power(&next, power);
        let new_rate = sum_rate(h, &v, noise_var)?.total;
        history.push(new_rate);
        if new_rate > best.0 {
            best = (new_rate, v.clone());
        }
        let gain = new_rate - rate;
        rate = new_rate;
        if gain < tol {
            converged = true;
            break;
        }
    }
    Ok(WmmseOutcome {
        precoder: PrecodingMatrix {
            v: best.1,
            power_budget: power,
        },
        history,
        iterations,
        converged,
    })
}
