//! DL pilot matrices, pilot transmission, least-squares estimation and the
//! B-bit feedback quantizer.

use rand::Rng;

use crate::channel::Codebook;
use crate::error::{param_err, Error, Result};
use crate::linalg::{complex_gaussian, CMatrix, CVector, C64};
use crate::rng::rng_from;

/// Power-scaled subset of codebook columns used as DL training codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    /// `N x M`, with `S^H S = P I`.
    pub s: CMatrix,
    pub source_indices: Vec<usize>,
    pub power: f64,
}

impl PilotMatrix {
    pub fn len(&self) -> usize {
        self.s.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.s.ncols() == 0
    }
}

pub fn build_pilot_matrix(
    indices: &[usize],
    codebook: &Codebook,
    power: f64,
) -> Result<PilotMatrix> {
    let n = codebook.n();
    if !(power > 0.0) {
        return param_err(format!("pilot power must be positive, got {power}"));
    }
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return param_err(format!("codeword index {i} out of range for N = {n}"));
        }
        if seen[i] {
            return param_err(format!("duplicate codeword index {i}"));
        }
        seen[i] = true;
    }
    // Codebook columns have squared norm 1/N.
    let scale = C64::from((power * n as f64).sqrt());
    let cols: Vec<CVector> = indices
        .iter()
        .map(|&i| codebook.column(i) * scale)
        .collect();
    let s = if cols.is_empty() {
        CMatrix::zeros(n, 0)
    } else {
        CMatrix::from_columns(&cols)
    };
    Ok(PilotMatrix {
        s,
        source_indices: indices.to_vec(),
        power,
    })
}

/// Concatenate two pilot matrices column-wise (`S_I` then `S_R`).
pub fn concat_pilots(a: &PilotMatrix, b: &PilotMatrix) -> Result<PilotMatrix> {
    if a.s.nrows() != b.s.nrows() {
        return param_err("pilot matrices have different antenna counts");
    }
    let mut indices = a.source_indices.clone();
    indices.extend_from_slice(&b.source_indices);
    let mut s = CMatrix::zeros(a.s.nrows(), a.len() + b.len());
    s.columns_mut(0, a.len()).copy_from(&a.s);
    s.columns_mut(a.len(), b.len()).copy_from(&b.s);
    Ok(PilotMatrix {
        s,
        source_indices: indices,
        power: a.power,
    })
}

/// Received pilots `y = h^H S + n`, returned as the M entries of the row vector.
pub fn transmit_downlink_with<R: Rng + ?Sized>(
    h: &CVector,
    s: &CMatrix,
    noise_var: f64,
    rng: &mut R,
) -> Result<CVector> {
    if h.len() != s.nrows() {
        return param_err(format!(
            "channel length {} vs pilot rows {}",
            h.len(),
            s.nrows()
        ));
    }
    if !(noise_var >= 0.0) {
        return param_err(format!(
            "noise variance must be non-negative, got {noise_var}"
        ));
    }
    let mut y = s.tr_mul(&h.conjugate());
    if noise_var > 0.0 {
        for z in y.iter_mut() {
            *z += complex_gaussian(rng, noise_var);
        }
    }
    Ok(y)
}

pub fn transmit_downlink(h: &CVector, s: &CMatrix, noise_var: f64, seed: u64) -> Result<CVector> {
    transmit_downlink_with(h, s, noise_var, &mut rng_from(seed))
}

/// Returns the common power `P` if `S^H S = P I` to within `1e-9 P`.
pub fn orthogonal_power(s: &CMatrix) -> Option<f64> {
    let g = s.ad_mul(s);
    let m = g.nrows();
    if m == 0 {
        return None;
    }
    let p = g[(0, 0)].re;
    if !(p > 0.0) {
        return None;
    }
    let tol = 1e-9 * p;
    for i in 0..m {
        for j in 0..m {
            let want = if i == j { p } else { 0.0 };
            if (g[(i, j)] - C64::from(want)).norm() > tol {
                return None;
            }
        }
    }
    Some(p)
}

/// Least-squares channel estimate. Returns the column vector `h_hat` with
/// `h_hat^H = y (S^H S)^{-1} S^H`.
pub fn ls_estimate(y: &CVector, s: &CMatrix) -> Result<CVector> {
    if y.len() != s.ncols() {
        return param_err(format!(
            "{} received pilots for {} pilot columns",
            y.len(),
            s.ncols()
        ));
    }
    let yc = y.conjugate();
    if let Some(p) = orthogonal_power(s) {
        return Ok(s * yc / C64::from(p));
    }
    let g = s.ad_mul(s);
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("pilot matrix is rank deficient".into()))?;
    let diag: Vec<f64> = chol.l_dirty().diagonal().iter().map(|z| z.re).collect();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(a, b), &d| (a.min(d), b.max(d)));
    if !(lo > 1e-7 * hi) {
        return Err(Error::Numerical(
            "pilot matrix is numerically rank deficient".into(),
        ));
    }
    Ok(s * chol.solve(&yc))
}

/// B-bit uniform mid-rise quantizer applied to real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizerConfig {
    pub bits_per_component: u32,
    pub clip_magnitude: f64,
}

impl QuantizerConfig {
    pub fn new(bits_per_component: u32, clip_magnitude: f64) -> Result<Self> {
        if !(1..=24).contains(&bits_per_component) {
            return param_err(format!(
                "bits per component must be in 1..=24, got {bits_per_component}"
            ));
        }
        if !(clip_magnitude > 0.0 && clip_magnitude.is_finite()) {
            return param_err(format!(
                "clip magnitude must be positive, got {clip_magnitude}"
            ));
        }
        Ok(Self {
            bits_per_component,
            clip_magnitude,
        })
    }

    /// Clip at three times the RMS component of an `N`-antenna precoder column of
    /// power `column_power`.
    pub fn with_default_clip(bits_per_component: u32, n: usize, column_power: f64) -> Result<Self> {
        Self::new(
            bits_per_component,
            3.0 * (column_power / (2.0 * n as f64)).sqrt(),
        )
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits_per_component
    }

    pub fn step(&self) -> f64 {
        2.0 * self.clip_magnitude / self.levels() as f64
    }

    /// Payload size `Q = 2 N B` in bits.
    pub fn payload_bits(&self, n: usize) -> usize {
        2 * n * self.bits_per_component as usize
    }

    pub fn index(&self, x: f64) -> u32 {
        let max = self.levels() - 1;
        let raw = ((x + self.clip_magnitude) / self.step()).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else if raw >= max as f64 {
            max
        } else {
            raw as u32
        }
    }

    pub fn level(&self, index: u32) -> f64 {
        -self.clip_magnitude + (index as f64 + 0.5) * self.step()
    }

    pub fn round_trip(&self, x: f64) -> f64 {
        self.level(self.index(x))
    }
}

fn push_bits(out: &mut Vec<u8>, value: u32, bits: u32) {
    for b in (0..bits).rev() {
        out.push(((value >> b) & 1) as u8);
    }
}

/// Feedback bits (`0`/`1`, one per entry). Per antenna: real-part index then
/// imaginary-part index, each most-significant bit first.
pub fn quantize_feedback(v: &CVector, q: &QuantizerConfig) -> Vec<u8> {
    let b = q.bits_per_component;
    let mut out = Vec::with_capacity(q.payload_bits(v.len()));
    for z in v.iter() {
        push_bits(&mut out, q.index(z.re), b);
        push_bits(&mut out, q.index(z.im), b);
    }
    out
}

pub fn dequantize_feedback(bits: &[u8], n: usize, q: &QuantizerConfig) -> Result<CVector> {
    let b = q.bits_per_component as usize;
    if bits.len() != q.payload_bits(n) {
        return param_err(format!(
            "expected {} feedback bits, got {}",
            q.payload_bits(n),
            bits.len()
        ));
    }
    let read = |chunk: &[u8]| -> Result<u32> {
        chunk.iter().try_fold(0u32, |acc, &bit| match bit {
            0 | 1 => Ok((acc << 1) | bit as u32),
            other => param_err(format!("feedback bit must be 0 or 1, got {other}")),
        })
    };
    let mut out = CVector::zeros(n);
    for (i, z) in out.iter_mut().enumerate() {
        let base = 2 * b * i;
        let re = read(&bits[base..base + b])?;
        let im = read(&bits[base + b..base + 2 * b])?;
        *z = C64::new(q.level(re), q.level(im));
    }
    Ok(out)
}

/// Pack a bit sequence into bytes, first bit in the most significant position.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b & 1) << (7 - i)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::dft_codebook;
    use crate::linalg::complex_gaussian_vector;

    #[test]
    fn single_column_power() {
        let p = build_pilot_matrix(&[0], &dft_codebook(8), 1.0).unwrap();
        let n: f64 = p.s.iter().map(|z| z.norm_sqr()).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_and_out_of_range_rejected() {
        let f = dft_codebook(8);
        assert!(build_pilot_matrix(&[1, 1], &f, 1.0).is_err());
        assert!(build_pilot_matrix(&[8], &f, 1.0).is_err());
        assert!(build_pilot_matrix(&[1], &f, 0.0).is_err());
    }

    #[test]
    fn noiseless_full_codebook_recovers_channel() {
        let f = dft_codebook(16);
        let all: Vec<usize> = (0..16).collect();
        let p = build_pilot_matrix(&all, &f, 2.0).unwrap();
        let mut rng = rng_from(4);
        let h = complex_gaussian_vector(&mut rng, 16, 1.0);
        let y = transmit_downlink(&h, &p.s, 0.0, 0).unwrap();
        let est = ls_estimate(&y, &p.s).unwrap();
        assert!((est - &h).norm() < 1e-9);
    }

    #[test]
    fn general_solver_matches_shortcut() {
        let mut rng = rng_from(9);
        let s = CMatrix::from_fn(6, 3, |_, _| complex_gaussian(&mut rng, 1.0));
        assert!(orthogonal_power(&s).is_none());
        let h = complex_gaussian_vector(&mut rng, 6, 1.0);
        let y = transmit_downlink(&h, &s, 0.0, 0).unwrap();
        let est = ls_estimate(&y, &s).unwrap();
        // Oracle: explicit projection onto span(S).
        let g_inv = s.ad_mul(&s).try_inverse().unwrap();
        let proj = &s * g_inv * s.adjoint();
        assert!((est - proj * h).norm() < 1e-9);
    }

    #[test]
    fn rank_deficient_pilots_fail() {
        let col = CVector::from_element(4, C64::new(1.0, 0.0));
        let s = CMatrix::from_columns(&[col.clone(), col]);
        let y = CVector::zeros(2);
        assert!(matches!(ls_estimate(&y, &s), Err(Error::Numerical(_))));
    }

    #[test]
    fn quantizer_examples() {
        let q = QuantizerConfig::new(2, 1.0).unwrap();
        assert_eq!(q.levels(), 4);
        assert_eq!(q.payload_bits(128), 512);
        // Mid-rise levels closest to zero are +-step/2.
        assert!((q.round_trip(0.0).abs() - 0.25).abs() < 1e-15);
        assert_eq!(q.round_trip(10.0), 0.75);
        assert_eq!(q.round_trip(-10.0), -0.75);
        assert!(QuantizerConfig::new(0, 1.0).is_err());
    }

    #[test]
    fn bit_layout_is_msb_first_real_then_imag() {
        let q = QuantizerConfig::new(2, 1.0).unwrap();
        let v = CVector::from_vec(vec![C64::new(0.8, -0.8)]);
        assert_eq!(quantize_feedback(&v, &q), vec![1, 1, 0, 0]);
        assert_eq!(pack_bits(&[1, 0, 0, 0, 0, 0, 0, 1, 1]), vec![0x81, 0x80]);
    }

    #[test]
    fn dequantize_rejects_wrong_length() {
        let q = QuantizerConfig::new(2, 1.0).unwrap();
        assert!(dequantize_feedback(&[0, 1, 0], 1, &q).is_err());
        assert!(dequantize_feedback(&[0, 1, 0, 2], 1, &q).is_err());
    }
}
