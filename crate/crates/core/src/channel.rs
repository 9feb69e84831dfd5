//! Geometric multipath channels between the RSU planar array and each vehicle,
//! plus the DFT codebook and beamspace transform.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::linalg::{CMatrix, CVector, C64};
use crate::rng::{derive, rng_from};
use crate::scene::{wrap_angle, Scene, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// `a(N, phi)`: entry `n` is `exp(j 2 pi phi n) / N`.
pub fn steering(n: usize, phi: f64) -> CVector {
    let scale = 1.0 / n as f64;
    CVector::from_iterator(
        n,
        (0..n).map(|i| C64::from_polar(scale, 2.0 * PI * phi * i as f64)),
    )
}

/// Planar-array response over the flattened index `v * n_h + h`. Same norm as
/// `steering(n_v * n_h, _)`.
pub fn upa_steering(n_v: usize, n_h: usize, phi_v: f64, phi_h: f64) -> CVector {
    steering(n_v, phi_v).kronecker(&steering(n_h, phi_h))
}

/// The DFT dictionary `F = [a(N, 0), a(N, 1/N), ..., a(N, (N-1)/N)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub columns: CMatrix,
}

impl Codebook {
    pub fn n(&self) -> usize {
        self.columns.ncols()
    }

    pub fn column(&self, m: usize) -> CVector {
        self.columns.column(m).into_owned()
    }
}

pub fn dft_codebook(n: usize) -> Codebook {
    let cols: Vec<CVector> = (0..n).map(|m| steering(n, m as f64 / n as f64)).collect();
    Codebook {
        columns: CMatrix::from_columns(&cols),
    }
}

/// `e_m = h^H F[:, m]` for every codeword.
pub fn to_beamspace(h: &CVector, codebook: &Codebook) -> Result<CVector> {
    if h.len() != codebook.columns.nrows() {
        return param_err(format!(
            "channel length {} does not match codebook size {}",
            h.len(),
            codebook.columns.nrows()
        ));
    }
    Ok(codebook.columns.tr_mul(&h.conjugate()))
}

/// Array and propagation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub n_v: usize,
    pub n_h: usize,
    pub dl_carrier_hz: f64,
    pub ul_carrier_hz: f64,
    /// Distance at which the LoS channel has unit energy.
    pub reference_distance: f64,
    /// Amplitude factor applied per reflection.
    pub reflection_loss: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n_v: 16,
            n_h: 8,
            dl_carrier_hz: 4.95e9,
            ul_carrier_hz: 4.85e9,
            reference_distance: 50.0,
            reflection_loss: 0.5,
        }
    }
}

impl ChannelConfig {
    pub fn n(&self) -> usize {
        self.n_v * self.n_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_v == 0 || self.n_h == 0 {
            return param_err("array dimensions must be at least 1");
        }
        if !(self.dl_carrier_hz > 0.0 && self.ul_carrier_hz > 0.0) {
            return param_err("carrier frequencies must be positive");
        }
        if !(self.reference_distance > 0.0) || !(0.0..=1.0).contains(&self.reflection_loss) {
            return param_err("reference_distance must be positive and reflection_loss in [0, 1]");
        }
        Ok(())
    }

    /// Upper bound `C_h` on `||h||^2` for any vehicle of `scene`: every path is at
    /// least as long as the RSU-vehicle height difference and there are at most
    /// one LoS path plus four reflections per building.
    pub fn energy_bound(&self, scene: &Scene) -> f64 {
        let min_len = (scene.rsu_position[2] - scene.traffic.vehicle_height)
            .abs()
            .max(1e-3);
        let amp = self.reference_distance / min_len;
        let paths = 1.0 + 4.0 * scene.buildings.len() as f64 * self.reflection_loss;
        (amp * paths).powi(2)
    }

    /// Normalized spatial frequencies `(phi_v, phi_h)` of a direction relative to
    /// the array, at `carrier_hz`. Elements are spaced half a DL wavelength apart.
    pub fn spatial_frequencies(&self, azimuth: f64, elevation: f64, carrier_hz: f64) -> (f64, f64) {
        let ratio = 0.5 * carrier_hz / self.dl_carrier_hz;
        (
            ratio * elevation.sin(),
            ratio * azimuth.sin() * elevation.cos(),
        )
    }

    /// Array response (unit-modulus entries) for a direction at `carrier_hz`.
    pub fn array_response(&self, azimuth: f64, elevation: f64, carrier_hz: f64) -> CVector {
        let (pv, ph) = self.spatial_frequencies(azimuth, elevation, carrier_hz);
        upa_steering(self.n_v, self.n_h, pv, ph) * C64::from(self.n() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Departure azimuth relative to the array broadside, radians.
    pub azimuth: f64,
    /// Departure elevation (negative points down), radians.
    pub elevation: f64,
    pub gain_dl: C64,
    pub gain_ul: C64,
    pub length: f64,
    pub is_los: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h_dl: CVector,
    pub h_ul: CVector,
    pub paths: Vec<Path>,
    /// Set when no propagation path exists; the channel is then identically zero.
    pub blocked: bool,
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Trace LoS and single-bounce specular paths between the RSU and a vehicle.
/// Returns `(reflection point or None for LoS, path length)`.
fn trace_paths(scene: &Scene, vehicle: Vec3) -> Vec<(Option<Vec3>, f64)> {
    let rsu = scene.rsu_position;
    let clear = |a: Vec3, b: Vec3| scene.buildings.iter().all(|bd| !bd.blocks_segment(a, b));
    let mut out = Vec::new();
    if clear(rsu, vehicle) {
        out.push((None, dist(rsu, vehicle)));
    }
    for b in &scene.buildings {
        let fp = &b.footprint;
        // (axis, plane coordinate, outward sign)
        let faces = [
            (0, fp.min[0], -1.0),
            (0, fp.max[0], 1.0),
            (1, fp.min[1], -1.0),
            (1, fp.max[1], 1.0),
        ];
        for (axis, plane, sign) in faces {
            let other = 1 - axis;
            if (rsu[axis] - plane) * sign <= 0.0 || (vehicle[axis] - plane) * sign <= 0.0 {
                continue;
            }
            let mut image = rsu;
            image[axis] = 2.0 * plane - rsu[axis];
            let t = (plane - image[axis]) / (vehicle[axis] - image[axis]);
            let q = [
                image[0] + t * (vehicle[0] - image[0]),
                image[1] + t * (vehicle[1] - image[1]),
                image[2] + t * (vehicle[2] - image[2]),
            ];
            let mut q = q;
            q[axis] = plane;
            if q[other] < fp.min[other] || q[other] > fp.max[other] || q[2] < 0.0 || q[2] > b.height
            {
                continue;
            }
            if clear(rsu, q) && clear(q, vehicle) {
                out.push((Some(q), dist(image, vehicle)));
            }
        }
    }
    out
}

/// Synthesize the DL and UL channels of vehicle `vehicle_index`.
///
/// Both links share path geometry and gain magnitudes; each path carries one
/// random reflection phase (drawn from `seed`) plus a propagation phase that
/// depends on the carrier.
pub fn synthesize_channel(
    scene: &Scene,
    vehicle_index: usize,
    config: &ChannelConfig,
    seed: u64,
) -> Result<ChannelRealization> {
    config.validate()?;
    let Some(vehicle) = scene.vehicles.get(vehicle_index) else {
        return param_err(format!("vehicle {vehicle_index} does not exist"));
    };
    let n = config.n();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let rsu = scene.rsu_position;
    let mut rng = rng_from(derive(seed, vehicle_index as u64));
    let mut paths = Vec::new();
    let mut h_dl = CVector::zeros(n);
    let mut h_ul = CVector::zeros(n);
    for (reflection, length) in trace_paths(scene, vehicle.position) {
        let toward = reflection.unwrap_or(vehicle.position);
        let (dx, dy, dz) = (toward[0] - rsu[0], toward[1] - rsu[1], toward[2] - rsu[2]);
        let azimuth = wrap_angle(dy.atan2(dx) - scene.rsu_boresight);
        let elevation = dz.atan2((dx * dx + dy * dy).sqrt());
        let (amp, base_phase) = match reflection {
            None => (config.reference_distance / length, 0.0),
            Some(_) => (
                config.reference_distance / length * config.reflection_loss,
                rng.random_range(0.0..2.0 * PI),
            ),
        };
        let gain_at = |f: f64| {
            C64::from_polar(
                amp * inv_sqrt_n,
                base_phase - 2.0 * PI * f * length / SPEED_OF_LIGHT,
            )
        };
        let gain_dl = gain_at(config.dl_carrier_hz);
        let gain_ul = gain_at(config.ul_carrier_hz);
        h_dl += config.array_response(azimuth, elevation, config.dl_carrier_hz) * gain_dl;
        h_ul += config.array_response(azimuth, elevation, config.ul_carrier_hz) * gain_ul;
        paths.push(Path {
            azimuth,
            elevation,
            gain_dl,
            gain_ul,
            length,
            is_los: reflection.is_none(),
        });
    }
    Ok(ChannelRealization {
        h_dl,
        h_ul,
        blocked: paths.is_empty(),
        paths,
    })
}

/// All vehicles' DL channels stacked as the columns of an `N x K` matrix.
pub fn synthesize_all(
    scene: &Scene,
    config: &ChannelConfig,
    seed: u64,
) -> Result<Vec<ChannelRealization>> {
    (0..scene.vehicles.len())
        .map(|k| synthesize_channel(scene, k, config, seed))
        .collect()
}

/// CSV dump, one row per channel: `user,link,re_0,im_0,re_1,im_1,...`.
pub fn write_channels_csv<W: Write>(mut w: W, channels: &[ChannelRealization]) -> Result<()> {
    let Some(first) = channels.first() else {
        return Ok(());
    };
    write!(w, "user,link")?;
    for i in 0..first.h_dl.len() {
        write!(w, ",re_{i},im_{i}")?;
    }
    writeln!(w)?;
    for (k, c) in channels.iter().enumerate() {
        for (link, h) in [("dl", &c.h_dl), ("ul", &c.h_ul)] {
            write!(w, "{k},{link}")?;
            for z in h.iter() {
                write!(w, ",{:e},{:e}", z.re, z.im)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
