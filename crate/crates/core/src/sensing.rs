//! Turning sensor snapshots into the compact GPS, camera and LiDAR features fed
//! to the local models.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::rng_from;
use crate::scene::{CameraConfig, Detection, SensorFlags, SensorSnapshot, Vec3};

/// `J(p) = [sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]`.
pub fn positional_encode(p: f64, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l);
    for i in 0..l {
        let (s, c) = (2f64.powi(i as i32) * PI * p).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Azimuth `theta` and polar angle `phi` of the vehicle as seen from the RSU.
pub fn gps_angles(gps_position: Vec3, rsu_position: Vec3) -> Result<(f64, f64)> {
    let d = [
        gps_position[0] - rsu_position[0],
        gps_position[1] - rsu_position[1],
        gps_position[2] - rsu_position[2],
    ];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if dist == 0.0 {
        return param_err("GPS position coincides with the RSU");
    }
    let theta = d[1].atan2(d[0]);
    let phi = ((rsu_position[2] - gps_position[2]) / dist)
        .clamp(-1.0, 1.0)
        .acos();
    Ok((theta, phi))
}

/// `[J(theta), J(phi)]`, `4L` values.
pub fn gps_features(gps_position: Vec3, rsu_position: Vec3, l: usize) -> Result<Vec<f64>> {
    let (theta, phi) = gps_angles(gps_position, rsu_position)?;
    let mut out = positional_encode(theta, l);
    out.extend(positional_encode(phi, l));
    Ok(out)
}

/// Camera azimuth of a normalized box center, via the pinhole back-projection
/// `omega = atan((x - c_x) / f)` with the principal point at the image center.
pub fn box_azimuth(u: f64, camera: &CameraConfig) -> f64 {
    let x = u * camera.image_width as f64;
    let cx = 0.5 * camera.image_width as f64;
    ((x - cx) / camera.focal_px()).atan()
}

pub const BINS_PER_CAMERA: usize = 4;
/// Camera order inside the indicator vector: right, left, rear, front.
pub const INDICATOR_CAMERA_ORDER: [usize; 4] = [3, 1, 2, 0];

/// 16-bit occupancy indicator: for each camera, which of the four azimuth bins
/// contains at least one box with objectness above `score_threshold`.
pub fn rgb_indicator(
    detections: &[Vec<Detection>; 4],
    camera: &CameraConfig,
    delta_omega: f64,
    score_threshold: f64,
) -> Result<[u8; 16]> {
    if !(delta_omega > 0.0) {
        return param_err(format!(
            "angle interval must be positive, got {delta_omega}"
        ));
    }
    let mut out = [0u8; 16];
    for (slot, &cam) in INDICATOR_CAMERA_ORDER.iter().enumerate() {
        for d in &detections[cam] {
            if d.score <= score_threshold {
                continue;
            }
            let omega = box_azimuth(d.u, camera);
            let raw = ((omega - camera.omega_min) / delta_omega).floor();
            let bin = raw.clamp(0.0, (BINS_PER_CAMERA - 1) as f64) as usize;
            out[slot * BINS_PER_CAMERA + bin] = 1;
        }
    }
    Ok(out)
}

/// Flip each bit independently with probability `p`.
pub fn flip_bits<R: Rng + ?Sized>(bits: &mut [u8], p: f64, rng: &mut R) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return param_err(format!("flip probability {p} not in [0, 1]"));
    }
    if p == 0.0 {
        return Ok(());
    }
    for b in bits.iter_mut() {
        if p == 1.0 || rng.random::<f64>() < p {
            *b ^= 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbFeature {
    pub indicator: [u8; 16],
    pub orientation_code: Vec<f64>,
}

impl RgbFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.indicator.iter().map(|&b| b as f64).collect();
        out.extend_from_slice(&self.orientation_code);
        out
    }
}

pub fn rgb_features(indicator: [u8; 16], beta: f64, l: usize) -> Result<RgbFeature> {
    if !(-PI..PI).contains(&beta) {
        return param_err(format!("orientation {beta} not in [-pi, pi)"));
    }
    Ok(RgbFeature {
        indicator,
        orientation_code: positional_encode(beta, l),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub lx: usize,
    pub ly: usize,
    pub lz: usize,
    /// Half-width of the square ground extent around the sensor, meters.
    pub extent: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Divide pixels by `lz` before feeding a network.
    pub normalize: bool,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            lx: 64,
            ly: 64,
            lz: 16,
            extent: 80.0,
            z_min: -2.0,
            z_max: 14.0,
            normalize: true,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lx == 0 || self.ly == 0 || self.lz == 0 {
            return param_err("BEV grid dimensions must be positive");
        }
        if !(self.extent > 0.0) || !(self.z_max > self.z_min) {
            return param_err("BEV extent must be positive and z_max > z_min");
        }
        Ok(())
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn voxel(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let cell = |v: f64, lo: f64, hi: f64, n: usize| -> Option<usize> {
            if !(v >= lo && v < hi) {
                return None;
            }
            Some(
                (((v - lo) / (hi - lo)) * n as f64)
                    .floor()
                    .min((n - 1) as f64) as usize,
            )
        };
        Some((
            cell(p[0], -self.extent, self.extent, self.lx)?,
            cell(p[1], -self.extent, self.extent, self.ly)?,
            cell(p[2], self.z_min, self.z_max, self.lz)?,
        ))
    }
}

/// Bird's-eye view: each pixel counts the occupied voxels in its column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarBev {
    pub lx: usize,
    pub ly: usize,
    /// Row-major `lx x ly`.
    pub grid: Vec<f64>,
}

impl LidarBev {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.grid[ix * self.ly + iy]
    }
}

pub fn lidar_bev(points: &[Vec3], cfg: &BevConfig) -> Result<LidarBev> {
    cfg.validate()?;
    let mut occupied = vec![false; cfg.lx * cfg.ly * cfg.lz];
    let mut grid = vec![0.0; cfg.lx * cfg.ly];
    for p in points {
        if let Some((ix, iy, iz)) = cfg.voxel(p) {
            let v = (ix * cfg.ly + iy) * cfg.lz + iz;
            if !occupied[v] {
                occupied[v] = true;
                grid[ix * cfg.ly + iy] += 1.0;
            }
        }
    }
    Ok(LidarBev {
        lx: cfg.lx,
        ly: cfg.ly,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub gps_encoding: usize,
    pub orientation_encoding: usize,
    pub delta_omega: f64,
    pub score_threshold: f64,
    pub bev: BevConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            gps_encoding: 5,
            orientation_encoding: 10,
            delta_omega: 0.435,
            score_threshold: 0.5,
            bev: BevConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn gps_len(&self) -> usize {
        4 * self.gps_encoding
    }

    pub fn rgb_len(&self) -> usize {
        16 + 2 * self.orientation_encoding
    }
}

/// Network-ready features of one vehicle. A field is `Some` exactly when the
/// vehicle carries that sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleFeatures {
    pub gps: Option<Vec<f64>>,
    pub rgb: Option<Vec<f64>>,
    /// Network input: the BEV grid, scaled by `1/lz` when normalization is on.
    pub lidar: Option<Vec<f64>>,
}

/// Extract features from a snapshot, applying the snapshot's recorded RGB
/// bit-flip probability. Modalities with no reading (e.g. GPS lost without
/// fallback) are encoded as zeros.
pub fn extract_features(
    snapshot: &SensorSnapshot,
    flags: SensorFlags,
    rsu_position: Vec3,
    camera: &CameraConfig,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<VehicleFeatures> {
    let gps = if flags.has_gps {
        Some(match &snapshot.gps {
            Some(g) => gps_features(g.position, rsu_position, cfg.gps_encoding)?,
            None => vec![0.0; cfg.gps_len()],
        })
    } else {
        None
    };
    let rgb = if flags.has_rgb {
        let mut bits = match &snapshot.detections {
            Some(d) => rgb_indicator(d, camera, cfg.delta_omega, cfg.score_threshold)?,
            None => [0u8; 16],
        };
        flip_bits(
            &mut bits,
            snapshot.rgb_flip_probability,
            &mut rng_from(seed),
        )?;
        Some(rgb_features(bits, snapshot.orientation, cfg.orientation_encoding)?.to_vec())
    } else {
        None
    };
    let lidar = if flags.has_lidar {
        let bev = lidar_bev(snapshot.point_cloud.as_deref().unwrap_or(&[]), &cfg.bev)?;
        let scale = if cfg.bev.normalize {
            1.0 / cfg.bev.lz as f64
        } else {
            1.0
        };
        Some(bev.grid.iter().map(|v| v * scale).collect())
    } else {
        None
    };
    Ok(VehicleFeatures { gps, rgb, lidar })
}

/// Write a feature tensor: `u32` name length, UTF-8 name, `u32` rank, `u32`
/// dims, then row-major `f32` data, all little-endian.
pub fn write_feature_tensor<W: Write>(
    mut w: W,
    name: &str,
    dims: &[usize],
    data: &[f64],
) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return param_err(format!("dims {dims:?} do not match {} values", data.len()));
    }
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_tensor<R: Read>(mut r: R) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32_buf)
            .map_err(|e| Error::Format(format!("truncated tensor: {e}")))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let name_len = read_u32(&mut r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Format("tensor name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| Error::Format(format!("truncated tensor: {e}")))?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} too large")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count.min(1 << 24));
    let mut b = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated tensor: {e}")))?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Ok((name, dims, data))
}
