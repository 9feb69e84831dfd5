//! Synthetic urban scenes and per-vehicle sensor snapshots.
//!
//! A scene is a straight road flanked by two rows of box-shaped buildings, an RSU
//! on the roadside, and a set of vehicles. The same geometry feeds the radio
//! channel (buildings are reflectors and blockers) and the sensors (buildings are
//! what the cameras see and what the LiDAR hits), which is what makes the sensor
//! features informative about the channel.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::{derive_named, rng_from};

pub type Vec3 = [f64; 3];

/// Axis-aligned rectangle in the ground plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Rect,
    pub height: f64,
}

impl Building {
    /// Ray/box intersection (slab method). Returns the entry distance along `dir`
    /// if the ray starting at `origin` hits the box within `(0, t_max]`.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<f64> {
        let lo = [self.footprint.min[0], self.footprint.min[1], 0.0];
        let hi = [self.footprint.max[0], self.footprint.max[1], self.height];
        let mut t0 = 0.0_f64;
        let mut t1 = t_max;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        (t0 > 1e-9).then_some(t0)
    }

    /// True if the open segment `a -> b` passes through the building volume.
    pub fn blocks_segment(&self, a: Vec3, b: Vec3) -> bool {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len < 1e-12 {
            return false;
        }
        let dir = [d[0] / len, d[1] / len, d[2] / len];
        // Shrink slightly so that endpoints lying on a face do not count as blocked.
        self.ray_hit(a, dir, len - 1e-6).is_some()
    }
}

/// Which optional sensors a vehicle carries. Received pilots are always available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensorFlags {
    pub has_gps: bool,
    pub has_rgb: bool,
    pub has_lidar: bool,
}

impl SensorFlags {
    pub const PILOT_ONLY: Self = Self {
        has_gps: false,
        has_rgb: false,
        has_lidar: false,
    };
    pub const ALL: Self = Self {
        has_gps: true,
        has_rgb: true,
        has_lidar: true,
    };

    pub fn new(has_gps: bool, has_rgb: bool, has_lidar: bool) -> Self {
        Self {
            has_gps,
            has_rgb,
            has_lidar,
        }
    }

    fn to_bits(self) -> u8 {
        (self.has_gps as u8) | ((self.has_rgb as u8) << 1) | ((self.has_lidar as u8) << 2)
    }

    fn from_bits(b: u8) -> Self {
        Self {
            has_gps: b & 1 != 0,
            has_rgb: b & 2 != 0,
            has_lidar: b & 4 != 0,
        }
    }

    /// The seven-vehicle sensor table used by the default experiments.
    pub fn reference_fleet() -> Vec<SensorFlags> {
        vec![
            Self::new(true, false, true),
            Self::new(true, false, false),
            Self::new(false, true, false),
            Self::new(false, false, true),
            Self::new(true, true, false),
            Self::new(true, false, true),
            Self::new(true, true, false),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub position: Vec3,
    pub velocity: [f64; 2],
    /// Heading in radians, wrapped into `[-pi, pi)`.
    pub orientation: f64,
    pub sensors: SensorFlags,
}

/// Road segment along the x axis on which vehicles are placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub x_min: f64,
    pub x_max: f64,
    pub y_center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Antenna / sensor mounting height above ground.
    pub vehicle_height: f64,
    /// Minimum spacing between vehicles along the road.
    pub min_spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub range: f64,
    pub azimuth_steps: u32,
    pub elevation_channels: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            range: 80.0,
            azimuth_steps: 360,
            elevation_channels: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Lower edge of the horizontal field of view; the FoV is `[omega_min, -omega_min]`.
    pub omega_min: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            omega_min: -0.87,
            image_width: 640,
            image_height: 480,
        }
    }
}

impl CameraConfig {
    /// Focal length in pixels of a centered pinhole whose horizontal FoV is `[omega_min, -omega_min]`.
    pub fn focal_px(&self) -> f64 {
        0.5 * self.image_width as f64 / self.omega_min.abs().tan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub gps_noise_std: f64,
    /// Dead-reckon from the last fix while inside a blackout zone.
    pub gps_fallback: bool,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            gps_noise_std: 5.0,
            gps_fallback: true,
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rsu_position: Vec3,
    /// World azimuth of the array broadside direction.
    pub rsu_boresight: f64,
    pub buildings: Vec<Building>,
    pub vehicles: Vec<Vehicle>,
    pub bounds: Rect,
    pub gps_blackout_zones: Vec<Rect>,
    pub road: Road,
    pub traffic: TrafficParams,
    pub sensors: SensorConfig,
}

/// Parameters of the scene generator. Dimensions default to a 190 m x 135 m city block
/// with the RSU mounted 9 m above ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    /// RSU position; `None` puts it on the north roadside at mid-block.
    pub rsu_position: Option<Vec3>,
    pub rsu_height: f64,
    pub road_width: f64,
    pub road_margin: f64,
    pub building_count: usize,
    pub building_size: [f64; 2],
    pub building_height: [f64; 2],
    pub building_setback: [f64; 2],
    /// One entry per vehicle.
    pub vehicles: Vec<SensorFlags>,
    pub speed: [f64; 2],
    pub vehicle_height: f64,
    pub min_vehicle_spacing: f64,
    pub gps_blackout_zones: Vec<Rect>,
    pub sensors: SensorConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 190.0,
            height: 135.0,
            rsu_position: None,
            rsu_height: 9.0,
            road_width: 14.0,
            road_margin: 10.0,
            building_count: 12,
            building_size: [12.0, 24.0],
            building_height: [6.0, 20.0],
            building_setback: [4.0, 10.0],
            vehicles: SensorFlags::reference_fleet(),
            speed: [5.0, 15.0],
            vehicle_height: 1.5,
            min_vehicle_spacing: 6.0,
            gps_blackout_zones: vec![Rect::new([120.0, 55.0], [150.0, 80.0])],
            sensors: SensorConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                param_err(format!("{name} must be positive, got {v}"))
            }
        };
        pos(self.width, "width")?;
        pos(self.height, "height")?;
        pos(self.rsu_height, "rsu_height")?;
        pos(self.road_width, "road_width")?;
        pos(self.vehicle_height, "vehicle_height")?;
        pos(self.min_vehicle_spacing, "min_vehicle_spacing")?;
        pos(self.building_size[0], "building_size")?;
        pos(self.building_height[0], "building_height")?;
        if self.building_size[1] < self.building_size[0]
            || self.building_height[1] < self.building_height[0]
            || self.building_setback[1] < self.building_setback[0]
            || self.speed[1] < self.speed[0]
        {
            return param_err("range parameters must be [min, max] with min <= max");
        }
        if self.road_margin < 0.0 || 2.0 * self.road_margin >= self.width {
            return param_err("road_margin leaves no drivable length");
        }
        if self.road_width >= self.height {
            return param_err("road wider than the scene");
        }
        if self.vehicles.is_empty() {
            return param_err("at least one vehicle is required");
        }
        let cam = &self.sensors.camera;
        if !(cam.omega_min < 0.0 && cam.omega_min > -PI / 2.0) {
            return param_err("camera omega_min must lie in (-pi/2, 0)");
        }
        if self.sensors.gps_noise_std < 0.0 {
            return param_err("gps_noise_std must be non-negative");
        }
        Ok(())
    }

    fn road(&self) -> Road {
        Road {
            x_min: self.road_margin,
            x_max: self.width - self.road_margin,
            y_center: 0.5 * self.height,
            width: self.road_width,
        }
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Generate a scene. Deterministic for a fixed `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let road = config.road();
    let bounds = Rect::new([0.0, 0.0], [config.width, config.height]);
    let rsu_position = config.rsu_position.unwrap_or([
        0.5 * config.width,
        road.y_center + 0.5 * road.width + 2.0,
        config.rsu_height,
    ]);
    if !bounds.contains([rsu_position[0], rsu_position[1]]) || rsu_position[2] <= 0.0 {
        return param_err("RSU must lie inside the scene bounds with positive height");
    }
    // Broadside faces the road.
    let rsu_boresight = if rsu_position[1] >= road.y_center {
        -PI / 2.0
    } else {
        PI / 2.0
    };

    let mut rng = rng_from(derive_named(seed, "buildings"));
    let buildings = place_buildings(config, &road, rsu_position, &bounds, &mut rng);

    let traffic = TrafficParams {
        speed_min: config.speed[0],
        speed_max: config.speed[1],
        vehicle_height: config.vehicle_height,
        min_spacing: config.min_vehicle_spacing,
    };
    let vehicles = place_vehicles(
        &config.vehicles,
        &road,
        &traffic,
        derive_named(seed, "vehicles"),
    )?;

    let scene = Scene {
        rsu_position,
        rsu_boresight,
        buildings,
        vehicles,
        bounds,
        gps_blackout_zones: config.gps_blackout_zones.clone(),
        road,
        traffic,
        sensors: config.sensors,
    };
    scene.validate()?;
    Ok(scene)
}

fn place_buildings<R: Rng>(
    config: &SceneConfig,
    road: &Road,
    rsu: Vec3,
    bounds: &Rect,
    rng: &mut R,
) -> Vec<Building> {
    let mut out = Vec::with_capacity(config.building_count);
    if config.building_count == 0 {
        return out;
    }
    let rows = [config.building_count.div_ceil(2), config.building_count / 2];
    let length = road.x_max - road.x_min;
    let rsu_keepout = Rect::new([rsu[0] - 3.0, rsu[1] - 3.0], [rsu[0] + 3.0, rsu[1] + 3.0]);
    for (side, &count) in rows.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let slot = length / count as f64;
        for i in 0..count {
            let size_x = rng
                .random_range(config.building_size[0]..=config.building_size[1])
                .min(0.85 * slot);
            let depth = rng.random_range(config.building_size[0]..=config.building_size[1]);
            let jitter = rng.random_range(-0.25..=0.25) * (slot - size_x).max(0.0);
            let setback = rng.random_range(config.building_setback[0]..=config.building_setback[1]);
            let height = rng.random_range(config.building_height[0]..=config.building_height[1]);
            let cx = road.x_min + (i as f64 + 0.5) * slot + jitter;
            let (y0, y1) = if side == 0 {
                let top = road.y_center - 0.5 * road.width - setback;
                (top - depth, top)
            } else {
                let bottom = road.y_center + 0.5 * road.width + setback;
                (bottom, bottom + depth)
            };
            let fp = Rect::new(
                [
                    (cx - 0.5 * size_x).max(bounds.min[0]),
                    y0.max(bounds.min[1]),
                ],
                [
                    (cx + 0.5 * size_x).min(bounds.max[0]),
                    y1.min(bounds.max[1]),
                ],
            );
            if fp.area() < 1.0 || fp.overlaps(&rsu_keepout) {
                continue;
            }
            out.push(Building {
                footprint: fp,
                height,
            });
        }
    }
    out
}

fn place_vehicles(
    sensors: &[SensorFlags],
    road: &Road,
    traffic: &TrafficParams,
    seed: u64,
) -> Result<Vec<Vehicle>> {
    let k = sensors.len();
    let length = road.x_max - road.x_min;
    let segment = length / k as f64;
    if segment < traffic.min_spacing {
        return param_err(format!(
            "{k} vehicles need {:.1} m of road but only {length:.1} m is drivable",
            k as f64 * traffic.min_spacing
        ));
    }
    let mut rng = rng_from(seed);
    let half_lane = 0.5 * road.width - 1.5;
    let mut out = Vec::with_capacity(k);
    for (i, flags) in sensors.iter().enumerate() {
        // Each vehicle owns one road segment, which keeps placement collision-free.
        let margin = 0.5 * traffic.min_spacing;
        let x0 = road.x_min + i as f64 * segment + margin;
        let x1 = road.x_min + (i + 1) as f64 * segment - margin;
        let x = if x1 > x0 {
            rng.random_range(x0..x1)
        } else {
            0.5 * (x0 + x1)
        };
        let y = road.y_center + rng.random_range(-half_lane..=half_lane.max(0.0) + 1e-12);
        let speed = rng.random_range(traffic.speed_min..=traffic.speed_max);
        let dir = if y < road.y_center { 1.0 } else { -1.0 };
        let velocity = [dir * speed, 0.0];
        out.push(Vehicle {
            position: [x, y, traffic.vehicle_height],
            velocity,
            orientation: wrap_angle(velocity[1].atan2(velocity[0])),
            sensors: *flags,
        });
    }
    Ok(out)
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.rsu_position[2] <= 0.0 {
            return param_err("RSU height must be positive");
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if b.footprint.area() <= 0.0 || b.height <= 0.0 {
                return param_err(format!("building {i} is degenerate"));
            }
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if !self.bounds.contains([v.position[0], v.position[1]]) {
                return param_err(format!("vehicle {i} lies outside the scene bounds"));
            }
            if !(-PI..PI).contains(&v.orientation) {
                return param_err(format!("vehicle {i} orientation out of [-pi, pi)"));
            }
        }
        Ok(())
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    /// Same static geometry, fresh vehicle positions and speeds.
    pub fn resample_vehicles(&self, seed: u64) -> Result<Scene> {
        let flags: Vec<SensorFlags> = self.vehicles.iter().map(|v| v.sensors).collect();
        self.with_fleet(&flags, seed)
    }

    /// Same static geometry with a different fleet (e.g. a vehicle joining).
    pub fn with_fleet(&self, fleet: &[SensorFlags], seed: u64) -> Result<Scene> {
        if fleet.is_empty() {
            return param_err("fleet must contain at least one vehicle");
        }
        let mut out = self.clone();
        out.vehicles = place_vehicles(fleet, &self.road, &self.traffic, seed)?;
        Ok(out)
    }

    fn in_blackout(&self, p: [f64; 2]) -> bool {
        self.gps_blackout_zones.iter().any(|z| z.contains(p))
    }

    /// Time since the vehicle last had a GPS fix, assuming constant velocity.
    fn time_since_fix(&self, v: &Vehicle) -> Option<f64> {
        let speed = (v.velocity[0].powi(2) + v.velocity[1].powi(2)).sqrt();
        if speed < 1e-9 {
            return None;
        }
        let mut t = 0.0;
        for _ in 0..32 {
            let p = [
                v.position[0] - v.velocity[0] * t,
                v.position[1] - v.velocity[1] * t,
            ];
            let Some(zone) = self.gps_blackout_zones.iter().find(|z| z.contains(p)) else {
                return Some(t);
            };
            // Exit time of the backward ray from this rectangle.
            let mut exit = f64::INFINITY;
            for a in 0..2 {
                let d = -v.velocity[a];
                if d > 1e-12 {
                    exit = exit.min((zone.max[a] - p[a]) / d);
                } else if d < -1e-12 {
                    exit = exit.min((zone.min[a] - p[a]) / d);
                }
            }
            t += exit + 1e-6;
        }
        None
    }
}

/// Camera positions around the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Camera {
    Front,
    Left,
    Rear,
    Right,
}

impl Camera {
    pub const ALL: [Camera; 4] = [Camera::Front, Camera::Left, Camera::Rear, Camera::Right];

    /// Yaw of the optical axis relative to the vehicle heading (counter-clockwise).
    pub fn yaw(self) -> f64 {
        match self {
            Camera::Front => 0.0,
            Camera::Left => PI / 2.0,
            Camera::Rear => PI,
            Camera::Right => -PI / 2.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One detected object: normalized box center `(u, v)`, size `(w, h)` and objectness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    /// Index of the building the box was generated from.
    pub building: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsReading {
    pub position: Vec3,
    /// False when the reading was dead-reckoned from an earlier fix.
    pub available: bool,
}

/// Modalities currently suffering a simulated fault; consumers substitute the
/// latest healthy data for these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModalityFaults {
    pub gps: bool,
    pub rgb: bool,
    pub lidar: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSnapshot {
    pub gps: Option<GpsReading>,
    /// Per-camera detections, indexed by [`Camera::index`].
    pub detections: Option<[Vec<Detection>; 4]>,
    /// Points in the vehicle frame (x forward, y left, z up, origin at the sensor).
    pub point_cloud: Option<Vec<Vec3>>,
    /// Vehicle heading as measured on board.
    pub orientation: f64,
    /// Bit-flip probability to apply to the RGB indicator downstream.
    pub rgb_flip_probability: f64,
    pub faults: ModalityFaults,
}

/// Sample the sensors of vehicle `vehicle_index`.
pub fn sample_snapshot(scene: &Scene, vehicle_index: usize, seed: u64) -> Result<SensorSnapshot> {
    let Some(vehicle) = scene.vehicles.get(vehicle_index) else {
        return param_err(format!(
            "vehicle {vehicle_index} does not exist (scene has {})",
            scene.vehicles.len()
        ));
    };
    let gps = if vehicle.sensors.has_gps {
        gps_reading(scene, vehicle, seed)?
    } else {
        None
    };
    let detections = vehicle
        .sensors
        .has_rgb
        .then(|| detect_buildings(scene, vehicle));
    let point_cloud = vehicle
        .sensors
        .has_lidar
        .then(|| lidar_scan(scene, vehicle));
    Ok(SensorSnapshot {
        gps,
        detections,
        point_cloud,
        orientation: vehicle.orientation,
        rgb_flip_probability: 0.0,
        faults: ModalityFaults::default(),
    })
}

fn gps_reading(scene: &Scene, v: &Vehicle, seed: u64) -> Result<Option<GpsReading>> {
    let std = scene.sensors.gps_noise_std;
    let mut rng = rng_from(derive_named(seed, "gps"));
    let mut noisy = |p: Vec3| -> Result<Vec3> {
        if std == 0.0 {
            return Ok(p);
        }
        let n = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        Ok([p[0] + n.sample(&mut rng), p[1] + n.sample(&mut rng), p[2]])
    };
    let here = [v.position[0], v.position[1]];
    if !scene.in_blackout(here) {
        return Ok(Some(GpsReading {
            position: noisy(v.position)?,
            available: true,
        }));
    }
    if !scene.sensors.gps_fallback {
        return Ok(None);
    }
    let Some(dt) = scene.time_since_fix(v) else {
        return Ok(None);
    };
    let fix = [
        v.position[0] - v.velocity[0] * dt,
        v.position[1] - v.velocity[1] * dt,
        v.position[2],
    ];
    let fix = noisy(fix)?;
    Ok(Some(GpsReading {
        position: [
            fix[0] + v.velocity[0] * dt,
            fix[1] + v.velocity[1] * dt,
            fix[2],
        ],
        available: false,
    }))
}

/// Ground-truth detector: one box per building whose center lies in the camera's
/// horizontal field of view, objectness 1.
fn detect_buildings(scene: &Scene, v: &Vehicle) -> [Vec<Detection>; 4] {
    let cam = &scene.sensors.camera;
    let half_fov = cam.omega_min.abs();
    let tan_half = half_fov.tan();
    let aspect = cam.image_height as f64 / cam.image_width as f64;
    let v_half = (tan_half * aspect).atan();
    let mut out: [Vec<Detection>; 4] = Default::default();
    for (bi, b) in scene.buildings.iter().enumerate() {
        let c = b.footprint.center();
        let (dx, dy) = (c[0] - v.position[0], c[1] - v.position[1]);
        let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
        let bearing = dy.atan2(dx);
        for camera in Camera::ALL {
            // Image x grows to the right, i.e. clockwise from the optical axis.
            let omega = -wrap_angle(bearing - (v.orientation + camera.yaw()));
            if omega < cam.omega_min || omega > -cam.omega_min {
                continue;
            }
            let u = (0.5 + omega.tan() / (2.0 * tan_half)).clamp(0.0, 1.0);
            let elev = ((0.5 * b.height - scene.traffic.vehicle_height) / dist).atan();
            let vv = (0.5 - elev.tan() / (2.0 * v_half.tan())).clamp(0.0, 1.0);
            let fx = b.footprint.max[0] - b.footprint.min[0];
            let fy = b.footprint.max[1] - b.footprint.min[1];
            let radius = 0.5 * (fx * fx + fy * fy).sqrt();
            let w = ((radius / dist).atan() / half_fov).clamp(0.0, 1.0);
            let h = ((b.height / dist).atan() / (2.0 * v_half)).clamp(0.0, 1.0);
            out[camera.index()].push(Detection {
                u,
                v: vv,
                w,
                h,
                score: 1.0,
                building: Some(bi),
            });
        }
    }
    out
}

/// Ray-cast scan against the ground plane and building boxes.
fn lidar_scan(scene: &Scene, v: &Vehicle) -> Vec<Vec3> {
    let cfg = &scene.sensors.lidar;
    let origin = v.position;
    let (s, c) = v.orientation.sin_cos();
    let n_el = cfg.elevation_channels.max(1);
    let mut points = Vec::new();
    for ia in 0..cfg.azimuth_steps {
        let az = 2.0 * PI * ia as f64 / cfg.azimuth_steps as f64;
        for ie in 0..n_el {
            let el_deg = if n_el == 1 {
                cfg.elevation_min_deg
            } else {
                cfg.elevation_min_deg
                    + (cfg.elevation_max_deg - cfg.elevation_min_deg) * ie as f64
                        / (n_el - 1) as f64
            };
            let el = el_deg.to_radians();
            let local = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let dir = [
                c * local[0] - s * local[1],
                s * local[0] + c * local[1],
                local[2],
            ];
            let mut best = cfg.range;
            let mut hit = false;
            if dir[2] < -1e-12 {
                let t = -origin[2] / dir[2];
                if t <= best {
                    best = t;
                    hit = true;
                }
            }
            for b in &scene.buildings {
                if let Some(t) = b.ray_hit(origin, dir, best) {
                    if t <= best {
                        best = t;
                        hit = true;
                    }
                }
            }
            if hit {
                points.push([best * local[0], best * local[1], best * local[2]]);
            }
        }
    }
    points
}

/// Fault intensity of one modality group: `count` outages, each lasting a
/// uniformly drawn number of slots in `[min_slots, max_slots]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultSpec {
    pub count: u32,
    pub min_slots: u32,
    pub max_slots: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub horizon_slots: u32,
    pub gps: FaultSpec,
    pub lidar_rgb: FaultSpec,
}

impl FaultSchedule {
    /// Named blockage levels (frequency x duration in slots).
    pub fn level(name: &str, horizon_slots: u32) -> Result<Self> {
        let (g, l) = match name {
            "none" => (0, 0),
            "low" => (1, 2),
            "medium" => (2, 4),
            "high" => (3, 5),
            "severe" => (4, 6),
            other => return Err(Error::Config(format!("unknown fault level '{other}'"))),
        };
        Ok(Self {
            horizon_slots,
            gps: FaultSpec {
                count: g,
                min_slots: 10,
                max_slots: 20,
            },
            lidar_rgb: FaultSpec {
                count: l,
                min_slots: 20,
                max_slots: 60,
            },
        })
    }

    /// Fault intervals `[start, end)` per group, deterministic in `seed`.
    pub fn intervals(&self, seed: u64) -> (Vec<(u32, u32)>, Vec<(u32, u32)>, Vec<(u32, u32)>) {
        let draw = |spec: &FaultSpec, label: &str| {
            let mut rng = rng_from(derive_named(seed, label));
            (0..spec.count)
                .map(|_| {
                    let len = rng.random_range(spec.min_slots..=spec.max_slots.max(spec.min_slots));
                    let start = rng.random_range(0..self.horizon_slots.max(1));
                    (start, start.saturating_add(len))
                })
                .collect::<Vec<_>>()
        };
        (
            draw(&self.gps, "fault-gps"),
            draw(&self.lidar_rgb, "fault-lidar"),
            draw(&self.lidar_rgb, "fault-rgb"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Probability of flipping each RGB indicator bit.
    pub bit_flip_probability: f64,
    /// Width of the LiDAR occlusion sector in degrees.
    pub occlusion_deg: f64,
    /// Optional outage schedule evaluated at `slot`.
    pub faults: Option<FaultSchedule>,
    pub slot: u32,
}

impl CorruptionConfig {
    pub fn new(bit_flip_probability: f64, occlusion_deg: f64) -> Self {
        Self {
            bit_flip_probability,
            occlusion_deg,
            faults: None,
            slot: 0,
        }
    }

    /// Named sensing-inaccuracy levels.
    pub fn level(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::new(0.0, 0.0)),
            "low" => Ok(Self::new(0.2, 30.0)),
            "medium" => Ok(Self::new(0.5, 70.0)),
            "high" => Ok(Self::new(0.6, 100.0)),
            other => Err(Error::Config(format!("unknown corruption level '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bit_flip_probability) {
            return param_err(format!(
                "bit-flip probability {} not in [0, 1]",
                self.bit_flip_probability
            ));
        }
        if !(0.0..=360.0).contains(&self.occlusion_deg) {
            return param_err(format!(
                "occlusion sector {} deg not in [0, 360]",
                self.occlusion_deg
            ));
        }
        Ok(())
    }
}

/// Apply sensing corruption: erase LiDAR points inside a random angular sector,
/// record the RGB bit-flip probability, and mark modalities in an outage.
pub fn corrupt_snapshot(
    snapshot: &SensorSnapshot,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<SensorSnapshot> {
    corruption.validate()?;
    let mut out = snapshot.clone();
    if let Some(cloud) = out.point_cloud.as_mut() {
        if corruption.occlusion_deg > 0.0 {
            let mut rng = rng_from(derive_named(seed, "occlusion"));
            let start = rng.random_range(0.0..2.0 * PI);
            let width = corruption.occlusion_deg.to_radians();
            cloud.retain(|p| {
                let az = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                (az - start).rem_euclid(2.0 * PI) >= width
            });
        }
    }
    out.rgb_flip_probability = corruption.bit_flip_probability;
    if let Some(schedule) = corruption.faults {
        let (gps, lidar, rgb) = schedule.intervals(seed);
        let active = |iv: &[(u32, u32)]| {
            iv.iter()
                .any(|&(a, b)| corruption.slot >= a && corruption.slot < b)
        };
        out.faults = ModalityFaults {
            gps: out.faults.gps || active(&gps),
            rgb: out.faults.rgb || active(&rgb),
            lidar: out.faults.lidar || active(&lidar),
        };
        if out.faults.gps {
            if let Some(g) = out.gps.as_mut() {
                g.available = false;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization

const SCENE_MAGIC: &[u8; 8] = b"SOMSCN01";
const SCENE_VERSION: u8 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn rect(&mut self, r: &Rect) -> Result<()> {
        for v in [r.min[0], r.min[1], r.max[0], r.max[1]] {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated scene file: {e}")))?;
        Ok(b)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn rect(&mut self) -> Result<Rect> {
        let v = [self.f64()?, self.f64()?, self.f64()?, self.f64()?];
        Ok(Rect::new([v[0], v[1]], [v[2], v[3]]))
    }
}

impl Scene {
    /// Little-endian binary encoding: magic, version byte, fixed header, counts,
    /// then fixed-width building, vehicle and blackout-zone records.
    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer(w);
        w.0.write_all(SCENE_MAGIC)?;
        w.u8(SCENE_VERSION)?;
        for v in self.rsu_position {
            w.f64(v)?;
        }
        w.f64(self.rsu_boresight)?;
        w.rect(&self.bounds)?;
        for v in [
            self.road.x_min,
            self.road.x_max,
            self.road.y_center,
            self.road.width,
        ] {
            w.f64(v)?;
        }
        let t = &self.traffic;
        for v in [t.speed_min, t.speed_max, t.vehicle_height, t.min_spacing] {
            w.f64(v)?;
        }
        let s = &self.sensors;
        w.f64(s.gps_noise_std)?;
        w.u8(s.gps_fallback as u8)?;
        w.f64(s.lidar.range)?;
        w.u32(s.lidar.azimuth_steps)?;
        w.u32(s.lidar.elevation_channels)?;
        w.f64(s.lidar.elevation_min_deg)?;
        w.f64(s.lidar.elevation_max_deg)?;
        w.f64(s.camera.omega_min)?;
        w.u32(s.camera.image_width)?;
        w.u32(s.camera.image_height)?;
        let count =
            |n: usize| u32::try_from(n).map_err(|_| Error::Format("record count overflow".into()));
        w.u32(count(self.buildings.len())?)?;
        w.u32(count(self.vehicles.len())?)?;
        w.u32(count(self.gps_blackout_zones.len())?)?;
        for b in &self.buildings {
            w.rect(&b.footprint)?;
            w.f64(b.height)?;
        }
        for v in &self.vehicles {
            for x in v.position {
                w.f64(x)?;
            }
            w.f64(v.velocity[0])?;
            w.f64(v.velocity[1])?;
            w.f64(v.orientation)?;
            w.u8(v.sensors.to_bits())?;
        }
        for z in &self.gps_blackout_zones {
            w.rect(z)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Scene> {
        let mut r = Reader(r);
        let magic = r.bytes::<8>()?;
        if &magic != SCENE_MAGIC {
            return Err(Error::Format("not a scene file (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != SCENE_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene version {version}"
            )));
        }
        let rsu_position = [r.f64()?, r.f64()?, r.f64()?];
        let rsu_boresight = r.f64()?;
        let bounds = r.rect()?;
        let road = Road {
            x_min: r.f64()?,
            x_max: r.f64()?,
            y_center: r.f64()?,
            width: r.f64()?,
        };
        let traffic = TrafficParams {
            speed_min: r.f64()?,
            speed_max: r.f64()?,
            vehicle_height: r.f64()?,
            min_spacing: r.f64()?,
        };
        let gps_noise_std = r.f64()?;
        let gps_fallback = r.u8()? != 0;
        let lidar = LidarConfig {
            range: r.f64()?,
            azimuth_steps: r.u32()?,
            elevation_channels: r.u32()?,
            elevation_min_deg: r.f64()?,
            elevation_max_deg: r.f64()?,
        };
        let camera = CameraConfig {
            omega_min: r.f64()?,
            image_width: r.u32()?,
            image_height: r.u32()?,
        };
        let nb = r.u32()? as usize;
        let nv = r.u32()? as usize;
        let nz = r.u32()? as usize;
        let mut buildings = Vec::with_capacity(nb.min(1 << 16));
        for _ in 0..nb {
            buildings.push(Building {
                footprint: r.rect()?,
                height: r.f64()?,
            });
        }
        let mut vehicles = Vec::with_capacity(nv.min(1 << 16));
        for _ in 0..nv {
            let position = [r.f64()?, r.f64()?, r.f64()?];
            let velocity = [r.f64()?, r.f64()?];
            let orientation = r.f64()?;
            let sensors = SensorFlags::from_bits(r.u8()?);
            vehicles.push(Vehicle {
                position,
                velocity,
                orientation,
                sensors,
            });
        }
        let mut gps_blackout_zones = Vec::with_capacity(nz.min(1 << 16));
        for _ in 0..nz {
            gps_blackout_zones.push(r.rect()?);
        }
        let scene = Scene {
            rsu_position,
            rsu_boresight,
            buildings,
            vehicles,
            bounds,
            gps_blackout_zones,
            road,
            traffic,
            sensors: SensorConfig {
                gps_noise_std,
                gps_fallback,
                lidar,
                camera,
            },
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Human-readable export.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene is always serializable")
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        let scene: Scene = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }
}
