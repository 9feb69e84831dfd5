//! Python bindings: configs, scenes, channels, precoders, the feedback
//! quantizer and the batch experiments.

use mmprecode::channel::{dft_codebook, synthesize_channel, to_beamspace};
use mmprecode::experiment::{run_baselines, run_robustness, ExperimentConfig};
use mmprecode::linalg::{stack_columns, CMatrix, CVector, C64};
use mmprecode::pilots::{dequantize_feedback, quantize_feedback, QuantizerConfig};
use mmprecode::precode::{mf_precoder, sum_rate, wmmse_precoder, zf_precoder};
use mmprecode::rng::derive;
use mmprecode::scene::{generate_scene, sample_snapshot, Scene};
use mmprecode::vfl::{kib, overhead_report};
use mmprecode::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Format(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Columns = Vec<Vec<C64>>;

fn matrix(cols: &Columns) -> PyResult<CMatrix> {
    let n = cols.first().map_or(0, Vec::len);
    if n == 0 || cols.iter().any(|c| c.len() != n) {
        return Err(PyValueError::new_err(
            "expected a non-empty list of equal-length columns",
        ));
    }
    let cols: Vec<CVector> = cols.iter().map(|c| CVector::from_column_slice(c)).collect();
    Ok(stack_columns(&cols))
}

fn columns(m: &CMatrix) -> Columns {
    m.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Experiment configuration, parsed from and rendered to TOML.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(std::path::Path::new(path)).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.system.n()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.system.k
    }

    #[getter]
    fn noise_var(&self) -> PyResult<f64> {
        self.inner.system.noise_var().map_err(err)
    }
}

/// Street scene with buildings, an RSU and vehicles.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn generate(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: generate_scene(&config.inner.scene, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: Scene::read_binary(data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Scene::from_json(text).map_err(err)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn num_vehicles(&self) -> usize {
        self.inner.num_vehicles()
    }

    #[getter]
    fn rsu_position(&self) -> [f64; 3] {
        self.inner.rsu_position
    }

    fn vehicle_positions(&self) -> Vec<[f64; 3]> {
        self.inner.vehicles.iter().map(|v| v.position).collect()
    }

    /// Downlink and uplink channel vectors of one vehicle.
    fn channel(
        &self,
        config: &PyConfig,
        vehicle: usize,
        seed: u64,
    ) -> PyResult<(Vec<C64>, Vec<C64>)> {
        let c =
            synthesize_channel(&self.inner, vehicle, &config.inner.channel(), seed).map_err(err)?;
        Ok((
            c.h_dl.iter().copied().collect(),
            c.h_ul.iter().copied().collect(),
        ))
    }

    /// Downlink channels of all vehicles as a list of columns.
    fn channels(&self, config: &PyConfig, seed: u64) -> PyResult<Columns> {
        let ch = config.inner.channel();
        (0..self.inner.num_vehicles())
            .map(|k| {
                synthesize_channel(&self.inner, k, &ch, derive(seed, k as u64))
                    .map(|c| c.h_dl.iter().copied().collect())
                    .map_err(err)
            })
            .collect()
    }

    /// Sensor snapshot of one vehicle, as a dict of plain Python values.
    fn snapshot<'py>(
        &self,
        py: Python<'py>,
        vehicle: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let s = sample_snapshot(&self.inner, vehicle, seed).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("gps", s.gps.map(|g| (g.position, g.available)))?;
        d.set_item(
            "detections",
            s.detections
                .map(|cams| cams.iter().map(Vec::len).collect::<Vec<_>>()),
        )?;
        d.set_item("point_cloud", s.point_cloud)?;
        d.set_item("orientation", s.orientation)?;
        Ok(d)
    }
}

/// Uniform B-bit quantizer for precoder feedback.
#[pyclass(name = "Quantizer", from_py_object)]
#[derive(Clone)]
struct PyQuantizer {
    inner: QuantizerConfig,
}

#[pymethods]
impl PyQuantizer {
    #[new]
    fn new(bits: u32, clip: f64) -> PyResult<Self> {
        Ok(Self {
            inner: QuantizerConfig::new(bits, clip).map_err(err)?,
        })
    }

    #[staticmethod]
    fn for_column(bits: u32, n: usize, column_power: f64) -> PyResult<Self> {
        Ok(Self {
            inner: QuantizerConfig::with_default_clip(bits, n, column_power).map_err(err)?,
        })
    }

    #[getter]
    fn step(&self) -> f64 {
        self.inner.step()
    }

    fn round_trip(&self, x: f64) -> f64 {
        self.inner.round_trip(x)
    }

    fn encode(&self, v: Vec<C64>) -> Vec<u8> {
        quantize_feedback(&CVector::from_vec(v), &self.inner)
    }

    fn decode(&self, bits: Vec<u8>, n: usize) -> PyResult<Vec<C64>> {
        Ok(dequantize_feedback(&bits, n, &self.inner)
            .map_err(err)?
            .iter()
            .copied()
            .collect())
    }
}

/// Per-user rates of precoder `v` on channel `h` (both lists of columns).
#[pyfunction]
fn rates(h: Columns, v: Columns, noise_var: f64) -> PyResult<Vec<f64>> {
    Ok(sum_rate(&matrix(&h)?, &matrix(&v)?, noise_var)
        .map_err(err)?
        .per_user)
}

#[pyfunction]
fn mf(h: Columns, power: f64) -> PyResult<Columns> {
    Ok(columns(&mf_precoder(&matrix(&h)?, power).v))
}

#[pyfunction]
fn zf(h: Columns, power: f64) -> PyResult<Columns> {
    Ok(columns(&zf_precoder(&matrix(&h)?, power).map_err(err)?.v))
}

#[pyfunction]
#[pyo3(signature = (h, power, noise_var, max_iters = 200, tol = 1e-8))]
fn wmmse(h: Columns, power: f64, noise_var: f64, max_iters: usize, tol: f64) -> PyResult<Columns> {
    let out = wmmse_precoder(&matrix(&h)?, power, noise_var, max_iters, tol).map_err(err)?;
    Ok(columns(&out.precoder.v))
}

/// Coefficients of `h` in the N-point DFT codebook.
#[pyfunction]
fn beamspace(h: Vec<C64>) -> PyResult<Vec<C64>> {
    let n = h.len();
    Ok(to_beamspace(&CVector::from_vec(h), &dft_codebook(n))
        .map_err(err)?
        .iter()
        .copied()
        .collect())
}

/// MF / ZF / WMMSE sum rates over the config's sweep, one dict per point.
#[pyfunction]
fn baselines<'py>(
    py: Python<'py>,
    config: &PyConfig,
    seeds: Vec<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py
        .detach(|| run_baselines(&config.inner, &seeds))
        .map_err(err)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("k", r.k)?;
            d.set_item("n", r.n)?;
            d.set_item("snr_db", r.snr_db)?;
            d.set_item("seed", r.seed)?;
            d.set_item("mf", r.mf)?;
            d.set_item("zf", r.zf)?;
            d.set_item("wmmse", r.wmmse)?;
            Ok(d)
        })
        .collect()
}

/// Train models per seed and evaluate them under each sensing-corruption level.
#[pyfunction]
fn robustness<'py>(
    py: Python<'py>,
    config: &PyConfig,
    levels: Vec<String>,
    seeds: Vec<u64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py
        .detach(|| run_robustness(&config.inner, &levels, &seeds))
        .map_err(err)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("level", r.level)?;
            d.set_item("seed", r.seed)?;
            d.set_item("sum_rate", r.sum_rate)?;
            d.set_item("min_rate", r.min_rate)?;
            d.set_item("relative", r.relative)?;
            Ok(d)
        })
        .collect()
}

/// Signalling overhead in KiB: (VFL upload total, D1 per user, D2 per user).
#[pyfunction]
fn overhead(config: &PyConfig) -> (f64, f64, f64) {
    let r = overhead_report(&config.inner.overhead_params());
    (
        kib(r.vfl_upload_bytes),
        kib(r.d1_bytes_per_user),
        kib(r.d2_bytes_per_user),
    )
}

#[pymodule]
fn mmprecode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyQuantizer>()?;
    m.add_function(wrap_pyfunction!(rates, m)?)?;
    m.add_function(wrap_pyfunction!(mf, m)?)?;
    m.add_function(wrap_pyfunction!(zf, m)?)?;
    m.add_function(wrap_pyfunction!(wmmse, m)?)?;
    m.add_function(wrap_pyfunction!(beamspace, m)?)?;
    m.add_function(wrap_pyfunction!(baselines, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    m.add_function(wrap_pyfunction!(overhead, m)?)?;
    Ok(())
}
