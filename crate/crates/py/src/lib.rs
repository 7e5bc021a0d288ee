//! Python bindings: configs, synthetic samples, metrics, point clouds and
//! the network itself.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tode_core::cli::{load_model, sidecar_path, RunConfig, MODEL_KEYS};
use tode_core::data::{self, CameraIntrinsics, RgbdSample, SynthConfig};
use tode_core::geometry;
use tode_core::loss::LossConfig;
use tode_core::metrics::{self, EvalRegion};
use tode_core::model::{self, prepare_input, TodeNet};
use tode_core::train::{save_checkpoint, TrainConfig, Trainer};
use tode_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Network architecture.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (height=240, width=320, modality="rgbd", embed_dim=32, window=5, use_ffm=true, max_depth=10.0))]
    fn new(
        height: usize,
        width: usize,
        modality: &str,
        embed_dim: usize,
        window: usize,
        use_ffm: bool,
        max_depth: f64,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            height,
            width,
            modality: modality.parse().map_err(py_err)?,
            embed_dim,
            window,
            use_ffm,
            max_depth,
            ..Default::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality.to_string()
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.inner.in_channels()
    }

    #[getter]
    fn use_ffm(&self) -> bool {
        self.inner.use_ffm
    }

    /// Per stage `(height, width, channels, heads, window, shift)`.
    fn stages(&self) -> Vec<(usize, usize, usize, usize, usize, usize)> {
        self.inner.stages().iter().map(|g| (g.height, g.width, g.channels, g.heads, g.window, g.shift)).collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(height={}, width={}, modality='{}', embed_dim={}, window={}, use_ffm={})",
            c.height,
            c.width,
            c.modality,
            c.embed_dim,
            c.window,
            if c.use_ffm { "True" } else { "False" }
        )
    }
}

/// One RGB-D record; planes are flat row-major lists.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: RgbdSample,
}

#[pymethods]
impl PySample {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::load_sample(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_sample(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn rgb(&self) -> Vec<u8> {
        self.inner.rgb.clone()
    }

    #[getter]
    fn raw_depth(&self) -> Vec<f32> {
        self.inner.raw_depth.clone()
    }

    #[getter]
    fn gt_depth(&self) -> Vec<f32> {
        self.inner.gt_depth.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<u8> {
        self.inner.mask.clone()
    }

    /// `(fx, fy, cx, cy)`.
    #[getter]
    fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let k = self.inner.intrinsics;
        (k.fx, k.fy, k.cx, k.cy)
    }

    fn masked_count(&self) -> usize {
        self.inner.masked_count()
    }
}

/// Renders a synthetic scene with corrupted sensor depth.
#[pyfunction]
#[pyo3(signature = (width=64, height=48, seed=0, min_objects=1, max_objects=3))]
fn generate_sample(width: usize, height: usize, seed: u64, min_objects: usize, max_objects: usize) -> PyResult<PySample> {
    let cfg = SynthConfig { width, height, seed, min_objects, max_objects, ..Default::default() };
    cfg.validate().map_err(py_err)?;
    Ok(PySample { inner: data::generate_sample(&cfg).map_err(py_err)? })
}

/// Depth metrics over `mask != 0`, as a dict.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: Vec<f64>, gt: Vec<f64>, mask: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&pred, &gt, &mask).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("rmse", r.rmse)?;
    d.set_item("rel", r.rel)?;
    d.set_item("mae", r.mae)?;
    d.set_item("delta_105", r.delta_105)?;
    d.set_item("delta_110", r.delta_110)?;
    d.set_item("delta_125", r.delta_125)?;
    d.set_item("pixel_count", r.pixel_count)?;
    Ok(d)
}

/// Scores a sample's depth map; `region` is "mask" or "all".
#[pyfunction]
#[pyo3(signature = (sample, pred, region="mask"))]
fn evaluate_sample<'py>(py: Python<'py>, sample: &PySample, pred: Vec<f64>, region: &str) -> PyResult<Bound<'py, PyDict>> {
    let region = match region {
        "mask" => EvalRegion::MaskOnly,
        "all" => EvalRegion::AllPixels,
        o => return Err(PyValueError::new_err(format!("region must be 'mask' or 'all', got {o:?}"))),
    };
    let s = &sample.inner;
    let mask = metrics::evaluation_mask(&s.gt_depth, &s.mask, region);
    let gt: Vec<f64> = s.gt_depth.iter().map(|&v| v as f64).collect();
    evaluate(py, pred, gt, mask)
}

type Cloud = (Vec<(f32, f32, f32)>, Vec<(u8, u8, u8)>);

/// Back-projects positive depths; returns `(points, colors)`.
#[pyfunction]
#[pyo3(signature = (depth, height, width, intrinsics, rgb=None))]
fn depth_to_pointcloud(
    depth: Vec<f32>,
    height: usize,
    width: usize,
    intrinsics: (f64, f64, f64, f64),
    rgb: Option<Vec<u8>>,
) -> PyResult<Cloud> {
    let (fx, fy, cx, cy) = intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(py_err)?;
    let pc = geometry::depth_to_pointcloud(&depth, height, width, rgb.as_deref(), &k).map_err(py_err)?;
    Ok((
        pc.points.iter().map(|p| (p[0], p[1], p[2])).collect(),
        pc.colors.iter().map(|c| (c[0], c[1], c[2])).collect(),
    ))
}

/// Projects points back to a depth map (nearest pixel, z-buffered).
#[pyfunction]
fn pointcloud_to_depth(
    points: Vec<(f32, f32, f32)>,
    intrinsics: (f64, f64, f64, f64),
    height: usize,
    width: usize,
) -> PyResult<Vec<f32>> {
    let (fx, fy, cx, cy) = intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(py_err)?;
    let n = points.len();
    let pc = geometry::PointCloud::new(points.into_iter().map(|(x, y, z)| [x, y, z]).collect(), vec![[255; 3]; n])
        .map_err(py_err)?;
    Ok(geometry::pointcloud_to_depth(&pc, &k, height, width))
}

/// ASCII PLY text for a cloud.
#[pyfunction]
fn ply_string(points: Vec<(f32, f32, f32)>, colors: Vec<(u8, u8, u8)>) -> PyResult<String> {
    let pc = geometry::PointCloud::new(
        points.into_iter().map(|(x, y, z)| [x, y, z]).collect(),
        colors.into_iter().map(|(r, g, b)| [r, g, b]).collect(),
    )
    .map_err(py_err)?;
    Ok(geometry::ply_string(&pc))
}

/// The depth-completion network (f32 parameters).
#[pyclass(name = "Model")]
struct PyModel {
    net: TodeNet<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { net: TodeNet::new(config.inner.clone(), seed).map_err(py_err)? })
    }

    /// Loads a checkpoint written by `tode train` (architecture from its
    /// `.cfg` sidecar).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(&sidecar_path(&path)).map_err(py_err)?;
        Ok(Self { net: load_model(&path, &cfg.model).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(self.net.params(), &path).map_err(py_err)?;
        let cfg = RunConfig { model: self.net.config().clone(), ..Default::default() };
        std::fs::write(sidecar_path(&path), cfg.render(MODEL_KEYS)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.net.config().clone() }
    }

    fn num_parameters(&self) -> usize {
        self.net.params().num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.net.params().names().to_vec()
    }

    /// Predicted depth in meters, flat row-major.
    fn predict(&self, py: Python<'_>, sample: &PySample) -> PyResult<Vec<f32>> {
        let input = prepare_input::<f32>(&sample.inner, self.net.config()).map_err(py_err)?;
        let net = &self.net;
        py.detach(|| net.predict(&input)).map(|t| t.into_data()).map_err(py_err)
    }

    /// Trains in place for `steps` optimizer steps; returns the loss per step.
    #[pyo3(signature = (samples, steps, lr=1e-3, batch_size=8, augment=false, seed=0))]
    fn fit(
        &mut self,
        py: Python<'_>,
        samples: Vec<PySample>,
        steps: usize,
        lr: f64,
        batch_size: usize,
        augment: bool,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data: Vec<RgbdSample> = samples.into_iter().map(|s| s.inner).collect();
        let cfg = TrainConfig {
            lr,
            batch_size,
            augment,
            seed,
            epochs: steps.max(1),
            lr_milestones: Vec::new(),
            max_steps: Some(steps.max(1)),
            ..Default::default()
        };
        let net = self.net.clone();
        let (net, losses) = py
            .detach(move || -> tode_core::Result<_> {
                let mut trainer = Trainer::new(net, cfg, LossConfig::default())?;
                let history = trainer.fit(&data, |_| {})?;
                Ok((trainer.net, history.losses()))
            })
            .map_err(py_err)?;
        self.net = net;
        Ok(losses)
    }
}

#[pymodule]
fn tode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(depth_to_pointcloud, m)?)?;
    m.add_function(wrap_pyfunction!(pointcloud_to_depth, m)?)?;
    m.add_function(wrap_pyfunction!(ply_string, m)?)?;
    Ok(())
}
