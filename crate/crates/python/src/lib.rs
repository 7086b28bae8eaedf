//! Python bindings: images, the three stylization pipelines, the EMD
//! solvers and color post-processing.
//!
//! Configs, guidance and correspondence documents are passed as JSON text
//! in the same format the HTTP service accepts; reports come back as JSON
//! text.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde_json::Value;

use stylecore::colorpost::{post_process, ColorPostConfig};
use stylecore::dst::CorrespondenceDocument;
use stylecore::guidance::GuidanceDocument;
use stylecore::progress::Silent;
use stylecore::transport::{exact_emd, remd as relaxed_emd, DistanceMatrix, Metric};
use stylecore::{ColorSpace, Error, ImageBuffer};
use stylecore_cli::config::{regime_table, JobConfig};
use stylecore_cli::run::{check_inputs, execute, JobInputs};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// An image with values in `[0, 1]`, stored row-major as `(height, width,
/// channels)`.
#[pyclass(name = "Image", module = "stylecore_py", frozen)]
pub struct PyImage {
    inner: ImageBuffer,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ImageBuffer::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        ImageBuffer::decode(data).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Builds an sRGB image from flat row-major values.
    #[staticmethod]
    fn from_pixels(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        ImageBuffer::new(height, width, channels, data, ColorSpace::Srgb).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn encode_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let png = self.inner.encode_png().map_err(py_err)?;
        Ok(PyBytes::new(py, &png))
    }

    fn resize_long_side(&self, long_side: usize) -> PyResult<Self> {
        self.inner.resize_long_side(long_side).map(|inner| Self { inner }).map_err(py_err)
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.data().to_vec()
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
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.inner.height(), self.inner.width(), self.inner.channels())
    }
}

/// Parses an optional config object and tags it with `kind`.
fn job_config(kind: &str, config: Option<&str>) -> PyResult<JobConfig> {
    let mut v: Value = match config {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => Value::Object(Default::default()),
    };
    let Value::Object(m) = &mut v else {
        return Err(PyValueError::new_err("config: expected a JSON object"));
    };
    m.insert("kind".into(), Value::String(kind.into()));
    JobConfig::parse(&v.to_string()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn run_job(py: Python<'_>, cfg: JobConfig, inputs: JobInputs) -> PyResult<(PyImage, String)> {
    check_inputs(&cfg, &inputs).map_err(|(f, m)| PyValueError::new_err(format!("{f}: {m}")))?;
    let out = py.detach(|| execute(&cfg, &inputs, &Silent)).map_err(py_err)?;
    Ok((PyImage { inner: out.image }, out.report.to_string()))
}

/// STROTSS. `guidance` is a guidance document whose mask names are keys of
/// `masks`. Returns `(image, report_json)`.
#[pyfunction]
#[pyo3(signature = (content, style, config=None, guidance=None, masks=None))]
fn strotss(
    py: Python<'_>,
    content: &PyImage,
    style: &PyImage,
    config: Option<&str>,
    guidance: Option<&str>,
    masks: Option<HashMap<String, PyRef<'_, PyImage>>>,
) -> PyResult<(PyImage, String)> {
    let cfg = job_config("strotss", config)?;
    let (c, s) = (&content.inner, &style.inner);
    let guidance = match guidance {
        None => None,
        Some(text) => {
            let doc = GuidanceDocument::parse(text).map_err(py_err)?;
            let masks = masks.unwrap_or_default();
            let load = |name: &str| {
                masks
                    .get(name)
                    .map(|m| m.inner.clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("no mask named {name:?}")))
            };
            Some(doc.resolve(&load, (c.height(), c.width()), (s.height(), s.width())).map_err(py_err)?)
        }
    };
    run_job(py, cfg, JobInputs { content: c.clone(), style: s.clone(), guidance, points: None })
}

/// NNST with color post-processing unless `"color_post": false`.
#[pyfunction]
#[pyo3(signature = (content, style, config=None))]
fn nnst(py: Python<'_>, content: &PyImage, style: &PyImage, config: Option<&str>) -> PyResult<(PyImage, String)> {
    let cfg = job_config("nnst", config)?;
    let inputs = JobInputs { content: content.inner.clone(), style: style.inner.clone(), guidance: None, points: None };
    run_job(py, cfg, inputs)
}

/// DST from a correspondence document.
#[pyfunction]
#[pyo3(signature = (content, style, points, config=None))]
fn dst(py: Python<'_>, content: &PyImage, style: &PyImage, points: &str, config: Option<&str>) -> PyResult<(PyImage, String)> {
    let cfg = job_config("dst", config)?;
    let points = CorrespondenceDocument::parse(points).map_err(py_err)?;
    let inputs =
        JobInputs { content: content.inner.clone(), style: style.inner.clone(), guidance: None, points: Some(points) };
    run_job(py, cfg, inputs)
}

fn cost_matrix(costs: &[Vec<f64>]) -> PyResult<DistanceMatrix> {
    DistanceMatrix::from_rows(costs, Metric::Cosine).map_err(py_err)
}

/// Exact uniform-marginal EMD of a cost matrix: `(cost, plan_rows)`.
#[pyfunction]
fn emd(py: Python<'_>, costs: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let c = cost_matrix(&costs)?;
    let sol = py.detach(|| exact_emd(&c)).map_err(py_err)?;
    let plan = sol.plan.flows.chunks(sol.plan.cols.max(1)).map(<[f64]>::to_vec).collect();
    Ok((sol.cost, plan))
}

/// Relaxed EMD (the larger of the two one-sided nearest-cost averages).
#[pyfunction]
fn remd(costs: Vec<Vec<f64>>) -> PyResult<f64> {
    relaxed_emd(&cost_matrix(&costs)?).map_err(py_err)
}

/// Keeps the stylized luminance and matches its chrominance to the style.
#[pyfunction]
fn color_post(stylized: &PyImage, content: &PyImage, style: &PyImage) -> PyResult<PyImage> {
    post_process(&stylized.inner, &content.inner, &style.inner, &ColorPostConfig::default())
        .map(|inner| PyImage { inner })
        .map_err(py_err)
}

/// `(beta, gamma)` presets for each DST base and regime, as JSON.
#[pyfunction]
fn regimes() -> String {
    regime_table().to_string()
}

#[pymodule]
fn stylecore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_function(wrap_pyfunction!(strotss, m)?)?;
    m.add_function(wrap_pyfunction!(nnst, m)?)?;
    m.add_function(wrap_pyfunction!(dst, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(remd, m)?)?;
    m.add_function(wrap_pyfunction!(color_post, m)?)?;
    m.add_function(wrap_pyfunction!(regimes, m)?)?;
    Ok(())
}
