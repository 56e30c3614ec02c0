//! Python module `objn`: boxes, the discretized box grid, non-max suppression,
//! detection evaluation, synthetic data generation and checkpoint inference.

use std::path::PathBuf;

use objn_core::data::{self, SynthConfig};
use objn_core::detector::{self, NmsParams};
use objn_core::eval;
use objn_core::{CellDistribution, ErrorKind, RunConfig};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: objn_core::Error) -> PyErr {
    match e.kind() {
        ErrorKind::Io => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Axis-aligned box in normalized image coordinates.
#[pyclass(frozen, from_py_object, name = "BBox", module = "objn")]
#[derive(Clone, Copy)]
struct PyBBox(objn_core::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> PyResult<Self> {
        objn_core::BBox::new(x_min, y_min, x_max, y_max).map(PyBBox).map_err(to_py)
    }

    #[getter]
    fn x_min(&self) -> f64 {
        self.0.x_min
    }
    #[getter]
    fn y_min(&self) -> f64 {
        self.0.y_min
    }
    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max
    }
    #[getter]
    fn y_max(&self) -> f64 {
        self.0.y_max
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    /// `(cx, cy, scale, aspect)` with scale `sqrt(w*h)` and aspect `w/h`.
    fn params(&self) -> (f64, f64, f64, f64) {
        let p = self.0.params();
        (p.cx, p.cy, p.scale, p.aspect)
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        objn_core::iou(&self.0, &other.0)
    }

    #[allow(clippy::wrong_self_convention)]
    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn __eq__(&self, other: &PyBBox) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.to_array();
        format!("BBox({a}, {b}, {c}, {d})")
    }
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    objn_core::iou(&a.0, &b.0)
}

/// Discretized box space over position, scale and aspect.
#[pyclass(frozen, from_py_object, name = "BBoxGrid", module = "objn")]
#[derive(Clone, Copy)]
struct PyGrid(objn_core::BBoxGrid);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (nx=8, ny=8, scales=4, aspects=3, scale_range=(0.1, 1.0), aspect_range=(1.0/3.0, 3.0), sigma=(0.5, 0.5, 0.5, 0.5)))]
    fn new(
        nx: usize,
        ny: usize,
        scales: usize,
        aspects: usize,
        scale_range: (f64, f64),
        aspect_range: (f64, f64),
        sigma: (f64, f64, f64, f64),
    ) -> PyResult<Self> {
        let g = objn_core::BBoxGrid {
            nx,
            ny,
            ns: scales,
            na: aspects,
            scale_range,
            aspect_range,
            sigma: [sigma.0, sigma.1, sigma.2, sigma.3],
        };
        g.validate().map_err(to_py)?;
        Ok(PyGrid(g))
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.0.num_cells()
    }

    fn encode(&self, b: &PyBBox) -> usize {
        self.0.encode(&b.0)
    }

    /// `(ix, iy, is, ia)` bin coordinates of a flat cell index.
    fn cell(&self, index: usize) -> PyResult<(usize, usize, usize, usize)> {
        let c = self.0.cell(index).map_err(|e| PyIndexError::new_err(e.to_string()))?;
        Ok((c.ix, c.iy, c.is, c.ia))
    }

    fn decode(&self, index: usize) -> PyResult<PyBBox> {
        self.0
            .decode(index)
            .map(PyBBox)
            .map_err(|e| PyIndexError::new_err(e.to_string()))
    }

    /// Soft target over all cells for one image's boxes.
    fn target_distribution(&self, boxes: Vec<PyBBox>) -> PyResult<Vec<f64>> {
        let boxes: Vec<_> = boxes.into_iter().map(|b| b.0).collect();
        let d = self.0.target_distribution(&boxes).map_err(to_py)?;
        Ok(d.probs().to_vec())
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!("BBoxGrid(nx={}, ny={}, scales={}, aspects={})", g.nx, g.ny, g.ns, g.na)
    }
}

fn nms_params(iou_threshold: f64, score_threshold: f64, max_detections: usize) -> PyResult<NmsParams> {
    let p = NmsParams {
        iou_threshold,
        score_threshold,
        max_detections,
    };
    p.validate().map_err(to_py)?;
    Ok(p)
}

/// Suppresses overlapping cells of a distribution; returns `(score, BBox)` pairs.
#[pyfunction]
#[pyo3(signature = (probs, grid, iou_threshold=0.5, score_threshold=0.01, max_detections=5))]
fn nms(
    probs: Vec<f64>,
    grid: &PyGrid,
    iou_threshold: f64,
    score_threshold: f64,
    max_detections: usize,
) -> PyResult<Vec<(f64, PyBBox)>> {
    let dist = CellDistribution::new(probs).map_err(to_py)?;
    let params = nms_params(iou_threshold, score_threshold, max_detections)?;
    let dets = detector::nms(&dist, &grid.0, &params).map_err(to_py)?;
    Ok(dets.into_iter().map(|d| (d.score, PyBBox(d.box_))).collect())
}

/// Precision-recall area for per-image detections against ground truth.
///
/// `detections[i]` holds `(score, BBox)` pairs sorted by descending score.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_match=0.5))]
fn detection_auc(
    detections: Vec<Vec<(f64, PyBBox)>>,
    ground_truth: Vec<Vec<PyBBox>>,
    iou_match: f64,
) -> PyResult<f64> {
    let dets: Vec<Vec<detector::Detection>> = detections
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|(score, b)| detector::Detection { box_: b.0, score })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<objn_core::BBox>> = ground_truth
        .into_iter()
        .map(|v| v.into_iter().map(|b| b.0).collect())
        .collect();
    let report = eval::evaluate_detections(&dets, &gts, iou_match).map_err(to_py)?;
    Ok(report.auc)
}

/// Writes the synthetic dataset described by a run config (defaults when
/// `config` is omitted) and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn generate(out_dir: PathBuf, config: Option<PathBuf>) -> PyResult<PathBuf> {
    let cfg: SynthConfig = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?.data,
        None => SynthConfig::default(),
    };
    let (manifest, _) = data::generate(&cfg, &out_dir).map_err(to_py)?;
    Ok(manifest)
}

/// A trained network loaded from a checkpoint file.
#[pyclass(frozen, name = "Model", module = "objn")]
struct PyModel(objn_core::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        objn_core::Model::load(&path).map(PyModel).map_err(to_py)
    }

    /// `"classification"` or `"bbox"`.
    #[getter]
    fn head(&self) -> &'static str {
        self.0.head().kind().name()
    }

    #[getter]
    fn grid(&self) -> PyResult<PyGrid> {
        self.0.grid().map(|g| PyGrid(*g)).map_err(to_py)
    }

    /// Cell distribution predicted for a PNG image.
    fn predict(&self, py: Python<'_>, image: PathBuf) -> PyResult<Vec<f64>> {
        py.detach(|| {
            let img = data::load_image(&image)?;
            detector::predict_distribution(&self.0, &img).map(|d| d.probs().to_vec())
        })
        .map_err(to_py)
    }

    /// Detections for a PNG image as `(score, BBox)` pairs.
    #[pyo3(signature = (image, iou_threshold=0.5, score_threshold=0.01, max_detections=5))]
    fn detect(
        &self,
        py: Python<'_>,
        image: PathBuf,
        iou_threshold: f64,
        score_threshold: f64,
        max_detections: usize,
    ) -> PyResult<Vec<(f64, PyBBox)>> {
        let params = nms_params(iou_threshold, score_threshold, max_detections)?;
        let dets = py
            .detach(|| {
                let grid = self.0.grid()?;
                let img = data::load_image(&image)?;
                let dist = detector::predict_distribution(&self.0, &img)?;
                detector::nms(&dist, grid, &params)
            })
            .map_err(to_py)?;
        Ok(dets.into_iter().map(|d| (d.score, PyBBox(d.box_))).collect())
    }
}

#[pymodule]
fn objn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(detection_auc, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
