//! Python bindings. Images cross the boundary as `(height, width, bytes)`
//! with row-major interleaved RGB bytes, which is what `ndarray.tobytes()`
//! gives for a `uint8` array of shape `(h, w, 3)`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use czc_core::buffer::{self, MemoryBudget};
use czc_core::cam::{self, BinaryMask, BoundingBox, CompressionMode};
use czc_core::codec::{self, checkpoint, Bitstream, CodecTrainConfig};
use czc_core::datamodel::RgbImage;
use czc_core::desk::{self, DeskConfig};
use czc_core::harness;
use czc_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(h: usize, w: usize, data: &[u8]) -> PyResult<RgbImage> {
    RgbImage::new(h, w, data.to_vec()).map_err(py_err)
}

fn image_out<'py>(py: Python<'py>, img: &RgbImage) -> (usize, usize, Bound<'py, PyBytes>) {
    (img.height, img.width, PyBytes::new(py, &img.data))
}

/// A trained codec with a frozen decoder side.
#[pyclass(name = "Codec")]
struct PyCodec {
    model: codec::CodecModel,
}

#[pymethods]
impl PyCodec {
    /// Trains on equally sized images given as `(h, w, bytes)` tuples.
    #[staticmethod]
    #[pyo3(signature = (images, epochs=50, batch_size=8, seed=0))]
    fn train(images: Vec<(usize, usize, Vec<u8>)>, epochs: usize, batch_size: usize, seed: u64) -> PyResult<Self> {
        let imgs = images.iter().map(|(h, w, d)| image(*h, *w, d)).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let cfg = CodecTrainConfig { epochs, batch_size, seed, ..Default::default() };
        let (mut model, _) = codec::train_initial(&refs, &cfg).map_err(py_err)?;
        model.freeze_decoder_side();
        Ok(Self { model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { model: checkpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.model, &path).map_err(py_err)
    }

    #[getter]
    fn digest(&self) -> String {
        format!("{:016x}", self.model.frozen_digest())
    }

    /// Serialized bitstream container.
    fn encode<'py>(&self, py: Python<'py>, height: usize, width: usize, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
        let b = codec::encode(&self.model, &image(height, width, data)?).map_err(py_err)?;
        Ok(PyBytes::new(py, &b.to_bytes()))
    }

    fn decode<'py>(&self, py: Python<'py>, stream: &[u8]) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
        let b = Bitstream::from_bytes(stream).map_err(py_err)?;
        Ok(image_out(py, &codec::decode(&self.model, &b).map_err(py_err)?))
    }

    /// Model-estimated rate of the entropy-coded payloads, in bits.
    fn estimate_bits(&self, height: usize, width: usize, data: &[u8]) -> PyResult<f64> {
        let code = codec::analyze(&self.model, &image(height, width, data)?).map_err(py_err)?;
        Ok(codec::estimated_rate_bits(&self.model, &code))
    }
}

/// Parsed bitstream header fields.
#[pyfunction]
fn stream_info(stream: &[u8]) -> PyResult<BTreeMap<&'static str, u64>> {
    let b = Bitstream::from_bytes(stream).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("orig_h", b.orig_h as u64),
        ("orig_w", b.orig_w as u64),
        ("pad_h", b.pad_h as u64),
        ("pad_w", b.pad_w as u64),
        ("total_bits", b.total_bits()),
        ("digest", b.digest),
    ]))
}

/// Greedy herding order over feature rows.
#[pyfunction]
fn herding_select(features: Vec<Vec<f32>>, m: usize) -> PyResult<Vec<usize>> {
    buffer::herding_select(&features, m).map_err(py_err)
}

/// Tight box `(x_min, y_min, x_max, y_max)` around the ones of a row-major 0/1 mask.
#[pyfunction]
fn mask_to_bbox(height: usize, width: usize, mask: Vec<u8>) -> PyResult<Option<(u16, u16, u16, u16)>> {
    if mask.len() != height * width {
        return Err(PyValueError::new_err(format!("mask has {} values, expected {}", mask.len(), height * width)));
    }
    let m = BinaryMask { height, width, values: mask, threshold_used: cam::DEFAULT_THRESHOLD };
    Ok(cam::mask_to_bbox(&m).map(|b| (b.x_min, b.y_min, b.x_max, b.y_max)))
}

/// Pastes the box region of `original` over `reconstruction`.
#[pyfunction]
fn composite<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    original: &[u8],
    reconstruction: &[u8],
    bbox: (u16, u16, u16, u16),
) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let (x_min, y_min, x_max, y_max) = bbox;
    let out = cam::composite(
        &image(height, width, original)?,
        &image(height, width, reconstruction)?,
        BoundingBox { x_min, y_min, x_max, y_max },
    )
    .map_err(py_err)?;
    Ok(image_out(py, &out))
}

/// `(Avg, Last)` of per-phase top-1 accuracies.
#[pyfunction]
fn summarize(top1: Vec<f64>) -> PyResult<(f64, f64)> {
    czc_core::cil::summarize_top1(&top1).map_err(py_err)
}

#[pyfunction]
fn compression_modes() -> Vec<&'static str> {
    CompressionMode::ALL.iter().map(|m| m.name()).collect()
}

/// Writes the synthetic desk corpus as per-class PNG folders.
#[pyfunction]
#[pyo3(signature = (out, classes=10, train_per_class=500, test_per_class=100, size=32, seed=0))]
fn generate_desk(out: PathBuf, classes: usize, train_per_class: usize, test_per_class: usize, size: usize, seed: u64) -> PyResult<()> {
    let ds = desk::generate(&DeskConfig { classes, train_per_class, test_per_class, size, seed }).map_err(py_err)?;
    desk::write_corpus(&ds, &out).map_err(py_err)
}

/// Experiment configuration in the `key = value` text format.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: harness::ExperimentConfig::parse(text).map_err(py_err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Runs the experiment, writing outputs under its `out` directory.
    fn run(&self) -> PyResult<RunSummary> {
        let r = harness::run(&self.inner).map_err(py_err)?;
        Ok(RunSummary {
            avg: r.avg,
            last: r.last,
            top1: r.rows.iter().map(|x| x.top1).collect(),
            exemplar_counts: r.rows.iter().map(|x| x.exemplar_count).collect(),
            buffer_bits: r.rows.iter().map(|x| x.buffer_bits).collect(),
            budget_bits: r.rows.iter().map(|x| x.budget_bits).collect(),
        })
    }
}

#[pyclass(get_all)]
struct RunSummary {
    avg: f64,
    last: f64,
    top1: Vec<f64>,
    exemplar_counts: Vec<usize>,
    buffer_bits: Vec<u64>,
    budget_bits: Vec<u64>,
}

/// Read-only view of a saved exemplar store.
#[pyclass(name = "ExemplarStore")]
struct PyStore {
    inner: buffer::ExemplarStore,
}

#[pymethods]
impl PyStore {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: buffer::ExemplarStore::load(&dir, MemoryBudget::bits(u64::MAX)).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn used_bits(&self) -> u64 {
        self.inner.used_bits()
    }

    /// Record count per class.
    fn counts(&self) -> BTreeMap<usize, usize> {
        self.inner.records.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Decoded exemplars as `(h, w, bytes, label)`.
    #[pyo3(signature = (codec=None))]
    fn materialize<'py>(&self, py: Python<'py>, codec: Option<&PyCodec>) -> PyResult<Vec<(usize, usize, Bound<'py, PyBytes>, usize)>> {
        let items = self.inner.materialize(codec.map(|c| &c.model)).map_err(py_err)?;
        Ok(items
            .iter()
            .map(|(img, label)| {
                let (h, w, b) = image_out(py, img);
                (h, w, b, *label)
            })
            .collect())
    }
}

#[pymodule]
fn czc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodec>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyStore>()?;
    m.add_class::<RunSummary>()?;
    m.add_function(wrap_pyfunction!(stream_info, m)?)?;
    m.add_function(wrap_pyfunction!(herding_select, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(compression_modes, m)?)?;
    m.add_function(wrap_pyfunction!(generate_desk, m)?)?;
    Ok(())
}
