//! Python bindings: images, transforms, registration algorithms and the
//! losses and audits that consume them.

use equireg::attention_reg::XiF;
use equireg::combinators::{downsample, two_step, CentroidTranslation, Identity, RegistrationAlgorithm};
use equireg::equiv::{measure_equivariance, EquivMode, EquivSpec, TransformClass};
use equireg::expcli::{gen_dataset, load_checkpoint, DatasetConfig, Variant};
use equireg::losses::lncc as lncc_loss;
use equireg::ndgrad::{GradGrid, Tape};
use equireg::transform::{compose, make_rotation, make_scale, make_translation, read_grid, warp, write_grid, Extrapolation};
use equireg::{transform, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Intensity grid of shape `[channels, *extents]` over `[0, 1]^D`.
#[pyclass(name = "Image", unsendable, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: transform::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(values: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        let grid = GradGrid::new(shape, values).map_err(py_err)?;
        Ok(Self { inner: transform::Image::new(grid).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: transform::Image::new(read_grid(path).map_err(py_err)?).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_grid(path, &self.inner.grid).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.grid.shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.grid.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image(shape={:?})", self.inner.grid.shape())
    }
}

/// Map from fixed-image coordinates to moving-image coordinates.
#[pyclass(name = "Transform", unsendable, skip_from_py_object)]
#[derive(Clone)]
struct PyTransform {
    inner: transform::Transform,
}

#[pymethods]
impl PyTransform {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self { inner: transform::Transform::identity(dim) }
    }

    #[staticmethod]
    fn translation(r: Vec<f64>) -> Self {
        Self { inner: make_translation(&r) }
    }

    #[staticmethod]
    #[pyo3(signature = (angle, center = (0.5, 0.5)))]
    fn rotation(angle: f64, center: (f64, f64)) -> Self {
        Self { inner: make_rotation(angle, [center.0, center.1]) }
    }

    #[staticmethod]
    fn scale(s: f64, center: Vec<f64>) -> Self {
        Self { inner: make_scale(s, &center) }
    }

    /// Displacement field of shape `[D, *extents]`; `reflect` selects the
    /// extrapolation with a continuous Jacobian.
    #[staticmethod]
    #[pyo3(signature = (field, reflect = true))]
    fn displacement(field: &PyImage, reflect: bool) -> PyResult<Self> {
        let mode = if reflect { Extrapolation::ClipReflect } else { Extrapolation::Clip };
        Ok(Self { inner: transform::Transform::displacement(field.inner.grid.detach(), mode).map_err(py_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&x).map_err(py_err)
    }

    /// `self ∘ inner`.
    fn compose(&self, inner: &PyTransform) -> PyResult<Self> {
        Ok(Self { inner: compose(&self.inner, &inner.inner).map_err(py_err)? })
    }

    fn inverse(&self) -> Option<Self> {
        self.inner.inverse().map(|inner| Self { inner })
    }

    /// `image ∘ self`, zero outside the domain.
    fn warp(&self, image: &PyImage) -> PyResult<PyImage> {
        let tape = Tape::new();
        Ok(PyImage { inner: warp(&tape, &image.inner, &self.inner).map_err(py_err)?.detach() })
    }

    /// Samples the transform as a displacement field on a grid.
    fn to_field(&self, extents: Vec<usize>) -> PyResult<PyImage> {
        let tape = Tape::new();
        match self.inner.to_displacement_field(&tape, &extents, Extrapolation::ClipReflect).map_err(py_err)? {
            transform::Transform::DisplacementField { disp, .. } => {
                Ok(PyImage { inner: transform::Image::new(disp.detach()).map_err(py_err)? })
            }
            _ => Err(PyValueError::new_err("expected a displacement field")),
        }
    }
}

/// A registration algorithm: `(moving, fixed) -> Transform`.
#[pyclass(name = "Algorithm", unsendable)]
struct PyAlgorithm {
    inner: Box<dyn RegistrationAlgorithm>,
}

#[pymethods]
impl PyAlgorithm {
    #[staticmethod]
    fn identity() -> Self {
        Self { inner: Box::new(Identity) }
    }

    #[staticmethod]
    fn centroid() -> Self {
        Self { inner: Box::new(CentroidTranslation) }
    }

    /// Training-free coordinate attention on `channels` intensity channels.
    #[staticmethod]
    #[pyo3(signature = (channels = 1))]
    fn xi_f(channels: usize) -> Self {
        Self { inner: Box::new(XiF::new(channels)) }
    }

    /// Trained assembly from a checkpoint directory.
    #[staticmethod]
    fn load(ckpt: &str) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(ckpt).map_err(py_err)?.assemble() })
    }

    #[staticmethod]
    fn two_step(first: &PyAlgorithm, second: &PyAlgorithm) -> Self {
        Self { inner: Box::new(two_step(first.inner.box_clone(), second.inner.box_clone())) }
    }

    #[staticmethod]
    fn downsample(inner: &PyAlgorithm) -> Self {
        Self { inner: Box::new(downsample(inner.inner.box_clone())) }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    fn register(&self, moving: &PyImage, fixed: &PyImage) -> PyResult<PyTransform> {
        let tape = Tape::new();
        Ok(PyTransform { inner: self.inner.register(&tape, &moving.inner, &fixed.inner).map_err(py_err)? })
    }

    /// Equivariance sweep; returns the report as CSV text.
    #[pyo3(signature = (moving, fixed, magnitudes, class_ = "translation", mode = "wu", seed = 0))]
    fn equivariance(
        &self,
        moving: &PyImage,
        fixed: &PyImage,
        magnitudes: Vec<f64>,
        class_: &str,
        mode: &str,
        seed: u64,
    ) -> PyResult<String> {
        let class = TransformClass::parse(class_).map_err(py_err)?;
        let mode = EquivMode::parse(mode).map_err(py_err)?;
        let spec = EquivSpec { seed, ..EquivSpec::new(class, mode, magnitudes) };
        let report = measure_equivariance(self.inner.as_ref(), &moving.inner, &fixed.inner, &spec).map_err(py_err)?;
        Ok(report.to_csv())
    }
}

/// `1 - mean local normalized cross correlation`.
#[pyfunction]
#[pyo3(signature = (a, b, window = 5))]
fn lncc(a: &PyImage, b: &PyImage, window: usize) -> PyResult<f32> {
    Ok(lncc_loss(&Tape::new(), &a.inner, &b.inner, window).map_err(py_err)?.item())
}

#[pyfunction]
#[pyo3(signature = (a, b, threshold = 0.5))]
fn dice(a: &PyImage, b: &PyImage, threshold: f32) -> PyResult<f64> {
    equireg::expcli::dice(&a.inner, &b.inner, threshold).map_err(py_err)
}

/// Writes a synthetic retina-like dataset to `out`.
#[pyfunction]
#[pyo3(signature = (out, variant = "baseline", n_train = 64, n_test = 16, resolution = 64, seed = 0))]
fn generate_dataset(out: &str, variant: &str, n_train: usize, n_test: usize, resolution: usize, seed: u64) -> PyResult<()> {
    let cfg = DatasetConfig {
        variant: Variant::parse(variant).map_err(py_err)?,
        n_train,
        n_test,
        resolution,
        seed,
        ..Default::default()
    };
    gen_dataset(&cfg).and_then(|d| d.save(out)).map_err(py_err)
}

#[pymodule]
fn pyequireg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyTransform>()?;
    m.add_class::<PyAlgorithm>()?;
    m.add_function(wrap_pyfunction!(lncc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
