//! Python bindings: volumes and NIfTI, phantoms, slice sampling, the
//! encoder, distillation loss algebra, splits and metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use slicewise::config::Config;
use slicewise::distill::{self, DistillConfig};
use slicewise::eval::{self, metrics};
use slicewise::image::Image;
use slicewise::slices::{self, SliceConfig};
use slicewise::vit::{self, ViTConfig, ViTParams};
use slicewise::volume::{self, nifti, PhantomClass};
use slicewise::{pipeline, Error};

create_exception!(slicewise, SlicewiseError, PyException, "Raised for any library error.");
create_exception!(
    slicewise,
    InvariantViolation,
    SlicewiseError,
    "Raised for leakage, non-finite values and failed gradient checks."
);

fn err(e: Error) -> PyErr {
    if e.is_invariant_violation() {
        InvariantViolation::new_err(e.to_string())
    } else {
        SlicewiseError::new_err(e.to_string())
    }
}

type R<T> = PyResult<T>;

trait OrPy<T> {
    fn py(self) -> R<T>;
}

impl<T> OrPy<T> for slicewise::Result<T> {
    fn py(self) -> R<T> {
        self.map_err(err)
    }
}

fn modality(name: &str) -> R<volume::Modality> {
    volume::Modality::ALL
        .into_iter()
        .find(|m| m.as_str().eq_ignore_ascii_case(name))
        .ok_or_else(|| PyValueError::new_err(format!("unknown modality {name:?}")))
}

/// A 3D scalar volume, `(height, width, depth)` with depth slowest.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing=(1.0, 1.0, 1.0), modality="T1", subject_id="subject"))]
    fn new(dims: (usize, usize, usize), data: Vec<f32>, spacing: (f32, f32, f32), modality: &str, subject_id: &str) -> R<Self> {
        let inner = volume::Volume::new(
            volume::Dims::new(dims.0, dims.1, dims.2),
            data,
            [spacing.0, spacing.1, spacing.2],
            self::modality(modality)?,
            subject_id.to_string(),
        )
        .py()?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> R<Self> {
        Ok(PyVolume {
            inner: nifti::read_nifti_file(&path).py()?,
        })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> R<Self> {
        Ok(PyVolume {
            inner: nifti::parse_nifti(bytes).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> R<()> {
        nifti::write_nifti_file(&path, &self.inner).py()
    }

    fn to_bytes(&self) -> Vec<u8> {
        nifti::write_nifti(&self.inner)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims;
        (d.height, d.width, d.depth)
    }

    #[getter]
    fn spacing(&self) -> (f32, f32, f32) {
        let s = self.inner.spacing;
        (s[0], s[1], s[2])
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        self.inner.modality.as_str()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, modality={})", self.dims(), self.modality())
    }
}

/// One subject: modality volumes plus optional label and segmentation.
#[pyclass(name = "Subject", from_py_object)]
#[derive(Clone)]
struct PySubject {
    inner: volume::SubjectRecord,
}

#[pymethods]
impl PySubject {
    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    #[getter]
    fn label(&self) -> Option<usize> {
        self.inner.label
    }

    #[getter]
    fn modalities(&self) -> Vec<&'static str> {
        self.inner.volumes.keys().map(|m| m.as_str()).collect()
    }

    fn volume(&self, modality: &str) -> R<PyVolume> {
        let m = self::modality(modality)?;
        self.inner
            .volumes
            .get(&m)
            .map(|v| PyVolume { inner: v.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("subject has no {modality} volume")))
    }

    #[getter]
    fn seg_mask(&self) -> Option<Vec<u8>> {
        self.inner.seg_mask.as_ref().map(|m| m.data.clone())
    }

    /// Stacked, normalised, resized slices as `(slice_index, [H*W*3])`.
    #[pyo3(signature = (num_slices=16, target_side=96))]
    fn slices(&self, num_slices: usize, target_side: usize) -> R<Vec<(usize, Vec<f32>)>> {
        let cfg = SliceConfig {
            num_slices,
            target_side,
            ..Default::default()
        };
        Ok(slices::extract_slices(&self.inner, &cfg)
            .py()?
            .into_iter()
            .map(|s| (s.slice_index, s.pixels.data))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Subject({}, label={:?})", self.inner.subject_id, self.inner.label)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, lesion, size=(48, 48, 24)))]
fn generate_phantom(seed: u64, lesion: bool, size: (usize, usize, usize)) -> R<PySubject> {
    let class = if lesion { PhantomClass::Lesion } else { PhantomClass::Healthy };
    Ok(PySubject {
        inner: volume::generate_phantom(seed, class, [size.0, size.1, size.2]).py()?,
    })
}

/// Subjects listed in a dataset manifest, with paths relative to it.
#[pyfunction]
fn load_manifest(path: PathBuf) -> R<Vec<PySubject>> {
    let (_, subjects) = pipeline::load_corpus(&path).py()?;
    Ok(subjects.into_iter().map(|inner| PySubject { inner }).collect())
}

#[pyfunction]
fn sample_slice_indices(num_slices: usize, depth: usize) -> R<Vec<usize>> {
    slices::sample_slice_indices(num_slices, depth).py()
}

/// Vision transformer encoder with the self-distillation projection head.
#[pyclass(name = "ViT")]
struct PyViT {
    inner: ViTParams,
}

fn images(views: Vec<Vec<f32>>, side: usize) -> R<Vec<Image>> {
    views
        .into_iter()
        .map(|data| {
            if data.len() != side * side * slicewise::image::CHANNELS {
                return Err(PyValueError::new_err(format!(
                    "view of {} values is not {side}x{side}x3",
                    data.len()
                )));
            }
            Ok(Image {
                height: side,
                width: side,
                data,
            })
        })
        .collect()
}

#[pymethods]
impl PyViT {
    /// `config` is a JSON object of encoder fields; omitted fields keep
    /// their desk-scale defaults.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> R<Self> {
        let cfg: ViTConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ViTConfig::default(),
        };
        Ok(PyViT {
            inner: ViTParams::init(&cfg, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> R<Self> {
        Ok(PyViT {
            inner: ViTParams::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> R<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn config(&self) -> R<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Class-token embeddings, one row per `side x side x 3` view.
    fn cls_embeddings(&self, views: Vec<Vec<f32>>, side: usize) -> R<Vec<Vec<f32>>> {
        let d = self.inner.config.embed_dim;
        let flat = vit::cls_embeddings(&self.inner, &images(views, side)?).py()?;
        Ok(flat.chunks(d).map(<[f32]>::to_vec).collect())
    }

    /// Prototype logits, one row per view.
    fn prototype_logits(&self, views: Vec<Vec<f32>>, side: usize) -> R<Vec<Vec<f32>>> {
        let k = self.inner.config.n_prototypes;
        let flat = vit::prototype_logits(&self.inner, &images(views, side)?).py()?;
        Ok(flat.chunks(k).map(<[f32]>::to_vec).collect())
    }
}

#[pyfunction]
fn teacher_distribution(logits: Vec<f32>, center: Vec<f32>, tau: f64) -> Vec<f32> {
    distill::teacher_distribution(&logits, &center, tau)
}

/// Mean cross-entropy over (teacher global view, other student view) pairs.
#[pyfunction]
#[pyo3(signature = (student, teacher, center, tau_student=0.1, tau_teacher=0.04))]
fn distill_loss(
    student: Vec<Vec<f32>>,
    teacher: Vec<Vec<f32>>,
    center: Vec<f32>,
    tau_student: f64,
    tau_teacher: f64,
) -> R<f64> {
    let cfg = DistillConfig {
        tau_student,
        tau_teacher,
        ..Default::default()
    };
    distill::distill_loss(&student, &teacher, &center, &cfg).py()
}

#[pyfunction]
fn update_center(center: Vec<f32>, teacher_logits: Vec<Vec<f32>>, momentum: f64) -> R<Vec<f32>> {
    distill::update_center(&center, &teacher_logits, momentum).py()
}

/// Held-out test set and stratified folds.
#[pyclass(name = "SplitManifest")]
struct PySplits {
    inner: eval::SplitManifest,
}

#[pymethods]
impl PySplits {
    #[getter]
    fn test_ids(&self) -> Vec<String> {
        self.inner.test_ids.iter().cloned().collect()
    }

    #[getter]
    fn folds(&self) -> Vec<Vec<String>> {
        self.inner.folds.iter().map(|f| f.iter().cloned().collect()).collect()
    }

    #[getter]
    fn ssl_ids(&self) -> Vec<String> {
        self.inner.ssl_ids.iter().cloned().collect()
    }

    fn train_ids(&self, fold: usize) -> Vec<String> {
        self.inner.train_ids(fold).into_iter().collect()
    }

    fn validate(&self) -> R<()> {
        self.inner.validate().py()
    }

    fn to_json(&self) -> R<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, subjects, seed=0, n_folds=5))]
fn make_splits(dataset: &str, subjects: Vec<(String, usize)>, seed: u64, n_folds: usize) -> R<PySplits> {
    Ok(PySplits {
        inner: eval::make_splits(dataset, &subjects, seed, n_folds).py()?,
    })
}

#[pyfunction]
fn test_count(n: usize) -> usize {
    eval::test_count(n)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<usize>) -> R<f64> {
    metrics::auroc(&scores, &labels).py()
}

#[pyfunction]
fn dice(pred: Vec<u8>, gt: Vec<u8>, class_id: u8) -> R<f64> {
    metrics::dice(&pred, &gt, class_id).py()
}

/// HD95 in spacing units between two boolean masks over `dims`.
#[pyfunction]
#[pyo3(signature = (pred, gt, dims, spacing=None))]
fn hd95(pred: Vec<bool>, gt: Vec<bool>, dims: Vec<usize>, spacing: Option<Vec<f64>>) -> R<f64> {
    let spacing = spacing.unwrap_or_else(|| vec![1.0; dims.len()]);
    metrics::hd95(&pred, &gt, &dims, &spacing).py()
}

#[pyfunction]
fn classification_metrics(probs: Vec<f64>, labels: Vec<usize>) -> R<BTreeMap<&'static str, f64>> {
    let m = metrics::classification_metrics(&probs, &labels).py()?;
    Ok(BTreeMap::from([
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
        ("tp", m.tp as f64),
        ("fp", m.fp as f64),
        ("fn", m.fn_ as f64),
        ("tn", m.tn as f64),
    ]))
}

#[pyfunction]
fn fold_ttest(a: Vec<f64>, b: Vec<f64>) -> R<f64> {
    metrics::fold_ttest(&a, &b).py()
}

/// `(case name, relative error)` for every gradient check case.
#[pyfunction]
#[pyo3(signature = (seeds=4))]
fn gradcheck(seeds: u64) -> R<Vec<(String, f64)>> {
    Ok(pipeline::gradcheck_suite(seeds)
        .py()?
        .into_iter()
        .map(|r| (r.name, r.rel_error))
        .collect())
}

/// The default run configuration as TOML.
#[pyfunction]
fn default_config() -> R<String> {
    Config::default().to_toml().py()
}

#[pymodule(name = "slicewise")]
fn slicewise_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SlicewiseError", py.get_type::<SlicewiseError>())?;
    m.add("InvariantViolation", py.get_type::<InvariantViolation>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PySubject>()?;
    m.add_class::<PyViT>()?;
    m.add_class::<PySplits>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(sample_slice_indices, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(update_center, m)?)?;
    m.add_function(wrap_pyfunction!(make_splits, m)?)?;
    m.add_function(wrap_pyfunction!(test_count, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(fold_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
