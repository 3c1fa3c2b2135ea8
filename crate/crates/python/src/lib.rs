//! Python bindings for `cct_shp`: architectures, models, datasets, training,
//! single-head probing, cluster statistics and committees.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cct_shp::cluster::{self, ClippedMatrix, ClusterReport};
use cct_shp::committee::{self, PredictionSet};
use cct_shp::data::{self, AugmentConfig, CifarVariant, Split};
use cct_shp::probe::{self, FieldMatrix, FieldOptions, FieldProbe, ProbePoint, ProbeTrainOptions, Tap};
use cct_shp::trainer::{self, Checkpoint, FreezeMask, OptimizerConfig, Schedule, TrainOptions, Trainer};

create_exception!(cctshp, CctShpError, PyException);

fn err(e: cct_shp::Error) -> PyErr {
    CctShpError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| CctShpError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

fn square(rows: &[Vec<f64>]) -> PyResult<(usize, Vec<f64>)> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(CctShpError::new_err("expected a square matrix"));
    }
    Ok((n, rows.concat()))
}

fn rows(size: usize, flat: &[f64]) -> Vec<Vec<f64>> {
    flat.chunks(size.max(1)).map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "ArchitectureSpec", module = "cctshp", from_py_object)]
#[derive(Clone)]
pub struct PySpec {
    inner: cct_shp::ArchitectureSpec,
}

#[pymethods]
impl PySpec {
    #[new]
    #[pyo3(signature = (num_conv_layers, num_blocks, dim, heads, num_labels, input_size, conv_channels=None))]
    fn new(
        num_conv_layers: usize,
        num_blocks: usize,
        dim: usize,
        heads: usize,
        num_labels: usize,
        input_size: usize,
        conv_channels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let mut inner =
            cct_shp::ArchitectureSpec::uniform(num_conv_layers, num_blocks, dim, heads, num_labels, input_size);
        if let Some(c) = conv_channels {
            inner.conv_channels = c;
        }
        inner.validate().map_err(err)?;
        Ok(PySpec { inner })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PySpec {
            inner: cct_shp::ArchitectureSpec::preset(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        cct_shp::arch::PRESETS.to_vec()
    }

    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(PySpec {
            inner: cct_shp::ArchitectureSpec::from_config_str(text).map_err(err)?,
        })
    }

    fn to_config(&self) -> String {
        self.inner.to_config_string()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn heads_per_block(&self) -> Vec<usize> {
        self.inner.heads_per_block.clone()
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.inner.num_labels
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size
    }

    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }

    fn layer_latency(&self) -> usize {
        self.inner.layer_latency()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "ArchitectureSpec(blocks={}, dim={}, heads={:?}, labels={})",
            self.inner.num_blocks, self.inner.dim, self.inner.heads_per_block, self.inner.num_labels
        )
    }
}

#[pyclass(name = "Dataset", module = "cctshp", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a CIFAR binary file or directory; `split` is `train` or `validation`.
    #[staticmethod]
    #[pyo3(signature = (path, variant="cifar100", split="train"))]
    fn load(path: PathBuf, variant: &str, split: &str) -> PyResult<Self> {
        let variant: CifarVariant = variant.parse().map_err(err)?;
        let split = match split {
            "train" => Split::Train,
            "validation" | "val" | "test" => Split::Validation,
            other => return Err(CctShpError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(PyDataset {
            inner: data::load_cifar(path, variant, split).map_err(err)?,
        })
    }

    /// Keeps the given labels (renumbered in order), e.g. `"0..9"`.
    fn filter_labels(&self, labels: &str) -> PyResult<Self> {
        let keep = data::parse_label_subset(labels).map_err(err)?;
        Ok(PyDataset {
            inner: self.inner.filter_labels(&keep).map_err(err)?,
        })
    }

    fn downscale(&self, factor: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.downscale(factor).map_err(err)?,
        })
    }

    fn take_per_label(&self, per_label: usize) -> Self {
        PyDataset {
            inner: self.inner.take_per_label(per_label),
        }
    }

    fn normalized(&self) -> PyResult<Self> {
        Ok(PyDataset {
            inner: self.inner.normalized().map_err(err)?,
        })
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.inner.num_labels
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size
    }

    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.inner.image(i).to_vec())
    }

    fn label_counts(&self) -> Vec<usize> {
        self.inner.label_counts()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Writes a synthetic dataset in the CIFAR binary layout; returns the files.
#[pyfunction]
#[pyo3(signature = (out, variant="cifar10", train_per_label=20, val_per_label=10, noise=30.0, seed=0))]
fn write_synthetic(
    out: PathBuf,
    variant: &str,
    train_per_label: usize,
    val_per_label: usize,
    noise: f64,
    seed: u64,
) -> PyResult<Vec<PathBuf>> {
    let cfg = cct_shp::synthetic::SyntheticConfig {
        variant: variant.parse().map_err(err)?,
        train_per_label,
        val_per_label,
        noise,
        seed,
    };
    cct_shp::synthetic::write_synthetic_cifar(out, &cfg).map_err(err)
}

#[pyclass(name = "Model", module = "cctshp", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    spec: cct_shp::ArchitectureSpec,
    state: cct_shp::ModelState,
    history: Vec<trainer::EpochRecord>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (spec, seed=0))]
    fn new(spec: &PySpec, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            spec: spec.inner.clone(),
            state: cct_shp::build_model(&spec.inner, seed).map_err(err)?,
            history: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = trainer::load_checkpoint(path).map_err(err)?;
        Ok(PyModel {
            spec: ckpt.spec,
            state: ckpt.model,
            history: ckpt.history,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ckpt = Checkpoint::from_model(&self.spec, self.state.clone());
        ckpt.history = self.history.clone();
        trainer::save_checkpoint(&ckpt, path).map_err(err)
    }

    #[getter]
    fn spec(&self) -> PySpec {
        PySpec {
            inner: self.spec.clone(),
        }
    }

    fn fingerprint(&self) -> String {
        self.state.fingerprint()
    }

    fn num_parameters(&self) -> usize {
        self.state.num_parameters()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.state.tensors.iter().map(|t| t.name.clone()).collect()
    }

    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .state
            .get(name)
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(name.to_string()))?;
        Ok((t.shape.clone(), t.data.clone()))
    }

    /// Per-epoch records of every training run applied to this model.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.history)
    }

    /// Logits, one row per image.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        let logits = trainer::predict_logits(&self.state, &self.spec, &data.inner).map_err(err)?;
        Ok(rows(self.spec.num_labels, &logits))
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        trainer::evaluate_accuracy(&self.state, &self.spec, &data.inner).map_err(err)
    }

    /// Trains in place with AdamW. `schedule` is `cosine` or `linear:Q:DT`;
    /// `train_only` freezes every tensor outside the listed prefixes.
    #[pyo3(signature = (train, validation=None, epochs=10, batch_size=128, lr=6e-4, weight_decay=6e-2,
                        schedule="cosine", augment=true, strict=false, seed=0, train_only=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        train: &PyDataset,
        validation: Option<&PyDataset>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        schedule: &str,
        augment: bool,
        strict: bool,
        seed: u64,
        train_only: Option<Vec<String>>,
    ) -> PyResult<Vec<f64>> {
        let config = OptimizerConfig {
            epochs,
            batch_size,
            lr,
            weight_decay,
            schedule: schedule.parse::<Schedule>().map_err(err)?,
            ..OptimizerConfig::main_preset()
        };
        let options = TrainOptions {
            augment: if augment {
                AugmentConfig::default()
            } else {
                AugmentConfig::disabled()
            },
            strict,
            seed,
            eval_train: false,
        };
        let freeze = match train_only {
            Some(p) if !p.is_empty() => FreezeMask::AllExcept(p),
            _ => FreezeMask::Nothing,
        };
        let mut t = Trainer::new(self.state.clone(), &self.spec, config, &freeze, options).map_err(err)?;
        t.run(&train.inner, validation.map(|v| &v.inner)).map_err(err)?;
        let losses = t.history.iter().map(|r| r.loss).collect();
        self.state = t.model;
        self.history.extend(t.history);
        Ok(losses)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} parameters, {})",
            self.state.num_parameters(),
            &self.state.fingerprint()[..12]
        )
    }
}

fn matrix_dict<'py>(py: Python<'py>, m: &FieldMatrix) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("values", rows(m.size, &m.values))?;
    d.set_item("raw", rows(m.size, &m.raw))?;
    d.set_item("scale", m.scale)?;
    d.set_item("subject", to_py_json(py, &m.subject)?)?;
    Ok(d)
}

/// A probe classifier trained on the frozen prefix of a model up to one block.
#[pyclass(name = "BlockProbe", module = "cctshp")]
pub struct PyProbe {
    extractor: probe::Extractor,
    head: probe::ProbeHead,
    validation: data::Dataset,
    #[pyo3(get)]
    accuracy: f64,
}

#[pymethods]
impl PyProbe {
    /// `tap` is `post_attention` or `post_block`; `block` is 1-based.
    #[new]
    #[pyo3(signature = (model, block, train, validation, tap="post_attention", epochs=100, lr=1e-3,
                        batch_size=128, fc_bias=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &PyModel,
        block: usize,
        train: &PyDataset,
        validation: &PyDataset,
        tap: &str,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        fc_bias: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let tap: Tap = tap.parse().map_err(err)?;
        let (extractor, mut head) =
            probe::attach_probe_head(&model.state, &model.spec, ProbePoint::new(block, tap), seed, fc_bias)
                .map_err(err)?;
        let config = OptimizerConfig {
            epochs,
            lr,
            batch_size,
            ..OptimizerConfig::probe_preset()
        };
        let opts = ProbeTrainOptions { seed, strict: true };
        probe::train_probe_head(&extractor, &mut head, &train.inner, None, &config, opts).map_err(err)?;
        let accuracy = probe::probe_accuracy(&extractor, &head, &validation.inner).map_err(err)?;
        Ok(PyProbe {
            extractor,
            head,
            validation: validation.inner.clone(),
            accuracy,
        })
    }

    /// `(heads, head_size)` of the probed block.
    fn heads(&self) -> (usize, usize) {
        self.extractor.heads()
    }

    /// Field matrices with all heads but `h` silenced; every head when `h` is None.
    #[pyo3(signature = (h=None, silence_before_sp=false))]
    fn head_fields<'py>(
        &self,
        py: Python<'py>,
        h: Option<usize>,
        silence_before_sp: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let fp = self.field_probe(silence_before_sp)?;
        let mats = match h {
            Some(h) => vec![fp.head(h).map_err(err)?],
            None => fp.all_heads().map_err(err)?,
        };
        mats.iter().map(|m| matrix_dict(py, m)).collect()
    }

    /// Single-node matrices of head `h`, plus their max-normalized mean.
    #[pyo3(signature = (h, silence_before_sp=false))]
    fn node_fields<'py>(
        &self,
        py: Python<'py>,
        h: usize,
        silence_before_sp: bool,
    ) -> PyResult<(Vec<Bound<'py, PyDict>>, Bound<'py, PyDict>)> {
        let fp = self.field_probe(silence_before_sp)?;
        let nodes = fp.nodes_of_head(h).map_err(err)?;
        let hp = probe::hp_from_snp(&nodes).map_err(err)?;
        Ok((
            nodes.iter().map(|m| matrix_dict(py, m)).collect::<PyResult<_>>()?,
            matrix_dict(py, &hp)?,
        ))
    }

    /// Field matrix with nothing silenced.
    fn whole_fields<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        matrix_dict(py, &self.field_probe(false)?.whole().map_err(err)?)
    }
}

impl PyProbe {
    fn field_probe(&self, silence_before_sp: bool) -> PyResult<FieldProbe<'_>> {
        FieldProbe::new(
            &self.extractor,
            &self.head,
            &self.validation,
            FieldOptions { silence_before_sp },
        )
        .map_err(err)
    }
}

/// Boolean matrix of elements at or above `theta`.
#[pyfunction]
fn clip(values: Vec<Vec<f64>>, theta: f64) -> PyResult<Vec<Vec<bool>>> {
    let (n, flat) = square(&values)?;
    let b = cluster::clip_values(&flat, n, theta).map_err(err)?;
    Ok(b.bits.chunks(n.max(1)).map(<[bool]>::to_vec).collect())
}

fn report_of(values: &[Vec<f64>], theta: f64) -> PyResult<ClusterReport> {
    let (n, flat) = square(values)?;
    let b: ClippedMatrix = cluster::clip_values(&flat, n, theta).map_err(err)?;
    Ok(cluster::extract_clusters(&b))
}

/// Clips a normalized matrix and extracts its diagonal clusters.
#[pyfunction]
fn extract_clusters<'py>(py: Python<'py>, values: Vec<Vec<f64>>, theta: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(py, &report_of(&values, theta)?)
}

/// Per-block statistics from the normalized matrices of every head.
#[pyfunction]
#[pyo3(signature = (matrices, theta, attn_acc=f64::NAN, block=1))]
fn block_statistics<'py>(
    py: Python<'py>,
    matrices: Vec<Vec<Vec<f64>>>,
    theta: f64,
    attn_acc: f64,
    block: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let labels = matrices.first().map_or(0, Vec::len);
    let reports: Vec<ClusterReport> = matrices.iter().map(|m| report_of(m, theta)).collect::<PyResult<_>>()?;
    let row = cluster::block_statistics(&reports, labels, attn_acc, block).map_err(err)?;
    to_py_json(py, &row)
}

#[pyfunction]
fn noise_per_element(heads: usize, mean_noise: f64, labels: usize) -> f64 {
    cluster::noise_per_element(heads, mean_noise, labels)
}

#[pyfunction]
fn internal_noise(n_label: f64, cluster_size: f64, labels: usize) -> f64 {
    cluster::internal_noise(n_label, cluster_size, labels)
}

#[pyfunction]
fn signal_to_noise(n_label: f64, n_noise: f64, n_inter: f64) -> f64 {
    cluster::signal_to_noise(n_label, n_noise, n_inter)
}

fn members(fields: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<PredictionSet>> {
    fields
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let labels = rows.first().map_or(0, Vec::len);
            PredictionSet::new(format!("member{i}"), rows.concat(), labels).map_err(err)
        })
        .collect()
}

/// Argmax of the summed raw fields of every member (lowest index on ties).
#[pyfunction]
fn committee_decide(fields: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<usize>> {
    committee::committee_decide(&members(fields)?).map_err(err)
}

/// Fraction of inputs on which both members are right or both wrong.
#[pyfunction]
fn agreement(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, truth: Vec<usize>) -> PyResult<f64> {
    let ms = members(vec![a, b])?;
    committee::agreement(&ms[0], &ms[1], &truth).map_err(err)
}

#[pyfunction]
fn uncorrelated_baseline(p: f64) -> f64 {
    committee::uncorrelated_baseline(p)
}

#[pyfunction]
fn committee_report<'py>(
    py: Python<'py>,
    fields: Vec<Vec<Vec<f64>>>,
    truth: Vec<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(
        py,
        &committee::committee_report(&members(fields)?, &truth).map_err(err)?,
    )
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cct_shp::cli::run_from(std::iter::once("cctshp".to_string()).chain(args))
}

#[pymodule]
fn cctshp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CctShpError", m.py().get_type::<CctShpError>())?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyProbe>()?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(extract_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(block_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(noise_per_element, m)?)?;
    m.add_function(wrap_pyfunction!(internal_noise, m)?)?;
    m.add_function(wrap_pyfunction!(signal_to_noise, m)?)?;
    m.add_function(wrap_pyfunction!(committee_decide, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(uncorrelated_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(committee_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
