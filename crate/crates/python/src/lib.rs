//! Python bindings for `cavprobe`.
//!
//! Structured results (protocol runs, curves, ground truth) cross the
//! boundary as JSON and come out as plain Python dicts and lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use cavprobe::data::{self, Attribute, EmbeddingFormat, EmbeddingRecord};
use cavprobe::debias::{self, MixMode, SweepTarget};
use cavprobe::probe::{self, LinearDecision, TrainerConfig};
use cavprobe::sampler::{self, ConceptSpec};
use cavprobe::synth::{self, SynthConfig};
use cavprobe::tcav::{self, ProtocolConfig};
use cavprobe::{selftest, stats, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::IoFailure { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| py_err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "Dataset", module = "cavprobe_py", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from parallel lists.
    #[new]
    #[pyo3(signature = (ids, vectors, genres, genders=None, languages=None))]
    fn new(
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        genres: Vec<String>,
        genders: Option<Vec<Option<String>>>,
        languages: Option<Vec<Option<String>>>,
    ) -> PyResult<Self> {
        let n = ids.len();
        if vectors.len() != n || genres.len() != n {
            return Err(PyValueError::new_err("ids, vectors and genres must have equal length"));
        }
        let genders = genders.unwrap_or_else(|| vec![None; n]);
        let languages = languages.unwrap_or_else(|| vec![None; n]);
        if genders.len() != n || languages.len() != n {
            return Err(PyValueError::new_err("attribute lists must match ids in length"));
        }
        let records = ids
            .into_iter()
            .zip(vectors)
            .zip(genres)
            .zip(genders.into_iter().zip(languages))
            .map(|(((id, vector), genre), (gender, language))| EmbeddingRecord {
                id,
                vector,
                genre,
                gender,
                language,
            })
            .collect();
        Ok(PyDataset {
            inner: data::Dataset::new(records).map_err(py_err)?,
        })
    }

    /// Reads embeddings plus metadata; returns `(dataset, dropped_ids)`.
    #[staticmethod]
    #[pyo3(signature = (path, meta, format=None))]
    fn ingest(path: &str, meta: &str, format: Option<&str>) -> PyResult<(PyDataset, Vec<String>)> {
        let path = std::path::Path::new(path);
        let format = match format {
            Some(f) => parse::<EmbeddingFormat>(f)?,
            None => EmbeddingFormat::from_path(path)
                .ok_or_else(|| PyValueError::new_err("cannot infer format; pass format="))?,
        };
        let ingested = data::ingest(path, format, std::path::Path::new(meta)).map_err(py_err)?;
        Ok((PyDataset { inner: ingested.dataset }, ingested.dropped))
    }

    /// Writes embeddings (format from the extension) and metadata.
    fn export(&self, path: &str, meta: &str) -> PyResult<()> {
        let path = std::path::Path::new(path);
        let format = EmbeddingFormat::from_path(path)
            .ok_or_else(|| PyValueError::new_err("cannot infer format from extension"))?;
        data::export_dataset(&self.inner, path, format, std::path::Path::new(meta)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.id.clone()).collect()
    }

    fn vector(&self, id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .get(id)
            .map(|r| r.vector.clone())
            .ok_or_else(|| py_err(Error::UnknownId(id.into())))
    }

    /// `{attribute: sorted values}`.
    fn vocabulary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, self.inner.attribute_vocabulary())
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

#[pyclass(name = "ConceptSplit", module = "cavprobe_py", frozen)]
struct PySplit {
    inner: sampler::ConceptSplit,
}

#[pymethods]
impl PySplit {
    #[getter]
    fn concept(&self) -> String {
        self.inner.concept.name.clone()
    }

    fn train_ids(&self) -> Vec<(String, bool)> {
        self.inner.train.iter().map(|e| (e.id.clone(), e.label)).collect()
    }

    fn test_ids(&self) -> Vec<(String, bool)> {
        self.inner.test.iter().map(|e| (e.id.clone(), e.label)).collect()
    }

    fn test_genres(&self) -> Vec<String> {
        self.inner.test_genres()
    }

    /// The same split with labels flipped, under a new concept name.
    fn mirrored(&self, name: &str) -> PySplit {
        PySplit {
            inner: self.inner.mirrored(name),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("ConceptSplit({})", self.inner)
    }
}

#[pyclass(name = "Cav", module = "cavprobe_py", frozen)]
struct PyCav {
    inner: probe::Cav,
}

#[pymethods]
impl PyCav {
    #[getter]
    fn concept(&self) -> String {
        self.inner.concept_name.clone()
    }

    #[getter]
    fn w(&self) -> Vec<f64> {
        self.inner.w.clone()
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    #[getter]
    fn train_accuracy(&self) -> f64 {
        self.inner.train_accuracy
    }

    #[getter]
    fn test_accuracy(&self) -> Option<f64> {
        self.inner.test_accuracy
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    /// `wᵀx + b`.
    fn project(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.project(&x).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| py_err(e.into()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyCav> {
        let inner = serde_json::from_str(text).map_err(|e| py_err(e.into()))?;
        Ok(PyCav { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Cav(concept={:?}, dim={}, b={}, train_accuracy={})",
            self.inner.concept_name, self.inner.dim, self.inner.b, self.inner.train_accuracy
        )
    }
}

fn trainer(l2_lambda: f64, max_iterations: usize, reliability_threshold: f64) -> TrainerConfig {
    TrainerConfig {
        l2_lambda,
        max_iterations,
        reliability_threshold,
        ..TrainerConfig::default()
    }
}

/// Balanced stratified split for `concept` (`attribute=value`).
#[pyfunction]
#[pyo3(signature = (dataset, concept, seed=42, cell_cap=50))]
fn build_split(dataset: &PyDataset, concept: &str, seed: u64, cell_cap: usize) -> PyResult<PySplit> {
    let spec = parse::<ConceptSpec>(concept)?.with_seed(seed).with_cell_cap(cell_cap);
    Ok(PySplit {
        inner: sampler::build_split(&dataset.inner, &spec).map_err(py_err)?,
    })
}

/// Fits a CAV on explicit vectors and boolean labels.
#[pyfunction]
#[pyo3(signature = (vectors, labels, name="concept", l2_lambda=1.0, max_iterations=1000))]
fn fit(vectors: Vec<Vec<f64>>, labels: Vec<bool>, name: &str, l2_lambda: f64, max_iterations: usize) -> PyResult<PyCav> {
    if vectors.len() != labels.len() {
        return Err(PyValueError::new_err("vectors and labels differ in length"));
    }
    let samples: Vec<(Vec<f64>, bool)> = vectors.into_iter().zip(labels).collect();
    let config = trainer(l2_lambda, max_iterations, 0.65);
    Ok(PyCav {
        inner: probe::fit(&samples, &config, name).map_err(py_err)?,
    })
}

/// Fits a CAV on the training side of `split`; test accuracy is attached.
#[pyfunction]
#[pyo3(signature = (dataset, split, l2_lambda=1.0))]
fn fit_split(dataset: &PyDataset, split: &PySplit, l2_lambda: f64) -> PyResult<PyCav> {
    let config = trainer(l2_lambda, 1000, 0.65);
    Ok(PyCav {
        inner: tcav::fit_split(&dataset.inner, &split.inner, &config).map_err(py_err)?,
    })
}

/// Fraction of `vectors` with strictly positive projection.
#[pyfunction]
fn tcav_score(cav: &PyCav, vectors: Vec<Vec<f64>>) -> PyResult<f64> {
    tcav::tcav_score(&cav.inner, &vectors).map_err(py_err)
}

/// Runs the replicate protocol; returns the per-genre results as dicts.
#[pyfunction]
#[pyo3(signature = (dataset, split, genres=None, replicates=500, fraction=0.25, alpha=0.05, family_size=None))]
#[allow(clippy::too_many_arguments)]
fn run_protocol<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    split: &PySplit,
    genres: Option<Vec<String>>,
    replicates: usize,
    fraction: f64,
    alpha: f64,
    family_size: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let genres = genres.unwrap_or_else(|| split.inner.test_genres());
    let m = family_size.unwrap_or(genres.len());
    let config = ProtocolConfig {
        replicates,
        fraction,
        alpha,
        ..ProtocolConfig::default()
    };
    let run = py
        .detach(|| tcav::run_protocol(&dataset.inner, &split.inner, &genres, &config, m))
        .map_err(py_err)?;
    json_to_py(py, &run)
}

#[pyfunction]
fn student_t_cdf(x: f64, df: u64) -> f64 {
    stats::student_t_cdf(x, df)
}

#[pyfunction]
fn student_t_quantile(p: f64, df: u64) -> f64 {
    stats::student_t_quantile(p, df)
}

/// Two-sided one-sample t-test against `mu0`.
#[pyfunction]
#[pyo3(signature = (scores, mu0=0.5))]
fn one_sample_t_test<'py>(py: Python<'py>, scores: Vec<f64>, mu0: f64) -> PyResult<Bound<'py, PyAny>> {
    let outcome = stats::one_sample_t_test(&scores, mu0).map_err(py_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("n", outcome.n)?;
    dict.set_item("mean", outcome.mean)?;
    dict.set_item("std", outcome.std)?;
    dict.set_item("t", outcome.t_statistic)?;
    dict.set_item("df", outcome.degrees_of_freedom)?;
    dict.set_item("p", outcome.p_two_sided)?;
    dict.set_item("degenerate", outcome.degenerate)?;
    Ok(dict.into_any())
}

#[pyfunction]
fn bonferroni(p_raw: f64, m: usize) -> PyResult<f64> {
    if m == 0 {
        return Err(PyValueError::new_err("m must be positive"));
    }
    Ok(stats::bonferroni(p_raw, m))
}

#[pyfunction]
#[pyo3(signature = (scores, alpha=0.05, m=1))]
fn corrected_ci(scores: Vec<f64>, alpha: f64, m: usize) -> PyResult<(f64, f64)> {
    stats::corrected_ci(&scores, alpha, m).map_err(py_err)
}

/// `(w, b)` of `(1 − λ)·base ± λ·adjustment`.
#[pyfunction]
#[pyo3(signature = (base, adjustment, lam, mode="add", normalize=false))]
fn adjust(base: &PyCav, adjustment: &PyCav, lam: f64, mode: &str, normalize: bool) -> PyResult<(Vec<f64>, f64)> {
    let mode = parse::<MixMode>(mode)?;
    let a = debias::adjust_with(&base.inner, &adjustment.inner, lam, mode, normalize).map_err(py_err)?;
    Ok((a.w_adj, a.b_adj))
}

/// λ-sweep over a pool of record ids; returns the curve as a dict.
#[pyfunction]
#[pyo3(signature = (base, adjustment, dataset, pool_ids, lambdas, mode="add", track="gender=male", top_fraction=0.5))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    base: &PyCav,
    adjustment: &PyCav,
    dataset: &PyDataset,
    pool_ids: Vec<String>,
    lambdas: Vec<f64>,
    mode: &str,
    track: &str,
    top_fraction: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = parse::<MixMode>(mode)?;
    let (attr, value) = track
        .split_once('=')
        .ok_or_else(|| PyValueError::new_err("track must be attribute=value"))?;
    let attribute = parse::<Attribute>(attr)?;
    let pool = pool_ids
        .iter()
        .map(|id| dataset.inner.get(id).ok_or_else(|| py_err(Error::UnknownId(id.clone()))))
        .collect::<PyResult<Vec<_>>>()?;
    let target = SweepTarget {
        attribute,
        value,
        top_fraction,
    };
    let curve = debias::sweep(&base.inner, &adjustment.inner, mode, &pool, &dataset.inner, &lambdas, &target, false)
        .map_err(py_err)?;
    json_to_py(py, &curve)
}

/// Generates a synthetic world; `config` is a JSON string (defaults when omitted).
/// Returns `(dataset, ground_truth_dict)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synth_generate<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let config: SynthConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| py_err(e.into()))?,
        None => SynthConfig::default(),
    };
    let (ds, truth) = synth::generate(&config).map_err(py_err)?;
    Ok((PyDataset { inner: ds }, json_to_py(py, &truth)?))
}

/// `1 − |wᵀd| / ‖w‖` against a ground-truth direction.
#[pyfunction]
fn recovery_error(cav: &PyCav, direction: Vec<f64>) -> PyResult<f64> {
    let truth = synth::GroundTruth {
        concept_directions: [("c".to_string(), direction)].into_iter().collect(),
        genre_offsets: Default::default(),
        plants: Vec::new(),
        plant_mode: Default::default(),
        beta: 0.0,
        noise_sigma: 1.0,
    };
    synth::recovery_error(&cav.inner, &truth, "c").map_err(py_err)
}

/// Runs the synthetic self-check; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (seed=42, replicates=100))]
fn run_selftest<'py>(py: Python<'py>, seed: u64, replicates: usize) -> PyResult<Bound<'py, PyAny>> {
    let cfg = selftest::SelftestConfig {
        seed,
        replicates,
        ..selftest::SelftestConfig::default()
    };
    let report = py.detach(|| selftest::run(&cfg, false)).map_err(py_err)?;
    json_to_py(py, &report)
}

#[pymodule]
fn cavprobe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyCav>()?;
    m.add_function(wrap_pyfunction!(build_split, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_split, m)?)?;
    m.add_function(wrap_pyfunction!(tcav_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(one_sample_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni, m)?)?;
    m.add_function(wrap_pyfunction!(corrected_ci, m)?)?;
    m.add_function(wrap_pyfunction!(adjust, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
