//! Python bindings for the growthmix library.

use growthmix::classification::{self, Assignment, PosteriorMatrix};
use growthmix::data::LongitudinalDataset;
use growthmix::fit::{self, FitOptions, Optimizer};
use growthmix::forest::{ForestConfig, TemplateModel};
use growthmix::growth::Frame;
use growthmix::inference::parameter_table;
use growthmix::io::{self, IngestOptions};
use growthmix::mixture::{natural_names, natural_vector, MixtureSpec, ModelKind};
use growthmix::montecarlo::{self, McOptions};
use growthmix::simulate::{self, MembershipRule};
use growthmix::stepwise;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn py_err(e: growthmix::Error) -> PyErr {
    match e {
        growthmix::Error::InvalidInput(_) | growthmix::Error::EmptyClass(_) | growthmix::Error::DegenerateClass { .. } => {
            PyValueError::new_err(e.to_string())
        }
        growthmix::Error::Io(_) | growthmix::Error::Csv(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

fn parse<T: DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

/// Longitudinal data: per individual an id, observation times, outcomes
/// and a covariate vector.
#[pyclass(name = "Dataset", module = "growthmix_py")]
#[derive(Clone)]
struct PyDataset {
    inner: LongitudinalDataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a long outcome CSV (id,time,y) and an optional wide covariate
    /// CSV (id, names...), standardizing the named columns.
    #[staticmethod]
    #[pyo3(signature = (outcomes, covariates=None, standardize=None))]
    fn from_csv(outcomes: &str, covariates: Option<&str>, standardize: Option<Vec<String>>) -> PyResult<Self> {
        let opts = IngestOptions {
            standardize: standardize.unwrap_or_default(),
        };
        let (inner, _) = io::ingest(outcomes.as_ref(), covariates.map(AsRef::as_ref), &opts).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (ids, times, outcomes, covariate_names=Vec::new(), covariates=None))]
    fn from_arrays(
        ids: Vec<String>,
        times: Vec<Vec<f64>>,
        outcomes: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        covariates: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Self> {
        let n = ids.len();
        if times.len() != n || outcomes.len() != n || covariates.as_ref().is_some_and(|c| c.len() != n) {
            return Err(PyValueError::new_err("every per-individual list must have one entry per id"));
        }
        let covariates = covariates.unwrap_or_else(|| vec![Vec::new(); n]);
        let individuals = ids
            .into_iter()
            .zip(times)
            .zip(outcomes)
            .zip(covariates)
            .map(|(((id, times), outcomes), covariates)| growthmix::data::Individual {
                id,
                times,
                outcomes,
                covariates,
            })
            .collect();
        let inner = LongitudinalDataset::new(covariate_names, individuals).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, outcomes: &str, covariates: &str) -> PyResult<()> {
        io::export(&self.inner, outcomes.as_ref(), covariates.as_ref(), None).map_err(py_err)
    }

    fn standardize(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.standardize(&names).map_err(py_err)
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.column(name).map_err(py_err)
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names.clone()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.individuals.iter().map(|i| i.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, covariates={:?})", self.inner.len(), self.inner.covariate_names)
    }
}

/// A fitted mixture with estimates in both frames.
#[pyclass(name = "FittedModel", module = "growthmix_py")]
struct PyFitted {
    inner: fit::FittedModel,
}

#[pymethods]
impl PyFitted {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged()
    }

    #[getter]
    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.status)
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    #[getter]
    fn attempts(&self) -> usize {
        self.inner.attempts
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.spec.classes
    }

    /// -2ll, AIC, BIC, parameter count and n.
    fn criteria<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.information_criteria())
    }

    /// Relative entropy of the posterior class probabilities (None for K=1).
    fn entropy(&self) -> Option<f64> {
        classification::entropy(&classification::posterior_matrix(&self.inner)).ok()
    }

    /// Parameter table in `frame` ("original" or "reparameterized").
    #[pyo3(signature = (frame="original"))]
    fn estimates<'py>(&self, py: Python<'py>, frame: &str) -> PyResult<Bound<'py, PyAny>> {
        let f: Frame = parse("frame", frame)?;
        to_py(py, &parameter_table(&self.inner, f))
    }

    /// Point estimates by name in `frame`.
    #[pyo3(signature = (frame="original"))]
    fn params(&self, frame: &str) -> PyResult<Vec<(String, f64)>> {
        let f: Frame = parse("frame", frame)?;
        let spec = &self.inner.spec;
        Ok(natural_names(spec).into_iter().zip(natural_vector(self.inner.params_in(f), spec)).collect())
    }

    fn responsibilities(&self) -> Vec<Vec<f64>> {
        let r = &self.inner.responsibilities;
        (0..r.nrows()).map(|i| r.row(i).iter().copied().collect()).collect()
    }

    /// Modal class (1-based) of each individual.
    #[pyo3(signature = (seed=0))]
    fn modal_classes(&self, seed: u64) -> Vec<usize> {
        classification::modal_assignment(&classification::posterior_matrix(&self.inner), seed).labels
    }

    fn __repr__(&self) -> String {
        format!(
            "FittedModel(kind={}, classes={}, loglik={:.4}, converged={})",
            self.inner.spec.kind,
            self.inner.spec.classes,
            self.inner.log_likelihood,
            self.inner.converged()
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_options(optimizer: &str, seed: u64, standard_errors: bool, max_attempts: usize, tolerance: Option<f64>) -> PyResult<FitOptions> {
    let optimizer: Optimizer = parse("optimizer", optimizer)?;
    let mut o = FitOptions {
        optimizer,
        seed,
        standard_errors,
        max_attempts,
        ..FitOptions::default()
    };
    if let Some(t) = tolerance {
        o.tolerance = t;
    }
    Ok(o)
}

/// Fits a mixture of bilinear-spline growth models.
#[pyfunction]
#[pyo3(signature = (data, kind="fmm", classes=2, gating=Vec::new(), expert=Vec::new(), frame="original",
    optimizer="em", seed=0, standard_errors=true, max_attempts=10, tolerance=None))]
#[allow(clippy::too_many_arguments)]
fn fit_model(
    py: Python<'_>,
    data: &PyDataset,
    kind: &str,
    classes: usize,
    gating: Vec<String>,
    expert: Vec<String>,
    frame: &str,
    optimizer: &str,
    seed: u64,
    standard_errors: bool,
    max_attempts: usize,
    tolerance: Option<f64>,
) -> PyResult<PyFitted> {
    let kind: ModelKind = parse("model kind", kind)?;
    let frame: Frame = parse("frame", frame)?;
    let spec = MixtureSpec::new(kind, classes).with_gating(gating).with_expert(expert).with_frame(frame);
    let opts = fit_options(optimizer, seed, standard_errors, max_attempts, tolerance)?;
    let inner = py
        .detach(|| fit::fit(&spec, &data.inner, None, &opts))
        .map_err(py_err)?;
    Ok(PyFitted { inner })
}

/// Covariate-free fits for K = 1..=kmax; returns (chosen K, rows).
#[pyfunction]
#[pyo3(signature = (data, kmax, seed=0, optimizer="em"))]
fn enumerate_classes<'py>(
    py: Python<'py>,
    data: &PyDataset,
    kmax: usize,
    seed: u64,
    optimizer: &str,
) -> PyResult<(usize, Bound<'py, PyAny>)> {
    let opts = fit_options(optimizer, seed, true, 10, None)?;
    let e = py.detach(|| fit::enumerate_classes(&data.inner, kmax, &opts)).map_err(py_err)?;
    let rows: Vec<Value> = e
        .entries
        .iter()
        .map(|en| {
            serde_json::json!({
                "classes": en.classes,
                "converged": en.fit.as_ref().is_some_and(|f| f.converged()),
                "criteria": en.criteria,
                "error": en.error,
            })
        })
        .collect();
    Ok((e.chosen, to_py(py, &rows)?))
}

/// Draws a dataset from grid condition `condition` (1..=108). Returns the
/// dataset, the 1-based true classes and the condition description.
#[pyfunction]
#[pyo3(signature = (condition, seed, n=None, membership="multinomial"))]
fn simulate_condition<'py>(
    py: Python<'py>,
    condition: usize,
    seed: u64,
    n: Option<usize>,
    membership: &str,
) -> PyResult<(PyDataset, Vec<usize>, Bound<'py, PyAny>)> {
    let mut c = simulate::condition(condition).map_err(py_err)?;
    c.membership = parse::<MembershipRule>("membership rule", membership)?;
    if let Some(n) = n {
        c.n = n;
    }
    let g = simulate::generate(&c, seed).map_err(py_err)?;
    let classes = g.memberships.iter().map(|m| m + 1).collect();
    Ok((PyDataset { inner: g.data }, classes, to_py(py, &c)?))
}

/// Draws a covariate-screening dataset (scenarios 1..=8, two noise
/// covariates). Returns the dataset and the 1-based true classes.
#[pyfunction]
#[pyo3(signature = (scenario, seed, n=500))]
fn simulate_scenario(scenario: u8, seed: u64, n: usize) -> PyResult<(PyDataset, Vec<usize>)> {
    let model = simulate::forest_scenario(scenario, n).map_err(py_err)?;
    let g = simulate::generate_from(&model, seed).map_err(py_err)?;
    let classes = g.memberships.iter().map(|m| m + 1).collect();
    Ok((PyDataset { inner: g.data }, classes))
}

#[pyfunction]
fn condition_grid(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &simulate::condition_grid())
}

/// Relative entropy of an n x K posterior probability matrix.
#[pyfunction]
fn entropy(probabilities: Vec<Vec<f64>>) -> PyResult<f64> {
    let post = PosteriorMatrix::from_rows(&probabilities).map_err(py_err)?;
    classification::entropy(&post).map_err(py_err)
}

fn assignment(labels: Vec<usize>, classes: Option<usize>) -> PyResult<Assignment> {
    let k = classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(1));
    Assignment::new(labels, k).map_err(py_err)
}

/// Agreement of 1-based labels with the truth under the best relabeling.
#[pyfunction]
#[pyo3(signature = (assigned, truth, classes=None))]
fn accuracy(assigned: Vec<usize>, truth: Vec<usize>, classes: Option<usize>) -> PyResult<f64> {
    let k = classes.or_else(|| assigned.iter().chain(&truth).copied().max());
    classification::accuracy(&assignment(assigned, k)?, &assignment(truth, k)?).map_err(py_err)
}

/// Cohen's kappa between two 1-based labelings.
#[pyfunction]
#[pyo3(signature = (a, b, classes=None))]
fn kappa<'py>(py: Python<'py>, a: Vec<usize>, b: Vec<usize>, classes: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let k = classes.or_else(|| a.iter().chain(&b).copied().max());
    let r = classification::kappa_agreement(&assignment(a, k)?, &assignment(b, k)?).map_err(py_err)?;
    to_py(py, &r)
}

/// Modal-assignment logistic regression of the fitted classes.
#[pyfunction]
#[pyo3(signature = (data, model, covariates, seed=0))]
fn three_step<'py>(
    py: Python<'py>,
    data: &PyDataset,
    model: &PyFitted,
    covariates: Vec<String>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = stepwise::three_step_fit(&data.inner, &model.inner, &covariates, seed).map_err(py_err)?;
    to_py(py, &r)
}

/// Gating regression with every within-class parameter frozen.
#[pyfunction]
#[pyo3(signature = (data, model, covariates, seed=0, optimizer="em"))]
fn two_step<'py>(
    py: Python<'py>,
    data: &PyDataset,
    model: &PyFitted,
    covariates: Vec<String>,
    seed: u64,
    optimizer: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = fit_options(optimizer, seed, true, 10, None)?;
    let (r, _) = py
        .detach(|| stepwise::two_step_fit(&data.inner, &model.inner, &covariates, &opts))
        .map_err(py_err)?;
    to_py(py, &r)
}

/// Monte Carlo study of one grid condition; returns the summary.
#[pyfunction]
#[pyo3(signature = (condition, replications=100, seed=20240101, threads=0, misspecified=false))]
fn run_condition<'py>(
    py: Python<'py>,
    condition: usize,
    replications: usize,
    seed: u64,
    threads: usize,
    misspecified: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let c = simulate::condition(condition).map_err(py_err)?;
    let opts = McOptions {
        replications,
        master_seed: seed,
        threads,
        misspecified,
        ..McOptions::default()
    };
    let run = py.detach(|| montecarlo::run_condition(&c, &opts)).map_err(py_err)?;
    to_py(py, &run.summary)
}

/// Forest permutation importance of `covariates` under a one-class template.
#[pyfunction]
#[pyo3(signature = (data, covariates, trees=128, seed=0, threads=0, min_leaf=50, max_depth=4))]
#[allow(clippy::too_many_arguments)]
fn variable_importance<'py>(
    py: Python<'py>,
    data: &PyDataset,
    covariates: Vec<String>,
    trees: usize,
    seed: u64,
    threads: usize,
    min_leaf: usize,
    max_depth: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config = ForestConfig {
        trees,
        seed,
        threads,
        min_leaf,
        max_depth,
        ..ForestConfig::default()
    };
    let template = TemplateModel::default();
    let r = py
        .detach(|| growthmix::forest::variable_importance(&template, &data.inner, &covariates, &config))
        .map_err(py_err)?;
    to_py(py, &r)
}

#[pymodule]
fn growthmix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitted>()?;
    m.add_function(wrap_pyfunction!(fit_model, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_classes, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_condition, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(condition_grid, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(three_step, m)?)?;
    m.add_function(wrap_pyfunction!(two_step, m)?)?;
    m.add_function(wrap_pyfunction!(run_condition, m)?)?;
    m.add_function(wrap_pyfunction!(variable_importance, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
