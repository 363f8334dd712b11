//! Python bindings: exact softmax attention and its RFA, RA and LARA estimators.

use lara_core::{
    AttentionInputs, Error, FeatureMapKind, LaraConfig, Mode, ProposalKind, RaConfig, RaVariant, RandomSource,
    RealMatrix, RfaConfig, WeightingKind,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

create_exception!(lara_attention, NumericalError, PyArithmeticError);

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<RealMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    let n = rows.len();
    RealMatrix::new(n, cols, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn nested(m: &RealMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn source(rng: Option<PyRef<'_, PyRandomSource>>) -> RandomSource {
    rng.map_or_else(|| RandomSource::new(0), |r| r.inner)
}

/// Splittable seed and stream pair that drives every estimator.
#[pyclass(name = "RandomSource", frozen)]
struct PyRandomSource {
    inner: RandomSource,
}

#[pymethods]
impl PyRandomSource {
    #[new]
    #[pyo3(signature = (seed, stream = 0))]
    fn new(seed: u64, stream: u64) -> Self {
        Self {
            inner: RandomSource::with_stream(seed, stream),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn stream(&self) -> u64 {
        self.inner.stream
    }

    fn split(&self, index: u64) -> Self {
        Self {
            inner: self.inner.split(index),
        }
    }

    fn split_named(&self, label: &str) -> Self {
        Self {
            inner: self.inner.split_named(label),
        }
    }

    fn substream(&self, index: u64) -> Self {
        Self {
            inner: self.inner.substream(index),
        }
    }

    fn __repr__(&self) -> String {
        format!("RandomSource(seed={}, stream={})", self.inner.seed, self.inner.stream)
    }
}

/// Queries, keys and values; `1/sqrt(D)` is folded into the queries on
/// construction unless `prescaled` is set.
#[pyclass(name = "AttentionInputs", frozen)]
struct PyAttentionInputs {
    inner: AttentionInputs,
}

#[pymethods]
impl PyAttentionInputs {
    #[new]
    #[pyo3(signature = (q, k, v, prescaled = false))]
    fn new(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, prescaled: bool) -> PyResult<Self> {
        let inner = AttentionInputs::new(matrix(q, "q")?, matrix(k, "k")?, matrix(v, "v")?, prescaled)
            .map_err(to_py)?
            .with_query_scaling();
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.q().rows()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.k().rows()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.q().cols()
    }

    fn __repr__(&self) -> String {
        format!("AttentionInputs(n={}, m={}, d={})", self.n(), self.m(), self.d())
    }
}

/// Exact softmax attention.
#[pyfunction]
fn softmax_attention(inputs: &PyAttentionInputs) -> PyResult<Vec<Vec<f64>>> {
    lara_core::softmax_attention(&inputs.inner).map(|o| nested(&o.y)).map_err(to_py)
}

/// Random feature attention with `samples` shared draws.
#[pyfunction]
#[pyo3(signature = (inputs, samples = 16, feature_map = "positive", rng = None))]
fn rfa_attention(
    inputs: &PyAttentionInputs,
    samples: usize,
    feature_map: &str,
    rng: Option<PyRef<'_, PyRandomSource>>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = RfaConfig {
        kind: parse::<FeatureMapKind>(feature_map)?,
        ..RfaConfig::new(samples, source(rng))
    };
    lara_core::rfa_attention(&inputs.inner, &cfg).map(|o| nested(&o.y)).map_err(to_py)
}

/// Randomized attention; unbiased unless `biased` is set.
#[pyfunction]
#[pyo3(signature = (inputs, samples = 1, biased = false, mode = "train", rng = None))]
fn ra_attention(
    inputs: &PyAttentionInputs,
    samples: usize,
    biased: bool,
    mode: &str,
    rng: Option<PyRef<'_, PyRandomSource>>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = RaConfig {
        samples,
        variant: if biased { RaVariant::Biased } else { RaVariant::Unbiased },
        mode: parse::<Mode>(mode)?,
        ..RaConfig::new(source(rng))
    };
    lara_core::ra_attention(&inputs.inner, &cfg).map(|o| nested(&o.y)).map_err(to_py)
}

/// Linear randomized attention over `proposals` shared proposals.
#[pyfunction]
#[pyo3(signature = (
    inputs,
    proposals = 16,
    proposal_kind = "local",
    weighting = "decoupled",
    beta = 1.0,
    mode = "train",
    rng = None,
))]
#[allow(clippy::too_many_arguments)]
fn lara_attention(
    inputs: &PyAttentionInputs,
    proposals: usize,
    proposal_kind: &str,
    weighting: &str,
    beta: f64,
    mode: &str,
    rng: Option<PyRef<'_, PyRandomSource>>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = LaraConfig {
        proposal_kind: parse::<ProposalKind>(proposal_kind)?,
        weighting: WeightingKind::parse(weighting, beta).map_err(to_py)?,
        mode: parse::<Mode>(mode)?,
        ..LaraConfig::new(proposals, source(rng))
    };
    lara_core::lara_attention(&inputs.inner, &cfg).map(|o| nested(&o.y)).map_err(to_py)
}

/// Monte Carlo estimate of `exp(x . y)` from `samples` random features.
#[pyfunction]
#[pyo3(signature = (x, y, samples, feature_map = "positive", rng = None))]
fn kernel_estimate(
    x: Vec<f64>,
    y: Vec<f64>,
    samples: usize,
    feature_map: &str,
    rng: Option<PyRef<'_, PyRandomSource>>,
) -> PyResult<f64> {
    lara_core::kernel_estimate(parse::<FeatureMapKind>(feature_map)?, &x, &y, samples, &source(rng)).map_err(to_py)
}

#[pymodule(name = "lara_attention")]
fn lara_attention_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyRandomSource>()?;
    m.add_class::<PyAttentionInputs>()?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(rfa_attention, m)?)?;
    m.add_function(wrap_pyfunction!(ra_attention, m)?)?;
    m.add_function(wrap_pyfunction!(lara_attention, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_estimate, m)?)?;
    Ok(())
}
