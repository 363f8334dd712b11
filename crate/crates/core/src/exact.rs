//! Quadratic-cost softmax attention, the reference every estimator is measured against.

use crate::error::{Error, Result};
use crate::math::{axpy, dot, softmax_in_place, stable_softmax, ProbabilityVector, RealMatrix};

/// Queries `N×D`, keys `M×D` and values `M×D` for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    q: RealMatrix,
    k: RealMatrix,
    v: RealMatrix,
    prescaled: bool,
}

impl AttentionInputs {
    /// Inputs whose queries are used as given. `prescaled` records whether the
    /// `1/√D` factor has already been folded into `q`.
    pub fn new(q: RealMatrix, k: RealMatrix, v: RealMatrix, prescaled: bool) -> Result<Self> {
        let d = q.cols();
        if d == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        for (name, m) in [("keys", &k), ("values", &v)] {
            if m.cols() != d {
                return Err(Error::invalid(format!(
                    "{name} have {} columns, queries have {d}",
                    m.cols()
                )));
            }
        }
        if q.rows() == 0 || k.rows() == 0 {
            return Err(Error::invalid("need at least one query and one key"));
        }
        if k.rows() != v.rows() {
            return Err(Error::invalid(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        Ok(Self { q, k, v, prescaled })
    }

    /// Folds `1/√D` into the queries unless that has already happened.
    pub fn with_query_scaling(self) -> Self {
        if self.prescaled {
            return self;
        }
        let factor = 1.0 / (self.dim() as f64).sqrt();
        Self {
            q: self.q.scaled(factor),
            prescaled: true,
            ..self
        }
    }

    pub fn q(&self) -> &RealMatrix {
        &self.q
    }

    pub fn k(&self) -> &RealMatrix {
        &self.k
    }

    pub fn v(&self) -> &RealMatrix {
        &self.v
    }

    pub fn prescaled(&self) -> bool {
        self.prescaled
    }

    /// Number of queries `N`.
    pub fn n_queries(&self) -> usize {
        self.q.rows()
    }

    /// Number of keys `M`.
    pub fn n_keys(&self) -> usize {
        self.k.rows()
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    /// Same queries and keys, different values.
    pub fn with_values(&self, v: RealMatrix) -> Result<Self> {
        Self::new(self.q.clone(), self.k.clone(), v, self.prescaled)
    }

    pub(crate) fn check_query(&self, n: usize) -> Result<()> {
        if n >= self.n_queries() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.n_queries(),
            });
        }
        Ok(())
    }

    /// `q_nᵀ k_m` for every key.
    pub(crate) fn logits(&self, n: usize) -> Vec<f64> {
        let q = self.q.row(n);
        self.k.iter_rows().map(|k| dot(q, k)).collect()
    }

    /// `‖k_m‖² / 2` for every key.
    pub(crate) fn key_half_sq_norms(&self) -> Vec<f64> {
        self.k.iter_rows().map(|k| 0.5 * dot(k, k)).collect()
    }
}

/// Attention output `Y`, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub y: RealMatrix,
}

impl AttentionOutput {
    pub(crate) fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        RealMatrix::new(rows, cols, data)
            .map(|y| Self { y })
            .map_err(|e| Error::Internal(format!("non-finite attention output: {e}")))
    }
}

/// Softmax row for query `n`.
pub fn attention_probs(inputs: &AttentionInputs, n: usize) -> Result<ProbabilityVector> {
    inputs.check_query(n)?;
    stable_softmax(&inputs.logits(n)).map_err(|e| Error::Internal(e.to_string()))
}

/// Exact softmax attention; `O(NMD)` time and `O(M)` scratch space.
pub fn softmax_attention(inputs: &AttentionInputs) -> Result<AttentionOutput> {
    let (n_q, d) = (inputs.n_queries(), inputs.dim());
    let mut out = vec![0.0; n_q * d];
    let mut weights = vec![0.0; inputs.n_keys()];
    for n in 0..n_q {
        let q = inputs.q().row(n);
        for (w, k) in weights.iter_mut().zip(inputs.k().iter_rows()) {
            *w = dot(q, k);
        }
        softmax_in_place(&mut weights);
        let row = &mut out[n * d..(n + 1) * d];
        for (w, v) in weights.iter().zip(inputs.v().iter_rows()) {
            axpy(*w, v, row);
        }
    }
    AttentionOutput::from_rows(n_q, d, out)
}
