//! Multiple-importance-sampling weighting functions `α_nc(ω)`.
//!
//! Every kind satisfies `Σ_c α_nc(ω) = 1` at any point, which is what keeps
//! the combined estimator unbiased before self-normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, softmax_in_place, RealMatrix};
use crate::proposals::{Landmarks, ProposalSet};

/// Proposal log-densities below this at a point count as underflow.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightingKind {
    /// `q_c(ω) / Σ_c' q_c'(ω)`
    BalanceHeuristic,
    /// Balance term plus `q_c(ω)(r'_nc − Σ_j share_j(ω) r'_nj)`.
    CoupledOptimal,
    /// Balance term plus `β(r'_nc − mean_c r'_nc)`.
    DecoupledOptimal { beta: f64 },
}

impl Default for WeightingKind {
    fn default() -> Self {
        WeightingKind::DecoupledOptimal { beta: 1.0 }
    }
}

impl WeightingKind {
    pub fn validate(&self) -> Result<()> {
        if let WeightingKind::DecoupledOptimal { beta } = self {
            if !(beta.is_finite() && *beta >= 0.0) {
                return Err(Error::invalid(format!("β must be finite and non-negative, got {beta}")));
            }
        }
        Ok(())
    }

    /// Parses `balance`, `coupled` or `decoupled`, attaching `beta` to the latter.
    pub fn parse(name: &str, beta: f64) -> Result<Self> {
        let kind = match name {
            "balance" | "balance-heuristic" => WeightingKind::BalanceHeuristic,
            "coupled" | "coupled-optimal" => WeightingKind::CoupledOptimal,
            "decoupled" | "decoupled-optimal" => WeightingKind::DecoupledOptimal { beta },
            other => return Err(Error::invalid(format!("unknown weighting '{other}'"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingKind::BalanceHeuristic => "balance",
            WeightingKind::CoupledOptimal => "coupled",
            WeightingKind::DecoupledOptimal { .. } => "decoupled",
        }
    }
}

/// `r'_nc`: how strongly proposal `c` favours query `n`; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAffinity {
    pub r_prime: RealMatrix,
}

impl QueryAffinity {
    pub fn row(&self, n: usize) -> &[f64] {
        self.r_prime.row(n)
    }

    /// Every row uniform, `1/C`.
    pub fn uniform(n_queries: usize, count: usize) -> Self {
        Self {
            r_prime: RealMatrix::new(n_queries, count, vec![1.0 / count as f64; n_queries * count])
                .expect("finite"),
        }
    }

    pub fn permuted_columns(&self, perm: &[usize]) -> Self {
        let c = self.r_prime.cols();
        let mut data = Vec::with_capacity(self.r_prime.data().len());
        for row in self.r_prime.iter_rows() {
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Self {
            r_prime: RealMatrix::new(self.r_prime.rows(), c, data).expect("finite"),
        }
    }
}

/// `r'_nc = softmax_c(q_nᵀ q̃_c)`.
pub fn query_affinity(queries: &RealMatrix, landmarks: &Landmarks) -> Result<QueryAffinity> {
    if queries.cols() != landmarks.queries.cols() {
        return Err(Error::DimensionMismatch {
            expected: landmarks.queries.cols(),
            actual: queries.cols(),
        });
    }
    let count = landmarks.count();
    let mut data = Vec::with_capacity(queries.rows() * count);
    let mut row = vec![0.0; count];
    for q in queries.iter_rows() {
        for (r, l) in row.iter_mut().zip(landmarks.queries.iter_rows()) {
            *r = dot(q, l);
        }
        softmax_in_place(&mut row);
        data.extend_from_slice(&row);
    }
    Ok(QueryAffinity {
        r_prime: RealMatrix::new(queries.rows(), count, data)
            .map_err(|e| Error::Internal(e.to_string()))?,
    })
}

/// Proposal log-densities at one point and their normalized shares.
#[derive(Debug, Clone)]
pub(crate) struct PointDensities {
    pub log_q: Vec<f64>,
    pub shares: Vec<f64>,
}

impl PointDensities {
    pub fn at(set: &ProposalSet, omega: &[f64]) -> Result<Self> {
        let log_q: Vec<f64> = set.proposals().iter().map(|p| p.logpdf(omega)).collect();
        let max = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max.is_nan() || max < LOG_DENSITY_FLOOR {
            return Err(Error::DegeneratePoint { max_logpdf: max });
        }
        let mut shares: Vec<f64> = log_q.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = shares.iter().sum();
        shares.iter_mut().for_each(|s| *s /= total);
        Ok(Self { log_q, shares })
    }

    /// `α_nc` at this point, for the affinity row `r` of query `n` whose
    /// entries average to `r_mean`.
    pub fn alpha(&self, kind: WeightingKind, r: &[f64], r_mean: f64, c: usize) -> f64 {
        let balance = self.shares[c];
        match kind {
            WeightingKind::BalanceHeuristic => balance,
            WeightingKind::DecoupledOptimal { beta } => balance + beta * (r[c] - r_mean),
            WeightingKind::CoupledOptimal => {
                let weighted = dot(&self.shares, r);
                balance + self.log_q[c].exp() * (r[c] - weighted)
            }
        }
    }
}

/// `[α_n1(ω), …, α_nC(ω)]` at a single common point.
pub fn mis_weights(
    kind: WeightingKind,
    set: &ProposalSet,
    affinity: &QueryAffinity,
    n: usize,
    omega: &[f64],
) -> Result<Vec<f64>> {
    kind.validate()?;
    if n >= affinity.r_prime.rows() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: affinity.r_prime.rows(),
        });
    }
    if affinity.r_prime.cols() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            actual: affinity.r_prime.cols(),
        });
    }
    if omega.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            actual: omega.len(),
        });
    }
    if let Some(w) = omega.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("non-finite probe point component {w}")));
    }
    let point = PointDensities::at(set, omega)?;
    let r = affinity.row(n);
    let r_mean = row_mean(r);
    Ok((0..set.len()).map(|c| point.alpha(kind, r, r_mean, c)).collect())
}

pub(crate) fn row_mean(r: &[f64]) -> f64 {
    r.iter().sum::<f64>() / r.len() as f64
}
