//! Segment landmarks and the proposal distributions built from them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::AttentionInputs;
use crate::math::{axpy, dot, gaussian_logpdf_unchecked, softmax_in_place, RealMatrix};
use crate::ra::{mixture_for, MixtureDensity};
use crate::rng::{categorical_draw, Draws};

/// Contiguous segment means of the queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    /// `q̃_c`, one row per segment.
    pub queries: RealMatrix,
    /// `k̃_c`, one row per segment.
    pub keys: RealMatrix,
    pub query_segments: Vec<Range<usize>>,
    pub key_segments: Vec<Range<usize>>,
}

impl Landmarks {
    pub fn count(&self) -> usize {
        self.queries.rows()
    }

    /// Reorders the landmarks so entry `i` is the old entry `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            queries: self.queries.permute_rows(perm),
            keys: self.keys.permute_rows(perm),
            query_segments: perm.iter().map(|&p| self.query_segments[p].clone()).collect(),
            key_segments: perm.iter().map(|&p| self.key_segments[p].clone()).collect(),
        }
    }
}

/// Splits `0..len` into `count` contiguous ranges; the first `len % count`
/// ranges hold one extra element.
pub fn segment_bounds(len: usize, count: usize) -> Vec<Range<usize>> {
    let base = len / count;
    let extra = len % count;
    let mut start = 0;
    (0..count)
        .map(|c| {
            let size = base + usize::from(c < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

fn segment_means(m: &RealMatrix, segments: &[Range<usize>]) -> RealMatrix {
    let d = m.cols();
    let mut data = vec![0.0; segments.len() * d];
    for (c, seg) in segments.iter().enumerate() {
        let row = &mut data[c * d..(c + 1) * d];
        for i in seg.clone() {
            axpy(1.0, m.row(i), row);
        }
        let inv = 1.0 / seg.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    RealMatrix::new(segments.len(), d, data).expect("means of finite rows are finite")
}

pub fn compute_landmarks(inputs: &AttentionInputs, count: usize) -> Result<Landmarks> {
    let limit = inputs.n_queries().min(inputs.n_keys());
    if count == 0 || count > limit {
        return Err(Error::invalid(format!(
            "landmark count {count} must lie in 1..={limit}"
        )));
    }
    let query_segments = segment_bounds(inputs.n_queries(), count);
    let key_segments = segment_bounds(inputs.n_keys(), count);
    Ok(Landmarks {
        queries: segment_means(inputs.q(), &query_segments),
        keys: segment_means(inputs.k(), &key_segments),
        query_segments,
        key_segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    /// Gaussian mixture over all keys centred on the query landmark.
    MixturePerSegment,
    /// `μ_c = q̃_c + Σ_m softmax_m(q̃_cᵀk_m) k_m`; `O(CM)`.
    GaussianFullKeys,
    /// `μ_c = q̃_c + k̃_c`.
    #[default]
    GaussianLocal,
    /// `μ_c = q̃_c + Σ_c' softmax_c'(k̃_cᵀk̃_c') k̃_c'`; `O(C²)`.
    GaussianKeyLandmarkAttn,
}

impl std::str::FromStr for ProposalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" | "mixture-per-segment" => Ok(Self::MixturePerSegment),
            "full-keys" | "gaussian-full-keys" => Ok(Self::GaussianFullKeys),
            "local" | "gaussian-local" => Ok(Self::GaussianLocal),
            "key-landmark-attn" | "gaussian-key-landmark-attn" => Ok(Self::GaussianKeyLandmarkAttn),
            other => Err(Error::invalid(format!("unknown proposal kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    /// `N(mean, I)`
    Gaussian { mean: Vec<f64> },
    Mixture(MixtureDensity),
}

impl Proposal {
    pub fn logpdf(&self, omega: &[f64]) -> f64 {
        match self {
            Proposal::Gaussian { mean } => gaussian_logpdf_unchecked(omega, mean),
            Proposal::Mixture(m) => m.logpdf_unchecked(omega),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Proposal::Gaussian { mean } => mean.clone(),
            Proposal::Mixture(m) => m.mean(),
        }
    }

    pub fn draw(&self, draws: &mut Draws) -> Vec<f64> {
        let center = match self {
            Proposal::Gaussian { mean } => mean.as_slice(),
            Proposal::Mixture(m) => m.means.row(categorical_draw(&m.weights, draws)),
        };
        center.iter().map(|c| c + draws.standard_normal()).collect()
    }

    fn dim(&self) -> usize {
        match self {
            Proposal::Gaussian { mean } => mean.len(),
            Proposal::Mixture(m) => m.dim(),
        }
    }
}

/// The `C` proposal distributions `q_c(ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    kind: ProposalKind,
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    /// Identity-covariance Gaussians with the given means, one per row.
    /// Tagged as [`ProposalKind::GaussianLocal`].
    pub fn from_means(means: &RealMatrix) -> Result<Self> {
        if means.rows() == 0 {
            return Err(Error::invalid("proposal set is empty"));
        }
        Ok(Self {
            kind: ProposalKind::GaussianLocal,
            proposals: means
                .iter_rows()
                .map(|m| Proposal::Gaussian { mean: m.to_vec() })
                .collect(),
        })
    }

    pub fn kind(&self) -> ProposalKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.proposals[0].dim()
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn get(&self, c: usize) -> Result<&Proposal> {
        self.proposals.get(c).ok_or(Error::IndexOutOfRange {
            index: c,
            len: self.proposals.len(),
        })
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            kind: self.kind,
            proposals: perm.iter().map(|&p| self.proposals[p].clone()).collect(),
        }
    }
}

pub fn build_proposals(landmarks: &Landmarks, keys: &RealMatrix, kind: ProposalKind) -> Result<ProposalSet> {
    let count = landmarks.count();
    let d = landmarks.queries.cols();
    if keys.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: keys.cols(),
        });
    }
    let shifted = |c: usize, offset: &[f64]| -> Proposal {
        let mean = landmarks
            .queries
            .row(c)
            .iter()
            .zip(offset)
            .map(|(a, b)| a + b)
            .collect();
        Proposal::Gaussian { mean }
    };
    let attend = |query: &[f64], pool: &RealMatrix| -> Vec<f64> {
        let mut w: Vec<f64> = pool.iter_rows().map(|k| dot(query, k)).collect();
        softmax_in_place(&mut w);
        let mut out = vec![0.0; d];
        for (wi, k) in w.iter().zip(pool.iter_rows()) {
            axpy(*wi, k, &mut out);
        }
        out
    };
    let proposals = match kind {
        ProposalKind::GaussianLocal => (0..count).map(|c| shifted(c, landmarks.keys.row(c))).collect(),
        ProposalKind::GaussianFullKeys => (0..count)
            .map(|c| shifted(c, &attend(landmarks.queries.row(c), keys)))
            .collect(),
        ProposalKind::GaussianKeyLandmarkAttn => (0..count)
            .map(|c| shifted(c, &attend(landmarks.keys.row(c), &landmarks.keys)))
            .collect(),
        ProposalKind::MixturePerSegment => (0..count)
            .map(|c| mixture_for(landmarks.queries.row(c), keys).map(Proposal::Mixture))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(ProposalSet { kind, proposals })
}

/// One draw `ω ~ q_c`.
pub fn proposal_draw(set: &ProposalSet, c: usize, draws: &mut Draws) -> Result<Vec<f64>> {
    Ok(set.get(c)?.draw(draws))
}

pub fn proposal_logpdf(set: &ProposalSet, c: usize, omega: &[f64]) -> Result<f64> {
    let p = set.get(c)?;
    if omega.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: omega.len(),
        });
    }
    Ok(p.logpdf(omega))
}
