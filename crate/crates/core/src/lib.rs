//! Softmax attention and three Monte Carlo estimators of it: random feature
//! attention ([`rfa`]), randomized attention ([`ra`]) and linear randomized
//! attention ([`lara`]).
//!
//! Inputs are expected with the `1/√D` temperature already folded into the
//! queries; see [`AttentionInputs::with_query_scaling`].

pub mod error;
pub mod exact;
pub mod features;
pub mod lara;
pub mod math;
pub mod proposals;
pub mod ra;
pub mod rfa;
pub mod rng;
pub mod weighting;

pub use error::{Error, Result};
pub use exact::{attention_probs, softmax_attention, AttentionInputs, AttentionOutput};
pub use features::{kernel_estimate, xi, FeatureMapKind, FeatureSample};
pub use lara::{lara_attention, lara_diagnostics, LaraConfig, LaraDiagnostics};
pub use math::{logsumexp, stable_softmax, ProbabilityVector, RealMatrix};
pub use proposals::{build_proposals, compute_landmarks, Landmarks, ProposalKind, ProposalSet};
pub use ra::{f_n, ra_attention, ra_density, Mode, RaConfig, RaVariant};
pub use rfa::{rfa_attention, RfaConfig};
pub use rng::RandomSource;
pub use weighting::{mis_weights, query_affinity, QueryAffinity, WeightingKind};
