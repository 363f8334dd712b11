//! Uniform entry point over the attention estimators.

use std::fmt;
use std::str::FromStr;

use lara_core::lara::{lara_attention, LaraConfig};
use lara_core::{
    ra_attention, rfa_attention, softmax_attention, AttentionInputs, AttentionOutput, FeatureMapKind,
    Mode, ProposalKind, RaConfig, RaVariant, RandomSource, RfaConfig, WeightingKind,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Softmax,
    Rfa,
    Ra,
    RaBiased,
    Lara,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Softmax,
        Method::Rfa,
        Method::Ra,
        Method::RaBiased,
        Method::Lara,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Rfa => "rfa",
            Method::Ra => "ra",
            Method::RaBiased => "ra-biased",
            Method::Lara => "lara",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" | "exact" => Ok(Method::Softmax),
            "rfa" => Ok(Method::Rfa),
            "ra" => Ok(Method::Ra),
            "ra-biased" => Ok(Method::RaBiased),
            "lara" => Ok(Method::Lara),
            other => Err(HarnessError::invalid(format!(
                "unknown method '{other}' (expected softmax, rfa, ra, ra-biased or lara)"
            ))),
        }
    }
}

/// Estimator options that are not the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub feature_map: FeatureMapKind,
    pub proposal_kind: ProposalKind,
    pub weighting: WeightingKind,
    pub mode: Mode,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            feature_map: FeatureMapKind::PositiveScalar,
            proposal_kind: ProposalKind::default(),
            weighting: WeightingKind::default(),
            mode: Mode::Train,
        }
    }
}

impl MethodSettings {
    /// Compact description of the settings that affect `method`.
    pub fn describe(&self, method: Method, samples: usize) -> String {
        let mode = match self.mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        };
        match method {
            Method::Softmax => "exact".to_string(),
            Method::Rfa => format!("S={samples};map={:?}", self.feature_map),
            Method::Ra => format!("S={samples};mode=train"),
            Method::RaBiased => format!("S={samples};mode={mode}"),
            Method::Lara => {
                let beta = match self.weighting {
                    WeightingKind::DecoupledOptimal { beta } => format!(";beta={beta}"),
                    _ => String::new(),
                };
                format!(
                    "C={samples};proposal={:?};weighting={}{beta};mode={mode}",
                    self.proposal_kind,
                    self.weighting.name()
                )
            }
        }
    }
}

/// Runs `method` with `samples` draws (proposals for LARA).
pub fn run_method(
    method: Method,
    inputs: &AttentionInputs,
    samples: usize,
    settings: &MethodSettings,
    rng: RandomSource,
) -> Result<AttentionOutput> {
    let out = match method {
        Method::Softmax => softmax_attention(inputs)?,
        Method::Rfa => rfa_attention(
            inputs,
            &RfaConfig {
                samples,
                kind: settings.feature_map,
                rng,
            },
        )?,
        Method::Ra | Method::RaBiased => {
            let (variant, mode) = match method {
                Method::Ra => (RaVariant::Unbiased, Mode::Train),
                _ => (RaVariant::Biased, settings.mode),
            };
            ra_attention(
                inputs,
                &RaConfig {
                    samples,
                    variant,
                    mode,
                    rng,
                },
            )?
        }
        Method::Lara => lara_attention(
            inputs,
            &LaraConfig {
                proposals: samples,
                proposal_kind: settings.proposal_kind,
                weighting: settings.weighting,
                mode: settings.mode,
                kind: FeatureMapKind::PositiveScalar,
                rng,
            },
        )?,
    };
    Ok(out)
}

/// Comma-separated list parser shared by the CLI flags.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| HarnessError::invalid(format!("'{p}': {e}"))))
        .collect()
}
