//! Randomized feature maps `ξ(x, ω)` whose inner products estimate the
//! exponential kernel `exp(xᵀy)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, sq_norm};
use crate::rng::{Draws, RandomSource};

/// Largest exponent passed to `exp` before the map reports an overflow.
pub const EXPONENT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMapKind {
    /// `exp(ωᵀx − ‖x‖²/2)`
    #[default]
    PositiveScalar,
    /// `exp(−‖x‖²/2) / √2 · [exp(ωᵀx), exp(−ωᵀx)]`
    HyperbolicPair,
    /// `exp(‖x‖²/2) · [sin(ωᵀx), cos(ωᵀx)]`
    TrigPair,
    /// `√2 · exp(‖x‖²/2) · cos(ωᵀx + b)`, `b ~ Uniform(0, 2π)`
    ShiftedCosine,
}

impl FeatureMapKind {
    pub const ALL: [FeatureMapKind; 4] = [
        FeatureMapKind::PositiveScalar,
        FeatureMapKind::HyperbolicPair,
        FeatureMapKind::TrigPair,
        FeatureMapKind::ShiftedCosine,
    ];

    /// Output length `l` of the map.
    pub fn arity(self) -> usize {
        match self {
            FeatureMapKind::PositiveScalar | FeatureMapKind::ShiftedCosine => 1,
            FeatureMapKind::HyperbolicPair | FeatureMapKind::TrigPair => 2,
        }
    }

    /// Whether every output is strictly positive, which the density-based
    /// estimators require.
    pub fn is_positive(self) -> bool {
        matches!(
            self,
            FeatureMapKind::PositiveScalar | FeatureMapKind::HyperbolicPair
        )
    }
}

impl std::str::FromStr for FeatureMapKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "positive-scalar" => Ok(Self::PositiveScalar),
            "hyperbolic" | "hyperbolic-pair" => Ok(Self::HyperbolicPair),
            "trig" | "trig-pair" => Ok(Self::TrigPair),
            "cosine" | "shifted-cosine" => Ok(Self::ShiftedCosine),
            other => Err(Error::invalid(format!("unknown feature map '{other}'"))),
        }
    }
}

/// One random draw `ω` (and the phase `b` for [`FeatureMapKind::ShiftedCosine`]).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub omega: Vec<f64>,
    pub shift: Option<f64>,
}

impl FeatureSample {
    pub fn new(omega: Vec<f64>) -> Self {
        Self { omega, shift: None }
    }

    pub fn with_shift(omega: Vec<f64>, shift: f64) -> Self {
        Self {
            omega,
            shift: Some(shift),
        }
    }

    /// `ω ~ N(0, I_dim)`, plus `b ~ Uniform(0, 2π)` when the kind needs it.
    pub fn draw(kind: FeatureMapKind, dim: usize, draws: &mut Draws) -> Self {
        let mut omega = vec![0.0; dim];
        draws.fill_standard_normal(&mut omega);
        let shift = (kind == FeatureMapKind::ShiftedCosine).then(|| 2.0 * PI * draws.uniform());
        Self { omega, shift }
    }

    fn shift_or_zero(&self) -> f64 {
        self.shift.unwrap_or(0.0)
    }
}

fn check_dims(x: &[f64], sample: &FeatureSample) -> Result<()> {
    if x.len() != sample.omega.len() {
        return Err(Error::DimensionMismatch {
            expected: sample.omega.len(),
            actual: x.len(),
        });
    }
    Ok(())
}

fn guarded_exp(exponent: f64) -> Result<f64> {
    if exponent > EXPONENT_LIMIT {
        return Err(Error::Overflow {
            exponent,
            limit: EXPONENT_LIMIT,
        });
    }
    Ok(exponent.exp())
}

/// Evaluates `ξ(x, ω)`; the result has length `kind.arity()`.
pub fn xi(kind: FeatureMapKind, x: &[f64], sample: &FeatureSample) -> Result<Vec<f64>> {
    check_dims(x, sample)?;
    let proj = dot(&sample.omega, x);
    let half_sq = 0.5 * sq_norm(x);
    match kind {
        FeatureMapKind::PositiveScalar => Ok(vec![guarded_exp(proj - half_sq)?]),
        FeatureMapKind::HyperbolicPair => Ok(vec![
            FRAC_1_SQRT_2 * guarded_exp(proj - half_sq)?,
            FRAC_1_SQRT_2 * guarded_exp(-proj - half_sq)?,
        ]),
        FeatureMapKind::TrigPair => {
            let scale = guarded_exp(half_sq)?;
            Ok(vec![scale * proj.sin(), scale * proj.cos()])
        }
        FeatureMapKind::ShiftedCosine => {
            let scale = guarded_exp(half_sq)?;
            Ok(vec![SQRT_2 * scale * (proj + sample.shift_or_zero()).cos()])
        }
    }
}

/// `ωᵀx − ‖x‖²/2`, the logarithm of the positive scalar map.
pub fn log_xi_positive(x: &[f64], sample: &FeatureSample) -> Result<f64> {
    check_dims(x, sample)?;
    Ok(dot(&sample.omega, x) - 0.5 * sq_norm(x))
}

/// A feature value stored as `sign · exp(log_abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SignedLog {
    pub log_abs: f64,
    pub sign: f64,
}

impl SignedLog {
    fn positive(log_abs: f64) -> Self {
        Self { log_abs, sign: 1.0 }
    }

    fn of(value: f64, log_scale: f64) -> Self {
        if value == 0.0 {
            Self {
                log_abs: f64::NEG_INFINITY,
                sign: 0.0,
            }
        } else {
            Self {
                log_abs: log_scale + value.abs().ln(),
                sign: value.signum(),
            }
        }
    }
}

/// Log-magnitude form of `ξ(x, ω)`, written into `out[..arity]`.
/// `half_sq` must equal `‖x‖²/2`.
pub(crate) fn signed_log_features(
    kind: FeatureMapKind,
    x: &[f64],
    half_sq: f64,
    sample: &FeatureSample,
    out: &mut [SignedLog; 2],
) {
    let proj = dot(&sample.omega, x);
    match kind {
        FeatureMapKind::PositiveScalar => out[0] = SignedLog::positive(proj - half_sq),
        FeatureMapKind::HyperbolicPair => {
            let c = FRAC_1_SQRT_2.ln() - half_sq;
            out[0] = SignedLog::positive(c + proj);
            out[1] = SignedLog::positive(c - proj);
        }
        FeatureMapKind::TrigPair => {
            out[0] = SignedLog::of(proj.sin(), half_sq);
            out[1] = SignedLog::of(proj.cos(), half_sq);
        }
        FeatureMapKind::ShiftedCosine => {
            out[0] = SignedLog::of(SQRT_2 * (proj + sample.shift_or_zero()).cos(), half_sq);
        }
    }
}

/// Sample mean and its estimated standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// `(1/S) Σ_s ξ(x, ω_s)ᵀ ξ(y, ω_s)` with fresh draws from `rng`.
pub fn kernel_estimate(
    kind: FeatureMapKind,
    x: &[f64],
    y: &[f64],
    samples: usize,
    rng: &RandomSource,
) -> Result<f64> {
    kernel_estimate_with_error(kind, x, y, samples, rng).map(|e| e.mean)
}

/// [`kernel_estimate`] together with the standard error of the per-sample products.
pub fn kernel_estimate_with_error(
    kind: FeatureMapKind,
    x: &[f64],
    y: &[f64],
    samples: usize,
    rng: &RandomSource,
) -> Result<KernelEstimate> {
    if samples == 0 {
        return Err(Error::invalid("kernel estimate needs at least one sample"));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let mut draws = rng.draws();
    let dim = x.len();
    // Welford accumulation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for s in 0..samples {
        let sample = FeatureSample::draw(kind, dim, &mut draws);
        let fx = xi(kind, x, &sample)?;
        let fy = xi(kind, y, &sample)?;
        let value = dot(&fx, &fy);
        let delta = value - mean;
        mean += delta / (s + 1) as f64;
        m2 += delta * (value - mean);
    }
    let std_err = if samples > 1 {
        (m2 / (samples - 1) as f64 / samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(KernelEstimate { mean, std_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(omega: &[f64]) -> FeatureSample {
        FeatureSample::new(omega.to_vec())
    }

    #[test]
    fn arity_matches_kind() {
        for kind in FeatureMapKind::ALL {
            let s = FeatureSample::with_shift(vec![0.1, 0.2], 0.3);
            assert_eq!(xi(kind, &[0.5, -0.5], &s).unwrap().len(), kind.arity());
        }
    }

    #[test]
    fn positive_map_examples() {
        let s = sample(&[1.5, -2.0, 0.3]);
        assert_eq!(
            xi(FeatureMapKind::PositiveScalar, &[0.0; 3], &s).unwrap(),
            vec![1.0]
        );
        let x = [0.3, 0.4, 1.2];
        let v = xi(FeatureMapKind::PositiveScalar, &x, &sample(&[0.0; 3])).unwrap()[0];
        assert!((v - (-0.5 * sq_norm(&x)).exp()).abs() < 1e-15);
    }

    #[test]
    fn hyperbolic_at_origin() {
        let v = xi(FeatureMapKind::HyperbolicPair, &[0.0, 0.0], &sample(&[3.0, 1.0])).unwrap();
        assert!((v[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((v[1] - FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn log_xi_examples() {
        let x = [0.7, -0.2];
        assert_eq!(log_xi_positive(&[0.0, 0.0], &sample(&[1.0, 2.0])).unwrap(), 0.0);
        let v = log_xi_positive(&x, &sample(&x)).unwrap();
        assert!((v - 0.5 * sq_norm(&x)).abs() < 1e-15);

        let s = sample(&[1.1, -0.4]);
        let direct = xi(FeatureMapKind::PositiveScalar, &x, &s).unwrap()[0];
        let via_log = log_xi_positive(&x, &s).unwrap().exp();
        assert!((direct - via_log).abs() <= 1e-12 * direct);
    }

    #[test]
    fn errors() {
        let s = sample(&[1.0, 0.0]);
        assert!(matches!(
            xi(FeatureMapKind::PositiveScalar, &[1.0], &s),
            Err(Error::DimensionMismatch { .. })
        ));
        let big = sample(&[800.0, 0.0]);
        assert!(matches!(
            xi(FeatureMapKind::PositiveScalar, &[1.0, 0.0], &big),
            Err(Error::Overflow { .. })
        ));
        assert!(kernel_estimate(
            FeatureMapKind::PositiveScalar,
            &[0.0],
            &[0.0],
            0,
            &RandomSource::new(0)
        )
        .is_err());
    }

    #[test]
    fn signed_log_agrees_with_direct_values() {
        let x = [0.3, -0.8, 0.5];
        let half_sq = 0.5 * sq_norm(&x);
        let s = FeatureSample::with_shift(vec![0.9, 0.1, -1.4], 1.2);
        for kind in FeatureMapKind::ALL {
            let direct = xi(kind, &x, &s).unwrap();
            let mut out = [SignedLog::positive(0.0); 2];
            signed_log_features(kind, &x, half_sq, &s, &mut out);
            for (j, d) in direct.iter().enumerate() {
                let v = out[j].sign * out[j].log_abs.exp();
                assert!((v - d).abs() < 1e-12 * d.abs().max(1.0), "{kind:?}");
            }
        }
    }

    #[test]
    fn kernel_estimate_at_origin_is_exact() {
        for kind in [
            FeatureMapKind::PositiveScalar,
            FeatureMapKind::HyperbolicPair,
            FeatureMapKind::TrigPair,
        ] {
            let est = kernel_estimate(kind, &[0.0; 4], &[0.0; 4], 17, &RandomSource::new(5)).unwrap();
            assert!((est - 1.0).abs() < 1e-14, "{kind:?}: {est}");
        }
    }

    #[test]
    fn single_sample_algebra() {
        let x = [0.2, -0.1];
        let y = [0.5, 0.3];
        let rng = RandomSource::new(99);
        let s = FeatureSample::draw(FeatureMapKind::PositiveScalar, 2, &mut rng.draws());
        let expected = (dot(&s.omega, &[0.7, 0.2]) - 0.5 * sq_norm(&x) - 0.5 * sq_norm(&y)).exp();
        let est = kernel_estimate(FeatureMapKind::PositiveScalar, &x, &y, 1, &rng).unwrap();
        assert!((est - expected).abs() < 1e-14 * expected);
    }

    #[test]
    fn every_kind_is_unbiased() {
        let x = [0.3, -0.2, 0.4, 0.1];
        let y = [-0.1, 0.5, 0.2, 0.3];
        let target = dot(&x, &y).exp();
        let root = RandomSource::new(2024);
        for kind in FeatureMapKind::ALL {
            let runs = 100;
            let estimates: Vec<f64> = (0..runs)
                .map(|r| {
                    kernel_estimate(kind, &x, &y, 10_000, &root.split_named(&format!("{kind:?}")).split(r))
                        .unwrap()
                })
                .collect();
            let mean = estimates.iter().sum::<f64>() / runs as f64;
            let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
            let se = (var / runs as f64).sqrt();
            assert!(
                (mean - target).abs() <= 4.0 * se,
                "{kind:?}: mean {mean} target {target} se {se}"
            );
        }
    }

    #[test]
    fn positive_variance_grows_with_separation() {
        // Single-sample variance for x = y = t·e₁/2, so ‖x + y‖ = t.
        let mut variances = Vec::new();
        for t in [0.0, 1.0, 2.0, 4.0] {
            let x = [t / 2.0, 0.0, 0.0];
            let mut d = RandomSource::new(8).draws();
            let n = 100_000;
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let s = FeatureSample::draw(FeatureMapKind::PositiveScalar, 3, &mut d);
                    let f = xi(FeatureMapKind::PositiveScalar, &x, &s).unwrap()[0];
                    f * f
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            variances.push(vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64);
        }
        assert!(variances.windows(2).all(|w| w[0] <= w[1]), "{variances:?}");
    }

    #[test]
    fn positive_kinds_stay_positive() {
        let mut d = RandomSource::new(4).draws();
        for _ in 0..1000 {
            let s = FeatureSample::draw(FeatureMapKind::HyperbolicPair, 3, &mut d);
            let x: Vec<f64> = (0..3).map(|_| 3.0 * d.standard_normal()).collect();
            for kind in [FeatureMapKind::PositiveScalar, FeatureMapKind::HyperbolicPair] {
                assert!(xi(kind, &x, &s).unwrap().iter().all(|v| *v > 0.0));
            }
        }
    }
}
