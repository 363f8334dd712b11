//! Randomized attention: per-query sampling from the Gaussian mixture whose
//! expectation of `f_n` is exactly softmax attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{attention_probs, AttentionInputs, AttentionOutput};
use crate::math::{
    axpy, dot, gaussian_logpdf_unchecked, logsumexp_unchecked, softmax_in_place, ProbabilityVector,
    RealMatrix,
};
use crate::rng::{categorical_draw, RandomSource};

/// The query-specific sampling density
/// `p_n(ω) = Σ_m π_m N(ω; q_n + k_m, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    pub weights: ProbabilityVector,
    /// Component means, one row per key.
    pub means: RealMatrix,
    /// `logsumexp_m q_nᵀk_m`
    pub log_z: f64,
}

impl MixtureDensity {
    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn logpdf(&self, omega: &[f64]) -> Result<f64> {
        if omega.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: omega.len(),
            });
        }
        Ok(self.logpdf_unchecked(omega))
    }

    pub(crate) fn logpdf_unchecked(&self, omega: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .as_slice()
            .iter()
            .zip(self.means.iter_rows())
            .map(|(w, mu)| w.ln() + gaussian_logpdf_unchecked(omega, mu))
            .collect();
        logsumexp_unchecked(&terms)
    }

    /// `Σ_m π_m μ_m`
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.as_slice().iter().zip(self.means.iter_rows()) {
            axpy(*w, mu, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RaVariant {
    /// Component index drawn from `π_n`.
    #[default]
    Unbiased,
    /// Component index replaced by its expectation.
    Biased,
}

/// Training draws fresh noise; evaluation passes expectations instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaConfig {
    pub samples: usize,
    pub variant: RaVariant,
    pub mode: Mode,
    pub rng: RandomSource,
}

impl RaConfig {
    /// Single-sample unbiased estimator in training mode.
    pub fn new(rng: RandomSource) -> Self {
        Self {
            samples: 1,
            variant: RaVariant::Unbiased,
            mode: Mode::Train,
            rng,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("RA needs at least one sample"));
        }
        if self.mode == Mode::Eval && self.variant == RaVariant::Unbiased {
            return Err(Error::invalid(
                "evaluation mode is only defined for the biased RA variant",
            ));
        }
        Ok(())
    }
}

pub fn ra_density(inputs: &AttentionInputs, n: usize) -> Result<MixtureDensity> {
    inputs.check_query(n)?;
    mixture_for(inputs.q().row(n), inputs.k())
}

/// `Σ_m softmax_m(qᵀk_m) N(ω; q + k_m, I)` for an arbitrary query vector.
pub(crate) fn mixture_for(q: &[f64], keys: &RealMatrix) -> Result<MixtureDensity> {
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k)).collect();
    let log_z = logsumexp_unchecked(&logits);
    let mut weights = logits;
    softmax_in_place(&mut weights);
    let weights = ProbabilityVector::new(weights).map_err(|e| Error::Internal(e.to_string()))?;
    let mut means = Vec::with_capacity(keys.rows() * q.len());
    for k in keys.iter_rows() {
        means.extend(q.iter().zip(k).map(|(a, b)| a + b));
    }
    let means = RealMatrix::new(keys.rows(), q.len(), means)
        .map_err(|e| Error::Internal(format!("mixture means: {e}")))?;
    Ok(MixtureDensity {
        weights,
        means,
        log_z,
    })
}

/// `f_n(ω)`: values weighted by `softmax_m(ωᵀk_m − ‖k_m‖²/2)`.
///
/// `ξ(q_n, ω)` is common to numerator and denominator and cancels, so the
/// query index only selects which row is validated.
pub fn f_n(inputs: &AttentionInputs, n: usize, omega: &[f64]) -> Result<Vec<f64>> {
    inputs.check_query(n)?;
    if omega.len() != inputs.dim() {
        return Err(Error::DimensionMismatch {
            expected: inputs.dim(),
            actual: omega.len(),
        });
    }
    if let Some(w) = omega.iter().find(|w| !w.is_finite()) {
        return Err(Error::invalid(format!("non-finite ω component {w}")));
    }
    let half_sq = inputs.key_half_sq_norms();
    let mut scratch = vec![0.0; inputs.n_keys()];
    let mut out = vec![0.0; inputs.dim()];
    aggregate(inputs, &half_sq, omega, &mut scratch, &mut out);
    Ok(out)
}

/// Adds `f_n(ω)` into `out`.
fn aggregate(
    inputs: &AttentionInputs,
    key_half_sq: &[f64],
    omega: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    for ((s, k), h) in scratch.iter_mut().zip(inputs.k().iter_rows()).zip(key_half_sq) {
        *s = dot(omega, k) - h;
    }
    softmax_in_place(scratch);
    for (w, v) in scratch.iter().zip(inputs.v().iter_rows()) {
        axpy(*w, v, out);
    }
}

pub fn ra_attention(inputs: &AttentionInputs, cfg: &RaConfig) -> Result<AttentionOutput> {
    cfg.validate()?;
    let d = inputs.dim();
    let half_sq = inputs.key_half_sq_norms();
    let mut scratch = vec![0.0; inputs.n_keys()];
    let mut omega = vec![0.0; d];
    let mut out = vec![0.0; inputs.n_queries() * d];
    for n in 0..inputs.n_queries() {
        let probs = attention_probs(inputs, n)?;
        let q = inputs.q().row(n);
        // Biased center `Kᵀπ_n + q_n`.
        let center = match cfg.variant {
            RaVariant::Biased => {
                let mut c = q.to_vec();
                for (p, k) in probs.as_slice().iter().zip(inputs.k().iter_rows()) {
                    axpy(*p, k, &mut c);
                }
                Some(c)
            }
            RaVariant::Unbiased => None,
        };
        let row = &mut out[n * d..(n + 1) * d];
        if cfg.mode == Mode::Eval {
            // validate() guarantees the biased variant here.
            let center = center.as_deref().unwrap_or(q);
            aggregate(inputs, &half_sq, center, &mut scratch, row);
            continue;
        }
        let mut draws = cfg.rng.substream(n as u64).draws();
        for _ in 0..cfg.samples {
            match &center {
                Some(c) => omega.copy_from_slice(c),
                None => {
                    let a = categorical_draw(&probs, &mut draws);
                    for ((o, qi), ki) in omega.iter_mut().zip(q).zip(inputs.k().row(a)) {
                        *o = qi + ki;
                    }
                }
            }
            for o in omega.iter_mut() {
                *o += draws.standard_normal();
            }
            aggregate(inputs, &half_sq, &omega, &mut scratch, row);
        }
        let inv = 1.0 / cfg.samples as f64;
        row.iter_mut().for_each(|y| *y *= inv);
    }
    AttentionOutput::from_rows(inputs.n_queries(), d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::softmax_attention;
    use crate::features::{xi, FeatureMapKind, FeatureSample};
    use crate::math::sq_norm;

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> RealMatrix {
        let mut d = RandomSource::new(seed).draws();
        let data = (0..rows * cols).map(|_| scale * d.standard_normal()).collect();
        RealMatrix::new(rows, cols, data).unwrap()
    }

    fn inputs(n: usize, m: usize, d: usize, seed: u64) -> AttentionInputs {
        AttentionInputs::new(
            random_matrix(n, d, seed, 0.6),
            random_matrix(m, d, seed + 1, 0.6),
            random_matrix(m, d, seed + 2, 1.0),
            true,
        )
        .unwrap()
    }

    #[test]
    fn density_with_identical_keys() {
        let k = RealMatrix::from_rows(&vec![vec![0.2, 0.4]; 3]).unwrap();
        let x = AttentionInputs::new(random_matrix(2, 2, 1, 1.0), k, random_matrix(3, 2, 2, 1.0), true)
            .unwrap();
        let p = ra_density(&x, 1).unwrap();
        let q = x.q().row(1);
        for (w, mu) in p.weights.as_slice().iter().zip(p.means.iter_rows()) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(mu, &[q[0] + 0.2, q[1] + 0.4]);
        }
    }

    #[test]
    fn density_single_key() {
        let x = inputs(3, 1, 4, 2);
        let p = ra_density(&x, 2).unwrap();
        assert_eq!(p.weights.as_slice(), &[1.0]);
        let expect: Vec<f64> = x.q().row(2).iter().zip(x.k().row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(p.means.row(0), expect.as_slice());
        assert!((p.log_z - dot(x.q().row(2), x.k().row(0))).abs() < 1e-15);
    }

    #[test]
    fn density_equals_unnormalized_kernel_form() {
        let x = inputs(3, 5, 3, 8);
        let mut d = RandomSource::new(31).draws();
        for n in 0..3 {
            let p = ra_density(&x, n).unwrap();
            for _ in 0..20 {
                let omega: Vec<f64> = (0..3).map(|_| 1.5 * d.standard_normal()).collect();
                let s = FeatureSample::new(omega.clone());
                let xq = xi(FeatureMapKind::PositiveScalar, x.q().row(n), &s).unwrap()[0];
                let xk: f64 = x
                    .k()
                    .iter_rows()
                    .map(|k| xi(FeatureMapKind::PositiveScalar, k, &s).unwrap()[0])
                    .sum();
                let normal = (-0.5 * sq_norm(&omega)).exp()
                    / (2.0 * std::f64::consts::PI).powf(1.5);
                let z: f64 = x.logits(n).iter().map(|l| l.exp()).sum();
                let kernel_form = normal * xq * xk / z;
                let mixture = p.logpdf(&omega).unwrap().exp();
                assert!((mixture - kernel_form).abs() <= 1e-8 * kernel_form);
            }
        }
    }

    #[test]
    fn density_integrates_to_one_in_one_dimension() {
        let x = inputs(2, 3, 1, 15);
        let p = ra_density(&x, 0).unwrap();
        let steps = 24_000;
        let h = 24.0 / steps as f64;
        let total: f64 = (0..=steps)
            .map(|i| {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * p.logpdf(&[-12.0 + i as f64 * h]).unwrap().exp()
            })
            .sum();
        assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn f_n_examples() {
        let x = inputs(2, 1, 3, 4);
        assert_eq!(f_n(&x, 0, &[0.3, -2.0, 5.0]).unwrap(), x.v().row(0));

        let x = inputs(2, 4, 3, 5);
        let logits: Vec<f64> = x.k().iter_rows().map(|k| -0.5 * sq_norm(k)).collect();
        let w = crate::math::stable_softmax(&logits).unwrap();
        let got = f_n(&x, 1, &[0.0; 3]).unwrap();
        for (j, g) in got.iter().enumerate() {
            let expect: f64 = (0..4).map(|m| w[m] * x.v().get(m, j)).sum();
            assert!((g - expect).abs() < 1e-14);
        }
        assert!(matches!(f_n(&x, 2, &[0.0; 3]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(f_n(&x, 0, &[0.0; 2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn f_n_matches_direct_form() {
        // Ratio evaluated without cancelling ξ(q_n, ω).
        let x = inputs(3, 5, 4, 6);
        let mut d = RandomSource::new(2).draws();
        for n in 0..3 {
            let omega: Vec<f64> = (0..4).map(|_| d.standard_normal()).collect();
            let s = FeatureSample::new(omega.clone());
            let xq = xi(FeatureMapKind::PositiveScalar, x.q().row(n), &s).unwrap()[0];
            let mut num = [0.0; 4];
            let mut den = 0.0;
            for m in 0..5 {
                let w = xq * xi(FeatureMapKind::PositiveScalar, x.k().row(m), &s).unwrap()[0];
                den += w;
                for (j, acc) in num.iter_mut().enumerate() {
                    *acc += w * x.v().get(m, j);
                }
            }
            let got = f_n(&x, n, &omega).unwrap();
            for j in 0..4 {
                assert!((got[j] - num[j] / den).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_key_every_variant() {
        let x = inputs(3, 1, 2, 9);
        let configs = [
            RaConfig::new(RandomSource::new(1)),
            RaConfig {
                samples: 3,
                variant: RaVariant::Biased,
                mode: Mode::Train,
                rng: RandomSource::new(2),
            },
            RaConfig {
                samples: 1,
                variant: RaVariant::Biased,
                mode: Mode::Eval,
                rng: RandomSource::new(3),
            },
        ];
        for cfg in configs {
            let y = ra_attention(&x, &cfg).unwrap().y;
            for row in y.iter_rows() {
                for (a, b) in row.iter().zip(x.v().row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let x = inputs(4, 6, 3, 10);
        let cfg = |seed| RaConfig {
            samples: 1,
            variant: RaVariant::Biased,
            mode: Mode::Eval,
            rng: RandomSource::new(seed),
        };
        let a = ra_attention(&x, &cfg(1)).unwrap();
        let b = ra_attention(&x, &cfg(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unbiased_eval_is_rejected() {
        let x = inputs(1, 2, 2, 0);
        let cfg = RaConfig {
            mode: Mode::Eval,
            ..RaConfig::new(RandomSource::new(0))
        };
        assert!(matches!(ra_attention(&x, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unbiased_grand_mean_matches_softmax() {
        let x = inputs(2, 6, 4, 21);
        let exact = softmax_attention(&x).unwrap().y;
        let trials = 50_000;
        let mut sum = [0.0; 8];
        let mut sq = [0.0; 8];
        for t in 0..trials {
            let y = ra_attention(&x, &RaConfig::new(RandomSource::new(5).split(t))).unwrap().y;
            for (i, e) in y.data().iter().enumerate() {
                sum[i] += e;
                sq[i] += e * e;
            }
        }
        for i in 0..8 {
            let mean = sum[i] / trials as f64;
            let var = (sq[i] / trials as f64 - mean * mean) * trials as f64 / (trials - 1) as f64;
            let z = (mean - exact.data()[i]) / (var / trials as f64).sqrt();
            assert!(z.abs() <= 4.0, "entry {i}: z = {z}");
        }
    }

    #[test]
    fn per_query_streams_ignore_other_queries() {
        // Dropping query 0 must not change the estimate for query 1.
        let x = inputs(2, 5, 3, 30);
        let cfg = RaConfig::new(RandomSource::with_stream(4, 8));
        let full = ra_attention(&x, &cfg).unwrap().y;
        let f = f_n(&x, 1, &[0.0; 3]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(full.rows(), 2);
        let q1 = RealMatrix::from_rows(&[x.q().row(1)]).unwrap();
        let single = AttentionInputs::new(q1, x.k().clone(), x.v().clone(), true).unwrap();
        // Query 1 of the full run used stream 8 ^ 1; query 0 of a single-row run uses 9 ^ 0.
        let cfg1 = RaConfig::new(RandomSource::with_stream(4, 9));
        let alone = ra_attention(&single, &cfg1).unwrap().y;
        assert_eq!(alone.row(0), full.row(1));
    }
}
