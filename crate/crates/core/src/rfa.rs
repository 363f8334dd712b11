//! Random feature attention: one shared set of `ω` draws for all queries,
//! giving `O(S(N+M)D)` cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{AttentionInputs, AttentionOutput};
use crate::features::{signed_log_features, FeatureMapKind, FeatureSample, SignedLog};
use crate::math::{axpy, sq_norm};
use crate::rng::RandomSource;

/// Denominators below this magnitude (after max-factoring) are rejected.
pub const DENOMINATOR_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfaConfig {
    pub samples: usize,
    pub kind: FeatureMapKind,
    pub rng: RandomSource,
}

impl RfaConfig {
    pub fn new(samples: usize, rng: RandomSource) -> Self {
        Self {
            samples,
            kind: FeatureMapKind::PositiveScalar,
            rng,
        }
    }
}

/// Draws the `S` shared samples that [`rfa_attention`] uses for `cfg`.
pub fn rfa_samples(cfg: &RfaConfig, dim: usize) -> Vec<FeatureSample> {
    let mut draws = cfg.rng.draws();
    (0..cfg.samples)
        .map(|_| FeatureSample::draw(cfg.kind, dim, &mut draws))
        .collect()
}

pub fn rfa_attention(inputs: &AttentionInputs, cfg: &RfaConfig) -> Result<AttentionOutput> {
    if cfg.samples == 0 {
        return Err(Error::invalid("RFA needs at least one sample"));
    }
    let samples = rfa_samples(cfg, inputs.dim());
    rfa_attention_with_samples(inputs, cfg.kind, &samples)
}

/// RFA with caller-supplied samples.
pub fn rfa_attention_with_samples(
    inputs: &AttentionInputs,
    kind: FeatureMapKind,
    samples: &[FeatureSample],
) -> Result<AttentionOutput> {
    if samples.is_empty() {
        return Err(Error::invalid("RFA needs at least one sample"));
    }
    if let Some(s) = samples.iter().find(|s| s.omega.len() != inputs.dim()) {
        return Err(Error::DimensionMismatch {
            expected: inputs.dim(),
            actual: s.omega.len(),
        });
    }
    let stats = KeyStats::build(inputs, kind, samples);
    let d = inputs.dim();
    let arity = kind.arity();
    let mut out = vec![0.0; inputs.n_queries() * d];
    let mut terms = vec![SignedLog { log_abs: 0.0, sign: 0.0 }; stats.len()];
    let mut feats = [SignedLog { log_abs: 0.0, sign: 0.0 }; 2];
    for (n, q) in inputs.q().iter_rows().enumerate() {
        let half_sq = 0.5 * sq_norm(q);
        for (s, sample) in samples.iter().enumerate() {
            signed_log_features(kind, q, half_sq, sample, &mut feats);
            for (j, feat) in feats[..arity].iter().enumerate() {
                let f = s * arity + j;
                terms[f] = SignedLog {
                    log_abs: feat.log_abs + stats.log_scale[f],
                    sign: feat.sign,
                };
            }
        }
        let row = &mut out[n * d..(n + 1) * d];
        stats.combine(n, &terms, row)?;
    }
    AttentionOutput::from_rows(inputs.n_queries(), d, out)
}

/// Per-feature key statistics `Σ_m ξ(k_m, ω)·v_m` and `Σ_m ξ(k_m, ω)`,
/// stored relative to `exp(log_scale)`.
#[derive(Debug, Clone)]
pub(crate) struct KeyStats {
    pub log_scale: Vec<f64>,
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    dim: usize,
}

impl KeyStats {
    pub fn build(inputs: &AttentionInputs, kind: FeatureMapKind, samples: &[FeatureSample]) -> Self {
        let arity = kind.arity();
        let d = inputs.dim();
        let n_feat = samples.len() * arity;
        let half_sq = inputs.key_half_sq_norms();
        let mut log_scale = vec![f64::NEG_INFINITY; n_feat];
        let mut num = vec![0.0; n_feat * d];
        let mut den = vec![0.0; n_feat];
        let mut per_key = vec![[SignedLog { log_abs: 0.0, sign: 0.0 }; 2]; inputs.n_keys()];
        for (s, sample) in samples.iter().enumerate() {
            for (m, k) in inputs.k().iter_rows().enumerate() {
                signed_log_features(kind, k, half_sq[m], sample, &mut per_key[m]);
            }
            for j in 0..arity {
                let f = s * arity + j;
                let scale = per_key
                    .iter()
                    .map(|p| p[j].log_abs)
                    .fold(f64::NEG_INFINITY, f64::max);
                log_scale[f] = scale;
                if scale == f64::NEG_INFINITY {
                    continue;
                }
                let row = &mut num[f * d..(f + 1) * d];
                for (p, v) in per_key.iter().zip(inputs.v().iter_rows()) {
                    let w = p[j].sign * (p[j].log_abs - scale).exp();
                    axpy(w, v, row);
                    den[f] += w;
                }
            }
        }
        Self {
            log_scale,
            num,
            den,
            dim: d,
        }
    }

    pub fn len(&self) -> usize {
        self.den.len()
    }

    /// Writes `Σ_f c_f N_f / Σ_f c_f D_f` into `row`, where each coefficient
    /// `c_f = sign_f · exp(log_abs_f)` is rescaled by the largest magnitude.
    /// Returns the rescaled denominator and the log of the scale removed.
    pub fn combine(&self, query: usize, terms: &[SignedLog], row: &mut [f64]) -> Result<(f64, f64)> {
        let top = terms
            .iter()
            .filter(|t| t.sign != 0.0)
            .map(|t| t.log_abs)
            .fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::DegenerateDenominator {
                query,
                magnitude: 0.0,
            });
        }
        // Positive and negative coefficients accumulate separately.
        let d = self.dim;
        let mut pos = vec![0.0; d + 1];
        let mut neg = vec![0.0; d + 1];
        for (f, t) in terms.iter().enumerate() {
            if t.sign == 0.0 {
                continue;
            }
            let w = (t.log_abs - top).exp();
            let acc = if t.sign > 0.0 { &mut pos } else { &mut neg };
            axpy(w, &self.num[f * d..(f + 1) * d], &mut acc[..d]);
            acc[d] += w * self.den[f];
        }
        let den = pos[d] - neg[d];
        if den.is_nan() || den.abs() < DENOMINATOR_FLOOR {
            return Err(Error::DegenerateDenominator {
                query,
                magnitude: den.abs(),
            });
        }
        for (j, y) in row.iter_mut().enumerate() {
            *y = (pos[j] - neg[j]) / den;
        }
        Ok((den, top))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::softmax_attention;
    use crate::math::RealMatrix;

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> RealMatrix {
        let mut d = RandomSource::new(seed).draws();
        let data = (0..rows * cols).map(|_| scale * d.standard_normal()).collect();
        RealMatrix::new(rows, cols, data).unwrap()
    }

    fn inputs(n: usize, m: usize, d: usize, seed: u64) -> AttentionInputs {
        AttentionInputs::new(
            random_matrix(n, d, seed, 0.5),
            random_matrix(m, d, seed + 1, 0.5),
            random_matrix(m, d, seed + 2, 1.0),
            true,
        )
        .unwrap()
    }

    fn rmse(a: &RealMatrix, b: &RealMatrix) -> f64 {
        a.mse(b).unwrap().sqrt()
    }

    #[test]
    fn single_key_is_exact() {
        let x = inputs(4, 1, 3, 1);
        for kind in [FeatureMapKind::PositiveScalar, FeatureMapKind::HyperbolicPair] {
            for seed in 0..5 {
                let cfg = RfaConfig {
                    samples: 7,
                    kind,
                    rng: RandomSource::new(seed),
                };
                let y = rfa_attention(&x, &cfg).unwrap().y;
                for row in y.iter_rows() {
                    for (a, b) in row.iter().zip(x.v().row(0)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_queries_and_keys_average_values() {
        let x = AttentionInputs::new(
            RealMatrix::zeros(3, 4),
            RealMatrix::zeros(6, 4),
            random_matrix(6, 4, 3, 1.0),
            true,
        )
        .unwrap();
        let mean = x.v().column_mean();
        for seed in 0..3 {
            let y = rfa_attention(&x, &RfaConfig::new(5, RandomSource::new(seed))).unwrap().y;
            for row in y.iter_rows() {
                for (a, b) in row.iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn approaches_exact_attention() {
        let x = inputs(8, 8, 4, 40);
        let exact = softmax_attention(&x).unwrap().y;
        let coarse = rmse(
            &rfa_attention(&x, &RfaConfig::new(100, RandomSource::new(1))).unwrap().y,
            &exact,
        );
        let fine = rmse(
            &rfa_attention(&x, &RfaConfig::new(10_000, RandomSource::new(1))).unwrap().y,
            &exact,
        );
        assert!(fine < 0.05, "rmse {fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn outputs_in_value_hull_for_positive_kinds() {
        let mut d = RandomSource::new(5).draws();
        let v: Vec<f64> = (0..30).map(|_| d.uniform()).collect();
        let x = AttentionInputs::new(
            random_matrix(5, 3, 6, 1.0),
            random_matrix(10, 3, 7, 1.0),
            RealMatrix::new(10, 3, v).unwrap(),
            true,
        )
        .unwrap();
        for kind in [FeatureMapKind::PositiveScalar, FeatureMapKind::HyperbolicPair] {
            let cfg = RfaConfig {
                samples: 4,
                kind,
                rng: RandomSource::new(8),
            };
            for e in rfa_attention(&x, &cfg).unwrap().y.data() {
                assert!((-1e-12..=1.0 + 1e-12).contains(e));
            }
        }
    }

    #[test]
    fn linear_in_values() {
        let x = inputs(5, 7, 3, 9);
        let v2 = random_matrix(7, 3, 50, 1.0);
        let (a, b) = (1.7, -0.4);
        let mixed: Vec<f64> = x
            .v()
            .data()
            .iter()
            .zip(v2.data())
            .map(|(p, r)| a * p + b * r)
            .collect();
        let mixed = x.with_values(RealMatrix::new(7, 3, mixed).unwrap()).unwrap();
        let x2 = x.with_values(v2).unwrap();
        for kind in FeatureMapKind::ALL {
            let cfg = RfaConfig {
                samples: 16,
                kind,
                rng: RandomSource::new(3),
            };
            let y = rfa_attention(&mixed, &cfg).unwrap().y;
            let y1 = rfa_attention(&x, &cfg).unwrap().y;
            let y2 = rfa_attention(&x2, &cfg).unwrap().y;
            for i in 0..y.data().len() {
                let expect = a * y1.data()[i] + b * y2.data()[i];
                assert!((y.data()[i] - expect).abs() < 1e-10, "{kind:?}");
            }
        }
    }

    #[test]
    fn large_key_norms_do_not_overflow() {
        let x = AttentionInputs::new(
            random_matrix(3, 4, 1, 1.0),
            random_matrix(5, 4, 2, 40.0),
            random_matrix(5, 4, 3, 1.0),
            true,
        )
        .unwrap();
        let y = rfa_attention(&x, &RfaConfig::new(8, RandomSource::new(0))).unwrap();
        assert!(y.y.all_finite());
    }

    #[test]
    fn rejects_zero_samples() {
        let x = inputs(2, 2, 2, 0);
        assert!(matches!(
            rfa_attention(&x, &RfaConfig::new(0, RandomSource::new(0))),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn consistency_across_sample_counts() {
        let x = inputs(8, 8, 4, 70);
        let exact = softmax_attention(&x).unwrap().y;
        let grid = [16, 64, 256, 1024, 4096];
        let means: Vec<f64> = grid
            .iter()
            .map(|&s| {
                (0..20)
                    .map(|seed| {
                        let cfg = RfaConfig::new(s, RandomSource::new(1000 + seed));
                        rmse(&rfa_attention(&x, &cfg).unwrap().y, &exact)
                    })
                    .sum::<f64>()
                    / 20.0
            })
            .collect();
        let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(inversions <= 1, "{means:?}");
    }
}
