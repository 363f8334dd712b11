//! Linear randomized attention: self-normalized multiple importance sampling
//! over `C` proposals shared by all queries, at `O(C(N+M)D)` cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{AttentionInputs, AttentionOutput};
use crate::features::{signed_log_features, FeatureMapKind, FeatureSample, SignedLog};
use crate::math::{sq_norm, standard_normal_logpdf};
use crate::proposals::{build_proposals, compute_landmarks, ProposalKind, ProposalSet};
use crate::ra::Mode;
use crate::rfa::KeyStats;
use crate::rng::RandomSource;
use crate::weighting::{query_affinity, row_mean, PointDensities, QueryAffinity, WeightingKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaraConfig {
    /// Number of proposals `C`; one sample is drawn from each.
    pub proposals: usize,
    pub proposal_kind: ProposalKind,
    pub weighting: WeightingKind,
    pub mode: Mode,
    /// Only [`FeatureMapKind::PositiveScalar`] is accepted.
    pub kind: FeatureMapKind,
    pub rng: RandomSource,
}

impl LaraConfig {
    /// Local Gaussian proposals with decoupled weighting in training mode.
    pub fn new(proposals: usize, rng: RandomSource) -> Self {
        Self {
            proposals,
            proposal_kind: ProposalKind::default(),
            weighting: WeightingKind::default(),
            mode: Mode::Train,
            kind: FeatureMapKind::PositiveScalar,
            rng,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proposals == 0 {
            return Err(Error::invalid("LARA needs at least one proposal"));
        }
        if self.kind != FeatureMapKind::PositiveScalar {
            return Err(Error::invalid(format!(
                "LARA requires the positive scalar feature map, got {:?}",
                self.kind
            )));
        }
        self.weighting.validate()
    }
}

/// How `α_nc` is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Mis {
        kind: WeightingKind,
        affinity: &'a QueryAffinity,
    },
    /// `α_nc = 1/C` for every query and point.
    Constant,
}

/// The proposal set and the points `ω_c` that [`lara_attention`] uses for `cfg`.
pub fn lara_samples(inputs: &AttentionInputs, cfg: &LaraConfig) -> Result<(ProposalSet, QueryAffinity, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let landmarks = compute_landmarks(inputs, cfg.proposals)?;
    let set = build_proposals(&landmarks, inputs.k(), cfg.proposal_kind)?;
    let affinity = query_affinity(inputs.q(), &landmarks)?;
    let omegas = set
        .proposals()
        .iter()
        .enumerate()
        .map(|(c, p)| match cfg.mode {
            Mode::Eval => p.mean(),
            Mode::Train => p.draw(&mut cfg.rng.substream(c as u64).draws()),
        })
        .collect();
    Ok((set, affinity, omegas))
}

pub fn lara_attention(inputs: &AttentionInputs, cfg: &LaraConfig) -> Result<AttentionOutput> {
    let (set, affinity, omegas) = lara_samples(inputs, cfg)?;
    lara_attention_with(
        inputs,
        &set,
        Weights::Mis {
            kind: cfg.weighting,
            affinity: &affinity,
        },
        &omegas,
    )
}

/// State shared by every query: key statistics `N_c`, `D_c` and the
/// per-point proposal densities.
struct Prepared<'a> {
    samples: Vec<FeatureSample>,
    stats: KeyStats,
    points: Vec<PointDensities>,
    /// `log N(ω_c; 0, I) − log q_c(ω_c)`
    log_importance: Vec<f64>,
    weights: Weights<'a>,
}

impl<'a> Prepared<'a> {
    fn new(
        inputs: &AttentionInputs,
        set: &ProposalSet,
        weights: Weights<'a>,
        omegas: &[Vec<f64>],
    ) -> Result<Self> {
        let count = set.len();
        if omegas.len() != count {
            return Err(Error::invalid(format!(
                "{} sample points for {count} proposals",
                omegas.len()
            )));
        }
        if set.dim() != inputs.dim() {
            return Err(Error::DimensionMismatch {
                expected: inputs.dim(),
                actual: set.dim(),
            });
        }
        for w in omegas {
            if w.len() != inputs.dim() {
                return Err(Error::DimensionMismatch {
                    expected: inputs.dim(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite sample point"));
            }
        }
        if let Weights::Mis { kind, affinity } = weights {
            kind.validate()?;
            let r = &affinity.r_prime;
            if r.rows() != inputs.n_queries() || r.cols() != count {
                return Err(Error::invalid(format!(
                    "affinity is {}×{}, expected {}×{count}",
                    r.rows(),
                    r.cols(),
                    inputs.n_queries()
                )));
            }
        }
        let points = omegas
            .iter()
            .map(|w| PointDensities::at(set, w))
            .collect::<Result<Vec<_>>>()?;
        let log_importance = omegas
            .iter()
            .zip(&points)
            .enumerate()
            .map(|(c, (w, p))| standard_normal_logpdf(w) - p.log_q[c])
            .collect();
        let samples: Vec<FeatureSample> = omegas.iter().cloned().map(FeatureSample::new).collect();
        let stats = KeyStats::build(inputs, FeatureMapKind::PositiveScalar, &samples);
        Ok(Self {
            samples,
            stats,
            points,
            log_importance,
            weights,
        })
    }

    fn count(&self) -> usize {
        self.samples.len()
    }

    /// `α_nc(ω_c)` for every proposal.
    fn alphas(&self, n: usize, out: &mut [f64]) {
        match self.weights {
            Weights::Constant => out.fill(1.0 / self.count() as f64),
            Weights::Mis { kind, affinity } => {
                let r = affinity.row(n);
                let r_mean = row_mean(r);
                for (c, a) in out.iter_mut().enumerate() {
                    *a = self.points[c].alpha(kind, r, r_mean, c);
                }
            }
        }
    }

    /// Writes output row `n` given `α_nc`; returns the rescaled denominator
    /// and the log of its scale.
    fn apply(
        &self,
        n: usize,
        q: &[f64],
        alphas: &[f64],
        terms: &mut [SignedLog],
        row: &mut [f64],
    ) -> Result<(f64, f64)> {
        let half_sq = 0.5 * sq_norm(q);
        let mut feat = [SignedLog { log_abs: 0.0, sign: 0.0 }; 2];
        for (c, sample) in self.samples.iter().enumerate() {
            signed_log_features(FeatureMapKind::PositiveScalar, q, half_sq, sample, &mut feat);
            let a = alphas[c];
            terms[c] = SignedLog {
                log_abs: a.abs().ln() + self.log_importance[c] + feat[0].log_abs + self.stats.log_scale[c],
                sign: if a == 0.0 { 0.0 } else { a.signum() },
            };
        }
        self.stats.combine(n, terms, row)
    }
}

/// LARA at caller-supplied points `ω_c`, one per proposal.
pub fn lara_attention_with(
    inputs: &AttentionInputs,
    set: &ProposalSet,
    weights: Weights<'_>,
    omegas: &[Vec<f64>],
) -> Result<AttentionOutput> {
    let prep = Prepared::new(inputs, set, weights, omegas)?;
    let d = inputs.dim();
    let mut out = vec![0.0; inputs.n_queries() * d];
    let mut alphas = vec![0.0; prep.count()];
    let mut terms = vec![SignedLog { log_abs: 0.0, sign: 0.0 }; prep.count()];
    for (n, q) in inputs.q().iter_rows().enumerate() {
        prep.alphas(n, &mut alphas);
        prep.apply(n, q, &alphas, &mut terms, &mut out[n * d..(n + 1) * d])?;
    }
    AttentionOutput::from_rows(inputs.n_queries(), d, out)
}

/// Intermediate quantities for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    /// `α_nc(ω_c)`
    pub alpha: Vec<f64>,
    /// `α'_nc = α_nc(ω_c) N(ω_c; 0, I) / q_c(ω_c)`
    pub alpha_prime: Vec<f64>,
    /// Denominator `Σ_c α'_nc ξ(q_n, ω_c) D_c` divided by `exp(log_scale)`.
    pub denominator: f64,
    pub log_scale: f64,
}

impl QueryDiagnostics {
    /// Unscaled denominator; may overflow for extreme inputs.
    pub fn denominator_value(&self) -> f64 {
        self.denominator * self.log_scale.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaraDiagnostics {
    pub omegas: Vec<Vec<f64>>,
    /// `log N(ω_c; 0, I) − log q_c(ω_c)` per proposal.
    pub log_importance: Vec<f64>,
    pub queries: Vec<QueryDiagnostics>,
}

impl LaraDiagnostics {
    /// Rebuilds the attention output from the recorded weights; matches
    /// [`lara_attention`] bit for bit.
    pub fn recombine(&self, inputs: &AttentionInputs, set: &ProposalSet) -> Result<AttentionOutput> {
        let prep = Prepared::new(inputs, set, Weights::Constant, &self.omegas)?;
        if prep.log_importance != self.log_importance || self.queries.len() != inputs.n_queries() {
            return Err(Error::invalid("diagnostics do not belong to these inputs"));
        }
        let d = inputs.dim();
        let mut out = vec![0.0; inputs.n_queries() * d];
        let mut terms = vec![SignedLog { log_abs: 0.0, sign: 0.0 }; prep.count()];
        for (n, (q, diag)) in inputs.q().iter_rows().zip(&self.queries).enumerate() {
            prep.apply(n, q, &diag.alpha, &mut terms, &mut out[n * d..(n + 1) * d])?;
        }
        AttentionOutput::from_rows(inputs.n_queries(), d, out)
    }
}

/// Per-query weights and denominators behind [`lara_attention`] for the same config.
pub fn lara_diagnostics(inputs: &AttentionInputs, cfg: &LaraConfig) -> Result<(ProposalSet, LaraDiagnostics)> {
    let (set, affinity, omegas) = lara_samples(inputs, cfg)?;
    let prep = Prepared::new(
        inputs,
        &set,
        Weights::Mis {
            kind: cfg.weighting,
            affinity: &affinity,
        },
        &omegas,
    )?;
    let d = inputs.dim();
    let mut row = vec![0.0; d];
    let mut terms = vec![SignedLog { log_abs: 0.0, sign: 0.0 }; prep.count()];
    let mut queries = Vec::with_capacity(inputs.n_queries());
    for (n, q) in inputs.q().iter_rows().enumerate() {
        let mut alpha = vec![0.0; prep.count()];
        prep.alphas(n, &mut alpha);
        let (denominator, log_scale) = prep.apply(n, q, &alpha, &mut terms, &mut row)?;
        let alpha_prime = alpha
            .iter()
            .zip(&prep.log_importance)
            .map(|(a, l)| a * l.exp())
            .collect();
        queries.push(QueryDiagnostics {
            alpha,
            alpha_prime,
            denominator,
            log_scale,
        });
    }
    let log_importance = prep.log_importance;
    Ok((
        set,
        LaraDiagnostics {
            omegas,
            log_importance,
            queries,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::softmax_attention;
    use crate::features::xi;
    use crate::math::RealMatrix;
    use crate::ra::f_n;
    use crate::rfa::rfa_attention_with_samples;

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

    fn max_abs_diff(a: &RealMatrix, b: &RealMatrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_key_is_exact() {
        let x = inputs(6, 1, 3, 1);
        for weighting in [
            WeightingKind::BalanceHeuristic,
            WeightingKind::CoupledOptimal,
            WeightingKind::default(),
        ] {
            let cfg = LaraConfig {
                weighting,
                ..LaraConfig::new(1, RandomSource::new(2))
            };
            let y = lara_attention(&x, &cfg).unwrap().y;
            for row in y.iter_rows() {
                for (a, b) in row.iter().zip(x.v().row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_proposal_equals_f_n() {
        let x = inputs(5, 7, 3, 3);
        for kind in [
            ProposalKind::GaussianLocal,
            ProposalKind::GaussianFullKeys,
            ProposalKind::GaussianKeyLandmarkAttn,
        ] {
            let cfg = LaraConfig {
                proposal_kind: kind,
                weighting: WeightingKind::BalanceHeuristic,
                ..LaraConfig::new(1, RandomSource::new(4))
            };
            let (_, _, omegas) = lara_samples(&x, &cfg).unwrap();
            let y = lara_attention(&x, &cfg).unwrap().y;
            for n in 0..5 {
                let f = f_n(&x, n, &omegas[0]).unwrap();
                for (a, b) in y.row(n).iter().zip(&f) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pinned_proposals_reproduce_rfa() {
        for seed in 0..20 {
            let x = inputs(8, 9, 4, 100 + seed);
            let c = 6;
            let set = ProposalSet::from_means(&RealMatrix::zeros(c, 4)).unwrap();
            let mut draws = RandomSource::new(seed).draws();
            let omegas: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..4).map(|_| draws.standard_normal()).collect())
                .collect();
            let lara = lara_attention_with(&x, &set, Weights::Constant, &omegas).unwrap().y;
            let samples: Vec<FeatureSample> = omegas.iter().cloned().map(FeatureSample::new).collect();
            let rfa = rfa_attention_with_samples(&x, FeatureMapKind::PositiveScalar, &samples)
                .unwrap()
                .y;
            assert!(max_abs_diff(&lara, &rfa) < 1e-10);
        }
    }

    #[test]
    fn proposal_order_does_not_matter() {
        let x = inputs(10, 10, 3, 5);
        let cfg = LaraConfig::new(5, RandomSource::new(6));
        let (set, affinity, omegas) = lara_samples(&x, &cfg).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted_omegas: Vec<Vec<f64>> = perm.iter().map(|&p| omegas[p].clone()).collect();
        let permuted_affinity = affinity.permuted_columns(&perm);
        for kind in [
            WeightingKind::BalanceHeuristic,
            WeightingKind::CoupledOptimal,
            WeightingKind::DecoupledOptimal { beta: 2.0 },
        ] {
            let a = lara_attention_with(&x, &set, Weights::Mis { kind, affinity: &affinity }, &omegas)
                .unwrap()
                .y;
            let b = lara_attention_with(
                &x,
                &set.permuted(&perm),
                Weights::Mis {
                    kind,
                    affinity: &permuted_affinity,
                },
                &permuted_omegas,
            )
            .unwrap()
            .y;
            assert!(max_abs_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let x = inputs(12, 12, 4, 7);
        let cfg = |seed| LaraConfig {
            mode: Mode::Eval,
            ..LaraConfig::new(4, RandomSource::new(seed))
        };
        let a = lara_attention(&x, &cfg(1)).unwrap();
        assert_eq!(a, lara_attention(&x, &cfg(1)).unwrap());
        assert_eq!(a, lara_attention(&x, &cfg(999)).unwrap());
    }

    #[test]
    fn train_mode_is_reproducible() {
        let x = inputs(12, 12, 4, 8);
        let cfg = LaraConfig::new(4, RandomSource::new(3));
        assert_eq!(lara_attention(&x, &cfg).unwrap(), lara_attention(&x, &cfg).unwrap());
        let other = LaraConfig::new(4, RandomSource::new(4));
        assert_ne!(lara_attention(&x, &cfg).unwrap(), lara_attention(&x, &other).unwrap());
    }

    #[test]
    fn linear_in_values() {
        let x = inputs(9, 9, 3, 9);
        let v2 = random_matrix(9, 3, 50, 1.0);
        let cfg = LaraConfig::new(3, RandomSource::new(10));
        let y1 = lara_attention(&x, &cfg).unwrap().y;
        let y2 = lara_attention(&x.with_values(v2.clone()).unwrap(), &cfg).unwrap().y;
        let combo: Vec<f64> = x
            .v()
            .data()
            .iter()
            .zip(v2.data())
            .map(|(a, b)| 2.0 * a - 0.5 * b)
            .collect();
        let y3 = lara_attention(&x.with_values(RealMatrix::new(9, 3, combo).unwrap()).unwrap(), &cfg)
            .unwrap()
            .y;
        for ((a, b), c) in y1.data().iter().zip(y2.data()).zip(y3.data()) {
            assert!((2.0 * a - 0.5 * b - c).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let x = inputs(4, 4, 2, 11);
        let base = LaraConfig::new(2, RandomSource::new(0));
        assert!(lara_attention(&x, &LaraConfig { proposals: 0, ..base }).is_err());
        assert!(lara_attention(&x, &LaraConfig { proposals: 5, ..base }).is_err());
        for kind in [
            FeatureMapKind::HyperbolicPair,
            FeatureMapKind::TrigPair,
            FeatureMapKind::ShiftedCosine,
        ] {
            assert!(matches!(
                lara_attention(&x, &LaraConfig { kind, ..base }),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn diagnostics_recombine_exactly() {
        let x = inputs(15, 11, 4, 12);
        for weighting in [WeightingKind::CoupledOptimal, WeightingKind::default()] {
            let cfg = LaraConfig {
                weighting,
                ..LaraConfig::new(5, RandomSource::new(13))
            };
            let (set, diag) = lara_diagnostics(&x, &cfg).unwrap();
            assert_eq!(diag.recombine(&x, &set).unwrap(), lara_attention(&x, &cfg).unwrap());
        }
    }

    #[test]
    fn diagnostics_single_proposal() {
        let x = inputs(6, 6, 3, 14);
        let cfg = LaraConfig {
            weighting: WeightingKind::BalanceHeuristic,
            ..LaraConfig::new(1, RandomSource::new(15))
        };
        let (_, diag) = lara_diagnostics(&x, &cfg).unwrap();
        for q in &diag.queries {
            assert_eq!(q.alpha, vec![1.0]);
            let normalized = q.alpha_prime[0] / q.alpha_prime.iter().sum::<f64>();
            assert_eq!(normalized, 1.0);
        }
    }

    #[test]
    fn diagnostics_denominator_matches_naive_sum() {
        let x = inputs(7, 8, 3, 16);
        let cfg = LaraConfig::new(3, RandomSource::new(17));
        let (_, diag) = lara_diagnostics(&x, &cfg).unwrap();
        let half: Vec<f64> = x.key_half_sq_norms();
        for (n, qd) in diag.queries.iter().enumerate() {
            let q = x.q().row(n);
            let mut naive = 0.0;
            for (c, w) in diag.omegas.iter().enumerate() {
                let sample = FeatureSample::new(w.clone());
                let d_c: f64 = x
                    .k()
                    .iter_rows()
                    .zip(&half)
                    .map(|(k, h)| (crate::math::dot(w, k) - h).exp())
                    .sum();
                naive += qd.alpha_prime[c] * xi(FeatureMapKind::PositiveScalar, q, &sample).unwrap()[0] * d_c;
            }
            assert!((qd.denominator_value() - naive).abs() < 1e-12 * naive.abs().max(1.0));
        }
    }

    /// Tokens that drift slowly along the sequence, so that segment means
    /// summarise their segments well.
    fn smooth_inputs(len: usize, dim: usize, seed: u64) -> AttentionInputs {
        let mut d = RandomSource::new(seed).draws();
        let a: f64 = 0.9;
        let innovation = (1.0 - a * a).sqrt();
        let mut z = vec![0.0; len * dim];
        for t in 0..len {
            for j in 0..dim {
                let prev = if t == 0 { 0.0 } else { a * z[(t - 1) * dim + j] };
                let scale = if t == 0 { 1.0 } else { innovation };
                z[t * dim + j] = prev + scale * d.standard_normal();
            }
        }
        let z = RealMatrix::new(len, dim, z).unwrap();
        AttentionInputs::new(z.scaled(16.0), z.scaled(0.25), z, false)
            .unwrap()
            .with_query_scaling()
    }

    #[test]
    fn error_shrinks_with_more_proposals() {
        let x = smooth_inputs(128, 16, 18);
        let exact = softmax_attention(&x).unwrap().y;
        let grid = [8, 16, 32, 64, 128];
        let mut means = Vec::new();
        for c in grid {
            let mut total = 0.0;
            for seed in 0..20 {
                let cfg = LaraConfig::new(c, RandomSource::new(seed));
                let y = lara_attention(&x, &cfg).unwrap().y;
                total += y.mse(&exact).unwrap().sqrt();
            }
            means.push(total / 20.0);
        }
        let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(inversions <= 1, "{means:?}");
    }
}
