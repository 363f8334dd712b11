//! The invariant suite behind `selftest` and the acceptance tests.
//!
//! Each check returns an outcome rather than panicking so that callers can
//! report every result. [`Budget::Quick`] shrinks the most expensive
//! sample counts for interactive use; thresholds never change.

use lara_core::features::kernel_estimate_with_error;
use lara_core::lara::{lara_attention_with, lara_samples, Weights};
use lara_core::math::{dot, logsumexp, sq_norm};
use lara_core::rfa::rfa_attention_with_samples;
use lara_core::weighting::mis_weights;
use lara_core::{
    build_proposals, compute_landmarks, f_n, lara_attention, query_affinity, ra_attention, ra_density,
    rfa_attention, softmax_attention, AttentionInputs, FeatureMapKind, FeatureSample, LaraConfig, Mode,
    ProposalKind, ProposalSet, RaConfig, RaVariant, RandomSource, RealMatrix, RfaConfig, WeightingKind,
};
use serde::{Deserialize, Serialize};

use crate::data::{DataSpec, Generator};
use crate::error::Result;
use crate::method::Method;
use crate::report::{Metadata, Report};
use crate::study::{
    approx_error_study, scaling_benchmark, time_ratio, unbiasedness_study, ApproxErrorConfig, BenchConfig,
    UnbiasedMethod, UnbiasednessConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Full,
    Quick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(id: u32, name: &str, passed: bool, detail: String) -> Self {
        Self {
            id,
            name: name.into(),
            passed,
            detail,
        }
    }

    fn failed(id: u32, name: &str, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn outcome(id: u32, name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome::new(id, name, passed, detail),
        Err(e) => CheckOutcome::failed(id, name, e),
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: RandomSource) -> RealMatrix {
    let mut d = rng.draws();
    let data = (0..rows * cols).map(|_| scale * d.standard_normal()).collect();
    RealMatrix::new(rows, cols, data).expect("finite")
}

fn random_inputs(n: usize, m: usize, d: usize, rng: RandomSource) -> AttentionInputs {
    AttentionInputs::new(
        random_matrix(n, d, 1.0, rng.split_named("q")),
        random_matrix(m, d, 1.0, rng.split_named("k")),
        random_matrix(m, d, 1.0, rng.split_named("v")),
        false,
    )
    .expect("valid shapes")
    .with_query_scaling()
}

fn max_abs_diff(a: &RealMatrix, b: &RealMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// 1. Positive random features estimate `exp(xᵀy)` without bias.
pub fn kernel_unbiasedness(seed: u64, budget: Budget) -> CheckOutcome {
    let name = "kernel unbiasedness";
    let samples = match budget {
        Budget::Full => 1_000_000,
        Budget::Quick => 100_000,
    };
    let root = RandomSource::new(seed).split_named("kernel-unbiasedness");
    let run = || -> Result<(bool, String)> {
        let mut draws = root.draws();
        // Uniform direction, radius uniform on [0, 2].
        let mut point = || {
            let mut v = vec![0.0; 16];
            draws.fill_standard_normal(&mut v);
            let r = 2.0 * draws.uniform() / sq_norm(&v).sqrt();
            v.iter_mut().for_each(|x| *x *= r);
            v
        };
        let mut within = 0;
        for i in 0..100u64 {
            let (x, y) = (point(), point());
            let est = kernel_estimate_with_error(FeatureMapKind::PositiveScalar, &x, &y, samples, &root.split(i))?;
            if (est.mean - dot(&x, &y).exp()).abs() <= 3.0 * est.std_err {
                within += 1;
            }
        }
        Ok((within >= 95, format!("{within}/100 within 3 s.e. (S = {samples})")))
    };
    outcome(1, name, run())
}

/// 2. The grand mean of single-sample RA matches exact attention.
pub fn ra_unbiasedness(seed: u64, budget: Budget, workers: usize) -> CheckOutcome {
    let name = "RA unbiasedness";
    let trials = match budget {
        Budget::Full => 50_000,
        Budget::Quick => 10_000,
    };
    let run = || -> Result<(bool, String)> {
        let cfg = UnbiasednessConfig {
            trials,
            ..UnbiasednessConfig::new(UnbiasedMethod::Ra, seed)
        };
        let report = unbiasedness_study(&cfg, workers)?;
        let max_z = report.entries.iter().map(|e| e.z.abs()).fold(0.0, f64::max);
        Ok((
            report.fraction_within >= 0.95,
            format!(
                "{:.3} of {} entries with |z| <= 4, max |z| {max_z:.3} ({trials} trials)",
                report.fraction_within,
                report.entries.len()
            ),
        ))
    };
    outcome(2, name, run())
}

/// 3. The mixture density equals its unnormalized kernel form.
pub fn density_equivalence(seed: u64) -> CheckOutcome {
    let name = "density equivalence";
    let root = RandomSource::new(seed).split_named("density-equivalence");
    let run = || -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for i in 0..10u64 {
            let rng = root.split(i);
            let mut draws = rng.draws();
            let m = 1 + (draws.uniform() * 8.0) as usize;
            let d = 1 + (draws.uniform() * 8.0) as usize;
            let x = random_inputs(2, m, d, rng.split_named("inputs"));
            let density = ra_density(&x, 0)?;
            let q = x.q().row(0);
            let qk: Vec<f64> = x.k().iter_rows().map(|k| dot(q, k)).collect();
            let log_norm = logsumexp(&qk)?;
            for _ in 0..20 {
                let mut omega = vec![0.0; d];
                draws.fill_standard_normal(&mut omega);
                omega.iter_mut().zip(q).for_each(|(w, qi)| *w = 1.5 * *w + qi);
                let key_terms: Vec<f64> = x
                    .k()
                    .iter_rows()
                    .map(|k| dot(&omega, k) - 0.5 * sq_norm(k))
                    .collect();
                let kernel_form = -0.5 * sq_norm(&omega) - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                    + dot(&omega, q)
                    - 0.5 * sq_norm(q)
                    + logsumexp(&key_terms)?
                    - log_norm;
                let rel = (density.logpdf(&omega)? - kernel_form).exp_m1().abs();
                worst = worst.max(rel);
            }
        }
        Ok((worst <= 1e-8, format!("max relative difference {worst:.3e} over 200 probes")))
    };
    outcome(3, name, run())
}

/// 4. Every weighting kind sums to one at every point.
pub fn partition_of_unity(seed: u64) -> CheckOutcome {
    let name = "MIS partition of unity";
    let root = RandomSource::new(seed).split_named("partition-of-unity");
    let kinds = [
        WeightingKind::BalanceHeuristic,
        WeightingKind::CoupledOptimal,
        WeightingKind::DecoupledOptimal { beta: 1.0 },
        WeightingKind::DecoupledOptimal { beta: 2.0 },
    ];
    let run = || -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        let mut evaluated = 0;
        for i in 0..50u64 {
            let rng = root.split(i);
            let mut draws = rng.draws();
            let n = 4 + (draws.uniform() * 28.0) as usize;
            let d = 1 + (draws.uniform() * 8.0) as usize;
            let c = 1 + (draws.uniform() * n.min(8) as f64) as usize;
            let kind = [
                ProposalKind::GaussianLocal,
                ProposalKind::GaussianFullKeys,
                ProposalKind::GaussianKeyLandmarkAttn,
                ProposalKind::MixturePerSegment,
            ][i as usize % 4];
            let x = random_inputs(n, n, d, rng.split_named("inputs"));
            let landmarks = compute_landmarks(&x, c)?;
            let set = build_proposals(&landmarks, x.k(), kind)?;
            let affinity = query_affinity(x.q(), &landmarks)?;
            for _ in 0..20 {
                let source = (draws.uniform() * c as f64) as usize;
                let omega = set.proposals()[source.min(c - 1)].draw(&mut draws);
                let query = (draws.uniform() * n as f64) as usize;
                for weighting in kinds {
                    let a = mis_weights(weighting, &set, &affinity, query.min(n - 1), &omega)?;
                    worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
                    evaluated += 1;
                }
            }
        }
        Ok((
            worst <= 1e-10,
            format!("max |sum - 1| = {worst:.3e} over {evaluated} evaluations"),
        ))
    };
    outcome(4, name, run())
}

/// 5. LARA with standard-normal proposals and constant weights is RFA.
pub fn rfa_special_case(seed: u64) -> CheckOutcome {
    let name = "LARA reduces to RFA";
    let root = RandomSource::new(seed).split_named("rfa-special-case");
    let run = || -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for i in 0..20u64 {
            let rng = root.split(i);
            let mut draws = rng.draws();
            let n = 2 + (draws.uniform() * 30.0) as usize;
            let m = 1 + (draws.uniform() * 30.0) as usize;
            let d = 1 + (draws.uniform() * 16.0) as usize;
            let c = 1 + (draws.uniform() * 16.0) as usize;
            let x = random_inputs(n, m, d, rng.split_named("inputs"));
            let set = ProposalSet::from_means(&RealMatrix::zeros(c, d))?;
            let omegas: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let mut w = vec![0.0; d];
                    draws.fill_standard_normal(&mut w);
                    w
                })
                .collect();
            let lara = lara_attention_with(&x, &set, Weights::Constant, &omegas)?.y;
            let samples: Vec<FeatureSample> = omegas.into_iter().map(FeatureSample::new).collect();
            let rfa = rfa_attention_with_samples(&x, FeatureMapKind::PositiveScalar, &samples)?.y;
            worst = worst.max(max_abs_diff(&lara, &rfa));
        }
        Ok((worst <= 1e-10, format!("max |LARA - RFA| = {worst:.3e} over 20 instances")))
    };
    outcome(5, name, run())
}

/// 6. Single keys and single proposals make the estimators exact.
pub fn degeneracies(seed: u64) -> CheckOutcome {
    let name = "exactness degeneracies";
    let root = RandomSource::new(seed).split_named("degeneracies");
    let run = || -> Result<(bool, String)> {
        let mut worst_m1: f64 = 0.0;
        for i in 0..10u64 {
            let rng = root.split(i);
            let x = random_inputs(7, 1, 5, rng.split_named("inputs"));
            let est = rng.split_named("estimators");
            let outputs = [
                softmax_attention(&x)?.y,
                rfa_attention(&x, &RfaConfig::new(8, est))?.y,
                ra_attention(&x, &RaConfig::new(est))?.y,
                ra_attention(
                    &x,
                    &RaConfig {
                        variant: RaVariant::Biased,
                        ..RaConfig::new(est)
                    },
                )?
                .y,
                ra_attention(
                    &x,
                    &RaConfig {
                        variant: RaVariant::Biased,
                        mode: Mode::Eval,
                        ..RaConfig::new(est)
                    },
                )?
                .y,
                lara_attention(&x, &LaraConfig::new(1, est))?.y,
            ];
            for y in &outputs {
                for row in y.iter_rows() {
                    for (a, b) in row.iter().zip(x.v().row(0)) {
                        worst_m1 = worst_m1.max((a - b).abs());
                    }
                }
            }
        }
        let mut worst_c1: f64 = 0.0;
        for i in 0..10u64 {
            let rng = root.split(100 + i);
            let x = random_inputs(9, 11, 4, rng.split_named("inputs"));
            let cfg = LaraConfig {
                weighting: WeightingKind::BalanceHeuristic,
                ..LaraConfig::new(1, rng.split_named("estimator"))
            };
            let (_, _, omegas) = lara_samples(&x, &cfg)?;
            let y = lara_attention(&x, &cfg)?.y;
            for n in 0..x.n_queries() {
                let f = f_n(&x, n, &omegas[0])?;
                for (a, b) in y.row(n).iter().zip(&f) {
                    worst_c1 = worst_c1.max((a - b).abs());
                }
            }
        }
        Ok((
            worst_m1 <= 1e-12 && worst_c1 <= 1e-12,
            format!("M = 1 max deviation {worst_m1:.3e}; C = 1 max deviation from f_n {worst_c1:.3e}"),
        ))
    };
    outcome(6, name, run())
}

/// Data used by the error studies.
pub fn study_data(n: usize, d: usize) -> DataSpec {
    DataSpec::new(n, n, d, Generator::SMOOTH_DEFAULT, 0)
}

/// 7. RA beats LARA beats RFA at every grid point, and LARA improves with C.
pub fn error_ordering(seed: u64, workers: usize) -> CheckOutcome {
    let name = "approximation error ordering";
    let run = || -> Result<(bool, String)> {
        let cfg = ApproxErrorConfig::new(study_data(196, 16), seed);
        let report = approx_error_study(&cfg, workers)?;
        let mut ok = true;
        let mut parts = Vec::new();
        let mut lara_curve = Vec::new();
        for &g in &cfg.grid {
            let (ra, lara, rfa) = (
                report.mean_mse("ra", g),
                report.mean_mse("lara", g),
                report.mean_mse("rfa", g),
            );
            match (ra, lara, rfa) {
                (Some(ra), Some(lara), Some(rfa)) => {
                    ok &= ra < lara && lara < rfa;
                    lara_curve.push(lara);
                    parts.push(format!("{g}: ra {ra:.3e} < lara {lara:.3e} < rfa {rfa:.3e}"));
                }
                _ => {
                    ok = false;
                    parts.push(format!("{g}: failed cells"));
                }
            }
        }
        let decreasing = lara_curve.len() == cfg.grid.len() && lara_curve.windows(2).all(|w| w[1] < w[0]);
        Ok((
            ok && decreasing,
            format!("{}; LARA strictly decreasing: {decreasing}", parts.join("; ")),
        ))
    };
    outcome(7, name, run())
}

/// 8. RFA and LARA errors fall as samples grow, with at most one inversion.
pub fn consistency(seed: u64, workers: usize) -> CheckOutcome {
    let name = "consistency curves";
    let run = || -> Result<(bool, String)> {
        let cfg = ApproxErrorConfig {
            methods: vec![Method::Rfa, Method::Lara],
            grid: vec![16, 64, 256, 1024],
            ..ApproxErrorConfig::new(study_data(1024, 16), seed)
        };
        let report = approx_error_study(&cfg, workers)?;
        let mut ok = true;
        let mut parts = Vec::new();
        for method in ["rfa", "lara"] {
            let curve: Vec<Option<f64>> = cfg.grid.iter().map(|&g| report.mean_mse(method, g)).collect();
            let complete: Option<Vec<f64>> = curve.into_iter().collect();
            match complete {
                Some(curve) => {
                    let inversions = curve.windows(2).filter(|w| w[1] > w[0]).count();
                    ok &= inversions <= 1;
                    let shown: Vec<String> = curve.iter().map(|v| format!("{v:.3e}")).collect();
                    parts.push(format!("{method} [{}] inversions {inversions}", shown.join(", ")));
                }
                None => {
                    ok = false;
                    parts.push(format!("{method}: failed cells"));
                }
            }
        }
        Ok((ok, parts.join("; ")))
    };
    outcome(8, name, run())
}

/// 9. Quadratic methods scale super-linearly, linear ones do not.
pub fn scaling(seed: u64) -> CheckOutcome {
    let name = "complexity scaling";
    let run = || -> Result<(bool, String)> {
        let cfg = BenchConfig {
            lengths: vec![1024, 2048, 4096],
            ..BenchConfig::new(seed)
        };
        let report = scaling_benchmark(&cfg)?;
        let mut ok = true;
        let mut parts = Vec::new();
        for (method, quadratic) in [
            (Method::Softmax, true),
            (Method::Ra, true),
            (Method::Rfa, false),
            (Method::Lara, false),
        ] {
            match time_ratio(&report, method, 1024, 4096) {
                Some(r) => {
                    ok &= if quadratic { r > 8.0 } else { r < 6.0 };
                    parts.push(format!("{method} {r:.2} ({} {})", if quadratic { ">" } else { "<" }, if quadratic { 8 } else { 6 }));
                }
                None => {
                    ok = false;
                    parts.push(format!("{method}: missing timing"));
                }
            }
        }
        Ok((ok, format!("time(4096)/time(1024): {}", parts.join(", "))))
    };
    outcome(9, name, run())
}

/// 10. Studies are byte-reproducible and independent of the worker count.
pub fn determinism(seed: u64) -> CheckOutcome {
    let name = "determinism";
    let run = || -> Result<(bool, String)> {
        let cfg = ApproxErrorConfig {
            trials: 6,
            grid: vec![4, 8],
            ..ApproxErrorConfig::new(study_data(48, 8), seed)
        };
        let a = approx_error_study(&cfg, 1)?;
        let b = approx_error_study(&cfg, 4)?;
        let c = approx_error_study(&cfg, 1)?;
        let approx_same = a.csv_bytes()? == b.csv_bytes()?
            && a.json_bytes()? == b.json_bytes()?
            && a.json_bytes()? == c.json_bytes()?;
        let ucfg = UnbiasednessConfig {
            trials: 3000,
            ..UnbiasednessConfig::new(UnbiasedMethod::Ra, seed)
        };
        let u1 = unbiasedness_study(&ucfg, 1)?;
        let u4 = unbiasedness_study(&ucfg, 4)?;
        let unbiased_same = u1.csv_bytes()? == u4.csv_bytes()? && u1.json_bytes()? == u4.json_bytes()?;
        Ok((
            approx_same && unbiased_same,
            format!("approx-error identical: {approx_same}; unbiasedness identical: {unbiased_same}"),
        ))
    };
    outcome(10, name, run())
}

/// Every check except timing, which is machine dependent.
pub fn selftest_checks(seed: u64, budget: Budget, workers: usize) -> Vec<CheckOutcome> {
    vec![
        kernel_unbiasedness(seed, budget),
        ra_unbiasedness(seed, budget, workers),
        density_equivalence(seed),
        partition_of_unity(seed),
        rfa_special_case(seed),
        degeneracies(seed),
        error_ordering(seed, workers),
        consistency(seed, workers),
        determinism(seed),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub metadata: Metadata,
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn run(seed: u64, budget: Budget, workers: usize) -> Self {
        Self {
            metadata: Metadata::new(
                "selftest",
                seed,
                serde_json::json!({ "budget": budget, "seed": seed }),
            ),
            checks: selftest_checks(seed, budget, workers),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl Report for SelftestReport {
    fn stem(&self) -> &str {
        &self.metadata.command
    }

    fn csv_header(&self) -> Vec<&'static str> {
        vec!["id", "name", "passed", "detail"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.checks
            .iter()
            .map(|c| vec![c.id.to_string(), c.name.clone(), c.passed.to_string(), c.detail.clone()])
            .collect()
    }

    fn svg(&self) -> Option<String> {
        None
    }
}
