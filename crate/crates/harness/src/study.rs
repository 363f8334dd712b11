//! Approximation-error, unbiasedness and scaling studies.
//!
//! Every trial derives its own random streams from the top-level seed and
//! its index, so results do not depend on the number of workers.

use std::time::Instant;

use lara_core::{
    ra_attention, rfa_attention, softmax_attention, AttentionInputs, FeatureMapKind, FeatureSample,
    RaConfig, RandomSource, RealMatrix, RfaConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::measure_peak;
use crate::data::{generate_inputs, DataSpec, Generator};
use crate::error::{HarnessError, Result};
use crate::method::{run_method, Method, MethodSettings};
use crate::report::{fmt_f64, Aggregate, ExperimentReport, Metadata, Record, Report};
use crate::svg::{line_chart, Series};

/// Runs `f` on a pool of `workers` threads (0 means one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Seeds for one cell, so that `attend` can rerun it in isolation.
pub fn trial_seeds(seed: u64, study: &str, trial: usize) -> (u64, RandomSource) {
    let trial_rng = RandomSource::new(seed).split_named(study).split(trial as u64);
    (trial_rng.split_named("data").seed, trial_rng)
}

pub fn estimator_seed(trial_rng: RandomSource, method: Method, samples: usize) -> u64 {
    trial_rng.split_named(method.name()).split(samples as u64).seed
}

/// Estimator stream for head `h` of a cell.
pub fn head_rng(estimator_seed: u64, head: usize) -> RandomSource {
    RandomSource::new(estimator_seed).substream(head as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxErrorConfig {
    /// Shape and generator; the seed is replaced per trial.
    pub data: DataSpec,
    pub methods: Vec<Method>,
    pub grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub settings: MethodSettings,
}

impl ApproxErrorConfig {
    pub fn new(data: DataSpec, seed: u64) -> Self {
        Self {
            data,
            methods: vec![Method::Ra, Method::Lara, Method::Rfa],
            grid: vec![8, 16, 32, 64, 128],
            trials: 20,
            seed,
            settings: MethodSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(HarnessError::invalid("need at least one trial"));
        }
        if self.methods.is_empty() || self.grid.is_empty() {
            return Err(HarnessError::invalid("methods and grid must be non-empty"));
        }
        if self.grid.contains(&0) {
            return Err(HarnessError::invalid("grid values must be at least 1"));
        }
        self.data.validate()
    }
}

/// Samples a method actually draws at grid value `g`: RA always uses one.
fn samples_for(method: Method, g: usize) -> usize {
    match method {
        Method::Ra | Method::RaBiased => 1,
        _ => g,
    }
}

fn mse_over_heads(
    method: Method,
    heads: &[AttentionInputs],
    exact: &[RealMatrix],
    samples: usize,
    settings: &MethodSettings,
    seed: u64,
) -> lara_core::Result<f64> {
    let mut total = 0.0;
    for (h, (x, y)) in heads.iter().zip(exact).enumerate() {
        let out = run_method_core(method, x, samples, settings, head_rng(seed, h))?;
        total += out.mse(y)?;
    }
    Ok(total / heads.len() as f64)
}

fn run_method_core(
    method: Method,
    x: &AttentionInputs,
    samples: usize,
    settings: &MethodSettings,
    rng: RandomSource,
) -> lara_core::Result<RealMatrix> {
    match run_method(method, x, samples, settings, rng) {
        Ok(out) => Ok(out.y),
        Err(HarnessError::Core(e)) => Err(e),
        Err(e) => Err(lara_core::Error::Internal(e.to_string())),
    }
}

fn status_of<T>(r: &lara_core::Result<T>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => format!("error: {e}"),
    }
}

fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// MSE of each method against exact attention across a grid of sample counts.
pub fn approx_error_study(cfg: &ApproxErrorConfig, workers: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_trial: Vec<Result<Vec<Record>>> = with_workers(workers, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| approx_error_trial(cfg, t))
            .collect()
    })?;
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    // Method-major, then grid, then trial.
    let method_rank = |m: &str| cfg.methods.iter().position(|x| x.name() == m);
    let grid_rank = |g: usize| cfg.grid.iter().position(|&x| x == g);
    records.sort_by_key(|r| (method_rank(&r.method), grid_rank(r.grid), r.trial));

    let mut summary = Vec::new();
    for &method in &cfg.methods {
        for &g in &cfg.grid {
            let cell: Vec<&Record> = records
                .iter()
                .filter(|r| r.method == method.name() && r.grid == g)
                .collect();
            let values: Vec<f64> = cell.iter().filter_map(|r| r.mse).collect();
            let (mean_mse, se_mse) = mean_and_se(&values);
            summary.push(Aggregate {
                method: method.name().into(),
                grid: g,
                n: cfg.data.n,
                trials: cell.len(),
                failures: cell.len() - values.len(),
                mean_mse,
                se_mse,
                median_wall_time_s: None,
                peak_alloc_bytes: None,
            });
        }
    }
    Ok(ExperimentReport {
        metadata: Metadata::new("approx-error", cfg.seed, serde_json::to_value(cfg)?),
        records,
        summary,
    })
}

fn approx_error_trial(cfg: &ApproxErrorConfig, trial: usize) -> Result<Vec<Record>> {
    let (data_seed, trial_rng) = trial_seeds(cfg.seed, "approx-error", trial);
    let spec = DataSpec {
        seed: data_seed,
        ..cfg.data.clone()
    };
    let heads = generate_inputs(&spec)?;
    let exact: Vec<RealMatrix> = heads
        .iter()
        .map(|x| softmax_attention(x).map(|o| o.y))
        .collect::<lara_core::Result<_>>()?;
    let mut records = Vec::new();
    for &method in &cfg.methods {
        for &g in &cfg.grid {
            let samples = samples_for(method, g);
            let est_seed = estimator_seed(trial_rng, method, samples);
            let mse = mse_over_heads(method, &heads, &exact, samples, &cfg.settings, est_seed);
            records.push(Record {
                method: method.name().into(),
                grid: g,
                samples,
                n: spec.n,
                m: spec.m,
                d: spec.d,
                trial,
                generator: spec.generator.to_string(),
                settings: cfg.settings.describe(method, samples),
                data_seed,
                estimator_seed: est_seed,
                status: status_of(&mse),
                mse: mse.ok(),
                bias_norm: None,
                variance_trace: None,
                wall_time_s: None,
                peak_alloc_bytes: None,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnbiasedMethod {
    /// Single-sample unbiased RA against exact attention.
    Ra,
    /// Single-sample positive-feature kernel estimates of `exp(q_nᵀk_m)`.
    KernelEstimate,
    /// Single-sample RFA against exact attention; biased.
    Rfa,
    /// Exact attention against itself.
    Exact,
}

impl std::str::FromStr for UnbiasedMethod {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ra" | "ra-unbiased" => Ok(Self::Ra),
            "kernel" | "kernel-estimate" => Ok(Self::KernelEstimate),
            "rfa" => Ok(Self::Rfa),
            "exact" | "softmax" => Ok(Self::Exact),
            other => Err(HarnessError::invalid(format!("unknown unbiasedness method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessConfig {
    /// The fixed instance; its seed is used as given.
    pub data: DataSpec,
    pub method: UnbiasedMethod,
    pub trials: usize,
    pub seed: u64,
}

impl UnbiasednessConfig {
    pub fn new(method: UnbiasedMethod, seed: u64) -> Self {
        Self {
            data: DataSpec::new(2, 6, 4, Generator::IsotropicGaussian { scale: 1.0 }, seed),
            method,
            trials: 50_000,
            seed,
        }
    }
}

/// `|z|` at or below this counts as consistent with zero bias.
pub const Z_BAND: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryZ {
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub oracle: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub metadata: Metadata,
    pub entries: Vec<EntryZ>,
    /// Share of entries with `|z| ≤ 4`.
    pub fraction_within: f64,
    /// `‖grand mean − oracle‖₂`
    pub bias_norm: f64,
    /// Sum of per-entry sample variances.
    pub variance_trace: f64,
}

/// Trials are reduced in this many-sized chunks, in trial order.
const CHUNK: usize = 4096;

/// Grand mean, per-entry standard error and z-score against the oracle.
pub fn unbiasedness_study(cfg: &UnbiasednessConfig, workers: usize) -> Result<UnbiasednessReport> {
    if cfg.trials < 2 {
        return Err(HarnessError::invalid("need at least two trials"));
    }
    let mut spec = cfg.data.clone();
    spec.heads = 1;
    let x = generate_inputs(&spec)?.remove(0);
    let (oracle, cols) = match cfg.method {
        UnbiasedMethod::KernelEstimate => {
            let mut k = Vec::with_capacity(x.n_queries() * x.n_keys());
            for q in x.q().iter_rows() {
                for kk in x.k().iter_rows() {
                    k.push(lara_core::math::dot(q, kk).exp());
                }
            }
            (k, x.n_keys())
        }
        _ => (softmax_attention(&x)?.y.into_data(), x.dim()),
    };
    let root = RandomSource::new(cfg.seed).split_named("unbiasedness");
    let one = |t: usize| -> lara_core::Result<Vec<f64>> {
        let rng = root.split(t as u64);
        match cfg.method {
            UnbiasedMethod::Ra => Ok(ra_attention(&x, &RaConfig::new(rng))?.y.into_data()),
            UnbiasedMethod::Rfa => Ok(rfa_attention(&x, &RfaConfig::new(1, rng))?.y.into_data()),
            UnbiasedMethod::Exact => Ok(softmax_attention(&x)?.y.into_data()),
            UnbiasedMethod::KernelEstimate => {
                let mut draws = rng.draws();
                let mut omega = vec![0.0; x.dim()];
                draws.fill_standard_normal(&mut omega);
                let sample = [FeatureSample::new(omega)];
                let mut out = Vec::with_capacity(oracle.len());
                for q in x.q().iter_rows() {
                    for k in x.k().iter_rows() {
                        out.push(kernel_with(q, k, &sample)?);
                    }
                }
                Ok(out)
            }
        }
    };
    let len = oracle.len();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    let mut count = 0usize;
    let mut start = 0;
    while start < cfg.trials {
        let end = (start + CHUNK).min(cfg.trials);
        let chunk: Vec<lara_core::Result<Vec<f64>>> =
            with_workers(workers, || (start..end).into_par_iter().map(one).collect())?;
        for est in chunk {
            let est = est?;
            count += 1;
            for i in 0..len {
                let delta = est[i] - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (est[i] - mean[i]);
            }
        }
        start = end;
    }
    let n = count as f64;
    let mut entries = Vec::with_capacity(len);
    let mut bias_sq = 0.0;
    let mut variance_trace = 0.0;
    for i in 0..len {
        let var = m2[i] / (n - 1.0);
        let std_err = (var / n).sqrt();
        let diff = mean[i] - oracle[i];
        let z = if std_err > 0.0 {
            diff / std_err
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        bias_sq += diff * diff;
        variance_trace += var;
        entries.push(EntryZ {
            row: i / cols,
            col: i % cols,
            mean: mean[i],
            oracle: oracle[i],
            std_err,
            z,
        });
    }
    let within = entries.iter().filter(|e| e.z.abs() <= Z_BAND).count();
    Ok(UnbiasednessReport {
        metadata: Metadata::new("unbiasedness", cfg.seed, serde_json::to_value(cfg)?),
        fraction_within: within as f64 / len as f64,
        entries,
        bias_norm: bias_sq.sqrt(),
        variance_trace,
    })
}

fn kernel_with(q: &[f64], k: &[f64], samples: &[FeatureSample]) -> lara_core::Result<f64> {
    let fq = lara_core::xi(FeatureMapKind::PositiveScalar, q, &samples[0])?;
    let fk = lara_core::xi(FeatureMapKind::PositiveScalar, k, &samples[0])?;
    Ok(fq[0] * fk[0])
}

impl Report for UnbiasednessReport {
    fn stem(&self) -> &str {
        &self.metadata.command
    }

    fn csv_header(&self) -> Vec<&'static str> {
        vec!["row", "col", "mean", "oracle", "std_err", "z"]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                vec![
                    e.row.to_string(),
                    e.col.to_string(),
                    fmt_f64(e.mean),
                    fmt_f64(e.oracle),
                    fmt_f64(e.std_err),
                    fmt_f64(e.z),
                ]
            })
            .collect()
    }

    fn svg(&self) -> Option<String> {
        let series = [Series {
            label: "|z|".into(),
            points: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| (i as f64, e.z.abs().min(1e6)))
                .collect(),
        }];
        Some(line_chart("Per-entry |z| score", "entry", "|z|", &series))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub methods: Vec<Method>,
    /// `S` for RFA, `C` for LARA; RA draws one sample.
    pub samples: usize,
    pub d: usize,
    pub repeats: usize,
    pub seed: u64,
    pub generator: Generator,
    pub settings: MethodSettings,
    /// Cells whose estimated working set exceeds this are skipped.
    pub memory_budget_bytes: u64,
}

impl BenchConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            lengths: vec![1024, 2048, 4096],
            methods: vec![Method::Softmax, Method::Rfa, Method::Ra, Method::Lara],
            samples: 16,
            d: 64,
            repeats: 5,
            seed,
            generator: Generator::IsotropicGaussian { scale: 1.0 },
            settings: MethodSettings::default(),
            memory_budget_bytes: 8 << 30,
        }
    }
}

/// Rough upper bound on the bytes a method needs at sequence length `n`.
pub fn estimated_bytes(method: Method, n: usize, d: usize, samples: usize) -> u64 {
    let (n, d, s) = (n as u64, d as u64, samples as u64);
    let io = 8 * 4 * n * d;
    io + 8 * match method {
        Method::Softmax => n,
        Method::Ra | Method::RaBiased => 2 * n + d,
        Method::Rfa => s * (d + 2) + n,
        Method::Lara => s * (s + 3 * d + 4) + n * s,
    }
}

/// Median-of-`repeats` wall time and peak allocation per (method, N) with M = N.
pub fn scaling_benchmark(cfg: &BenchConfig) -> Result<ExperimentReport> {
    if cfg.lengths.is_empty() || cfg.methods.is_empty() {
        return Err(HarnessError::invalid("lengths and methods must be non-empty"));
    }
    if cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::invalid("lengths must be strictly ascending"));
    }
    if cfg.repeats == 0 || cfg.samples == 0 {
        return Err(HarnessError::invalid("repeats and samples must be at least 1"));
    }
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.lengths {
            let samples = samples_for(method, cfg.samples);
            let data_seed = RandomSource::new(cfg.seed).split_named("bench").split(n as u64).seed;
            let est_seed = RandomSource::new(cfg.seed).split_named(method.name()).seed;
            let base = Record {
                method: method.name().into(),
                grid: cfg.samples,
                samples,
                n,
                m: n,
                d: cfg.d,
                trial: 0,
                generator: cfg.generator.to_string(),
                settings: cfg.settings.describe(method, samples),
                data_seed,
                estimator_seed: est_seed,
                mse: None,
                bias_norm: None,
                variance_trace: None,
                wall_time_s: None,
                peak_alloc_bytes: None,
                status: "ok".into(),
            };
            let need = estimated_bytes(method, n, cfg.d, samples);
            if need > cfg.memory_budget_bytes {
                records.push(Record {
                    status: format!("skipped: needs about {need} bytes"),
                    ..base
                });
                summary.push(Aggregate {
                    method: method.name().into(),
                    grid: cfg.samples,
                    n,
                    trials: 0,
                    failures: 1,
                    mean_mse: None,
                    se_mse: None,
                    median_wall_time_s: None,
                    peak_alloc_bytes: None,
                });
                continue;
            }
            let x = generate_inputs(&DataSpec::new(n, n, cfg.d, cfg.generator.clone(), data_seed))?.remove(0);
            let rng = RandomSource::new(est_seed);
            // Warm-up, discarded.
            run_method(method, &x, samples, &cfg.settings, rng)?;
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut peak = None;
            for r in 0..cfg.repeats {
                let start = Instant::now();
                let (out, bytes) = measure_peak(|| run_method(method, &x, samples, &cfg.settings, rng));
                let elapsed = start.elapsed().as_secs_f64();
                out?;
                times.push(elapsed);
                peak = peak.max(bytes);
                records.push(Record {
                    trial: r,
                    wall_time_s: Some(elapsed),
                    peak_alloc_bytes: bytes,
                    ..base.clone()
                });
            }
            times.sort_by(f64::total_cmp);
            summary.push(Aggregate {
                method: method.name().into(),
                grid: cfg.samples,
                n,
                trials: cfg.repeats,
                failures: 0,
                mean_mse: None,
                se_mse: None,
                median_wall_time_s: Some(times[times.len() / 2]),
                peak_alloc_bytes: peak,
            });
        }
    }
    Ok(ExperimentReport {
        metadata: Metadata::new("bench", cfg.seed, serde_json::to_value(cfg)?).stamped(),
        records,
        summary,
    })
}

/// `median(N_hi) / median(N_lo)` for one method of a benchmark report.
pub fn time_ratio(report: &ExperimentReport, method: Method, lo: usize, hi: usize) -> Option<f64> {
    let t = |n| {
        report
            .aggregate(method.name(), report.summary.first()?.grid, n)?
            .median_wall_time_s
    };
    Some(t(hi)? / t(lo)?)
}
