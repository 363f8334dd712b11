//! Synthetic and file-backed attention inputs.

use std::path::PathBuf;
use std::str::FromStr;

use lara_core::{AttentionInputs, RandomSource, RealMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::tensor::read_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    /// Independent `N(0, scale²)` queries and keys, standard normal values.
    IsotropicGaussian { scale: f64 },
    /// Unit-variance rows whose columns share a common factor, giving
    /// inter-column correlation `rho`.
    CorrelatedGaussian { rho: f64 },
    /// Latent tokens `z_t = a z_{t-1} + √(1−a²) ε_t` shared by queries
    /// (`query_scale · z`), keys (`key_scale · z`) and values (`z`).
    SmoothTokens {
        smoothness: f64,
        query_scale: f64,
        key_scale: f64,
    },
    FromFile { q: PathBuf, k: PathBuf, v: PathBuf },
}

impl Generator {
    pub const SMOOTH_DEFAULT: Generator = Generator::SmoothTokens {
        smoothness: 0.9,
        query_scale: 16.0,
        key_scale: 0.25,
    };

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(HarnessError::invalid(format!("{name} must be positive, got {x}")))
            }
        };
        match *self {
            Generator::IsotropicGaussian { scale } => positive("scale", scale),
            Generator::CorrelatedGaussian { rho } => {
                if (0.0..1.0).contains(&rho) {
                    Ok(())
                } else {
                    Err(HarnessError::invalid(format!("rho must lie in [0, 1), got {rho}")))
                }
            }
            Generator::SmoothTokens {
                smoothness,
                query_scale,
                key_scale,
            } => {
                if !(0.0..1.0).contains(&smoothness) {
                    return Err(HarnessError::invalid(format!(
                        "smoothness must lie in [0, 1), got {smoothness}"
                    )));
                }
                positive("query-scale", query_scale)?;
                positive("key-scale", key_scale)
            }
            Generator::FromFile { .. } => Ok(()),
        }
    }
}

/// Parses `isotropic[:scale=S]`, `correlated[:rho=R]` or
/// `smooth[:smoothness=A,query-scale=Q,key-scale=K]`.
impl FromStr for Generator {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let mut values = Vec::new();
        for part in params.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| HarnessError::invalid(format!("expected key=value, got '{part}'")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| HarnessError::invalid(format!("'{value}' is not a number")))?;
            values.push((key, value));
        }
        let mut take = |key: &str, default: f64| {
            match values.iter().position(|(k, _)| *k == key) {
                Some(i) => values.remove(i).1,
                None => default,
            }
        };
        let generator = match name {
            "isotropic" => Generator::IsotropicGaussian {
                scale: take("scale", 1.0),
            },
            "correlated" => Generator::CorrelatedGaussian {
                rho: take("rho", 0.5),
            },
            "smooth" => Generator::SmoothTokens {
                smoothness: take("smoothness", 0.9),
                query_scale: take("query-scale", 16.0),
                key_scale: take("key-scale", 0.25),
            },
            other => return Err(HarnessError::invalid(format!("unknown generator '{other}'"))),
        };
        if let Some((key, _)) = values.first() {
            return Err(HarnessError::invalid(format!("unknown parameter '{key}' for {name}")));
        }
        generator.validate()?;
        Ok(generator)
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Generator::IsotropicGaussian { scale } => write!(f, "isotropic:scale={scale}"),
            Generator::CorrelatedGaussian { rho } => write!(f, "correlated:rho={rho}"),
            Generator::SmoothTokens {
                smoothness,
                query_scale,
                key_scale,
            } => write!(
                f,
                "smooth:smoothness={smoothness},query-scale={query_scale},key-scale={key_scale}"
            ),
            Generator::FromFile { q, k, v } => {
                write!(f, "files:{},{},{}", q.display(), k.display(), v.display())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub generator: Generator,
    pub heads: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn new(n: usize, m: usize, d: usize, generator: Generator, seed: u64) -> Self {
        Self {
            n,
            m,
            d,
            generator,
            heads: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(HarnessError::invalid("N, M and D must all be at least 1"));
        }
        if self.heads == 0 {
            return Err(HarnessError::invalid("need at least one head"));
        }
        if matches!(self.generator, Generator::FromFile { .. }) && self.heads != 1 {
            return Err(HarnessError::invalid("file inputs hold a single head"));
        }
        self.generator.validate()
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: RandomSource) -> RealMatrix {
    let mut draws = rng.draws();
    let data = (0..rows * cols).map(|_| scale * draws.standard_normal()).collect();
    RealMatrix::new(rows, cols, data).expect("finite draws")
}

fn correlated(rows: usize, cols: usize, rho: f64, rng: RandomSource) -> RealMatrix {
    let mut draws = rng.draws();
    let (own, shared) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let common = shared * draws.standard_normal();
        data.extend((0..cols).map(|_| own * draws.standard_normal() + common));
    }
    RealMatrix::new(rows, cols, data).expect("finite draws")
}

fn smooth_tokens(len: usize, dim: usize, a: f64, rng: RandomSource) -> RealMatrix {
    let mut draws = rng.draws();
    let innovation = (1.0 - a * a).sqrt();
    let mut data = vec![0.0; len * dim];
    draws.fill_standard_normal(&mut data[..dim]);
    for t in 1..len {
        for j in 0..dim {
            data[t * dim + j] = a * data[(t - 1) * dim + j] + innovation * draws.standard_normal();
        }
    }
    RealMatrix::new(len, dim, data).expect("finite draws")
}

fn head_inputs(spec: &DataSpec, head: usize) -> Result<AttentionInputs> {
    let root = RandomSource::new(spec.seed).split(head as u64);
    let (n, m, d) = (spec.n, spec.m, spec.d);
    let (q, k, v) = match &spec.generator {
        Generator::IsotropicGaussian { scale } => (
            gaussian(n, d, *scale, root.split_named("q")),
            gaussian(m, d, *scale, root.split_named("k")),
            gaussian(m, d, 1.0, root.split_named("v")),
        ),
        Generator::CorrelatedGaussian { rho } => (
            correlated(n, d, *rho, root.split_named("q")),
            correlated(m, d, *rho, root.split_named("k")),
            gaussian(m, d, 1.0, root.split_named("v")),
        ),
        Generator::SmoothTokens {
            smoothness,
            query_scale,
            key_scale,
        } => {
            let z = smooth_tokens(n.max(m), d, *smoothness, root.split_named("tokens"));
            let rows = |count: usize, scale: f64| {
                let data = z.data()[..count * d].iter().map(|x| scale * x).collect();
                RealMatrix::new(count, d, data).expect("finite")
            };
            (rows(n, *query_scale), rows(m, *key_scale), rows(m, 1.0))
        }
        Generator::FromFile { q, k, v } => {
            let (q, k, v) = (read_tensor(q)?, read_tensor(k)?, read_tensor(v)?);
            let shapes = [(q.rows(), q.cols()), (k.rows(), k.cols()), (v.rows(), v.cols())];
            if shapes != [(n, d), (m, d), (m, d)] {
                return Err(HarnessError::invalid(format!(
                    "file shapes {shapes:?} do not match N={n}, M={m}, D={d}"
                )));
            }
            (q, k, v)
        }
    };
    Ok(AttentionInputs::new(q, k, v, false)?.with_query_scaling())
}

/// One set of inputs per head, with `1/√D` folded into the queries.
pub fn generate_inputs(spec: &DataSpec) -> Result<Vec<AttentionInputs>> {
    spec.validate()?;
    (0..spec.heads).map(|h| head_inputs(spec, h)).collect()
}
