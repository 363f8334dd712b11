//! Command-line interface of the `lara` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lara_core::{softmax_attention, FeatureMapKind, Mode, ProposalKind, RandomSource, WeightingKind};
use serde_json::Value;

use crate::checks::{Budget, SelftestReport};
use crate::data::{generate_inputs, DataSpec, Generator};
use crate::error::{exit, HarnessError, Result};
use crate::method::{run_method, Method, MethodSettings};
use crate::report::{emit_report, ExperimentReport, Format, Report};
use crate::study::{
    approx_error_study, scaling_benchmark, unbiasedness_study, with_workers, ApproxErrorConfig, BenchConfig,
    UnbiasedMethod, UnbiasednessConfig,
};
use crate::tensor::{read_tensor, write_tensor};

#[derive(Debug, Parser)]
#[command(name = "lara", version, about = "Softmax attention and its Monte Carlo estimators")]
pub struct Cli {
    /// Top-level seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for trials (0 uses every core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Report formats, comma separated: csv, json, svg.
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// JSON file whose keys mirror the long flags; flags given on the
    /// command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one estimator on one set of inputs.
    Attend(AttendArgs),
    /// Mean squared error against exact attention over a sample-count grid.
    ApproxError(ApproxErrorArgs),
    /// z-scores of a grand mean against its oracle.
    Unbiasedness(UnbiasednessArgs),
    /// Wall time and peak allocation against sequence length.
    Bench(BenchArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Synthetic generator: isotropic[:scale=S], correlated[:rho=R] or
    /// smooth[:smoothness=A,query-scale=Q,key-scale=K].
    #[arg(long = "gen")]
    pub generator: Option<Generator>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Keys; defaults to N.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    /// mixture, full-keys, local or key-landmark-attn.
    #[arg(long)]
    pub proposal_kind: Option<ProposalKind>,
    /// balance, coupled or decoupled.
    #[arg(long)]
    pub weighting: Option<String>,
    /// Correction scale of the decoupled weighting.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// train or eval.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Random feature map used by RFA: positive, hyperbolic, trig or cosine.
    #[arg(long)]
    pub feature_map: Option<FeatureMapKind>,
}

impl EstimatorArgs {
    fn settings(&self) -> Result<MethodSettings> {
        let beta = self.beta.unwrap_or(1.0);
        let weighting = match &self.weighting {
            Some(name) => WeightingKind::parse(name, beta)?,
            None => WeightingKind::DecoupledOptimal { beta },
        };
        weighting.validate()?;
        Ok(MethodSettings {
            feature_map: self.feature_map.unwrap_or_default(),
            proposal_kind: self.proposal_kind.unwrap_or_default(),
            weighting,
            mode: self.mode.unwrap_or_default(),
        })
    }
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[arg(long, requires_all = ["k", "v"], conflicts_with = "generator")]
    pub q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    pub k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    pub v: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for synthetic inputs; defaults to one derived from --seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// softmax, rfa, ra, ra-biased or lara.
    #[arg(long)]
    pub method: Option<Method>,
    /// Samples for RFA and RA.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Proposals for LARA.
    #[arg(long)]
    pub proposals: Option<usize>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// Write the output to this tensor file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApproxErrorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Sample counts (proposal counts for LARA).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Args)]
pub struct UnbiasednessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// ra, kernel, rfa or exact.
    #[arg(long)]
    pub method: Option<UnbiasedMethod>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths, ascending; M = N at every point.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// S for RFA, C for LARA.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long = "gen")]
    pub generator: Option<Generator>,
    /// Cells estimated to need more bytes than this are skipped.
    #[arg(long)]
    pub memory_budget: Option<u64>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Use the full sample counts of the acceptance suite.
    #[arg(long)]
    pub full: bool,
}

/// Global settings after defaults are applied.
struct Globals {
    seed: u64,
    workers: usize,
    formats: Vec<Format>,
    out_dir: PathBuf,
}

impl Globals {
    fn from(cli: &Cli) -> Self {
        Self {
            seed: cli.seed.unwrap_or(0),
            workers: cli.workers.unwrap_or(0),
            formats: cli
                .format
                .clone()
                .unwrap_or_else(|| vec![Format::Csv, Format::Json, Format::Svg]),
            out_dir: cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
        }
    }
}

fn long_flag(key: &str, value: &Value) -> Result<Vec<String>> {
    let flag = format!("--{key}");
    let scalar = |v: &Value| -> Result<String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            other => Err(HarnessError::invalid(format!("config key '{key}': unsupported value {other}"))),
        }
    };
    Ok(match value {
        Value::Bool(true) => vec![flag],
        Value::Bool(false) | Value::Null => vec![],
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
            vec![format!("{flag}={}", parts.join(","))]
        }
        other => vec![format!("{flag}={}", scalar(other)?)],
    })
}

fn explicit(matches: &ArgMatches, id: &str) -> bool {
    matches!(matches.try_get_raw(id), Ok(Some(_))) && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// Appends flags from the config file that the command line did not set.
fn merge_config(argv: &mut Vec<OsString>, matches: &ArgMatches, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| HarnessError::invalid(format!("{}: {e}", path.display())))?;
    let Value::Object(entries) = value else {
        return Err(HarnessError::invalid(format!("{}: expected a JSON object", path.display())));
    };
    let root = Cli::command();
    let (sub_name, sub_matches) = matches
        .subcommand()
        .ok_or_else(|| HarnessError::invalid("missing subcommand"))?;
    let sub = root
        .find_subcommand(sub_name)
        .ok_or_else(|| HarnessError::invalid("unknown subcommand"))?;
    let find = |cmd: &clap::Command, key: &str| {
        cmd.get_arguments()
            .find(|a| a.get_long() == Some(key))
            .map(|a| a.get_id().to_string())
    };
    for (key, value) in &entries {
        if key == "config" {
            return Err(HarnessError::invalid("config files cannot nest"));
        }
        let id = find(sub, key).or_else(|| find(&root, key));
        let Some(id) = id else {
            let elsewhere = root.get_subcommands().any(|c| find(c, key).is_some());
            if elsewhere {
                continue;
            }
            return Err(HarnessError::invalid(format!("unknown config key '{key}'")));
        };
        if explicit(sub_matches, &id) || explicit(matches, &id) {
            continue;
        }
        argv.extend(long_flag(key, value)?.into_iter().map(OsString::from));
    }
    Ok(())
}

/// Parses `argv`, folding in `--config` when present.
pub fn parse(argv: Vec<OsString>) -> std::result::Result<Result<Cli>, clap::Error> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Ok(Ok(Cli::from_arg_matches(&matches)?));
    };
    let mut argv = argv;
    if let Err(e) = merge_config(&mut argv, &matches, &path) {
        return Ok(Err(e));
    }
    let matches = Cli::command().try_get_matches_from(&argv)?;
    Ok(Ok(Cli::from_arg_matches(&matches)?))
}

/// Entry point; returns the process exit code.
pub fn main_with(argv: Vec<OsString>) -> i32 {
    let cli = match parse(argv) {
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::INVALID_ARGS } else { exit::OK };
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
        Ok(Ok(cli)) => cli,
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let g = Globals::from(cli);
    match &cli.command {
        Command::Attend(args) => attend(args, &g),
        Command::ApproxError(args) => approx_error(args, &g),
        Command::Unbiasedness(args) => unbiasedness(args, &g),
        Command::Bench(args) => bench(args, &g),
        Command::Selftest(args) => selftest(args, &g),
    }
}

fn write_reports<R: Report>(report: &R, g: &Globals) -> Result<()> {
    for path in emit_report(report, &g.formats, &g.out_dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Overlays the data flags onto `base`; M follows N unless given.
fn data_spec(args: &DataArgs, base: DataSpec) -> DataSpec {
    let n = args.n.unwrap_or(base.n);
    let m = args.m.unwrap_or(if args.n.is_some() { n } else { base.m });
    DataSpec {
        n,
        m,
        d: args.d.unwrap_or(base.d),
        generator: args.generator.clone().unwrap_or(base.generator),
        heads: args.heads.unwrap_or(base.heads),
        seed: base.seed,
    }
}

fn attend(args: &AttendArgs, g: &Globals) -> Result<i32> {
    let data_seed = args
        .data_seed
        .unwrap_or_else(|| RandomSource::new(g.seed).split_named("data").seed);
    let spec = match (&args.q, &args.k, &args.v) {
        (Some(q), Some(k), Some(v)) => {
            let (qm, km) = (read_tensor(q)?, read_tensor(k)?);
            DataSpec::new(
                qm.rows(),
                km.rows(),
                qm.cols(),
                Generator::FromFile {
                    q: q.clone(),
                    k: k.clone(),
                    v: v.clone(),
                },
                data_seed,
            )
        }
        _ => data_spec(
            &args.data,
            DataSpec::new(64, 64, 16, Generator::IsotropicGaussian { scale: 1.0 }, data_seed),
        ),
    };
    let method = args.method.unwrap_or(Method::Lara);
    let samples = match method {
        Method::Lara => args.proposals.unwrap_or(16),
        Method::Ra | Method::RaBiased => args.samples.unwrap_or(1),
        _ => args.samples.unwrap_or(16),
    };
    let settings = args.estimator.settings()?;
    let heads = generate_inputs(&spec)?;
    let mut mses = Vec::with_capacity(heads.len());
    for (h, x) in heads.iter().enumerate() {
        let y = run_method(method, x, samples, &settings, crate::study::head_rng(g.seed, h))?.y;
        mses.push(y.mse(&softmax_attention(x)?.y)?);
        if let Some(out) = &args.out {
            let path = if heads.len() == 1 {
                out.clone()
            } else {
                out.with_extension(format!("h{h}.bin"))
            };
            write_tensor(&path, &y)?;
        }
    }
    let summary = serde_json::json!({
        "method": method,
        "samples": samples,
        "settings": settings.describe(method, samples),
        "n": spec.n,
        "m": spec.m,
        "d": spec.d,
        "data_seed": data_seed,
        "estimator_seed": g.seed,
        "mse_vs_softmax": mses,
    });
    println!("{summary}");
    Ok(exit::OK)
}

fn print_summary(report: &ExperimentReport, timing: bool) {
    let (value, spread) = if timing { ("median time s", "") } else { ("mean mse", "std err") };
    println!("{:<10} {:>6} {:>8} {:>24} {:>24}", "method", "grid", "n", value, spread);
    for a in &report.summary {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<10} {:>6} {:>8} {:>24} {:>24}{}",
            a.method,
            a.grid,
            a.n,
            cell(if timing { a.median_wall_time_s } else { a.mean_mse }),
            if timing { String::new() } else { cell(a.se_mse) },
            if a.failures > 0 {
                format!("  ({} failed)", a.failures)
            } else {
                String::new()
            }
        );
    }
}

fn approx_error(args: &ApproxErrorArgs, g: &Globals) -> Result<i32> {
    let defaults = ApproxErrorConfig::new(
        data_spec(&args.data, DataSpec::new(196, 196, 16, Generator::SMOOTH_DEFAULT, 0)),
        g.seed,
    );
    let cfg = ApproxErrorConfig {
        methods: args.methods.clone().unwrap_or(defaults.methods.clone()),
        grid: args.grid.clone().unwrap_or(defaults.grid.clone()),
        trials: args.trials.unwrap_or(defaults.trials),
        settings: args.estimator.settings()?,
        ..defaults
    };
    let report = approx_error_study(&cfg, g.workers)?;
    print_summary(&report, false);
    write_reports(&report, g)?;
    Ok(exit::OK)
}

fn unbiasedness(args: &UnbiasednessArgs, g: &Globals) -> Result<i32> {
    let method = args.method.unwrap_or(UnbiasedMethod::Ra);
    let defaults = UnbiasednessConfig::new(method, g.seed);
    let cfg = UnbiasednessConfig {
        data: data_spec(&args.data, defaults.data.clone()),
        trials: args.trials.unwrap_or(defaults.trials),
        ..defaults
    };
    let report = unbiasedness_study(&cfg, g.workers)?;
    println!(
        "{} entries, {:.4} with |z| <= 4, bias norm {:.6e}, variance trace {:.6e}",
        report.entries.len(),
        report.fraction_within,
        report.bias_norm,
        report.variance_trace
    );
    write_reports(&report, g)?;
    Ok(exit::OK)
}

fn bench(args: &BenchArgs, g: &Globals) -> Result<i32> {
    let defaults = BenchConfig::new(g.seed);
    let cfg = BenchConfig {
        lengths: args.lengths.clone().unwrap_or(defaults.lengths.clone()),
        methods: args.methods.clone().unwrap_or(defaults.methods.clone()),
        samples: args.samples.unwrap_or(defaults.samples),
        d: args.d.unwrap_or(defaults.d),
        repeats: args.repeats.unwrap_or(defaults.repeats),
        generator: args.generator.clone().unwrap_or(defaults.generator.clone()),
        memory_budget_bytes: args.memory_budget.unwrap_or(defaults.memory_budget_bytes),
        settings: args.estimator.settings()?,
        ..defaults
    };
    // Timings run on the calling thread; the pool only bounds stray parallelism.
    let report = with_workers(g.workers.max(1), || scaling_benchmark(&cfg))??;
    print_summary(&report, true);
    write_reports(&report, g)?;
    Ok(exit::OK)
}

fn selftest(args: &SelftestArgs, g: &Globals) -> Result<i32> {
    let budget = if args.full { Budget::Full } else { Budget::Quick };
    let report = SelftestReport::run(g.seed, budget, g.workers);
    for check in &report.checks {
        println!("{}", check.line());
    }
    write_reports(&report, g)?;
    Ok(if report.passed() { exit::OK } else { exit::NUMERICAL })
}
