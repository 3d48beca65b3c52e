//! Experiment specs, benchmark orchestration, and the check suites behind
//! the command-line tool.
//!
//! Specs are TOML files; `specs/reference.toml` at the repository root
//! documents every key.

mod checks;
mod runner;

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::samplers::{
    Algorithm, BandwidthRule, ChainSettings, KernelChoice, MedianSpace, MetricChoice, SamplerConfig, StepMode,
};
use crate::spectral::DEFAULT_TAU;
use crate::targets::FISHER_DAMPING;

pub use checks::{grad_check, identity_check, CheckLine, CheckReport, Comparison, IDENTITY_DRAWS};
pub use runner::{
    best_rates, build_experiment_target, generate_ground_truth, ground_truth_sample, run_cell, run_experiment,
    BestRate, CellOutcome, CellResult, ExperimentReport, ExperimentTarget, SUMMARY_HEADER,
};

pub const DEFAULT_PARTICLES: usize = 50;
pub const DEFAULT_ITERATIONS: usize = 500;
pub const DEFAULT_TRACE_EVERY: usize = 10;
pub const DEFAULT_REFERENCE_SIZE: usize = 1000;
pub const MIRRORED_RMSPROP_RATES: [f64; 3] = [0.1, 0.01, 0.001];
pub const PROJECTED_RMSPROP_RATES: [f64; 3] = [0.01, 0.001, 0.0001];
pub const FIXED_STEP_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Dirichlet20,
    Quadratic20,
    Selective2d,
    Logistic,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Dirichlet20 => "dirichlet20",
            ExperimentKind::Quadratic20 => "quadratic20",
            ExperimentKind::Selective2d => "selective2d",
            ExperimentKind::Logistic => "logistic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            ExperimentKind::Dirichlet20,
            ExperimentKind::Quadratic20,
            ExperimentKind::Selective2d,
            ExperimentKind::Logistic,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn default_dimension(&self) -> usize {
        match self {
            ExperimentKind::Dirichlet20 | ExperimentKind::Quadratic20 => 19,
            ExperimentKind::Selective2d => 2,
            ExperimentKind::Logistic => 10,
        }
    }

    pub fn domain(&self, d: usize) -> Domain {
        match self {
            ExperimentKind::Dirichlet20 | ExperimentKind::Quadratic20 => Domain::Simplex(d),
            ExperimentKind::Selective2d => Domain::Orthant(d),
            ExperimentKind::Logistic => Domain::Euclidean(d),
        }
    }

    fn default_algorithms(&self) -> Vec<Algorithm> {
        match self {
            ExperimentKind::Logistic => vec![Algorithm::Svng, Algorithm::Svgd],
            _ => vec![Algorithm::Msvgd, Algorithm::Svmd, Algorithm::ProjectedSvgd],
        }
    }

    /// Reference-chain settings. The quadratic target has a nearly flat
    /// direction, so its chain needs a longer burn-in and heavier thinning.
    fn default_chain(&self) -> ChainSettings {
        match self {
            ExperimentKind::Quadratic20 => ChainSettings {
                step_size: 1e-3,
                burn_in: 100_000,
                thin: 1000,
                ..ChainSettings::default()
            },
            _ => ChainSettings::default(),
        }
    }

    fn default_ground_truth(&self) -> GroundTruthSource {
        match self {
            ExperimentKind::Dirichlet20 => GroundTruthSource::Exact,
            ExperimentKind::Quadratic20 | ExperimentKind::Selective2d => GroundTruthSource::MirrorLangevin,
            ExperimentKind::Logistic => GroundTruthSource::None,
        }
    }
}

/// Target parameters; only the ones relevant to the experiment are used.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    /// Symmetric Dirichlet prior concentration.
    pub prior: f64,
    /// Category counts (`d + 1` entries).
    pub counts: Vec<f64>,
    /// Quadratic target scale.
    pub sigma: f64,
    /// Seed for the random quadratic matrix or the synthetic data set.
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroundTruthSource {
    Exact,
    MirrorLangevin,
    File,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSpec {
    pub source: GroundTruthSource,
    pub path: Option<PathBuf>,
    pub size: usize,
    pub chain: ChainSettings,
}

/// One sampler with its learning-rate sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSweep {
    pub label: String,
    /// Template config; the step size and seed are set per cell.
    pub config: SamplerConfig,
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    pub dimension: usize,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub concurrent: bool,
    pub trace_every: usize,
    pub mksd: bool,
    pub wall_clock: bool,
    pub target: TargetSpec,
    pub ground_truth: GroundTruthSpec,
    pub samplers: Vec<SamplerSweep>,
}

impl ExperimentSpec {
    pub fn domain(&self) -> Domain {
        self.experiment.domain(self.dimension)
    }

    /// Cells in sweep order: sampler, then rate, then seed.
    pub fn cells(&self) -> Vec<(usize, f64, u64)> {
        let mut out = Vec::new();
        for (i, s) in self.samplers.iter().enumerate() {
            for &rate in &s.rates {
                for &seed in &self.seeds {
                    out.push((i, rate, seed));
                }
            }
        }
        out
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    experiment: Option<String>,
    dimension: Option<usize>,
    output_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    concurrent: Option<bool>,
    trace_every: Option<usize>,
    mksd: Option<bool>,
    wall_clock: Option<bool>,
    n: Option<usize>,
    iterations: Option<usize>,
    target: Option<RawTarget>,
    ground_truth: Option<RawGroundTruth>,
    samplers: Option<Vec<RawSampler>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    prior: Option<f64>,
    counts: Option<Vec<f64>>,
    sigma: Option<f64>,
    seed: Option<u64>,
    n_train: Option<usize>,
    n_validation: Option<usize>,
    n_test: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroundTruth {
    source: Option<String>,
    path: Option<PathBuf>,
    size: Option<usize>,
    seed: Option<u64>,
    step_size: Option<f64>,
    burn_in: Option<usize>,
    thin: Option<usize>,
    metropolis: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawBandwidth {
    Fixed(f64),
    Rule(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    algorithm: Option<String>,
    label: Option<String>,
    rates: Option<Vec<f64>>,
    step_mode: Option<String>,
    kernel: Option<String>,
    bandwidth: Option<RawBandwidth>,
    median_space: Option<String>,
    median_log_scaling: Option<bool>,
    tau: Option<f64>,
    n: Option<usize>,
    iterations: Option<usize>,
    batch_size: Option<usize>,
    metric: Option<String>,
    damping: Option<f64>,
}

/// Read and validate an experiment spec. Relative paths inside the spec are
/// resolved against the spec file's directory.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_spec(&text, base)
}

/// Parse and validate spec text.
pub fn parse_spec(text: &str, base: &Path) -> Result<ExperimentSpec> {
    let raw: RawSpec = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    resolve(raw, base)
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    // Name the key on the offending line when the parser gives a location.
    let field = e
        .span()
        .and_then(|span| {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[start..].lines().next()?;
            let (key, _) = line.split_once('=')?;
            Some(key.trim().to_string())
        })
        .filter(|k| !k.is_empty())
        .unwrap_or_else(|| {
            let msg = e.message();
            msg.split('`').nth(1).unwrap_or("spec").to_string()
        });
    Error::config(field, e.message().to_string())
}

fn parse_name<T>(field: &str, value: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::config(
                field,
                format!("unknown value `{value}`; expected one of {}", names.join(", ")),
            )
        })
}

fn parse_algorithm(field: &str, s: &str) -> Result<Algorithm> {
    parse_name(
        field,
        s,
        &[
            ("msvgd", Algorithm::Msvgd),
            ("svmd", Algorithm::Svmd),
            ("svng", Algorithm::Svng),
            ("svgd", Algorithm::Svgd),
            ("projected-svgd", Algorithm::ProjectedSvgd),
            ("mirror-langevin", Algorithm::MirrorLangevin),
        ],
    )
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn resolve(raw: RawSpec, base: &Path) -> Result<ExperimentSpec> {
    let id = raw
        .experiment
        .ok_or_else(|| Error::config("experiment", "missing required field"))?;
    let experiment = ExperimentKind::parse(&id).ok_or_else(|| {
        Error::config(
            "experiment",
            format!("unknown experiment `{id}`; expected dirichlet20, quadratic20, selective2d or logistic"),
        )
    })?;
    let dimension = raw.dimension.unwrap_or(experiment.default_dimension());
    if dimension == 0 {
        return Err(Error::config("dimension", "must be at least 1"));
    }
    if experiment == ExperimentKind::Selective2d && dimension != 2 {
        return Err(Error::config("dimension", "selective2d is two-dimensional"));
    }
    let domain = experiment.domain(dimension);

    let rt = raw.target.unwrap_or_default();
    let counts = match rt.counts {
        Some(c) => {
            if c.len() != dimension + 1 {
                return Err(Error::config(
                    "target.counts",
                    format!("need {} entries (dimension + 1), got {}", dimension + 1, c.len()),
                ));
            }
            if c.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::config("target.counts", "counts must be non-negative"));
            }
            c
        }
        None => {
            let mut c = vec![0.0; dimension + 1];
            for (slot, v) in c.iter_mut().zip([90.0, 5.0, 5.0]) {
                *slot = v;
            }
            c
        }
    };
    let target = TargetSpec {
        prior: positive("target.prior", rt.prior.unwrap_or(0.1))?,
        counts,
        sigma: positive("target.sigma", rt.sigma.unwrap_or(0.01))?,
        seed: rt.seed.unwrap_or(0),
        n_train: rt.n_train.unwrap_or(2000),
        n_validation: rt.n_validation.unwrap_or(500),
        n_test: rt.n_test.unwrap_or(500),
    };
    if experiment == ExperimentKind::Logistic {
        for (field, v) in [
            ("target.n_train", target.n_train),
            ("target.n_validation", target.n_validation),
            ("target.n_test", target.n_test),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
    }

    let gt = raw.ground_truth.unwrap_or_default();
    let source = match gt.source.as_deref() {
        None => experiment.default_ground_truth(),
        Some(s) => parse_name(
            "ground_truth.source",
            s,
            &[
                ("exact", GroundTruthSource::Exact),
                ("mirror-langevin", GroundTruthSource::MirrorLangevin),
                ("file", GroundTruthSource::File),
                ("none", GroundTruthSource::None),
            ],
        )?,
    };
    if source == GroundTruthSource::Exact && experiment != ExperimentKind::Dirichlet20 {
        return Err(Error::config(
            "ground_truth.source",
            format!("no exact sampler for {}", experiment.name()),
        ));
    }
    if source == GroundTruthSource::MirrorLangevin && !domain.is_constrained() {
        return Err(Error::config(
            "ground_truth.source",
            "mirror-langevin needs a constrained target",
        ));
    }
    let gt_path = gt.path.map(|p| base.join(p));
    if source == GroundTruthSource::File {
        match &gt_path {
            None => return Err(Error::config("ground_truth.path", "required when source = \"file\"")),
            Some(p) if !p.is_file() => {
                return Err(Error::config(
                    "ground_truth.path",
                    format!("{} does not exist", p.display()),
                ))
            }
            Some(_) => {}
        }
    }
    let defaults = experiment.default_chain();
    let chain = ChainSettings {
        step_size: positive("ground_truth.step_size", gt.step_size.unwrap_or(defaults.step_size))?,
        burn_in: gt.burn_in.unwrap_or(defaults.burn_in),
        thin: gt.thin.unwrap_or(defaults.thin),
        seed: gt.seed.unwrap_or(defaults.seed),
        metropolis: gt.metropolis.unwrap_or(true),
    };
    if chain.thin == 0 {
        return Err(Error::config("ground_truth.thin", "must be positive"));
    }
    let ground_truth = GroundTruthSpec {
        source,
        path: gt_path,
        size: gt.size.unwrap_or(DEFAULT_REFERENCE_SIZE),
        chain,
    };
    if ground_truth.size < 2 {
        return Err(Error::config("ground_truth.size", "need at least two reference points"));
    }

    let n_default = raw.n.unwrap_or(DEFAULT_PARTICLES);
    let t_default = raw.iterations.unwrap_or(DEFAULT_ITERATIONS);
    let raw_samplers = match raw.samplers {
        Some(s) if s.is_empty() => return Err(Error::config("samplers", "list is empty")),
        Some(s) => s,
        None => experiment
            .default_algorithms()
            .into_iter()
            .map(|a| RawSampler {
                algorithm: Some(a.name().to_string()),
                label: None,
                rates: None,
                step_mode: None,
                kernel: None,
                bandwidth: None,
                median_space: None,
                median_log_scaling: None,
                tau: None,
                n: None,
                iterations: None,
                batch_size: None,
                metric: None,
                damping: None,
            })
            .collect(),
    };
    let mut samplers = Vec::with_capacity(raw_samplers.len());
    for (i, rs) in raw_samplers.into_iter().enumerate() {
        let sweep = resolve_sampler(i, rs, experiment, domain, n_default, t_default, &target)?;
        if samplers.iter().any(|s: &SamplerSweep| s.label == sweep.label) {
            return Err(Error::config(
                format!("samplers[{i}].label"),
                format!("duplicate label `{}`", sweep.label),
            ));
        }
        samplers.push(sweep);
    }

    let seeds = raw.seeds.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(Error::config("seeds", "list is empty"));
    }
    let trace_every = raw.trace_every.unwrap_or(DEFAULT_TRACE_EVERY);
    if trace_every == 0 {
        return Err(Error::config("trace_every", "must be positive"));
    }
    Ok(ExperimentSpec {
        experiment,
        dimension,
        output_dir: base.join(
            raw.output_dir
                .unwrap_or_else(|| PathBuf::from("out").join(experiment.name())),
        ),
        seeds,
        concurrent: raw.concurrent.unwrap_or(false),
        trace_every,
        mksd: raw.mksd.unwrap_or(domain.is_constrained()),
        wall_clock: raw.wall_clock.unwrap_or(false),
        target,
        ground_truth,
        samplers,
    })
}

fn resolve_sampler(
    i: usize,
    rs: RawSampler,
    experiment: ExperimentKind,
    domain: Domain,
    n_default: usize,
    t_default: usize,
    target: &TargetSpec,
) -> Result<SamplerSweep> {
    let f = |name: &str| format!("samplers[{i}].{name}");
    let alg_name = rs
        .algorithm
        .ok_or_else(|| Error::config(f("algorithm"), "missing required field"))?;
    let algorithm = parse_algorithm(&f("algorithm"), &alg_name)?;
    if let Some(need) = algorithm.needs_constrained() {
        if need != domain.is_constrained() {
            return Err(Error::config(
                f("algorithm"),
                format!("{alg_name} cannot run on {}", experiment.name()),
            ));
        }
    }
    let mut cfg = SamplerConfig::new(algorithm);
    cfg.init = SamplerConfig::default_init(domain);
    cfg.n_particles = rs.n.unwrap_or(n_default);
    cfg.iterations = rs.iterations.unwrap_or(t_default);
    cfg.tau = rs.tau.unwrap_or(DEFAULT_TAU);
    if !(cfg.tau > 0.0 && cfg.tau <= 1.0) {
        return Err(Error::config(f("tau"), "must lie in (0, 1]"));
    }
    if cfg.n_particles == 0 {
        return Err(Error::config(f("n"), "must be positive"));
    }
    cfg.step_mode = match rs.step_mode.as_deref() {
        Some(s) => parse_name(
            &f("step_mode"),
            s,
            &[("fixed", StepMode::Fixed), ("rmsprop", StepMode::Rmsprop)],
        )?,
        None if algorithm == Algorithm::MirrorLangevin || !domain.is_constrained() => StepMode::Fixed,
        None => StepMode::Rmsprop,
    };
    cfg.kernel = match rs.kernel.as_deref() {
        Some(s) => parse_name(
            &f("kernel"),
            s,
            &[
                ("imq", KernelChoice::Imq),
                ("imq-dual", KernelChoice::ImqDual),
                ("gaussian", KernelChoice::Gaussian),
            ],
        )?,
        None => KernelChoice::Imq,
    };
    cfg.bandwidth = match rs.bandwidth {
        None => BandwidthRule::Median,
        Some(RawBandwidth::Fixed(l)) => BandwidthRule::Fixed(positive(&f("bandwidth"), l)?),
        Some(RawBandwidth::Rule(s)) => parse_name(
            &f("bandwidth"),
            &s,
            &[
                ("median", BandwidthRule::Median),
                ("median-frozen", BandwidthRule::MedianFrozen),
            ],
        )?,
    };
    cfg.median_space = match rs.median_space.as_deref() {
        Some(s) => parse_name(
            &f("median_space"),
            s,
            &[
                ("kernel", MedianSpace::Kernel),
                ("primal", MedianSpace::Primal),
                ("dual", MedianSpace::Dual),
            ],
        )?,
        None => MedianSpace::Kernel,
    };
    cfg.median_log_scaling = rs.median_log_scaling.unwrap_or(false);
    cfg.metric = match rs.metric.as_deref() {
        Some(s) => parse_name(
            &f("metric"),
            s,
            &[("fisher", MetricChoice::Fisher), ("identity", MetricChoice::Identity)],
        )?,
        None if experiment == ExperimentKind::Logistic => MetricChoice::Fisher,
        None => MetricChoice::Identity,
    };
    cfg.damping = positive(&f("damping"), rs.damping.unwrap_or(FISHER_DAMPING))?;
    cfg.batch_size = match (rs.batch_size, experiment) {
        (Some(0), _) => return Err(Error::config(f("batch_size"), "must be positive")),
        (Some(b), ExperimentKind::Logistic) if b > target.n_train => {
            return Err(Error::config(f("batch_size"), "larger than target.n_train"))
        }
        (Some(b), ExperimentKind::Logistic) => Some(b),
        (Some(_), _) => {
            return Err(Error::config(
                f("batch_size"),
                "only data-backed targets use minibatches",
            ))
        }
        (None, ExperimentKind::Logistic) => Some(256.min(target.n_train)),
        (None, _) => None,
    };
    if !domain.is_constrained() && (cfg.kernel == KernelChoice::ImqDual || cfg.median_space == MedianSpace::Dual) {
        return Err(Error::config(
            f("kernel"),
            "dual-space kernels need a constrained target",
        ));
    }
    if algorithm == Algorithm::MirrorLangevin && cfg.step_mode != StepMode::Fixed {
        return Err(Error::config(f("step_mode"), "mirror-langevin uses a fixed step"));
    }
    let rates = match rs.rates {
        Some(r) if r.is_empty() => return Err(Error::config(f("rates"), "list is empty")),
        Some(r) => r,
        None if !domain.is_constrained() => FIXED_STEP_GRID.to_vec(),
        None if algorithm == Algorithm::ProjectedSvgd => PROJECTED_RMSPROP_RATES.to_vec(),
        None if algorithm == Algorithm::MirrorLangevin => vec![1e-4],
        None => MIRRORED_RMSPROP_RATES.to_vec(),
    };
    for &r in &rates {
        positive(&f("rates"), r)?;
    }
    Ok(SamplerSweep {
        label: rs.label.unwrap_or(alg_name),
        config: cfg,
        rates,
    })
}
