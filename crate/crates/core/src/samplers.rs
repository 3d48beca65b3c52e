//! Particle samplers and their iteration driver.
//!
//! Mirrored samplers (MSVGD, SVMD, mirror-Langevin) update dual coordinates
//! and map back through `∇ψ*`, so particles never leave the open domain.
//! SVGD and SVNG update primal coordinates; projected SVGD projects onto the
//! domain after each step.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, MirrorMap};
use crate::kernels::{median_bandwidth, KernelFamily, ScalarKernel};
use crate::metrics::{EnergyReference, RunTrace, TraceRow};
use crate::particles::ParticleSet;
use crate::spectral::{self, decompose};
use crate::stein::{self, SteinContext};
use crate::targets::{
    fisher_metric_update, ConstantMetric, FisherMetric, MetricProvider, MetricTensorEstimate, Target, FISHER_DAMPING,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Msvgd,
    Svmd,
    Svng,
    Svgd,
    ProjectedSvgd,
    MirrorLangevin,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Msvgd => "msvgd",
            Algorithm::Svmd => "svmd",
            Algorithm::Svng => "svng",
            Algorithm::Svgd => "svgd",
            Algorithm::ProjectedSvgd => "projected-svgd",
            Algorithm::MirrorLangevin => "mirror-langevin",
        }
    }

    /// Whether the algorithm needs a constrained domain (`Some(true)`), an
    /// unconstrained one (`Some(false)`), or works on both.
    pub fn needs_constrained(&self) -> Option<bool> {
        match self {
            Algorithm::Msvgd | Algorithm::Svmd | Algorithm::ProjectedSvgd | Algorithm::MirrorLangevin => Some(true),
            Algorithm::Svng | Algorithm::Svgd => Some(false),
        }
    }
}

/// Scalar kernel choice: IMQ on primal points, IMQ on dual points, or
/// Gaussian on primal points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    Imq,
    ImqDual,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// Median heuristic recomputed every iteration.
    Median,
    /// Median heuristic computed once from the initial particles.
    MedianFrozen,
    Fixed(f64),
}

/// Points used by the median heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianSpace {
    /// Wherever the kernel measures distance.
    Kernel,
    Primal,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    Fixed,
    Rmsprop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricChoice {
    Fisher,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Initialization {
    /// I.i.d. symmetric Dirichlet draws on the simplex.
    Dirichlet {
        concentration: f64,
    },
    /// `∇ψ*(∇ψ(center) + scale·ξ)`.
    DualGaussian {
        center: DVector<f64>,
        scale: f64,
    },
    /// `scale·ξ` in primal coordinates.
    Gaussian {
        scale: f64,
    },
    Points(Vec<DVector<f64>>),
}

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_STABILIZER: f64 = 1e-8;

/// Per-particle, per-coordinate step sizes.
#[derive(Clone, Debug)]
pub struct StepSizeSchedule {
    pub mode: StepMode,
    pub base_rate: f64,
    accumulator: Vec<DVector<f64>>,
}

impl StepSizeSchedule {
    pub fn new(mode: StepMode, base_rate: f64) -> Self {
        Self {
            mode,
            base_rate,
            accumulator: Vec::new(),
        }
    }

    pub fn fixed(rate: f64) -> Self {
        Self::new(StepMode::Fixed, rate)
    }

    pub fn rmsprop(rate: f64) -> Self {
        Self::new(StepMode::Rmsprop, rate)
    }

    /// Turn update directions into steps, advancing the RMSProp state.
    /// The accumulator starts at one.
    pub fn steps(&mut self, directions: &[DVector<f64>]) -> Vec<DVector<f64>> {
        match self.mode {
            StepMode::Fixed => directions.iter().map(|g| g * self.base_rate).collect(),
            StepMode::Rmsprop => {
                if self.accumulator.len() != directions.len()
                    || self.accumulator.iter().zip(directions).any(|(a, g)| a.len() != g.len())
                {
                    self.accumulator = directions.iter().map(|g| DVector::from_element(g.len(), 1.0)).collect();
                }
                directions
                    .iter()
                    .zip(self.accumulator.iter_mut())
                    .map(|(g, acc)| {
                        acc.zip_apply(g, |a, gi| *a = RMSPROP_DECAY * *a + (1.0 - RMSPROP_DECAY) * gi * gi);
                        g.zip_map(acc, |gi, a| self.base_rate * gi / (a.sqrt() + RMSPROP_STABILIZER))
                    })
                    .collect()
            }
        }
    }

    /// Mean multiplier applied to direction entries.
    pub fn scale(&self) -> f64 {
        match self.mode {
            StepMode::Fixed => self.base_rate,
            StepMode::Rmsprop if self.accumulator.is_empty() => self.base_rate / (1.0 + RMSPROP_STABILIZER),
            StepMode::Rmsprop => {
                let (mut sum, mut count) = (0.0, 0usize);
                for acc in &self.accumulator {
                    for a in acc.iter() {
                        sum += self.base_rate / (a.sqrt() + RMSPROP_STABILIZER);
                        count += 1;
                    }
                }
                sum / count as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    pub kernel: KernelChoice,
    pub bandwidth: BandwidthRule,
    /// Divide the median heuristic by `log(n + 1)`.
    pub median_log_scaling: bool,
    pub median_space: MedianSpace,
    pub tau: f64,
    pub iterations: usize,
    pub n_particles: usize,
    pub seed: u64,
    pub step_mode: StepMode,
    pub step_size: f64,
    /// Minibatch size for data-backed targets; `None` uses all data.
    pub batch_size: Option<usize>,
    pub metric: MetricChoice,
    pub damping: f64,
    pub init: Initialization,
}

impl SamplerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            kernel: KernelChoice::Imq,
            bandwidth: BandwidthRule::Median,
            median_log_scaling: false,
            median_space: MedianSpace::Kernel,
            tau: spectral::DEFAULT_TAU,
            iterations: 500,
            n_particles: 50,
            seed: 0,
            step_mode: StepMode::Rmsprop,
            step_size: 0.01,
            batch_size: None,
            metric: MetricChoice::Fisher,
            damping: FISHER_DAMPING,
            init: Initialization::Gaussian { scale: 1.0 },
        }
    }

    /// Default initialization for a target domain.
    pub fn default_init(domain: Domain) -> Initialization {
        match domain {
            Domain::Simplex(_) => Initialization::Dirichlet { concentration: 5.0 },
            Domain::Orthant(d) => Initialization::DualGaussian {
                center: DVector::from_element(d, 1.0),
                scale: 1.0,
            },
            Domain::Euclidean(_) => Initialization::Gaussian { scale: 1.0 },
        }
    }

    pub fn validate(&self, target: &dyn Target) -> Result<()> {
        let constrained = target.domain().is_constrained();
        if let Some(need) = self.algorithm.needs_constrained() {
            if need != constrained {
                return Err(Error::config(
                    "algorithm",
                    format!(
                        "{} needs a {} target",
                        self.algorithm.name(),
                        if need { "constrained" } else { "unconstrained" }
                    ),
                ));
            }
        }
        if self.n_particles == 0 {
            return Err(Error::config("n", "need at least one particle"));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::config("step_size", "must be finite and non-negative"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1]"));
        }
        if let BandwidthRule::Fixed(l) = self.bandwidth {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::config("bandwidth", "must be positive"));
            }
        }
        if !constrained && (self.kernel == KernelChoice::ImqDual || self.median_space == MedianSpace::Dual) {
            return Err(Error::config("kernel", "dual-space kernels need a constrained target"));
        }
        if self.algorithm == Algorithm::MirrorLangevin && self.step_mode != StepMode::Fixed {
            return Err(Error::config("step_mode", "mirror-langevin uses a fixed step"));
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::config("batch_size", "must be positive"));
            }
            if let Some(lr) = target.as_logistic() {
                if b > lr.num_data() {
                    return Err(Error::config("batch_size", "larger than the data set"));
                }
            }
        }
        if !(self.damping > 0.0) {
            return Err(Error::config("damping", "must be positive"));
        }
        Ok(())
    }
}

/// Mutable state of one sampler run.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub particles: ParticleSet,
    pub iteration: usize,
    pub schedule: StepSizeSchedule,
    metric: Option<MetricTensorEstimate>,
    frozen_bandwidth: Option<f64>,
    rng: ChaCha8Rng,
}

/// Mirror map used by samplers: the entropic map for the domain with no
/// interior margin beyond strict positivity.
pub fn sampler_map(domain: Domain) -> Option<MirrorMap> {
    MirrorMap::for_domain(domain).map(|m| m.with_margin(0.0))
}

fn initial_particles(cfg: &SamplerConfig, domain: Domain, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>> {
    let d = domain.dim();
    let n = cfg.n_particles;
    Ok(match &cfg.init {
        Initialization::Points(p) => {
            if p.len() != n {
                return Err(Error::config("init", format!("{} points given for n = {n}", p.len())));
            }
            p.clone()
        }
        Initialization::Dirichlet { concentration } => {
            let Domain::Simplex(_) = domain else {
                return Err(Error::config("init", "Dirichlet initialization needs a simplex target"));
            };
            let gamma =
                Gamma::new(*concentration, 1.0).map_err(|_| Error::config("init", "concentration must be positive"))?;
            (0..n)
                .map(|_| {
                    let g: Vec<f64> = (0..=d).map(|_| gamma.sample(rng)).collect();
                    let total: f64 = g.iter().sum();
                    DVector::from_iterator(d, g[..d].iter().map(|v| v / total))
                })
                .collect()
        }
        Initialization::DualGaussian { center, scale } => {
            let map = sampler_map(domain)
                .ok_or_else(|| Error::config("init", "dual initialization needs a constrained target"))?;
            check_dim(d, center.len())?;
            let eta0 = map.grad(center)?;
            (0..n)
                .map(|_| {
                    let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    map.grad_conjugate(&(&eta0 + xi * *scale))
                })
                .collect::<Result<_>>()?
        }
        Initialization::Gaussian { scale } => (0..n)
            .map(|_| DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    })
}

impl SamplerState {
    pub fn initialize(cfg: &SamplerConfig, target: &dyn Target) -> Result<Self> {
        cfg.validate(target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let points = initial_particles(cfg, target.domain(), &mut rng)?;
        let particles = match sampler_map(target.domain()) {
            Some(map) => ParticleSet::from_primal(points, &map)?,
            None => ParticleSet::unconstrained(points)?,
        };
        Ok(Self {
            particles,
            iteration: 0,
            schedule: StepSizeSchedule::new(cfg.step_mode, cfg.step_size),
            metric: None,
            frozen_bandwidth: None,
            rng,
        })
    }

    pub fn metric_estimate(&self) -> Option<&MetricTensorEstimate> {
        self.metric.as_ref()
    }
}

/// The scalar kernel for the current particles.
pub fn current_kernel(state: &mut SamplerState, cfg: &SamplerConfig, domain: Domain) -> Result<ScalarKernel> {
    let family = match cfg.kernel {
        KernelChoice::Imq | KernelChoice::ImqDual => KernelFamily::Imq,
        KernelChoice::Gaussian => KernelFamily::Gaussian,
    };
    let map = sampler_map(domain);
    let composed = cfg.kernel == KernelChoice::ImqDual;
    let median = |state: &SamplerState| -> Result<f64> {
        if state.particles.len() < 2 {
            return Ok(1.0);
        }
        let use_dual = match cfg.median_space {
            MedianSpace::Kernel => composed,
            MedianSpace::Primal => false,
            MedianSpace::Dual => true,
        };
        match (use_dual, state.particles.duals()) {
            (true, Some(duals)) => median_bandwidth(duals, cfg.median_log_scaling),
            (true, None) => Err(Error::config("median_space", "particles carry no dual coordinates")),
            (false, _) => median_bandwidth(&state.particles.thetas(), cfg.median_log_scaling),
        }
    };
    let bandwidth = match cfg.bandwidth {
        BandwidthRule::Fixed(l) => l,
        BandwidthRule::Median => median(state)?,
        BandwidthRule::MedianFrozen => match state.frozen_bandwidth {
            Some(l) => l,
            None => {
                let l = median(state)?;
                state.frozen_bandwidth = Some(l);
                l
            }
        },
    };
    let k = ScalarKernel::new(family, bandwidth)?;
    Ok(match (composed, map) {
        (true, Some(m)) => k.composed_with(m),
        (true, None) => return Err(Error::config("kernel", "dual-space kernels need a constrained target")),
        (false, _) => k,
    })
}

fn require_map(target: &dyn Target) -> Result<MirrorMap> {
    sampler_map(target.domain()).ok_or_else(|| Error::InvalidArgument("target is unconstrained".into()))
}

fn check_finite(v: &[DVector<f64>]) -> Result<()> {
    match v.iter().position(|x| x.iter().any(|c| !c.is_finite())) {
        Some(i) => Err(Error::NonFinite {
            particle: i,
            iteration: None,
        }),
        None => Ok(()),
    }
}

fn dual_update(state: &mut SamplerState, map: &MirrorMap, directions: &[DVector<f64>]) -> Result<()> {
    check_finite(directions)?;
    let steps = state.schedule.steps(directions);
    let duals = state
        .particles
        .duals()
        .ok_or_else(|| Error::InvalidArgument("particles carry no dual coordinates".into()))?;
    let next: Vec<DVector<f64>> = duals.iter().zip(&steps).map(|(e, s)| e + s).collect();
    check_finite(&next)?;
    state.particles = ParticleSet::from_dual(next, map)?;
    Ok(())
}

pub fn step_msvgd(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Result<()> {
    let map = require_map(target)?;
    let k = current_kernel(state, cfg, target.domain())?;
    let ctx = SteinContext::mirrored(target, map)?;
    let g = stein::msvgd_direction(&state.particles, &k, &ctx)?;
    dual_update(state, &map, &g)
}

pub fn step_svmd(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Result<()> {
    let map = require_map(target)?;
    let k = current_kernel(state, cfg, target.domain())?;
    let dec = decompose(&state.particles.thetas(), &k, cfg.tau)?;
    let g = spectral::svmd_direction(&state.particles, &dec, &k, &map, target)?;
    dual_update(state, &map, &g)
}

fn draw_batch(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Option<Vec<usize>> {
    let lr = target.as_logistic()?;
    let b = cfg.batch_size?;
    let mut idx = index::sample(&mut state.rng, lr.num_data(), b).into_vec();
    idx.sort_unstable();
    Some(idx)
}

fn scores(state: &SamplerState, target: &dyn Target, batch: Option<&[usize]>) -> Result<Vec<DVector<f64>>> {
    state
        .particles
        .points()
        .iter()
        .map(|p| match (batch, target.as_logistic()) {
            (Some(b), Some(lr)) => lr.minibatch_grad(&p.theta, b),
            _ => target.grad_log_density_at(p),
        })
        .collect()
}

fn primal_update(state: &mut SamplerState, moves: &[DVector<f64>], domain: Domain, project: bool) -> Result<()> {
    check_finite(moves)?;
    let steps = state.schedule.steps(moves);
    let mut next: Vec<DVector<f64>> = state
        .particles
        .thetas()
        .iter()
        .zip(&steps)
        .map(|(t, s)| t + s)
        .collect();
    check_finite(&next)?;
    if project {
        for p in next.iter_mut() {
            *p = project_to_domain(domain, p, crate::geometry::DEFAULT_INTERIOR_MARGIN);
        }
    }
    state.particles = match sampler_map(domain) {
        Some(map) => ParticleSet::from_primal(next, &map)?,
        None => ParticleSet::unconstrained(next)?,
    };
    Ok(())
}

pub fn step_svng(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Result<()> {
    let batch = draw_batch(state, cfg, target);
    let thetas = state.particles.thetas();
    let provider: Box<dyn MetricProvider> = match (cfg.metric, target.as_logistic()) {
        (MetricChoice::Fisher, Some(lr)) => {
            let all: Vec<usize>;
            let b = match &batch {
                Some(b) => b.as_slice(),
                None => {
                    all = (0..lr.num_data()).collect();
                    &all
                }
            };
            let est = state
                .metric
                .take()
                .unwrap_or_else(|| MetricTensorEstimate::new(target.dim()).with_damping(cfg.damping));
            let est = fisher_metric_update(&est, lr, &thetas, b)?;
            state.metric = Some(est.clone());
            Box::new(FisherMetric::new(est)?)
        }
        (MetricChoice::Fisher, None) => {
            return Err(Error::config(
                "metric",
                "Fisher metric needs a logistic-regression target",
            ))
        }
        (MetricChoice::Identity, _) => Box::new(ConstantMetric::identity(target.dim())),
    };
    svng_step_with_metric(state, cfg, target, provider.as_ref(), batch.as_deref())
}

/// SVNG step with a caller-supplied metric.
pub fn svng_step_with_metric(
    state: &mut SamplerState,
    cfg: &SamplerConfig,
    target: &dyn Target,
    metric: &dyn MetricProvider,
    batch: Option<&[usize]>,
) -> Result<()> {
    let k = current_kernel(state, cfg, target.domain())?;
    let s = scores(state, target, batch)?;
    let dec = decompose(&state.particles.thetas(), &k, cfg.tau)?;
    let g = spectral::svng_direction_from_scores(&state.particles, &dec, &k, metric, &s)?;
    let moves = spectral::precondition(&state.particles, metric, g)?;
    primal_update(state, &moves, target.domain(), false)
}

/// `g(θ_i) = (1/n) Σ_j k(θ_j, θ_i) s_j + ∇_{θ_j} k(θ_j, θ_i)`.
pub fn svgd_direction(thetas: &[DVector<f64>], scores: &[DVector<f64>], k: &ScalarKernel) -> Result<Vec<DVector<f64>>> {
    check_dim(thetas.len(), scores.len())?;
    let n = thetas.len() as f64;
    thetas
        .iter()
        .map(|ti| {
            let mut acc = DVector::zeros(ti.len());
            for (tj, sj) in thetas.iter().zip(scores) {
                acc += sj * k.eval(tj, ti)? + k.grad1(tj, ti)?;
            }
            Ok(acc / n)
        })
        .collect()
}

pub fn step_svgd(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target, projected: bool) -> Result<()> {
    let batch = draw_batch(state, cfg, target);
    let k = current_kernel(state, cfg, target.domain())?;
    let s = scores(state, target, batch.as_deref())?;
    let g = svgd_direction(&state.particles.thetas(), &s, &k)?;
    primal_update(state, &g, target.domain(), projected)
}

/// Euler–Maruyama step of the mirror-Langevin diffusion for every particle.
pub fn step_mirror_langevin(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Result<()> {
    let map = require_map(target)?;
    let eps = cfg.step_size;
    let noise = (2.0 * eps).sqrt();
    let mut next = Vec::with_capacity(state.particles.len());
    for i in 0..state.particles.len() {
        let p = state.particles.point(i).clone();
        let eta = state.particles.dual(i).expect("mirrored particles carry duals").clone();
        let grad = target.grad_log_density_at(&p)?;
        let xi = DVector::from_fn(map.noise_dim(), |_, _| state.rng.sample::<f64, _>(StandardNormal));
        next.push(eta + grad * eps + map.hessian_factor_mul_at(&p, &xi) * noise);
    }
    check_finite(&next)?;
    state.particles = ParticleSet::from_dual(next, &map)?;
    Ok(())
}

pub fn step(state: &mut SamplerState, cfg: &SamplerConfig, target: &dyn Target) -> Result<()> {
    let t = state.iteration + 1;
    match cfg.algorithm {
        Algorithm::Msvgd => step_msvgd(state, cfg, target),
        Algorithm::Svmd => step_svmd(state, cfg, target),
        Algorithm::Svng => step_svng(state, cfg, target),
        Algorithm::Svgd => step_svgd(state, cfg, target, false),
        Algorithm::ProjectedSvgd => step_svgd(state, cfg, target, true),
        Algorithm::MirrorLangevin => step_mirror_langevin(state, cfg, target),
    }
    .map_err(|e| e.at_iteration(t))?;
    state.iteration = t;
    Ok(())
}

/// Settings for a single long mirror-Langevin chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSettings {
    pub step_size: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Accept or reject each step with a Metropolis–Hastings test against
    /// the dual-space density.
    pub metropolis: bool,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            burn_in: 10_000,
            thin: 10,
            seed: 0,
            metropolis: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainSample {
    pub points: Vec<DVector<f64>>,
    /// Fraction of accepted proposals; 1 for unadjusted chains.
    pub acceptance_rate: f64,
}

/// State of an adjusted chain: dual point, primal point, log dual density
/// and drift.
struct ChainState {
    eta: DVector<f64>,
    point: crate::geometry::PrimalPoint,
    log_density: f64,
    grad: DVector<f64>,
}

fn chain_state(target: &dyn Target, map: &MirrorMap, eta: DVector<f64>) -> Option<ChainState> {
    if eta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let point = map.dual_to_primal(&eta).ok()?;
    let log_p = target.log_density(&point.theta).ok()?;
    let log_jac = map.dual_log_det_hessian(&eta).ok()?;
    let grad = target.grad_log_density_at(&point).ok()?;
    let log_density = log_p + log_jac;
    (log_density.is_finite() && grad.iter().all(|v| v.is_finite())).then_some(ChainState {
        eta,
        point,
        log_density,
        grad,
    })
}

/// `log q(to | from)` up to a constant for the proposal
/// `N(η + ε∇log p, 2ε∇²ψ(θ))`.
fn proposal_log_density(map: &MirrorMap, from: &ChainState, to: &DVector<f64>, eps: f64) -> f64 {
    let r = to - &from.eta - &from.grad * eps;
    let w = map.inverse_hessian_at(&from.point);
    // log det ∇²ψ(θ) = −log det ∇²ψ*(η).
    let log_det_h = -map.dual_log_det_hessian(&from.eta).unwrap_or(f64::NEG_INFINITY);
    -0.5 * log_det_h - r.dot(&(w * &r)) / (4.0 * eps)
}

/// Run one mirror-Langevin chain from `start` and keep every `thin`-th state
/// after burn-in until `size` states are collected.
pub fn mirror_langevin_chain(
    target: &dyn Target,
    start: DVector<f64>,
    size: usize,
    settings: &ChainSettings,
) -> Result<ChainSample> {
    if settings.thin == 0 {
        return Err(Error::config("thin", "must be positive"));
    }
    if settings.metropolis {
        return adjusted_chain(target, start, size, settings);
    }
    let mut cfg = SamplerConfig::new(Algorithm::MirrorLangevin);
    cfg.n_particles = 1;
    cfg.step_mode = StepMode::Fixed;
    cfg.step_size = settings.step_size;
    cfg.seed = settings.seed;
    cfg.init = Initialization::Points(vec![start]);
    let mut state = SamplerState::initialize(&cfg, target)?;
    for _ in 0..settings.burn_in {
        step(&mut state, &cfg, target)?;
    }
    let mut points = Vec::with_capacity(size);
    while points.len() < size {
        for _ in 0..settings.thin {
            step(&mut state, &cfg, target)?;
        }
        points.push(state.particles.theta(0).clone());
    }
    Ok(ChainSample {
        points,
        acceptance_rate: 1.0,
    })
}

fn adjusted_chain(
    target: &dyn Target,
    start: DVector<f64>,
    size: usize,
    settings: &ChainSettings,
) -> Result<ChainSample> {
    let map = require_map(target)?;
    let eps = settings.step_size;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let eta0 = map.grad(&start)?;
    let mut current =
        chain_state(target, &map, eta0).ok_or_else(|| Error::Domain("chain start has zero density".into()))?;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let mut advance = |current: &mut ChainState, rng: &mut ChaCha8Rng| {
        let xi = DVector::from_fn(map.noise_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let proposal =
            &current.eta + &current.grad * eps + map.hessian_factor_mul_at(&current.point, &xi) * (2.0 * eps).sqrt();
        let u: f64 = rng.random();
        proposed += 1;
        let Some(next) = chain_state(target, &map, proposal) else {
            return;
        };
        let log_ratio = next.log_density - current.log_density + proposal_log_density(&map, &next, &current.eta, eps)
            - proposal_log_density(&map, current, &next.eta, eps);
        if u.ln() < log_ratio {
            *current = next;
            accepted += 1;
        }
    };
    for _ in 0..settings.burn_in {
        advance(&mut current, &mut rng);
    }
    let mut points = Vec::with_capacity(size);
    while points.len() < size {
        for _ in 0..settings.thin {
            advance(&mut current, &mut rng);
        }
        points.push(current.point.theta.clone());
    }
    Ok(ChainSample {
        points,
        acceptance_rate: if proposed == 0 {
            1.0
        } else {
            accepted as f64 / proposed as f64
        },
    })
}

/// Euclidean projection onto the probability simplex `{x ≥ 0, Σx = 1}`.
pub fn project_probability_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Project onto the closed domain, then pull inside by `eps`.
///
/// On the simplex, interior points (with margin `eps`) are returned as is;
/// others are projected onto `{θ ≥ 0, Σθ ≤ 1}` and shrunk toward the
/// barycenter so that boundary points end up `eps` inside every face.
pub fn project_to_domain(domain: Domain, theta: &DVector<f64>, eps: f64) -> DVector<f64> {
    match domain {
        Domain::Simplex(d) => {
            let slack = 1.0 - theta.sum();
            if theta.iter().all(|&v| v > eps) && slack > eps {
                return theta.clone();
            }
            let clamped = theta.map(|v| v.max(0.0));
            let projected = if clamped.sum() <= 1.0 {
                clamped
            } else {
                project_probability_simplex(theta)
            };
            let w = (d as f64 + 1.0) * eps;
            projected.map(|v| (1.0 - w) * v + w / (d as f64 + 1.0))
        }
        Domain::Orthant(_) => theta.map(|v| v.max(eps)),
        Domain::Euclidean(_) => theta.clone(),
    }
}

/// What to record while running.
#[derive(Clone, Debug)]
pub struct TraceOptions<'a> {
    /// Record a row every this many iterations (and at the last one).
    pub every: usize,
    pub reference: Option<&'a EnergyReference>,
    pub mksd: bool,
    pub wall_clock: bool,
}

impl Default for TraceOptions<'_> {
    fn default() -> Self {
        Self {
            every: 10,
            reference: None,
            mksd: false,
            wall_clock: false,
        }
    }
}

fn trace_row(
    state: &mut SamplerState,
    cfg: &SamplerConfig,
    target: &dyn Target,
    opts: &TraceOptions,
    started: Instant,
) -> Result<TraceRow> {
    let energy_distance = match opts.reference {
        Some(r) => Some(r.distance(&state.particles.thetas())?),
        None => None,
    };
    let mksd2 = match (opts.mksd, sampler_map(target.domain())) {
        (true, Some(map)) => {
            let k = current_kernel(state, cfg, target.domain())?;
            let ctx = SteinContext::mirrored(target, map)?;
            Some(stein::mksd_squared(&state.particles, &k, &ctx)?)
        }
        _ => None,
    };
    Ok(TraceRow {
        iter: state.iteration,
        seconds: opts.wall_clock.then(|| started.elapsed().as_secs_f64()),
        energy_distance,
        mksd2,
        step_scale: Some(state.schedule.scale()),
    })
}

/// Initialize, iterate `cfg.iterations` steps, and record a trace.
pub fn run(cfg: &SamplerConfig, target: &dyn Target, opts: &TraceOptions) -> Result<(ParticleSet, RunTrace)> {
    let state = SamplerState::initialize(cfg, target)?;
    run_from(state, cfg, target, opts)
}

pub fn run_from(
    mut state: SamplerState,
    cfg: &SamplerConfig,
    target: &dyn Target,
    opts: &TraceOptions,
) -> Result<(ParticleSet, RunTrace)> {
    if opts.every == 0 {
        return Err(Error::config("trace_every", "must be positive"));
    }
    let started = Instant::now();
    let mut trace = RunTrace::new();
    trace.push(trace_row(&mut state, cfg, target, opts, started)?)?;
    let end = state.iteration + cfg.iterations;
    while state.iteration < end {
        step(&mut state, cfg, target)?;
        if state.iteration.is_multiple_of(opts.every) || state.iteration == end {
            let row = trace_row(&mut state, cfg, target, opts, started).map_err(|e| e.at_iteration(state.iteration))?;
            trace.push(row)?;
        }
    }
    Ok((state.particles, trace))
}
