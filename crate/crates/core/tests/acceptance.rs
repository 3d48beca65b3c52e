//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use mirror_stein::fields::identity_suite_fields;
use mirror_stein::harness::{self, best_rates, run_experiment, ExperimentReport};
use mirror_stein::metrics::RunTrace;
use mirror_stein::particles::ParticleSet;
use mirror_stein::samplers::{
    self, sampler_map, svng_step_with_metric, Algorithm, BandwidthRule, Initialization, SamplerConfig, SamplerState,
    StepMode, TraceOptions,
};
use mirror_stein::spectral::{decompose, svmd_direction};
use mirror_stein::stein::{msvgd_direction, SteinContext};
use mirror_stein::targets::{
    bayesian_logistic_regression, quadratic_simplex_target, random_quadratic_matrix, sparse_dirichlet_posterior,
    synthetic_logistic_data, ConstantMetric, Target,
};
use mirror_stein::{KernelFamily, MirrorMap, ScalarKernel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

/// Exact Dirichlet draws via normalized Gamma variates, independent of the
/// library's sampler.
fn dirichlet_draws(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let g: Vec<f64> = (0..3).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        let theta = DVector::from_vec(vec![g[0] / total, g[1] / total]);
        // Draws that round onto the boundary have no finite score.
        if theta.iter().all(|&v| v > 0.0) && slack(&theta) > 0.0 {
            out.push(theta);
        }
    }
    out
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn criterion_01_stein_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut lines = Vec::new();
    let mut ok = true;
    for alpha in [2.0, 0.6] {
        let a = [alpha; 3];
        let draws = dirichlet_draws(alpha, 100_000, &mut rng);
        for (name, field) in identity_suite_fields(2) {
            // Closed-form operator: W = diag θ − θθᵀ, ∇·W = 1 − 3θ.
            let vals: Vec<f64> = draws
                .iter()
                .map(|t| {
                    let w = simplex_w(t);
                    let g = field.value(t);
                    let div_w = t.map(|v| 1.0 - 3.0 * v);
                    g.dot(&(&w * dirichlet_score(&a, t) + div_w)) + (&w * field.jacobian(t)).trace()
                })
                .collect();
            let (m, se) = mean_se(&vals);
            let pass = m.abs() <= 4.0 * se;
            ok &= pass;
            lines.push(format!(
                "alpha={alpha} {name}: |mean|={:.3e} 4SE={:.3e}",
                m.abs(),
                4.0 * se
            ));
        }
        if alpha == 0.6 {
            let vals: Vec<f64> = draws.iter().map(|t| dirichlet_score(&a, t).sum()).collect();
            let (m, se) = mean_se(&vals);
            let pass = m.abs() > 4.0 * se;
            ok &= pass;
            lines.push(format!(
                "langevin control alpha=0.6 g=1: |mean|={:.3e} must exceed 4SE={:.3e}",
                m.abs(),
                4.0 * se
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    report(1, ok, &format!("{} ({secs:.1}s)", lines.join("; ")));
    assert!(ok, "{lines:#?}");
}

#[test]
fn criterion_02_single_particle_svmd_is_mirror_descent() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = [0.7, 2.5, 1.3, 3.0];
    let target = sparse_dirichlet_posterior(&[0.5, 1.0, 1.0, 2.0], &[0.2, 1.5, 0.3, 1.0]).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let theta = random_simplex(3, &mut rng);
        let eps = rng.random_range(1e-3..1e-1);
        let l = rng.random_range(0.3..2.0);
        let family = if trial % 2 == 0 {
            KernelFamily::Imq
        } else {
            KernelFamily::Gaussian
        };
        let mut cfg = SamplerConfig::new(Algorithm::Svmd);
        cfg.n_particles = 1;
        cfg.step_mode = StepMode::Fixed;
        cfg.step_size = eps;
        cfg.bandwidth = BandwidthRule::Fixed(l);
        cfg.kernel = match family {
            KernelFamily::Imq => samplers::KernelChoice::Imq,
            KernelFamily::Gaussian => samplers::KernelChoice::Gaussian,
        };
        cfg.init = Initialization::Points(vec![theta.clone()]);
        let mut state = SamplerState::initialize(&cfg, &target).unwrap();
        samplers::step(&mut state, &cfg, &target).unwrap();
        // k(θ, θ) = 1 and ∇k(θ, θ) = 0 for both radial kernels.
        let expected = simplex_grad_psi(&theta) + dirichlet_score(&a, &theta) * eps;
        worst = worst.max(rel(state.particles.dual(0).unwrap(), &expected));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-12 && secs < 1.0;
    report(2, ok, &format!("max rel err {worst:.3e} (bound 1e-12, {secs:.2}s)"));
    assert!(ok, "single-particle SVMD differs from mirror descent: {worst:e}");
}

#[test]
fn criterion_03_single_particle_svng_is_natural_gradient() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let splits = synthetic_logistic_data(40, 1, 1, d, &mut rng).unwrap();
    let target = bayesian_logistic_regression(splits.train.x, splits.train.y).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let g = &m * m.transpose() + DMatrix::identity(d, d) * 0.5;
        let w = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let eps = rng.random_range(1e-3..1e-1);
        let mut cfg = SamplerConfig::new(Algorithm::Svng);
        cfg.n_particles = 1;
        cfg.step_mode = StepMode::Fixed;
        cfg.step_size = eps;
        cfg.bandwidth = BandwidthRule::Fixed(rng.random_range(0.3..2.0));
        cfg.init = Initialization::Points(vec![w.clone()]);
        let mut state = SamplerState::initialize(&cfg, &target).unwrap();
        let metric = ConstantMetric::new(g.clone()).unwrap();
        svng_step_with_metric(&mut state, &cfg, &target, &metric, None).unwrap();
        let expected = &w + g.clone().lu().solve(&target.grad_log_density(&w).unwrap()).unwrap() * eps;
        worst = worst.max(rel(state.particles.theta(0), &expected));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-12 && secs < 1.0;
    report(3, ok, &format!("max rel err {worst:.3e} (bound 1e-12, {secs:.2}s)"));
    assert!(ok);
}

#[test]
fn criterion_04_dual_msvgd_matches_primal_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let d = 1 + trial % 3;
        let n = 2 + trial % 4;
        let a: Vec<f64> = (0..=d).map(|_| rng.random_range(0.3..4.0)).collect();
        let target = sparse_dirichlet_posterior(&a, &vec![0.0; d + 1]).unwrap();
        let map = MirrorMap::entropic_simplex(d).unwrap();
        let points: Vec<DVector<f64>> = (0..n).map(|_| random_simplex(d, &mut rng)).collect();
        let l = rng.random_range(0.2..1.0);
        let k = ScalarKernel::imq(l).unwrap();
        let particles = ParticleSet::from_primal(points.clone(), &map).unwrap();
        let ctx = SteinContext::mirrored(&target, map).unwrap();
        let analytic = msvgd_direction(&particles, &k, &ctx).unwrap();
        for (i, theta) in points.iter().enumerate() {
            let oracle = DVector::from_fn(d, |c, _| {
                let field = |x: &DVector<f64>| {
                    let mut e = DVector::zeros(d);
                    e[c] = imq(x, theta, l);
                    e
                };
                points
                    .iter()
                    .map(|p| mirrored_op_fd(|x| dirichlet_score(&a, x), field, p, 1e-5))
                    .sum::<f64>()
                    / n as f64
            });
            worst = worst.max(rel(&analytic[i], &oracle));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && secs < 10.0;
    report(4, ok, &format!("max rel err {worst:.3e} (bound 1e-4, {secs:.2}s)"));
    assert!(ok);
}

#[test]
fn criterion_05_svmd_brute_force() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let d = 1 + (seed as usize) % 3;
        let n = 1 + (seed as usize) % 4;
        let a: Vec<f64> = (0..=d).map(|_| rng.random_range(0.3..4.0)).collect();
        let target = sparse_dirichlet_posterior(&a, &vec![0.0; d + 1]).unwrap();
        let map = MirrorMap::entropic_simplex(d).unwrap();
        let points: Vec<DVector<f64>> = (0..n).map(|_| random_simplex(d, &mut rng)).collect();
        let l = rng.random_range(0.3..1.5);
        let gaussian_kernel = seed % 2 == 1;
        let k = if gaussian_kernel {
            ScalarKernel::gaussian(l).unwrap()
        } else {
            ScalarKernel::imq(l).unwrap()
        };
        let particles = ParticleSet::from_primal(points.clone(), &map).unwrap();
        let dec = decompose(&points, &k, 1.0).unwrap();
        let analytic = svmd_direction(&particles, &dec, &k, &map, &target).unwrap();
        let brute = BruteSvmdKernel::new(
            move |x: &DVector<f64>, y: &DVector<f64>| {
                if gaussian_kernel {
                    gaussian(x, y, l)
                } else {
                    imq(x, y, l)
                }
            },
            points.clone(),
        );
        assert_eq!(brute.lambdas.len(), dec.rank());
        for (i, theta) in points.iter().enumerate() {
            let oracle = DVector::from_fn(d, |c, _| {
                let field = |x: &DVector<f64>| brute.matrix(x, theta).column(c).into_owned();
                points
                    .iter()
                    .map(|p| mirrored_op_fd(|x| dirichlet_score(&a, x), field, p, 1e-5))
                    .sum::<f64>()
                    / n as f64
            });
            worst = worst.max(rel(&analytic[i], &oracle));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && secs < 30.0;
    report(5, ok, &format!("max rel err {worst:.3e} (bound 1e-4, {secs:.2}s)"));
    assert!(ok);
}

#[test]
fn criterion_06_msvgd_descent() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target = quadratic_simplex_target(random_quadratic_matrix(5, &mut rng), 0.01).unwrap();
    let mut cfg = SamplerConfig::new(Algorithm::Msvgd);
    cfg.n_particles = 50;
    cfg.iterations = 200;
    cfg.step_mode = StepMode::Fixed;
    cfg.step_size = 1e-3;
    cfg.bandwidth = BandwidthRule::MedianFrozen;
    cfg.init = SamplerConfig::default_init(target.domain());
    let opts = TraceOptions {
        every: 1,
        reference: None,
        mksd: true,
        wall_clock: false,
    };
    let (_, trace): (_, RunTrace) = samplers::run(&cfg, &target, &opts).unwrap();
    let mksd: Vec<f64> = trace.rows().iter().map(|r| r.mksd2.unwrap()).collect();
    let ratio = mksd[200] / mksd[0];
    let violations: Vec<usize> = (21..=200).filter(|&t| mksd[t] > 1.05 * mksd[t - 1]).collect();
    let secs = start.elapsed().as_secs_f64();
    let ok = ratio < 0.5 && violations.is_empty() && secs < 60.0;
    report(
        6,
        ok,
        &format!(
            "MKSD² {:.3e} -> {:.3e} (ratio {ratio:.3}), band violations after t=20: {} ({secs:.1}s)",
            mksd[0],
            mksd[200],
            violations.len()
        ),
    );
    assert!(ok, "violations at {violations:?}");
}

fn desk_report(dir: &Path, text: &str) -> ExperimentReport {
    let spec = harness::parse_spec(text, dir).unwrap();
    run_experiment(&spec).unwrap()
}

fn best(report: &ExperimentReport, label: &str) -> harness::BestRate {
    best_rates(report).into_iter().find(|b| b.label == label).unwrap()
}

#[test]
fn criterion_07_figure_shape() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let dirichlet = desk_report(
        dir.path(),
        "experiment = \"dirichlet20\"\ndimension = 5\ntrace_every = 50\nconcurrent = true\noutput_dir = \"d\"\n",
    );
    let ed = |r: &ExperimentReport, l: &str| best(r, l).mean_energy_distance.unwrap();
    let (m, s, p) = (
        ed(&dirichlet, "msvgd"),
        ed(&dirichlet, "svmd"),
        ed(&dirichlet, "projected-svgd"),
    );
    let quadratic = desk_report(
        dir.path(),
        "experiment = \"quadratic20\"\ndimension = 5\ntrace_every = 50\nconcurrent = true\noutput_dir = \"q\"\n\
         [[samplers]]\nalgorithm = \"msvgd\"\n[[samplers]]\nalgorithm = \"svmd\"\n",
    );
    let (qm, qs) = (ed(&quadratic, "msvgd"), ed(&quadratic, "svmd"));
    let secs = start.elapsed().as_secs_f64();
    let ok = m < p && s < p && qs <= qm && secs < 600.0;
    report(
        7,
        ok,
        &format!(
            "dirichlet ED msvgd {m:.3e}, svmd {s:.3e}, projected-svgd {p:.3e}; quadratic ED svmd {qs:.3e} vs msvgd {qm:.3e} ({secs:.1}s)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_svng_beats_svgd() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let r = desk_report(
        dir.path(),
        "experiment = \"logistic\"\nn = 20\niterations = 1000\nseeds = [0, 1, 2]\ntrace_every = 100\n\
         concurrent = true\noutput_dir = \"lr\"\n[target]\nn_train = 2000\n\
         [[samplers]]\nalgorithm = \"svng\"\nbatch_size = 256\n[[samplers]]\nalgorithm = \"svgd\"\nbatch_size = 256\n",
    );
    let svng = best(&r, "svng");
    let svgd = best(&r, "svgd");
    let (a, b) = (
        svng.mean_test_log_predictive.unwrap(),
        svgd.mean_test_log_predictive.unwrap(),
    );
    let secs = start.elapsed().as_secs_f64();
    let ok = a >= b && secs < 600.0;
    report(
        8,
        ok,
        &format!(
            "test log predictive svng {a:.4} (rate {}) vs svgd {b:.4} (rate {}) ({secs:.1}s)",
            svng.rate, svgd.rate
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_gradient_suites() {
    let start = Instant::now();
    let r = harness::grad_check(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = r.passed() && secs < 60.0;
    let failures: Vec<String> = r.failures().iter().map(|l| l.to_string()).collect();
    report(
        9,
        ok,
        &format!(
            "{} finite-difference checks, {} failed ({secs:.2}s)",
            r.lines.len(),
            failures.len()
        ),
    );
    assert!(ok, "{failures:#?}");
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let specs = [
        "experiment = \"dirichlet20\"\ndimension = 4\nn = 10\niterations = 30\ntrace_every = 7\n",
        "experiment = \"selective2d\"\nn = 10\niterations = 30\ntrace_every = 7\n[ground_truth]\nburn_in = 200\nsize = 100\n",
        "experiment = \"logistic\"\nn = 5\niterations = 30\ntrace_every = 7\n[target]\nn_train = 300\n\
         [[samplers]]\nalgorithm = \"svng\"\nrates = [0.1]\nbatch_size = 64\n",
    ];
    let mut compared = 0;
    let mut ok = true;
    for (i, text) in specs.iter().enumerate() {
        // Top-level keys must precede the first table.
        let a = desk_report(dir.path(), &format!("output_dir = \"a{i}\"\n{text}"));
        let b = desk_report(dir.path(), &format!("output_dir = \"b{i}\"\nconcurrent = true\n{text}"));
        for (x, y) in a.cells.iter().zip(&b.cells) {
            let (Some(px), Some(py)) = (&x.trace_file, &y.trace_file) else {
                ok = false;
                continue;
            };
            ok &= std::fs::read(px).unwrap() == std::fs::read(py).unwrap();
            compared += 1;
        }
    }
    report(10, ok, &format!("{compared} trace files byte-identical across reruns"));
    assert!(ok);
}

#[test]
fn sampler_map_is_margin_free() {
    let map = sampler_map(mirror_stein::Domain::Simplex(2)).unwrap();
    assert_eq!(map.margin(), 0.0);
}
