use std::fmt;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::fd;
use crate::fields::{identity_suite_fields, ConstantField, VectorField};
use crate::geometry::{check_divergence_identity, MirrorMap};
use crate::kernels::{median_bandwidth, ScalarKernel};
use crate::spectral::{decompose, eigenfunction_values_and_grads};
use crate::stein::{mirrored_op_at, SteinContext};
use crate::targets::{
    bayesian_logistic_regression, quadratic_simplex_target, random_quadratic_matrix, selective_density_2d,
    sparse_dirichlet_posterior, synthetic_logistic_data, Target,
};

/// Exact draws per Monte-Carlo identity check.
pub const IDENTITY_DRAWS: usize = 100_000;

const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    /// Pass when the value is at most the bound.
    AtMost,
    /// Pass when the value exceeds the bound.
    Exceeds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub comparison: Comparison,
}

impl CheckLine {
    fn at_most(suite: &str, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            value,
            bound,
            comparison: Comparison::AtMost,
        }
    }

    pub fn passed(&self) -> bool {
        match self.comparison {
            Comparison::AtMost => self.value <= self.bound,
            Comparison::Exceeds => self.value > self.bound,
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.comparison {
            Comparison::AtMost => "<=",
            Comparison::Exceeds => ">",
        };
        write!(
            f,
            "{} {} {}: {:.6e} {op} {:.6e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.value,
            self.bound
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn failures(&self) -> Vec<&CheckLine> {
        self.lines.iter().filter(|l| !l.passed()).collect()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {failed} failed", self.lines.len())
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo check that the mirrored Stein operator has mean zero under
/// exact Dirichlet draws, plus a Langevin-operator control that should not.
///
/// Each line compares `|mean|` with four standard errors.
pub fn identity_check(seed: u64, draws: usize) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = MirrorMap::entropic_simplex(2)?.with_margin(0.0);
    for alpha in [2.0, 0.6] {
        let target = sparse_dirichlet_posterior(&[alpha; 3], &[0.0; 3])?;
        let points = target.sample_points(draws, &mut rng);
        let ctx = SteinContext::mirrored(&target, map)?;
        for (name, field) in identity_suite_fields(2) {
            let vals = points
                .iter()
                .map(|p| mirrored_op_at(&ctx, field.as_ref(), p))
                .collect::<Result<Vec<_>>>()?;
            let (mean, se) = mean_and_se(&vals);
            report.lines.push(CheckLine::at_most(
                "identity",
                format!("mirrored alpha={alpha} {name}"),
                mean.abs(),
                4.0 * se,
            ));
        }
        if alpha == 0.6 {
            let one = ConstantField(DVector::from_element(2, 1.0));
            let vals = points
                .iter()
                .map(|p| Ok(one.value(&p.theta).dot(&target.grad_log_density_at(p)?) + one.divergence(&p.theta)))
                .collect::<Result<Vec<_>>>()?;
            let (mean, se) = mean_and_se(&vals);
            report.lines.push(CheckLine {
                suite: "identity".into(),
                name: format!("langevin-control alpha={alpha} constant-one"),
                value: mean.abs(),
                bound: 4.0 * se,
                comparison: Comparison::Exceeds,
            });
        }
    }
    Ok(report)
}

fn random_simplex(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let w: Vec<f64> = (0..=d).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    DVector::from_iterator(d, w[..d].iter().map(|x| x / total))
}

fn random_orthant(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(0.2..3.0))
}

fn random_point(map: &MirrorMap, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match map.domain() {
        crate::Domain::Simplex(d) => random_simplex(d, rng),
        _ => random_orthant(map.dim(), rng),
    }
}

fn map_name(map: &MirrorMap) -> &'static str {
    match map.domain() {
        crate::Domain::Simplex(_) => "simplex",
        _ => "orthant",
    }
}

fn mirror_map_suite(report: &mut CheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-5;
    for map in [MirrorMap::entropic_simplex(3)?, MirrorMap::entropic_orthant(3)?] {
        let mut worst = [0.0f64; 6];
        for _ in 0..20 {
            let x = random_point(&map, rng);
            let eta = map.grad(&x)?;
            let errs = [
                fd::rel_err(&map.grad(&x)?, &fd::gradient(|y| map.psi(y).unwrap(), &x, FD_STEP), 1.0),
                fd::rel_err_mat(
                    &map.hessian(&x)?,
                    &fd::jacobian(|y| map.grad(y).unwrap(), &x, FD_STEP),
                    1.0,
                ),
                fd::rel_err_mat(
                    &map.inverse_hessian(&x)?,
                    &fd::jacobian(|e| map.grad_conjugate(e).unwrap(), &eta, FD_STEP),
                    1.0,
                ),
                fd::rel_err(
                    &map.inverse_hessian_divergence(&x)?,
                    &fd::row_divergence(|y| map.inverse_hessian(y).unwrap(), &x, FD_STEP),
                    1.0,
                ),
                fd::rel_err(
                    &map.log_det_hessian_grad(&x)?,
                    &fd::gradient(|y| map.log_det_hessian(y).unwrap(), &x, FD_STEP),
                    1.0,
                ),
                fd::rel_err(
                    &map.dual_log_det_hessian_grad(&eta)?,
                    &fd::gradient(|e| map.dual_log_det_hessian(e).unwrap(), &eta, FD_STEP),
                    1.0,
                ),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        let names = [
            "grad-psi",
            "hessian",
            "inverse-hessian",
            "inverse-hessian-divergence",
            "log-det-grad",
            "dual-log-det-grad",
        ];
        for (name, w) in names.iter().zip(worst) {
            report.lines.push(CheckLine::at_most(
                "mirror-map",
                format!("{} {name}", map_name(&map)),
                w,
                TOL,
            ));
        }
    }
    Ok(())
}

fn kernel_suite(report: &mut CheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-5;
    let simplex = MirrorMap::entropic_simplex(3)?;
    let kernels = [
        ("imq", ScalarKernel::imq(0.7)?),
        ("gaussian", ScalarKernel::gaussian(0.7)?),
        ("imq-dual", ScalarKernel::imq(0.7)?.composed_with(simplex)),
    ];
    for (name, k) in kernels {
        let (mut g1, mut g2, mut cross) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..100 {
            let x = random_simplex(3, rng);
            let y = random_simplex(3, rng);
            let n1 = fd::gradient(|z| k.eval(z, &y).unwrap(), &x, FD_STEP);
            let n2 = fd::gradient(|z| k.eval(&x, z).unwrap(), &y, FD_STEP);
            g1 = g1.max(fd::rel_err(&k.grad1(&x, &y)?, &n1, 1e-3));
            g2 = g2.max(fd::rel_err(&k.grad2(&x, &y)?, &n2, 1e-3));
            let (u, v) = (k.feature(&x)?, k.feature(&y)?);
            let numeric = fd::jacobian(|w| k.grad_features(&u, w), &v, FD_STEP);
            cross = cross.max(fd::rel_err_mat(&k.cross_hessian_features(&u, &v), &numeric, 1e-3));
        }
        report
            .lines
            .push(CheckLine::at_most("kernel", format!("{name} grad1"), g1, TOL));
        report
            .lines
            .push(CheckLine::at_most("kernel", format!("{name} grad2"), g2, TOL));
        report.lines.push(CheckLine::at_most(
            "kernel",
            format!("{name} cross-hessian"),
            cross,
            TOL,
        ));
    }
    Ok(())
}

fn target_suite(report: &mut CheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-5;
    let splits = synthetic_logistic_data(50, 1, 1, 4, rng)?;
    let targets: Vec<(&str, Box<dyn Target>)> = vec![
        (
            "sparse-dirichlet",
            Box::new(sparse_dirichlet_posterior(&[0.1; 4], &[90.0, 5.0, 5.0, 0.0])?),
        ),
        (
            "quadratic",
            Box::new(quadratic_simplex_target(random_quadratic_matrix(5, rng), 0.01)?),
        ),
        ("selective2d", Box::new(selective_density_2d())),
        (
            "logistic",
            Box::new(bayesian_logistic_regression(splits.train.x, splits.train.y)?),
        ),
    ];
    for (name, target) in targets {
        let d = target.dim();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let x = match target.domain() {
                crate::Domain::Simplex(_) => random_simplex(d, rng),
                crate::Domain::Orthant(_) => random_orthant(d, rng),
                crate::Domain::Euclidean(_) => DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)),
            };
            let numeric = fd::gradient(|y| target.log_density(y).unwrap(), &x, FD_STEP);
            worst = worst.max(fd::rel_err(&target.grad_log_density(&x)?, &numeric, 1.0));
        }
        report.lines.push(CheckLine::at_most("target", name, worst, TOL));
    }
    Ok(())
}

fn eigenfunction_suite(report: &mut CheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-5;
    let simplex = MirrorMap::entropic_simplex(3)?;
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let points: Vec<DVector<f64>> = (0..5).map(|_| random_simplex(3, rng)).collect();
        let base = ScalarKernel::imq(median_bandwidth(&points, false)?)?;
        let k = if trial % 2 == 0 {
            base
        } else {
            base.composed_with(simplex)
        };
        let dec = decompose(&points, &k, 1.0)?;
        for _ in 0..10 {
            let x = random_simplex(3, rng);
            let (_, grads) = eigenfunction_values_and_grads(&dec, &k, &points, &x)?;
            let numeric = fd::jacobian(
                |y| eigenfunction_values_and_grads(&dec, &k, &points, y).unwrap().0,
                &x,
                FD_STEP,
            );
            worst = worst.max(fd::rel_err_mat(&grads.transpose(), &numeric, 1e-2));
        }
    }
    report
        .lines
        .push(CheckLine::at_most("eigenfunction", "nystrom-gradients", worst, TOL));
    Ok(())
}

fn divergence_suite(report: &mut CheckReport, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-6;
    for map in [MirrorMap::entropic_simplex(3)?, MirrorMap::entropic_orthant(3)?] {
        for (name, field) in identity_suite_fields(3) {
            let mut worst = 0.0f64;
            for _ in 0..10 {
                let x = random_point(&map, rng);
                worst = worst.max(check_divergence_identity(&map, field.as_ref(), &x)?);
            }
            report.lines.push(CheckLine::at_most(
                "divergence-identity",
                format!("{} {name}", map_name(&map)),
                worst,
                TOL,
            ));
        }
    }
    Ok(())
}

/// All finite-difference suites: mirror maps, kernels, targets, eigenfunction
/// gradients, and the divergence/log-determinant identity.
pub fn grad_check(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mirror_map_suite(&mut report, &mut rng)?;
    kernel_suite(&mut report, &mut rng)?;
    target_suite(&mut report, &mut rng)?;
    eigenfunction_suite(&mut report, &mut rng)?;
    divergence_suite(&mut report, &mut rng)?;
    Ok(report)
}
