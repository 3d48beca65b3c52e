//! Target densities with analytic scores, and metric tensors for natural
//! gradient samplers.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Domain, MirrorMap, PrimalPoint};

/// An unnormalized log-density with its gradient.
pub trait Target: Send + Sync {
    fn domain(&self) -> Domain;

    fn dim(&self) -> usize {
        self.domain().dim()
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64>;

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Score at a point whose simplex slack is already known. Targets that
    /// divide by the slack override this to avoid recomputing `1 − Σθ`.
    fn grad_log_density_at(&self, point: &PrimalPoint) -> Result<DVector<f64>> {
        self.grad_log_density(&point.theta)
    }

    /// `∇²ψ(θ)⁻¹∇log p(θ)`.
    fn preconditioned_score(&self, map: &MirrorMap, point: &PrimalPoint) -> Result<DVector<f64>> {
        Ok(map.inverse_hessian_at(point) * self.grad_log_density_at(point)?)
    }

    /// I.i.d. draws, when an exact sampler exists.
    fn sample_exact(&self, _n: usize, _rng: &mut dyn rand::RngCore) -> Option<Vec<DVector<f64>>> {
        None
    }

    fn as_logistic(&self) -> Option<&LogisticRegression> {
        None
    }
}

fn check_simplex_point(d: usize, theta: &DVector<f64>) -> Result<f64> {
    check_dim(d, theta.len())?;
    let slack = 1.0 - theta.sum();
    if theta.iter().any(|&v| !(v > 0.0)) || !(slack > 0.0) {
        return Err(Error::Domain(format!(
            "{} is not inside the simplex",
            theta.transpose()
        )));
    }
    Ok(slack)
}

/// Dirichlet posterior on the `(d+1)`-simplex, `p(θ) ∝ Π θ_j^{α_j + n_j − 1}`.
#[derive(Clone, Debug)]
pub struct DirichletPosterior {
    /// `α_j + n_j` for all `d + 1` categories.
    concentration: DVector<f64>,
}

pub fn sparse_dirichlet_posterior(alpha: &[f64], counts: &[f64]) -> Result<DirichletPosterior> {
    if alpha.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: counts.len(),
        });
    }
    if alpha.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 categories".into()));
    }
    if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument("concentrations must be positive".into()));
    }
    if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument("counts must be non-negative".into()));
    }
    Ok(DirichletPosterior {
        concentration: DVector::from_iterator(alpha.len(), alpha.iter().zip(counts).map(|(a, c)| a + c)),
    })
}

impl DirichletPosterior {
    /// Posterior concentration `α + n` over all categories.
    pub fn concentration(&self) -> &DVector<f64> {
        &self.concentration
    }

    /// Mean of the first `d` coordinates.
    pub fn mean(&self) -> DVector<f64> {
        let d = self.dim();
        self.concentration.rows(0, d) / self.concentration.sum()
    }

    fn exponents(&self) -> DVector<f64> {
        self.concentration.map(|a| a - 1.0)
    }

    /// Draws carrying their exact slack coordinate.
    pub fn sample_points(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<PrimalPoint> {
        let gammas: Vec<Gamma<f64>> = self
            .concentration
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape"))
            .collect();
        let d = self.dim();
        (0..n)
            .map(|_| {
                let mut g: Vec<f64> = gammas.iter().map(|dist| dist.sample(rng)).collect();
                // Shapes well below 1 can underflow to exactly zero.
                for v in g.iter_mut() {
                    *v = v.max(f64::MIN_POSITIVE);
                }
                let total: f64 = g.iter().sum();
                PrimalPoint {
                    theta: DVector::from_iterator(d, g[..d].iter().map(|v| v / total)),
                    slack: g[d] / total,
                }
            })
            .collect()
    }
}

impl Target for DirichletPosterior {
    fn domain(&self) -> Domain {
        Domain::Simplex(self.concentration.len() - 1)
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        let slack = check_simplex_point(self.dim(), theta)?;
        let e = self.exponents();
        let d = self.dim();
        Ok(theta.iter().zip(e.iter()).map(|(t, a)| a * t.ln()).sum::<f64>() + e[d] * slack.ln())
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let slack = check_simplex_point(self.dim(), theta)?;
        self.grad_log_density_at(&PrimalPoint {
            theta: theta.clone(),
            slack,
        })
    }

    fn grad_log_density_at(&self, point: &PrimalPoint) -> Result<DVector<f64>> {
        let e = self.exponents();
        let d = self.dim();
        let last = e[d] / point.slack;
        Ok(DVector::from_fn(d, |j, _| e[j] / point.theta[j] - last))
    }

    /// Closed form `(α_j + n_j − 1) − θ_j Σ_k (α_k + n_k − 1)`, which stays
    /// accurate when some coordinates are tiny.
    fn preconditioned_score(&self, map: &MirrorMap, point: &PrimalPoint) -> Result<DVector<f64>> {
        if map.domain() != self.domain() {
            return Ok(map.inverse_hessian_at(point) * self.grad_log_density_at(point)?);
        }
        let e = self.exponents();
        let total = e.sum();
        Ok(DVector::from_fn(self.dim(), |j, _| e[j] - point.theta[j] * total))
    }

    fn sample_exact(&self, n: usize, rng: &mut dyn rand::RngCore) -> Option<Vec<DVector<f64>>> {
        Some(self.sample_points(n, rng).into_iter().map(|p| p.theta).collect())
    }
}

/// `log p(θ) = −θᵀAθ / (2σ²)` restricted to the simplex interior.
#[derive(Clone, Debug)]
pub struct QuadraticSimplexTarget {
    a: DMatrix<f64>,
    inv_sigma2: f64,
}

pub fn quadratic_simplex_target(a: DMatrix<f64>, sigma: f64) -> Result<QuadraticSimplexTarget> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::InvalidArgument("A must be a non-empty square matrix".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {sigma}")));
    }
    let asym = (&a - a.transpose()).amax();
    if asym > 1e-12 * a.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "A is not symmetric (asymmetry {asym:e})"
        )));
    }
    if Cholesky::new(a.clone()).is_none() {
        return Err(Error::NotPositiveDefinite("Cholesky factorization of A failed".into()));
    }
    Ok(QuadraticSimplexTarget {
        a,
        inv_sigma2: 1.0 / (sigma * sigma),
    })
}

/// `A = MMᵀ / λ_max(MMᵀ)` with `M_ij ~ Unif[−1, 1]` i.i.d.
pub fn random_quadratic_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..=1.0));
    let a = &m * m.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let top = SymmetricEigen::new(a.clone()).eigenvalues.max();
    a / top
}

impl QuadraticSimplexTarget {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl Target for QuadraticSimplexTarget {
    fn domain(&self) -> Domain {
        Domain::Simplex(self.a.nrows())
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        check_simplex_point(self.dim(), theta)?;
        Ok(-0.5 * self.inv_sigma2 * theta.dot(&(&self.a * theta)))
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_simplex_point(self.dim(), theta)?;
        Ok(&self.a * theta * -self.inv_sigma2)
    }

    fn grad_log_density_at(&self, point: &PrimalPoint) -> Result<DVector<f64>> {
        Ok(&self.a * &point.theta * -self.inv_sigma2)
    }
}

/// Fixed two-dimensional quadratic density on the positive orthant.
#[derive(Clone, Debug, Default)]
pub struct SelectiveDensity2d;

const SELECTIVE_SCALE: f64 = 8.07193;
const SELECTIVE_ROW1: [f64; 3] = [2.39859, 1.90816, 2.39751];
const SELECTIVE_ROW2: [f64; 2] = [1.18099, -1.46104];

pub fn selective_density_2d() -> SelectiveDensity2d {
    SelectiveDensity2d
}

impl SelectiveDensity2d {
    fn residuals(theta: &DVector<f64>) -> (f64, f64) {
        let [a, b, c] = SELECTIVE_ROW1;
        let [e, f] = SELECTIVE_ROW2;
        (a * theta[0] + b * theta[1] + c, e * theta[1] + f)
    }
}

impl Target for SelectiveDensity2d {
    fn domain(&self) -> Domain {
        Domain::Orthant(2)
    }

    fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(2, theta.len())?;
        if theta.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!("{} is outside the orthant", theta.transpose())));
        }
        let (r1, r2) = Self::residuals(theta);
        Ok(-SELECTIVE_SCALE * (r1 * r1 + r2 * r2))
    }

    fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(2, theta.len())?;
        if theta.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!("{} is outside the orthant", theta.transpose())));
        }
        let (r1, r2) = Self::residuals(theta);
        let [a, b, _] = SELECTIVE_ROW1;
        let [e, _] = SELECTIVE_ROW2;
        let s = -2.0 * SELECTIVE_SCALE;
        Ok(DVector::from_vec(vec![s * r1 * a, s * (r1 * b + r2 * e)]))
    }
}

/// Labelled data for logistic regression. Rows of `x` are examples; any
/// bias is an explicit constant column.
#[derive(Clone, Debug)]
pub struct LogisticData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LogisticData {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Train/validation/test splits of one synthetic problem.
#[derive(Clone, Debug)]
pub struct LogisticSplits {
    pub train: LogisticData,
    pub validation: LogisticData,
    pub test: LogisticData,
    pub true_weights: DVector<f64>,
}

/// Synthetic logistic-regression problem with `d` weights: `d − 1`
/// standard-normal features plus a constant bias column, weights drawn from
/// a standard normal, labels drawn from the model.
pub fn synthetic_logistic_data<R: Rng + ?Sized>(
    n_train: usize,
    n_validation: usize,
    n_test: usize,
    d: usize,
    rng: &mut R,
) -> Result<LogisticSplits> {
    if d < 1 {
        return Err(Error::InvalidArgument("need at least one weight".into()));
    }
    let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut draw = |n: usize| {
        let x = DMatrix::from_fn(n, d, |_, j| {
            if j == d - 1 {
                1.0
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let y = DVector::from_fn(n, |i, _| {
            let p = sigmoid(x.row(i).transpose().dot(&w));
            f64::from(u8::from(Bernoulli::new(p).expect("probability").sample(rng)))
        });
        LogisticData { x, y }
    };
    Ok(LogisticSplits {
        train: draw(n_train),
        validation: draw(n_validation),
        test: draw(n_test),
        true_weights: w,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Bayesian logistic regression with a standard normal prior on the weights.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    data: LogisticData,
}

pub fn bayesian_logistic_regression(x: DMatrix<f64>, y: DVector<f64>) -> Result<LogisticRegression> {
    check_dim(x.nrows(), y.len())?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidArgument("empty design matrix".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(LogisticRegression {
        data: LogisticData { x, y },
    })
}

impl LogisticRegression {
    pub fn num_data(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &LogisticData {
        &self.data
    }

    fn logit(&self, w: &DVector<f64>, i: usize) -> f64 {
        self.data.x.row(i).transpose().dot(w)
    }

    /// Prior score plus `(N/|B|) Σ_{i∈B} x_i (y_i − σ(wᵀx_i))`.
    pub fn minibatch_grad(&self, w: &DVector<f64>, batch: &[usize]) -> Result<DVector<f64>> {
        check_dim(self.dim(), w.len())?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let mut acc = DVector::zeros(self.dim());
        for &i in batch {
            if i >= self.num_data() {
                return Err(Error::InvalidArgument(format!("minibatch index {i} out of range")));
            }
            let r = self.data.y[i] - sigmoid(self.logit(w, i));
            acc += self.data.x.row(i).transpose() * r;
        }
        Ok(acc * (self.num_data() as f64 / batch.len() as f64) - w)
    }
}

impl Target for LogisticRegression {
    fn domain(&self) -> Domain {
        Domain::Euclidean(self.data.x.ncols())
    }

    fn log_density(&self, w: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), w.len())?;
        let mut ll = -0.5 * w.norm_squared();
        for i in 0..self.num_data() {
            let z = self.logit(w, i);
            ll += if self.data.y[i] == 1.0 {
                log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            };
        }
        Ok(ll)
    }

    fn grad_log_density(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let all: Vec<usize> = (0..self.num_data()).collect();
        self.minibatch_grad(w, &all)
    }

    fn as_logistic(&self) -> Option<&LogisticRegression> {
        Some(self)
    }
}

/// Metric tensor `G(θ)` with the row divergence of its inverse.
pub trait MetricProvider: Send + Sync {
    fn metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn inverse_metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn inverse_metric_divergence(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let asym = (m - m.transpose()).amax();
    if !m.iter().all(|v| v.is_finite()) || asym > 1e-10 * m.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} is not symmetric and finite"
        )));
    }
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{what} has no Cholesky factor")))
}

/// A position-independent metric.
#[derive(Clone, Debug)]
pub struct ConstantMetric {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
}

impl ConstantMetric {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        let g_inv = spd_inverse(&g, "metric")?;
        Ok(Self { g, g_inv })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            g: DMatrix::identity(d, d),
            g_inv: DMatrix::identity(d, d),
        }
    }
}

impl MetricProvider for ConstantMetric {
    fn metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.g.nrows(), theta.len())?;
        Ok(self.g.clone())
    }

    fn inverse_metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.g.nrows(), theta.len())?;
        Ok(self.g_inv.clone())
    }

    fn inverse_metric_divergence(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.g.nrows(), theta.len())?;
        Ok(DVector::zeros(theta.len()))
    }
}

pub const FISHER_DAMPING: f64 = 0.01;
pub const FISHER_MAX_DECAY: f64 = 0.95;

/// Moving-average Fisher information estimate shared by all particles.
#[derive(Clone, Debug)]
pub struct MetricTensorEstimate {
    /// Undamped moving average `Ĝ_r`.
    pub g: DMatrix<f64>,
    /// Moving average of `∂Ĝ/∂w_j`, one matrix per coordinate.
    pub dg: Vec<DMatrix<f64>>,
    /// Number of updates applied so far.
    pub r: usize,
    pub damping: f64,
}

impl MetricTensorEstimate {
    pub fn new(d: usize) -> Self {
        Self {
            g: DMatrix::zeros(d, d),
            dg: vec![DMatrix::zeros(d, d); d],
            r: 0,
            damping: FISHER_DAMPING,
        }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    /// `min(1 − 1/r, 0.95)`.
    pub fn decay(r: usize) -> f64 {
        if r == 0 {
            return 0.0;
        }
        (1.0 - 1.0 / r as f64).min(FISHER_MAX_DECAY)
    }

    pub fn damped(&self) -> DMatrix<f64> {
        let d = self.g.nrows();
        &self.g + DMatrix::identity(d, d) * self.damping
    }
}

/// Minibatch Fisher information averaged over particles, and its derivative.
fn minibatch_fisher(
    target: &LogisticRegression,
    particles: &[DVector<f64>],
    batch: &[usize],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let d = target.dim();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    if particles.is_empty() {
        return Err(Error::InvalidArgument("no particles".into()));
    }
    let scale = target.num_data() as f64 / batch.len() as f64 / particles.len() as f64;
    let mut g = DMatrix::zeros(d, d);
    let mut dg = vec![DMatrix::zeros(d, d); d];
    for &i in batch {
        if i >= target.num_data() {
            return Err(Error::InvalidArgument(format!("minibatch index {i} out of range")));
        }
        let x = target.data.x.row(i).transpose();
        let (mut c0, mut c1) = (0.0, 0.0);
        for w in particles {
            check_dim(d, w.len())?;
            let s = sigmoid(x.dot(w));
            c0 += s * (1.0 - s);
            c1 += s * (1.0 - s) * (1.0 - 2.0 * s);
        }
        let outer = &x * x.transpose();
        g += &outer * (c0 * scale);
        for (j, m) in dg.iter_mut().enumerate() {
            *m += &outer * (c1 * scale * x[j]);
        }
    }
    Ok((g, dg))
}

/// One moving-average step of the Fisher estimate.
pub fn fisher_metric_update(
    est: &MetricTensorEstimate,
    target: &LogisticRegression,
    particles: &[DVector<f64>],
    batch: &[usize],
) -> Result<MetricTensorEstimate> {
    let (gb, dgb) = minibatch_fisher(target, particles, batch)?;
    let r = est.r + 1;
    let rho = MetricTensorEstimate::decay(r);
    let next = MetricTensorEstimate {
        g: &est.g * rho + gb * (1.0 - rho),
        dg: est
            .dg
            .iter()
            .zip(dgb)
            .map(|(old, new)| old * rho + new * (1.0 - rho))
            .collect(),
        r,
        damping: est.damping,
    };
    spd_inverse(&next.damped(), "damped Fisher estimate")?;
    Ok(next)
}

/// Metric provider backed by a shared Fisher estimate.
#[derive(Clone, Debug)]
pub struct FisherMetric {
    estimate: MetricTensorEstimate,
    g_inv: DMatrix<f64>,
    div: DVector<f64>,
}

impl FisherMetric {
    pub fn new(estimate: MetricTensorEstimate) -> Result<Self> {
        let g_inv = spd_inverse(&estimate.damped(), "damped Fisher estimate")?;
        let d = g_inv.nrows();
        // [∇·G⁻¹]_a = −Σ_j [G⁻¹ (∂_j G) G⁻¹]_{aj}
        let mut div = DVector::zeros(d);
        for (j, dgj) in estimate.dg.iter().enumerate() {
            let m = &g_inv * dgj * &g_inv;
            for a in 0..d {
                div[a] -= m[(a, j)];
            }
        }
        Ok(Self { estimate, g_inv, div })
    }

    pub fn estimate(&self) -> &MetricTensorEstimate {
        &self.estimate
    }
}

impl MetricProvider for FisherMetric {
    fn metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.g_inv.nrows(), theta.len())?;
        Ok(self.estimate.damped())
    }

    fn inverse_metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.g_inv.nrows(), theta.len())?;
        Ok(self.g_inv.clone())
    }

    fn inverse_metric_divergence(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.g_inv.nrows(), theta.len())?;
        Ok(self.div.clone())
    }
}

/// Read a headerless CSV with one point per row.
pub fn read_reference_sample(path: &Path, d: usize) -> Result<Vec<DVector<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::config(
                "reference",
                format!(
                    "row {row} of {} has {} columns, expected {d}",
                    path.display(),
                    record.len()
                ),
            ));
        }
        let values = record
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config("reference", format!("row {row}: cannot parse `{s}` as a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(DVector::from_vec(values));
    }
    Ok(out)
}

/// Write points as a headerless CSV at full precision.
pub fn write_reference_sample(path: &Path, points: &[DVector<f64>]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(Error::Csv)?;
    for p in points {
        writer.write_record(p.iter().map(|v| format!("{v:.16e}")))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
