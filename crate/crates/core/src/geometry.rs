//! Mirror maps for the constrained domains.
//!
//! Two maps are supported:
//!
//! * the negative entropy `ψ(θ) = Σ_{j=1}^{d+1} θ_j log θ_j` on the interior of
//!   the `(d+1)`-simplex, parameterized by its first `d` coordinates with
//!   `θ_{d+1} = 1 − Σ_j θ_j` implicit (the "slack");
//! * the entropic orthant map `ψ(θ) = Σ_j (θ_j log θ_j − θ_j)` on `θ > 0`.
//!
//! Every hook is a pure function of its input. Points on or outside the
//! boundary are rejected with [`Error::Domain`] rather than projected.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::fd;
use crate::fields::VectorField;

/// Points closer than this to the boundary are rejected by default.
pub const DEFAULT_INTERIOR_MARGIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Interior of the `(d+1)`-simplex, `d` free coordinates.
    Simplex(usize),
    /// Open positive orthant of `R^d`.
    Orthant(usize),
    /// Unconstrained `R^d`.
    Euclidean(usize),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match *self {
            Domain::Simplex(d) | Domain::Orthant(d) | Domain::Euclidean(d) => d,
        }
    }

    pub fn is_constrained(&self) -> bool {
        !matches!(self, Domain::Euclidean(_))
    }

    /// Strict interior membership with a boundary margin.
    pub fn contains(&self, theta: &DVector<f64>, margin: f64) -> bool {
        if theta.len() != self.dim() || theta.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            Domain::Simplex(_) => theta.iter().all(|&v| v > margin) && 1.0 - theta.sum() > margin,
            Domain::Orthant(_) => theta.iter().all(|&v| v > margin),
            Domain::Euclidean(_) => true,
        }
    }
}

/// A point of the simplex with its implicit last coordinate carried
/// explicitly, so that it stays accurate when it is tiny.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalPoint {
    pub theta: DVector<f64>,
    /// `θ_{d+1}` on the simplex; unused (set to 1) on the orthant.
    pub slack: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MirrorMap {
    domain: Domain,
    margin: f64,
}

impl MirrorMap {
    pub fn entropic_simplex(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("simplex dimension must be ≥ 1".into()));
        }
        Ok(Self {
            domain: Domain::Simplex(d),
            margin: DEFAULT_INTERIOR_MARGIN,
        })
    }

    pub fn entropic_orthant(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("orthant dimension must be ≥ 1".into()));
        }
        Ok(Self {
            domain: Domain::Orthant(d),
            margin: DEFAULT_INTERIOR_MARGIN,
        })
    }

    /// The entropic map matching a constrained domain, `None` for `R^d`.
    pub fn for_domain(domain: Domain) -> Option<Self> {
        match domain {
            Domain::Simplex(d) => Self::entropic_simplex(d).ok(),
            Domain::Orthant(d) => Self::entropic_orthant(d).ok(),
            Domain::Euclidean(_) => None,
        }
    }

    /// Replace the interior margin. A margin of zero only rejects points
    /// exactly on or beyond the boundary.
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin.max(0.0);
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    fn is_simplex(&self) -> bool {
        matches!(self.domain, Domain::Simplex(_))
    }

    /// Validate `θ` and return it with its slack coordinate.
    pub fn primal_point(&self, theta: &DVector<f64>) -> Result<PrimalPoint> {
        check_dim(self.dim(), theta.len())?;
        let slack = if self.is_simplex() { 1.0 - theta.sum() } else { 1.0 };
        let point = PrimalPoint {
            theta: theta.clone(),
            slack,
        };
        self.check_point(&point)?;
        Ok(point)
    }

    pub fn check_interior(&self, theta: &DVector<f64>) -> Result<()> {
        self.primal_point(theta).map(|_| ())
    }

    fn check_point(&self, p: &PrimalPoint) -> Result<()> {
        let m = self.margin;
        if let Some((j, v)) = p.theta.iter().enumerate().find(|(_, v)| !v.is_finite() || **v <= m) {
            return Err(Error::Domain(format!("coordinate {j} = {v:e} (margin {m:e})")));
        }
        if self.is_simplex() && (!p.slack.is_finite() || p.slack <= m) {
            return Err(Error::Domain(format!(
                "implicit simplex coordinate = {:e} (margin {m:e})",
                p.slack
            )));
        }
        Ok(())
    }

    /// `ψ(θ)`.
    pub fn psi(&self, theta: &DVector<f64>) -> Result<f64> {
        let p = self.primal_point(theta)?;
        let xlogx = |v: f64| v * v.ln();
        Ok(if self.is_simplex() {
            p.theta.iter().map(|&v| xlogx(v)).sum::<f64>() + xlogx(p.slack)
        } else {
            p.theta.iter().map(|&v| xlogx(v) - v).sum()
        })
    }

    /// `∇ψ(θ)`: primal to dual.
    pub fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.primal_point(theta)?;
        Ok(self.grad_at(&p))
    }

    pub(crate) fn grad_at(&self, p: &PrimalPoint) -> DVector<f64> {
        if self.is_simplex() {
            let log_slack = p.slack.ln();
            p.theta.map(|v| v.ln() - log_slack)
        } else {
            p.theta.map(f64::ln)
        }
    }

    /// `∇ψ*(η)`: dual to primal.
    pub fn grad_conjugate(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.dual_to_primal(eta)?.theta)
    }

    /// `∇ψ*(η)` together with an accurate slack coordinate.
    ///
    /// On the simplex this is a softmax with a zero logit appended, shifted by
    /// `max(0, max_j η_j)` so that large dual coordinates do not overflow.
    /// The result is validated against the map's interior margin.
    pub fn dual_to_primal(&self, eta: &DVector<f64>) -> Result<PrimalPoint> {
        check_dim(self.dim(), eta.len())?;
        if let Some(j) = eta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("dual coordinate {j} is not finite")));
        }
        let point = if self.is_simplex() {
            let shift = eta.iter().cloned().fold(0.0_f64, f64::max);
            let exps = eta.map(|v| (v - shift).exp());
            let base = (-shift).exp();
            let z = base + exps.sum();
            PrimalPoint {
                theta: exps / z,
                slack: base / z,
            }
        } else {
            PrimalPoint {
                theta: eta.map(f64::exp),
                slack: 1.0,
            }
        };
        self.check_point(&point)?;
        Ok(point)
    }

    /// `∇²ψ(θ)`.
    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.hessian_at(&self.primal_point(theta)?))
    }

    pub(crate) fn hessian_at(&self, p: &PrimalPoint) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::from_diagonal(&p.theta.map(|v| 1.0 / v));
        if self.is_simplex() {
            h.add_scalar_mut(1.0 / p.slack);
        }
        debug_assert_eq!(h.nrows(), d);
        h
    }

    /// `∇²ψ(θ)⁻¹`, equal to `diag(θ) − θθᵀ` on the simplex.
    pub fn inverse_hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inverse_hessian_at(&self.primal_point(theta)?))
    }

    pub(crate) fn inverse_hessian_at(&self, p: &PrimalPoint) -> DMatrix<f64> {
        let mut w = DMatrix::from_diagonal(&p.theta);
        if self.is_simplex() {
            w -= &p.theta * p.theta.transpose();
        }
        w
    }

    /// Row divergence `∇·∇²ψ(θ)⁻¹`.
    pub fn inverse_hessian_divergence(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inverse_hessian_divergence_at(&self.primal_point(theta)?))
    }

    pub(crate) fn inverse_hessian_divergence_at(&self, p: &PrimalPoint) -> DVector<f64> {
        let d = self.dim();
        if self.is_simplex() {
            p.theta.map(|v| 1.0 - (d as f64 + 1.0) * v)
        } else {
            DVector::from_element(d, 1.0)
        }
    }

    /// Symmetric square root of `∇²ψ(θ)`.
    pub fn hessian_sqrt(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.hessian_sqrt_at(&self.primal_point(theta)?))
    }

    pub(crate) fn hessian_sqrt_at(&self, p: &PrimalPoint) -> DMatrix<f64> {
        if self.is_simplex() {
            let eig = SymmetricEigen::new(self.hessian_at(p));
            let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
        } else {
            DMatrix::from_diagonal(&p.theta.map(|v| v.sqrt().recip()))
        }
    }

    /// Number of standard normals consumed by [`MirrorMap::hessian_factor_mul`].
    pub fn noise_dim(&self) -> usize {
        if self.is_simplex() {
            self.dim() + 1
        } else {
            self.dim()
        }
    }

    /// `L ξ` for a rectangular factor with `LLᵀ = ∇²ψ(θ)`.
    ///
    /// On the simplex `L = [diag(θ)^{-1/2} | θ_{d+1}^{-1/2} 1]`, so a Gaussian
    /// with covariance `∇²ψ(θ)` costs `O(d)` instead of an eigendecomposition.
    pub fn hessian_factor_mul(&self, theta: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.noise_dim(), xi.len())?;
        Ok(self.hessian_factor_mul_at(&self.primal_point(theta)?, xi))
    }

    pub(crate) fn hessian_factor_mul_at(&self, p: &PrimalPoint, xi: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        let shared = if self.is_simplex() { xi[d] / p.slack.sqrt() } else { 0.0 };
        DVector::from_fn(d, |j, _| xi[j] / p.theta[j].sqrt() + shared)
    }

    /// `log det ∇²ψ(θ)`.
    pub fn log_det_hessian(&self, theta: &DVector<f64>) -> Result<f64> {
        let p = self.primal_point(theta)?;
        let s: f64 = p.theta.iter().map(|v| v.ln()).sum();
        Ok(if self.is_simplex() { -(s + p.slack.ln()) } else { -s })
    }

    /// `∇_θ log det ∇²ψ(θ)`.
    pub fn log_det_hessian_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.primal_point(theta)?;
        Ok(if self.is_simplex() {
            let inv_slack = 1.0 / p.slack;
            p.theta.map(|v| inv_slack - 1.0 / v)
        } else {
            p.theta.map(|v| -1.0 / v)
        })
    }

    /// `log det ∇²ψ*(η)`, the log-Jacobian of the dual-to-primal map.
    pub fn dual_log_det_hessian(&self, eta: &DVector<f64>) -> Result<f64> {
        let p = self.dual_to_primal(eta)?;
        Ok(if self.is_simplex() {
            p.theta.iter().map(|v| v.ln()).sum::<f64>() + p.slack.ln()
        } else {
            eta.sum()
        })
    }

    /// `∇_η log det ∇²ψ*(η)` in closed form: `1 − (d+1)θ` on the simplex and
    /// the all-ones vector on the orthant.
    pub fn dual_log_det_hessian_grad(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.dual_to_primal(eta)?;
        Ok(self.dual_log_det_grad_at(&p))
    }

    pub(crate) fn dual_log_det_grad_at(&self, p: &PrimalPoint) -> DVector<f64> {
        let d = self.dim() as f64;
        if self.is_simplex() {
            p.theta.map(|v| 1.0 - (d + 1.0) * v)
        } else {
            DVector::from_element(self.dim(), 1.0)
        }
    }
}

/// Step used by [`check_divergence_identity`].
pub const DIVERGENCE_FD_STEP: f64 = 1e-5;

/// Residual of the divergence/log-determinant identity
/// `∇·(∇²ψ⁻¹g) = tr(∇²ψ⁻¹∇g) − gᵀ∇²ψ⁻¹∇log det ∇²ψ`.
///
/// The left side is computed by central differences, the right side
/// analytically.
pub fn check_divergence_identity(map: &MirrorMap, field: &dyn VectorField, theta: &DVector<f64>) -> Result<f64> {
    let p = map.primal_point(theta)?;
    let h = DIVERGENCE_FD_STEP;
    // Every FD probe must stay inside the domain.
    for b in 0..theta.len() {
        for s in [-h, h] {
            let mut probe = theta.clone();
            probe[b] += s;
            map.check_interior(&probe)?;
        }
    }
    let lhs = fd::divergence(
        |x| {
            let w = map.inverse_hessian(x).expect("probe checked above");
            w * field.value(x)
        },
        theta,
        h,
    );
    let w = map.inverse_hessian_at(&p);
    let g = field.value(theta);
    let jac = field.jacobian(theta);
    let logdet_grad = map.log_det_hessian_grad(theta)?;
    let rhs = (&w * &jac).trace() - g.dot(&(&w * logdet_grad));
    Ok((lhs - rhs).abs())
}
