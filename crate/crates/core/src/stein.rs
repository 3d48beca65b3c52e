//! Stein operators, the dual-space MSVGD direction and the mirrored kernel
//! Stein discrepancy.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::fields::VectorField;
use crate::geometry::{MirrorMap, PrimalPoint};
use crate::kernels::ScalarKernel;
use crate::particles::ParticleSet;
use crate::targets::Target;

/// A target paired with an optional mirror map.
#[derive(Clone, Copy)]
pub struct SteinContext<'a> {
    pub target: &'a dyn Target,
    map: Option<MirrorMap>,
}

impl<'a> SteinContext<'a> {
    pub fn langevin(target: &'a dyn Target) -> Self {
        Self { target, map: None }
    }

    pub fn mirrored(target: &'a dyn Target, map: MirrorMap) -> Result<Self> {
        if map.domain() != target.domain() {
            return Err(Error::InvalidArgument(format!(
                "mirror map domain {:?} does not match target domain {:?}",
                map.domain(),
                target.domain()
            )));
        }
        Ok(Self { target, map: Some(map) })
    }

    pub fn map(&self) -> Option<&MirrorMap> {
        self.map.as_ref()
    }

    fn require_map(&self) -> Result<&MirrorMap> {
        self.map
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("operation needs a mirror map".into()))
    }

    /// `∇log p_H(η) = ∇²ψ(θ)⁻¹∇log p(θ) + ∇·∇²ψ(θ)⁻¹`, the score of the
    /// pushforward of `p` under `∇ψ`.
    pub fn dual_score(&self, point: &PrimalPoint) -> Result<DVector<f64>> {
        let map = self.require_map()?;
        Ok(self.target.preconditioned_score(map, point)? + map.dual_log_det_grad_at(point))
    }
}

/// `gᵀ∇log p + ∇·g`.
pub fn langevin_op(ctx: &SteinContext, g: &dyn VectorField, theta: &DVector<f64>) -> Result<f64> {
    check_dim(ctx.target.dim(), theta.len())?;
    if let Some(map) = ctx.map() {
        map.check_interior(theta)?;
    }
    let score = ctx.target.grad_log_density(theta)?;
    Ok(g.value(theta).dot(&score) + g.divergence(theta))
}

/// `gᵀ∇²ψ⁻¹∇log p + ∇·(∇²ψ⁻¹g)`, with the divergence expanded as
/// `tr(∇²ψ⁻¹ ∇g) + gᵀ(∇·∇²ψ⁻¹)`.
pub fn mirrored_op(ctx: &SteinContext, g: &dyn VectorField, theta: &DVector<f64>) -> Result<f64> {
    let map = ctx.require_map()?;
    mirrored_op_at(ctx, g, &map.primal_point(theta)?)
}

pub fn mirrored_op_at(ctx: &SteinContext, g: &dyn VectorField, point: &PrimalPoint) -> Result<f64> {
    let map = ctx.require_map()?;
    let theta = &point.theta;
    let value = g.value(theta);
    let w = map.inverse_hessian_at(point);
    let drift = ctx.target.preconditioned_score(map, point)? + map.inverse_hessian_divergence_at(point);
    Ok(value.dot(&drift) + (w * g.jacobian(theta)).trace())
}

/// Per-particle quantities needed by dual-space kernel sums.
struct DualView {
    /// Points where the kernel distance is measured.
    features: Vec<DVector<f64>>,
    scores: Vec<DVector<f64>>,
    /// `∂features/∂η`; `None` when the features are the dual points.
    jac: Option<Vec<DMatrix<f64>>>,
}

fn dual_view(particles: &ParticleSet, k: &ScalarKernel, ctx: &SteinContext) -> Result<DualView> {
    let map = ctx.require_map()?;
    check_dim(map.dim(), particles.dim())?;
    let duals = particles
        .duals()
        .ok_or_else(|| Error::InvalidArgument("particles carry no dual coordinates".into()))?;
    let scores = particles
        .points()
        .iter()
        .map(|p| ctx.dual_score(p))
        .collect::<Result<Vec<_>>>()?;
    let (features, jac) = match k.composition() {
        Some(_) => (duals.to_vec(), None),
        None => (
            particles.thetas(),
            Some(particles.points().iter().map(|p| map.inverse_hessian_at(p)).collect()),
        ),
    };
    Ok(DualView { features, scores, jac })
}

impl DualView {
    /// `(κ(η_j, ·), ∇_{η_j} κ(η_j, ·))` against a query feature.
    fn kernel_and_grad(&self, k: &ScalarKernel, j: usize, query: &DVector<f64>) -> (f64, DVector<f64>) {
        let kv = k.eval_features(&self.features[j], query);
        let gu = k.grad_features(&self.features[j], query);
        let grad = match &self.jac {
            Some(jac) => &jac[j] * gu,
            None => gu,
        };
        (kv, grad)
    }

    fn direction_at(&self, k: &ScalarKernel, query: &DVector<f64>) -> DVector<f64> {
        let n = self.features.len();
        let mut acc = DVector::zeros(query.len());
        for j in 0..n {
            let (kv, grad) = self.kernel_and_grad(k, j, query);
            acc += &self.scores[j] * kv + grad;
        }
        acc / n as f64
    }
}

/// SVGD direction in dual coordinates, evaluated at every particle:
/// `g(η_i) = (1/n) Σ_j k_ψ(η_j, η_i)∇log p_H(η_j) + ∇_{η_j}k_ψ(η_j, η_i)`.
///
/// The scalar kernel is evaluated on primal points unless it is composed
/// with the mirror map, in which case it acts on the dual points directly.
pub fn msvgd_direction(particles: &ParticleSet, k: &ScalarKernel, ctx: &SteinContext) -> Result<Vec<DVector<f64>>> {
    let view = dual_view(particles, k, ctx)?;
    let out: Vec<DVector<f64>> = (0..particles.len())
        .into_par_iter()
        .map(|i| view.direction_at(k, &view.features[i]))
        .collect();
    for (i, g) in out.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                particle: i,
                iteration: None,
            });
        }
    }
    Ok(out)
}

/// The MSVGD direction field evaluated at an arbitrary dual point.
pub fn msvgd_direction_at(
    particles: &ParticleSet,
    k: &ScalarKernel,
    ctx: &SteinContext,
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let map = ctx.require_map()?;
    let view = dual_view(particles, k, ctx)?;
    let query = match k.composition() {
        Some(_) => eta.clone(),
        None => map.grad_conjugate(eta)?,
    };
    Ok(view.direction_at(k, &query))
}

/// Squared mirrored kernel Stein discrepancy of the particle measure,
/// `(1/n²) Σ_{i,j} u_p(η_i, η_j)` with the Stein kernel
/// `u_p(x, y) = s_xᵀs_y κ + s_xᵀ∇_yκ + s_yᵀ∇_xκ + tr(∇_x∇_yᵀκ)`,
/// where `s` is the dual score and `κ` the kernel pulled back to dual space.
pub fn mksd_squared(particles: &ParticleSet, k: &ScalarKernel, ctx: &SteinContext) -> Result<f64> {
    let view = dual_view(particles, k, ctx)?;
    let n = particles.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = 0.0;
            for j in 0..n {
                row += stein_kernel(&view, k, i, j);
            }
            row
        })
        .collect();
    let total: f64 = rows.iter().sum::<f64>() / (n * n) as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            particle: 0,
            iteration: None,
        });
    }
    Ok(total)
}

fn stein_kernel(view: &DualView, k: &ScalarKernel, i: usize, j: usize) -> f64 {
    let (u, v) = (&view.features[i], &view.features[j]);
    let (si, sj) = (&view.scores[i], &view.scores[j]);
    let kv = k.eval_features(u, v);
    let gu = k.grad_features(u, v);
    let h = k.cross_hessian_features(u, v);
    match &view.jac {
        Some(jac) => {
            let (ji, jj) = (&jac[i], &jac[j]);
            let grad_x = ji * &gu;
            let grad_y = -(jj * &gu);
            si.dot(sj) * kv + si.dot(&grad_y) + sj.dot(&grad_x) + (ji * h * jj).trace()
        }
        None => si.dot(sj) * kv - si.dot(&gu) + sj.dot(&gu) + h.trace(),
    }
}
