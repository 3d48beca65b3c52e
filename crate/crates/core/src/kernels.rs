//! Radial scalar kernels and bandwidth selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::MirrorMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `(1 + r²/ℓ²)^{-1/2}`
    Imq,
    /// `exp(−r²/ℓ²)`
    Gaussian,
}

/// A radial kernel `k(x, y) = f(‖φ(x) − φ(y)‖²)` where `φ` is either the
/// identity or the primal-to-dual map of a mirror map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarKernel {
    pub family: KernelFamily,
    bandwidth: f64,
    composition: Option<MirrorMap>,
}

impl ScalarKernel {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self {
            family,
            bandwidth,
            composition: None,
        })
    }

    pub fn imq(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq, bandwidth)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    /// Compose with `∇ψ`, giving `k(∇ψ(x), ∇ψ(y))`.
    pub fn composed_with(mut self, map: MirrorMap) -> Self {
        self.composition = Some(map);
        self
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Result<Self> {
        self.bandwidth = Self::new(self.family, bandwidth)?.bandwidth;
        Ok(self)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn composition(&self) -> Option<&MirrorMap> {
        self.composition.as_ref()
    }

    /// The point at which distances are measured.
    pub fn feature(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.composition {
            Some(map) => map.grad(x),
            None => Ok(x.clone()),
        }
    }

    /// Radial profile `f(s)` at squared distance `s`.
    pub fn profile(&self, s: f64) -> f64 {
        let l2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Imq => (1.0 + s / l2).powf(-0.5),
            KernelFamily::Gaussian => (-s / l2).exp(),
        }
    }

    /// `(f(s), f'(s), f''(s))`.
    pub fn profile_derivatives(&self, s: f64) -> (f64, f64, f64) {
        let l2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Imq => {
                let base = 1.0 + s / l2;
                let f = base.powf(-0.5);
                let f1 = -0.5 / l2 * f / base;
                let f2 = 0.75 / (l2 * l2) * f / (base * base);
                (f, f1, f2)
            }
            KernelFamily::Gaussian => {
                let f = (-s / l2).exp();
                (f, -f / l2, f / (l2 * l2))
            }
        }
    }

    /// Kernel value on already-mapped features.
    pub fn eval_features(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.profile((u - v).norm_squared())
    }

    /// Gradient in the first feature argument.
    pub fn grad_features(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let diff = u - v;
        let (_, f1, _) = self.profile_derivatives(diff.norm_squared());
        diff * (2.0 * f1)
    }

    /// Cross second derivative `∂²k/∂u∂vᵀ` on features.
    pub fn cross_hessian_features(&self, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let diff = u - v;
        let (_, f1, f2) = self.profile_derivatives(diff.norm_squared());
        let d = diff.len();
        DMatrix::identity(d, d) * (-2.0 * f1) - &diff * diff.transpose() * (4.0 * f2)
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim(x.len(), y.len())?;
        Ok(self.eval_features(&self.feature(x)?, &self.feature(y)?))
    }

    /// `∇_x k(x, y)`, including the `∇²ψ(x)` factor when composed.
    pub fn grad1(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x.len(), y.len())?;
        let g = self.grad_features(&self.feature(x)?, &self.feature(y)?);
        Ok(match &self.composition {
            Some(map) => map.hessian(x)? * g,
            None => g,
        })
    }

    /// `∇_y k(x, y)`.
    pub fn grad2(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.grad1(y, x)
    }

    pub fn gram(&self, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let feats = points.iter().map(|p| self.feature(p)).collect::<Result<Vec<_>>>()?;
        let n = feats.len();
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            b[(i, i)] = 1.0;
            for j in 0..i {
                let v = self.eval_features(&feats[i], &feats[j]);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
        Ok(b)
    }
}

/// Median heuristic: `ℓ² = median of pairwise squared distances` (lower
/// median), optionally divided by `log(n + 1)`. Falls back to `ℓ = 1` when
/// the median is zero.
pub fn median_bandwidth(points: &[DVector<f64>], log_scaled: bool) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "median heuristic needs at least 2 points, got {n}"
        )));
    }
    let mut sq = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        check_dim(points[0].len(), points[i].len())?;
        for j in 0..i {
            sq.push((&points[i] - &points[j]).norm_squared());
        }
    }
    if sq.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite pairwise distance".into()));
    }
    let mid = (sq.len() - 1) / 2;
    let (_, median, _) = sq.select_nth_unstable_by(mid, f64::total_cmp);
    let mut l2 = *median;
    if log_scaled {
        l2 /= ((n + 1) as f64).ln();
    }
    if l2 <= 0.0 {
        return Ok(1.0);
    }
    Ok(l2.sqrt())
}
