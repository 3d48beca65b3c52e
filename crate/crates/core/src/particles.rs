use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::geometry::{MirrorMap, PrimalPoint};

/// `n` particles of dimension `d`, in primal coordinates and, for mirrored
/// samplers, the matching dual coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    primal: Vec<PrimalPoint>,
    dual: Option<Vec<DVector<f64>>>,
    dim: usize,
}

impl ParticleSet {
    /// Particles without a mirror map.
    pub fn unconstrained(points: Vec<DVector<f64>>) -> Result<Self> {
        let dim = common_dim(&points)?;
        Ok(Self {
            primal: points
                .into_iter()
                .map(|theta| PrimalPoint { theta, slack: 1.0 })
                .collect(),
            dual: None,
            dim,
        })
    }

    /// Primal points, validated against the map, with their dual images.
    pub fn from_primal(points: Vec<DVector<f64>>, map: &MirrorMap) -> Result<Self> {
        let dim = common_dim(&points)?;
        check_dim(map.dim(), dim)?;
        let primal = points.iter().map(|p| map.primal_point(p)).collect::<Result<Vec<_>>>()?;
        let dual = primal.iter().map(|p| map.grad_at(p)).collect();
        Ok(Self {
            primal,
            dual: Some(dual),
            dim,
        })
    }

    /// Dual points mapped back through the inverse mirror map.
    pub fn from_dual(etas: Vec<DVector<f64>>, map: &MirrorMap) -> Result<Self> {
        let dim = common_dim(&etas)?;
        check_dim(map.dim(), dim)?;
        let primal = etas
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        particle: i,
                        iteration: None,
                    });
                }
                map.dual_to_primal(e).map_err(|err| match err {
                    Error::Domain(msg) => Error::Domain(format!("particle {i}: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            primal,
            dual: Some(etas),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.primal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primal.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self, i: usize) -> &DVector<f64> {
        &self.primal[i].theta
    }

    pub fn point(&self, i: usize) -> &PrimalPoint {
        &self.primal[i]
    }

    pub fn points(&self) -> &[PrimalPoint] {
        &self.primal
    }

    pub fn thetas(&self) -> Vec<DVector<f64>> {
        self.primal.iter().map(|p| p.theta.clone()).collect()
    }

    pub fn duals(&self) -> Option<&[DVector<f64>]> {
        self.dual.as_deref()
    }

    pub fn dual(&self, i: usize) -> Option<&DVector<f64>> {
        self.dual.as_ref().map(|d| &d[i])
    }

    /// Reorder particles: particle `i` of the result is particle `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            primal: perm.iter().map(|&i| self.primal[i].clone()).collect(),
            dual: self.dual.as_ref().map(|d| perm.iter().map(|&i| d[i].clone()).collect()),
            dim: self.dim,
        }
    }
}

fn common_dim(points: &[DVector<f64>]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("particle set is empty".into()))?;
    for p in points {
        check_dim(first.len(), p.len())?;
    }
    if first.is_empty() {
        return Err(Error::InvalidArgument("particles must have dimension ≥ 1".into()));
    }
    Ok(first.len())
}
