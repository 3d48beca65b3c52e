//! Truncated eigendecomposition of the particle Gram matrix and the
//! matrix-valued kernels built from it.
//!
//! For particles `θ¹..θⁿ` with Gram matrix `B`, the retained eigenpairs give
//! Nyström eigenfunctions `u_j` and eigenvalues `λ_j` of the empirical
//! integral operator. The kernel
//!
//! `K(x, y) = Σ_{i,j} √(λ_i λ_j) u_i(x) u_j(y) Γ_ij`,
//! `Γ_ij = (1/n) Σ_l u_i(θˡ) u_j(θˡ) M(θˡ)`
//!
//! weights the square-root kernel by a metric `M`: the mirror-map Hessian for
//! SVMD and a metric tensor for SVNG.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::geometry::MirrorMap;
use crate::kernels::ScalarKernel;
use crate::particles::ParticleSet;
use crate::targets::{MetricProvider, Target};

pub const DEFAULT_TAU: f64 = 0.98;
/// Eigenvalues below this fraction of the largest are always dropped.
pub const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// `λ_1 ≥ … ≥ λ_J > 0`, Gram eigenvalues divided by `n`.
    pub eigenvalues: DVector<f64>,
    /// `n × J`; column `j` holds `u_j(θ^i)`, normalized so `(1/n)VᵀV = I`.
    pub eigenvectors: DMatrix<f64>,
    pub tau: f64,
    /// Sum of all positive eigenvalues before truncation.
    pub total_eigenvalue_mass: f64,
}

impl SpectralDecomposition {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }
}

/// Eigendecomposition of the Gram matrix of `points` under `k`, truncated to
/// the smallest prefix holding a `tau` fraction of the positive spectrum.
pub fn decompose(points: &[DVector<f64>], k: &ScalarKernel, tau: f64) -> Result<SpectralDecomposition> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("no particles".into()));
    }
    let b = k.gram(points)?;
    decompose_gram(&b, tau)
}

pub fn decompose_gram(b: &DMatrix<f64>, tau: f64) -> Result<SpectralDecomposition> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalRank("Gram matrix has non-finite entries".into()));
    }
    let n = b.nrows();
    let eig = SymmetricEigen::new(b.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]] / n as f64;
    if !(lambda_max > 0.0) {
        return Err(Error::NumericalRank("Gram matrix has no positive eigenvalue".into()));
    }
    let positive: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let l = eig.eigenvalues[i] / n as f64;
            l > 0.0 && l >= RELATIVE_EIGEN_FLOOR * lambda_max
        })
        .collect();
    let total: f64 = positive.iter().map(|&i| eig.eigenvalues[i] / n as f64).sum();
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &positive {
        kept.push(i);
        mass += eig.eigenvalues[i] / n as f64;
        if mass >= tau * total {
            break;
        }
    }
    let j = kept.len();
    let scale = (n as f64).sqrt();
    let mut vectors = DMatrix::zeros(n, j);
    for (col, &i) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v = -v;
        }
        vectors.set_column(col, &(v * scale));
    }
    Ok(SpectralDecomposition {
        eigenvalues: DVector::from_iterator(j, kept.iter().map(|&i| eig.eigenvalues[i] / n as f64)),
        eigenvectors: vectors,
        tau,
        total_eigenvalue_mass: total,
    })
}

/// Nyström values `u_j(θ)` and gradients `∇u_j(θ)` (as columns of a `d × J`
/// matrix) at a query point.
pub fn eigenfunction_values_and_grads(
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    points: &[DVector<f64>],
    theta: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = points.len();
    check_dim(dec.n(), n)?;
    let kv = points.iter().map(|p| k.eval(theta, p)).collect::<Result<Vec<_>>>()?;
    let kg = points.iter().map(|p| k.grad1(theta, p)).collect::<Result<Vec<_>>>()?;
    nystrom(dec, &kv, &kg, theta.len())
}

fn nystrom(
    dec: &SpectralDecomposition,
    kv: &[f64],
    kg: &[DVector<f64>],
    d: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = dec.n();
    let mut values = DVector::zeros(dec.rank());
    let mut grads = DMatrix::zeros(d, dec.rank());
    for j in 0..dec.rank() {
        let lambda = dec.eigenvalues[j];
        if lambda < RELATIVE_EIGEN_FLOOR {
            return Err(Error::NumericalRank(format!("eigenvalue {j} is {lambda:e}")));
        }
        let c = 1.0 / (n as f64 * lambda);
        let mut g = DVector::zeros(d);
        let mut u = 0.0;
        for i in 0..n {
            let vij = dec.eigenvectors[(i, j)];
            u += vij * kv[i];
            g += &kg[i] * vij;
        }
        values[j] = u * c;
        grads.set_column(j, &(g * c));
    }
    Ok((values, grads))
}

/// `Γ_ij = (1/n) Σ_l V_li V_lj M_l`, stored row-major in a `J × J` grid.
pub fn gamma_tensor(dec: &SpectralDecomposition, metrics: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let n = dec.n();
    check_dim(n, metrics.len())?;
    let j = dec.rank();
    let d = metrics[0].nrows();
    let mut out = vec![DMatrix::zeros(d, d); j * j];
    for a in 0..j {
        for b in 0..=a {
            let mut g = DMatrix::zeros(d, d);
            for (l, m) in metrics.iter().enumerate() {
                g += m * (dec.eigenvectors[(l, a)] * dec.eigenvectors[(l, b)]);
            }
            g /= n as f64;
            if a != b {
                out[b * j + a] = g.clone();
            }
            out[a * j + b] = g;
        }
    }
    Ok(out)
}

/// Matrix kernel `K(x, y)` for the given decomposition and metrics.
pub fn matrix_kernel(
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    points: &[DVector<f64>],
    metrics: &[DMatrix<f64>],
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let gamma = gamma_tensor(dec, metrics)?;
    let (ux, _) = eigenfunction_values_and_grads(dec, k, points, x)?;
    let (uy, _) = eigenfunction_values_and_grads(dec, k, points, y)?;
    let j = dec.rank();
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    for a in 0..j {
        for b in 0..j {
            let w = (dec.eigenvalues[a] * dec.eigenvalues[b]).sqrt() * ux[a] * uy[b];
            out += &gamma[a * j + b] * w;
        }
    }
    Ok(out)
}

/// Per-particle geometry for the spectral assembly.
pub(crate) struct SpectralInputs {
    /// `M(θˡ)`.
    pub metric: Vec<DMatrix<f64>>,
    /// `M(θˡ)⁻¹`.
    pub inverse: Vec<DMatrix<f64>>,
    /// `M(θˡ)⁻¹ ∇log p(θˡ)`.
    pub preconditioned_score: Vec<DVector<f64>>,
    /// `∇·M(θˡ)⁻¹`.
    pub inverse_divergence: Vec<DVector<f64>>,
}

/// `g(x_q) = Σ_i u_i(x_q) c_i` at every particle, with
/// `c_i = Σ_j √(λ_iλ_j) Γ_ij b_j` and
/// `b_j = (1/n) Σ_l [u_j M⁻¹∇log p + M⁻¹∇u_j + u_j ∇·M⁻¹](θˡ)`.
pub(crate) fn assemble(
    points: &[DVector<f64>],
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    inputs: &SpectralInputs,
) -> Result<Vec<DVector<f64>>> {
    let n = points.len();
    check_dim(dec.n(), n)?;
    let d = points[0].len();
    let jr = dec.rank();

    let nys: Vec<(DVector<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let kv: Vec<f64> = points.iter().map(|p| k.eval(&points[l], p)).collect::<Result<_>>()?;
            let kg: Vec<DVector<f64>> = points.iter().map(|p| k.grad1(&points[l], p)).collect::<Result<_>>()?;
            nystrom(dec, &kv, &kg, d)
        })
        .collect::<Result<_>>()?;

    let mut b = vec![DVector::zeros(d); jr];
    for (l, (u, grads)) in nys.iter().enumerate() {
        let w = &inputs.inverse[l];
        for j in 0..jr {
            b[j] += &inputs.preconditioned_score[l] * u[j] + w * grads.column(j) + &inputs.inverse_divergence[l] * u[j];
        }
    }
    for bj in b.iter_mut() {
        *bj /= n as f64;
    }

    let gamma = gamma_tensor(dec, &inputs.metric)?;
    let mut c = vec![DVector::zeros(d); jr];
    for i in 0..jr {
        for j in 0..jr {
            let s = (dec.eigenvalues[i] * dec.eigenvalues[j]).sqrt();
            c[i] += &gamma[i * jr + j] * &b[j] * s;
        }
    }

    let out: Vec<DVector<f64>> = nys
        .iter()
        .map(|(u, _)| {
            let mut g = DVector::zeros(d);
            for i in 0..jr {
                g += &c[i] * u[i];
            }
            g
        })
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

/// Dual-space SVMD direction at every particle.
pub fn svmd_direction(
    particles: &ParticleSet,
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    map: &MirrorMap,
    target: &dyn Target,
) -> Result<Vec<DVector<f64>>> {
    check_dim(map.dim(), particles.dim())?;
    let pts = particles.points();
    for p in pts {
        map.check_interior(&p.theta)?;
    }
    let inputs = SpectralInputs {
        metric: pts.iter().map(|p| map.hessian_at(p)).collect(),
        inverse: pts.iter().map(|p| map.inverse_hessian_at(p)).collect(),
        preconditioned_score: pts
            .iter()
            .map(|p| target.preconditioned_score(map, p))
            .collect::<Result<_>>()?,
        inverse_divergence: pts.iter().map(|p| map.inverse_hessian_divergence_at(p)).collect(),
    };
    assemble(&particles.thetas(), dec, k, &inputs)
}

/// SVNG direction `g*` at every particle, before preconditioning, from
/// supplied scores (full or minibatch).
pub fn svng_direction_from_scores(
    particles: &ParticleSet,
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    metric: &dyn MetricProvider,
    scores: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_dim(particles.len(), scores.len())?;
    let thetas = particles.thetas();
    let mut inputs = SpectralInputs {
        metric: Vec::with_capacity(thetas.len()),
        inverse: Vec::with_capacity(thetas.len()),
        preconditioned_score: Vec::with_capacity(thetas.len()),
        inverse_divergence: Vec::with_capacity(thetas.len()),
    };
    for (theta, s) in thetas.iter().zip(scores) {
        let ginv = metric.inverse_metric(theta)?;
        inputs.preconditioned_score.push(&ginv * s);
        inputs.inverse.push(ginv);
        inputs.metric.push(metric.metric(theta)?);
        inputs.inverse_divergence.push(metric.inverse_metric_divergence(theta)?);
    }
    assemble(&thetas, dec, k, &inputs)
}

/// Primal SVNG moves `G(θⁱ)⁻¹ g*(θⁱ)` using full-data scores.
pub fn svng_direction(
    particles: &ParticleSet,
    dec: &SpectralDecomposition,
    k: &ScalarKernel,
    metric: &dyn MetricProvider,
    target: &dyn Target,
) -> Result<Vec<DVector<f64>>> {
    let scores = particles
        .thetas()
        .iter()
        .map(|t| target.grad_log_density(t))
        .collect::<Result<Vec<_>>>()?;
    let g = svng_direction_from_scores(particles, dec, k, metric, &scores)?;
    precondition(particles, metric, g)
}

pub(crate) fn precondition(
    particles: &ParticleSet,
    metric: &dyn MetricProvider,
    g: Vec<DVector<f64>>,
) -> Result<Vec<DVector<f64>>> {
    g.into_iter()
        .enumerate()
        .map(|(i, gi)| Ok(metric.inverse_metric(particles.theta(i))? * gi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::targets::sparse_dirichlet_posterior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..=d).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                DVector::from_iterator(d, w[..d].iter().map(|x| x / s))
            })
            .collect()
    }

    #[test]
    fn single_point_decomposition() {
        let k = ScalarKernel::imq(1.0).unwrap();
        let dec = decompose(&[DVector::from_vec(vec![0.2, 0.3])], &k, 0.98).unwrap();
        assert_eq!(dec.rank(), 1);
        assert_eq!(dec.eigenvalues[0], 1.0);
        assert_eq!(dec.eigenvectors[(0, 0)], 1.0);
    }

    #[test]
    fn coincident_points_have_rank_one() {
        let k = ScalarKernel::imq(1.0).unwrap();
        let p = DVector::from_vec(vec![0.2, 0.3]);
        let dec = decompose(&[p.clone(), p], &k, 0.98).unwrap();
        assert_eq!(dec.rank(), 1);
        assert!((dec.eigenvalues[0] - 1.0).abs() < 1e-15);
        assert!((dec.total_eigenvalue_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_equations_and_orthonormality() {
        let pts = cloud(12, 3, 1);
        let k = ScalarKernel::imq(0.3).unwrap();
        let b = k.gram(&pts).unwrap();
        for tau in [0.9, 0.98, 1.0] {
            let dec = decompose(&pts, &k, tau).unwrap();
            let n = pts.len() as f64;
            for j in 0..dec.rank() {
                let v = dec.eigenvectors.column(j);
                let resid = (&b * v - v * (n * dec.eigenvalues[j])).amax();
                assert!(resid <= 1e-8 * b.norm());
            }
            let gram = dec.eigenvectors.transpose() * &dec.eigenvectors / n;
            assert!((gram - DMatrix::identity(dec.rank(), dec.rank())).amax() < 1e-8);
            assert!(dec.eigenvalues.sum() >= tau * dec.total_eigenvalue_mass * (1.0 - 1e-12));
            if dec.rank() > 1 {
                let without_last = dec.eigenvalues.sum() - dec.eigenvalues[dec.rank() - 1];
                assert!(without_last < tau * dec.total_eigenvalue_mass);
            }
        }
        let full = decompose(&pts, &k, 1.0).unwrap();
        let recon = &full.eigenvectors * DMatrix::from_diagonal(&full.eigenvalues) * full.eigenvectors.transpose();
        assert!((recon - &b).norm() <= 1e-8 * b.norm());
    }

    #[test]
    fn nystrom_interpolates_and_differentiates() {
        let pts = cloud(8, 3, 2);
        let k = ScalarKernel::gaussian(0.4).unwrap();
        let dec = decompose(&pts, &k, 0.99).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let (u, _) = eigenfunction_values_and_grads(&dec, &k, &pts, p).unwrap();
            for j in 0..dec.rank() {
                assert!((u[j] - dec.eigenvectors[(i, j)]).abs() < 1e-8);
            }
        }
        let q = cloud(1, 3, 99).remove(0);
        let (_, grads) = eigenfunction_values_and_grads(&dec, &k, &pts, &q).unwrap();
        for j in 0..dec.rank() {
            let numeric = fd::gradient(
                |x| eigenfunction_values_and_grads(&dec, &k, &pts, x).unwrap().0[j],
                &q,
                1e-6,
            );
            let analytic = grads.column(j).clone_owned();
            assert!(fd::rel_err(&analytic, &numeric, 1e-2) < 1e-5);
        }
        let single = [q.clone()];
        let dec1 = decompose(&single, &k, 0.98).unwrap();
        let (u, g) = eigenfunction_values_and_grads(&dec1, &k, &single, &q).unwrap();
        assert_eq!(u[0], 1.0);
        assert_eq!(g.column(0).amax(), 0.0);
    }

    #[test]
    fn matrix_kernel_symmetry_and_psd() {
        let map = MirrorMap::entropic_simplex(3).unwrap();
        let pts = cloud(6, 3, 3);
        let k = ScalarKernel::imq(0.5).unwrap();
        let dec = decompose(&pts, &k, 0.98).unwrap();
        let metrics: Vec<_> = pts.iter().map(|p| map.hessian(p).unwrap()).collect();
        let queries = cloud(50, 3, 4);
        for pair in queries.windows(2) {
            let kxy = matrix_kernel(&dec, &k, &pts, &metrics, &pair[0], &pair[1]).unwrap();
            let kyx = matrix_kernel(&dec, &k, &pts, &metrics, &pair[1], &pair[0]).unwrap();
            assert!((kxy.transpose() - &kyx).amax() <= 1e-10 * kxy.amax().max(1.0));
            let kxx = matrix_kernel(&dec, &k, &pts, &metrics, &pair[0], &pair[0]).unwrap();
            assert!(SymmetricEigen::new(kxx).eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn single_particle_kernel_is_scaled_hessian() {
        let map = MirrorMap::entropic_simplex(3).unwrap();
        let p = cloud(1, 3, 5);
        let k = ScalarKernel::imq(0.5).unwrap();
        let dec = decompose(&p, &k, 0.98).unwrap();
        let metrics = vec![map.hessian(&p[0]).unwrap()];
        let kk = matrix_kernel(&dec, &k, &p, &metrics, &p[0], &p[0]).unwrap();
        assert!((kk - &metrics[0]).amax() < 1e-12 * metrics[0].amax());
    }

    #[test]
    fn truncation_only_drops_zero_modes_for_coincident_particles() {
        let target = sparse_dirichlet_posterior(&[0.5, 2.0, 1.0], &[3.0, 0.0, 1.0]).unwrap();
        let map = MirrorMap::entropic_simplex(2).unwrap();
        let p = cloud(1, 2, 7).remove(0);
        let set = ParticleSet::from_primal(vec![p.clone(), p.clone(), p], &map).unwrap();
        let k = ScalarKernel::imq(0.5).unwrap();
        let a = svmd_direction(&set, &decompose(&set.thetas(), &k, 1.0).unwrap(), &k, &map, &target).unwrap();
        let b = svmd_direction(&set, &decompose(&set.thetas(), &k, 0.98).unwrap(), &k, &map, &target).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(fd::rel_err(x, y, 1e-12) < 1e-12);
        }
    }

    #[test]
    fn svmd_is_permutation_invariant() {
        let target = sparse_dirichlet_posterior(&[0.5, 2.0, 1.0, 1.5], &[3.0, 0.0, 1.0, 0.0]).unwrap();
        let map = MirrorMap::entropic_simplex(3).unwrap();
        let set = ParticleSet::from_primal(cloud(5, 3, 8), &map).unwrap();
        let perm = [2, 4, 0, 1, 3];
        let shuffled = set.permuted(&perm);
        let k = ScalarKernel::imq(0.4).unwrap();
        let a = svmd_direction(&set, &decompose(&set.thetas(), &k, 0.98).unwrap(), &k, &map, &target).unwrap();
        let b = svmd_direction(
            &shuffled,
            &decompose(&shuffled.thetas(), &k, 0.98).unwrap(),
            &k,
            &map,
            &target,
        )
        .unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!(fd::rel_err(&b[i], &a[src], 1e-6) < 1e-8);
        }
    }
}
