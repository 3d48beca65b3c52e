//! Independent oracles for the acceptance suite. Nothing here calls the
//! library's analytic derivatives or Stein operators.

#![allow(dead_code)]

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Print a criterion line to the real stderr, bypassing test capture.
pub fn report(criterion: u32, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] {status} criterion {criterion}: {detail}");
}

pub fn random_simplex(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let w: Vec<f64> = (0..=d).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    DVector::from_iterator(d, w[..d].iter().map(|x| x / total))
}

pub fn slack(theta: &DVector<f64>) -> f64 {
    1.0 - theta.sum()
}

/// `diag(θ) − θθᵀ`.
pub fn simplex_w(theta: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(theta) - theta * theta.transpose()
}

/// `diag(1/θ) + 11ᵀ/θ_{d+1}`.
pub fn simplex_h(theta: &DVector<f64>) -> DMatrix<f64> {
    let d = theta.len();
    DMatrix::from_diagonal(&theta.map(|v| 1.0 / v)) + DMatrix::from_element(d, d, 1.0 / slack(theta))
}

/// `∇ψ(θ)_j = log(θ_j / θ_{d+1})`.
pub fn simplex_grad_psi(theta: &DVector<f64>) -> DVector<f64> {
    let s = slack(theta);
    theta.map(|v| (v / s).ln())
}

/// Dirichlet score with concentration `a` (length `d + 1`).
pub fn dirichlet_score(a: &[f64], theta: &DVector<f64>) -> DVector<f64> {
    let d = theta.len();
    let s = slack(theta);
    DVector::from_fn(d, |j, _| (a[j] - 1.0) / theta[j] - (a[d] - 1.0) / s)
}

/// Central-difference divergence of a vector field.
pub fn fd_divergence<F>(f: F, x: &DVector<f64>, h: f64) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut total = 0.0;
    for b in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[b] += h;
        xm[b] -= h;
        total += (f(&xp)[b] - f(&xm)[b]) / (2.0 * h);
    }
    total
}

/// Mirrored Stein operator `gᵀW∇log p + ∇·(Wg)` with the divergence taken
/// by central differences of the product `W(θ)g(θ)`.
pub fn mirrored_op_fd<S, G>(score: S, g: G, theta: &DVector<f64>, h: f64) -> f64
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let w = simplex_w(theta);
    g(theta).dot(&(&w * score(theta))) + fd_divergence(|x| simplex_w(x) * g(x), theta, h)
}

/// IMQ kernel `(1 + ‖x − y‖²/ℓ²)^{-1/2}` evaluated directly.
pub fn imq(x: &DVector<f64>, y: &DVector<f64>, l: f64) -> f64 {
    (1.0 + (x - y).norm_squared() / (l * l)).powf(-0.5)
}

pub fn gaussian(x: &DVector<f64>, y: &DVector<f64>, l: f64) -> f64 {
    (-(x - y).norm_squared() / (l * l)).exp()
}

/// Literal adaptive kernel built from a particle set: eigenpairs of the
/// Gram matrix, Nyström eigenfunctions, and the `Γ` tensor of Hessians.
pub struct BruteSvmdKernel<K: Fn(&DVector<f64>, &DVector<f64>) -> f64> {
    pub k: K,
    pub points: Vec<DVector<f64>>,
    pub lambdas: Vec<f64>,
    /// `V[l][j] = u_j(θ_l)`, scaled so that `(1/n) Σ_l V_lj² = 1`.
    pub v: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<DMatrix<f64>>>,
}

impl<K: Fn(&DVector<f64>, &DVector<f64>) -> f64> BruteSvmdKernel<K> {
    pub fn new(k: K, points: Vec<DVector<f64>>) -> Self {
        let n = points.len();
        let gram = DMatrix::from_fn(n, n, |i, j| k(&points[i], &points[j]));
        let eig = SymmetricEigen::new(gram);
        let max = eig.eigenvalues.max();
        let mut lambdas = Vec::new();
        let mut cols = Vec::new();
        for j in 0..n {
            let e = eig.eigenvalues[j];
            if e > 1e-12 * max {
                lambdas.push(e / n as f64);
                cols.push(eig.eigenvectors.column(j).into_owned() * (n as f64).sqrt());
            }
        }
        let v: Vec<Vec<f64>> = (0..n).map(|l| cols.iter().map(|c| c[l]).collect()).collect();
        let hs: Vec<DMatrix<f64>> = points.iter().map(simplex_h).collect();
        let jn = lambdas.len();
        let gamma = (0..jn)
            .map(|i| {
                (0..jn)
                    .map(|j| {
                        let mut acc = DMatrix::zeros(points[0].len(), points[0].len());
                        for l in 0..n {
                            acc += &hs[l] * (v[l][i] * v[l][j]);
                        }
                        acc / n as f64
                    })
                    .collect()
            })
            .collect();
        Self {
            k,
            points,
            lambdas,
            v,
            gamma,
        }
    }

    /// `u_j(θ) = (1/(nλ_j)) Σ_l V_lj k(θ, θ_l)`.
    pub fn u(&self, theta: &DVector<f64>) -> Vec<f64> {
        let n = self.points.len() as f64;
        (0..self.lambdas.len())
            .map(|j| {
                self.points
                    .iter()
                    .enumerate()
                    .map(|(l, p)| self.v[l][j] * (self.k)(theta, p))
                    .sum::<f64>()
                    / (n * self.lambdas[j])
            })
            .collect()
    }

    pub fn matrix(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let ux = self.u(x);
        let uy = self.u(y);
        let d = x.len();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..self.lambdas.len() {
            for j in 0..self.lambdas.len() {
                out += &self.gamma[i][j] * ((self.lambdas[i] * self.lambdas[j]).sqrt() * ux[i] * uy[j]);
            }
        }
        out
    }
}
