//! Central finite differences.
//!
//! These are deliberately naive: they share no code with the analytic
//! derivatives they are used to check.

use nalgebra::{DMatrix, DVector};

pub fn gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Fourth-order five-point stencil.
pub fn gradient5<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        let mut eval = |s: f64| {
            xp[i] = xi + s * h;
            let v = f(&xp);
            xp[i] = xi;
            v
        };
        let (f2, f1, m1, m2) = (eval(2.0), eval(1.0), eval(-1.0), eval(-2.0));
        out[i] = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
    }
    out
}

/// `J[a][b] = ∂f_a/∂x_b`.
pub fn jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for b in 0..x.len() {
        let xb = x[b];
        xp[b] = xb + h;
        let fp = f(&xp);
        xp[b] = xb - h;
        let fm = f(&xp);
        xp[b] = xb;
        jac.set_column(b, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Divergence of a vector field, `Σ_a ∂f_a/∂x_a`.
pub fn divergence<F>(f: F, x: &DVector<f64>, h: f64) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    jacobian(f, x, h).trace()
}

/// Row divergence of a matrix field, `[∇·M]_a = Σ_b ∂M_ab/∂x_b`.
pub fn row_divergence<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let rows = f(x).nrows();
    let mut out = DVector::zeros(rows);
    let mut xp = x.clone();
    for b in 0..x.len() {
        let xb = x[b];
        xp[b] = xb + h;
        let fp = f(&xp);
        xp[b] = xb - h;
        let fm = f(&xp);
        xp[b] = xb;
        for a in 0..rows {
            out[a] += (fp[(a, b)] - fm[(a, b)]) / (2.0 * h);
        }
    }
    out
}

/// Relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}
