//! Vector-valued test functions with analytic Jacobians.
//!
//! Stein operators act on a field `g: R^d -> R^d` through its value and its
//! Jacobian `J[a][b] = ∂g_a/∂θ_b`.

use nalgebra::{DMatrix, DVector};

pub trait VectorField: Send + Sync {
    fn value(&self, theta: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    fn divergence(&self, theta: &DVector<f64>) -> f64 {
        self.jacobian(theta).trace()
    }
}

/// `g(θ) = c`.
#[derive(Clone, Debug)]
pub struct ConstantField(pub DVector<f64>);

impl VectorField for ConstantField {
    fn value(&self, _theta: &DVector<f64>) -> DVector<f64> {
        self.0.clone()
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(theta.len(), theta.len())
    }
}

/// `g(θ) = Aθ + b`.
#[derive(Clone, Debug)]
pub struct AffineField {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineField {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
        }
    }
}

impl VectorField for AffineField {
    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.matrix * theta + &self.offset
    }

    fn jacobian(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// `g_a(θ) = sin(ω_a θ_a + φ_a)`, bounded and smooth.
#[derive(Clone, Debug)]
pub struct CoordinateSineField {
    pub frequency: DVector<f64>,
    pub phase: DVector<f64>,
}

impl VectorField for CoordinateSineField {
    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(theta.len(), |a, _| (self.frequency[a] * theta[a] + self.phase[a]).sin())
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(theta.len(), theta.len(), |a, b| {
            if a == b {
                self.frequency[a] * (self.frequency[a] * theta[a] + self.phase[a]).cos()
            } else {
                0.0
            }
        })
    }
}

/// `g(θ) = tanh.(Aθ + b)`, applied elementwise.
#[derive(Clone, Debug)]
pub struct TanhField {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl VectorField for TanhField {
    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        (&self.matrix * theta + &self.offset).map(f64::tanh)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let z = &self.matrix * theta + &self.offset;
        let mut jac = self.matrix.clone();
        for a in 0..jac.nrows() {
            let s = 1.0 - z[a].tanh().powi(2);
            jac.row_mut(a).scale_mut(s);
        }
        jac
    }
}

/// Closure-backed field, handy in tests and diagnostics.
pub struct FnField<V, J> {
    value: V,
    jacobian: J,
}

impl<V, J> FnField<V, J>
where
    V: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    pub fn new(value: V, jacobian: J) -> Self {
        Self { value, jacobian }
    }
}

impl<V, J> VectorField for FnField<V, J>
where
    V: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    fn value(&self, theta: &DVector<f64>) -> DVector<f64> {
        (self.value)(theta)
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(theta)
    }
}

/// The five bounded smooth fields used by the Stein identity suite.
pub fn identity_suite_fields(d: usize) -> Vec<(&'static str, Box<dyn VectorField>)> {
    let ones = DVector::from_element(d, 1.0);
    let alt = DVector::from_fn(d, |a, _| if a % 2 == 0 { 1.0 } else { -0.5 });
    let coupling = DMatrix::from_fn(d, d, |a, b| if a == b { 2.0 } else { 0.7 });
    let skew = DMatrix::from_fn(d, d, |a, b| ((a + 2 * b) as f64 * 0.9).sin() * 3.0);
    vec![
        ("constant-one", Box::new(ConstantField(ones)) as Box<dyn VectorField>),
        ("constant-alternating", Box::new(ConstantField(alt))),
        (
            "coordinate-sine",
            Box::new(CoordinateSineField {
                frequency: DVector::from_fn(d, |a, _| 3.0 + a as f64),
                phase: DVector::from_fn(d, |a, _| 0.3 * a as f64),
            }),
        ),
        (
            "tanh-coupled",
            Box::new(TanhField {
                matrix: coupling,
                offset: DVector::from_element(d, -0.5),
            }),
        ),
        (
            "tanh-mixed",
            Box::new(TanhField {
                matrix: skew,
                offset: DVector::from_fn(d, |a, _| 0.2 - 0.1 * a as f64),
            }),
        ),
    ]
}
