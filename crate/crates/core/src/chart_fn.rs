//! Real-valued functions on a chart `ℂⁿ`, used for weights, test functions
//! and perturbation directions.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::C64;

/// A real function on the chart, optionally with an analytic complex Hessian
/// `(∂²f / ∂z_i ∂z̄_j)`.
pub trait ChartFn: Send + Sync + fmt::Debug {
    fn eval(&self, z: &[C64]) -> f64;

    /// Complex Hessian at `z`, or `None` when not available.
    fn complex_hessian(&self, _z: &[C64]) -> Option<DMatrix<C64>> {
        None
    }

    /// `Some(c)` when the function is known to be the constant `c`.
    fn as_constant(&self) -> Option<f64> {
        None
    }
}

/// Shared handle to a chart function.
pub type SharedFn = Arc<dyn ChartFn>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl ChartFn for Constant {
    fn eval(&self, _z: &[C64]) -> f64 {
        self.0
    }

    fn complex_hessian(&self, z: &[C64]) -> Option<DMatrix<C64>> {
        Some(DMatrix::zeros(z.len(), z.len()))
    }

    fn as_constant(&self) -> Option<f64> {
        Some(self.0)
    }
}

pub fn zero() -> SharedFn {
    Arc::new(Constant(0.0))
}

pub fn constant(c: f64) -> SharedFn {
    Arc::new(Constant(c))
}

/// Wraps a closure; no Hessian.
pub struct FnChart<F>(pub F);

impl<F> fmt::Debug for FnChart<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnChart(..)")
    }
}

impl<F> ChartFn for FnChart<F>
where
    F: Fn(&[C64]) -> f64 + Send + Sync,
{
    fn eval(&self, z: &[C64]) -> f64 {
        (self.0)(z)
    }
}

pub fn from_fn<F>(f: F) -> SharedFn
where
    F: Fn(&[C64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnChart(f))
}

/// `Σ cᵢ fᵢ`.
#[derive(Debug, Clone)]
pub struct Combination {
    terms: Vec<(f64, SharedFn)>,
}

impl Combination {
    pub fn new(terms: Vec<(f64, SharedFn)>) -> Self {
        Self { terms }
    }
}

impl ChartFn for Combination {
    fn eval(&self, z: &[C64]) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.eval(z)).sum()
    }

    fn complex_hessian(&self, z: &[C64]) -> Option<DMatrix<C64>> {
        let mut acc = DMatrix::zeros(z.len(), z.len());
        for (c, f) in &self.terms {
            if *c == 0.0 {
                continue;
            }
            acc += f.complex_hessian(z)? * C64::new(*c, 0.0);
        }
        Some(acc)
    }

    fn as_constant(&self) -> Option<f64> {
        self.terms
            .iter()
            .try_fold(0.0, |acc, (c, f)| f.as_constant().map(|v| acc + c * v))
    }
}

/// `a·f + b·g`.
pub fn linear(a: f64, f: &SharedFn, b: f64, g: &SharedFn) -> SharedFn {
    Arc::new(Combination::new(vec![(a, f.clone()), (b, g.clone())]))
}

pub fn scaled(a: f64, f: &SharedFn) -> SharedFn {
    Arc::new(Combination::new(vec![(a, f.clone())]))
}
