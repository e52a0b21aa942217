//! Finite-rank Bergman kernels, their determinants, and the universal limit kernel.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chart_fn::SharedFn;
use crate::linalg::pivoted_cholesky;
use crate::model_space::{limit_frame, ModelSpace, NormalFrame, SpaceSpec};
use crate::quadrature::{gram, QuadratureGrid};
use crate::{Error, Point, Result, C64};

/// Relative pivot tolerance below which a kernel determinant is reported as zero.
pub const DET_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone)]
struct Reweight {
    psi: SharedFn,
    /// `G_ψ^{-1/2}`.
    transform: DMatrix<C64>,
}

/// Evaluates `B(x,y) = Σ wᵢ(x)·conj(wᵢ(y))` for an orthonormal family `w`.
///
/// Without a reweighting `w` is the built-in basis with half-weights folded
/// in. With one, `w = G_ψ^{-1/2}·v·e^{-ψ/2}`, orthonormal for `e^{-ψ}dμ`.
#[derive(Debug, Clone)]
pub struct KernelEvaluator {
    space: ModelSpace,
    reweight: Option<Reweight>,
}

impl KernelEvaluator {
    pub fn new(space: &ModelSpace) -> Self {
        Self { space: space.clone(), reweight: None }
    }

    /// Kernel of the basis re-orthonormalized under `e^{-ψ}dμ` on `grid`.
    pub fn reweighted(space: &ModelSpace, grid: &QuadratureGrid, psi: SharedFn) -> Result<Self> {
        if psi.as_constant() == Some(0.0) {
            return Ok(Self::new(space));
        }
        let g = gram(space, grid, &*psi)?;
        let transform = g.inv_sqrt()?;
        Ok(Self {
            space: space.clone(),
            reweight: Some(Reweight { psi, transform }),
        })
    }

    pub fn space(&self) -> &ModelSpace {
        &self.space
    }

    pub fn rank(&self) -> usize {
        self.space.rank()
    }

    /// Orthonormal family at `z`, without point validation.
    pub fn values_into(&self, z: &[C64], out: &mut Vec<C64>) {
        self.space.section_values_into(z, out);
        if let Some(rw) = &self.reweight {
            let half = (-0.5 * rw.psi.eval(z)).exp();
            let v: Vec<C64> = out.iter().map(|c| c * half).collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..v.len()).map(|j| rw.transform[(i, j)] * v[j]).sum();
            }
        }
    }

    pub fn values(&self, z: &[C64]) -> Result<Vec<C64>> {
        self.space.check_point(z)?;
        let mut out = Vec::new();
        self.values_into(z, &mut out);
        Ok(out)
    }

    fn pair(a: &[C64], b: &[C64]) -> C64 {
        a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
    }

    /// `B(x,y)`.
    pub fn eval(&self, x: &[C64], y: &[C64]) -> Result<C64> {
        Ok(Self::pair(&self.values(x)?, &self.values(y)?))
    }

    /// `B(x,x)`.
    pub fn diag(&self, x: &[C64]) -> f64 {
        if self.reweight.is_none() {
            return self.space.diag(x);
        }
        let mut v = Vec::new();
        self.values_into(x, &mut v);
        v.iter().map(|c| c.norm_sqr()).sum()
    }

    /// The matrix `[B(xᵢ, xⱼ)]`.
    pub fn matrix(&self, points: &[Point]) -> Result<DMatrix<C64>> {
        let values: Vec<Vec<C64>> = points.iter().map(|p| self.values(p)).collect::<Result<_>>()?;
        let m = points.len();
        Ok(DMatrix::from_fn(m, m, |i, j| Self::pair(&values[i], &values[j])))
    }

    /// `det[B(xᵢ, xⱼ)]`, the correlation function `ρ_m` against `μ^{⊗m}`.
    pub fn det(&self, points: &[Point]) -> Result<f64> {
        if points.is_empty() {
            return Err(Error::invalid("kernel_det needs at least one point"));
        }
        Ok(hermitian_det(&self.matrix(points)?))
    }
}

/// Determinant of a Hermitian positive semidefinite matrix, with values
/// below `1e-14 · Π diag` reported as zero.
pub fn hermitian_det(m: &DMatrix<C64>) -> f64 {
    let f = pivoted_cholesky(m, DET_TOLERANCE);
    if !f.full_rank {
        return 0.0;
    }
    let diag_log: f64 = (0..m.nrows()).map(|i| m[(i, i)].re.ln()).sum();
    if f.log_det < diag_log + DET_TOLERANCE.ln() {
        return 0.0;
    }
    f.log_det.exp()
}

pub fn kernel_eval(k: &KernelEvaluator, x: &[C64], y: &[C64]) -> Result<C64> {
    k.eval(x, y)
}

pub fn kernel_det(k: &KernelEvaluator, points: &[Point]) -> Result<f64> {
    k.det(points)
}

/// `B_∞` for a curvature frame:
/// `Πλ_i/πⁿ · exp(Σ λ_i (u_i v̄_i − |u_i|²/2 − |v_i|²/2))`.
#[derive(Debug, Clone)]
pub struct LimitKernel {
    pub lambda: Vec<f64>,
}

impl LimitKernel {
    pub fn new(frame: &NormalFrame) -> Self {
        Self { lambda: frame.lambda.clone() }
    }

    pub fn from_lambda(lambda: Vec<f64>) -> Self {
        Self { lambda }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `det λ / πⁿ`.
    pub fn diagonal(&self) -> f64 {
        self.lambda.iter().product::<f64>() / PI.powi(self.dim() as i32)
    }

    pub fn eval(&self, u: &[C64], v: &[C64]) -> C64 {
        debug_assert_eq!(u.len(), self.dim());
        let mut e = C64::new(0.0, 0.0);
        for ((&l, a), b) in self.lambda.iter().zip(u).zip(v) {
            e += (a * b.conj() - 0.5 * a.norm_sqr() - 0.5 * b.norm_sqr()) * l;
        }
        e.exp() * self.diagonal()
    }

    pub fn correlation(&self, u: &[Point]) -> f64 {
        let m = u.len();
        hermitian_det(&DMatrix::from_fn(m, m, |i, j| self.eval(&u[i], &u[j])))
    }
}

pub fn limit_kernel(l: &LimitKernel, u: &[C64], v: &[C64]) -> Result<C64> {
    if u.len() != l.dim() || v.len() != l.dim() {
        return Err(Error::invalid("point dimension does not match the frame"));
    }
    Ok(l.eval(u, v))
}

pub fn limit_correlation(frame: &NormalFrame, u: &[Point]) -> Result<f64> {
    if u.is_empty() || u.iter().any(|p| p.len() != frame.dim()) {
        return Err(Error::invalid("points must be non-empty and match the frame dimension"));
    }
    Ok(LimitKernel::new(frame).correlation(u))
}

/// `k^{-nm}·ρ_m(center + u/√k)·Π κ`, the correlation in normal coordinates.
///
/// On a non-compact Gaussian space no rescaling is applied: the rank plays
/// the role of `k` and the points stay fixed.
pub fn rescaled_correlation(space: &ModelSpace, frame: &NormalFrame, k: f64, u: &[Point]) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(Error::invalid("scaling parameter must be at least 1"));
    }
    if u.is_empty() || u.iter().any(|p| p.len() != frame.dim()) {
        return Err(Error::invalid("points must be non-empty and match the frame dimension"));
    }
    let scale = if space.is_compact() { k } else { 1.0 };
    let x: Vec<Point> = u.iter().map(|p| frame.chart_point(p, scale)).collect();
    let kernel = KernelEvaluator::new(space);
    let det = kernel.det(&x)?;
    let kappa: f64 = x.iter().map(|p| frame.kappa(p)).product();
    Ok(det * kappa * scale.powi(-((frame.dim() * u.len()) as i32)))
}

/// 25 fixed points in `ℂⁿ` spread over `|u| ≤ 1.5`.
pub fn default_test_points(dim: usize) -> Vec<Point> {
    (0..25)
        .map(|j| {
            (0..dim)
                .map(|d| {
                    let (a, b) = if d % 2 == 0 { (j % 5, j / 5) } else { (j / 5, j % 5) };
                    let r = 0.1 + 0.35 * a as f64 + 0.05 * d as f64;
                    let theta = 2.0 * PI * b as f64 / 5.0 + 0.37 * a as f64 + 0.9 * d as f64;
                    C64::from_polar(r, theta)
                })
                .collect()
        })
        .collect()
}

/// One- and two-point configurations probed by a scaling sweep: every test
/// point alone, and each point paired with its successor.
pub fn test_configurations(points: &[Point]) -> Vec<Vec<Point>> {
    let n = points.len();
    let mut out: Vec<Vec<Point>> = points.iter().map(|p| vec![p.clone()]).collect();
    if n > 1 {
        out.extend((0..n).map(|i| vec![points[i].clone(), points[(i + 1) % n].clone()]));
    }
    out
}

/// `sup |rescaled − limit|` over [`test_configurations`] at the origin frame.
pub fn scaling_error(space: &ModelSpace, k: f64, points: &[Point]) -> Result<f64> {
    let center = vec![C64::new(0.0, 0.0); space.dim()];
    let frame = limit_frame(space, &center)?;
    let limit = LimitKernel::new(&frame);
    let mut worst = 0.0_f64;
    for cfg in test_configurations(points) {
        let a = rescaled_correlation(space, &frame, k, &cfg)?;
        worst = worst.max((a - limit.correlation(&cfg)).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: usize,
    pub sup_error: f64,
    pub ratio_to_prev: Option<f64>,
}

/// Scaling errors along a sequence of powers (ranks for Gaussian spaces).
pub fn scaling_sweep(spec: &SpaceSpec, ks: &[usize], points: &[Point]) -> Result<Vec<ScalingRow>> {
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(ks.len());
    for &k in ks {
        let space = spec.with_power(k).build()?;
        let err = scaling_error(&space, k as f64, points)?;
        let ratio = rows.last().map(|p| err / p.sup_error);
        rows.push(ScalingRow { k, sup_error: err, ratio_to_prev: ratio });
    }
    Ok(rows)
}

/// Bound on `|B_N(u,v) − B_∞(u,v)|` for the Ginibre kernel with `π·B_∞` as
/// reference: `e^{-(|u|²+|v|²)/2}·Σ_{j≥N} |uv̄|^j/j!`.
pub fn ginibre_rank_error_bound(n: usize, u: C64, v: C64) -> f64 {
    let x = (u * v.conj()).norm();
    let mut term = 1.0;
    for j in 1..=n {
        term *= x / j as f64;
    }
    let mut total = 0.0;
    let mut j = n;
    while term > 1e-300 && (total == 0.0 || term > 1e-18 * total) {
        total += term;
        j += 1;
        term *= x / j as f64;
    }
    total * (-(u.norm_sqr() + v.norm_sqr()) / 2.0).exp()
}
