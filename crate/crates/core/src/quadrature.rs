//! Deterministic integration on model-space charts.
//!
//! Grids are tensor products, per complex dimension, of a radial rule and an
//! angular rule. In the radial variable `t = |z|²` every built-in base measure
//! becomes `dμ = (1/2π)·dρ·dθ` for a suitable `ρ`:
//!
//! - sphere factors use `s = t/(1+t) ∈ [0,1)`, on which `μ` is uniform and each
//!   `|v_j|²` is a polynomial of degree `k` in `s`, so Gauss–Legendre in `s`
//!   is exact once `radial > k`;
//! - Gaussian factors use `t` itself on `[0, R²]` with composite
//!   Gauss–Legendre panels; the truncated mass of the trace is
//!   `Σ_{j<N} P(Poisson(R²) ≤ j)` and is recorded as [`QuadratureGrid::tail_mass`].
//!
//! Equispaced angular nodes integrate `e^{imθ}` exactly for `|m| < angular`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chart_fn::ChartFn;
use crate::linalg::{self, hermitianize, pivoted_cholesky};
use crate::model_space::{Factor, FactorKind, ModelSpace};
use crate::{Error, Result, C64};

/// Nodes per Gauss–Legendre panel on Gaussian radial ranges.
const GAUSSIAN_PANEL: usize = 12;

/// Grid resolution per complex dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub radial: usize,
    pub angular: usize,
    /// Truncation radius for non-compact factors; `None` picks `√(2N) + 6`.
    pub truncation: Option<f64>,
}

impl Resolution {
    pub fn new(radial: usize, angular: usize) -> Self {
        Self { radial, angular, truncation: None }
    }

    pub fn with_truncation(mut self, radius: f64) -> Self {
        self.truncation = Some(radius);
        self
    }

    /// Resolution that integrates products of two kernels exactly on sphere
    /// factors (radial degree `2d`, angular frequency `2d`).
    pub fn auto(space: &ModelSpace) -> Self {
        let d = space.factors().iter().map(Factor::degree).max().unwrap_or(0);
        match space.factors()[0].kind() {
            FactorKind::Gaussian => {
                let r = default_truncation(space.rank());
                Self::new(GAUSSIAN_PANEL * ((r * r) / 6.0).ceil() as usize, 2 * d + 4)
            }
            FactorKind::Sphere { .. } => Self::new(d + 24, 2 * d + 4),
        }
    }
}

/// `R = √(2N) + 6`.
pub fn default_truncation(rank: usize) -> f64 {
    (2.0 * rank as f64).sqrt() + 6.0
}

/// A radially symmetric subset of a one-dimensional chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    Chart,
    Disk { radius: f64 },
    Annulus { inner: f64, outer: f64 },
    /// Annular sector `inner ≤ |z| < outer`, `theta0 ≤ arg z < theta1` (radians, in `[0, 2π]`).
    Sector { inner: f64, outer: f64, theta0: f64, theta1: f64 },
}

impl Region {
    /// Parse `chart`, `disk:R`, `annulus:R0,R1` or `sector:R0,R1,T0,T1`.
    pub fn parse(text: &str) -> Result<Self> {
        let (shape, args) = text.split_once(':').unwrap_or((text, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad region number `{a}`"))))
                .collect::<Result<_>>()?
        };
        let region = match (shape, nums.as_slice()) {
            ("chart", []) => Region::Chart,
            ("disk", [r]) => Region::Disk { radius: *r },
            ("annulus", [a, b]) => Region::Annulus { inner: *a, outer: *b },
            ("sector", [a, b, t0, t1]) => Region::Sector { inner: *a, outer: *b, theta0: *t0, theta1: *t1 },
            _ => return Err(Error::invalid(format!("cannot parse region `{text}`"))),
        };
        region.validate()?;
        Ok(region)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.radial_bounds();
        if !(a >= 0.0) || !(b >= a) {
            return Err(Error::invalid(format!("empty or malformed radial range in {self:?}")));
        }
        if let Some((t0, t1)) = self.angular_bounds() {
            if !(0.0..=2.0 * PI + 1e-12).contains(&t0) || !(t1 >= t0) || t1 > 2.0 * PI + 1e-12 {
                return Err(Error::invalid(format!("malformed angular range in {self:?}")));
            }
        }
        Ok(())
    }

    /// Zero-area regions, such as `disk:0`.
    pub fn is_empty(&self) -> bool {
        let (a, b) = self.radial_bounds();
        b <= a || self.angular_bounds().is_some_and(|(t0, t1)| t1 <= t0)
    }

    pub fn radial_bounds(&self) -> (f64, f64) {
        match *self {
            Region::Chart => (0.0, f64::INFINITY),
            Region::Disk { radius } => (0.0, radius),
            Region::Annulus { inner, outer } | Region::Sector { inner, outer, .. } => (inner, outer),
        }
    }

    pub fn angular_bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Region::Sector { theta0, theta1, .. } => Some((theta0, theta1)),
            _ => None,
        }
    }

    pub fn contains(&self, z: C64) -> bool {
        let r = z.norm();
        let (a, b) = self.radial_bounds();
        if r < a || r >= b {
            return false;
        }
        match self.angular_bounds() {
            None => true,
            Some((t0, t1)) => {
                let mut t = z.arg();
                if t < 0.0 {
                    t += 2.0 * PI;
                }
                t >= t0 && t < t1
            }
        }
    }

    /// Area of the region in the chart (infinite for `Chart`).
    pub fn area(&self) -> f64 {
        let (a, b) = self.radial_bounds();
        let span = self.angular_bounds().map_or(2.0 * PI, |(t0, t1)| t1 - t0);
        0.5 * span * (b * b - a * a)
    }
}

/// Nodes and weights approximating the base measure of a model space.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    dim: usize,
    nodes: Vec<C64>,
    /// Chart-Lebesgue weights.
    weights: Vec<f64>,
    /// Base density at each node.
    density: Vec<f64>,
    /// Product `weight · density`: the μ-mass carried by each node.
    mass: Vec<f64>,
    resolution: Resolution,
    truncation: Option<f64>,
    tail_mass: f64,
    warnings: Vec<String>,
}

fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("positive node count"));
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    rule.as_node_weight_pairs().iter().map(|&(x, w)| (mid + half * x, half * w)).collect()
}

/// `Σ_{j<n} P(Poisson(T) ≤ j)`: trace mass of a rank-`n` Ginibre kernel outside radius `√T`.
fn ginibre_tail(n: usize, t: f64) -> f64 {
    let mut pmf = (-t).exp();
    let mut cdf = 0.0;
    let mut total = 0.0;
    for j in 0..n {
        if j > 0 {
            pmf *= t / j as f64;
        }
        cdf += pmf;
        total += cdf;
    }
    total
}

struct FactorRule {
    points: Vec<C64>,
    mass: Vec<f64>,
    tail: f64,
}

fn factor_rule(f: &Factor, res: &Resolution, region: Region, warnings: &mut Vec<String>) -> Result<FactorRule> {
    let (r_lo, r_hi) = region.radial_bounds();
    let mut tail = 0.0;
    // radial nodes as (t = |z|², μ-weight density in the mapped variable)
    let radial: Vec<(f64, f64)> = match f.kind() {
        FactorKind::Sphere { .. } => {
            let s_of = |r: f64| if r == 0.0 { 0.0 } else { 1.0 / (1.0 + (r * r).recip()) };
            gauss_legendre(res.radial, s_of(r_lo), s_of(r_hi))
                .into_iter()
                .map(|(s, w)| (s / (1.0 - s), w))
                .collect()
        }
        FactorKind::Gaussian => {
            let cut = res.truncation.unwrap_or_else(|| default_truncation(f.rank()));
            if !(cut > 0.0) {
                return Err(Error::invalid("truncation radius must be positive"));
            }
            let hi = r_hi.min(cut);
            if r_hi > cut {
                tail = ginibre_tail(f.rank(), cut * cut);
            }
            let (t0, t1) = (r_lo * r_lo, hi * hi);
            if !(t1 > t0) {
                return Err(Error::invalid("region lies outside the truncation radius"));
            }
            let panels = res.radial.div_ceil(GAUSSIAN_PANEL).max(1);
            let h = (t1 - t0) / panels as f64;
            (0..panels)
                .flat_map(|p| gauss_legendre(GAUSSIAN_PANEL, t0 + p as f64 * h, t0 + (p + 1) as f64 * h))
                .collect()
        }
    };
    let angular: Vec<(f64, f64)> = match region.angular_bounds() {
        None => (0..res.angular)
            .map(|l| (2.0 * PI * l as f64 / res.angular as f64, 2.0 * PI / res.angular as f64))
            .collect(),
        Some((a, b)) => gauss_legendre(res.angular, a, b),
    };
    if res.radial * res.angular < 4 * f.rank() {
        warnings.push(format!(
            "under-resolved: {}x{} nodes for a factor of rank {}",
            res.radial,
            res.angular,
            f.rank()
        ));
    }
    if region.angular_bounds().is_none() && res.angular <= f.degree() {
        warnings.push(format!(
            "angular count {} does not integrate frequency {} exactly",
            res.angular,
            f.degree()
        ));
    }
    let mut points = Vec::with_capacity(radial.len() * angular.len());
    let mut mass = Vec::with_capacity(radial.len() * angular.len());
    for &(t, wr) in &radial {
        let r = t.sqrt();
        for &(theta, wt) in &angular {
            points.push(C64::from_polar(r, theta));
            mass.push(wr * wt / (2.0 * PI));
        }
    }
    Ok(FactorRule { points, mass, tail })
}

/// Tensor grid over the whole chart.
pub fn build_grid(space: &ModelSpace, resolution: Resolution) -> Result<QuadratureGrid> {
    build(space, resolution, Region::Chart)
}

/// Grid restricted to a radial region of a one-dimensional space.
pub fn build_region_grid(space: &ModelSpace, region: Region, resolution: Resolution) -> Result<QuadratureGrid> {
    if space.dim() != 1 && region != Region::Chart {
        return Err(Error::invalid("regions are only supported on one-dimensional charts"));
    }
    region.validate()?;
    if region.is_empty() {
        return Err(Error::invalid("cannot build a grid on an empty region"));
    }
    build(space, resolution, region)
}

fn build(space: &ModelSpace, resolution: Resolution, region: Region) -> Result<QuadratureGrid> {
    if resolution.radial == 0 || resolution.angular == 0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let mut warnings = Vec::new();
    let rules: Vec<FactorRule> = space
        .factors()
        .iter()
        .map(|f| factor_rule(f, &resolution, region, &mut warnings))
        .collect::<Result<_>>()?;
    let dim = space.dim();
    let total: usize = rules.iter().map(|r| r.points.len()).product();
    let mut nodes = Vec::with_capacity(total * dim);
    let mut mass = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut m = 1.0;
        for (d, rule) in rules.iter().enumerate() {
            nodes.push(rule.points[idx[d]]);
            m *= rule.mass[idx[d]];
        }
        mass.push(m);
        // odometer, last factor fastest
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < rules[d].points.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    let density: Vec<f64> = nodes.chunks(dim).map(|z| space.base_density(z)).collect();
    let weights = mass.iter().zip(&density).map(|(m, d)| m / d).collect();
    let truncation = space
        .factors()
        .iter()
        .any(|f| !f.is_compact())
        .then(|| resolution.truncation.unwrap_or_else(|| default_truncation(space.rank())));
    Ok(QuadratureGrid {
        dim,
        nodes,
        weights,
        density,
        mass,
        resolution,
        truncation,
        tail_mass: rules.iter().map(|r| r.tail).sum(),
        warnings,
    })
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[C64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[C64]> {
        self.nodes.chunks(self.dim)
    }

    /// Chart-Lebesgue weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn density(&self, i: usize) -> f64 {
        self.density[i]
    }

    /// μ-mass of node `i`, `weight · density`.
    pub fn mass(&self, i: usize) -> f64 {
        self.mass[i]
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn truncation(&self) -> Option<f64> {
        self.truncation
    }

    /// Trace mass of the kernel lost to truncation (zero on compact charts).
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn under_resolved(&self) -> bool {
        !self.warnings.is_empty()
    }
}

/// `∫ f dμ ≈ Σ wᵢ·ρ(zᵢ)·f(zᵢ)`.
pub fn integrate<F>(grid: &QuadratureGrid, f: F) -> Result<C64>
where
    F: Fn(&[C64]) -> C64 + Sync + Send,
{
    let sum = linalg::try_chunked_reduce(
        grid.len(),
        |range| {
            let mut acc = C64::new(0.0, 0.0);
            for i in range {
                let v = f(grid.node(i));
                if !(v.re.is_finite() && v.im.is_finite()) {
                    return Err(Error::NonFinite {
                        node: i,
                        value: if v.re.is_finite() { v.im } else { v.re },
                        context: format!("integrand at {:?}", grid.node(i)),
                    });
                }
                acc += v * grid.mass[i];
            }
            Ok(acc)
        },
        |a, b| a + b,
    )?;
    Ok(sum.unwrap_or(C64::new(0.0, 0.0)))
}

/// Real-valued [`integrate`].
pub fn integrate_real<F>(grid: &QuadratureGrid, f: F) -> Result<f64>
where
    F: Fn(&[C64]) -> f64 + Sync + Send,
{
    integrate(grid, |z| C64::new(f(z), 0.0)).map(|c| c.re)
}

/// Gram matrix of the basis under an extra weight.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub entries: DMatrix<C64>,
    pub log_det: f64,
    /// Frobenius norm of `A − Aᴴ` before symmetrization.
    pub asymmetry: f64,
    /// Extra weight used, for reports.
    pub weight: String,
}

impl GramMatrix {
    pub fn rank(&self) -> usize {
        self.entries.nrows()
    }

    /// `max |A_ij − δ_ij|`.
    pub fn identity_error(&self) -> f64 {
        let n = self.rank();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.entries[(i, j)] - C64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    /// Hermitian inverse square root, used to re-orthonormalize the basis.
    pub fn inv_sqrt(&self) -> Result<DMatrix<C64>> {
        linalg::hermitian_inv_sqrt(&self.entries, 1e-12)
    }

    /// Row-major CSV with one `"re,im"` cell per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rank() {
            let row: Vec<String> = (0..self.rank())
                .map(|j| {
                    let c = self.entries[(i, j)];
                    format!("\"{},{}\"", c.re, c.im)
                })
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Accumulate `Σ_n m_n·u(z_n)·u(z_n)ᴴ` over the grid, where `u` fills a
/// vector of length `rank` and returns a scale factor for the node.
pub(crate) fn outer_product_sum<U>(grid: &QuadratureGrid, rank: usize, fill: U) -> Result<DMatrix<C64>>
where
    U: Fn(&[C64], &mut Vec<C64>) -> f64 + Sync + Send,
{
    let acc = linalg::try_chunked_reduce(
        grid.len(),
        |range| {
            let mut block = DMatrix::<C64>::zeros(range.len(), rank);
            let mut v = Vec::with_capacity(rank);
            for (r, i) in range.enumerate() {
                let z = grid.node(i);
                let scale = fill(z, &mut v) * grid.mass[i];
                if !(scale.is_finite() && scale >= 0.0) {
                    return Err(Error::NonFinite {
                        node: i,
                        value: scale,
                        context: format!("Gram weight at {z:?}"),
                    });
                }
                let s = scale.sqrt();
                for (j, x) in v.iter().enumerate() {
                    block[(r, j)] = x * s;
                }
            }
            Ok(block.transpose() * block.conjugate())
        },
        |a, b| a + b,
    )?;
    Ok(acc.unwrap_or_else(|| DMatrix::zeros(rank, rank)))
}

/// `A_ij = ∫ v_i·v̄_j·e^{-ψ} dμ`, Hermitianized, with its log-determinant.
pub fn gram(space: &ModelSpace, grid: &QuadratureGrid, psi: &dyn ChartFn) -> Result<GramMatrix> {
    if grid.dim() != space.dim() {
        return Err(Error::invalid("grid and space dimensions differ"));
    }
    let shift = psi.as_constant();
    let mut entries = outer_product_sum(grid, space.rank(), |z, v| {
        space.section_values_into(z, v);
        match shift {
            Some(c) => (-c).exp(),
            None => (-psi.eval(z)).exp(),
        }
    })?;
    finish_gram(&mut entries, format!("{psi:?}"))
}

pub(crate) fn finish_gram(entries: &mut DMatrix<C64>, weight: String) -> Result<GramMatrix> {
    let asymmetry = hermitianize(entries);
    let factor = pivoted_cholesky(entries, 1e-14);
    if !factor.full_rank {
        return Err(Error::GramDegenerate(format!(
            "Gram matrix is numerically singular (rank {} of {}); the grid is under-resolved or the weight too wild",
            factor.rank,
            entries.nrows()
        )));
    }
    Ok(GramMatrix {
        entries: entries.clone(),
        log_det: factor.log_det,
        asymmetry,
        weight,
    })
}
