//! Partition functions, cumulant-generating functions, Monge–Ampère
//! measures, the Mabuchi functional and its finite-`k` approximations `Λ_k`.
//!
//! The curvature convention is `dd^c = (i/2π)∂∂̄`, so that the Monge–Ampère
//! density of a weight `φ` against chart Lebesgue measure is
//! `n!·det(∂²φ/∂zᵢ∂z̄ⱼ)/πⁿ`. With it the Fubini–Study weight has total mass 1.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::chart_fn::{linear, scaled, ChartFn, Combination, SharedFn};
use crate::kernel::KernelEvaluator;
use crate::linalg::{self, pivoted_cholesky};
use crate::model_space::ModelSpace;
use crate::quadrature::{build_region_grid, gram, integrate_real, GramMatrix, QuadratureGrid, Region, Resolution};
use crate::sampler::Configuration;
use crate::{Error, Result, C64};

/// `ln n!`.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionValue {
    pub rank: usize,
    pub log_det: f64,
    /// `ln N! + ln det G_ψ`.
    pub log_z: f64,
}

impl PartitionValue {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// `Z_N(φ,ψ) = N!·det G_ψ`.
pub fn partition_function(space: &ModelSpace, grid: &QuadratureGrid, psi: &dyn ChartFn) -> Result<PartitionValue> {
    let g = gram(space, grid, psi)?;
    Ok(PartitionValue {
        rank: space.rank(),
        log_det: g.log_det,
        log_z: ln_factorial(space.rank()) + g.log_det,
    })
}

/// Monte Carlo mean of `exp(−Σψ(Xᵢ))` over unweighted DPP draws, with its
/// standard error: an estimate of `Z_N(φ,ψ)/N!`.
pub fn mc_partition_ratio(samples: &[Configuration], psi: &dyn ChartFn) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no configurations to average"));
    }
    let xs: Vec<f64> = samples
        .iter()
        .map(|c| (-c.points.iter().map(|p| psi.eval(p)).sum::<f64>()).exp())
        .collect();
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            node: i,
            value: xs[i],
            context: "exp(-Σψ) for a sampled configuration".into(),
        });
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// The family `t ↦ G_t`, Gram matrices under the extra weight `t·ψ`.
#[derive(Debug)]
pub struct GramPath<'a> {
    space: &'a ModelSpace,
    grid: &'a QuadratureGrid,
    psi: SharedFn,
    cache: Mutex<BTreeMap<u64, f64>>,
}

impl<'a> GramPath<'a> {
    pub fn new(space: &'a ModelSpace, grid: &'a QuadratureGrid, psi: SharedFn) -> Self {
        Self { space, grid, psi, cache: Mutex::new(BTreeMap::new()) }
    }

    pub fn direction(&self) -> &SharedFn {
        &self.psi
    }

    pub fn gram(&self, t: f64) -> Result<GramMatrix> {
        gram(self.space, self.grid, &*scaled(t, &self.psi))
    }

    /// `K(t) = ln det G_t`.
    pub fn cgf(&self, t: f64) -> Result<f64> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&t.to_bits()) {
            return Ok(*v);
        }
        let v = self.gram(t)?.log_det;
        self.cache.lock().expect("cache lock").insert(t.to_bits(), v);
        Ok(v)
    }

    /// Kernel of the basis re-orthonormalized under `e^{-tψ}dμ`.
    pub fn kernel(&self, t: f64) -> Result<KernelEvaluator> {
        KernelEvaluator::reweighted(self.space, self.grid, scaled(t, &self.psi))
    }
}

pub fn cgf(path: &GramPath<'_>, t: f64) -> Result<f64> {
    path.cgf(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub t: f64,
    pub h: f64,
    pub finite_difference: f64,
    pub bergman_integral: f64,
}

impl DerivativeCheck {
    pub fn relative_error(&self) -> f64 {
        (self.finite_difference - self.bergman_integral).abs() / self.bergman_integral.abs().max(1e-300)
    }
}

/// `(K(t+h) − K(t−h))/2h` against `−∫ψ·B_t(x,x)dμ`. Default `h = 1e-4·(1+|t|)`.
pub fn cgf_derivative_check(path: &GramPath<'_>, t: f64, h: Option<f64>) -> Result<DerivativeCheck> {
    let h = h.unwrap_or(1e-4 * (1.0 + t.abs()));
    if !(h > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    let fd = (path.cgf(t + h)? - path.cgf(t - h)?) / (2.0 * h);
    let kernel = path.kernel(t)?;
    let psi = path.direction().clone();
    let integral = integrate_real(path.grid, |z| psi.eval(z) * kernel.diag(z))?;
    Ok(DerivativeCheck { t, h, finite_difference: fd, bergman_integral: -integral })
}

/// `n!·det(H)/πⁿ` for the complex Hessian `H` of `weight` at `z`.
pub fn monge_ampere_density(weight: &dyn ChartFn, z: &[C64]) -> Result<f64> {
    let h = weight
        .complex_hessian(z)
        .ok_or_else(|| Error::invalid("weight has no analytic Hessian"))?;
    let n = z.len();
    let f = pivoted_cholesky(&h, 0.0);
    if !f.full_rank {
        return Err(Error::LeavesKahlerCone(format!("complex Hessian is not positive definite at {z:?}")));
    }
    let d = f.log_det.exp();
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    Ok(fact * d / std::f64::consts::PI.powi(n as i32))
}

fn require_compact(space: &ModelSpace) -> Result<()> {
    if !space.is_compact() {
        return Err(Error::invalid(
            "equilibrium measures are only available on compact model spaces",
        ));
    }
    Ok(())
}

/// `(∫ f·MA(w) dm, ∫ MA(w) dm)` over a grid, failing at the first node (in
/// node order) where the Hessian is not positive.
fn ma_moments(
    space: &ModelSpace,
    grid: &QuadratureGrid,
    weight: &dyn ChartFn,
    f: &dyn ChartFn,
    context: &str,
) -> Result<(f64, f64)> {
    let acc = linalg::try_chunked_reduce(
        grid.len(),
        |range| {
            let (mut a, mut b) = (0.0, 0.0);
            for i in range {
                let z = grid.node(i);
                let ma = monge_ampere_density(weight, z).map_err(|e| match e {
                    Error::LeavesKahlerCone(m) => Error::LeavesKahlerCone(format!("{context}, grid node {i}: {m}")),
                    other => other,
                })?;
                let m = ma / space.base_density(z) * grid.mass(i);
                let fv = f.eval(z);
                if !(m.is_finite() && fv.is_finite()) {
                    return Err(Error::NonFinite {
                        node: i,
                        value: if m.is_finite() { fv } else { m },
                        context: format!("Monge–Ampère integrand, {context}"),
                    });
                }
                a += fv * m;
                b += m;
            }
            Ok((a, b))
        },
        |x, y| (x.0 + y.0, x.1 + y.1),
    )?;
    Ok(acc.unwrap_or((0.0, 0.0)))
}

/// `φ + extra` where `φ` is the space's per-unit-power weight.
pub fn full_weight(space: &ModelSpace, extra: &SharedFn) -> SharedFn {
    let phi: SharedFn = Arc::new(space.potential());
    if extra.as_constant() == Some(0.0) {
        return phi;
    }
    Arc::new(Combination::new(vec![(1.0, phi), (1.0, extra.clone())]))
}

/// Total Monge–Ampère mass of `φ + extra` on the chart.
pub fn total_mass(space: &ModelSpace, grid: &QuadratureGrid, extra: &SharedFn) -> Result<f64> {
    require_compact(space)?;
    let zero = crate::chart_fn::zero();
    Ok(ma_moments(space, grid, &*full_weight(space, extra), &*zero, "total mass")?.1)
}

/// `μ_eq(U)` for the weight `φ + extra`, normalized by the total mass on `grid`.
pub fn equilibrium_mass(
    space: &ModelSpace,
    grid: &QuadratureGrid,
    extra: &SharedFn,
    region: Region,
    resolution: Resolution,
) -> Result<f64> {
    require_compact(space)?;
    region.validate()?;
    if region.is_empty() {
        return Ok(0.0);
    }
    let total = total_mass(space, grid, extra)?;
    if region == Region::Chart {
        return Ok(1.0);
    }
    let sub = build_region_grid(space, region, resolution)?;
    let zero = crate::chart_fn::zero();
    let part = ma_moments(space, &sub, &*full_weight(space, extra), &*zero, "region mass")?.1;
    Ok(part / total)
}

/// Default number of Gauss–Legendre nodes in `s`.
pub const MABUCHI_NODES: usize = 24;

/// `∫ u dμ_eq^{φ+base}`.
pub fn equilibrium_average(space: &ModelSpace, grid: &QuadratureGrid, base: &SharedFn, u: &SharedFn) -> Result<f64> {
    require_compact(space)?;
    let (a, b) = ma_moments(space, grid, &*full_weight(space, base), &**u, "equilibrium average")?;
    Ok(a / b)
}

/// `L_eq(φ+ψ′, u) = ∫₀¹ ∫ u dμ_eq^{φ+ψ′+s·u} ds` with `nodes` Gauss–Legendre nodes in `s`.
pub fn mabuchi(
    space: &ModelSpace,
    grid: &QuadratureGrid,
    base: &SharedFn,
    direction: &SharedFn,
    nodes: usize,
) -> Result<f64> {
    require_compact(space)?;
    if nodes < 16 {
        return Err(Error::invalid("Mabuchi s-quadrature needs at least 16 nodes"));
    }
    if let Some(c) = direction.as_constant() {
        return Ok(c);
    }
    let rule = GaussLegendre::new(std::num::NonZeroUsize::new(nodes).expect("nonzero"));
    let mut total = 0.0;
    for &(x, w) in rule.as_node_weight_pairs().iter() {
        let s = 0.5 * (x + 1.0);
        total += 0.5 * w * mabuchi_integrand(space, grid, base, direction, s)?;
    }
    Ok(total)
}

/// `∫ u dμ_eq^{φ+ψ′+s·u}`.
pub fn mabuchi_integrand(
    space: &ModelSpace,
    grid: &QuadratureGrid,
    base: &SharedFn,
    direction: &SharedFn,
    s: f64,
) -> Result<f64> {
    let shifted = linear(1.0, base, s, direction);
    let w = full_weight(space, &shifted);
    let (a, b) = ma_moments(space, grid, &*w, &**direction, &format!("s = {s}"))?;
    Ok(a / b)
}

/// `Λ_k = (ln det G[ψ + k(ψ′−f)] − ln det G[ψ + kψ′]) / (k·N_k)` on the
/// space at power `k`.
pub fn lambda_k(
    space: &ModelSpace,
    grid: &QuadratureGrid,
    psi: &SharedFn,
    psi_prime: &SharedFn,
    f: &SharedFn,
    k: f64,
) -> Result<f64> {
    let n = space.rank() as f64;
    let base = Combination::new(vec![(1.0, psi.clone()), (k, psi_prime.clone())]);
    let tilted = Combination::new(vec![(1.0, psi.clone()), (k, psi_prime.clone()), (-k, f.clone())]);
    let advise = |e: Error| match e {
        Error::GramDegenerate(m) => Error::GramDegenerate(format!("{m} at k = {k}; refine the grid")),
        other => other,
    };
    if let Some(c) = f.as_constant() {
        return Ok(c);
    }
    let g1 = gram(space, grid, &tilted).map_err(advise)?;
    let g0 = gram(space, grid, &base).map_err(advise)?;
    Ok((g1.log_det - g0.log_det) / (k * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub k: usize,
    pub rank: usize,
    pub lambda_k: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `L_eq(φ+ψ′−f, f)`, the limit of `Λ_k`.
    pub target: f64,
    pub rows: Vec<LambdaRow>,
    pub gaps_decreasing: bool,
    pub mabuchi_nodes: usize,
    pub resolutions: Vec<Resolution>,
}

/// `Λ_k` along `ks` against the Mabuchi limit. `space_at(k)` builds the
/// space at power `k`; `resolution(space)` picks its grid.
pub fn lambda_sweep(
    space_at: impl Fn(usize) -> Result<ModelSpace>,
    resolution: impl Fn(&ModelSpace) -> Resolution,
    psi: &SharedFn,
    psi_prime: &SharedFn,
    f: &SharedFn,
    ks: &[usize],
    target_grid: (&ModelSpace, &QuadratureGrid),
) -> Result<EnergyReport> {
    let (s0, g0) = target_grid;
    let base = linear(1.0, psi_prime, -1.0, f);
    let target = mabuchi(s0, g0, &base, f, MABUCHI_NODES)?;
    let mut rows = Vec::new();
    let mut resolutions = Vec::new();
    for &k in ks {
        let space = space_at(k)?;
        let res = resolution(&space);
        let grid = crate::quadrature::build_grid(&space, res)?;
        let l = lambda_k(&space, &grid, psi, psi_prime, f, k as f64)?;
        resolutions.push(res);
        rows.push(LambdaRow { k, rank: space.rank(), lambda_k: l, gap: (l - target).abs() });
    }
    let gaps_decreasing = rows.windows(2).all(|w| w[1].gap < w[0].gap);
    Ok(EnergyReport { target, rows, gaps_decreasing, mabuchi_nodes: MABUCHI_NODES, resolutions })
}
