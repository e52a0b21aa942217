//! Exact and Markov-chain samplers for the point processes of a model space.
//!
//! The exact sampler draws the projection DPP one point at a time. Candidate
//! points come from the one-point intensity `B(x,x)dμ/N` (a uniform basis
//! index, then `|v_j|²dμ`, which has a closed-form radial law) and are
//! accepted with probability `B_res(x)/B(x,x)`, where `B_res` is the diagonal
//! of the kernel of the residual subspace. The accepted point's density is
//! then `B_res(x)dμ/(N−i)`, the conditional law of the sequential scheme.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart_fn::ChartFn;
use crate::kernel::hermitian_det;
use crate::linalg::log_abs_det;
use crate::model_space::ModelSpace;
use crate::rng::stream_rng;
use crate::{Error, Point, Result, C64};

/// Proposals after which a sampler with acceptance below [`STALL_RATE`] gives up.
pub const STALL_PROPOSALS: u64 = 1_000_000;
pub const STALL_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Exact,
    Mcmc { step: usize },
}

/// One sampled configuration of rank-many points.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub points: Vec<Point>,
    /// `log|det M|² − Σ(ψ + kψ′)`; the normalized log-density against `μ^{⊗N}`
    /// is this minus `ln Z`.
    pub log_density: f64,
    pub seed: u64,
    pub stream: u64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub proposal_scale: f64,
    pub thinning: usize,
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::invalid("MCMC steps must exceed burn-in"));
        }
        if self.thinning == 0 {
            return Err(Error::invalid("thinning must be at least 1"));
        }
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return Err(Error::invalid("proposal scale must be positive"));
        }
        Ok(())
    }
}

/// `log|det M|² − Σⱼ (ψ(xⱼ) + k·ψ′(xⱼ))` with `M_ij = vᵢ(xⱼ)`; `−∞` on
/// coincident points.
pub fn log_density(
    space: &ModelSpace,
    psi: &dyn ChartFn,
    psi_prime: &dyn ChartFn,
    k: f64,
    points: &[Point],
) -> Result<f64> {
    let n = space.rank();
    if points.len() != n {
        return Err(Error::invalid(format!("expected {n} points, got {}", points.len())));
    }
    let mut m = DMatrix::<C64>::zeros(n, n);
    let mut v = Vec::with_capacity(n);
    let mut weight = 0.0;
    for (j, p) in points.iter().enumerate() {
        space.check_point(p)?;
        space.section_values_into(p, &mut v);
        for (i, x) in v.iter().enumerate() {
            m[(i, j)] = *x;
        }
        weight += psi.eval(p) + k * psi_prime.eval(p);
    }
    if weight.is_nan() {
        return Err(Error::NonFinite {
            node: 0,
            value: weight,
            context: "weight sum in log-density".into(),
        });
    }
    for a in 0..n {
        for b in a + 1..n {
            if points[a] == points[b] {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    Ok(match log_abs_det(m) {
        Some(l) => 2.0 * l - weight,
        None => f64::NEG_INFINITY,
    })
}

/// Orthonormal basis of the residual subspace in coefficient space.
struct ResidualBasis {
    /// `N × r`, orthonormal columns.
    r: DMatrix<C64>,
}

impl ResidualBasis {
    fn full(n: usize) -> Self {
        Self { r: DMatrix::identity(n, n) }
    }

    fn dim(&self) -> usize {
        self.r.ncols()
    }

    /// `y = Rᵀ v` and `B_res = ‖y‖²`.
    fn project(&self, v: &[C64]) -> (Vec<C64>, f64) {
        let (n, r) = self.r.shape();
        let mut y = vec![C64::new(0.0, 0.0); r];
        for (c, yc) in y.iter_mut().enumerate() {
            let col = self.r.column(c);
            let mut s = C64::new(0.0, 0.0);
            for i in 0..n {
                s += col[i] * v[i];
            }
            *yc = s;
        }
        let norm = y.iter().map(|c| c.norm_sqr()).sum();
        (y, norm)
    }

    /// Restrict to the orthogonal complement of the evaluation functional
    /// whose projection is `y`.
    fn remove(&mut self, y: &[C64]) {
        let r = self.dim();
        // representer coordinates are conj(y)
        let q: Vec<C64> = y.iter().map(|c| c.conj()).collect();
        let norm = q.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let phase = if q[0].norm() > 0.0 { q[0] / q[0].norm() } else { C64::new(1.0, 0.0) };
        let alpha = -phase * norm;
        let mut w = q.clone();
        w[0] -= alpha;
        let wn = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if wn > 0.0 {
            for c in &mut w {
                *c /= wn;
            }
            // R ← R (I − 2 w wᴴ)
            let rw = &self.r * DMatrix::from_column_slice(r, 1, &w);
            let wh = DMatrix::from_fn(1, r, |_, j| w[j].conj());
            self.r -= rw * wh * C64::new(2.0, 0.0);
        }
        self.r = self.r.columns(1, r - 1).into_owned();
    }
}

/// Exact projection-DPP draw with the given generator. Returns the points and
/// `log|det M|²`.
pub fn sample_dpp_with<R: Rng + ?Sized>(space: &ModelSpace, rng: &mut R) -> Result<(Vec<Point>, f64)> {
    let n = space.rank();
    if n == 0 {
        return Err(Error::invalid("space has rank 0"));
    }
    let mut basis = ResidualBasis::full(n);
    let mut points = Vec::with_capacity(n);
    let mut log_det = 0.0;
    let mut v = Vec::with_capacity(n);
    let (mut proposals, mut accepted) = (0u64, 0u64);
    while basis.dim() > 0 {
        let x = space.sample_intensity(rng);
        proposals += 1;
        space.section_values_into(&x, &mut v);
        let full: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        let (y, res) = basis.project(&v);
        let ratio = if full > 0.0 { (res / full).min(1.0) } else { 0.0 };
        if rng.random::<f64>() < ratio {
            accepted += 1;
            log_det += res.ln();
            basis.remove(&y);
            points.push(x);
        } else if proposals >= STALL_PROPOSALS && (accepted as f64) < STALL_RATE * proposals as f64 {
            return Err(Error::SamplerStall(format!(
                "{accepted} acceptances in {proposals} proposals; re-estimate the rejection envelope or refine the space"
            )));
        }
    }
    Ok((points, log_det))
}

pub fn sample_dpp(space: &ModelSpace, seed: u64) -> Result<Configuration> {
    sample_dpp_stream(space, seed, 0)
}

pub fn sample_dpp_stream(space: &ModelSpace, seed: u64, stream: u64) -> Result<Configuration> {
    let mut rng = stream_rng(seed, stream);
    let (points, log_density) = sample_dpp_with(space, &mut rng)?;
    Ok(Configuration { points, log_density, seed, stream, origin: Origin::Exact })
}

/// Run `job(stream)` for streams `0..reps` on `workers` threads, keeping stream order.
pub fn run_replicates<T, F>(reps: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    if workers <= 1 {
        return (0..reps as u64).map(&job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..reps as u64).into_par_iter().map(&job).collect())
}

/// `reps` independent exact draws; replicate `i` uses generator stream `i`.
pub fn sample_replicates(space: &ModelSpace, seed: u64, reps: usize, workers: usize) -> Result<Vec<Configuration>> {
    run_replicates(reps, workers, |s| sample_dpp_stream(space, seed, s))
}

/// Output of a Metropolis–Hastings run.
#[derive(Debug, Clone)]
pub struct McmcRun {
    pub configurations: Vec<Configuration>,
    pub acceptance_rate: f64,
    pub warnings: Vec<String>,
}

/// Metropolis–Hastings chain for the density `e^{log_density}` against `μ^{⊗N}`.
///
/// Each step moves one uniformly chosen point by a complex Gaussian step in
/// chart coordinates. The proposal is symmetric for Lebesgue measure, so the
/// acceptance ratio includes the base-density ratio.
#[allow(clippy::too_many_arguments)]
pub fn sample_weighted(
    space: &ModelSpace,
    psi: &dyn ChartFn,
    psi_prime: &dyn ChartFn,
    k: f64,
    mcmc: &McmcConfig,
    seed: u64,
    stream: u64,
) -> Result<McmcRun> {
    mcmc.validate()?;
    let mut rng = stream_rng(seed, stream);
    let (mut points, _) = sample_dpp_with(space, &mut rng)?;
    let mut ld = log_density(space, psi, psi_prime, k, &points)?;
    let n = points.len();
    let dim = space.dim();
    let sigma = mcmc.proposal_scale / std::f64::consts::SQRT_2;
    let mut accepted = 0usize;
    let mut out = Vec::new();
    for step in 0..mcmc.steps {
        let j = rng.random_range(0..n);
        let old = points[j].clone();
        let proposal: Point = old
            .iter()
            .map(|z| {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                z + C64::new(dx, dy) * sigma
            })
            .collect();
        let log_u = rng.random::<f64>().ln();
        points[j] = proposal;
        let new_ld = log_density(space, psi, psi_prime, k, &points)?;
        let log_ratio = new_ld - ld + space.base_density(&points[j]).ln() - space.base_density(&old).ln();
        if log_ratio.is_nan() && new_ld != f64::NEG_INFINITY {
            return Err(Error::NonFinite {
                node: j,
                value: log_ratio,
                context: format!("MCMC acceptance ratio at step {step}"),
            });
        }
        if new_ld > f64::NEG_INFINITY && log_u < log_ratio {
            ld = new_ld;
            accepted += 1;
        } else {
            points[j] = old;
        }
        if step >= mcmc.burn_in && (step - mcmc.burn_in).is_multiple_of(mcmc.thinning) {
            out.push(Configuration {
                points: points.clone(),
                log_density: ld,
                seed,
                stream,
                origin: Origin::Mcmc { step },
            });
        }
    }
    debug_assert!(out.iter().all(|c| c.points.len() == n && dim == c.points[0].len()));
    let rate = accepted as f64 / mcmc.steps as f64;
    let mut warnings = Vec::new();
    if !(0.05..=0.9).contains(&rate) {
        warnings.push(format!("acceptance rate {rate:.4} outside [0.05, 0.9]; adjust the proposal scale"));
    }
    Ok(McmcRun { configurations: out, acceptance_rate: rate, warnings })
}

/// DPP on a finite ground set with Hermitian kernel `0 ≤ K ≤ I`, sampled by
/// the spectral method.
#[derive(Debug, Clone)]
pub struct DiscreteDpp {
    kernel: DMatrix<C64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<C64>,
}

/// Spectral slack allowed outside `[0, 1]`.
pub const SPECTRUM_SLACK: f64 = 1e-8;

impl DiscreteDpp {
    pub fn new(kernel: DMatrix<C64>) -> Result<Self> {
        let n = kernel.nrows();
        if n == 0 || kernel.ncols() != n {
            return Err(Error::invalid("kernel must be a non-empty square matrix"));
        }
        let asym = (&kernel - kernel.adjoint()).norm();
        if asym > 1e-10 * kernel.norm().max(1.0) {
            return Err(Error::invalid(format!("kernel is not Hermitian (asymmetry {asym:e})")));
        }
        let eig = kernel.clone().symmetric_eigen();
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if let Some(bad) = eigenvalues.iter().find(|&&l| !(-SPECTRUM_SLACK..=1.0 + SPECTRUM_SLACK).contains(&l)) {
            return Err(Error::invalid(format!("kernel eigenvalue {bad} lies outside [0, 1]")));
        }
        Ok(Self { kernel, eigenvalues, eigenvectors: eig.eigenvectors })
    }

    pub fn len(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether every eigenvalue is within the slack of 0 or 1.
    pub fn is_projection(&self) -> bool {
        self.eigenvalues
            .iter()
            .all(|&l| l.abs() <= SPECTRUM_SLACK || (l - 1.0).abs() <= SPECTRUM_SLACK)
    }

    /// `P(S ⊆ X) = det K_S`.
    pub fn inclusion_probability(&self, subset: &[usize]) -> Result<f64> {
        if subset.is_empty() {
            return Ok(1.0);
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} outside the ground set")));
        }
        let m = subset.len();
        Ok(hermitian_det(&DMatrix::from_fn(m, m, |a, b| self.kernel[(subset[a], subset[b])])))
    }

    /// Indices of one draw, in selection order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let chosen: Vec<usize> = (0..self.eigenvalues.len())
            .filter(|&i| {
                let l = self.eigenvalues[i].clamp(0.0, 1.0);
                l >= 1.0 || (l > 0.0 && rng.random::<f64>() < l)
            })
            .collect();
        let r = chosen.len();
        // rows of the selected eigenvectors play the role of section values
        let rows: Vec<Vec<C64>> = (0..self.len())
            .map(|a| chosen.iter().map(|&c| self.eigenvectors[(a, c)]).collect())
            .collect();
        let mut basis = ResidualBasis::full(r);
        let mut out = Vec::with_capacity(r);
        while basis.dim() > 0 {
            let proj: Vec<(Vec<C64>, f64)> = rows.iter().map(|v| basis.project(v)).collect();
            let total: f64 = proj.iter().map(|p| p.1).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = proj.len() - 1;
            for (a, p) in proj.iter().enumerate() {
                if u < p.1 {
                    pick = a;
                    break;
                }
                u -= p.1;
            }
            basis.remove(&proj[pick].0);
            out.push(pick);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart_fn::{constant, zero};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn log_density_examples() {
        let g1 = ModelSpace::ginibre(1).unwrap();
        assert!(log_density(&g1, &*zero(), &*zero(), 0.0, &[vec![c(0.0, 0.0)]]).unwrap().abs() < 1e-15);
        let fs1 = ModelSpace::fubini_study(1);
        let p = vec![c(0.3, 0.4)];
        assert_eq!(
            log_density(&fs1, &*zero(), &*zero(), 0.0, &[p.clone(), p]).unwrap(),
            f64::NEG_INFINITY
        );
        // direct 2×2: v = √2 (1, z)/√(1+|z|²)
        let w = c(0.7, -1.3);
        let det = 2.0 * w.norm_sqr() / (1.0 + w.norm_sqr());
        let got = log_density(&fs1, &*zero(), &*zero(), 0.0, &[vec![c(0.0, 0.0)], vec![w]]).unwrap();
        assert!((got - (2.0 * det).ln()).abs() < 1e-12);
        assert!(log_density(&fs1, &*zero(), &*zero(), 0.0, &[vec![w]]).is_err());
        let shifted = log_density(&fs1, &*constant(0.5), &*constant(0.25), 2.0, &[vec![c(0.0, 0.0)], vec![w]]).unwrap();
        assert!((got - shifted - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_sample_has_rank_points_and_consistent_density() {
        for space in [
            ModelSpace::fubini_study(4),
            ModelSpace::ginibre(7).unwrap(),
            ModelSpace::product(&[1, 2], 1).unwrap(),
        ] {
            for s in 0..5 {
                let cfg = sample_dpp_stream(&space, 11, s).unwrap();
                assert_eq!(cfg.points.len(), space.rank());
                let direct = log_density(&space, &*zero(), &*zero(), 0.0, &cfg.points).unwrap();
                assert!((cfg.log_density - direct).abs() < 1e-8 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn replicates_are_deterministic_and_worker_independent() {
        let fs = ModelSpace::fubini_study(3);
        let a = sample_replicates(&fs, 5, 8, 1).unwrap();
        let b = sample_replicates(&fs, 5, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn ginibre_single_point_is_gaussian() {
        let g = ModelSpace::ginibre(1).unwrap();
        let n = 20_000;
        let mut rng = stream_rng(3, 0);
        let mean: f64 = (0..n)
            .map(|_| sample_dpp_with(&g, &mut rng).unwrap().0[0][0].norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn mcmc_replay_and_shape() {
        let fs = ModelSpace::fubini_study(2);
        let cfg = McmcConfig { steps: 300, burn_in: 100, proposal_scale: 0.5, thinning: 10 };
        let a = sample_weighted(&fs, &*zero(), &*zero(), 1.0, &cfg, 9, 0).unwrap();
        let b = sample_weighted(&fs, &*zero(), &*zero(), 1.0, &cfg, 9, 0).unwrap();
        assert_eq!(a.configurations, b.configurations);
        assert_eq!(a.configurations.len(), 20);
        assert!(a.configurations.iter().all(|c| c.points.len() == 3 && c.log_density.is_finite()));
        let bad = McmcConfig { steps: 10, burn_in: 10, proposal_scale: 0.5, thinning: 1 };
        assert!(sample_weighted(&fs, &*zero(), &*zero(), 1.0, &bad, 9, 0).is_err());
    }

    #[test]
    fn discrete_examples() {
        let k = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let d = DiscreteDpp::new(k).unwrap();
        assert!(d.is_projection());
        let mut rng = stream_rng(0, 0);
        for _ in 0..20 {
            assert_eq!(d.sample(&mut rng), vec![0]);
        }
        assert_eq!(d.inclusion_probability(&[1]).unwrap(), 0.0);
        let h = DMatrix::from_element(2, 2, c(0.5, 0.0));
        let d = DiscreteDpp::new(h).unwrap();
        assert!((d.inclusion_probability(&[0]).unwrap() - 0.5).abs() < 1e-15);
        let hits = (0..4000).filter(|_| d.sample(&mut rng) == vec![0]).count();
        assert!((hits as f64 / 4000.0 - 0.5).abs() < 3.0 * 0.5 / 4000f64.sqrt());
        let bad = DMatrix::from_element(2, 2, c(1.0, 0.0));
        assert!(DiscreteDpp::new(bad).is_err());
    }

    #[test]
    fn fs_single_point_radial_law() {
        let fs = ModelSpace::fubini_study(0);
        let mut rng = stream_rng(4, 0);
        let mut r2: Vec<f64> = (0..4000)
            .map(|_| sample_dpp_with(&fs, &mut rng).unwrap().0[0][0].norm_sqr())
            .collect();
        r2.sort_by(f64::total_cmp);
        let n = r2.len() as f64;
        let ks = r2
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = t / (1.0 + t);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.03, "{ks}");
    }
}
