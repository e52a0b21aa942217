//! Empirical measures, binned intensity and pair statistics, and convergence reports.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::kernel::KernelEvaluator;
use crate::model_space::{FactorKind, ModelSpace, SpaceSpec};
use crate::quadrature::{build_grid, build_region_grid, integrate_real, outer_product_sum, QuadratureGrid, Region, Resolution};
use crate::sampler::{sample_replicates, Configuration};
use crate::{Error, Point, Result, C64};

/// Bins with fewer expected counts than this are excluded from pass/fail verdicts.
pub const MIN_EXPECTED_COUNT: f64 = 50.0;

/// Points in chart coordinates, with mass `1/N` each.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure<'a> {
    pub points: &'a [Point],
}

impl<'a> EmpiricalMeasure<'a> {
    pub fn new(cfg: &'a Configuration) -> Self {
        Self { points: &cfg.points }
    }

    /// `μ̂(U)` for a region of a one-dimensional chart, with points scaled by `scale`.
    pub fn mass(&self, region: &Region, scale: f64) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let hits = self.points.iter().filter(|p| region.contains(p[0] * scale)).count();
        hits as f64 / self.points.len() as f64
    }
}

/// A partition of part of a one-dimensional chart into annular sectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinLayout {
    pub bins: Vec<Region>,
}

impl BinLayout {
    /// Rings between consecutive `edges`, each cut into `sectors` equal angular pieces.
    pub fn polar(edges: &[f64], sectors: usize) -> Result<Self> {
        if edges.len() < 2 || sectors == 0 {
            return Err(Error::invalid("need at least two radial edges and one sector"));
        }
        let mut bins = Vec::new();
        for w in edges.windows(2) {
            if sectors == 1 {
                let r = Region::Annulus { inner: w[0], outer: w[1] };
                r.validate()?;
                bins.push(r);
                continue;
            }
            for s in 0..sectors {
                let t0 = 2.0 * PI * s as f64 / sectors as f64;
                let t1 = 2.0 * PI * (s + 1) as f64 / sectors as f64;
                let r = Region::Sector { inner: w[0], outer: w[1], theta0: t0, theta1: t1 };
                r.validate()?;
                bins.push(r);
            }
        }
        Ok(Self { bins })
    }

    /// `rings` equal-width rings of a disk.
    pub fn disk(radius: f64, rings: usize, sectors: usize) -> Result<Self> {
        if rings == 0 {
            return Err(Error::invalid("need at least one ring"));
        }
        let edges: Vec<f64> = (0..=rings).map(|i| radius * i as f64 / rings as f64).collect();
        Self::polar(&edges, sectors)
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn locate(&self, z: C64) -> Option<usize> {
        self.bins.iter().position(|b| b.contains(z))
    }
}

fn bin_center(region: &Region) -> C64 {
    let (a, b) = region.radial_bounds();
    let r = if b.is_finite() { 0.5 * (a + b) } else { a + 1.0 };
    match region.angular_bounds() {
        Some((t0, t1)) => C64::from_polar(r, 0.5 * (t0 + t1)),
        None if a == 0.0 => C64::new(0.0, 0.0),
        None => C64::new(r, 0.0),
    }
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn require_samples(samples: &[Configuration], space: &ModelSpace) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no configurations to analyse"));
    }
    if space.dim() != 1 {
        return Err(Error::invalid("binned statistics need a one-dimensional chart"));
    }
    Ok(())
}

/// Regional Gram matrix `A^U_ij = ∫_U vᵢ·v̄ⱼ dμ`.
pub fn regional_gram(space: &ModelSpace, region: Region, resolution: Resolution) -> Result<DMatrix<C64>> {
    let grid = region_grid(space, region, resolution)?;
    outer_product_sum(&grid, space.rank(), |z, v| {
        space.section_values_into(z, v);
        1.0
    })
}

fn region_grid(space: &ModelSpace, region: Region, resolution: Resolution) -> Result<QuadratureGrid> {
    if region == Region::Chart {
        build_grid(space, resolution)
    } else {
        build_region_grid(space, region, resolution)
    }
}

/// Resolution for integrals over one bin: fine enough for products of two kernels.
pub fn region_resolution(space: &ModelSpace) -> Resolution {
    let auto = Resolution::auto(space);
    Resolution { radial: auto.radial.max(48), ..auto }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBin {
    pub region: Region,
    pub center: [f64; 2],
    pub area: f64,
    /// Mean count per configuration divided by area.
    pub rate: f64,
    pub stderr: f64,
    /// `∫_bin B(x,x)dμ / area`.
    pub prediction: f64,
    pub expected_count: f64,
    pub z: f64,
}

/// Binned one-point intensity against chart-Lebesgue measure.
pub fn estimate_intensity(samples: &[Configuration], space: &ModelSpace, bins: &BinLayout) -> Result<Vec<IntensityBin>> {
    require_samples(samples, space)?;
    let res = region_resolution(space);
    let n = samples.len() as f64;
    let mut counts = vec![vec![0.0; samples.len()]; bins.len()];
    for (c, cfg) in samples.iter().enumerate() {
        for p in &cfg.points {
            if let Some(b) = bins.locate(p[0]) {
                counts[b][c] += 1.0;
            }
        }
    }
    bins.bins
        .iter()
        .zip(&counts)
        .map(|(region, xs)| {
            let area = region.area();
            if !area.is_finite() {
                return Err(Error::invalid("intensity bins must be bounded"));
            }
            let grid = build_region_grid(space, *region, res)?;
            let mass = integrate_real(&grid, |z| space.diag(z))?;
            let (mean, var) = mean_and_var(xs);
            let stderr = (var / n).sqrt() / area;
            let rate = mean / area;
            let prediction = mass / area;
            let c = bin_center(region);
            Ok(IntensityBin {
                region: *region,
                center: [c.re, c.im],
                area,
                rate,
                stderr,
                prediction,
                expected_count: mass * n,
                z: if stderr > 0.0 { (rate - prediction) / stderr } else { 0.0 },
            })
        })
        .collect()
}

/// Largest `|z|` over bins with at least [`MIN_EXPECTED_COUNT`] expected counts.
pub fn max_z(bins: &[IntensityBin]) -> f64 {
    bins.iter()
        .filter(|b| b.expected_count >= MIN_EXPECTED_COUNT)
        .map(|b| b.z.abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCountStats {
    pub region: Region,
    pub samples: usize,
    pub mean: f64,
    pub mean_stderr: f64,
    pub variance: f64,
    pub variance_stderr: f64,
    /// `∫_U B(x,x)dμ`.
    pub predicted_mean: f64,
    /// `∫_U B dμ − ∫∫_{U×U}|B|² dμ²`.
    pub predicted_variance: f64,
}

impl RegionCountStats {
    pub fn mean_z(&self) -> f64 {
        z_score(self.mean, self.predicted_mean, self.mean_stderr)
    }

    pub fn variance_z(&self) -> f64 {
        z_score(self.variance, self.predicted_variance, self.variance_stderr)
    }
}

fn z_score(x: f64, target: f64, se: f64) -> f64 {
    if se > 0.0 {
        (x - target) / se
    } else if (x - target).abs() <= 1e-9 * target.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Predicted mean and variance of the number of points in `region`:
/// `tr A^U` and `tr A^U − ‖A^U‖_F²`.
pub fn predicted_count_moments(space: &ModelSpace, region: Region, resolution: Resolution) -> Result<(f64, f64)> {
    let a = regional_gram(space, region, resolution)?;
    let trace: f64 = (0..a.nrows()).map(|i| a[(i, i)].re).sum();
    let frob: f64 = a.iter().map(|c| c.norm_sqr()).sum();
    Ok((trace, (trace - frob).max(0.0)))
}

pub fn region_count_stats(samples: &[Configuration], space: &ModelSpace, region: Region) -> Result<RegionCountStats> {
    if samples.is_empty() {
        return Err(Error::invalid("no configurations to analyse"));
    }
    if region != Region::Chart && space.dim() != 1 {
        return Err(Error::invalid("regions need a one-dimensional chart"));
    }
    let xs: Vec<f64> = samples
        .iter()
        .map(|c| c.points.iter().filter(|p| region == Region::Chart || region.contains(p[0])).count() as f64)
        .collect();
    let n = xs.len() as f64;
    let (mean, var) = mean_and_var(&xs);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let (predicted_mean, predicted_variance) = predicted_count_moments(space, region, region_resolution(space))?;
    Ok(RegionCountStats {
        region,
        samples: xs.len(),
        mean,
        mean_stderr: (var / n).sqrt(),
        variance: var,
        variance_stderr: ((m4 - var * var).max(0.0) / n).sqrt(),
        predicted_mean,
        predicted_variance,
    })
}

/// `sup |F_n − F|` for a sample and a continuous CDF.
pub fn ks_distance(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0_f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov tail `P(√n·D > λ)` for effective size `n`.
pub fn kolmogorov_pvalue(d: f64, n_eff: f64) -> f64 {
    let l = (n_eff.sqrt() + 0.12 + 0.11 / n_eff.sqrt()) * d;
    if l < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=100 {
        let t = 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * (j as f64 * l).powi(2)).exp();
        p += t;
        if t.abs() < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// KS distance of pooled radii `|z|/√N` to the CDF `min(r², 1)`.
pub fn circular_law_distance(samples: &[Configuration], rank: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no configurations to analyse"));
    }
    let s = 1.0 / (rank as f64).sqrt();
    let radii: Vec<f64> = samples.iter().flat_map(|c| c.points.iter().map(move |p| p[0].norm() * s)).collect();
    Ok(ks_distance(&radii, |r| (r * r).min(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub a: usize,
    pub b: usize,
    /// Mean number of ordered pairs of distinct points with one in bin `a`, one in bin `b`.
    pub mean: f64,
    pub stderr: f64,
    /// `∫_a∫_b ρ₂ dμ dμ`.
    pub prediction: f64,
    pub z: f64,
}

/// Empirical second factorial moments on bin pairs `a ≤ b`, against the
/// double integral of `det[B(xᵢ,xⱼ)]` over the two bins.
pub fn pair_counts(samples: &[Configuration], space: &ModelSpace, bins: &BinLayout) -> Result<Vec<PairCount>> {
    require_samples(samples, space)?;
    let res = region_resolution(space);
    let kernel = KernelEvaluator::new(space);
    let grids: Vec<QuadratureGrid> = bins
        .bins
        .iter()
        .map(|b| build_region_grid(space, *b, Resolution { radial: 24, angular: 16, ..res }))
        .collect::<Result<_>>()?;
    let per_config: Vec<Vec<f64>> = samples
        .iter()
        .map(|c| {
            let mut h = vec![0.0; bins.len()];
            for p in &c.points {
                if let Some(b) = bins.locate(p[0]) {
                    h[b] += 1.0;
                }
            }
            h
        })
        .collect();
    let n = samples.len() as f64;
    let mut out = Vec::new();
    for a in 0..bins.len() {
        for b in a..bins.len() {
            let xs: Vec<f64> = per_config
                .iter()
                .map(|h| if a == b { h[a] * (h[a] - 1.0) } else { h[a] * h[b] })
                .collect();
            let (mean, var) = mean_and_var(&xs);
            let (ga, gb) = (&grids[a], &grids[b]);
            let prediction = integrate_real(ga, |x| {
                let x: Point = x.to_vec();
                let inner = integrate_real(gb, |y| kernel.det(&[x.clone(), y.to_vec()]).unwrap_or(f64::NAN));
                inner.unwrap_or(f64::NAN)
            })?;
            let stderr = (var / n).sqrt();
            out.push(PairCount {
                a,
                b,
                mean,
                stderr,
                prediction,
                z: z_score(mean, prediction, stderr),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub rank: usize,
    /// Replicate mean of `μ̂_k(U)`.
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub replicate_variance: f64,
    /// `(1/N)∫_U B dμ`.
    pub expected_mass: f64,
    pub equilibrium_mass: f64,
    pub abs_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub region: Region,
    pub rows: Vec<ConvergenceRow>,
    /// Errors shrink in `k`, each step allowed `2σ` of noise.
    pub errors_shrinking: bool,
    pub variance_decreasing: bool,
}

/// Analytic `μ_eq(U)`: `μ_FS(U)` for spheres, and for the Gaussian family
/// the uniform law on the unit disk in coordinates `z/√N`.
pub fn equilibrium_region_mass(space: &ModelSpace, region: &Region) -> Result<f64> {
    if space.dim() != 1 {
        return Err(Error::invalid("regions need a one-dimensional chart"));
    }
    let (a, b) = region.radial_bounds();
    let frac = region.angular_bounds().map_or(1.0, |(t0, t1)| (t1 - t0) / (2.0 * PI));
    let radial = match space.factors()[0].kind() {
        FactorKind::Sphere { .. } => {
            let s = |r: f64| if r.is_infinite() { 1.0 } else { r * r / (1.0 + r * r) };
            s(b) - s(a)
        }
        FactorKind::Gaussian => b.min(1.0).powi(2) - a.min(1.0).powi(2),
    };
    Ok(radial * frac)
}

fn scale_region(region: Region, s: f64) -> Region {
    match region {
        Region::Chart => Region::Chart,
        Region::Disk { radius } => Region::Disk { radius: radius * s },
        Region::Annulus { inner, outer } => Region::Annulus { inner: inner * s, outer: outer * s },
        Region::Sector { inner, outer, theta0, theta1 } => Region::Sector { inner: inner * s, outer: outer * s, theta0, theta1 },
    }
}

pub fn measure_convergence(
    spec: &SpaceSpec,
    ks: &[usize],
    region: Region,
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<ConvergenceReport> {
    if reps < 2 {
        return Err(Error::invalid("need at least two replicates"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let space = spec.with_power(k).build()?;
        let eq = equilibrium_region_mass(&space, &region)?;
        // Gaussian regions are given in rescaled coordinates
        let scale = if space.is_compact() { 1.0 } else { (space.rank() as f64).sqrt() };
        let chart_region = scale_region(region, scale);
        let n = space.rank() as f64;
        let expected = if chart_region == Region::Chart {
            1.0
        } else {
            let grid = build_region_grid(&space, chart_region, region_resolution(&space))?;
            integrate_real(&grid, |z| space.diag(z))? / n
        };
        let samples = sample_replicates(&space, seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), reps, workers)?;
        let masses: Vec<f64> = samples.iter().map(|c| EmpiricalMeasure::new(c).mass(&region, 1.0 / scale)).collect();
        let (mean, var) = mean_and_var(&masses);
        let se = (var / reps as f64).sqrt();
        rows.push(ConvergenceRow {
            k,
            rank: space.rank(),
            mc_mean: mean,
            mc_stderr: se,
            replicate_variance: var,
            expected_mass: expected,
            equilibrium_mass: eq,
            abs_error: (mean - eq).abs(),
            z: z_score(mean, expected, se),
        });
    }
    let errors_shrinking = rows
        .windows(2)
        .all(|w| w[1].abs_error <= w[0].abs_error + 2.0 * (w[0].mc_stderr + w[1].mc_stderr));
    let variance_decreasing = rows.windows(2).all(|w| w[1].replicate_variance < w[0].replicate_variance);
    Ok(ConvergenceReport { region, rows, errors_shrinking, variance_decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use crate::sampler::Origin;

    fn synthetic(points: Vec<Point>) -> Configuration {
        Configuration { points, log_density: 0.0, seed: 0, stream: 0, origin: Origin::Exact }
    }

    #[test]
    fn fs_predicted_mean_on_unit_disk() {
        let fs = ModelSpace::fubini_study(9);
        let (mean, var) = predicted_count_moments(&fs, Region::Disk { radius: 1.0 }, region_resolution(&fs)).unwrap();
        assert!((mean - 5.0).abs() < 1e-10);
        assert!(var > 0.0);
        let (mean, var) = predicted_count_moments(&fs, Region::Chart, Resolution::auto(&fs)).unwrap();
        assert!((mean - 10.0).abs() < 1e-8);
        assert!(var.abs() < 1e-8);
    }

    #[test]
    fn number_variance_matches_double_integral() {
        let fs = ModelSpace::fubini_study(4);
        let region = Region::Disk { radius: 0.8 };
        let res = Resolution::new(30, 20);
        let (mean, var) = predicted_count_moments(&fs, region, res).unwrap();
        let grid = build_region_grid(&fs, region, res).unwrap();
        let ker = KernelEvaluator::new(&fs);
        let single = integrate_real(&grid, |x| ker.diag(x)).unwrap();
        let double = integrate_real(&grid, |x| {
            integrate(&grid, |y| C64::new(ker.eval(x, y).unwrap().norm_sqr(), 0.0)).unwrap().re
        })
        .unwrap();
        assert!((mean - single).abs() < 1e-12);
        assert!((var - (single - double)).abs() < 1e-10);
    }

    #[test]
    fn circular_law_self_test() {
        // radii with CDF r² at the midpoints of 10⁴ quantile cells
        let n = 10_000;
        let pts: Vec<Point> = (0..n).map(|i| vec![C64::new(((i as f64 + 0.5) / n as f64).sqrt(), 0.0)]).collect();
        let d = circular_law_distance(&[synthetic(pts)], 1).unwrap();
        assert!(d < 0.01);
        assert!(circular_law_distance(&[], 1).is_err());
    }

    #[test]
    fn ks_helpers() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
        assert_eq!(ks_two_sample(&a, &b), 1.0);
        assert!(kolmogorov_pvalue(0.01, 100.0) > 0.99);
        assert!(kolmogorov_pvalue(0.5, 100.0) < 1e-10);
        let u: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance(&u, |x| x) <= 0.0005 + 1e-12);
    }

    #[test]
    fn empirical_measure_is_normalized() {
        let cfg = synthetic(vec![vec![C64::new(0.1, 0.0)], vec![C64::new(3.0, 0.0)]]);
        let m = EmpiricalMeasure::new(&cfg);
        assert_eq!(m.mass(&Region::Chart, 1.0), 1.0);
        assert_eq!(m.mass(&Region::Disk { radius: 1.0 }, 1.0), 0.5);
    }

    #[test]
    fn empty_samples_are_rejected() {
        let fs = ModelSpace::fubini_study(2);
        let bins = BinLayout::disk(1.0, 2, 1).unwrap();
        assert!(estimate_intensity(&[], &fs, &bins).is_err());
        assert!(region_count_stats(&[], &fs, Region::Chart).is_err());
    }

    #[test]
    fn whole_chart_counts_are_fixed() {
        let fs = ModelSpace::fubini_study(3);
        let samples = sample_replicates(&fs, 1, 50, 1).unwrap();
        let st = region_count_stats(&samples, &fs, Region::Chart).unwrap();
        assert_eq!(st.mean, 4.0);
        assert_eq!(st.variance, 0.0);
        assert!(st.predicted_variance.abs() < 1e-8);
    }

    #[test]
    fn equilibrium_masses() {
        let fs = ModelSpace::fubini_study(5);
        assert!((equilibrium_region_mass(&fs, &Region::Disk { radius: 1.0 }).unwrap() - 0.5).abs() < 1e-15);
        let g = ModelSpace::ginibre(5).unwrap();
        assert!((equilibrium_region_mass(&g, &Region::Disk { radius: 0.5 }).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(equilibrium_region_mass(&g, &Region::Chart).unwrap(), 1.0);
    }

    #[test]
    fn bin_layout_locates_points() {
        let bins = BinLayout::disk(2.0, 2, 4).unwrap();
        assert_eq!(bins.len(), 8);
        assert_eq!(bins.locate(C64::new(0.5, 0.1)), Some(0));
        assert_eq!(bins.locate(C64::new(-1.5, -0.1)), Some(6));
        assert_eq!(bins.locate(C64::new(3.0, 0.0)), None);
    }
}
