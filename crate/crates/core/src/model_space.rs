//! Concrete weighted spaces: the Ginibre plane, the Fubini–Study sphere at
//! power `k` and finite products of spheres.
//!
//! Every space lives on a single chart `ℂⁿ` (one affine chart for the sphere;
//! the missing point is null for every measure involved). Section values are
//! always returned with the half-weight folded in, `f_i(z)·e^{-Φ(z)/2}`, so
//! that `Σ|v_i|²` is the diagonal of the Bergman kernel and magnitudes stay
//! `O(√rank)`.
//!
//! | space | weight `Φ` | base density `dμ/dm` | basis `f_j` |
//! |-------|------------|----------------------|-------------|
//! | Ginibre(N) | `|z|²` | `1/π` | `z^j/√(j!)`, `j < N` |
//! | FS(k) | `k·log(1+|z|²)` | `(1+|z|²)^{-2}/π` | `√((k+1)·C(k,j))·z^j`, `j ≤ k` |
//! | Product | sum over factors at power `mᵢ·k` | product | tensor products |

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::chart_fn::ChartFn;
use crate::{Error, Point, Result, C64};

/// Serializable description of a space, e.g. `{"kind": "fs", "k": 20}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpaceSpec {
    Ginibre { n: usize },
    Fs { k: usize },
    Product { multiplicities: Vec<usize>, k: usize },
}

impl SpaceSpec {
    pub fn build(&self) -> Result<ModelSpace> {
        match self {
            SpaceSpec::Ginibre { n } => ModelSpace::ginibre(*n),
            SpaceSpec::Fs { k } => Ok(ModelSpace::fubini_study(*k)),
            SpaceSpec::Product { multiplicities, k } => ModelSpace::product(multiplicities, *k),
        }
    }

    /// Same family at another power (or rank, for Ginibre).
    pub fn with_power(&self, k: usize) -> SpaceSpec {
        match self {
            SpaceSpec::Ginibre { .. } => SpaceSpec::Ginibre { n: k },
            SpaceSpec::Fs { .. } => SpaceSpec::Fs { k },
            SpaceSpec::Product { multiplicities, .. } => SpaceSpec::Product {
                multiplicities: multiplicities.clone(),
                k,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    /// Gaussian weight `|z|²` against `dm/π`.
    Gaussian,
    /// Fubini–Study weight `m·log(1+|z|²)` per unit power.
    Sphere { multiplicity: usize },
}

/// One complex dimension of a model space.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    kind: FactorKind,
    /// Highest monomial degree.
    degree: usize,
    /// `ln` of the normalization constant of each monomial.
    log_coef: Vec<f64>,
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

impl Factor {
    fn gaussian(rank: usize) -> Self {
        let lf = ln_factorials(rank);
        Self {
            kind: FactorKind::Gaussian,
            degree: rank - 1,
            log_coef: (0..rank).map(|j| -0.5 * lf[j]).collect(),
        }
    }

    fn sphere(multiplicity: usize, power: usize) -> Self {
        let lf = ln_factorials(power + 1);
        let p = power;
        Self {
            kind: FactorKind::Sphere { multiplicity },
            degree: p,
            log_coef: (0..=p)
                .map(|j| 0.5 * (((p + 1) as f64).ln() + lf[p] - lf[j] - lf[p - j]))
                .collect(),
        }
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.log_coef.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.kind, FactorKind::Sphere { .. })
    }

    /// Normalization constant of the `j`-th monomial.
    pub fn coefficient(&self, j: usize) -> f64 {
        self.log_coef[j].exp()
    }

    /// Full trivialization weight `Φ` of this factor.
    pub fn weight(&self, z: C64) -> f64 {
        match self.kind {
            FactorKind::Gaussian => z.norm_sqr(),
            FactorKind::Sphere { .. } => self.degree as f64 * z.norm_sqr().ln_1p(),
        }
    }

    pub fn base_density(&self, z: C64) -> f64 {
        base_density(self.kind, z)
    }

    /// `f_j(z)·e^{-Φ(z)/2}` for all `j`.
    pub fn values_into(&self, z: C64, out: &mut [C64]) {
        let t = z.norm_sqr();
        let half_weight = 0.5 * self.weight(z);
        if t == 0.0 {
            out.fill(C64::new(0.0, 0.0));
            out[0] = C64::new((self.log_coef[0] - half_weight).exp(), 0.0);
            return;
        }
        let ln_r = 0.5 * t.ln();
        let theta = z.arg();
        for (j, (o, lc)) in out.iter_mut().zip(&self.log_coef).enumerate() {
            let mag = (lc + j as f64 * ln_r - half_weight).exp();
            *o = C64::from_polar(mag, j as f64 * theta);
        }
    }

    /// Draw from the probability density `|v_j|² dμ`.
    pub fn sample_basis<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> C64 {
        let t = match self.kind {
            FactorKind::Gaussian => Gamma::new(j as f64 + 1.0, 1.0)
                .expect("valid gamma shape")
                .sample(rng),
            FactorKind::Sphere { .. } => {
                let beta = Beta::new(j as f64 + 1.0, (self.degree - j) as f64 + 1.0).expect("valid beta shape");
                loop {
                    let s: f64 = beta.sample(rng);
                    if s < 1.0 {
                        break s / (1.0 - s);
                    }
                }
            }
        };
        let theta = rng.random::<f64>() * 2.0 * PI;
        C64::from_polar(t.sqrt(), theta)
    }
}

fn base_density(kind: FactorKind, z: C64) -> f64 {
    match kind {
        FactorKind::Gaussian => 1.0 / PI,
        FactorKind::Sphere { .. } => 1.0 / (PI * (1.0 + z.norm_sqr()).powi(2)),
    }
}

/// A concrete weighted space `(chart, Φ, μ, orthonormal basis)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpace {
    spec: SpaceSpec,
    factors: Vec<Factor>,
    rank: usize,
}

impl ModelSpace {
    /// Ginibre ensemble of rank `n`.
    pub fn ginibre(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("Ginibre rank must be at least 1"));
        }
        Ok(Self {
            spec: SpaceSpec::Ginibre { n },
            factors: vec![Factor::gaussian(n)],
            rank: n,
        })
    }

    /// The sphere with the `k`-th power of the hyperplane bundle.
    pub fn fubini_study(k: usize) -> Self {
        Self {
            spec: SpaceSpec::Fs { k },
            factors: vec![Factor::sphere(1, k)],
            rank: k + 1,
        }
    }

    /// Product of spheres, the `i`-th at power `mᵢ·k`.
    pub fn product(multiplicities: &[usize], k: usize) -> Result<Self> {
        if multiplicities.is_empty() {
            return Err(Error::invalid("product space needs at least one factor"));
        }
        if multiplicities.contains(&0) {
            return Err(Error::invalid("product multiplicities must be at least 1"));
        }
        if k == 0 {
            return Err(Error::invalid("product power k must be at least 1"));
        }
        let factors: Vec<Factor> = multiplicities.iter().map(|&m| Factor::sphere(m, m * k)).collect();
        let rank = factors.iter().map(Factor::rank).product();
        Ok(Self {
            spec: SpaceSpec::Product {
                multiplicities: multiplicities.to_vec(),
                k,
            },
            factors,
            rank,
        })
    }

    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Complex dimension of the chart.
    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    /// Number of basis sections.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_compact(&self) -> bool {
        self.factors.iter().all(Factor::is_compact)
    }

    /// Line-bundle power `k` for sphere families.
    pub fn power(&self) -> Option<usize> {
        match &self.spec {
            SpaceSpec::Ginibre { .. } => None,
            SpaceSpec::Fs { k } | SpaceSpec::Product { k, .. } => Some(*k),
        }
    }

    /// Per-factor multi-index of basis element `i` (first factor varies slowest).
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for (slot, f) in out.iter_mut().zip(&self.factors).rev() {
            *slot = i % f.rank();
            i /= f.rank();
        }
        out
    }

    pub fn check_point(&self, z: &[C64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has {} coordinates, chart dimension is {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid(format!("non-finite chart coordinates {z:?}")));
        }
        Ok(())
    }

    /// Half-weight-folded section values `f_i(z)e^{-Φ(z)/2}`.
    pub fn normalized_section_values(&self, z: &[C64]) -> Result<Vec<C64>> {
        self.check_point(z)?;
        let mut out = Vec::new();
        self.section_values_into(z, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`normalized_section_values`](Self::normalized_section_values)
    /// that reuses `out`.
    pub fn section_values_into(&self, z: &[C64], out: &mut Vec<C64>) {
        debug_assert_eq!(z.len(), self.dim());
        out.clear();
        out.resize(self.rank, C64::new(0.0, 0.0));
        if self.factors.len() == 1 {
            self.factors[0].values_into(z[0], out);
            return;
        }
        let per: Vec<Vec<C64>> = self
            .factors
            .iter()
            .zip(z)
            .map(|(f, &zi)| {
                let mut v = vec![C64::new(0.0, 0.0); f.rank()];
                f.values_into(zi, &mut v);
                v
            })
            .collect();
        // Kronecker product, first factor slowest.
        out[0] = C64::new(1.0, 0.0);
        let mut len = 1;
        for v in &per {
            for i in (0..len).rev() {
                let a = out[i];
                for (j, b) in v.iter().enumerate() {
                    out[i * v.len() + j] = a * b;
                }
            }
            len *= v.len();
        }
    }

    /// Diagonal Bergman value `B(z,z) = Σ|v_i(z)|²`.
    pub fn diag(&self, z: &[C64]) -> f64 {
        let mut buf = vec![C64::new(0.0, 0.0); self.factors.iter().map(Factor::rank).max().unwrap_or(0)];
        self.factors
            .iter()
            .zip(z)
            .map(|(f, &zi)| {
                let v = &mut buf[..f.rank()];
                f.values_into(zi, v);
                v.iter().map(|c| c.norm_sqr()).sum::<f64>()
            })
            .product()
    }

    /// Full trivialization weight `Φ(z)`.
    pub fn weight(&self, z: &[C64]) -> f64 {
        self.factors.iter().zip(z).map(|(f, &zi)| f.weight(zi)).sum()
    }

    /// `dμ/dm` at `z`.
    pub fn base_density(&self, z: &[C64]) -> f64 {
        self.factors.iter().zip(z).map(|(f, &zi)| f.base_density(zi)).product()
    }

    /// The weight per unit power (`φ` with `Φ = kφ`), with its Hessian.
    pub fn potential(&self) -> SpacePotential {
        SpacePotential {
            kinds: self.factors.iter().map(Factor::kind).collect(),
        }
    }

    /// Draw one point from the normalized one-point intensity `B(x,x)dμ/N`.
    pub fn sample_intensity<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        self.factors
            .iter()
            .map(|f| {
                let j = rng.random_range(0..f.rank());
                f.sample_basis(j, rng)
            })
            .collect()
    }
}

/// The per-unit-power weight of a model space as a chart function.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacePotential {
    kinds: Vec<FactorKind>,
}

impl SpacePotential {
    /// Built-in weights are smooth with positive-definite Hessian everywhere.
    pub fn smooth_positive(&self) -> bool {
        true
    }
}

impl ChartFn for SpacePotential {
    fn eval(&self, z: &[C64]) -> f64 {
        self.kinds
            .iter()
            .zip(z)
            .map(|(k, zi)| match k {
                FactorKind::Gaussian => zi.norm_sqr(),
                FactorKind::Sphere { multiplicity } => *multiplicity as f64 * zi.norm_sqr().ln_1p(),
            })
            .sum()
    }

    fn complex_hessian(&self, z: &[C64]) -> Option<DMatrix<C64>> {
        let n = self.kinds.len();
        let mut h = DMatrix::zeros(n, n);
        for (i, (k, zi)) in self.kinds.iter().zip(z).enumerate() {
            h[(i, i)] = C64::new(
                match k {
                    FactorKind::Gaussian => 1.0,
                    FactorKind::Sphere { multiplicity } => *multiplicity as f64 / (1.0 + zi.norm_sqr()).powi(2),
                },
                0.0,
            );
        }
        Some(h)
    }
}

/// Local normal-coordinate data at a chart point: curvature eigenvalues,
/// their eigen-axes, and the base-measure density κ.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    pub center: Point,
    pub lambda: Vec<f64>,
    /// Unitary matrix whose columns are the curvature eigen-directions.
    pub axes: DMatrix<C64>,
    kinds: Vec<FactorKind>,
}

impl NormalFrame {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `κ(z) = dμ/dm`.
    pub fn kappa(&self, z: &[C64]) -> f64 {
        self.kinds.iter().zip(z).map(|(&k, &zi)| base_density(k, zi)).product()
    }

    /// Chart point `center + axes·u/√scale`.
    pub fn chart_point(&self, u: &[C64], scale: f64) -> Point {
        let s = 1.0 / scale.sqrt();
        (0..self.dim())
            .map(|i| self.center[i] + (0..self.dim()).map(|j| self.axes[(i, j)] * u[j]).sum::<C64>() * s)
            .collect()
    }
}

/// Curvature eigenvalues of the per-unit-power weight at `center`.
///
/// `λ` are the eigenvalues of `(∂²φ/∂z_i∂z̄_j)` with no extra factor of 2, so
/// `ln(1+|z|²)` and `|z|²` both have `λ = 1` at the origin.
pub fn limit_frame(space: &ModelSpace, center: &[C64]) -> Result<NormalFrame> {
    space.check_point(center)?;
    let potential = space.potential();
    let h = potential
        .complex_hessian(center)
        .ok_or_else(|| Error::invalid("weight has no analytic Hessian"))?;
    let n = space.dim();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || h[(i, j)].norm() == 0.0));
    let (lambda, axes) = if diagonal {
        ((0..n).map(|i| h[(i, i)].re).collect::<Vec<_>>(), DMatrix::identity(n, n))
    } else {
        let eig = h.symmetric_eigen();
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    };
    if lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid(format!("curvature is not positive at {center:?}: {lambda:?}")));
    }
    Ok(NormalFrame {
        center: center.to_vec(),
        lambda,
        axes,
        kinds: space.factors.iter().map(Factor::kind).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn ginibre_bases() {
        let g1 = ModelSpace::ginibre(1).unwrap();
        assert_eq!(g1.rank(), 1);
        assert_eq!(g1.factors()[0].coefficient(0), 1.0);
        let g3 = ModelSpace::ginibre(3).unwrap();
        // f_2(1) = 1/√2, before the half-weight e^{-1/2}
        let v = g3.normalized_section_values(&[c(1.0, 0.0)]).unwrap();
        assert!((v[2].re * (0.5f64).exp() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(ModelSpace::ginibre(0).is_err());
        let g2 = ModelSpace::ginibre(2).unwrap();
        assert_eq!(g2.normalized_section_values(&[c(0.0, 0.0)]).unwrap(), vec![c(1.0, 0.0), c(0.0, 0.0)]);
    }

    #[test]
    fn fubini_study_coefficients() {
        let fs0 = ModelSpace::fubini_study(0);
        assert_eq!(fs0.rank(), 1);
        assert!((fs0.factors()[0].coefficient(0) - 1.0).abs() < 1e-15);
        let fs3 = ModelSpace::fubini_study(3);
        assert!((fs3.factors()[0].coefficient(0) - 2.0).abs() < 1e-14);
        assert!((fs3.factors()[0].coefficient(1) - 12f64.sqrt()).abs() < 1e-14);
        let fs1 = ModelSpace::fubini_study(1);
        let v = fs1.normalized_section_values(&[c(0.0, 0.0)]).unwrap();
        assert!((v[0] - c(2f64.sqrt(), 0.0)).norm() < 1e-15 && v[1].norm() == 0.0);
    }

    #[test]
    fn product_ranks() {
        assert_eq!(ModelSpace::product(&[1, 1], 2).unwrap().rank(), 9);
        assert_eq!(ModelSpace::product(&[1, 2], 3).unwrap().rank(), 28);
        assert!(ModelSpace::product(&[], 3).is_err());
        assert!(ModelSpace::product(&[1, 0], 3).is_err());
    }

    #[test]
    fn product_values_are_tensor_products() {
        let p = ModelSpace::product(&[1, 2], 2).unwrap();
        let z = [c(0.3, -0.4), c(-1.1, 0.2)];
        let v = p.normalized_section_values(&z).unwrap();
        let mut a = vec![c(0.0, 0.0); 3];
        let mut b = vec![c(0.0, 0.0); 5];
        p.factors()[0].values_into(z[0], &mut a);
        p.factors()[1].values_into(z[1], &mut b);
        for (i, vi) in v.iter().enumerate() {
            let mi = p.multi_index(i);
            assert!((vi - a[mi[0]] * b[mi[1]]).norm() < 1e-15);
        }
        assert!((p.diag(&z) - v.iter().map(|x| x.norm_sqr()).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn fubini_study_diagonal_is_constant() {
        let mut rng = stream_rng(11, 0);
        for k in [1usize, 4, 17, 60] {
            let fs = ModelSpace::fubini_study(k);
            for _ in 0..100 {
                let z = c(rng.random::<f64>() * 8.0 - 4.0, rng.random::<f64>() * 8.0 - 4.0);
                let v = fs.normalized_section_values(&[z]).unwrap();
                let s: f64 = v.iter().map(|x| x.norm_sqr()).sum();
                assert!((s - (k + 1) as f64).abs() < 1e-10 * (k + 1) as f64, "k={k} z={z}");
            }
        }
    }

    #[test]
    fn rejects_bad_points() {
        let fs = ModelSpace::fubini_study(2);
        assert!(fs.normalized_section_values(&[c(f64::NAN, 0.0)]).is_err());
        assert!(fs.normalized_section_values(&[c(0.0, 0.0), c(0.0, 0.0)]).is_err());
    }

    #[test]
    fn frames_at_origin() {
        let o = [c(0.0, 0.0)];
        for k in [1, 5, 40] {
            let f = limit_frame(&ModelSpace::fubini_study(k), &o).unwrap();
            assert_eq!(f.lambda, vec![1.0]);
            assert!((f.kappa(&o) - 1.0 / PI).abs() < 1e-16);
        }
        let g = limit_frame(&ModelSpace::ginibre(4).unwrap(), &o).unwrap();
        assert_eq!(g.lambda, vec![1.0]);
        assert!((g.kappa(&o) - 1.0 / PI).abs() < 1e-16);
        for k in [1, 3, 9] {
            let p = limit_frame(&ModelSpace::product(&[1, 2], k).unwrap(), &[c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
            assert_eq!(p.lambda, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn intensity_sampler_hits_every_index() {
        let fs = ModelSpace::fubini_study(3);
        let mut rng = stream_rng(5, 0);
        for _ in 0..200 {
            let z = fs.sample_intensity(&mut rng);
            assert_eq!(z.len(), 1);
            assert!(z[0].re.is_finite() && z[0].im.is_finite());
        }
    }

    #[test]
    fn spec_json_shape() {
        let s: SpaceSpec = serde_json::from_str(r#"{"kind": "fs", "k": 20}"#).unwrap();
        assert_eq!(s, SpaceSpec::Fs { k: 20 });
        let p: SpaceSpec = serde_json::from_str(r#"{"kind":"product","multiplicities":[1,2],"k":3}"#).unwrap();
        assert_eq!(p.build().unwrap().rank(), 28);
        let g: SpaceSpec = serde_json::from_str(r#"{"kind":"ginibre","n":5}"#).unwrap();
        assert_eq!(g.build().unwrap().rank(), 5);
    }
}
