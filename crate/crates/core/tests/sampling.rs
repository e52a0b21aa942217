use std::sync::Arc;

use bergdpp::chart_fn::{constant, zero};
use bergdpp::energy::mc_partition_ratio;
use bergdpp::kernel::KernelEvaluator;
use bergdpp::model_space::ModelSpace;
use bergdpp::quadrature::{build_grid, gram, Region, Resolution};
use bergdpp::rng::stream_rng;
use bergdpp::sampler::{sample_replicates, sample_weighted, Configuration, DiscreteDpp, McmcConfig};
use bergdpp::statistics::{
    estimate_intensity, kolmogorov_pvalue, ks_two_sample, max_z, region_count_stats, BinLayout, MIN_EXPECTED_COUNT,
};
use bergdpp::weight_expr::parse_weight;
use nalgebra::DMatrix;

fn radii(samples: &[Configuration]) -> Vec<f64> {
    samples.iter().flat_map(|c| c.points.iter().map(|p| p[0].norm())).collect()
}

fn ks_pvalue(a: &[Configuration], b: &[Configuration]) -> f64 {
    // configurations are the independent units
    let (na, nb) = (a.len() as f64, b.len() as f64);
    kolmogorov_pvalue(ks_two_sample(&radii(a), &radii(b)), na * nb / (na + nb))
}

#[test]
fn ginibre_intensity_matches_diagonal() {
    let space = ModelSpace::ginibre(5).unwrap();
    let samples = sample_replicates(&space, 11, 10_000, 1).unwrap();
    let bins = estimate_intensity(&samples, &space, &BinLayout::disk(3.0, 3, 4).unwrap()).unwrap();
    let scored = bins.iter().filter(|b| b.expected_count >= MIN_EXPECTED_COUNT).count();
    assert!(scored >= 8, "only {scored} bins scored");
    let z = max_z(&bins);
    assert!(z < 3.0, "max z = {z}");
}

#[test]
fn fubini_study_intensity_is_flat() {
    let space = ModelSpace::fubini_study(5);
    let samples = sample_replicates(&space, 12, 10_000, 1).unwrap();
    let bins = estimate_intensity(&samples, &space, &BinLayout::polar(&[0.0, 0.5, 1.0, 2.0], 2).unwrap()).unwrap();
    for b in &bins {
        // the diagonal is constant, so rate over the base density is k + 1 everywhere
        let density = b.prediction / 6.0;
        let flat = b.rate / density;
        let se = b.stderr / density;
        assert!((flat - 6.0).abs() < 3.0 * se, "bin {:?}: {flat} ± {se}", b.region);
    }
}

#[test]
fn number_variance_for_ginibre_disk() {
    let space = ModelSpace::ginibre(5).unwrap();
    let samples = sample_replicates(&space, 13, 10_000, 1).unwrap();
    let s = region_count_stats(&samples, &space, Region::Disk { radius: 1.0 }).unwrap();
    assert!(s.predicted_variance > 0.0);
    assert!(s.mean_z().abs() < 3.0, "mean {} vs {}", s.mean, s.predicted_mean);
    assert!(s.variance_z().abs() < 3.0, "variance {} vs {}", s.variance, s.predicted_variance);
}

#[test]
fn mcmc_without_weight_matches_exact_sampler() {
    let space = ModelSpace::fubini_study(3);
    let mcmc = McmcConfig { steps: 200_000, burn_in: 5_000, proposal_scale: 0.6, thinning: 40 };
    let chain = sample_weighted(&space, &*zero(), &*zero(), 3.0, &mcmc, 21, 0).unwrap();
    assert!(chain.warnings.is_empty(), "{:?}", chain.warnings);
    let exact = sample_replicates(&space, 22, 4_000, 1).unwrap();
    let p = ks_pvalue(&chain.configurations, &exact);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn constant_weight_does_not_change_the_law() {
    let space = ModelSpace::fubini_study(3);
    let mcmc = McmcConfig { steps: 200_000, burn_in: 5_000, proposal_scale: 0.6, thinning: 40 };
    let plain = sample_weighted(&space, &*zero(), &*zero(), 3.0, &mcmc, 31, 0).unwrap();
    let shifted = sample_weighted(&space, &*zero(), &*constant(2.5), 3.0, &mcmc, 31, 1).unwrap();
    let p = ks_pvalue(&plain.configurations, &shifted.configurations);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn weighted_chain_moves_mass_toward_the_origin() {
    let space = ModelSpace::fubini_study(3);
    let mcmc = McmcConfig { steps: 40_000, burn_in: 2_000, proposal_scale: 0.6, thinning: 20 };
    let w = Arc::new(parse_weight("r2").unwrap());
    let plain = sample_weighted(&space, &*zero(), &*zero(), 3.0, &mcmc, 41, 0).unwrap();
    let tilted = sample_weighted(&space, &*zero(), &*w, 3.0, &mcmc, 41, 1).unwrap();
    let mean = |s: &[Configuration]| radii(s).iter().sum::<f64>() / (s.len() * 4) as f64;
    assert!(mean(&tilted.configurations) < 0.7 * mean(&plain.configurations));
}

#[test]
fn partition_ratio_matches_gram_determinant() {
    for k in [1usize, 2] {
        let space = ModelSpace::fubini_study(k);
        let psi = parse_weight("1/(1+r2)").unwrap();
        let grid = build_grid(&space, Resolution::auto(&space)).unwrap();
        let want = gram(&space, &grid, &psi).unwrap().log_det.exp();
        let samples = sample_replicates(&space, 50 + k as u64, 20_000, 1).unwrap();
        let (mean, se) = mc_partition_ratio(&samples, &psi).unwrap();
        assert!((mean - want).abs() < 3.0 * se, "k = {k}: {mean} ± {se} vs {want}");
    }
}

#[test]
fn discrete_sampler_is_calibrated() {
    let fs = ModelSpace::fubini_study(5);
    let grid = build_grid(&fs, Resolution::new(6, 10)).unwrap();
    let ker = KernelEvaluator::new(&fs);
    let n = grid.len();
    let k = DMatrix::from_fn(n, n, |a, b| {
        ker.eval(grid.node(a), grid.node(b)).unwrap() * (grid.mass(a) * grid.mass(b)).sqrt()
    });
    let dpp = DiscreteDpp::new(k).unwrap();
    assert!(dpp.is_projection());
    let draws = 20_000;
    let mut rng = stream_rng(77, 0);
    let mut counts = vec![0usize; n * n];
    for _ in 0..draws {
        let s = dpp.sample(&mut rng);
        assert_eq!(s.len(), 6);
        for &a in &s {
            for &b in &s {
                if a <= b {
                    counts[a * n + b] += 1;
                }
            }
        }
    }
    let mut z2 = Vec::new();
    for a in 0..n {
        for b in a..n {
            let subset: Vec<usize> = if a == b { vec![a] } else { vec![a, b] };
            let p = dpp.inclusion_probability(&subset).unwrap();
            let f = counts[a * n + b] as f64 / draws as f64;
            z2.push((f - p).powi(2) / (p * (1.0 - p) / draws as f64));
        }
    }
    let m = z2.len() as f64;
    let mean = z2.iter().sum::<f64>() / m;
    let over = z2.iter().filter(|&&z| z >= 9.0).count();
    // mean of a chi-square(1) over 1830 cells has sd ≈ 0.033
    assert!((mean - 1.0).abs() < 0.15, "mean z² = {mean}");
    // 4.9 expected beyond 3σ; 13 is the Poisson 99.9% point
    assert!(over <= 13, "{over} cells beyond 3σ");
}
