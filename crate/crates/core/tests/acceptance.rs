//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::f64::consts::PI;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use bergdpp::chart_fn::{constant, zero, SharedFn};
use bergdpp::energy::{lambda_k, mabuchi, partition_function, GramPath, cgf_derivative_check, MABUCHI_NODES};
use bergdpp::kernel::{default_test_points, rescaled_correlation, scaling_sweep, KernelEvaluator};
use bergdpp::model_space::{limit_frame, ModelSpace, SpaceSpec};
use bergdpp::quadrature::{build_grid, build_region_grid, gram, integrate, integrate_real, Region, Resolution};
use bergdpp::rng::stream_rng;
use bergdpp::sampler::{sample_replicates, DiscreteDpp};
use bergdpp::statistics::{circular_law_distance, measure_convergence, pair_counts, BinLayout};
use bergdpp::weight_expr::parse_weight;
use bergdpp::{Point, C64};
use nalgebra::DMatrix;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_points<R: Rng>(rng: &mut R, count: usize, dim: usize, radius: f64) -> Vec<Point> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| C64::from_polar(radius * rng.random::<f64>().sqrt(), 2.0 * PI * rng.random::<f64>()))
                .collect()
        })
        .collect()
}

fn orthonormality_and_partition() -> Outcome {
    let start = Instant::now();
    let mut worst_gram = 0.0_f64;
    let mut worst_z = 0.0_f64;
    for k in [3usize, 10, 20] {
        let fs = ModelSpace::fubini_study(k);
        let grid = build_grid(&fs, Resolution::auto(&fs)).unwrap();
        worst_gram = worst_gram.max(gram(&fs, &grid, &*zero()).unwrap().identity_error());
        let z = partition_function(&fs, &grid, &*zero()).unwrap();
        let ln_nfact: f64 = (1..=k + 1).map(|i| (i as f64).ln()).sum();
        worst_z = worst_z.max((z.log_z - ln_nfact).exp_m1().abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_gram < 1e-8 && worst_z < 1e-8 && secs < 10.0,
        format!("max |G-I| = {worst_gram:.2e}, max rel |Z/N! - 1| = {worst_z:.2e}, {secs:.2}s"),
    )
}

fn reproducing_identities() -> Outcome {
    let mut rng = stream_rng(101, 0);
    let mut worst_trace = 0.0_f64;
    let mut worst_semi = 0.0_f64;
    let spaces = [
        ModelSpace::fubini_study(10),
        ModelSpace::ginibre(8).unwrap(),
        ModelSpace::product(&[1, 2], 2).unwrap(),
    ];
    for space in &spaces {
        let grid = build_grid(space, Resolution::auto(space)).unwrap();
        let ker = KernelEvaluator::new(space);
        let tr = integrate_real(&grid, |x| ker.diag(x)).unwrap();
        worst_trace = worst_trace.max((tr - space.rank() as f64).abs());
        let radius = if space.is_compact() { 2.0 } else { 2.5 };
        for _ in 0..10 {
            let p = random_points(&mut rng, 2, space.dim(), radius);
            let lhs = integrate(&grid, |y| ker.eval(&p[0], y).unwrap() * ker.eval(y, &p[1]).unwrap()).unwrap();
            let rhs = ker.eval(&p[0], &p[1]).unwrap();
            worst_semi = worst_semi.max((lhs - rhs).norm() / rhs.norm());
        }
    }
    outcome(
        worst_trace < 1e-8 && worst_semi < 1e-6,
        format!("max trace error = {worst_trace:.2e}, max semigroup rel error = {worst_semi:.2e}"),
    )
}

fn integration_lemma() -> Outcome {
    let fs = ModelSpace::fubini_study(3);
    let grid = build_grid(&fs, Resolution::auto(&fs)).unwrap();
    let ker = KernelEvaluator::new(&fs);
    let mut rng = stream_rng(102, 0);
    let mut worst = 0.0_f64;
    for m in 1..=3usize {
        for _ in 0..5 {
            let pts = random_points(&mut rng, m, 1, 2.0);
            let lhs = integrate_real(&grid, |y| {
                let mut all = pts.clone();
                all.push(y.to_vec());
                ker.det(&all).unwrap()
            })
            .unwrap();
            let rhs = (4 - m) as f64 * ker.det(&pts).unwrap();
            worst = worst.max((lhs - rhs).abs() / rhs.abs());
        }
    }
    outcome(worst < 1e-6, format!("max rel error over m = 1,2,3 = {worst:.2e}"))
}

fn determinantal_order_two() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let cases: [(ModelSpace, Vec<f64>); 2] = [
        (ModelSpace::fubini_study(5), vec![0.0, 1.0, f64::INFINITY]),
        (ModelSpace::ginibre(5).unwrap(), vec![0.0, 1.5, f64::INFINITY]),
    ];
    for (i, (space, edges)) in cases.iter().enumerate() {
        let samples = sample_replicates(space, 200 + i as u64, 10_000, 1).unwrap();
        let bins = BinLayout::polar(edges, 2).unwrap();
        let rows = pair_counts(&samples, space, &bins).unwrap();
        let max_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        pass &= max_z < 3.0;
        details.push(format!("rank {} bin pairs max |z| = {max_z:.2}", space.rank()));
    }
    // discrete oracle: the kernel discretized on an exact 6 x 10 grid is a projection
    let fs = ModelSpace::fubini_study(5);
    let grid = build_grid(&fs, Resolution::new(6, 10)).unwrap();
    let ker = KernelEvaluator::new(&fs);
    let n = grid.len();
    let k = DMatrix::from_fn(n, n, |a, b| {
        ker.eval(grid.node(a), grid.node(b)).unwrap() * (grid.mass(a) * grid.mass(b)).sqrt()
    });
    let dpp = DiscreteDpp::new(k).unwrap();
    let draws = 20_000usize;
    let mut single = vec![0usize; n];
    let mut pair = vec![0usize; n * n];
    let mut rng = stream_rng(203, 0);
    for _ in 0..draws {
        let mut s = dpp.sample(&mut rng);
        s.sort_unstable();
        for (x, &a) in s.iter().enumerate() {
            single[a] += 1;
            for &b in &s[x + 1..] {
                pair[a * n + b] += 1;
            }
        }
    }
    let z = |count: usize, p: f64| {
        let f = count as f64 / draws as f64;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        if sd > 0.0 { (f - p).abs() / sd } else if f == p { 0.0 } else { f64::INFINITY }
    };
    let mut max_z = 0.0_f64;
    let mut over = 0usize;
    let mut tests = 0usize;
    let mut sum_sq = 0.0;
    let mut tally = |zv: f64| {
        max_z = max_z.max(zv);
        over += (zv >= 3.0) as usize;
        sum_sq += zv * zv;
        tests += 1;
    };
    for a in 0..n {
        tally(z(single[a], dpp.inclusion_probability(&[a]).unwrap()));
        for b in a + 1..n {
            tally(z(pair[a * n + b], dpp.inclusion_probability(&[a, b]).unwrap()));
        }
    }
    // two-sided normal tail beyond 3
    let chance = 0.0026997960632601866 * tests as f64;
    pass &= dpp.is_projection() && over == 0;
    details.push(format!(
        "discrete oracle: {over} of {tests} subsets beyond 3 sigma (max |z| = {max_z:.2}, mean z^2 = {:.3}, {chance:.1} expected by chance)",
        sum_sq / tests as f64
    ));
    outcome(pass, details.join("; "))
}

fn scaling_limit() -> Outcome {
    let start = Instant::now();
    let fs_rows = scaling_sweep(&SpaceSpec::Fs { k: 1 }, &[25, 100, 400], &default_test_points(1)).unwrap();
    let pr_rows = scaling_sweep(
        &SpaceSpec::Product { multiplicities: vec![1, 2], k: 1 },
        &[10, 40],
        &default_test_points(2),
    )
    .unwrap();
    let ratios: Vec<f64> = fs_rows.iter().chain(&pr_rows).filter_map(|r| r.ratio_to_prev).collect();
    let mut closed = 0.0_f64;
    for k in [25usize, 100, 400] {
        let fs = ModelSpace::fubini_study(k);
        let frame = limit_frame(&fs, &[C64::new(0.0, 0.0)]).unwrap();
        for u in default_test_points(1) {
            let got = rescaled_correlation(&fs, &frame, k as f64, std::slice::from_ref(&u)).unwrap();
            let kf = k as f64;
            let want = (kf + 1.0) / (PI * kf) / (1.0 + u[0].norm_sqr() / kf).powi(2);
            closed = closed.max((got - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ratios.iter().all(|&r| r <= 0.7) && closed < 1e-10 && secs < 30.0,
        format!(
            "error ratios at 4k = {:?}, one-point closed-form error = {closed:.2e}, {secs:.2}s",
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn circular_law() -> Outcome {
    let big = ModelSpace::ginibre(500).unwrap();
    let small = ModelSpace::ginibre(50).unwrap();
    let d_big = circular_law_distance(&sample_replicates(&big, 600, 20, 1).unwrap(), 500).unwrap();
    let d_small = circular_law_distance(&sample_replicates(&small, 601, 20, 1).unwrap(), 50).unwrap();
    outcome(
        d_big < 0.05 && d_big < d_small,
        format!("KS distance N=500: {d_big:.4}, N=50: {d_small:.4}"),
    )
}

fn equilibrium_convergence() -> Outcome {
    let disk = Region::Disk { radius: 1.0 };
    let mut worst = 0.0_f64;
    for k in [5usize, 10, 20] {
        let fs = ModelSpace::fubini_study(k);
        let grid = build_region_grid(&fs, disk, Resolution::new(k + 24, 2 * k + 4)).unwrap();
        let m = integrate_real(&grid, |z| fs.diag(z)).unwrap() / (k + 1) as f64;
        worst = worst.max((m - 0.5).abs());
    }
    let rep = measure_convergence(&SpaceSpec::Fs { k: 5 }, &[5, 10, 20], disk, 500, 7, 1).unwrap();
    let max_z = rep
        .rows
        .iter()
        .map(|r| (r.mc_mean - r.equilibrium_mass).abs() / r.mc_stderr)
        .fold(0.0, f64::max);
    let v5 = rep.rows[0].replicate_variance;
    let v20 = rep.rows[2].replicate_variance;
    outcome(
        worst < 1e-8 && max_z < 3.0 && v20 < v5,
        format!("quadrature mass error = {worst:.2e}, max MC |z| = {max_z:.2}, variance k=5: {v5:.4}, k=20: {v20:.4}"),
    )
}

fn cgf_derivative() -> Outcome {
    let fs = ModelSpace::fubini_study(10);
    let grid = build_grid(&fs, Resolution::auto(&fs)).unwrap();
    let psi: SharedFn = Arc::new(parse_weight("r2/(1+r2)").unwrap());
    let path = GramPath::new(&fs, &grid, psi);
    let mut worst = 0.0_f64;
    let mut at_zero = f64::NAN;
    for t in [0.0, 0.5] {
        let d = cgf_derivative_check(&path, t, None).unwrap();
        worst = worst.max(d.relative_error());
        if t == 0.0 {
            at_zero = d.bergman_integral;
        }
    }
    outcome(
        worst < 1e-4 && (at_zero + 5.5).abs() < 1e-6,
        format!("max rel error = {worst:.2e}, derivative at 0 = {at_zero:.9}"),
    )
}

fn mabuchi_limit() -> Outcome {
    let f: SharedFn = Arc::new(parse_weight("0.2/(1+r2)").unwrap());
    let target_space = ModelSpace::fubini_study(1);
    let target_grid = build_grid(&target_space, Resolution::new(200, 8)).unwrap();
    let minus_f: SharedFn = Arc::new(parse_weight("-0.2/(1+r2)").unwrap());
    let target = mabuchi(&target_space, &target_grid, &minus_f, &f, MABUCHI_NODES).unwrap();
    let mut gaps = Vec::new();
    let mut constant_exact = true;
    for k in [10usize, 20, 40] {
        let fs = ModelSpace::fubini_study(k);
        let grid = build_grid(&fs, Resolution::auto(&fs)).unwrap();
        let l = lambda_k(&fs, &grid, &zero(), &zero(), &f, k as f64).unwrap();
        gaps.push((l - target).abs());
        for c in [0.3, -1.25] {
            constant_exact &= lambda_k(&fs, &grid, &zero(), &zero(), &constant(c), k as f64).unwrap() == c;
        }
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let tol = (0.05 * target.abs()).max(0.01);
    outcome(
        decreasing && gaps[2] < tol && constant_exact,
        format!("limit = {target:.6}, gaps at k = 10,20,40: {:.2e} {:.2e} {:.2e}, constant case exact: {constant_exact}", gaps[0], gaps[1], gaps[2]),
    )
}

fn reproducibility() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_bergdpp");
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 4] = [
        &["sample", "--space", "fs", "--k", "6", "--reps", "20", "--seed", "42"],
        &["sample", "--space", "fs", "--k", "2", "--reps", "2", "--seed", "42", "--weight-k-expr", "r2/(1+r2)", "--mcmc-steps", "400", "--burn-in", "100", "--thin", "50"],
        &["converge", "--space", "fs", "--ks", "3,6", "--reps", "30", "--seed", "7"],
        &["stats", "count", "--space", "ginibre", "--n", "5", "--reps", "50", "--seed", "9"],
    ];
    let mut identical = 0;
    for (i, args) in runs.iter().enumerate() {
        let outputs: Vec<Vec<u8>> = (0..2)
            .map(|rep| {
                let path = dir.path().join(format!("run{i}-{rep}.json"));
                let status = Command::new(exe)
                    .args(*args)
                    .args(["--workers", "1", "--out"])
                    .arg(&path)
                    .status()
                    .unwrap();
                assert!(status.success(), "{args:?}");
                std::fs::read(&path).unwrap()
            })
            .collect();
        identical += (outputs[0] == outputs[1] && !outputs[0].is_empty()) as usize;
    }
    outcome(identical == runs.len(), format!("{identical} of {} stochastic commands byte-identical", runs.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("orthonormality and partition identity", orthonormality_and_partition),
        ("reproducing identities", reproducing_identities),
        ("integration lemma", integration_lemma),
        ("determinantal property at order 2", determinantal_order_two),
        ("scaling limit", scaling_limit),
        ("circular law", circular_law),
        ("equilibrium convergence", equilibrium_convergence),
        ("CGF derivative", cgf_derivative),
        ("Mabuchi limit", mabuchi_limit),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("[{}] {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
