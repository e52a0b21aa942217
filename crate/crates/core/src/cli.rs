//! The `bergdpp` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chart_fn::{zero, ChartFn, SharedFn};
use crate::energy::{self, GramPath};
use crate::kernel::{default_test_points, scaling_sweep};
use crate::model_space::{ModelSpace, SpaceSpec};
use crate::quadrature::{build_grid, gram, QuadratureGrid, Region, Resolution};
use crate::rng::SEED_ENV;
use crate::sampler::{run_replicates, sample_replicates, sample_weighted, Configuration, McmcConfig, Origin};
use crate::statistics::{self, BinLayout};
use crate::weight_expr::parse_weight;
use crate::{Error, Point, Result, C64};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "bergdpp", version, about = "Bergman kernels, determinantal point processes and their scaling limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw exact (or, with weights, MCMC) samples.
    Sample(SampleArgs),
    /// Statistics of samples against quadrature predictions.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Sup-error of rescaled correlations against the limit kernel.
    Scaling(ScalingArgs),
    /// Convergence of empirical measures to the equilibrium measure.
    Converge(ConvergeArgs),
    /// Partition functions, CGFs, the Mabuchi functional and Λ_k.
    #[command(subcommand)]
    Energy(EnergyCommand),
    /// Deterministic identity checks.
    #[command(subcommand)]
    Check(CheckCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SpaceKind {
    Fs,
    Ginibre,
    Product,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SpaceArgs {
    /// Model space family.
    #[arg(long, value_enum, default_value = "fs")]
    space: SpaceKind,
    /// Line-bundle power (fs, product).
    #[arg(long)]
    k: Option<usize>,
    /// Rank (ginibre).
    #[arg(long)]
    n: Option<usize>,
    /// Factor multiplicities (product), e.g. 1,2.
    #[arg(long, value_delimiter = ',')]
    mults: Option<Vec<usize>>,
}

impl SpaceArgs {
    fn spec(&self) -> Result<SpaceSpec> {
        self.spec_at(None)
    }

    /// Spec with the power (or Ginibre rank) replaced when `k` is given.
    fn spec_at(&self, k: Option<usize>) -> Result<SpaceSpec> {
        let need = |v: Option<usize>, flag: &str| v.ok_or_else(|| Error::invalid(format!("--{flag} is required for this space")));
        Ok(match self.space {
            SpaceKind::Fs => SpaceSpec::Fs { k: need(k.or(self.k), "k")? },
            SpaceKind::Ginibre => SpaceSpec::Ginibre { n: need(k.or(self.n), "n")? },
            SpaceKind::Product => SpaceSpec::Product {
                multiplicities: self.mults.clone().ok_or_else(|| Error::invalid("--mults is required for product spaces"))?,
                k: need(k.or(self.k), "k")?,
            },
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct GridArgs {
    /// Radial nodes per dimension.
    #[arg(long)]
    radial: Option<usize>,
    /// Angular nodes per dimension.
    #[arg(long)]
    angular: Option<usize>,
    /// Truncation radius for Gaussian factors.
    #[arg(long)]
    truncation: Option<f64>,
}

impl GridArgs {
    fn resolution(&self, space: &ModelSpace) -> Resolution {
        let auto = Resolution::auto(space);
        Resolution {
            radial: self.radial.unwrap_or(auto.radial),
            angular: self.angular.unwrap_or(auto.angular),
            truncation: self.truncation.or(auto.truncation),
        }
    }

    fn grid(&self, space: &ModelSpace, warnings: &mut Vec<String>) -> Result<QuadratureGrid> {
        let g = build_grid(space, self.resolution(space))?;
        warnings.extend(g.warnings().iter().cloned());
        Ok(g)
    }
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Random seed (falls back to BERGDPP_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

// The embedded config records the seed actually used.
impl Serialize for RunArgs {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = ser.serialize_struct("RunArgs", 2)?;
        st.serialize_field("seed", &self.seed().ok())?;
        st.serialize_field("workers", &self.workers)?;
        st.end()
    }
}

impl RunArgs {
    fn seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
            Err(_) => Err(Error::invalid(format!("a seed is required: pass --seed or set {SEED_ENV}"))),
        }
    }

    fn workers(&self) -> Result<usize> {
        if self.workers == 0 {
            return Err(Error::invalid("--workers must be at least 1"));
        }
        Ok(self.workers)
    }
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Number of replicates (independent draws or chains).
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Extra weight ψ; switches to MCMC.
    #[arg(long, allow_hyphen_values = true)]
    weight_expr: Option<String>,
    /// Weight ψ′ scaled by the power; switches to MCMC.
    #[arg(long, allow_hyphen_values = true)]
    weight_k_expr: Option<String>,
    /// Scale multiplying ψ′ (defaults to the power, or the rank for ginibre).
    #[arg(long)]
    scale: Option<f64>,
    /// Total chain steps per replicate.
    #[arg(long, default_value_t = 10_000)]
    mcmc_steps: usize,
    /// Steps discarded before the first emitted state.
    #[arg(long, default_value_t = 1_000)]
    burn_in: usize,
    /// Emit every n-th state after burn-in.
    #[arg(long, default_value_t = 100)]
    thin: usize,
    /// Standard deviation of the complex Gaussian move.
    #[arg(long, default_value_t = 0.3)]
    proposal_scale: f64,
}

#[derive(Debug, Subcommand)]
enum StatsCommand {
    /// Binned one-point intensity (CSV).
    Intensity(IntensityArgs),
    /// Mean and variance of the number of points in a region.
    Count(CountArgs),
    /// Kolmogorov distance of rescaled Ginibre radii to the circular law.
    Circular(SampleSource),
    /// Second factorial moments on bin pairs.
    Pairs(PairArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct SampleSource {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Draws to generate when no sample file is given.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Read configurations from a `sample` output file instead.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct IntensityArgs {
    #[command(flatten)]
    source: SampleSource,
    /// Number of rings.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Angular sectors per ring.
    #[arg(long, default_value_t = 1)]
    sectors: usize,
    /// Outer radius of the binned disk (defaults to 3 for spheres, √N + 1 for ginibre).
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct CountArgs {
    #[command(flatten)]
    source: SampleSource,
    /// `chart`, `disk:R`, `annulus:R0,R1` or `sector:R0,R1,T0,T1`.
    #[arg(long, default_value = "disk:1")]
    region: String,
}

#[derive(Debug, Args, Serialize)]
struct PairArgs {
    #[command(flatten)]
    source: SampleSource,
    /// Radial bin edges.
    #[arg(long, value_delimiter = ',', default_value = "0,0.7,1.4")]
    edges: Vec<f64>,
    /// Angular sectors per ring.
    #[arg(long, default_value_t = 2)]
    sectors: usize,
}

#[derive(Debug, Args, Serialize)]
struct ScalingArgs {
    #[command(flatten)]
    space: SpaceArgs,
    /// Powers (or Ginibre ranks) to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    /// JSON list of points, each `[re, im]` or a list of those per coordinate.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ConvergeArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Powers (or Ginibre ranks) to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    /// `chart`, `disk:R`, `annulus:R0,R1` or `sector:R0,R1,T0,T1`.
    #[arg(long, default_value = "disk:1")]
    region: String,
    /// Replicates per power.
    #[arg(long, default_value_t = 500)]
    reps: usize,
}

#[derive(Debug, Subcommand)]
enum EnergyCommand {
    /// `K(t) = ln det G_t` and its derivative check.
    Cgf(CgfArgs),
    /// `Λ_k` against the Mabuchi limit.
    LambdaK(LambdaArgs),
    /// `L_eq(φ+ψ′, u)`.
    Mabuchi(MabuchiArgs),
    /// Equilibrium mass of a region.
    Equilibrium(EquilibriumArgs),
}

#[derive(Debug, Args, Serialize)]
struct CgfArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Extra weight ψ in the weight expression language.
    #[arg(long, allow_hyphen_values = true)]
    weight_expr: String,
    /// Values of t.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0")]
    t: Vec<f64>,
    /// Finite-difference step (default 1e-4·(1+|t|)).
    #[arg(long)]
    h: Option<f64>,
    /// Output file (stdout when absent).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct LambdaArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Powers (or Ginibre ranks) to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    /// Test function f.
    #[arg(long, allow_hyphen_values = true)]
    f_expr: String,
    /// Extra weight ψ.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    psi_expr: String,
    /// Weight ψ′, scaled by the power.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    psi_prime_expr: String,
    /// Output file (stdout when absent).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct MabuchiArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Base shift ψ′.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    base_expr: String,
    /// Direction u.
    #[arg(long, allow_hyphen_values = true)]
    direction_expr: String,
    /// Gauss–Legendre nodes in s.
    #[arg(long, default_value_t = energy::MABUCHI_NODES)]
    nodes: usize,
    /// Output file (stdout when absent).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EquilibriumArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Extra weight ψ in the weight expression language.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    weight_expr: String,
    /// `chart`, `disk:R`, `annulus:R0,R1` or `sector:R0,R1,T0,T1`.
    #[arg(long, default_value = "disk:1")]
    region: String,
    /// Output file (stdout when absent).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CheckCommand {
    /// Print `Z_N(φ,ψ) = N!·det G_ψ`.
    Partition(PartitionArgs),
    /// Gram matrix diagnostics, optionally exported as CSV.
    Gram(GramArgs),
}

#[derive(Debug, Args, Serialize)]
struct PartitionArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Extra weight ψ in the weight expression language.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    weight_expr: String,
}

#[derive(Debug, Args, Serialize)]
struct GramArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Extra weight ψ in the weight expression language.
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    weight_expr: String,
    /// Write the matrix as CSV.
    #[arg(long)]
    #[serde(skip)]
    csv: Option<PathBuf>,
}

/// A point on the wire: `[re, im]` in one dimension, a list of those otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WirePoint {
    One([f64; 2]),
    Many(Vec<[f64; 2]>),
}

impl WirePoint {
    pub fn from_point(p: &[C64]) -> Self {
        if p.len() == 1 {
            WirePoint::One([p[0].re, p[0].im])
        } else {
            WirePoint::Many(p.iter().map(|c| [c.re, c.im]).collect())
        }
    }

    pub fn to_point(&self) -> Point {
        match self {
            WirePoint::One([a, b]) => vec![C64::new(*a, *b)],
            WirePoint::Many(v) => v.iter().map(|[a, b]| C64::new(*a, *b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireConfiguration {
    pub points: Vec<WirePoint>,
    pub log_density: f64,
    pub stream: u64,
    pub origin: Origin,
}

impl WireConfiguration {
    pub fn from_configuration(c: &Configuration) -> Self {
        Self {
            points: c.points.iter().map(|p| WirePoint::from_point(p)).collect(),
            log_density: c.log_density,
            stream: c.stream,
            origin: c.origin,
        }
    }

    pub fn to_configuration(&self, seed: u64) -> Configuration {
        Configuration {
            points: self.points.iter().map(WirePoint::to_point).collect(),
            log_density: self.log_density,
            seed,
            stream: self.stream,
            origin: self.origin,
        }
    }
}

fn report(schema: &str, config: Value, body: Value, warnings: &[String]) -> Value {
    let mut v = json!({
        "schema": format!("bergdpp.{schema}/1"),
        "version": VERSION,
        "config": config,
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
        m.extend(b);
        m.insert("warnings".into(), json!(warnings));
    }
    v
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn emit_json(out: &Option<PathBuf>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(out, &text)
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

fn weight(source: &str, space: &ModelSpace, grid: Option<&QuadratureGrid>) -> Result<SharedFn> {
    let e = parse_weight(source)?;
    let checked = match grid {
        Some(g) => e.validate(space.dim(), g.nodes()),
        None => e.validate(space.dim(), std::iter::empty()),
    };
    checked.map_err(|err| Error::invalid(format!("weight rejected: {err}")))?;
    if e.as_constant() == Some(0.0) {
        return Ok(zero());
    }
    Ok(Arc::new(e))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Significant-digit formatting with trailing zeros removed.
fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn load_samples(path: &PathBuf) -> Result<(u64, Vec<Configuration>)> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let seed = v.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let cfgs: Vec<WireConfiguration> = serde_json::from_value(
        v.get("configurations").cloned().ok_or_else(|| Error::invalid("sample file has no `configurations`"))?,
    )?;
    Ok((seed, cfgs.iter().map(|c| c.to_configuration(seed)).collect()))
}

fn samples_for(src: &SampleSource, space: &ModelSpace) -> Result<Vec<Configuration>> {
    match &src.samples {
        Some(p) => {
            let (_, cfgs) = load_samples(p)?;
            if let Some(bad) = cfgs.iter().find(|c| c.points.len() != space.rank() || c.points.iter().any(|p| p.len() != space.dim())) {
                return Err(Error::invalid(format!(
                    "sample file does not match the space: configuration with {} points",
                    bad.points.len()
                )));
            }
            Ok(cfgs)
        }
        None => sample_replicates(space, src.run.seed()?, src.reps, src.run.workers()?),
    }
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let spec = a.space.spec()?;
    let space = spec.build()?;
    let seed = a.run.seed()?;
    let workers = a.run.workers()?;
    let mut warnings = Vec::new();
    let weighted = a.weight_expr.is_some() || a.weight_k_expr.is_some();
    let mut body = json!({ "space": to_value(&spec)?, "seed": seed });
    let configurations: Vec<Configuration> = if weighted {
        let psi = weight(a.weight_expr.as_deref().unwrap_or("0"), &space, None)?;
        let psi_prime = weight(a.weight_k_expr.as_deref().unwrap_or("0"), &space, None)?;
        let scale = a.scale.unwrap_or_else(|| space.power().unwrap_or(space.rank()) as f64);
        let mcmc = McmcConfig {
            steps: a.mcmc_steps,
            burn_in: a.burn_in,
            proposal_scale: a.proposal_scale,
            thinning: a.thin,
        };
        let runs = run_replicates(a.reps, workers, |s| sample_weighted(&space, &*psi, &*psi_prime, scale, &mcmc, seed, s))?;
        let rates: Vec<f64> = runs.iter().map(|r| r.acceptance_rate).collect();
        for (i, r) in runs.iter().enumerate() {
            warnings.extend(r.warnings.iter().map(|w| format!("chain {i}: {w}")));
        }
        body["acceptance_rates"] = json!(rates);
        body["scale"] = json!(scale);
        runs.into_iter().flat_map(|r| r.configurations).collect()
    } else {
        sample_replicates(&space, seed, a.reps, workers)?
    };
    let wire: Vec<WireConfiguration> = configurations.iter().map(WireConfiguration::from_configuration).collect();
    body["configurations"] = to_value(&wire)?;
    warn_all(&warnings);
    emit_json(&a.run.out, &report("samples", to_value(a)?, body, &warnings))
}

fn cmd_stats(c: &StatsCommand) -> Result<()> {
    match c {
        StatsCommand::Intensity(a) => {
            let spec = a.source.space.spec()?;
            let space = spec.build()?;
            let samples = samples_for(&a.source, &space)?;
            let radius = a.radius.unwrap_or(if space.is_compact() { 3.0 } else { (space.rank() as f64).sqrt() + 1.0 });
            let bins = BinLayout::disk(radius, a.bins, a.sectors)?;
            let rows = statistics::estimate_intensity(&samples, &space, &bins)?;
            let config = serde_json::to_string(&to_value(a)?)?;
            let mut text = format!("# schema=bergdpp.intensity/1 version={VERSION} config={config}\n");
            text.push_str("bin_center_re,bin_center_im,rate,stderr,prediction\n");
            for r in &rows {
                text.push_str(&format!("{},{},{},{},{}\n", r.center[0], r.center[1], r.rate, r.stderr, r.prediction));
            }
            emit(&a.source.run.out, &text)
        }
        StatsCommand::Count(a) => {
            let spec = a.source.space.spec()?;
            let space = spec.build()?;
            let region = Region::parse(&a.region)?;
            let samples = samples_for(&a.source, &space)?;
            let st = statistics::region_count_stats(&samples, &space, region)?;
            let body = json!({ "space": to_value(&spec)?, "stats": to_value(&st)?, "mean_z": st.mean_z(), "variance_z": st.variance_z() });
            emit_json(&a.source.run.out, &report("count", to_value(a)?, body, &[]))
        }
        StatsCommand::Circular(a) => {
            let spec = a.space.spec()?;
            if !matches!(spec, SpaceSpec::Ginibre { .. }) {
                return Err(Error::invalid("the circular law applies to the ginibre space"));
            }
            let space = spec.build()?;
            let samples = samples_for(a, &space)?;
            let d = statistics::circular_law_distance(&samples, space.rank())?;
            let body = json!({ "space": to_value(&spec)?, "n": space.rank(), "configurations": samples.len(), "ks_distance": d });
            emit_json(&a.run.out, &report("circular", to_value(a)?, body, &[]))
        }
        StatsCommand::Pairs(a) => {
            let spec = a.source.space.spec()?;
            let space = spec.build()?;
            let samples = samples_for(&a.source, &space)?;
            let bins = BinLayout::polar(&a.edges, a.sectors)?;
            let rows = statistics::pair_counts(&samples, &space, &bins)?;
            let body = json!({ "space": to_value(&spec)?, "bins": to_value(&bins)?, "pairs": to_value(&rows)? });
            emit_json(&a.source.run.out, &report("pairs", to_value(a)?, body, &[]))
        }
    }
}

fn cmd_scaling(a: &ScalingArgs) -> Result<()> {
    let spec = a.space.spec_at(a.ks.first().copied())?;
    let dim = spec.build()?.dim();
    let points = match &a.points {
        Some(p) => {
            let wire: Vec<WirePoint> = serde_json::from_str(&fs::read_to_string(p)?)?;
            let pts: Vec<Point> = wire.iter().map(WirePoint::to_point).collect();
            if pts.is_empty() || pts.iter().any(|p| p.len() != dim) {
                return Err(Error::invalid(format!("points must be non-empty and {dim}-dimensional")));
            }
            pts
        }
        None => default_test_points(dim),
    };
    let rows = scaling_sweep(&spec, &a.ks, &points)?;
    let body = json!({ "space": to_value(&spec)?, "rows": to_value(&rows)? });
    emit_json(&a.out, &report("scaling", to_value(a)?, body, &[]))
}

fn cmd_converge(a: &ConvergeArgs) -> Result<()> {
    let spec = a.space.spec_at(a.ks.first().copied())?;
    let region = Region::parse(&a.region)?;
    let rep = statistics::measure_convergence(&spec, &a.ks, region, a.reps, a.run.seed()?, a.run.workers()?)?;
    let body = json!({ "space": to_value(&spec)?, "report": to_value(&rep)? });
    emit_json(&a.run.out, &report("convergence", to_value(a)?, body, &[]))
}

fn cmd_energy(c: &EnergyCommand) -> Result<()> {
    let mut warnings = Vec::new();
    match c {
        EnergyCommand::Cgf(a) => {
            let spec = a.space.spec()?;
            let space = spec.build()?;
            let grid = a.grid.grid(&space, &mut warnings)?;
            let psi = weight(&a.weight_expr, &space, Some(&grid))?;
            let path = GramPath::new(&space, &grid, psi);
            let rows = a
                .t
                .iter()
                .map(|&t| {
                    let d = energy::cgf_derivative_check(&path, t, a.h)?;
                    Ok(json!({
                        "t": t,
                        "cgf": path.cgf(t)?,
                        "finite_difference": d.finite_difference,
                        "bergman_integral": d.bergman_integral,
                        "relative_error": d.relative_error(),
                        "h": d.h,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            let body = json!({ "space": to_value(&spec)?, "resolution": to_value(&grid.resolution())?, "rows": rows });
            warn_all(&warnings);
            emit_json(&a.out, &report("cgf", to_value(a)?, body, &warnings))
        }
        EnergyCommand::LambdaK(a) => {
            let spec = a.space.spec_at(a.ks.first().copied())?;
            let space0 = spec.build()?;
            if !space0.is_compact() {
                return Err(Error::invalid("Λ_k needs a compact model space"));
            }
            let res0 = a.grid.resolution(&space0);
            // Mabuchi target is independent of k; use a fine grid at the first power.
            let target_grid = build_grid(&space0, Resolution { radial: res0.radial.max(200), ..res0 })?;
            warnings.extend(target_grid.warnings().iter().cloned());
            let f = weight(&a.f_expr, &space0, Some(&target_grid))?;
            let psi = weight(&a.psi_expr, &space0, Some(&target_grid))?;
            let psi_prime = weight(&a.psi_prime_expr, &space0, Some(&target_grid))?;
            let rep = energy::lambda_sweep(
                |k| spec.with_power(k).build(),
                |s| a.grid.resolution(s),
                &psi,
                &psi_prime,
                &f,
                &a.ks,
                (&space0, &target_grid),
            )?;
            let body = json!({ "space": to_value(&spec)?, "report": to_value(&rep)? });
            warn_all(&warnings);
            emit_json(&a.out, &report("energy", to_value(a)?, body, &warnings))
        }
        EnergyCommand::Mabuchi(a) => {
            let spec = a.space.spec()?;
            let space = spec.build()?;
            let grid = a.grid.grid(&space, &mut warnings)?;
            let base = weight(&a.base_expr, &space, Some(&grid))?;
            let u = weight(&a.direction_expr, &space, Some(&grid))?;
            let value = energy::mabuchi(&space, &grid, &base, &u, a.nodes)?;
            let body = json!({ "space": to_value(&spec)?, "mabuchi": value, "resolution": to_value(&grid.resolution())? });
            warn_all(&warnings);
            emit_json(&a.out, &report("mabuchi", to_value(a)?, body, &warnings))
        }
        EnergyCommand::Equilibrium(a) => {
            let spec = a.space.spec()?;
            let space = spec.build()?;
            let grid = a.grid.grid(&space, &mut warnings)?;
            let extra = weight(&a.weight_expr, &space, Some(&grid))?;
            let region = Region::parse(&a.region)?;
            let res = a.grid.resolution(&space);
            let m = energy::equilibrium_mass(&space, &grid, &extra, region, res)?;
            let total = energy::total_mass(&space, &grid, &extra)?;
            let body = json!({ "space": to_value(&spec)?, "region": to_value(&region)?, "equilibrium_mass": m, "total_mass": total });
            warn_all(&warnings);
            emit_json(&a.out, &report("equilibrium", to_value(a)?, body, &warnings))
        }
    }
}

fn cmd_check(c: &CheckCommand) -> Result<()> {
    let mut warnings = Vec::new();
    match c {
        CheckCommand::Partition(a) => {
            let space = a.space.spec()?.build()?;
            let grid = a.grid.grid(&space, &mut warnings)?;
            let psi = weight(&a.weight_expr, &space, Some(&grid))?;
            let z = energy::partition_function(&space, &grid, &*psi)?;
            warn_all(&warnings);
            emit(&None, &format!("Z = {}\nlog Z = {}\n", fmt_sig(z.z(), 12), fmt_sig(z.log_z, 12)))
        }
        CheckCommand::Gram(a) => {
            let space = a.space.spec()?.build()?;
            let grid = a.grid.grid(&space, &mut warnings)?;
            let psi = weight(&a.weight_expr, &space, Some(&grid))?;
            let g = gram(&space, &grid, &*psi)?;
            if let Some(path) = &a.csv {
                let config = serde_json::to_string(&to_value(a)?)?;
                fs::write(path, format!("# schema=bergdpp.gram/1 version={VERSION} config={config}\n{}", g.to_csv()))?;
            }
            warn_all(&warnings);
            emit(
                &None,
                &format!(
                    "rank = {}\nlog det = {}\nmax |G - I| = {:e}\nasymmetry = {:e}\n",
                    g.rank(),
                    g.log_det,
                    g.identity_error(),
                    g.asymmetry
                ),
            )
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Stats(c) => cmd_stats(c),
        Command::Scaling(a) => cmd_scaling(a),
        Command::Converge(a) => cmd_converge(a),
        Command::Energy(c) => cmd_energy(c),
        Command::Check(c) => cmd_check(c),
    }
}

/// Exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

/// Parse `argv`, run, and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
