//! Simulation study: panel generators with MA(1) cross-correlated noise,
//! the adjusted Rand index and the benchmark runner.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::basis::{build_design, DesignLayout};
use crate::distributions::QuantileSpec;
use crate::error::{Error, Result};
use crate::model::Panel;
use crate::qreg::{select_basis_size, AicScope};
use crate::sampler::{run_chain, summarize, SamplerConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Scenario {
    /// Gaussian marginals.
    A,
    /// Gamma marginals with the same means.
    B,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "A",
            Scenario::B => "B",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "SIMA" | "SIM_A" => Ok(Scenario::A),
            "B" | "SIMB" | "SIM_B" => Ok(Scenario::B),
            _ => Err(Error::config("scenario", format!("expected A or B, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n_per_cluster: usize,
    pub t_len: usize,
    pub rho: f64,
    pub theta_ma: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_cluster == 0 {
            return Err(Error::config("n_per_cluster", "must be positive"));
        }
        if self.t_len == 0 {
            return Err(Error::config("T", "must be positive"));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::config("rho", "must lie in (-1, 1)"));
        }
        if !(self.theta_ma.abs() <= 1.0) {
            return Err(Error::config("theta", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Cluster labels `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&0) {
            return Err(Error::domain("partition labels start at 1"));
        }
        Ok(Self { labels })
    }

    /// From zero-based labels.
    pub fn from_zero_based(labels: &[usize]) -> Self {
        Self {
            labels: labels.iter().map(|l| l + 1).collect(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `g(t; a, b) = a [2 + t/T + exp(-(t/T - b)^2 / 0.05)]`.
pub fn mean_curve(t: usize, t_len: usize, a: f64, b: f64) -> f64 {
    let s = t as f64 / t_len as f64;
    a * (2.0 + s + (-(s - b) * (s - b) / 0.05).exp())
}

/// `(a, b)` of the mean curve for cluster `k` and component `j` (both
/// zero-based).
pub fn curve_parameters(k: usize, j: usize) -> (f64, f64) {
    const TABLE: [[(f64, f64); 2]; 3] = [
        [(1.0, 0.2), (1.5, 0.8)],
        [(1.0, 0.5), (1.5, 0.2)],
        [(1.0, 0.8), (1.5, 0.5)],
    ];
    TABLE[k][j]
}

/// Bivariate MA(1) noise `z_t = v_t + theta v_{t-1}` with
/// `v_t ~ N(0, [[1, rho], [rho, 1]] / (1 + theta^2))`, started from the
/// stationary distribution so every `z_t` has unit variance.
pub fn gen_noise<R: rand::Rng + ?Sized>(
    t_len: usize,
    rho: f64,
    theta: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(rho.abs() < 1.0) || !(theta.abs() <= 1.0) {
        return Err(Error::domain(format!("need |rho| < 1 and |theta| <= 1, got {rho}, {theta}")));
    }
    let sd = (1.0 / (1.0 + theta * theta)).sqrt();
    let tail = (1.0 - rho * rho).sqrt();
    let mut draw = || {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        (sd * a, sd * (rho * a + tail * b))
    };
    let mut prev = draw();
    let mut z1 = Vec::with_capacity(t_len);
    let mut z2 = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let v = draw();
        z1.push(v.0 + theta * prev.0);
        z2.push(v.1 + theta * prev.1);
        prev = v;
    }
    Ok((z1, z2))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse CDF of Gamma(shape, scale): bracketed Newton iterations on the
/// regularized lower incomplete gamma function with bisection fallback,
/// relative tolerance `1e-10`.
pub fn gamma_inverse_cdf(u: f64, shape: f64, scale: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("probability {u} not in (0, 1)")));
    }
    if !(shape > 0.0 && scale > 0.0) {
        return Err(Error::domain("gamma shape and scale must be positive"));
    }
    let log_norm = ln_gamma(shape);
    let pdf = |x: f64| ((shape - 1.0) * x.ln() - x - log_norm).exp();
    let (mut lo, mut hi) = (0.0, shape.max(1.0));
    while gamma_lr(shape, hi) < u {
        lo = hi;
        hi *= 2.0;
    }
    if lo == 0.0 {
        // Geometric search for a lower bracket; small-shape quantiles can be
        // many orders of magnitude below one.
        lo = hi;
        while gamma_lr(shape, lo) > u {
            hi = lo;
            lo *= 1e-4;
            if lo < f64::MIN_POSITIVE {
                return Ok(f64::MIN_POSITIVE * scale);
            }
        }
    }
    let mut x = (lo * hi).sqrt();
    for _ in 0..200 {
        let f = gamma_lr(shape, x) - u;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let newton = if d > 0.0 { x - f / d } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else if hi > 2.0 * lo {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-10 * next.abs() || hi - lo <= 1e-10 * hi {
            return Ok(next * scale);
        }
        x = next;
    }
    Err(Error::numerical(format!("gamma quantile did not converge for u={u}, shape={shape}")))
}

/// Generates a three-cluster panel at times `1..=T` and the true partition.
/// Sites are ordered by cluster.
pub fn gen_panel(config: &SimConfig) -> Result<(Panel, Partition)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tl = config.t_len;
    let n = 3 * config.n_per_cluster;
    let mut values = Vec::with_capacity(n * 2 * tl);
    let mut labels = Vec::with_capacity(n);
    for k in 0..3 {
        for _ in 0..config.n_per_cluster {
            let (z1, z2) = gen_noise(tl, config.rho, config.theta_ma, &mut rng)?;
            for (j, z) in [z1, z2].iter().enumerate() {
                let (a, b) = curve_parameters(k, j);
                for t in 0..tl {
                    let m = mean_curve(t + 1, tl, a, b);
                    values.push(match config.scenario {
                        Scenario::A => m + (m / 5.0).sqrt() * z[t],
                        Scenario::B => {
                            let u = normal_cdf(z[t]).clamp(1e-300, 1.0 - 1e-16);
                            gamma_inverse_cdf(u, m / 5.0, 5.0)?
                        }
                    });
                }
            }
            labels.push(k + 1);
        }
    }
    let times: Vec<f64> = (1..=tl).map(|t| t as f64).collect();
    let observed = vec![true; values.len()];
    let panel = Panel::from_arrays(2, times, values, observed)?;
    Ok((panel, Partition { labels }))
}

fn choose2(x: u64) -> u128 {
    let x = x as u128;
    x * x.saturating_sub(1) / 2
}

/// Hubert-Arabie adjusted Rand index. Returns 1 when both partitions are
/// trivial in the same way (the index is 0/0 there).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "partitions have different lengths ({} and {})",
            a.len(),
            b.len()
        )));
    }
    let index = |xs: &[usize]| -> (Vec<usize>, usize) {
        let mut uniq: Vec<usize> = xs.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        (
            xs.iter().map(|x| uniq.binary_search(x).expect("present")).collect(),
            uniq.len(),
        )
    };
    let (ia, ka) = index(a);
    let (ib, kb) = index(b);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in ia.iter().zip(&ib) {
        table[x * kb + y] += 1;
    }
    let same_both: u128 = table.iter().map(|&c| choose2(c)).sum();
    let rows: u128 = (0..ka)
        .map(|x| choose2(table[x * kb..(x + 1) * kb].iter().sum()))
        .sum();
    let cols: u128 = (0..kb)
        .map(|y| choose2((0..ka).map(|x| table[x * kb + y]).sum()))
        .sum();
    let pairs = choose2(a.len() as u64);
    // ARI = 2 (index N - rows cols) / ((rows + cols) N - 2 rows cols)
    let num = 2 * same_both as i128 * pairs as i128 - 2 * (rows * cols) as i128;
    let den = (rows + cols) as i128 * pairs as i128 - 2 * (rows * cols) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

impl Partition {
    pub fn ari(&self, other: &Partition) -> Result<f64> {
        adjusted_rand_index(&self.labels, &other.labels)
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BenchmarkRow {
    pub scenario: Scenario,
    pub rho: f64,
    pub theta: f64,
}

/// Sizes of the simulated panels and the chain.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchmarkSettings {
    pub n_per_cluster: usize,
    pub t_len: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub basis_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
}

impl BenchmarkSettings {
    /// Reduced scale: 3 x 30 sites, 60 times, 600 sweeps with 150 burn-in,
    /// 4 to 8 basis functions, 20 replications.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_per_cluster: 30,
            t_len: 60,
            iterations: 600,
            burn_in: 150,
            basis_sizes: (4..=8).collect(),
            replications: 20,
            seed,
        }
    }

    /// Full scale: 3 x 100 sites, 100 times, 400 sweeps with 100 burn-in,
    /// 4 to 10 basis functions, 100 replications.
    pub fn full(seed: u64) -> Self {
        Self {
            n_per_cluster: 100,
            t_len: 100,
            iterations: 400,
            burn_in: 100,
            basis_sizes: (4..=10).collect(),
            replications: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchmarkResult {
    pub row: BenchmarkRow,
    pub replications: usize,
    /// ARI of every successful replication.
    pub aris: Vec<f64>,
    pub ari_mean: f64,
    pub ari_se: f64,
    pub failures: usize,
}

/// Simulates one panel, selects the basis size at the median, runs a K = 3
/// chain and returns the ARI of the modal memberships against the truth.
pub fn run_replication(row: &BenchmarkRow, settings: &BenchmarkSettings, seed: u64) -> Result<f64> {
    let sim = SimConfig {
        scenario: row.scenario,
        n_per_cluster: settings.n_per_cluster,
        t_len: settings.t_len,
        rho: row.rho,
        theta_ma: row.theta,
        seed,
    };
    let (panel, truth) = gen_panel(&sim)?;
    let quant = QuantileSpec::bivariate(0.5, 0.5)?;
    let candidates: Vec<DesignLayout> = settings
        .basis_sizes
        .iter()
        .map(|&m| DesignLayout::Plain { m })
        .collect();
    let chosen = select_basis_size(&panel, &candidates, &quant, AicScope::AllComponents)?.chosen;
    let design = build_design(chosen, panel.times(), 2)?;
    let config = SamplerConfig {
        k: 3,
        iterations: settings.iterations,
        burn_in: settings.burn_in,
        seed: derive_seed(seed, &[1]),
        ..SamplerConfig::default()
    };
    let trace = run_chain(&panel, &design, &quant, &config)?;
    let summary = summarize(&trace, &design)?;
    truth.ari(&Partition::from_zero_based(&summary.membership_mode))
}

/// Runs every row with `settings.replications` replications in parallel.
/// Failed replications are counted and excluded from the mean.
pub fn run_benchmark(rows: &[BenchmarkRow], settings: &BenchmarkSettings) -> Result<Vec<BenchmarkResult>> {
    if settings.replications < 2 {
        return Err(Error::config("replications", "at least 2 are needed for a standard error"));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let results: Vec<Result<f64>> = (0..settings.replications)
            .into_par_iter()
            .map(|rep| run_replication(row, settings, derive_seed(settings.seed, &[r as u64, rep as u64])))
            .collect();
        let mut aris = Vec::new();
        let mut failures = 0;
        for (rep, res) in results.into_iter().enumerate() {
            match res {
                Ok(a) => aris.push(a),
                Err(e) => {
                    warn!("row {r} ({row:?}) replication {rep} failed: {e}");
                    failures += 1;
                }
            }
        }
        let (ari_mean, ari_se) = mean_se(&aris);
        out.push(BenchmarkResult {
            row: *row,
            replications: settings.replications,
            aris,
            ari_mean,
            ari_se,
            failures,
        });
    }
    Ok(out)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// CSV with header `scenario,rho,theta,replications,ari_mean,ari_se,failures`.
pub fn write_benchmark_csv<W: Write>(results: &[BenchmarkResult], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["scenario", "rho", "theta", "replications", "ari_mean", "ari_se", "failures"])?;
    for r in results {
        wtr.write_record(&[
            r.row.scenario.to_string(),
            r.row.rho.to_string(),
            r.row.theta.to_string(),
            r.replications.to_string(),
            format!("{:.6}", r.ari_mean),
            format!("{:.6}", r.ari_se),
            r.failures.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
