#![allow(dead_code)]

use biquant::qreg::check_objective;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Numerical CDF of a positive density given by its unnormalized log, built
/// by trapezoid integration on a log-spaced grid.
pub struct GridCdf {
    log_x: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridCdf {
    pub fn new(log_kernel: impl Fn(f64) -> f64, log_lo: f64, log_hi: f64, n: usize) -> Self {
        let h = (log_hi - log_lo) / n as f64;
        let log_x: Vec<f64> = (0..=n).map(|i| log_lo + i as f64 * h).collect();
        let dens: Vec<f64> = log_x.iter().map(|&s| (log_kernel(s.exp()) + s).exp()).collect();
        let mut cdf = vec![0.0; n + 1];
        for i in 1..=n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
        }
        let total = cdf[n];
        for c in &mut cdf {
            *c /= total;
        }
        Self { log_x, cdf }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let s = x.ln();
        let n = self.log_x.len() - 1;
        if s <= self.log_x[0] {
            return 0.0;
        }
        if s >= self.log_x[n] {
            return 1.0;
        }
        let h = self.log_x[1] - self.log_x[0];
        let i = (((s - self.log_x[0]) / h) as usize).min(n - 1);
        let frac = (s - self.log_x[i]) / h;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }
}

/// Batch-means standard error of the mean of a correlated series.
pub fn batch_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let (_, v) = mean_var(&means);
    (v / batches as f64).sqrt()
}

/// Exhaustive search over the vertices of the check-loss objective: every
/// subset of `m` observations whose rows are linearly independent.
pub fn brute_force_objective(y: &[f64], rows: &[Vec<f64>], p: f64) -> f64 {
    let n = y.len();
    let m = rows[0].len();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let a = DMatrix::from_fn(m, m, |r, c| rows[idx[r]][c]);
        let b = DVector::from_iterator(m, idx.iter().map(|&i| y[i]));
        if a.determinant().abs() > 1e-10 {
            if let Some(beta) = a.lu().solve(&b) {
                let beta: Vec<f64> = beta.iter().copied().collect();
                best = best.min(check_objective(y, &vec![true; n], rows, &beta, p));
            }
        }
        // next combination
        let mut k = m;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] < n - m + k {
                idx[k] += 1;
                for l in k + 1..m {
                    idx[l] = idx[l - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Pair-counting form: agreements and disagreements over all pairs.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_a * only_b);
    let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// All set partitions of `n` items as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for _ in 1..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                let max = *p.iter().max().unwrap();
                (0..=max + 1).map(move |l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}
