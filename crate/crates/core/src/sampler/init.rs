//! Starting values for a chain.

use log::debug;
use rand::Rng;

use super::{GammaMode, ModelData, SamplerConfig};
use crate::basis::dot;
use crate::distributions::check_loss;
use crate::error::{Error, Result};
use crate::model::{ClusterParams, MixtureState};
use crate::qreg::fit_quantile;

/// How initial memberships are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum InitStrategy {
    /// k-means++ on standardized per-site quantile curves of both components.
    CurveKMeans,
    /// Equal-frequency bins of the per-site component-1 means.
    MeanQuantileBins,
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;
const POOLED_MAX_POINTS: usize = 5000;
const INIT_TOL: f64 = 1e-6;

/// Builds the initial state: memberships from `config.init`, pooled check
/// loss fits per cluster for `beta`, the AL-scale estimate (mean check loss)
/// for `sigma`, `phi = 0`, unit weights and uniform mixing weights.
pub fn initialize<R: Rng + ?Sized>(
    data: &ModelData,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<MixtureState> {
    let panel = data.panel;
    let n = panel.n();
    let k = config.k;
    let c = match config.init {
        InitStrategy::CurveKMeans => {
            let feats = curve_features(data);
            kmeans(&feats, k, rng)
        }
        InitStrategy::MeanQuantileBins => mean_bins(data, k),
    };
    let gamma = match config.gamma_mode {
        GammaMode::Fixed(g) => g,
        GammaMode::Sample(_) => 0.5,
    };
    let all: Vec<usize> = (0..n).collect();
    let mut clusters = Vec::with_capacity(k);
    for kk in 0..k {
        let sites: Vec<usize> = (0..n).filter(|&i| c[i] == kk).collect();
        let mut beta = Vec::with_capacity(data.design.num_coefficients());
        let mut sigma = Vec::with_capacity(2);
        for j in 0..2 {
            let coef = match pooled_fit(data, &sites, j) {
                Ok(b) => b,
                Err(e) => {
                    debug!("cluster {kk} component {j}: pooled fit failed ({e}); using all sites");
                    pooled_fit(data, &all, j)?
                }
            };
            sigma.push(mean_check_loss(data, &sites, j, &coef).unwrap_or_else(|| {
                mean_check_loss(data, &all, j, &coef).unwrap_or(1.0)
            }));
            beta.extend_from_slice(&coef);
        }
        clusters.push(ClusterParams {
            beta,
            sigma,
            phi: 0.0,
            gamma,
        });
    }
    Ok(MixtureState {
        alpha: vec![1.0 / k as f64; k],
        clusters,
        c,
        w: vec![1.0; n * 2 * data.t_len()],
    })
}

fn pooled_fit(data: &ModelData, sites: &[usize], j: usize) -> Result<Vec<f64>> {
    let tl = data.t_len();
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for &i in sites {
        for t in 0..tl {
            if data.panel.is_observed(i, j, t) {
                cells.push((i, t));
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Underdetermined {
            observed: 0,
            coefficients: data.design.row_width(),
        });
    }
    let stride = cells.len().div_ceil(POOLED_MAX_POINTS);
    let picked: Vec<(usize, usize)> = cells.into_iter().step_by(stride).collect();
    let y: Vec<f64> = picked
        .iter()
        .map(|&(i, t)| data.panel.observed_value(i, j, t))
        .collect();
    let rows: Vec<Vec<f64>> = picked.iter().map(|&(_, t)| data.design.row(t).to_vec()).collect();
    let mask = vec![true; y.len()];
    Ok(fit_quantile(&y, &mask, &rows, data.quant.p(j), INIT_TOL)?.beta_hat)
}

/// Mean check loss of the residuals, the maximum likelihood AL scale for a
/// fixed location.
fn mean_check_loss(data: &ModelData, sites: &[usize], j: usize, coef: &[f64]) -> Option<f64> {
    let p = data.quant.p(j);
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in sites {
        for t in 0..data.t_len() {
            if data.panel.is_observed(i, j, t) {
                sum += check_loss(data.panel.observed_value(i, j, t) - dot(data.design.row(t), coef), p);
                count += 1;
            }
        }
    }
    let s = sum / count as f64;
    (count > 0 && s > 1e-12 && s.is_finite()).then_some(s)
}

/// Per-site fitted quantile curves of both components, centred and scaled
/// per component.
fn curve_features(data: &ModelData) -> Vec<Vec<f64>> {
    let panel = data.panel;
    let tl = data.t_len();
    let mut feats = vec![vec![0.0; 2 * tl]; panel.n()];
    for j in 0..2 {
        let p = data.quant.p(j);
        let pooled: Vec<f64> = (0..panel.n())
            .flat_map(|i| (0..tl).filter_map(move |t| panel.value(i, j, t)))
            .collect();
        let fallback = empirical_quantile(pooled, p).unwrap_or(0.0);
        for (i, f) in feats.iter_mut().enumerate() {
            let (y, mask) = panel.series(i, j);
            let curve: Vec<f64> = match fit_quantile(y, mask, data.design.rows(), p, INIT_TOL) {
                Ok(fit) => (0..tl).map(|t| dot(data.design.row(t), &fit.beta_hat)).collect(),
                Err(_) => {
                    let obs: Vec<f64> = (0..tl).filter_map(|t| panel.value(i, j, t)).collect();
                    vec![empirical_quantile(obs, p).unwrap_or(fallback); tl]
                }
            };
            f[j * tl..(j + 1) * tl].copy_from_slice(&curve);
        }
        let vals: Vec<f64> = feats.iter().flat_map(|f| f[j * tl..(j + 1) * tl].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for f in feats.iter_mut() {
            for v in &mut f[j * tl..(j + 1) * tl] {
                *v = (*v - m) / sd;
            }
        }
    }
    feats
}

fn empirical_quantile(mut xs: Vec<f64>, p: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let idx = ((p * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
    Some(xs[idx])
}

fn mean_bins(data: &ModelData, k: usize) -> Vec<usize> {
    let panel = data.panel;
    let n = panel.n();
    let means: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let obs: Vec<f64> = (0..data.t_len()).filter_map(|t| panel.value(i, 0, t)).collect();
            (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
        })
        .collect();
    let known: Vec<f64> = means.iter().flatten().copied().collect();
    let global = if known.is_empty() {
        0.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let mut order: Vec<(f64, usize)> = means
        .iter()
        .enumerate()
        .map(|(i, m)| (m.unwrap_or(global), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut c = vec![0; n];
    for (rank, &(_, i)) in order.iter().enumerate() {
        c[i] = rank * k / n.max(1);
    }
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Seeded k-means++ with Lloyd iterations; the lowest-inertia restart wins.
fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    if n <= k {
        return (0..n).collect();
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, labels) = lloyd(points, seed_centers(points, k, rng));
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn seed_centers<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (f64, Vec<usize>) {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            dists[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // Refill empty clusters with the worst-fitting points.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for e in 0..k {
            if counts[e] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = e;
                    counts[e] = 1;
                    dists[i] = 0.0;
                    changed = true;
                }
            }
        }
        centers = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (c, x) in centers[l].iter_mut().zip(p) {
                *c += x;
            }
        }
        for (c, &m) in centers.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= m.max(1) as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    (inertia, labels)
}
