//! Posterior summaries with label-switching correction.
//!
//! A pivot draw is chosen by the largest mixture log-likelihood, its
//! clusters are ordered by the time average of the component-1 fitted
//! curve, and every draw is matched to the pivot by minimum total squared
//! distance between fitted curves (an assignment problem).

use std::io::Write;

use super::ChainTrace;
use crate::basis::DesignMatrix;
use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PosteriorSummary {
    pub k: usize,
    /// Modal canonical cluster (0-based) of every site.
    pub membership_mode: Vec<usize>,
    /// Posterior frequency of the modal cluster.
    pub membership_prob: Vec<f64>,
    pub alpha_mean: Vec<f64>,
    pub alpha_sd: Vec<f64>,
    pub beta_mean: Vec<Vec<f64>>,
    pub beta_sd: Vec<Vec<f64>>,
    pub sigma_mean: Vec<Vec<f64>>,
    pub sigma_sd: Vec<Vec<f64>>,
    pub phi_mean: Vec<f64>,
    pub phi_sd: Vec<f64>,
    pub gamma_mean: Vec<f64>,
    pub gamma_sd: Vec<f64>,
    /// `curves[k][j][t] = x_t' mean(beta_kj)`.
    pub curves: Vec<Vec<Vec<f64>>>,
    /// `relabel[d][k]` is the canonical label of chain cluster `k` in draw `d`.
    pub relabel: Vec<Vec<usize>>,
}

fn draw_curves(beta: &[Vec<f64>], design: &DesignMatrix) -> Vec<Vec<f64>> {
    let tl = design.t_len();
    beta.iter()
        .map(|b| {
            (0..design.q())
                .flat_map(|j| (0..tl).map(move |t| design.fitted(b, j, t)))
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of rows to columns of a square cost matrix
/// (Hungarian method with potentials). Returns `col[row]`.
fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[p[j] - 1] = j - 1;
    }
    col
}

fn mean_sd(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Relabels every stored draw into canonical labels and summarizes.
pub fn summarize(trace: &ChainTrace, design: &DesignMatrix) -> Result<PosteriorSummary> {
    let draws = &trace.draws;
    if draws.is_empty() {
        return Err(Error::domain("cannot summarize an empty trace"));
    }
    let k = trace.k;
    let n = trace.n;
    let tl = design.t_len();
    let score = |d: &super::Draw| -> f64 {
        let la: Vec<f64> = d.alpha.iter().map(|a| a.ln()).collect();
        (0..n)
            .map(|i| {
                let terms: Vec<f64> = (0..k).map(|kk| la[kk] + d.loglik(i, kk)).collect();
                log_sum_exp(&terms)
            })
            .sum()
    };
    let mut pivot = 0;
    let mut best = f64::NEG_INFINITY;
    for (idx, d) in draws.iter().enumerate() {
        let s = score(d);
        if s > best || (best == f64::NEG_INFINITY && idx == 0) {
            best = s;
            pivot = idx;
        }
    }
    let betas = |d: &super::Draw| -> Vec<Vec<f64>> { d.clusters.iter().map(|c| c.beta.clone()).collect() };
    let pivot_curves = draw_curves(&betas(&draws[pivot]), design);
    let mut order: Vec<(f64, usize)> = pivot_curves
        .iter()
        .enumerate()
        .map(|(kk, c)| (c[..tl].iter().sum::<f64>() / tl as f64, kk))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut canon_of_pivot = vec![0; k];
    for (rank, &(_, kk)) in order.iter().enumerate() {
        canon_of_pivot[kk] = rank;
    }
    let relabel: Vec<Vec<usize>> = draws
        .iter()
        .map(|d| {
            let curves = draw_curves(&betas(d), design);
            let cost: Vec<Vec<f64>> = curves
                .iter()
                .map(|c| {
                    pivot_curves
                        .iter()
                        .map(|pc| c.iter().zip(pc).map(|(a, b)| (a - b) * (a - b)).sum())
                        .collect()
                })
                .collect();
            assignment(&cost).into_iter().map(|pk| canon_of_pivot[pk]).collect()
        })
        .collect();
    // `chain[d][canonical]` is the chain cluster carrying that label.
    let chain: Vec<Vec<usize>> = relabel
        .iter()
        .map(|perm| {
            let mut inv = vec![0; k];
            for (kk, &c) in perm.iter().enumerate() {
                inv[c] = kk;
            }
            inv
        })
        .collect();

    let mut counts = vec![vec![0usize; k]; n];
    for (d, perm) in draws.iter().zip(&relabel) {
        for i in 0..n {
            counts[i][perm[d.c[i]]] += 1;
        }
    }
    let mut membership_mode = Vec::with_capacity(n);
    let mut membership_prob = Vec::with_capacity(n);
    for row in &counts {
        let (mut arg, mut top) = (0, 0);
        for (kk, &c) in row.iter().enumerate() {
            if c > top {
                arg = kk;
                top = c;
            }
        }
        membership_mode.push(arg);
        membership_prob.push(top as f64 / draws.len() as f64);
    }

    let q = draws[0].clusters[0].sigma.len();
    let l = draws[0].clusters[0].beta.len();
    let at = |d: usize, c: usize| &draws[d].clusters[chain[d][c]];
    let nd = draws.len();
    let mut s = PosteriorSummary {
        k,
        membership_mode,
        membership_prob,
        alpha_mean: vec![],
        alpha_sd: vec![],
        beta_mean: vec![],
        beta_sd: vec![],
        sigma_mean: vec![],
        sigma_sd: vec![],
        phi_mean: vec![],
        phi_sd: vec![],
        gamma_mean: vec![],
        gamma_sd: vec![],
        curves: vec![],
        relabel: relabel.clone(),
    };
    for c in 0..k {
        let (m, sd) = mean_sd((0..nd).map(|d| draws[d].alpha[chain[d][c]]));
        s.alpha_mean.push(m);
        s.alpha_sd.push(sd);
        let (bm, bs): (Vec<f64>, Vec<f64>) = (0..l).map(|x| mean_sd((0..nd).map(|d| at(d, c).beta[x]))).unzip();
        let (sm, ss): (Vec<f64>, Vec<f64>) = (0..q).map(|j| mean_sd((0..nd).map(|d| at(d, c).sigma[j]))).unzip();
        let (pm, ps) = mean_sd((0..nd).map(|d| at(d, c).phi));
        let (gm, gs) = mean_sd((0..nd).map(|d| at(d, c).gamma));
        s.curves.push(
            (0..q)
                .map(|j| (0..tl).map(|t| design.fitted(&bm, j, t)).collect())
                .collect(),
        );
        s.beta_mean.push(bm);
        s.beta_sd.push(bs);
        s.sigma_mean.push(sm);
        s.sigma_sd.push(ss);
        s.phi_mean.push(pm);
        s.phi_sd.push(ps);
        s.gamma_mean.push(gm);
        s.gamma_sd.push(gs);
    }
    Ok(s)
}

/// Writes one row per stored draw and scalar parameter with header
/// `draw,block,cluster,index,value`. Clusters and indices are 1-based;
/// clusters use the canonical labels of `summary` when given.
pub fn write_trace_csv<W: Write>(trace: &ChainTrace, summary: Option<&PosteriorSummary>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["draw", "block", "cluster", "index", "value"])?;
    for (d, draw) in trace.draws.iter().enumerate() {
        let mut order: Vec<usize> = (0..trace.k).collect();
        if let Some(s) = summary {
            for (kk, &c) in s.relabel[d].iter().enumerate() {
                order[c] = kk;
            }
        }
        for (label, &kk) in order.iter().enumerate() {
            let p = &draw.clusters[kk];
            let mut rows: Vec<(&str, usize, f64)> = vec![("alpha", 1, draw.alpha[kk])];
            rows.extend(p.beta.iter().enumerate().map(|(x, &v)| ("beta", x + 1, v)));
            rows.extend(p.sigma.iter().enumerate().map(|(x, &v)| ("sigma", x + 1, v)));
            rows.push(("phi", 1, p.phi));
            rows.push(("gamma", 1, p.gamma));
            for (block, index, value) in rows {
                wtr.write_record(&[
                    (d + 1).to_string(),
                    block.to_string(),
                    (label + 1).to_string(),
                    index.to_string(),
                    value.to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
