//! Full-conditional updates, one function per parameter block.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelData, Prior, UpdateStats};
use crate::distributions::{
    dirichlet_sample, downton_logpdf_unchecked, gig_log_kernel, invgamma_log_kernel,
    invgamma_sample, invgauss_sample_unchecked, normalize_log_weights,
};
use crate::error::{Error, Result};
use crate::model::{
    conditional_loglik_site_unchecked, latent_logprior_site, point_latent_logprior, point_loglik,
    ClusterParams, MixtureState,
};

pub(crate) const W_MIN: f64 = 1e-10;
pub(crate) const W_MAX: f64 = 1e10;
const RESIDUAL_CLAMP: f64 = 1e-8;
pub(crate) const GAMMA_MAX: f64 = 1.0 - 1e-6;

/// Accept with probability `min(1, exp(log_ratio))`; NaN ratios reject.
fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R, stats: &mut UpdateStats) -> bool {
    let prob = if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.min(0.0).exp()
    };
    let u: f64 = rng.random();
    let accepted = u < prob;
    stats.record(prob, accepted);
    accepted
}

fn members(state: &MixtureState, k: usize) -> Vec<usize> {
    (0..state.c.len()).filter(|&i| state.c[i] == k).collect()
}

fn local_target(data: &ModelData, i: usize, t: usize, params: &ClusterParams, w_i: &[f64]) -> f64 {
    point_latent_logprior(data.panel, i, t, w_i, params.gamma)
        + point_loglik(data.panel, i, t, params, w_i, data.quant, data.design)
}

/// Independence MH for every latent weight at an observed cell. The
/// proposal is the GIG(1/2, omega^2/4, r^2/(sigma^2 omega^2)) law of `w`,
/// i.e. `1/w` inverse Gaussian, which is the exact full conditional when
/// the weights are independent and the Gaussian layer is uncorrelated.
pub fn update_weights<R: Rng + ?Sized>(
    state: &mut MixtureState,
    data: &ModelData,
    rng: &mut R,
) -> UpdateStats {
    let panel = data.panel;
    let tl = data.t_len();
    let per = 2 * tl;
    let mut stats = UpdateStats::default();
    for i in 0..panel.n() {
        let params = &state.clusters[state.c[i]];
        let w_i = &mut state.w[i * per..(i + 1) * per];
        for t in 0..tl {
            for j in 0..2 {
                if !panel.is_observed(i, j, t) {
                    continue;
                }
                let sig = params.sigma[j];
                let om2 = data.quant.omega2(j);
                let om = om2.sqrt();
                let r = panel.observed_value(i, j, t) - data.design.fitted(&params.beta, j, t);
                let eps = RESIDUAL_CLAMP * sig * om;
                let rc = if r.abs() < eps {
                    debug!("residual {r:e} at ({i}, {j}, {t}) clamped to {eps:e}");
                    eps
                } else {
                    r.abs()
                };
                let a = 0.25 * om2;
                let b = (rc / (sig * om)).powi(2);
                let inv = invgauss_sample_unchecked(sig * om2 / (2.0 * rc), a, rng);
                let prop = (1.0 / inv).clamp(W_MIN, W_MAX);
                let idx = j * tl + t;
                let cur = w_i[idx];
                let cur_target = local_target(data, i, t, params, w_i);
                w_i[idx] = prop;
                let prop_target = local_target(data, i, t, params, w_i);
                let log_ratio = (prop_target - gig_log_kernel(prop, 0.5, a, b))
                    - (cur_target - gig_log_kernel(cur, 0.5, a, b));
                if !mh_accept(log_ratio, rng, &mut stats) {
                    w_i[idx] = cur;
                }
            }
        }
    }
    stats
}

/// Membership probabilities of site `i`, proportional to
/// `alpha_k f(y_i | w_i, psi_k) e(w_i; gamma_k)` and normalized in the log
/// domain.
pub fn membership_probabilities(state: &MixtureState, data: &ModelData, i: usize) -> Result<Vec<f64>> {
    let tl = data.t_len();
    let w_i = state.site_weights(i, 2, tl);
    let mut lp: Vec<f64> = state
        .clusters
        .iter()
        .zip(&state.alpha)
        .map(|(params, &a)| {
            a.ln()
                + conditional_loglik_site_unchecked(data.panel, i, params, w_i, data.quant, data.design)
                + latent_logprior_site(data.panel, i, w_i, params.gamma)
        })
        .collect();
    let raw = lp.clone();
    let lse = normalize_log_weights(&mut lp);
    if !lse.is_finite() {
        return Err(Error::numerical(format!(
            "site {i}: no cluster has a finite membership log-probability ({raw:?})"
        )));
    }
    Ok(lp)
}

/// Draws every membership from its discrete full conditional.
pub fn update_memberships<R: Rng + ?Sized>(
    state: &mut MixtureState,
    data: &ModelData,
    rng: &mut R,
) -> Result<()> {
    for i in 0..data.panel.n() {
        let probs = membership_probabilities(state, data, i)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (k, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = Some(k);
                break;
            }
        }
        // Rounding can leave `acc` slightly below one.
        state.c[i] = chosen.unwrap_or_else(|| {
            probs.iter().rposition(|&p| p > 0.0).expect("normalized probabilities")
        });
    }
    Ok(())
}

/// Mixing weights from `Dirichlet(a + n_k)`.
pub fn update_alpha<R: Rng + ?Sized>(state: &mut MixtureState, prior: &Prior, rng: &mut R) -> Result<()> {
    let a: Vec<f64> = state
        .counts()
        .iter()
        .map(|&n| prior.dirichlet + n as f64)
        .collect();
    state.alpha = dirichlet_sample(&a, rng)?;
    Ok(())
}

/// Precision matrix and right-hand side of the Gaussian full conditional of
/// `beta_k`.
fn beta_system(state: &MixtureState, k: usize, data: &ModelData, prior: &Prior) -> (DMatrix<f64>, DVector<f64>) {
    let design = data.design;
    let panel = data.panel;
    let tl = data.t_len();
    let width = design.row_width();
    let l = 2 * width;
    let mut a = DMatrix::<f64>::zeros(l, l);
    let mut rhs = DVector::<f64>::zeros(l);
    for d in 0..l {
        a[(d, d)] = 1.0 / prior.beta_var;
        rhs[d] = prior.beta_mean / prior.beta_var;
    }
    let nz: Vec<Vec<(usize, f64)>> = design
        .rows()
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(c, v)| (c, *v))
                .collect()
        })
        .collect();
    let params = &state.clusters[k];
    let phi = params.phi;
    for i in (0..panel.n()).filter(|&i| state.c[i] == k) {
        let w_i = state.site_weights(i, 2, tl);
        for t in 0..tl {
            let obs = [panel.is_observed(i, 0, t), panel.is_observed(i, 1, t)];
            let mut s = [0.0; 2];
            let mut u = [0.0; 2];
            for j in 0..2 {
                if obs[j] {
                    let w = w_i[j * tl + t];
                    let sig = params.sigma[j];
                    s[j] = sig * data.quant.omega(j) * w.sqrt();
                    u[j] = panel.observed_value(i, j, t) - sig * data.quant.theta(j) * w;
                }
            }
            let prec = match obs {
                [true, true] => {
                    let d = 1.0 - phi * phi;
                    let off = -phi / (s[0] * s[1] * d);
                    [[1.0 / (s[0] * s[0] * d), off], [off, 1.0 / (s[1] * s[1] * d)]]
                }
                [true, false] => [[1.0 / (s[0] * s[0]), 0.0], [0.0, 0.0]],
                [false, true] => [[0.0, 0.0], [0.0, 1.0 / (s[1] * s[1])]],
                [false, false] => continue,
            };
            for j in 0..2 {
                for m in 0..2 {
                    let pjm = prec[j][m];
                    if pjm == 0.0 {
                        continue;
                    }
                    for &(ca, xa) in &nz[t] {
                        rhs[j * width + ca] += pjm * u[m] * xa;
                        for &(cb, xb) in &nz[t] {
                            a[(j * width + ca, m * width + cb)] += pjm * xa * xb;
                        }
                    }
                }
            }
        }
    }
    (a, rhs)
}

/// Mean and covariance of the Gaussian full conditional of `beta_k`.
pub fn beta_posterior(
    state: &MixtureState,
    k: usize,
    data: &ModelData,
    prior: &Prior,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (a, rhs) = beta_system(state, k, data, prior);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical(format!("posterior precision of cluster {k} is not SPD")))?;
    let mean = chol.solve(&rhs);
    Ok((mean.iter().copied().collect(), chol.inverse()))
}

/// Exact Gaussian draw of `beta_k`.
pub fn update_beta<R: Rng + ?Sized>(
    state: &mut MixtureState,
    k: usize,
    data: &ModelData,
    prior: &Prior,
    rng: &mut R,
) -> Result<()> {
    let (a, rhs) = beta_system(state, k, data, prior);
    let l = rhs.len();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical(format!("posterior precision of cluster {k} is not SPD")))?;
    let mean = chol.solve(&rhs);
    let z = DVector::<f64>::from_fn(l, |_, _| StandardNormal.sample(rng));
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::numerical(format!("singular Cholesky factor in cluster {k}")))?;
    state.clusters[k].beta = (mean + dev).iter().copied().collect();
    Ok(())
}

/// Log full conditional of `sigma_kj` at `sig_new`, holding `v = sigma w`
/// fixed at its current value (the latent weights rescale with sigma).
#[allow(clippy::too_many_arguments)]
fn sigma_target(
    state: &MixtureState,
    k: usize,
    j: usize,
    sites: &[usize],
    sig_new: f64,
    data: &ModelData,
    prior: &Prior,
    scratch: &mut [f64],
) -> f64 {
    let tl = data.t_len();
    let mut params = state.clusters[k].clone();
    let ratio = params.sigma[j] / sig_new;
    params.sigma[j] = sig_new;
    let ln_sig = sig_new.ln();
    let mut total = invgamma_log_kernel(sig_new, prior.sigma_shape, prior.sigma_scale);
    for &i in sites {
        scratch.copy_from_slice(state.site_weights(i, 2, tl));
        for t in 0..tl {
            if data.panel.is_observed(i, j, t) {
                scratch[j * tl + t] *= ratio;
            }
        }
        for t in 0..tl {
            if data.panel.is_observed(i, j, t) {
                total += local_target(data, i, t, &params, scratch) - ln_sig;
            }
        }
    }
    total
}

/// Independence MH for the AL scales of cluster `k` with the inverse gamma
/// proposal that is exact when `phi = 0` and `gamma = 0`.
pub fn update_sigma<R: Rng + ?Sized>(
    state: &mut MixtureState,
    k: usize,
    data: &ModelData,
    prior: &Prior,
    rng: &mut R,
) -> UpdateStats {
    let tl = data.t_len();
    let sites = members(state, k);
    let mut scratch = vec![0.0; 2 * tl];
    let mut stats = UpdateStats::default();
    for j in 0..2 {
        let sig = state.clusters[k].sigma[j];
        let theta = data.quant.theta(j);
        let om2 = data.quant.omega2(j);
        let beta = &state.clusters[k].beta;
        let mut n_obs = 0usize;
        let mut ss = 0.0;
        for &i in &sites {
            let w_i = state.site_weights(i, 2, tl);
            for t in 0..tl {
                if data.panel.is_observed(i, j, t) {
                    let v = sig * w_i[j * tl + t];
                    let e = data.panel.observed_value(i, j, t) - data.design.fitted(beta, j, t) - theta * v;
                    ss += v + e * e / (2.0 * om2 * v);
                    n_obs += 1;
                }
            }
        }
        let shape = prior.sigma_shape + 1.5 * n_obs as f64;
        let scale = prior.sigma_scale + ss;
        let prop = match invgamma_sample(shape, scale, rng) {
            Ok(x) if x > 0.0 && x.is_finite() => x,
            _ => {
                stats.record(0.0, false);
                continue;
            }
        };
        let cur_t = sigma_target(state, k, j, &sites, sig, data, prior, &mut scratch);
        let prop_t = sigma_target(state, k, j, &sites, prop, data, prior, &mut scratch);
        let log_ratio = (prop_t - invgamma_log_kernel(prop, shape, scale))
            - (cur_t - invgamma_log_kernel(sig, shape, scale));
        if mh_accept(log_ratio, rng, &mut stats) {
            let ratio = sig / prop;
            state.clusters[k].sigma[j] = prop;
            let per = 2 * tl;
            for &i in &sites {
                for t in 0..tl {
                    if data.panel.is_observed(i, j, t) {
                        let w = &mut state.w[i * per + j * tl + t];
                        *w = (*w * ratio).clamp(W_MIN, W_MAX);
                    }
                }
            }
        }
    }
    stats
}

/// Gaussian-layer log-likelihood at the both-observed times of the sites
/// selected by `filter`, with cluster parameters `clusters`.
fn phi_loglik(state: &MixtureState, clusters: &[ClusterParams], data: &ModelData, filter: Option<usize>) -> f64 {
    let tl = data.t_len();
    let panel = data.panel;
    let mut total = 0.0;
    for i in 0..panel.n() {
        let c = state.c[i];
        if filter.is_some_and(|k| k != c) {
            continue;
        }
        let w_i = state.site_weights(i, 2, tl);
        for t in 0..tl {
            if panel.is_observed(i, 0, t) && panel.is_observed(i, 1, t) {
                total += point_loglik(panel, i, t, &clusters[c], w_i, data.quant, data.design);
            }
        }
    }
    total
}

/// Uniform window proposal on `[lo, hi]` with half width `r`; returns the
/// proposal and the log Hastings correction `log(width(cur) / width(prop))`.
fn window_proposal<R: Rng + ?Sized>(cur: f64, r: f64, lo: f64, hi: f64, rng: &mut R) -> (f64, f64) {
    let a = (cur - r).max(lo);
    let b = (cur + r).min(hi);
    let u: f64 = rng.random();
    let prop = a + u * (b - a);
    let back = (prop + r).min(hi) - (prop - r).max(lo);
    (prop, (b - a).ln() - back.ln())
}

fn phi_step<R: Rng + ?Sized>(
    state: &mut MixtureState,
    target: Option<usize>,
    data: &ModelData,
    window: f64,
    rng: &mut R,
) -> UpdateStats {
    let mut stats = UpdateStats::default();
    let cur = match target {
        Some(k) => state.clusters[k].phi,
        None => state.clusters[0].phi,
    };
    let (prop, hastings) = window_proposal(cur, window, -1.0, 1.0, rng);
    if prop.abs() >= 1.0 {
        stats.record(0.0, false);
        return stats;
    }
    let mut trial = state.clusters.clone();
    for (k, p) in trial.iter_mut().enumerate() {
        if target.is_none_or(|t| t == k) {
            p.phi = prop;
        }
    }
    let log_ratio = phi_loglik(state, &trial, data, target) - phi_loglik(state, &state.clusters, data, target)
        + hastings;
    if mh_accept(log_ratio, rng, &mut stats) {
        state.clusters = trial;
    }
    stats
}

/// Random-walk MH for `phi_k` with a boundary-corrected uniform window and a
/// `U(-1, 1)` prior.
pub fn update_phi<R: Rng + ?Sized>(
    state: &mut MixtureState,
    k: usize,
    data: &ModelData,
    window: f64,
    rng: &mut R,
) -> UpdateStats {
    phi_step(state, Some(k), data, window, rng)
}

/// One MH step for a correlation shared by all clusters.
pub fn update_phi_tied<R: Rng + ?Sized>(
    state: &mut MixtureState,
    data: &ModelData,
    window: f64,
    rng: &mut R,
) -> UpdateStats {
    phi_step(state, None, data, window, rng)
}

fn gamma_loglik(state: &MixtureState, k: usize, data: &ModelData, gamma: f64) -> f64 {
    let tl = data.t_len();
    let panel = data.panel;
    let mut total = 0.0;
    for i in (0..panel.n()).filter(|&i| state.c[i] == k) {
        let w_i = state.site_weights(i, 2, tl);
        for t in 0..tl {
            if panel.is_observed(i, 0, t) && panel.is_observed(i, 1, t) {
                total += downton_logpdf_unchecked(w_i[t], w_i[tl + t], gamma);
            }
        }
    }
    total
}

/// Random-walk MH for `gamma_k` on `[0, 1)` with a `U(0, 1)` prior.
pub fn update_gamma<R: Rng + ?Sized>(
    state: &mut MixtureState,
    k: usize,
    data: &ModelData,
    window: f64,
    rng: &mut R,
) -> UpdateStats {
    let mut stats = UpdateStats::default();
    let cur = state.clusters[k].gamma;
    let (prop, hastings) = window_proposal(cur, window, 0.0, GAMMA_MAX, rng);
    let log_ratio = gamma_loglik(state, k, data, prop) - gamma_loglik(state, k, data, cur) + hastings;
    if mh_accept(log_ratio, rng, &mut stats) {
        state.clusters[k].gamma = prop;
    }
    stats
}
