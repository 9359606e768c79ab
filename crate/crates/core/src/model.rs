//! The hierarchical mixture model: panel container, the Gaussian
//! observation layer given latent weights, the composite AL likelihood
//! obtained by integrating the weights out, and forward simulation.
//!
//! For a site in cluster `k` at time `t`, component `j` follows
//!
//! ```text
//! y_jt = x_t' beta_kj + sigma_kj theta_j w_jt + sigma_kj omega_j sqrt(w_jt) eps_jt
//! ```
//!
//! with `(eps_1t, eps_2t)` standard bivariate normal with correlation
//! `phi_k` and `(w_1t, w_2t)` Downton bivariate exponential with parameter
//! `gamma_k`. Each `y_jt` is marginally AL with location `x_t' beta_kj`,
//! scale `sigma_kj` and quantile level `p_j`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::DesignMatrix;
use crate::distributions::{
    al_logpdf_unchecked, downton_logpdf_unchecked, downton_sample, QuantileSpec,
};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Optional per-site metadata carried through to output tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteMeta {
    pub id: String,
    pub lon: Option<f64>,
    pub lat: Option<f64>,
}

/// `n` sites by `q` components by `T` times, with an observation mask.
/// Values are stored with time innermost, so each `(site, component)` series
/// is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    n: usize,
    q: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    observed: Vec<bool>,
    sites: Vec<SiteMeta>,
}

impl Panel {
    pub fn new(
        q: usize,
        times: Vec<f64>,
        values: Vec<f64>,
        observed: Vec<bool>,
        sites: Vec<SiteMeta>,
    ) -> Result<Self> {
        let n = sites.len();
        let t_len = times.len();
        if q == 0 || t_len == 0 {
            return Err(Error::domain("panel needs at least one component and one time"));
        }
        let size = n * q * t_len;
        if values.len() != size || observed.len() != size {
            return Err(Error::domain(format!(
                "panel storage has {} values and {} mask entries, expected {size}",
                values.len(),
                observed.len()
            )));
        }
        if let Some(k) = (0..size).find(|&k| observed[k] && !values[k].is_finite()) {
            return Err(Error::domain(format!("observed value #{k} is not finite")));
        }
        Ok(Self {
            n,
            q,
            times,
            values,
            observed,
            sites,
        })
    }

    /// Panel with generated site ids `s1, s2, ...`.
    pub fn from_arrays(q: usize, times: Vec<f64>, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        let per_site = q * times.len();
        if per_site == 0 || !values.len().is_multiple_of(per_site) {
            return Err(Error::domain("value count is not a multiple of q * T"));
        }
        let n = values.len() / per_site;
        let sites = (0..n)
            .map(|i| SiteMeta {
                id: format!("s{}", i + 1),
                ..Default::default()
            })
            .collect();
        Self::new(q, times, values, observed, sites)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn t_len(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sites(&self) -> &[SiteMeta] {
        &self.sites
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, t: usize) -> usize {
        (i * self.q + j) * self.times.len() + t
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize, t: usize) -> bool {
        self.observed[self.idx(i, j, t)]
    }

    /// The value at `(i, j, t)` or `None` when masked.
    #[inline]
    pub fn value(&self, i: usize, j: usize, t: usize) -> Option<f64> {
        let k = self.idx(i, j, t);
        self.observed[k].then(|| self.values[k])
    }

    /// Observed value; masked cells must never reach this accessor.
    #[inline]
    pub(crate) fn observed_value(&self, i: usize, j: usize, t: usize) -> f64 {
        let k = self.idx(i, j, t);
        debug_assert!(self.observed[k], "masked cell ({i}, {j}, {t}) was read");
        self.values[k]
    }

    /// Values and mask of one `(site, component)` series. Masked slots hold
    /// unspecified numbers.
    pub fn series(&self, i: usize, j: usize) -> (&[f64], &[bool]) {
        let a = self.idx(i, j, 0);
        let b = a + self.times.len();
        (&self.values[a..b], &self.observed[a..b])
    }

    pub fn observed_count(&self, i: usize, j: usize) -> usize {
        self.series(i, j).1.iter().filter(|&&o| o).count()
    }

    pub fn mask(&self) -> &[bool] {
        &self.observed
    }

    /// Fraction of masked cells of component `j` across the whole panel.
    pub fn missing_fraction(&self, j: usize) -> f64 {
        let total = self.n * self.times.len();
        if total == 0 {
            return 0.0;
        }
        let obs: usize = (0..self.n).map(|i| self.observed_count(i, j)).sum();
        1.0 - obs as f64 / total as f64
    }

    /// Subset of sites, in the given order.
    pub fn select_sites(&self, keep: &[usize]) -> Panel {
        let per = self.q * self.times.len();
        let mut values = Vec::with_capacity(keep.len() * per);
        let mut observed = Vec::with_capacity(keep.len() * per);
        for &i in keep {
            values.extend_from_slice(&self.values[i * per..(i + 1) * per]);
            observed.extend_from_slice(&self.observed[i * per..(i + 1) * per]);
        }
        Panel {
            n: keep.len(),
            q: self.q,
            times: self.times.clone(),
            values,
            observed,
            sites: keep.iter().map(|&i| self.sites[i].clone()).collect(),
        }
    }
}

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ClusterParams {
    /// Stacked regression coefficients, one block of `row_width` per component.
    pub beta: Vec<f64>,
    /// AL scale of each component.
    pub sigma: Vec<f64>,
    /// Correlation of the Gaussian layer.
    pub phi: f64,
    /// Dependence of the latent weights.
    pub gamma: f64,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::domain(format!("scales must be positive: {:?}", self.sigma)));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(Error::domain(format!("phi must lie in (-1, 1), got {}", self.phi)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::domain(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// One full state of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub alpha: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
    /// Zero-based memberships.
    pub c: Vec<usize>,
    /// Latent weights in panel layout (`n x q x T`, time innermost); only
    /// entries at observed cells are meaningful.
    pub w: Vec<f64>,
}

impl MixtureState {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &c in &self.c {
            counts[c] += 1;
        }
        counts
    }

    /// Weights of site `i` in `q x T` layout.
    pub fn site_weights(&self, i: usize, q: usize, t_len: usize) -> &[f64] {
        let per = q * t_len;
        &self.w[i * per..(i + 1) * per]
    }
}

pub(crate) fn require_bivariate(q: usize) -> Result<()> {
    if q != 2 {
        return Err(Error::domain(format!(
            "the dependence layer is defined for q = 2 components, got q = {q}"
        )));
    }
    Ok(())
}

/// Log density of the Gaussian layer at one time point, restricted to the
/// observed components. `e` are residuals after removing the skew term and
/// `s` the conditional standard deviations.
#[inline]
pub(crate) fn gaussian_layer_logpdf(e: [f64; 2], s: [f64; 2], obs: [bool; 2], phi: f64) -> f64 {
    match obs {
        [true, true] => {
            let z1 = e[0] / s[0];
            let z2 = e[1] / s[1];
            let one_m = 1.0 - phi * phi;
            -LN_2PI - s[0].ln() - s[1].ln() - 0.5 * one_m.ln()
                - (z1 * z1 - 2.0 * phi * z1 * z2 + z2 * z2) / (2.0 * one_m)
        }
        [true, false] => univariate(e[0], s[0]),
        [false, true] => univariate(e[1], s[1]),
        [false, false] => 0.0,
    }
}

#[inline]
fn univariate(e: f64, s: f64) -> f64 {
    let z = e / s;
    -0.5 * LN_2PI - s.ln() - 0.5 * z * z
}

/// Gaussian-layer log density of site `i` at time `t` under `params` with
/// weights `w_i` (`q x T` layout).
#[inline]
pub(crate) fn point_loglik(
    panel: &Panel,
    i: usize,
    t: usize,
    params: &ClusterParams,
    w_i: &[f64],
    quant: &QuantileSpec,
    design: &DesignMatrix,
) -> f64 {
    let t_len = panel.t_len();
    let mut e = [0.0; 2];
    let mut s = [1.0; 2];
    let mut obs = [false; 2];
    for j in 0..2 {
        if panel.is_observed(i, j, t) {
            obs[j] = true;
            let w = w_i[j * t_len + t];
            let sig = params.sigma[j];
            e[j] = panel.observed_value(i, j, t)
                - design.fitted(&params.beta, j, t)
                - sig * quant.theta(j) * w;
            s[j] = sig * quant.omega(j) * w.sqrt();
        }
    }
    gaussian_layer_logpdf(e, s, obs, params.phi)
}

/// Log prior of the latent weights at one time point: Downton when both
/// components are observed, the unit-exponential marginal when only one is.
#[inline]
pub(crate) fn point_latent_logprior(panel: &Panel, i: usize, t: usize, w_i: &[f64], gamma: f64) -> f64 {
    let t_len = panel.t_len();
    match (panel.is_observed(i, 0, t), panel.is_observed(i, 1, t)) {
        (true, true) => downton_logpdf_unchecked(w_i[t], w_i[t_len + t], gamma),
        (true, false) => -w_i[t],
        (false, true) => -w_i[t_len + t],
        (false, false) => 0.0,
    }
}

/// Log of the data factor of site `i` given its latent weights: the sum over
/// time of bivariate Gaussian log densities with mean
/// `X_t' beta + D Theta w_t` and covariance `W_t^{1/2} D Omega R(phi) Omega D W_t^{1/2}`,
/// marginalized to the observed components.
pub fn conditional_loglik_site(
    panel: &Panel,
    i: usize,
    params: &ClusterParams,
    w_i: &[f64],
    quant: &QuantileSpec,
    design: &DesignMatrix,
) -> Result<f64> {
    require_bivariate(panel.q())?;
    check_shapes(panel, params, w_i, quant, design)?;
    for j in 0..2 {
        for t in 0..panel.t_len() {
            if panel.is_observed(i, j, t) && !(w_i[j * panel.t_len() + t] > 0.0) {
                return Err(Error::domain(format!(
                    "latent weight at ({i}, {j}, {t}) must be positive"
                )));
            }
        }
    }
    Ok(conditional_loglik_site_unchecked(panel, i, params, w_i, quant, design))
}

pub(crate) fn conditional_loglik_site_unchecked(
    panel: &Panel,
    i: usize,
    params: &ClusterParams,
    w_i: &[f64],
    quant: &QuantileSpec,
    design: &DesignMatrix,
) -> f64 {
    (0..panel.t_len())
        .map(|t| point_loglik(panel, i, t, params, w_i, quant, design))
        .sum()
}

/// Log prior density of site `i`'s latent weights under dependence `gamma`.
pub fn latent_logprior_site(panel: &Panel, i: usize, w_i: &[f64], gamma: f64) -> f64 {
    (0..panel.t_len())
        .map(|t| point_latent_logprior(panel, i, t, w_i, gamma))
        .sum()
}

fn check_shapes(
    panel: &Panel,
    params: &ClusterParams,
    w_i: &[f64],
    quant: &QuantileSpec,
    design: &DesignMatrix,
) -> Result<()> {
    params.validate()?;
    if quant.len() != panel.q() || params.sigma.len() != panel.q() {
        return Err(Error::domain("component count mismatch"));
    }
    if design.t_len() != panel.t_len() || params.beta.len() != design.num_coefficients() {
        return Err(Error::domain("design does not match panel or coefficient vector"));
    }
    if w_i.len() != panel.q() * panel.t_len() {
        return Err(Error::domain("weight vector must have q * T entries"));
    }
    Ok(())
}

/// Composite log-likelihood of site `i`: the sum over observed cells of the
/// AL marginal log densities. Does not depend on `phi` or `gamma`.
pub fn composite_marginal_loglik_site(
    panel: &Panel,
    i: usize,
    params: &ClusterParams,
    quant: &QuantileSpec,
    design: &DesignMatrix,
) -> f64 {
    let mut total = 0.0;
    for j in 0..panel.q() {
        let (sigma, p) = (params.sigma[j], quant.p(j));
        let coef = design.component_coefficients(&params.beta, j);
        let (vals, mask) = panel.series(i, j);
        for t in 0..panel.t_len() {
            if mask[t] {
                let fit = crate::basis::dot(design.row(t), coef);
                total += al_logpdf_unchecked(vals[t] - fit, sigma, p);
            }
        }
    }
    total
}

/// One simulated site: values and mask in `q x T` layout, plus the latent
/// weights used to generate them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSite {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub weights: Vec<f64>,
}

/// Draws one site from the generative model; each cell is masked
/// independently with probability `missing_prob`.
pub fn simulate_site<R: Rng + ?Sized>(
    params: &ClusterParams,
    quant: &QuantileSpec,
    design: &DesignMatrix,
    rng: &mut R,
    missing_prob: f64,
) -> Result<SimulatedSite> {
    require_bivariate(design.q())?;
    params.validate()?;
    if !(0.0..1.0).contains(&missing_prob) {
        return Err(Error::domain(format!("missing_prob must lie in [0, 1), got {missing_prob}")));
    }
    let t_len = design.t_len();
    let mut values = vec![0.0; 2 * t_len];
    let mut observed = vec![true; 2 * t_len];
    let mut weights = vec![0.0; 2 * t_len];
    let rho = params.phi;
    let tail = (1.0 - rho * rho).sqrt();
    for t in 0..t_len {
        let (w1, w2) = downton_sample(params.gamma, rng);
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        let eps = [n1, rho * n1 + tail * n2];
        for (j, w) in [w1, w2].into_iter().enumerate() {
            let sig = params.sigma[j];
            values[j * t_len + t] = design.fitted(&params.beta, j, t)
                + sig * quant.theta(j) * w
                + sig * quant.omega(j) * w.sqrt() * eps[j];
            weights[j * t_len + t] = w;
        }
    }
    if missing_prob > 0.0 {
        for o in observed.iter_mut() {
            *o = rng.random::<f64>() >= missing_prob;
        }
    }
    Ok(SimulatedSite {
        values,
        observed,
        weights,
    })
}

/// Simulates a panel with the given (zero-based) cluster labels.
pub fn simulate_panel<R: Rng + ?Sized>(
    clusters: &[ClusterParams],
    labels: &[usize],
    quant: &QuantileSpec,
    design: &DesignMatrix,
    missing_prob: f64,
    rng: &mut R,
) -> Result<(Panel, Vec<f64>)> {
    let mut values = Vec::with_capacity(labels.len() * 2 * design.t_len());
    let mut observed = Vec::with_capacity(values.capacity());
    let mut weights = Vec::with_capacity(values.capacity());
    for &k in labels {
        let site = simulate_site(&clusters[k], quant, design, rng, missing_prob)?;
        values.extend(site.values);
        observed.extend(site.observed);
        weights.extend(site.weights);
    }
    let panel = Panel::from_arrays(2, design.times().to_vec(), values, observed)?;
    Ok((panel, weights))
}

/// Bivariate normal log density with correlation `phi`; helper for tests
/// and diagnostics.
pub fn bivariate_normal_logpdf(x: [f64; 2], mean: [f64; 2], sd: [f64; 2], phi: f64) -> f64 {
    let e = [x[0] - mean[0], x[1] - mean[1]];
    gaussian_layer_logpdf(e, sd, [true, true], phi)
}
