//! Metropolis-within-Gibbs sampler for the mixture model.
//!
//! One sweep updates, in order, the latent weights, the memberships, the
//! mixing weights, the regression coefficients, the scales, the Gaussian
//! correlations and (optionally) the latent dependence parameters.

mod init;
mod summary;
mod updates;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::DesignMatrix;
use crate::distributions::QuantileSpec;
use crate::error::{Error, Result};
use crate::model::{composite_marginal_loglik_site, require_bivariate, ClusterParams, MixtureState, Panel};

pub use init::{initialize, InitStrategy};
pub use summary::{summarize, write_trace_csv, PosteriorSummary};
pub use updates::{
    membership_probabilities, update_alpha, update_beta, update_gamma, update_memberships,
    update_phi, update_phi_tied, update_sigma, update_weights, beta_posterior,
};

/// How the latent dependence parameter is handled.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum GammaMode {
    Fixed(f64),
    /// Random-walk MH with a uniform window of the given half width.
    Sample(f64),
}

/// Prior hyperparameters shared by all clusters.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Prior {
    /// Symmetric Dirichlet weight.
    pub dirichlet: f64,
    pub beta_mean: f64,
    /// Diagonal prior variance of every coefficient.
    pub beta_var: f64,
    /// Inverse gamma shape and scale of each AL scale.
    pub sigma_shape: f64,
    pub sigma_scale: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            dirichlet: 1.0,
            beta_mean: 0.0,
            beta_var: 1e4,
            sigma_shape: 1e-3,
            sigma_scale: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub phi_window: f64,
    pub gamma_mode: GammaMode,
    /// Share one correlation across clusters.
    pub tie_phi: bool,
    pub prior: Prior,
    pub init: InitStrategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 2,
            iterations: 2500,
            burn_in: 300,
            thin: 1,
            seed: 1,
            phi_window: 0.1,
            gamma_mode: GammaMode::Fixed(0.5),
            tie_phi: false,
            prior: Prior::default(),
            init: InitStrategy::CurveKMeans,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K", "must be at least 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::config("burn_in", "must be smaller than iterations"));
        }
        if self.thin == 0 {
            return Err(Error::config("thin", "must be at least 1"));
        }
        if !(self.phi_window > 0.0) || !self.phi_window.is_finite() {
            return Err(Error::config("phi_window", "must be positive"));
        }
        match self.gamma_mode {
            GammaMode::Fixed(g) if !(0.0..1.0).contains(&g) => {
                return Err(Error::config("gamma", "must lie in [0, 1)"));
            }
            GammaMode::Sample(r) if !(r > 0.0) || !r.is_finite() => {
                return Err(Error::config("gamma_window", "must be positive"));
            }
            _ => {}
        }
        let p = &self.prior;
        let positive = [
            ("dirichlet", p.dirichlet),
            ("beta_var", p.beta_var),
            ("sigma_shape", p.sigma_shape),
            ("sigma_scale", p.sigma_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        if !p.beta_mean.is_finite() {
            return Err(Error::config("beta_mean", "must be finite"));
        }
        Ok(())
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn stored_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Panel, design and quantile levels bundled for the update functions.
#[derive(Debug, Clone, Copy)]
pub struct ModelData<'a> {
    pub panel: &'a Panel,
    pub design: &'a DesignMatrix,
    pub quant: &'a QuantileSpec,
}

impl<'a> ModelData<'a> {
    pub fn new(panel: &'a Panel, design: &'a DesignMatrix, quant: &'a QuantileSpec) -> Result<Self> {
        require_bivariate(panel.q())?;
        if quant.len() != panel.q() || design.q() != panel.q() {
            return Err(Error::domain("panel, design and quantile levels disagree on q"));
        }
        if design.t_len() != panel.t_len() {
            return Err(Error::domain(format!(
                "design has {} times, panel has {}",
                design.t_len(),
                panel.t_len()
            )));
        }
        Ok(Self { panel, design, quant })
    }

    pub(crate) fn t_len(&self) -> usize {
        self.panel.t_len()
    }
}

/// Acceptance bookkeeping of one MH block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct UpdateStats {
    pub proposed: u64,
    pub accepted: u64,
    /// Sum of the acceptance probabilities `min(1, ratio)`.
    pub prob_sum: f64,
    pub prob_min: f64,
}

impl Default for UpdateStats {
    fn default() -> Self {
        Self {
            proposed: 0,
            accepted: 0,
            prob_sum: 0.0,
            prob_min: 1.0,
        }
    }
}

impl UpdateStats {
    pub(crate) fn record(&mut self, prob: f64, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
        self.prob_sum += prob;
        self.prob_min = self.prob_min.min(prob);
    }

    pub fn merge(&mut self, other: &UpdateStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.prob_sum += other.prob_sum;
        self.prob_min = self.prob_min.min(other.prob_min);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn mean_prob(&self) -> f64 {
        if self.proposed == 0 {
            1.0
        } else {
            self.prob_sum / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct Acceptance {
    pub weights: UpdateStats,
    pub sigma: UpdateStats,
    pub phi: UpdateStats,
    pub gamma: UpdateStats,
}

/// One stored draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub alpha: Vec<f64>,
    pub clusters: Vec<ClusterParams>,
    pub c: Vec<usize>,
    /// Composite log-likelihood of site `i` under cluster `k`, at `i * K + k`.
    pub loglik: Vec<f64>,
}

impl Draw {
    pub fn loglik(&self, i: usize, k: usize) -> f64 {
        self.loglik[i * self.alpha.len() + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub k: usize,
    pub n: usize,
    pub draws: Vec<Draw>,
    pub acceptance: Acceptance,
    pub final_state: MixtureState,
}

/// Runs one full sweep in the fixed block order.
pub fn sweep(
    state: &mut MixtureState,
    data: &ModelData,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    acc: &mut Acceptance,
) -> Result<()> {
    acc.weights.merge(&update_weights(state, data, rng));
    update_memberships(state, data, rng)?;
    update_alpha(state, &config.prior, rng)?;
    for k in 0..state.k() {
        update_beta(state, k, data, &config.prior, rng)?;
    }
    for k in 0..state.k() {
        acc.sigma.merge(&update_sigma(state, k, data, &config.prior, rng));
    }
    if config.tie_phi {
        acc.phi.merge(&update_phi_tied(state, data, config.phi_window, rng));
    } else {
        for k in 0..state.k() {
            acc.phi.merge(&update_phi(state, k, data, config.phi_window, rng));
        }
    }
    if let GammaMode::Sample(window) = config.gamma_mode {
        for k in 0..state.k() {
            acc.gamma.merge(&update_gamma(state, k, data, window, rng));
        }
    }
    Ok(())
}

/// Composite log-likelihood table `n x K` for the current parameters.
pub fn composite_table(state: &MixtureState, data: &ModelData) -> Vec<f64> {
    let k = state.k();
    let n = data.panel.n();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for (kk, params) in state.clusters.iter().enumerate() {
            out[i * k + kk] =
                composite_marginal_loglik_site(data.panel, i, params, data.quant, data.design);
        }
    }
    out
}

/// Initializes and runs one chain. Deterministic given `config.seed`.
pub fn run_chain(
    panel: &Panel,
    design: &DesignMatrix,
    quant: &QuantileSpec,
    config: &SamplerConfig,
) -> Result<ChainTrace> {
    config.validate()?;
    let data = ModelData::new(panel, design, quant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let state = initialize(&data, config, &mut rng)?;
    run_from_state(&data, config, state, &mut rng)
}

/// Runs the sweeps of `config` from a given state.
pub fn run_from_state(
    data: &ModelData,
    config: &SamplerConfig,
    mut state: MixtureState,
    rng: &mut ChaCha8Rng,
) -> Result<ChainTrace> {
    config.validate()?;
    if state.k() != config.k {
        return Err(Error::domain("state and config disagree on K"));
    }
    let mut acc = Acceptance::default();
    let mut draws = Vec::with_capacity(config.stored_draws());
    for s in 0..config.iterations {
        sweep(&mut state, data, config, rng, &mut acc).map_err(|e| Error::Sweep {
            sweep: s,
            source: Box::new(e),
        })?;
        if s >= config.burn_in && (s - config.burn_in + 1).is_multiple_of(config.thin) {
            draws.push(Draw {
                alpha: state.alpha.clone(),
                clusters: state.clusters.clone(),
                c: state.c.clone(),
                loglik: composite_table(&state, data),
            });
        }
    }
    Ok(ChainTrace {
        k: config.k,
        n: data.panel.n(),
        draws,
        acceptance: acc,
        final_state: state,
    })
}
