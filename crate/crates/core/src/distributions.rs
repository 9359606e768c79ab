//! Scalar probability primitives: the asymmetric Laplace (AL) family, the
//! Downton bivariate exponential and the random variate generators used by
//! the sampler. Densities are exposed in log form.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};

/// Target quantile levels together with the skew and scale constants of the
/// Gaussian mixture representation of the AL distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSpec {
    p: Vec<f64>,
    theta: Vec<f64>,
    omega2: Vec<f64>,
}

impl QuantileSpec {
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::domain("at least one quantile level is required"));
        }
        let mut theta = Vec::with_capacity(levels.len());
        let mut omega2 = Vec::with_capacity(levels.len());
        for &p in levels {
            check_level(p)?;
            let v = p * (1.0 - p);
            theta.push((1.0 - 2.0 * p) / v);
            omega2.push(2.0 / v);
        }
        Ok(Self {
            p: levels.to_vec(),
            theta,
            omega2,
        })
    }

    pub fn bivariate(p1: f64, p2: f64) -> Result<Self> {
        Self::new(&[p1, p2])
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p[j]
    }

    pub fn theta(&self, j: usize) -> f64 {
        self.theta[j]
    }

    pub fn omega2(&self, j: usize) -> f64 {
        self.omega2[j]
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.omega2[j].sqrt()
    }

    pub fn levels(&self) -> &[f64] {
        &self.p
    }
}

fn check_level(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile level {p} not in (0, 1)")));
    }
    Ok(())
}

/// Check (pinball) loss `z (p - 1[z < 0])`.
#[inline]
pub fn check_loss(z: f64, p: f64) -> f64 {
    if z < 0.0 {
        z * (p - 1.0)
    } else {
        z * p
    }
}

/// Log density of the AL distribution with location 0, scale `sigma` and
/// quantile level `p`: `log(p(1-p)/sigma) - rho_p(e/sigma)`.
pub fn al_logpdf(e: f64, sigma: f64, p: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("AL scale must be positive, got {sigma}")));
    }
    check_level(p)?;
    Ok(al_logpdf_unchecked(e, sigma, p))
}

#[inline]
pub(crate) fn al_logpdf_unchecked(e: f64, sigma: f64, p: f64) -> f64 {
    (p * (1.0 - p) / sigma).ln() - check_loss(e / sigma, p)
}

/// Distribution function of the AL law used by [`al_logpdf`].
pub fn al_cdf(e: f64, sigma: f64, p: f64) -> f64 {
    if e < 0.0 {
        p * ((1.0 - p) * e / sigma).exp()
    } else {
        1.0 - (1.0 - p) * (-p * e / sigma).exp()
    }
}

/// `log(sum(exp(xs)))`, stable for large magnitudes. Returns `-inf` for an
/// empty slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log weights in place into probabilities. Returns the log
/// normalizing constant.
pub fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let lse = log_sum_exp(log_w);
    for v in log_w.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

const BESSEL_SERIES_LIMIT: f64 = 30.0;

/// `log I0(a)` for the modified Bessel function of the first kind of order
/// zero. The power series (starting with the constant term 1) is used up to
/// `a = 30`; beyond that the large-argument expansion
/// `a - log(2 pi a)/2 + log(1 + 1/(8a) + 9/(2 (8a)^2) + ...)` avoids overflow.
pub fn log_bessel_i0(a: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::domain(format!("log_bessel_i0 needs a >= 0, got {a}")));
    }
    Ok(log_bessel_i0_unchecked(a))
}

pub(crate) fn log_bessel_i0_unchecked(a: f64) -> f64 {
    if a <= BESSEL_SERIES_LIMIT {
        let x = 0.25 * a * a;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= x / (k * k);
            sum += term;
            if term <= sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        let z = 8.0 * a;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=40 {
            let odd = (2 * k - 1) as f64;
            let next = term * odd * odd / (k as f64 * z);
            if next.abs() >= term.abs() {
                break;
            }
            term = next;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        a - 0.5 * (2.0 * std::f64::consts::PI * a).ln() + sum.ln()
    }
}

/// Log density of the Downton bivariate exponential with unit-exponential
/// marginals and correlation `gamma`.
pub fn downton_logpdf(w1: f64, w2: f64, gamma: f64) -> Result<f64> {
    if !(w1 > 0.0 && w2 > 0.0) {
        return Err(Error::domain(format!(
            "Downton density needs positive arguments, got ({w1}, {w2})"
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::domain(format!("Downton gamma must be in [0, 1), got {gamma}")));
    }
    Ok(downton_logpdf_unchecked(w1, w2, gamma))
}

#[inline]
pub(crate) fn downton_logpdf_unchecked(w1: f64, w2: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return -(w1 + w2);
    }
    let s = 1.0 - gamma;
    let arg = 2.0 * (gamma * w1 * w2).sqrt() / s;
    -s.ln() - (w1 + w2) / s + log_bessel_i0_unchecked(arg)
}

/// Draws a Downton pair: `W1 ~ Exp(1)`, `N ~ Poisson(gamma W1 / (1 - gamma))`,
/// `W2 ~ Gamma(N + 1, 1 - gamma)`.
pub fn downton_sample<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> (f64, f64) {
    debug_assert!((0.0..1.0).contains(&gamma));
    let w1: f64 = Exp1.sample(rng);
    let s = 1.0 - gamma;
    let rate = gamma * w1 / s;
    let n = if rate > 0.0 {
        Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    };
    let w2 = gamma_sample_unchecked(n + 1.0, s, rng);
    (w1, w2)
}

/// Inverse Gaussian draw by the Michael-Schucany-Haas transformation.
pub fn invgauss_sample<R: Rng + ?Sized>(mu: f64, lambda: f64, rng: &mut R) -> Result<f64> {
    if !(mu > 0.0 && lambda > 0.0) || !mu.is_finite() || !lambda.is_finite() {
        return Err(Error::domain(format!(
            "inverse Gaussian needs positive finite parameters, got mu={mu}, lambda={lambda}"
        )));
    }
    Ok(invgauss_sample_unchecked(mu, lambda, rng))
}

pub(crate) fn invgauss_sample_unchecked<R: Rng + ?Sized>(mu: f64, lambda: f64, rng: &mut R) -> f64 {
    let nu: f64 = StandardNormal.sample(rng);
    let h = mu * nu * nu / (2.0 * lambda);
    // smaller root of the quadratic, mu * (1 + h - sqrt(h^2 + 2h)) in a
    // cancellation-free form
    let x = mu / (1.0 + h + (h * h + 2.0 * h).sqrt());
    let u: f64 = rng.random();
    if u * (mu + x) <= mu {
        x
    } else {
        mu * mu / x
    }
}

/// Gamma draw with the given shape and scale.
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
        return Err(Error::domain(format!(
            "gamma needs positive finite parameters, got shape={shape}, scale={scale}"
        )));
    }
    Ok(gamma_sample_unchecked(shape, scale, rng))
}

pub(crate) fn gamma_sample_unchecked<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, scale)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Log of a unit-scale gamma draw. Uses `G(a) = G(a + 1) U^{1/a}` for small
/// shapes so tiny shapes do not underflow to zero.
pub(crate) fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        gamma_sample_unchecked(shape, 1.0, rng).ln()
    } else {
        let g = gamma_sample_unchecked(shape + 1.0, 1.0, rng).ln();
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g + u.ln() / shape
    }
}

/// Inverse gamma draw with density proportional to
/// `x^{-shape-1} exp(-scale / x)`, obtained as `1 / Gamma(shape, 1/scale)`.
pub fn invgamma_sample<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
        return Err(Error::domain(format!(
            "inverse gamma needs positive finite parameters, got shape={shape}, scale={scale}"
        )));
    }
    Ok(1.0 / gamma_sample_unchecked(shape, 1.0 / scale, rng))
}

/// Unnormalized inverse gamma log density.
#[inline]
pub(crate) fn invgamma_log_kernel(x: f64, shape: f64, scale: f64) -> f64 {
    -(shape + 1.0) * x.ln() - scale / x
}

/// Unnormalized GIG(p, a, b) log density, `(p-1) log w - (a w + b / w) / 2`.
#[inline]
pub fn gig_log_kernel(w: f64, p: f64, a: f64, b: f64) -> f64 {
    (p - 1.0) * w.ln() - 0.5 * (a * w + b / w)
}

/// Dirichlet draw computed through log-gamma variates and a log-sum-exp
/// normalization.
pub fn dirichlet_sample<R: Rng + ?Sized>(a: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::domain("Dirichlet needs at least one parameter"));
    }
    if let Some(bad) = a.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!("Dirichlet parameter must be positive, got {bad}")));
    }
    let mut logs: Vec<f64> = a.iter().map(|&ak| log_gamma_sample(ak, rng)).collect();
    normalize_log_weights(&mut logs);
    Ok(logs)
}
