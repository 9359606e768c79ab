//! Check-loss quantile regression and the AIC-like selection of the number
//! of basis functions.
//!
//! The solver runs majorize-minimize IRLS on the check loss with a floor on
//! the absolute residuals that is annealed down to the tolerance, then
//! polishes the result by exact descent over the vertices of the piecewise
//! linear objective (each vertex interpolates `m` observations). The
//! polish terminates at a point where no edge direction decreases the
//! objective.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{build_design, dot, DesignLayout};
use crate::distributions::{check_loss, QuantileSpec};
use crate::error::{Error, Result};
use crate::model::Panel;

/// Result of a quantile regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct QRFit {
    pub beta_hat: Vec<f64>,
    /// Check-loss sum over the observed points at `beta_hat`.
    pub objective: f64,
    pub p: f64,
}

/// Check-loss sum of `beta` over the observed points.
pub fn check_objective(y: &[f64], observed: &[bool], rows: &[Vec<f64>], beta: &[f64], p: f64) -> f64 {
    y.iter()
        .zip(observed)
        .zip(rows)
        .filter(|((_, &o), _)| o)
        .map(|((&yt, _), x)| check_loss(yt - dot(x, beta), p))
        .sum()
}

/// Minimizes `sum_t rho_p(y_t - x_t' beta)` over the observed `t`.
pub fn fit_quantile(
    y: &[f64],
    observed: &[bool],
    rows: &[Vec<f64>],
    p: f64,
    tol: f64,
) -> Result<QRFit> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile level {p} not in (0, 1)")));
    }
    if y.len() != observed.len() || y.len() != rows.len() {
        return Err(Error::domain("y, mask and design rows must have equal length"));
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::domain("design has no columns"));
    }
    let m = rows[0].len();
    let idx: Vec<usize> = (0..y.len()).filter(|&t| observed[t]).collect();
    if idx.len() < m {
        return Err(Error::Underdetermined {
            observed: idx.len(),
            coefficients: m,
        });
    }
    let ys: Vec<f64> = idx.iter().map(|&t| y[t]).collect();
    let xs: Vec<&[f64]> = idx.iter().map(|&t| rows[t].as_slice()).collect();
    let tol = if tol > 0.0 { tol } else { 1e-9 };

    let start = irls(&ys, &xs, p, tol);
    let beta = vertex_descent(&ys, &xs, p, &start)?;
    let objective = ys
        .iter()
        .zip(&xs)
        .map(|(&yt, x)| check_loss(yt - dot(x, &beta), p))
        .sum();
    Ok(QRFit {
        beta_hat: beta,
        objective,
        p,
    })
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    let scale = (0..m).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(&b));
    }
    let ridge = a + DMatrix::identity(m, m) * (scale * 1e-10);
    ridge.cholesky().map(|ch| ch.solve(&b))
}

fn irls(ys: &[f64], xs: &[&[f64]], p: f64, tol: f64) -> Vec<f64> {
    let m = xs[0].len();
    let n = ys.len();
    let mut beta = {
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for (x, &yt) in xs.iter().zip(ys) {
            accumulate(&mut a, &mut b, x, yt, 1.0, 0.0);
        }
        solve_spd(a, b).map(|v| v.as_slice().to_vec()).unwrap_or(vec![0.0; m])
    };
    let resid_scale = {
        let s: f64 = ys.iter().zip(xs).map(|(&yt, x)| (yt - dot(x, &beta)).abs()).sum();
        (s / n as f64).max(1e-12)
    };
    let mut floor = 0.1 * resid_scale;
    let final_floor = (tol * resid_scale).max(1e-14);
    let lin = 2.0 * p - 1.0;
    loop {
        for _ in 0..25 {
            let mut a = DMatrix::zeros(m, m);
            let mut b = DVector::zeros(m);
            for (x, &yt) in xs.iter().zip(ys) {
                let r = yt - dot(x, &beta);
                let wt = 1.0 / r.abs().max(floor);
                accumulate(&mut a, &mut b, x, yt, wt, lin);
            }
            let Some(next) = solve_spd(a, b) else { break };
            let change: f64 = next
                .iter()
                .zip(&beta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            beta = next.as_slice().to_vec();
            if change < floor * 1e-3 {
                break;
            }
        }
        if floor <= final_floor {
            break;
        }
        floor = (floor * 0.1).max(final_floor);
    }
    beta
}

#[inline]
fn accumulate(a: &mut DMatrix<f64>, b: &mut DVector<f64>, x: &[f64], y: f64, wt: f64, lin: f64) {
    let m = x.len();
    for r in 0..m {
        if x[r] == 0.0 {
            continue;
        }
        b[r] += x[r] * (wt * y + lin);
        for c in 0..m {
            a[(r, c)] += wt * x[r] * x[c];
        }
    }
}

/// Picks `m` linearly independent observations, preferring small residuals.
fn initial_vertex(ys: &[f64], xs: &[&[f64]], beta: &[f64]) -> Option<Vec<usize>> {
    let m = xs[0].len();
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = (ys[a] - dot(xs[a], beta)).abs();
        let rb = (ys[b] - dot(xs[b], beta)).abs();
        ra.total_cmp(&rb).then(a.cmp(&b))
    });
    let mut chosen = Vec::with_capacity(m);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(m);
    for t in order {
        let mut v = xs[t].to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for u in &ortho {
            let d = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= d * ui);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
            chosen.push(t);
            if chosen.len() == m {
                return Some(chosen);
            }
        }
    }
    None
}

fn vertex_descent(ys: &[f64], xs: &[&[f64]], p: f64, start: &[f64]) -> Result<Vec<f64>> {
    let m = xs[0].len();
    let n = ys.len();
    let Some(mut basis) = initial_vertex(ys, xs, start) else {
        return Err(Error::Underdetermined {
            observed: n,
            coefficients: m,
        });
    };
    let objective = |beta: &[f64]| -> f64 {
        ys.iter()
            .zip(xs)
            .map(|(&yt, x)| check_loss(yt - dot(x, beta), p))
            .sum()
    };
    let mut in_basis = vec![false; n];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let start_obj = objective(start);

    for _ in 0..(50 * m + 200) {
        in_basis.iter_mut().for_each(|b| *b = false);
        basis.iter().for_each(|&t| in_basis[t] = true);
        let xb = DMatrix::from_fn(m, m, |r, c| xs[basis[r]][c]);
        let Some(inv) = xb.try_inverse() else {
            return Err(Error::numerical("singular vertex in quantile regression"));
        };
        let yb = DVector::from_iterator(m, basis.iter().map(|&t| ys[t]));
        let beta: Vec<f64> = (&inv * yb).as_slice().to_vec();
        let resid: Vec<f64> = ys.iter().zip(xs).map(|(&yt, x)| yt - dot(x, &beta)).collect();
        let obj: f64 = resid.iter().map(|&r| check_loss(r, p)).sum();
        best = match best {
            Some((b, o)) if o <= obj => Some((b, o)),
            _ => Some((beta.clone(), obj)),
        };

        // Edge k releases basis point k. Moving along d_k = inv[:, k] by s
        // changes that point's residual by -s and leaves the other basis
        // residuals at zero.
        let mut step: Option<(usize, usize)> = None;
        'edges: for k in 0..m {
            let d: Vec<f64> = (0..m).map(|r| inv[(r, k)]).collect();
            let a: Vec<f64> = xs.iter().map(|x| dot(x, &d)).collect();
            for sign in [1.0, -1.0] {
                // derivative of the objective at s = 0+ along sign * d
                let mut slope = if sign > 0.0 { 1.0 - p } else { p };
                let mut kinks: Vec<(f64, f64, usize)> = Vec::new();
                let mut total = 1.0;
                for t in 0..n {
                    if in_basis[t] {
                        continue;
                    }
                    let at = sign * a[t];
                    if at == 0.0 {
                        continue;
                    }
                    total += at.abs();
                    let r = resid[t];
                    // residual moves as r - s * at
                    let moving_down = at > 0.0;
                    if r > 0.0 || (r == 0.0 && !moving_down) {
                        slope -= p * at;
                    } else {
                        slope += (1.0 - p) * at;
                    }
                    let s_kink = r / at;
                    if s_kink > 0.0 || (s_kink == 0.0 && r != 0.0) {
                        kinks.push((s_kink, at.abs(), t));
                    }
                }
                if slope >= -1e-12 * total {
                    continue;
                }
                kinks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.2.cmp(&y.2)));
                for &(_, jump, t) in &kinks {
                    slope += jump;
                    if slope >= 0.0 {
                        step = Some((k, t));
                        break 'edges;
                    }
                }
                // unbounded direction cannot occur for a proper check loss
                // with p in (0, 1) and a full-rank design
            }
        }
        match step {
            Some((k, t)) => basis[k] = t,
            None => {
                let (b, o) = best.expect("at least one vertex visited");
                return Ok(if o <= start_obj { b } else { start.to_vec() });
            }
        }
    }
    let (b, o) = best.expect("at least one vertex visited");
    Ok(if o <= start_obj { b } else { start.to_vec() })
}

/// `objective + 2m`.
pub fn aic_of_fit(fit: &QRFit, m: usize) -> f64 {
    fit.objective + 2.0 * m as f64
}

/// Which components enter the overall AIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AicScope {
    AllComponents,
    FirstComponent,
}

/// Overall AIC of one candidate layout; `None` when some fit was infeasible.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisScore {
    pub layout: DesignLayout,
    pub aic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSelection {
    pub scores: Vec<BasisScore>,
    pub chosen: DesignLayout,
}

const QREG_TOL: f64 = 1e-9;

/// Fits every site and component independently at its quantile level,
/// sums `AIC_j^(i)(m)` over sites and the components in `scope`, and
/// returns the candidate with the smallest total. Ties go to the earlier
/// candidate.
pub fn select_basis_size(
    panel: &Panel,
    candidates: &[DesignLayout],
    quant: &QuantileSpec,
    scope: AicScope,
) -> Result<BasisSelection> {
    if candidates.is_empty() {
        return Err(Error::domain("no basis candidates"));
    }
    if quant.len() != panel.q() {
        return Err(Error::domain("one quantile level per component is required"));
    }
    let components: Vec<usize> = match scope {
        AicScope::AllComponents => (0..panel.q()).collect(),
        AicScope::FirstComponent => vec![0],
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for &layout in candidates {
        let aic = match build_design(layout, panel.times(), panel.q()) {
            Err(e) => {
                warn!("skipping basis candidate {}: {e}", layout.label());
                None
            }
            Ok(design) => {
                let width = design.row_width();
                let jobs: Vec<(usize, usize)> = (0..panel.n())
                    .flat_map(|i| components.iter().map(move |&j| (i, j)))
                    .collect();
                let fits: Result<Vec<f64>> = jobs
                    .par_iter()
                    .map(|&(i, j)| {
                        let (y, mask) = panel.series(i, j);
                        fit_quantile(y, mask, design.rows(), quant.p(j), QREG_TOL)
                            .map(|f| aic_of_fit(&f, width))
                    })
                    .collect();
                match fits {
                    Ok(v) => Some(v.iter().sum()),
                    Err(e) => {
                        warn!("skipping basis candidate {}: {e}", layout.label());
                        None
                    }
                }
            }
        };
        scores.push(BasisScore { layout, aic });
    }
    let chosen = scores
        .iter()
        .filter_map(|s| s.aic.map(|a| (s.layout, a)))
        .fold(None, |best: Option<(DesignLayout, f64)>, (l, a)| match best {
            Some((_, ba)) if ba <= a => best,
            _ => Some((l, a)),
        })
        .map(|(l, _)| l)
        .ok_or_else(|| Error::domain("every basis candidate was infeasible"))?;
    Ok(BasisSelection { scores, chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn intercept(n: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0]; n]
    }

    #[test]
    fn intercept_only_median() {
        let y = [1.0, 2.0, 9.0];
        let fit = fit_quantile(&y, &[true; 3], &intercept(3), 0.5, 1e-9).unwrap();
        assert_abs_diff_eq!(fit.beta_hat[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.objective, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn missing_points_contribute_nothing() {
        let y = [1.0, 2.0, 9.0, 1e6];
        let fit = fit_quantile(&y, &[true, true, true, false], &intercept(4), 0.5, 1e-9).unwrap();
        assert_abs_diff_eq!(fit.objective, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn exact_interpolation() {
        let rows: Vec<Vec<f64>> = (0..3).map(|t| vec![1.0, t as f64, (t * t) as f64]).collect();
        let beta = [0.5, -1.0, 2.0];
        let y: Vec<f64> = rows.iter().map(|x| dot(x, &beta)).collect();
        let fit = fit_quantile(&y, &[true; 3], &rows, 0.3, 1e-9).unwrap();
        for (a, b) in fit.beta_hat.iter().zip(beta) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert!(fit.objective < 1e-9);
    }

    #[test]
    fn underdetermined_is_an_error() {
        let rows: Vec<Vec<f64>> = (0..3).map(|t| vec![1.0, t as f64, 0.5]).collect();
        let err = fit_quantile(&[1.0, 2.0, 3.0], &[true, false, true], &rows, 0.5, 1e-9);
        assert!(matches!(err, Err(Error::Underdetermined { observed: 2, coefficients: 3 })));
    }

    #[test]
    fn aic_formula() {
        let fit = QRFit {
            beta_hat: vec![],
            objective: 4.0,
            p: 0.5,
        };
        assert_eq!(aic_of_fit(&fit, 1), 6.0);
        let fit = QRFit { objective: 0.0, ..fit };
        assert_eq!(aic_of_fit(&fit, 5), 10.0);
    }

    #[test]
    fn coverage_of_intercept_fits() {
        let y: Vec<f64> = (0..37).map(|k| ((k * 17) % 37) as f64 * 0.3 - 2.0).collect();
        for p in [0.1, 0.25, 0.5, 0.77, 0.9] {
            let fit = fit_quantile(&y, &vec![true; y.len()], &intercept(y.len()), p, 1e-10).unwrap();
            let b = fit.beta_hat[0];
            let below = y.iter().filter(|&&v| v - b < -1e-9).count() as f64 / y.len() as f64;
            let at_or_below = y.iter().filter(|&&v| v - b <= 1e-9).count() as f64 / y.len() as f64;
            assert!(below <= p + 1e-12, "p={p} below={below}");
            assert!(at_or_below >= p - 1e-12, "p={p} at_or_below={at_or_below}");
        }
    }
}
