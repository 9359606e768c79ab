//! Clamped B-spline bases with equally spaced knots and the per-time
//! block-diagonal design matrices built from them.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// B-spline basis of `num_basis` functions on `[t_min, t_max]` with an
/// open-uniform (clamped) knot vector.
///
/// The degree is 3 whenever `num_basis >= 4`. Smaller bases drop to degree
/// `num_basis - 1`, so a basis of 3 functions is quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    num_basis: usize,
    t_min: f64,
    t_max: f64,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(num_basis: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if num_basis < 2 {
            return Err(Error::domain(format!(
                "a spline basis needs at least 2 functions, got {num_basis}"
            )));
        }
        if !(t_min < t_max) || !t_min.is_finite() || !t_max.is_finite() {
            return Err(Error::domain(format!(
                "invalid spline domain [{t_min}, {t_max}]"
            )));
        }
        let degree = 3.min(num_basis - 1);
        let interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat_n(t_min, degree + 1));
        let step = (t_max - t_min) / (interior + 1) as f64;
        for k in 1..=interior {
            knots.push(t_min + step * k as f64);
        }
        knots.extend(std::iter::repeat_n(t_max, degree + 1));
        Ok(Self {
            degree,
            num_basis,
            t_min,
            t_max,
            knots,
        })
    }

    /// Cubic basis; rejects sizes below 4.
    pub fn cubic(num_basis: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if num_basis < 4 {
            return Err(Error::domain(format!(
                "a cubic B-spline basis needs at least 4 functions, got {num_basis}"
            )));
        }
        Self::new(num_basis, t_min, t_max)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.num_basis - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[p..=last+1] is nondecreasing; find i with knots[i] <= t < knots[i+1]
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of all basis functions at `t` (Cox-de Boor recursion).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(Error::domain(format!(
                "t = {t} outside spline domain [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        let p = self.degree;
        let span = self.span(t);
        let u = &self.knots;
        let mut local = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        local[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = local[r] / (right[r + 1] + left[j - r]);
                local[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            local[j] = saved;
        }
        let mut out = vec![0.0; self.num_basis];
        out[span - p..=span].copy_from_slice(&local);
        Ok(out)
    }
}

/// How the per-component regressor row was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DesignLayout {
    Plain { m: usize },
    Seasonal { m1: usize, m2: usize, m3: usize },
}

impl DesignLayout {
    /// Number of coefficients per component.
    pub fn row_width(&self) -> usize {
        match *self {
            DesignLayout::Plain { m } => m,
            DesignLayout::Seasonal { m1, m2, m3 } => m1 + m2 + m3,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DesignLayout::Plain { m } => m.to_string(),
            DesignLayout::Seasonal { m1, m2, m3 } => format!("{m1}-{m2}-{m3}"),
        }
    }
}

/// Stack of per-time regressor blocks `X_t = diag(x_t', ..., x_t')`, one
/// copy of the row `x_t` per component. Only the rows are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    q: usize,
    layout: DesignLayout,
    times: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl DesignMatrix {
    /// Builds a design from explicit rows; every row must have the same
    /// length. Used for custom regressors such as an intercept.
    pub fn from_rows(rows: Vec<Vec<f64>>, times: Vec<f64>, q: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::domain("design needs at least one time point"));
        }
        if rows.len() != times.len() {
            return Err(Error::domain("one time value per design row is required"));
        }
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::domain("design rows must be nonempty and equally long"));
        }
        if q == 0 {
            return Err(Error::domain("q must be positive"));
        }
        Ok(Self {
            q,
            layout: DesignLayout::Plain { m: width },
            times,
            rows,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn layout(&self) -> DesignLayout {
        self.layout
    }

    pub fn t_len(&self) -> usize {
        self.rows.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Coefficients per component.
    pub fn row_width(&self) -> usize {
        self.rows[0].len()
    }

    /// Total coefficients per cluster, `L = q * row_width`.
    pub fn num_coefficients(&self) -> usize {
        self.q * self.row_width()
    }

    /// The shared regressor row `x_t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Dense `q x L` block for time `t`.
    pub fn block(&self, t: usize) -> Vec<Vec<f64>> {
        let w = self.row_width();
        (0..self.q)
            .map(|j| {
                let mut r = vec![0.0; self.q * w];
                r[j * w..(j + 1) * w].copy_from_slice(&self.rows[t]);
                r
            })
            .collect()
    }

    /// Coefficient block of component `j` inside a cluster vector.
    pub fn component_coefficients<'a>(&self, beta: &'a [f64], j: usize) -> &'a [f64] {
        let w = self.row_width();
        &beta[j * w..(j + 1) * w]
    }

    /// Fitted value `X_{jt}' beta` for component `j` at time `t`.
    #[inline]
    pub fn fitted(&self, beta: &[f64], j: usize, t: usize) -> f64 {
        let w = self.row_width();
        dot(&self.rows[t], &beta[j * w..(j + 1) * w])
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Design with the same spline row for every component.
pub fn plain_design(basis: &SplineBasis, times: &[f64], q: usize) -> Result<DesignMatrix> {
    if times.is_empty() {
        return Err(Error::domain("design needs at least one time point"));
    }
    if q == 0 {
        return Err(Error::domain("q must be positive"));
    }
    let rows = times
        .iter()
        .map(|&t| basis.eval(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignMatrix {
        q,
        layout: DesignLayout::Plain {
            m: basis.num_basis(),
        },
        times: times.to_vec(),
        rows,
    })
}

/// Seasonal-modulation design: per component the row is
/// `[b(t) | b(t) cos(pi t / 6) | b(t) sin(pi t / 6)]` with bases of sizes
/// `m1`, `m2` and `m3` over `[min(times), max(times)]`. Time is measured in
/// months, so the carriers have period 12.
pub fn seasonal_design(
    m1: usize,
    m2: usize,
    m3: usize,
    times: &[f64],
    q: usize,
) -> Result<DesignMatrix> {
    if m1 < 4 || m2 < 3 || m3 < 3 {
        return Err(Error::domain(format!(
            "seasonal design needs m1 >= 4, m2 >= 3, m3 >= 3; got ({m1}, {m2}, {m3})"
        )));
    }
    if times.is_empty() {
        return Err(Error::domain("design needs at least one time point"));
    }
    if q == 0 {
        return Err(Error::domain("q must be positive"));
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let trend = SplineBasis::new(m1, lo, hi)?;
    let cos_basis = SplineBasis::new(m2, lo, hi)?;
    let sin_basis = SplineBasis::new(m3, lo, hi)?;
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let (s, c) = (PI * t / 6.0).sin_cos();
        let mut row = trend.eval(t)?;
        row.extend(cos_basis.eval(t)?.into_iter().map(|b| b * c));
        row.extend(sin_basis.eval(t)?.into_iter().map(|b| b * s));
        rows.push(row);
    }
    Ok(DesignMatrix {
        q,
        layout: DesignLayout::Seasonal { m1, m2, m3 },
        times: times.to_vec(),
        rows,
    })
}

/// Builds the design named by `layout` on the given time grid.
pub fn build_design(layout: DesignLayout, times: &[f64], q: usize) -> Result<DesignMatrix> {
    match layout {
        DesignLayout::Plain { m } => {
            let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let basis = SplineBasis::cubic(m, lo, hi)?;
            plain_design(&basis, times, q)
        }
        DesignLayout::Seasonal { m1, m2, m3 } => seasonal_design(m1, m2, m3, times, q),
    }
}
