//! From estimated CDFs to quantile curves.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::locfit::{check_increasing, CdfFit};

/// What a [`QuantileCurve`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveRole {
    Q0,
    Q1,
    Pooled,
    Effect,
    EffectSlope,
    ComplierQ0,
    ComplierQ1,
    Contribution,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileCurve {
    pub u_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub trim: f64,
    pub role: CurveRole,
    /// Grid points where the CDF never reached `u` and the top of the y-grid
    /// was returned instead.
    pub saturated: usize,
}

impl QuantileCurve {
    /// Curve from explicit values. Grid points must be strictly increasing in `[0, 1]`.
    pub fn new(u_grid: Vec<f64>, values: Vec<f64>, role: CurveRole) -> Result<Self> {
        check_increasing(&u_grid, "u grid")?;
        if u_grid.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::InvalidGrid("u grid must lie in [0, 1]".into()));
        }
        if values.len() != u_grid.len() {
            return Err(Error::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("curve has non-finite values".into()));
        }
        Ok(Self {
            u_grid,
            values,
            trim: 0.0,
            role,
            saturated: 0,
        })
    }

    /// Evaluate a function on a grid.
    pub fn from_fn(u_grid: &[f64], role: CurveRole, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(u_grid.to_vec(), u_grid.iter().map(|&u| f(u)).collect(), role)
    }

    pub fn len(&self) -> usize {
        self.u_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_grid.is_empty()
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated > 0
    }

    pub fn with_role(mut self, role: CurveRole) -> Self {
        self.role = role;
        self
    }

    /// Trapezoid integral of `g(value)` over the grid.
    pub fn integrate_map(&self, g: impl Fn(f64) -> f64) -> f64 {
        let mapped: Vec<f64> = self.values.iter().map(|&v| g(v)).collect();
        integrate(&self.u_grid, &mapped)
    }
}

/// `n` equally spaced interior points `i / (n + 1)`.
pub fn interior_u_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// `n >= 2` equally spaced points on the closed interval `[0, 1]`; meant for
/// analytic curves that stay finite at the ends.
pub fn closed_u_grid(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Default estimation grid: 1999 points `0.0005, 0.001, ..., 0.9995`.
pub fn default_u_grid() -> Vec<f64> {
    interior_u_grid(1999)
}

/// Clip to `[0, 1]` and take the running maximum.
pub fn monotonize(values: &[f64]) -> Vec<f64> {
    let mut run = 0.0f64;
    values
        .iter()
        .map(|&v| {
            run = run.max(v.clamp(0.0, 1.0));
            run
        })
        .collect()
}

/// Left-continuous inverse `Q(u) = min{y in grid : F(y) >= u}` of a CDF
/// tabulated on `y_grid`. The CDF is monotonized first.
pub fn invert_cdf(
    y_grid: &[f64],
    cdf: &[f64],
    u_grid: &[f64],
    role: CurveRole,
) -> Result<QuantileCurve> {
    check_increasing(y_grid, "y grid")?;
    check_increasing(u_grid, "u grid")?;
    if cdf.len() != y_grid.len() {
        return Err(Error::GridMismatch);
    }
    let f = monotonize(cdf);
    let last = *y_grid.last().expect("non-empty");
    let mut saturated = 0;
    let values = u_grid
        .iter()
        .map(|&u| {
            let k = f.partition_point(|&v| v < u);
            if k == f.len() {
                saturated += 1;
                last
            } else {
                y_grid[k]
            }
        })
        .collect();
    Ok(QuantileCurve {
        u_grid: u_grid.to_vec(),
        values,
        trim: 0.0,
        role,
        saturated,
    })
}

/// Invert the `value` array of a CDF fit.
pub fn invert_fit(fit: &CdfFit, u_grid: &[f64], role: CurveRole) -> Result<QuantileCurve> {
    invert_cdf(&fit.y_grid, &fit.value, u_grid, role)
}

const TRIM_SLACK: f64 = 1e-12;

/// Keep grid points with `gamma < u < 1 - gamma` (all points when `gamma = 0`).
pub fn trim(q: &QuantileCurve, gamma: f64) -> Result<QuantileCurve> {
    if !(0.0..0.5).contains(&gamma) {
        if gamma >= 0.5 {
            return Err(Error::EmptyGrid);
        }
        return Err(Error::InvalidConfig(format!("trim {gamma} is negative")));
    }
    let keep: Vec<usize> = if gamma == 0.0 {
        (0..q.len()).collect()
    } else {
        (0..q.len())
            .filter(|&i| {
                let u = q.u_grid[i];
                u > gamma + TRIM_SLACK && u < 1.0 - gamma - TRIM_SLACK
            })
            .collect()
    };
    if keep.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(QuantileCurve {
        u_grid: keep.iter().map(|&i| q.u_grid[i]).collect(),
        values: keep.iter().map(|&i| q.values[i]).collect(),
        trim: gamma,
        role: q.role,
        saturated: q.saturated,
    })
}

/// Grid points retained by [`trim`].
pub fn trim_grid(u_grid: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let q = QuantileCurve {
        u_grid: u_grid.to_vec(),
        values: vec![0.0; u_grid.len()],
        trim: 0.0,
        role: CurveRole::Other,
        saturated: 0,
    };
    Ok(trim(&q, gamma)?.u_grid)
}

/// Composite trapezoid rule over the grid's own range; zero for fewer than two points.
pub fn integrate(u_grid: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(u_grid.len(), values.len());
    u_grid
        .windows(2)
        .zip(values.windows(2))
        .map(|(u, g)| 0.5 * (u[1] - u[0]) * (g[0] + g[1]))
        .sum()
}

/// Trapezoid weights such that `integrate(u, g) == sum w_i g_i`.
pub fn trapezoid_weights(u_grid: &[f64]) -> Vec<f64> {
    let n = u_grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let half = 0.5 * (u_grid[i + 1] - u_grid[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}
