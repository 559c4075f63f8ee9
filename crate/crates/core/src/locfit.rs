//! One-sided local polynomial estimation at the cutoff.
//!
//! Every fit regresses a per-observation response on `r_p((x - x0)/h)` with
//! kernel weights `K((x - x0)/h)`, restricted to one side of the cutoff (or the
//! pooled window). Conditional CDFs are fitted for all points of a y-grid in a
//! single pass: observations are sorted by outcome and the weighted moment
//! vector `sum w_i r_i 1(Y_i <= y)` is accumulated as `y` increases.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, Side};
use crate::error::{Error, Result};

/// Bounded-support kernels. The Gaussian kernel is intentionally absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Uniform,
    Triangular,
    Epanechnikov,
    Biweight,
    Triweight,
}

impl Kernel {
    pub const ALL: [Kernel; 5] = [
        Kernel::Uniform,
        Kernel::Triangular,
        Kernel::Epanechnikov,
        Kernel::Biweight,
        Kernel::Triweight,
    ];

    #[inline]
    pub fn weight(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Uniform => 0.5,
            Kernel::Triangular => 1.0 - a,
            Kernel::Epanechnikov => 0.75 * (1.0 - u * u),
            Kernel::Biweight => {
                let s = 1.0 - u * u;
                15.0 / 16.0 * s * s
            }
            Kernel::Triweight => {
                let s = 1.0 - u * u;
                35.0 / 32.0 * s * s * s
            }
        }
    }

    /// Polynomial coefficients of the kernel on `[0, 1]`, lowest degree first.
    fn half_polynomial(self) -> Vec<f64> {
        match self {
            Kernel::Uniform => vec![0.5],
            Kernel::Triangular => vec![1.0, -1.0],
            Kernel::Epanechnikov => vec![0.75, 0.0, -0.75],
            Kernel::Biweight => [1.0, 0.0, -2.0, 0.0, 1.0]
                .iter()
                .map(|c| c * 15.0 / 16.0)
                .collect(),
            Kernel::Triweight => [1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -1.0]
                .iter()
                .map(|c| c * 35.0 / 32.0)
                .collect(),
        }
    }

    /// Exact `int_side u^m K(u) du`.
    pub fn moment(self, m: usize, side: Side) -> f64 {
        let right: f64 = self
            .half_polynomial()
            .iter()
            .enumerate()
            .map(|(j, c)| c / (m + j + 1) as f64)
            .sum();
        let left = if m % 2 == 0 { right } else { -right };
        match side {
            Side::Right => right,
            Side::Left => left,
            Side::Both => right + left,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Uniform => "uniform",
            Kernel::Triangular => "triangular",
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Biweight => "biweight",
            Kernel::Triweight => "triweight",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "rectangular" => Ok(Kernel::Uniform),
            "triangular" => Ok(Kernel::Triangular),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            "biweight" | "quartic" => Ok(Kernel::Biweight),
            "triweight" => Ok(Kernel::Triweight),
            "gaussian" | "normal" => Err(Error::InvalidConfig(
                "unbounded kernels are not supported".into(),
            )),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

pub fn kernel_weight(k: Kernel, u: f64) -> f64 {
    k.weight(u)
}

/// Settings shared by every local fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub cutoff: f64,
    pub bandwidth: f64,
    /// Polynomial order `p`; the bias pilot uses `p + 1`.
    pub order: usize,
    pub kernel: Kernel,
    pub y_grid: Vec<f64>,
    pub u_grid: Vec<f64>,
    pub trim: f64,
}

/// Highest supported fit order; the bias pilot goes one above.
pub const MAX_ORDER: usize = 3;

impl FitConfig {
    pub fn bias_order(&self) -> usize {
        self.order + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if self.order > MAX_ORDER {
            return Err(Error::InvalidConfig(format!(
                "order {} exceeds {MAX_ORDER}",
                self.order
            )));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::InvalidConfig(format!("trim {} not in [0, 0.5)", self.trim)));
        }
        check_increasing(&self.y_grid, "y grid")?;
        check_increasing(&self.u_grid, "u grid")?;
        if self.u_grid.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::InvalidGrid("u grid must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Same configuration at another polynomial order.
    pub fn with_order(&self, order: usize) -> Self {
        Self { order, ..self.clone() }
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Self {
        Self { bandwidth, ..self.clone() }
    }
}

pub(crate) fn check_increasing(grid: &[f64], what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid(format!("{what} is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid(format!("{what} has non-finite points")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!("{what} is not strictly increasing")));
    }
    Ok(())
}

/// Rule-of-thumb bandwidth `c * n^(-1/5)` with `c = multiplier * sd(x)`.
pub fn default_bandwidth(d: &Dataset, multiplier: f64) -> f64 {
    multiplier * sample_sd(d.xs()) * (d.len() as f64).powf(-0.2)
}

/// `h = c n^(-1/5)` with `c` either a multiple of `sd(x)` or an absolute constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    SdScaled(f64),
    Constant(f64),
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::SdScaled(1.0)
    }
}

impl BandwidthRule {
    pub fn bandwidth(self, d: &Dataset) -> f64 {
        match self {
            BandwidthRule::SdScaled(m) => default_bandwidth(d, m),
            BandwidthRule::Constant(c) => c * (d.len() as f64).powf(-0.2),
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::SdScaled(m) => write!(f, "sd:{m}"),
            BandwidthRule::Constant(c) => write!(f, "const:{c}"),
        }
    }
}

/// Parses `sd`, `sd:<multiplier>` or `const:<c>`.
impl FromStr for BandwidthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = match s.split_once(':') {
            Some((k, v)) => (k, Some(v)),
            None => (s, None),
        };
        let value = match value {
            None => 1.0,
            Some(v) => v
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad bandwidth rule `{s}`")))?,
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidth rule constant must be positive in `{s}`")));
        }
        match kind.trim().to_ascii_lowercase().as_str() {
            "sd" => Ok(BandwidthRule::SdScaled(value)),
            "const" | "constant" => Ok(BandwidthRule::Constant(value)),
            _ => Err(Error::InvalidConfig(format!("bad bandwidth rule `{s}`"))),
        }
    }
}

/// Equally spaced outcome grid spanning the sample range padded by 1% per side.
pub fn default_y_grid(d: &Dataset, points: usize) -> Vec<f64> {
    let (lo, hi) = d
        .ys()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let range = hi - lo;
    let (lo, hi) = if range > 0.0 {
        (lo - 0.01 * range, hi + 0.01 * range)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let points = points.max(2);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub(crate) fn sample_sd(values: impl Iterator<Item = f64>) -> f64 {
    let (n, _, m2) = values.fold((0usize, 0.0f64, 0.0f64), |(n, mean, m2), v| {
        let n1 = n + 1;
        let delta = v - mean;
        let mean1 = mean + delta / n1 as f64;
        (n1, mean1, m2 + delta * (v - mean1))
    });
    if n < 2 {
        0.0
    } else {
        (m2 / (n - 1) as f64).sqrt()
    }
}

/// Kernel moment matrices `Gamma = int K r r'` and `Lambda = int u^q K r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMoments {
    pub gamma: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub side: Side,
    pub order: usize,
    pub moment_order: usize,
}

impl DesignMoments {
    /// `e_j' Gamma^{-1}` as a row vector.
    pub fn inverse_row(&self, j: usize) -> Result<DVector<f64>> {
        let chol = self.gamma.clone().cholesky().ok_or(Error::SingularDesign)?;
        let mut e = DVector::zeros(self.order + 1);
        e[j] = 1.0;
        Ok(chol.solve(&e))
    }

    /// `e_0' Gamma^{-1} Lambda`, the constant multiplying the scaled pilot
    /// coefficient in the leading bias term.
    pub fn bias_constant(&self) -> Result<f64> {
        Ok(self.inverse_row(0)?.dot(&self.lambda))
    }
}

pub fn design_moments(k: Kernel, p: usize, q: usize, side: Side) -> Result<DesignMoments> {
    if p > MAX_ORDER + 1 {
        return Err(Error::InvalidConfig(format!("order {p} too large for design moments")));
    }
    let gamma = DMatrix::from_fn(p + 1, p + 1, |i, j| k.moment(i + j, side));
    let lambda = DVector::from_fn(p + 1, |i, _| k.moment(q + i, side));
    let m = DesignMoments {
        gamma,
        lambda,
        side,
        order: p,
        moment_order: q,
    };
    if m.gamma.clone().cholesky().is_none() {
        return Err(Error::SingularDesign);
    }
    Ok(m)
}

/// `LDL'` factorisation of a small symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct SymFactor {
    n: usize,
    l: Vec<f64>,
    d: Vec<f64>,
}

impl SymFactor {
    /// Returns `None` when the smallest pivot is below `1e-12` times the largest.
    pub(crate) fn new(a: &[f64], n: usize) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = a[j * n + j];
            for k in 0..j {
                dj -= l[j * n + k] * l[j * n + k] * d[k];
            }
            d[j] = dj;
            l[j * n + j] = 1.0;
            for i in (j + 1)..n {
                let mut v = a[i * n + j];
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k] * d[k];
                }
                l[i * n + j] = if dj != 0.0 { v / dj } else { 0.0 };
            }
        }
        let max = d.iter().cloned().fold(0.0f64, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || !(min >= 1e-12 * max) {
            return None;
        }
        Some(Self { n, l, d })
    }

    pub(crate) fn solve(&self, b: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.copy_from_slice(&b[..n]);
        for i in 0..n {
            let mut v = out[i];
            for k in 0..i {
                v -= self.l[i * n + k] * out[k];
            }
            out[i] = v;
        }
        for i in 0..n {
            out[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let mut v = out[i];
            for k in (i + 1)..n {
                v -= self.l[k * n + i] * out[k];
            }
            out[i] = v;
        }
    }
}

/// Observations inside one side's kernel window together with their scaled
/// positions, weights and the factorised weighted Gram matrix.
#[derive(Debug, Clone)]
pub(crate) struct LocalWindow {
    pub order: usize,
    /// Indices into the dataset's observations, ascending.
    pub idx: Vec<usize>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    factor: SymFactor,
}

#[inline]
pub(crate) fn regressors(z: f64, order: usize, out: &mut [f64]) {
    let mut v = 1.0;
    for slot in out.iter_mut().take(order + 1) {
        *slot = v;
        v *= z;
    }
}

impl LocalWindow {
    pub(crate) fn new(
        d: &Dataset,
        side: Side,
        cutoff: f64,
        bandwidth: f64,
        kernel: Kernel,
        order: usize,
    ) -> Result<Self> {
        let mut idx = Vec::new();
        let mut z = Vec::new();
        let mut w = Vec::new();
        for (i, o) in d.observations().iter().enumerate() {
            if !side.contains(o.x, cutoff) {
                continue;
            }
            let zi = (o.x - cutoff) / bandwidth;
            let wi = kernel.weight(zi);
            if wi > 0.0 {
                idx.push(i);
                z.push(zi);
                w.push(wi);
            }
        }
        let required = order + 2;
        if idx.len() < required {
            return Err(Error::InsufficientData {
                side,
                effective_n: idx.len(),
                required,
            });
        }
        let m = order + 1;
        let mut gram = vec![0.0; m * m];
        let mut r = vec![0.0; m];
        for (&zi, &wi) in z.iter().zip(&w) {
            regressors(zi, order, &mut r);
            for a in 0..m {
                for b in 0..=a {
                    gram[a * m + b] += wi * r[a] * r[b];
                }
            }
        }
        for a in 0..m {
            for b in (a + 1)..m {
                gram[a * m + b] = gram[b * m + a];
            }
        }
        let factor = SymFactor::new(&gram, m).ok_or(Error::SingularFit { side })?;
        Ok(Self {
            order,
            idx,
            z,
            w,
            factor,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.idx.len()
    }

    /// Weighted least squares coefficients for the given responses (one per
    /// window observation).
    pub(crate) fn fit(&self, responses: impl Iterator<Item = f64>) -> Vec<f64> {
        let m = self.order + 1;
        let mut b = vec![0.0; m];
        let mut r = vec![0.0; m];
        for ((&zi, &wi), yi) in self.z.iter().zip(&self.w).zip(responses) {
            if yi == 0.0 {
                continue;
            }
            regressors(zi, self.order, &mut r);
            for a in 0..m {
                b[a] += wi * yi * r[a];
            }
        }
        let mut out = vec![0.0; m];
        self.factor.solve(&b, &mut out);
        out
    }

    /// Coefficients of the fit of `mult_i * 1(Y_i <= y)` for every `y` on an
    /// increasing grid.
    pub(crate) fn fit_indicator_curve(
        &self,
        d: &Dataset,
        y_grid: &[f64],
        mult: &dyn Fn(&Observation) -> f64,
    ) -> Vec<Vec<f64>> {
        let obs = d.observations();
        let m = self.order + 1;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            obs[self.idx[a]]
                .y
                .total_cmp(&obs[self.idx[b]].y)
                .then(a.cmp(&b))
        });
        let mut b = vec![0.0; m];
        let mut r = vec![0.0; m];
        let mut next = 0;
        let mut out = Vec::with_capacity(y_grid.len());
        for &y in y_grid {
            while next < order.len() && obs[self.idx[order[next]]].y <= y {
                let k = order[next];
                let o = &obs[self.idx[k]];
                let mi = mult(o);
                if mi != 0.0 {
                    regressors(self.z[k], self.order, &mut r);
                    for a in 0..m {
                        b[a] += self.w[k] * mi * r[a];
                    }
                }
                next += 1;
            }
            let mut coef = vec![0.0; m];
            self.factor.solve(&b, &mut coef);
            out.push(coef);
        }
        out
    }
}

/// Estimated one-sided conditional CDF on a y-grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfFit {
    pub side: Side,
    pub y_grid: Vec<f64>,
    pub order: usize,
    pub bandwidth: f64,
    /// Per-y coefficient vectors of length `order + 1`.
    pub coeffs: Vec<Vec<f64>>,
    /// Intercepts, bias corrected when `bias` is set.
    pub value: Vec<f64>,
    /// `(1/h) e_1' alpha`, absent for local constant fits.
    pub slope: Option<Vec<f64>>,
    /// Estimated leading bias that has been subtracted from `value`.
    pub bias: Option<Vec<f64>>,
    /// Coefficients of the order `p + 1` pilot used for the bias estimate.
    pub pilot_coeffs: Option<Vec<Vec<f64>>>,
    /// Number of observations with positive kernel weight.
    pub effective_n: usize,
}

/// Local polynomial fit of `subset(obs) * 1(Y <= y)` for every grid point.
///
/// Pass `&|_| 1.0` for the plain conditional CDF.
pub fn fit_local_cdf(
    d: &Dataset,
    side: Side,
    cfg: &FitConfig,
    subset_rule: &dyn Fn(&Observation) -> f64,
) -> Result<CdfFit> {
    check_increasing(&cfg.y_grid, "y grid")?;
    let win = LocalWindow::new(d, side, cfg.cutoff, cfg.bandwidth, cfg.kernel, cfg.order)?;
    let coeffs = win.fit_indicator_curve(d, &cfg.y_grid, subset_rule);
    let value = coeffs.iter().map(|c| c[0]).collect();
    let slope = (cfg.order >= 1).then(|| coeffs.iter().map(|c| c[1] / cfg.bandwidth).collect());
    Ok(CdfFit {
        side,
        y_grid: cfg.y_grid.clone(),
        order: cfg.order,
        bandwidth: cfg.bandwidth,
        coeffs,
        value,
        slope,
        bias: None,
        pilot_coeffs: None,
        effective_n: win.len(),
    })
}

/// Subtract the estimated leading bias `e_0' Gamma^{-1} Lambda * a_{p+1}(y)`,
/// where `a_{p+1}` is the top coefficient of an order `p + 1` pilot fit (equal
/// to `h^{p+1} F^{(p+1)} / (p+1)!`).
pub fn bias_correct(
    fit: &CdfFit,
    cfg: &FitConfig,
    d: &Dataset,
    subset_rule: &dyn Fn(&Observation) -> f64,
) -> Result<CdfFit> {
    let p = fit.order;
    let pilot_cfg = FitConfig {
        order: p + 1,
        bandwidth: fit.bandwidth,
        y_grid: fit.y_grid.clone(),
        ..cfg.clone()
    };
    let pilot = fit_local_cdf(d, fit.side, &pilot_cfg, subset_rule)?;
    let c = design_moments(cfg.kernel, p, p + 1, fit.side)?.bias_constant()?;
    let bias: Vec<f64> = pilot.coeffs.iter().map(|a| c * a[p + 1]).collect();
    let value = fit.value.iter().zip(&bias).map(|(v, b)| v - b).collect();
    Ok(CdfFit {
        value,
        bias: Some(bias),
        pilot_coeffs: Some(pilot.coeffs),
        ..fit.clone()
    })
}

/// Local polynomial fit of a scalar response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyFit {
    pub side: Side,
    pub order: usize,
    pub bandwidth: f64,
    pub coeffs: Vec<f64>,
    /// Level at the cutoff, bias corrected when `bias` is set.
    pub value: f64,
    /// One-sided derivative `(1/h) e_1' beta`.
    pub slope: Option<f64>,
    pub bias: Option<f64>,
    pub effective_n: usize,
}

pub fn fit_local_mean(
    d: &Dataset,
    side: Side,
    cfg: &FitConfig,
    response_rule: &dyn Fn(&Observation) -> f64,
) -> Result<PolyFit> {
    let win = LocalWindow::new(d, side, cfg.cutoff, cfg.bandwidth, cfg.kernel, cfg.order)?;
    let obs = d.observations();
    let coeffs = win.fit(win.idx.iter().map(|&i| response_rule(&obs[i])));
    let slope = (cfg.order >= 1).then(|| coeffs[1] / cfg.bandwidth);
    Ok(PolyFit {
        side,
        order: cfg.order,
        bandwidth: cfg.bandwidth,
        value: coeffs[0],
        coeffs,
        slope,
        bias: None,
        effective_n: win.len(),
    })
}

/// Bias-corrected level of a mean fit, using the same pilot rule as [`bias_correct`].
pub fn bias_correct_mean(
    fit: &PolyFit,
    cfg: &FitConfig,
    d: &Dataset,
    response_rule: &dyn Fn(&Observation) -> f64,
) -> Result<PolyFit> {
    let p = fit.order;
    let pilot_cfg = FitConfig {
        order: p + 1,
        bandwidth: fit.bandwidth,
        ..cfg.clone()
    };
    let pilot = fit_local_mean(d, fit.side, &pilot_cfg, response_rule)?;
    let c = design_moments(cfg.kernel, p, p + 1, fit.side)?.bias_constant()?;
    let bias = c * pilot.coeffs[p + 1];
    Ok(PolyFit {
        value: fit.value - bias,
        bias: Some(bias),
        ..fit.clone()
    })
}

/// Conditional density of the outcome at the cutoff on a y-grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityFit {
    pub side: Side,
    pub y_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub h_y: f64,
    pub floor: f64,
    /// Number of grid points where the floor was engaged.
    pub floored: usize,
}

impl DensityFit {
    pub fn floored_fraction(&self) -> f64 {
        self.floored as f64 / self.values.len().max(1) as f64
    }
}

/// Default density floor `1e-3 / range(Y)`.
pub fn default_density_floor(d: &Dataset) -> f64 {
    let (lo, hi) = d
        .ys()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let range = hi - lo;
    if range > 0.0 {
        1e-3 / range
    } else {
        1e-3
    }
}

/// Default outcome bandwidth `1.06 sd(Y) n_w^(-1/5)` over the window
/// observations of `side`.
pub fn default_density_bandwidth(d: &Dataset, cfg: &FitConfig, side: Side) -> f64 {
    let ys: Vec<f64> = d
        .observations()
        .iter()
        .filter(|o| {
            side.contains(o.x, cfg.cutoff) && cfg.kernel.weight((o.x - cfg.cutoff) / cfg.bandwidth) > 0.0
        })
        .map(|o| o.y)
        .collect();
    let sd = sample_sd(ys.iter().copied());
    let n = ys.len().max(1) as f64;
    let h = 1.06 * sd * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        // degenerate outcome: fall back to a fraction of the y-grid span
        let span = cfg.y_grid.last().unwrap_or(&1.0) - cfg.y_grid.first().unwrap_or(&0.0);
        (0.01 * span).max(1e-8)
    }
}

/// Pooled two-sided conditional density `f(y | x0)` with the default floor.
pub fn fit_conditional_density(d: &Dataset, cfg: &FitConfig, h_y: f64) -> Result<DensityFit> {
    fit_conditional_density_with(d, cfg, h_y, Side::Both, &|_| 1.0, default_density_floor(d))
}

/// Local polynomial fit of `subset(obs) * K((Y - y)/h_y)/h_y` for every grid
/// point, floored at `floor`.
pub fn fit_conditional_density_with(
    d: &Dataset,
    cfg: &FitConfig,
    h_y: f64,
    side: Side,
    subset_rule: &dyn Fn(&Observation) -> f64,
    floor: f64,
) -> Result<DensityFit> {
    let raw = raw_conditional_density(d, cfg, h_y, side, subset_rule)?;
    Ok(floor_density(side, cfg.y_grid.clone(), raw, h_y, floor))
}

pub(crate) fn floor_density(
    side: Side,
    y_grid: Vec<f64>,
    raw: Vec<f64>,
    h_y: f64,
    floor: f64,
) -> DensityFit {
    let mut floored = 0;
    let values = raw
        .into_iter()
        .map(|v| {
            if v >= floor {
                v
            } else {
                floored += 1;
                floor
            }
        })
        .collect();
    DensityFit {
        side,
        y_grid,
        values,
        h_y,
        floor,
        floored,
    }
}

/// Polynomial order in `x` for conditional density fits.
pub const DENSITY_X_ORDER: usize = 0;

/// Unfloored kernel-weighted (local constant in `x`) density estimates.
pub(crate) fn raw_conditional_density(
    d: &Dataset,
    cfg: &FitConfig,
    h_y: f64,
    side: Side,
    subset_rule: &dyn Fn(&Observation) -> f64,
) -> Result<Vec<f64>> {
    if !(h_y.is_finite() && h_y > 0.0) {
        return Err(Error::InvalidConfig(format!("density bandwidth must be positive, got {h_y}")));
    }
    check_increasing(&cfg.y_grid, "y grid")?;
    let order = DENSITY_X_ORDER;
    let win = LocalWindow::new(d, side, cfg.cutoff, cfg.bandwidth, cfg.kernel, order)?;
    let obs = d.observations();
    let mut by_y: Vec<usize> = (0..win.len()).collect();
    by_y.sort_by(|&a, &b| obs[win.idx[a]].y.total_cmp(&obs[win.idx[b]].y).then(a.cmp(&b)));
    let ys: Vec<f64> = by_y.iter().map(|&k| obs[win.idx[k]].y).collect();
    let mults: Vec<f64> = by_y.iter().map(|&k| subset_rule(&obs[win.idx[k]])).collect();

    let m = order + 1;
    let mut r = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut coef = vec![0.0; m];
    let mut out = Vec::with_capacity(cfg.y_grid.len());
    for &y in &cfg.y_grid {
        let start = ys.partition_point(|&v| v < y - h_y);
        let end = ys.partition_point(|&v| v <= y + h_y);
        b.iter_mut().for_each(|v| *v = 0.0);
        for j in start..end {
            let resp = mults[j] * cfg.kernel.weight((ys[j] - y) / h_y) / h_y;
            if resp == 0.0 {
                continue;
            }
            let k = by_y[j];
            regressors(win.z[k], order, &mut r);
            for a in 0..m {
                b[a] += win.w[k] * resp * r[a];
            }
        }
        win.factor.solve(&b, &mut coef);
        out.push(coef[0]);
    }
    Ok(out)
}

/// Density of the running variable at the cutoff: the average of the two
/// one-sided local linear boundary estimates
/// `e_0' Gamma_1^{-1} (nh)^{-1} sum r_1(z_i) K(z_i)`.
pub fn running_density_at_cutoff(d: &Dataset, cutoff: f64, bandwidth: f64, kernel: Kernel) -> Result<f64> {
    let n = d.len() as f64;
    let mut total = 0.0;
    for side in [Side::Left, Side::Right] {
        let row = design_moments(kernel, 1, 2, side)?.inverse_row(0)?;
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for o in d.observations() {
            if !side.contains(o.x, cutoff) {
                continue;
            }
            let z = (o.x - cutoff) / bandwidth;
            let w = kernel.weight(z);
            s0 += w;
            s1 += w * z;
        }
        total += (row[0] * s0 + row[1] * s1) / (n * bandwidth);
    }
    let f = 0.5 * total;
    if f > 0.0 {
        Ok(f)
    } else {
        Err(Error::InsufficientData {
            side: Side::Both,
            effective_n: 0,
            required: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Design;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg(h: f64, p: usize, y_grid: Vec<f64>) -> FitConfig {
        FitConfig {
            cutoff: 0.0,
            bandwidth: h,
            order: p,
            kernel: Kernel::Triangular,
            y_grid,
            u_grid: vec![0.5],
            trim: 0.0,
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn bandwidth_rules() {
        assert_eq!("sd".parse::<BandwidthRule>().unwrap(), BandwidthRule::SdScaled(1.0));
        assert_eq!("const:1.5".parse::<BandwidthRule>().unwrap(), BandwidthRule::Constant(1.5));
        assert_eq!("sd:2".parse::<BandwidthRule>().unwrap(), BandwidthRule::SdScaled(2.0));
        assert!("const:-1".parse::<BandwidthRule>().is_err());
        assert!("silverman".parse::<BandwidthRule>().is_err());
        let r = BandwidthRule::Constant(1.5);
        assert_eq!(r.to_string().parse::<BandwidthRule>().unwrap(), r);
        let obs: Vec<Observation> = (0..100_000)
            .map(|i| {
                let x = -1.0 + 2.0 * (i as f64 + 0.5) / 100_000.0;
                Observation::new(x, Some(u8::from(x >= 0.0)), 0.0, None)
            })
            .collect();
        let d = Dataset::new(obs, 0.0, Design::SharpRdd).unwrap();
        assert!((r.bandwidth(&d) - 0.15).abs() < 1e-12);
        let sd = (1.0f64 / 3.0).sqrt();
        assert!((BandwidthRule::default().bandwidth(&d) - 0.1 * sd).abs() < 1e-5);
    }

    #[test]
    fn kernel_closed_forms() {
        assert_eq!(kernel_weight(Kernel::Triangular, 0.0), 1.0);
        assert_eq!(kernel_weight(Kernel::Triangular, 1.0), 0.0);
        assert_eq!(kernel_weight(Kernel::Epanechnikov, 0.0), 0.75);
        for k in Kernel::ALL {
            assert_eq!(k.weight(1.5), 0.0);
            assert_eq!(k.weight(-1.01), 0.0);
            // unit mass
            assert!((simpson(|u| k.weight(u), -1.0, 1.0, 2000) - 1.0).abs() < 1e-10, "{k}");
        }
    }

    #[test]
    fn gaussian_kernel_rejected() {
        assert!("gaussian".parse::<Kernel>().is_err());
        assert_eq!("Epanechnikov".parse::<Kernel>().unwrap(), Kernel::Epanechnikov);
    }

    #[test]
    fn uniform_linear_right_moments() {
        let m = design_moments(Kernel::Uniform, 1, 2, Side::Right).unwrap();
        let expect = [[0.5, 0.25], [0.25, 1.0 / 6.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.gamma[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
        assert!((m.lambda[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((m.lambda[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn triangular_constant_right_moment() {
        let m = design_moments(Kernel::Triangular, 0, 1, Side::Right).unwrap();
        assert!((m.gamma[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn design_moments_match_quadrature() {
        // Simpson with 2000 panels is exact for these piecewise polynomials up
        // to degree 3 per panel and accurate to ~1e-14 beyond.
        for k in Kernel::ALL {
            for p in 0..=3 {
                for side in [Side::Left, Side::Right] {
                    let m = design_moments(k, p, p + 1, side).unwrap();
                    let (a, b) = match side {
                        Side::Left => (-1.0, 0.0),
                        _ => (0.0, 1.0),
                    };
                    for i in 0..=p {
                        for j in 0..=p {
                            let q = simpson(|u| k.weight(u) * u.powi((i + j) as i32), a, b, 4000);
                            assert!((m.gamma[(i, j)] - q).abs() < 1e-10, "{k} p={p} {side}");
                        }
                        let q = simpson(|u| k.weight(u) * u.powi((p + 1 + i) as i32), a, b, 4000);
                        assert!((m.lambda[i] - q).abs() < 1e-10);
                    }
                    assert_eq!(m.gamma.transpose(), m.gamma);
                    assert!(m.gamma.clone().cholesky().is_some());
                }
            }
        }
    }

    fn uniform_dataset(n: usize, seed: u64, gen: impl Fn(f64, &mut ChaCha8Rng) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y = gen(x, &mut rng);
                Observation::new(x, Some(u8::from(x >= 0.0)), y, None)
            })
            .collect();
        Dataset::new(obs, 0.0, Design::SharpRdd).unwrap()
    }

    #[test]
    fn cdf_of_independent_uniform() {
        let d = uniform_dataset(100_000, 1, |_, rng| rng.random::<f64>());
        let c = cfg(0.2, 1, vec![-0.5, 0.25, 0.5, 0.75]);
        for side in [Side::Left, Side::Right] {
            let fit = fit_local_cdf(&d, side, &c, &|_| 1.0).unwrap();
            // boundary local linear se is about 0.011 here
            assert!((fit.value[2] - 0.5).abs() < 0.045, "{}", fit.value[2]);
            // below every outcome the indicator responses are all zero
            assert_eq!(fit.value[0], 0.0);
            assert!(fit.effective_n > 1000);
        }
    }

    #[test]
    fn single_observation_window_is_insufficient() {
        let obs = vec![
            Observation::new(-0.9, Some(0), 0.0, None),
            Observation::new(-0.8, Some(0), 0.0, None),
            Observation::new(0.05, Some(1), 0.0, None),
            Observation::new(0.9, Some(1), 0.0, None),
        ];
        let d = Dataset::new(obs, 0.0, Design::SharpRdd).unwrap();
        let err = fit_local_cdf(&d, Side::Right, &cfg(0.2, 1, vec![0.0]), &|_| 1.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { effective_n: 1, .. }));
    }

    #[test]
    fn identical_running_values_are_singular() {
        let mut obs: Vec<_> = (0..10).map(|_| Observation::new(0.1, Some(1), 0.0, None)).collect();
        obs.push(Observation::new(-0.5, Some(0), 0.0, None));
        obs.push(Observation::new(-0.6, Some(0), 0.0, None));
        let d = Dataset::new(obs, 0.0, Design::SharpRdd).unwrap();
        let err = fit_local_mean(&d, Side::Right, &cfg(0.5, 1, vec![0.0]), &|o| o.y).unwrap_err();
        assert!(matches!(err, Error::SingularFit { side: Side::Right }));
    }

    #[test]
    fn linear_cdf_has_vanishing_bias() {
        // F(y|x) = y + 0.2 x y (1 - y) is linear in x: Y = mixture draw.
        let d = uniform_dataset(100_000, 2, |x, rng| {
            // inverse-CDF draw from F(y|x) = y + c y (1-y), c = 0.2 x
            let c = 0.2 * x;
            let u: f64 = rng.random();
            if c.abs() < 1e-12 {
                u
            } else {
                let a = -c;
                let b = 1.0 + c;
                (-b + (b * b + 4.0 * a * u).sqrt()) / (2.0 * a)
            }
        });
        let c = cfg(0.3, 1, vec![0.25, 0.5, 0.75]);
        for side in [Side::Left, Side::Right] {
            let fit = fit_local_cdf(&d, side, &c, &|_| 1.0).unwrap();
            let bc = bias_correct(&fit, &c, &d, &|_| 1.0).unwrap();
            for b in bc.bias.as_ref().unwrap() {
                assert!(b.abs() < 0.02, "bias {b}");
            }
        }
    }

    #[test]
    fn bias_scales_with_bandwidth_power() {
        // F(y|x) = (1 - pi(x)) G0(y) + pi(x) G1(y), pi(x) = 0.05 + 0.9 x^2: exactly
        // quadratic in x, so the pilot is unbiased and B(h) = c h^2 * 0.9 (G1 - G0).
        let d = uniform_dataset(400_000, 3, |x, rng| {
            let pi = 0.05 + 0.9 * x * x;
            let z: f64 = rng.sample(StandardNormal);
            if rng.random::<f64>() < pi {
                2.0 + z
            } else {
                -2.0 + z
            }
        });
        let ys: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let p = 1;
        let norm = |h: f64| {
            let c = cfg(h, p, ys.clone());
            let fit = fit_local_cdf(&d, Side::Right, &c, &|_| 1.0).unwrap();
            let bc = bias_correct(&fit, &c, &d, &|_| 1.0).unwrap();
            bc.bias.unwrap().iter().map(|b| b * b).sum::<f64>().sqrt()
        };
        let ratio = norm(1.0) / norm(0.5);
        let target = 2f64.powi(p as i32 + 1);
        assert!((ratio / target - 1.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn flat_outcome_has_zero_bias_off_atom() {
        let d = uniform_dataset(2000, 4, |_, _| 3.0);
        let c = cfg(0.5, 2, vec![1.0, 2.0, 4.0, 5.0]);
        let fit = fit_local_cdf(&d, Side::Left, &c, &|_| 1.0).unwrap();
        let bc = bias_correct(&fit, &c, &d, &|_| 1.0).unwrap();
        for (j, b) in bc.bias.unwrap().iter().enumerate() {
            assert!(b.abs() < 1e-10, "y index {j}: {b}");
        }
        assert!((bc.value[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_response_reproduced() {
        let d = uniform_dataset(5000, 5, |x, _| x);
        let c = cfg(0.3, 1, vec![0.0]);
        let fit = fit_local_mean(&d, Side::Right, &c, &|o| o.treated()).unwrap();
        assert!((fit.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_response_slope_recovered() {
        let d = uniform_dataset(5000, 6, |x, _| x);
        let c = cfg(0.3, 1, vec![0.0]);
        let fit = fit_local_mean(&d, Side::Right, &c, &|o| 2.0 * o.x.max(0.0)).unwrap();
        assert!((fit.slope.unwrap() - 2.0).abs() < 1e-8);
        assert!(fit.value.abs() < 1e-8);
    }

    #[test]
    fn quadratic_mean_intercept() {
        let d = uniform_dataset(100_000, 7, |x, rng| {
            0.5 * x + x * x + rng.sample::<f64, _>(StandardNormal)
        });
        let c = cfg(0.3, 2, vec![0.0]);
        let fit = fit_local_mean(&d, Side::Left, &c, &|o| o.y).unwrap();
        // se of a boundary local quadratic intercept with ~15k obs is ~0.03
        assert!(fit.value.abs() < 0.09, "{}", fit.value);
    }

    #[test]
    fn polynomial_reproduction_is_exact() {
        let d = uniform_dataset(3000, 8, |x, _| x);
        for p in 0..=3usize {
            let c = cfg(0.4, p, vec![0.0]);
            let coefs = [0.7, -1.3, 0.4, 2.0];
            let resp = |o: &Observation| {
                let z = o.x / 0.4;
                (0..=p).map(|k| coefs[k] * z.powi(k as i32)).sum::<f64>()
            };
            for side in [Side::Left, Side::Right] {
                let fit = fit_local_mean(&d, side, &c, &resp).unwrap();
                assert!((fit.value - 0.7).abs() < 1e-8);
                if p >= 1 {
                    assert!((fit.slope.unwrap() - (-1.3 / 0.4)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn observations_outside_window_do_not_matter() {
        let d = uniform_dataset(4000, 9, |x, rng| x + rng.random::<f64>());
        let c = cfg(0.25, 2, (0..50).map(|i| -1.0 + 0.06 * i as f64).collect());
        let base = fit_local_cdf(&d, Side::Right, &c, &|_| 1.0).unwrap();
        let perturbed: Vec<Observation> = d
            .observations()
            .iter()
            .map(|o| {
                if o.x.abs() > 0.25 {
                    Observation { y: o.y * 7.0 - 3.0, ..*o }
                } else {
                    *o
                }
            })
            .collect();
        let d2 = Dataset::new(perturbed, 0.0, Design::SharpRdd).unwrap();
        let again = fit_local_cdf(&d2, Side::Right, &c, &|_| 1.0).unwrap();
        assert_eq!(base.coeffs, again.coeffs);
    }

    #[test]
    fn local_constant_cdf_is_monotone() {
        let d = uniform_dataset(3000, 10, |x, rng| x + rng.sample::<f64, _>(StandardNormal));
        let c = cfg(0.3, 0, (0..200).map(|i| -4.0 + 0.04 * i as f64).collect());
        let fit = fit_local_cdf(&d, Side::Left, &c, &|_| 1.0).unwrap();
        assert!(fit.value.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit.slope.is_none());
    }

    #[test]
    fn density_of_independent_normal() {
        let d = uniform_dataset(100_000, 11, |_, rng| rng.sample(StandardNormal));
        let c = cfg(0.3, 1, vec![-40.0, 0.0]);
        let h_y = default_density_bandwidth(&d, &c, Side::Both);
        let fit = fit_conditional_density(&d, &c, h_y).unwrap();
        assert!((fit.values[1] - 0.3989).abs() < 0.03, "{}", fit.values[1]);
        assert_eq!(fit.values[0], fit.floor);
        assert_eq!(fit.floored, 1);
    }

    #[test]
    fn point_mass_density_is_large_and_finite() {
        let d = uniform_dataset(1000, 12, |_, _| 2.0);
        let c = cfg(0.5, 1, vec![2.0]);
        let h_y = 0.1;
        let fit = fit_conditional_density(&d, &c, h_y).unwrap();
        let v = fit.values[0];
        assert!(v.is_finite());
        assert!(v >= 0.5 * Kernel::Triangular.weight(0.0) / h_y, "{v}");
    }

    #[test]
    fn running_density_of_uniform() {
        let d = uniform_dataset(200_000, 13, |x, _| x);
        let f = running_density_at_cutoff(&d, 0.0, 0.2, Kernel::Triangular).unwrap();
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn sym_factor_detects_singularity() {
        assert!(SymFactor::new(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
        let f = SymFactor::new(&[4.0, 2.0, 2.0, 3.0], 2).unwrap();
        let mut x = [0.0; 2];
        f.solve(&[2.0, 1.0], &mut x);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
    }
}
