//! Multiplier bootstrap of the quantile-effect process and the inference
//! built on it: uniform bands, interval estimates for `Psi^2`, the covariance
//! kernel and its spectrum, and the two tests of `Psi = 0`.
//!
//! Each one-sided CDF estimate is asymptotically linear,
//! `F_hat(y) - F(y) ~ (nh)^-1 sum_i k(z_i) [1(Y_i <= y) - F(y | X_i)] / f_X(x0)`
//! with `k` the equivalent kernel of the (bias-corrected) local polynomial
//! intercept. A bootstrap draw replaces the sum by `sum_i xi_i k(z_i) e_i(y)`
//! with standard normal `xi_i` and estimated residuals `e_i`, and is mapped to
//! the quantile scale through `-nu(Q(u)) / f(Q(u) | x0)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Observation, Side};
use crate::error::{Error, Result};
use crate::locfit::{self, design_moments, regressors, CdfFit, DensityFit, FitConfig, Kernel};
use crate::pipeline::{
    estimate_sharp, EstimationOptions, FuzzyEstimate, KinkEstimate, SharpEstimate,
};
use crate::quantiles::{integrate, trapezoid_weights, QuantileCurve};

/// Default bootstrap replications.
pub const DEFAULT_REPLICATIONS: usize = 1000;
/// Default Monte Carlo draws for the eigenvalue test.
pub const DEFAULT_MC_DRAWS: usize = 100_000;
/// Default eigenvalue decay exponent for the truncation rule.
pub const DEFAULT_BETA: f64 = 2.0;

const BOOTSTRAP_DOMAIN: u64 = 0x6d75_6c74_6970_6c79;
const CHAOS_DOMAIN: u64 = 0x6368_616f_735f_7465;
const CHAOS_CHUNK: usize = 4096;

/// Replicated draws of the scaled quantile-effect process on a u-grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapEnsemble {
    pub u_grid: Vec<f64>,
    /// Row-major `replications x u_grid.len()`.
    pub draws: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// `nh` for discontinuities, `nh^3` for kinks.
    pub scaling: f64,
    pub warnings: Vec<String>,
}

impl BootstrapEnsemble {
    pub fn n_u(&self) -> usize {
        self.u_grid.len()
    }

    pub fn draw(&self, b: usize) -> &[f64] {
        let m = self.n_u();
        &self.draws[b * m..(b + 1) * m]
    }
}

/// Per-observation scaled equivalent-kernel weights `row' r(z) K(z)`.
struct EquivalentKernel {
    kernel: Kernel,
    order: usize,
    row: Vec<f64>,
    /// Bias pilot correction: `(c, e_{p+1}' Gamma_q^{-1})`.
    pilot: Option<(f64, Vec<f64>)>,
}

impl EquivalentKernel {
    fn level(kernel: Kernel, order: usize, side: Side, bias: bool) -> Result<Self> {
        let m = design_moments(kernel, order, order + 1, side)?;
        let row = m.inverse_row(0)?.iter().copied().collect();
        let pilot = if bias {
            let c = m.bias_constant()?;
            let mq = design_moments(kernel, order + 1, order + 2, side)?;
            Some((c, mq.inverse_row(order + 1)?.iter().copied().collect()))
        } else {
            None
        };
        Ok(Self {
            kernel,
            order,
            row,
            pilot,
        })
    }

    fn slope(kernel: Kernel, order: usize, side: Side) -> Result<Self> {
        let m = design_moments(kernel, order, order + 1, side)?;
        Ok(Self {
            kernel,
            order,
            row: m.inverse_row(1)?.iter().copied().collect(),
            pilot: None,
        })
    }

    fn weight(&self, z: f64) -> f64 {
        let k = self.kernel.weight(z);
        if k == 0.0 {
            return 0.0;
        }
        let mut r = [0.0; 6];
        regressors(z, self.order + 1, &mut r);
        let mut v: f64 = self.row.iter().zip(&r).map(|(a, b)| a * b).sum();
        if let Some((c, prow)) = &self.pilot {
            v -= c * prow.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        }
        v * k
    }
}

/// Polynomial model of a conditional response at `X_i`, from fit coefficients.
fn poly_at(coef: &[f64], z: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

fn residual_model(fit: &CdfFit) -> &Vec<Vec<f64>> {
    fit.pilot_coeffs.as_ref().unwrap_or(&fit.coeffs)
}

/// Linearisation of an estimator: process columns, their per-observation
/// residual contributions, and the map from columns to the u-grid.
struct Linearization {
    /// Dataset indices carrying a multiplier, ascending.
    obs: Vec<usize>,
    /// `obs.len() x columns` matrix of `omega_i * e_i(column)`.
    contrib: DMatrix<f64>,
    /// For each u, sparse `(column, coefficient)` terms.
    map: Vec<Vec<(usize, f64)>>,
}

impl Linearization {
    fn draws(&self, u_grid: &[f64], replications: usize, seed: u64, scaling: f64) -> BootstrapEnsemble {
        let nobs = self.obs.len();
        let mut xi = DMatrix::<f64>::zeros(replications, nobs);
        for b in 0..replications {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BOOTSTRAP_DOMAIN);
            rng.set_stream(b as u64);
            for j in 0..nobs {
                xi[(b, j)] = StandardNormal.sample(&mut rng);
            }
        }
        let v = &xi * &self.contrib;
        let n_u = u_grid.len();
        let mut draws = vec![0.0; replications * n_u];
        for b in 0..replications {
            for (k, terms) in self.map.iter().enumerate() {
                draws[b * n_u + k] = terms.iter().map(|&(c, w)| w * v[(b, c)]).sum();
            }
        }
        BootstrapEnsemble {
            u_grid: u_grid.to_vec(),
            draws,
            replications,
            seed,
            scaling,
            warnings: Vec::new(),
        }
    }
}

/// Registry of `(arm, y index)` process columns.
#[derive(Default)]
struct Columns {
    keys: Vec<(usize, usize)>,
}

impl Columns {
    fn get(&mut self, arm: usize, j: usize) -> usize {
        if let Some(p) = self.keys.iter().position(|&k| k == (arm, j)) {
            p
        } else {
            self.keys.push((arm, j));
            self.keys.len() - 1
        }
    }
}

fn grid_index(grid: &[f64], y: f64) -> usize {
    let k = grid.partition_point(|&g| g < y);
    if k == grid.len() {
        k - 1
    } else if k > 0 && (y - grid[k - 1]) < (grid[k] - y) {
        k - 1
    } else {
        k
    }
}

/// Window membership and `omega_i = k(z_i) / (sqrt(nh) f_X)` per side.
fn side_weights(
    d: &Dataset,
    fit: &FitConfig,
    side: Side,
    ek: &EquivalentKernel,
    norm: f64,
) -> Vec<(usize, f64, f64)> {
    d.observations()
        .iter()
        .enumerate()
        .filter(|(_, o)| side.contains(o.x, fit.cutoff))
        .filter_map(|(i, o)| {
            let z = (o.x - fit.cutoff) / fit.bandwidth;
            let w = ek.weight(z);
            (fit.kernel.weight(z) > 0.0).then_some((i, z, w / norm))
        })
        .collect()
}

type Residual<'a> = Box<dyn Fn(&Observation, f64, usize, usize) -> f64 + 'a>;

/// Assemble the linearisation from per-side residual rules
/// `resid(obs, z, arm, y_index)` and a column map built from registered columns.
fn assemble(
    d: &Dataset,
    sides: Vec<(Vec<(usize, f64, f64)>, Residual<'_>)>,
    columns: &Columns,
    map: Vec<Vec<(usize, f64)>>,
) -> Linearization {
    let mut obs: Vec<usize> = sides.iter().flat_map(|(w, _)| w.iter().map(|t| t.0)).collect();
    obs.sort_unstable();
    obs.dedup();
    let row_of = |i: usize| obs.binary_search(&i).expect("registered observation");
    let mut contrib = DMatrix::<f64>::zeros(obs.len(), columns.keys.len());
    let data = d.observations();
    for (weights, resid) in &sides {
        for &(i, z, omega) in weights {
            if omega == 0.0 {
                continue;
            }
            let r = row_of(i);
            for (c, &(arm, j)) in columns.keys.iter().enumerate() {
                contrib[(r, c)] += omega * resid(&data[i], z, arm, j);
            }
        }
    }
    Linearization { obs, contrib, map }
}

fn check_replications(replications: usize) -> Result<()> {
    if replications < 2 {
        return Err(Error::InvalidConfig("need at least 2 bootstrap replications".into()));
    }
    Ok(())
}

fn floor_warning(fits: &[&DensityFit], idx: &[Vec<usize>]) -> Option<String> {
    let total: usize = idx.iter().map(Vec::len).sum();
    let floored: usize = fits
        .iter()
        .zip(idx)
        .map(|(f, ix)| ix.iter().filter(|&&j| f.values[j] <= f.floor).count())
        .sum();
    (total > 0 && floored as f64 > 0.1 * total as f64).then(|| {
        format!(
            "DensityFloorDominant: {:.1}% of quantile points use the density floor",
            100.0 * floored as f64 / total as f64
        )
    })
}

/// Bootstrap of `sqrt(nh) (dQ* - dQ_hat)` for a sharp discontinuity.
pub fn bootstrap_sharp(
    d: &Dataset,
    est: &SharpEstimate,
    replications: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    check_replications(replications)?;
    let fit = &est.options.fit;
    let nh = d.len() as f64 * fit.bandwidth;
    let f_x = locfit::running_density_at_cutoff(d, fit.cutoff, fit.bandwidth, fit.kernel)?;
    let norm = nh.sqrt() * f_x;
    let bias = est.options.bias_correction;
    let y_grid = &fit.y_grid;

    let mut cols = Columns::default();
    let mut map = Vec::with_capacity(est.dq.len());
    let mut idx1 = Vec::new();
    let mut idx0 = Vec::new();
    for (q1, q0) in est.q1.values.iter().zip(&est.q0.values) {
        let j1 = grid_index(y_grid, *q1);
        let j0 = grid_index(y_grid, *q0);
        idx1.push(j1);
        idx0.push(j0);
        map.push(vec![
            (cols.get(1, j1), -1.0 / est.density_right.values[j1]),
            (cols.get(0, j0), 1.0 / est.density_left.values[j0]),
        ]);
    }
    let side_term = |side: Side| -> Result<(Vec<(usize, f64, f64)>, Residual<'_>)> {
        let (arm, fit_s) = match side {
            Side::Right => (1, &est.right),
            _ => (0, &est.left),
        };
        let ek = EquivalentKernel::level(fit.kernel, fit.order, side, bias)?;
        let w = side_weights(d, fit, side, &ek, norm);
        let model = residual_model(fit_s);
        let resid: Residual<'_> = Box::new(move |o: &Observation, z: f64, a: usize, j: usize| {
            if a != arm {
                return 0.0;
            }
            let ind = if o.y <= y_grid[j] { 1.0 } else { 0.0 };
            ind - poly_at(&model[j], z)
        });
        Ok((w, resid))
    };
    let lin = assemble(
        d,
        vec![side_term(Side::Right)?, side_term(Side::Left)?],
        &cols,
        map,
    );
    let mut e = lin.draws(&est.dq.u_grid, replications, seed, nh);
    e.warnings.extend(floor_warning(&[&est.density_right, &est.density_left], &[idx1, idx0]));
    Ok(e)
}

/// Estimate the sharp design with default options derived from `cfg`, then bootstrap.
pub fn multiplier_bootstrap(
    d: &Dataset,
    cfg: &FitConfig,
    replications: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    let mut opts = EstimationOptions::for_dataset(d);
    opts.fit = cfg.clone();
    let est = estimate_sharp(d, &opts)?;
    bootstrap_sharp(d, &est, replications, seed)
}

/// Bootstrap for the fuzzy design, linearising the Wald ratios.
pub fn bootstrap_fuzzy(
    d: &Dataset,
    est: &FuzzyEstimate,
    replications: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    check_replications(replications)?;
    let fit = &est.options.fit;
    let nh = d.len() as f64 * fit.bandwidth;
    let f_x = locfit::running_density_at_cutoff(d, fit.cutoff, fit.bandwidth, fit.kernel)?;
    let norm = nh.sqrt() * f_x;
    let bias = est.options.bias_correction;
    let y_grid = &fit.y_grid;
    let jump = est.compliers.first_stage;

    let mut cols = Columns::default();
    let mut map = Vec::with_capacity(est.dq.len());
    let mut idx1 = Vec::new();
    let mut idx0 = Vec::new();
    for (q1, q0) in est.q1.values.iter().zip(&est.q0.values) {
        let j1 = grid_index(y_grid, *q1);
        let j0 = grid_index(y_grid, *q0);
        idx1.push(j1);
        idx0.push(j0);
        map.push(vec![
            (cols.get(1, j1), -1.0 / est.density_treated.values[j1]),
            (cols.get(0, j0), 1.0 / est.density_untreated.values[j0]),
        ]);
    }
    let fc = [&est.compliers.untreated, &est.compliers.treated];
    let side_term = |side: Side| -> Result<(Vec<(usize, f64, f64)>, Residual<'_>)> {
        let ek = EquivalentKernel::level(fit.kernel, fit.order, side, bias)?;
        let w = side_weights(d, fit, side, &ek, norm);
        let (g1, g0, pi) = match side {
            Side::Right => (&est.g1_right, &est.g0_right, &est.pi_right),
            _ => (&est.g1_left, &est.g0_left, &est.pi_left),
        };
        let sign = if side == Side::Right { 1.0 } else { -1.0 };
        let m1 = residual_model(g1);
        let m0 = residual_model(g0);
        let pic = pi.coeffs.clone();
        let resid: Residual<'_> = Box::new(move |o: &Observation, z: f64, arm: usize, j: usize| {
            let ind = if o.y <= y_grid[j] { 1.0 } else { 0.0 };
            let a = o.treated();
            let pi_x = poly_at(&pic, z);
            if arm == 1 {
                let num = a * ind - poly_at(&m1[j], z);
                sign * (num - fc[1][j] * (a - pi_x)) / jump
            } else {
                let num = (1.0 - a) * ind - poly_at(&m0[j], z);
                sign * (num - fc[0][j] * ((1.0 - a) - (1.0 - pi_x))) / (-jump)
            }
        });
        Ok((w, resid))
    };
    let lin = assemble(d, vec![side_term(Side::Right)?, side_term(Side::Left)?], &cols, map);
    let mut e = lin.draws(&est.dq.u_grid, replications, seed, nh);
    e.warnings.extend(floor_warning(
        &[&est.density_treated, &est.density_untreated],
        &[idx1, idx0],
    ));
    Ok(e)
}

/// Bootstrap of `sqrt(nh^3) (dQ'* - dQ'_hat)` for (fuzzy) kinks.
pub fn bootstrap_kink(
    d: &Dataset,
    est: &KinkEstimate,
    replications: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    check_replications(replications)?;
    let fit = &est.options.fit;
    let n = d.len() as f64;
    let nh = n * fit.bandwidth;
    let f_x = locfit::running_density_at_cutoff(d, fit.cutoff, fit.bandwidth, fit.kernel)?;
    let norm = nh.sqrt() * f_x;
    let y_grid = &fit.y_grid;
    let fs = est.first_stage;

    const FIRST_STAGE_ARM: usize = 2;
    let mut cols = Columns::default();
    let mut map = Vec::with_capacity(est.q_pooled.len());
    let mut idx = Vec::new();
    let fs_col = est.first_stage_fits.as_ref().map(|_| cols.get(FIRST_STAGE_ARM, 0));
    for (q, dqp) in est.q_pooled.values.iter().zip(&est.slope_curve.curve.values) {
        let j = grid_index(y_grid, *q);
        idx.push(j);
        let f = est.density.values[j];
        let mut terms = vec![(cols.get(0, j), -1.0 / (fs * f))];
        if let Some(c) = fs_col {
            terms.push((c, -dqp / fs));
        }
        map.push(terms);
    }
    let side_term = |side: Side| -> Result<(Vec<(usize, f64, f64)>, Residual<'_>)> {
        let ek = EquivalentKernel::slope(fit.kernel, fit.order, side)?;
        let w = side_weights(d, fit, side, &ek, norm);
        let (cdf, tfit) = match side {
            Side::Right => (&est.right, est.first_stage_fits.as_ref().map(|f| &f.0)),
            _ => (&est.left, est.first_stage_fits.as_ref().map(|f| &f.1)),
        };
        let sign = if side == Side::Right { 1.0 } else { -1.0 };
        let model = &cdf.coeffs;
        let tcoef = tfit.map(|f| f.coeffs.clone());
        let resid: Residual<'_> = Box::new(move |o: &Observation, z: f64, arm: usize, j: usize| {
            if arm == FIRST_STAGE_ARM {
                let c = tcoef.as_ref().expect("first-stage fit");
                return sign * (o.t.unwrap_or(0.0) - poly_at(c, z));
            }
            let ind = if o.y <= y_grid[j] { 1.0 } else { 0.0 };
            sign * (ind - poly_at(&model[j], z))
        });
        Ok((w, resid))
    };
    let lin = assemble(d, vec![side_term(Side::Right)?, side_term(Side::Left)?], &cols, map);
    let scaling = nh * fit.bandwidth * fit.bandwidth;
    let mut e = lin.draws(&est.slope_curve.curve.u_grid, replications, seed, scaling);
    e.warnings.extend(floor_warning(&[&est.density], &[idx]));
    Ok(e)
}

fn order_statistic(mut values: Vec<f64>, level: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = ((level * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[k - 1]
}

/// Empirical `1 - alpha` quantile of `sup_u |draw(u)|`.
pub fn sup_band_quantile(e: &BootstrapEnsemble, alpha: f64) -> f64 {
    let sups: Vec<f64> = (0..e.replications)
        .map(|b| e.draw(b).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    order_statistic(sups, 1.0 - alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Band,
    Conservative,
    KinkConservative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalResult {
    pub method: IntervalMethod,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub alpha: Option<f64>,
}

impl IntervalResult {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// `[int M_lo, int M_hi]` from the band `dQ -+ c / sqrt(scaling)`.
pub fn band_interval_psi2(dq: &QuantileCurve, c_hat: f64, scaling: f64) -> IntervalResult {
    let half = c_hat / scaling.sqrt();
    let mut lo = Vec::with_capacity(dq.len());
    let mut hi = Vec::with_capacity(dq.len());
    for &v in &dq.values {
        let a = v - half;
        let b = v + half;
        hi.push((a * a).max(b * b));
        lo.push(a.max(0.0).powi(2) + b.min(0.0).powi(2));
    }
    IntervalResult {
        method: IntervalMethod::Band,
        estimate: dq.integrate_map(|v| v * v),
        lo: integrate(&dq.u_grid, &lo),
        hi: integrate(&dq.u_grid, &hi),
        alpha: None,
    }
}

fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// `Psi^2 -+ z_{1-alpha/2} sqrt(s^2 + c^2 / scaling)`, floored at zero.
pub fn conservative_interval(psi2_hat: f64, s_hat: f64, c_const: f64, nh: f64, alpha: f64) -> IntervalResult {
    let half = normal_quantile(1.0 - alpha / 2.0) * (s_hat * s_hat + c_const * c_const / nh).sqrt();
    IntervalResult {
        method: IntervalMethod::Conservative,
        estimate: psi2_hat,
        lo: (psi2_hat - half).max(0.0),
        hi: psi2_hat + half,
        alpha: Some(alpha),
    }
}

/// Kink version with `n h^3` in place of `n h`.
pub fn kink_conservative_interval(
    psi_prime2_hat: f64,
    s_hat: f64,
    c_const: f64,
    n: f64,
    h: f64,
    alpha: f64,
) -> IntervalResult {
    IntervalResult {
        method: IntervalMethod::KinkConservative,
        ..conservative_interval(psi_prime2_hat, s_hat, c_const, n * h * h * h, alpha)
    }
}

/// Bootstrap standard deviation of `int (dQ + draw / sqrt(scaling))^2`.
pub fn bootstrap_psi2_sd(e: &BootstrapEnsemble, dq: &QuantileCurve) -> Result<f64> {
    if dq.u_grid != e.u_grid {
        return Err(Error::GridMismatch);
    }
    let w = trapezoid_weights(&e.u_grid);
    let scale = 1.0 / e.scaling.sqrt();
    let vals: Vec<f64> = (0..e.replications)
        .map(|b| {
            e.draw(b)
                .iter()
                .zip(&dq.values)
                .zip(&w)
                .map(|((g, v), wi)| wi * (v + g * scale).powi(2))
                .sum()
        })
        .collect();
    Ok(locfit::sample_sd(vals.into_iter()))
}

/// Empirical covariance of the bootstrap draws, with runs of identical
/// adjacent u-columns merged (their quadrature weights summed).
#[derive(Debug, Clone, PartialEq)]
pub struct CovKernelEstimate {
    /// First u of each merged run.
    pub u_grid: Vec<f64>,
    /// Quadrature weight of each run.
    pub weights: Vec<f64>,
    /// Number of original grid points in each run.
    pub multiplicity: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

impl CovKernelEstimate {
    /// Kernel on the original (unmerged) grid.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let owner: Vec<usize> = self
            .multiplicity
            .iter()
            .enumerate()
            .flat_map(|(g, &m)| std::iter::repeat_n(g, m))
            .collect();
        DMatrix::from_fn(owner.len(), owner.len(), |i, j| self.matrix[(owner[i], owner[j])])
    }

    /// `int kappa(u, u) du`.
    pub fn trace_integral(&self) -> f64 {
        (0..self.weights.len()).map(|i| self.weights[i] * self.matrix[(i, i)]).sum()
    }

    /// `2 int int kappa(u, v)^2 du dv`.
    pub fn second_moment(&self) -> f64 {
        let m = self.weights.len();
        let mut s = 0.0;
        for j in 0..m {
            for i in 0..m {
                s += self.weights[i] * self.weights[j] * self.matrix[(i, j)].powi(2);
            }
        }
        2.0 * s
    }
}

pub fn estimate_cov_kernel(e: &BootstrapEnsemble) -> Result<CovKernelEstimate> {
    if e.replications < 2 {
        return Err(Error::InvalidConfig("need at least 2 bootstrap replications".into()));
    }
    let n_u = e.n_u();
    let w = trapezoid_weights(&e.u_grid);
    let mut starts = Vec::new();
    let mut weights = Vec::new();
    let mut multiplicity: Vec<usize> = Vec::new();
    for k in 0..n_u {
        let same = k > 0 && (0..e.replications).all(|b| e.draws[b * n_u + k] == e.draws[b * n_u + k - 1]);
        if same {
            *weights.last_mut().expect("run") += w[k];
            *multiplicity.last_mut().expect("run") += 1;
        } else {
            starts.push(k);
            weights.push(w[k]);
            multiplicity.push(1);
        }
    }
    let m = starts.len();
    let bn = e.replications;
    let mut centered = DMatrix::<f64>::zeros(bn, m);
    for (c, &k) in starts.iter().enumerate() {
        let mean = (0..bn).map(|b| e.draws[b * n_u + k]).sum::<f64>() / bn as f64;
        for b in 0..bn {
            centered[(b, c)] = e.draws[b * n_u + k] - mean;
        }
    }
    let mut cov = centered.tr_mul(&centered) / (bn - 1) as f64;
    let sym = (&cov + cov.transpose()) * 0.5;
    cov = sym;
    Ok(CovKernelEstimate {
        u_grid: starts.iter().map(|&k| e.u_grid[k]).collect(),
        weights,
        multiplicity,
        matrix: cov,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    /// Nonincreasing, clipped at zero.
    pub eigenvalues: Vec<f64>,
    pub retained: Option<usize>,
}

/// Eigenvalues of the integral operator with kernel `kappa`, via the
/// symmetric matrix `W^{1/2} kappa W^{1/2}`.
pub fn eigen_spectrum(k: &CovKernelEstimate) -> Spectrum {
    let s: Vec<f64> = k.weights.iter().map(|w| w.sqrt()).collect();
    let m = k.matrix.nrows();
    let a = DMatrix::from_fn(m, m, |i, j| s[i] * k.matrix[(i, j)] * s[j]);
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Spectrum {
        eigenvalues: ev,
        retained: None,
    }
}

/// `K_n = ceil(r_n^(-2 / (2 beta - 1)))`, capped at `max`.
pub fn choose_truncation(r_n: f64, beta: f64, max: usize) -> Result<usize> {
    if !(beta > 1.0) {
        return Err(Error::BadDecayParam(beta));
    }
    if !(r_n > 0.0 && r_n < 1.0) {
        return Err(Error::InvalidConfig(format!("rate {r_n} not in (0, 1)")));
    }
    let k = r_n.powf(-2.0 / (2.0 * beta - 1.0)).ceil() as usize;
    Ok(k.clamp(1, max.max(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Eigenvalue,
    Conservative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub method: TestMethod,
    /// `nh Psi_hat^2`.
    pub statistic: f64,
    pub critical_value: f64,
    pub alpha: f64,
    pub rejected: bool,
    pub truncation: Option<usize>,
    pub warnings: Vec<String>,
}

fn chaos_quantile(eigenvalues: &[f64], k: usize, draws: usize, alpha: f64, seed: u64) -> (f64, Option<f64>) {
    let k2 = (2 * k).min(eigenvalues.len());
    let mut t1 = Vec::with_capacity(draws);
    let mut t2 = Vec::with_capacity(draws);
    let chunks = draws.div_ceil(CHAOS_CHUNK);
    for c in 0..chunks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CHAOS_DOMAIN);
        rng.set_stream(c as u64);
        let len = CHAOS_CHUNK.min(draws - c * CHAOS_CHUNK);
        for _ in 0..len {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for (j, lam) in eigenvalues.iter().take(k2).enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = lam * z * z;
                if j < k {
                    s1 += v;
                }
                s2 += v;
            }
            t1.push(s1);
            t2.push(s2);
        }
    }
    let c1 = order_statistic(t1, 1.0 - alpha);
    let c2 = (k2 > k).then(|| order_statistic(t2, 1.0 - alpha));
    (c1, c2)
}

/// Simulated critical value of `sum_{k <= K_n} lambda_k Z_k^2`; rejects when
/// `nh Psi^2` exceeds it.
pub fn eigenvalue_test(
    psi2_hat: f64,
    spectrum: &Spectrum,
    k_n: usize,
    mc_draws: usize,
    alpha: f64,
    seed: u64,
    nh: f64,
) -> Result<TestResult> {
    let lead = spectrum.eigenvalues.first().copied().unwrap_or(0.0);
    if !(lead > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    if mc_draws == 0 {
        return Err(Error::InvalidConfig("need at least one Monte Carlo draw".into()));
    }
    let k = k_n.clamp(1, spectrum.eigenvalues.len());
    let (crit, doubled) = chaos_quantile(&spectrum.eigenvalues, k, mc_draws, alpha, seed);
    let mut warnings = Vec::new();
    if let Some(c2) = doubled {
        if (c2 - crit).abs() > 0.05 * crit {
            warnings.push(format!(
                "critical value moves from {crit:.4} to {c2:.4} when the truncation doubles"
            ));
        }
    }
    let statistic = nh * psi2_hat;
    Ok(TestResult {
        method: TestMethod::Eigenvalue,
        statistic,
        critical_value: crit,
        alpha,
        rejected: statistic > crit,
        truncation: Some(k),
        warnings,
    })
}

/// Cantelli bound `mu + sigma sqrt((1 - alpha) / alpha)` on the chaos tail.
pub fn conservative_critical_value(k: &CovKernelEstimate, alpha: f64) -> f64 {
    let mu = k.trace_integral();
    let sigma = k.second_moment().max(0.0).sqrt();
    mu + sigma * ((1.0 - alpha) / alpha).sqrt()
}

pub fn conservative_test(psi2_hat: f64, k: &CovKernelEstimate, alpha: f64, nh: f64) -> TestResult {
    let crit = conservative_critical_value(k, alpha);
    let statistic = nh * psi2_hat;
    TestResult {
        method: TestMethod::Conservative,
        statistic,
        critical_value: crit,
        alpha,
        rejected: statistic > crit,
        truncation: None,
        warnings: Vec::new(),
    }
}

/// Conservative critical value computed from the draws without forming the
/// kernel: `mu = tr(W C)`, `sigma^2 = 2 ||W^{1/2} C W^{1/2}||_F^2`, using
/// whichever Gram matrix is smaller.
pub fn conservative_critical_value_from_draws(e: &BootstrapEnsemble, alpha: f64) -> f64 {
    let n_u = e.n_u();
    let bn = e.replications;
    let w = trapezoid_weights(&e.u_grid);
    let mut x = DMatrix::<f64>::zeros(bn, n_u);
    for k in 0..n_u {
        let mean = (0..bn).map(|b| e.draws[b * n_u + k]).sum::<f64>() / bn as f64;
        let s = (w[k] / (bn - 1) as f64).sqrt();
        for b in 0..bn {
            x[(b, k)] = (e.draws[b * n_u + k] - mean) * s;
        }
    }
    // W^{1/2} C W^{1/2} = X' X, whose nonzero spectrum matches X X'
    let gram = if bn <= n_u { &x * x.transpose() } else { x.tr_mul(&x) };
    let mu = gram.trace();
    let sigma = (2.0 * gram.norm_squared()).sqrt();
    mu + sigma * ((1.0 - alpha) / alpha).sqrt()
}

/// Column means and variances of the draws; handy diagnostics.
pub fn pointwise_moments(e: &BootstrapEnsemble) -> (DVector<f64>, DVector<f64>) {
    let n_u = e.n_u();
    let bn = e.replications as f64;
    let mut mean = DVector::zeros(n_u);
    let mut var = DVector::zeros(n_u);
    for k in 0..n_u {
        let m = (0..e.replications).map(|b| e.draws[b * n_u + k]).sum::<f64>() / bn;
        let v = (0..e.replications)
            .map(|b| (e.draws[b * n_u + k] - m).powi(2))
            .sum::<f64>()
            / (bn - 1.0);
        mean[k] = m;
        var[k] = v;
    }
    (mean, var)
}
