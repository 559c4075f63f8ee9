//! Distributional estimands built from quantile curves.
//!
//! All integrals use the trapezoid rule over the curve's own u-grid, so on a
//! grid that does not reach 0 and 1 the quantities refer to that range.

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::data::Design;
use crate::error::{Error, Result};
use crate::locfit::{CdfFit, DensityFit, PolyFit};
use crate::quantiles::{integrate, trapezoid_weights, CurveRole, QuantileCurve};

/// Default minimum absolute treatment-probability jump for fuzzy designs.
pub const DEFAULT_FIRST_STAGE_TOLERANCE: f64 = 0.02;
/// Default minimum absolute first-stage kink.
pub const DEFAULT_KINK_TOLERANCE: f64 = 1e-8;
/// Default L-moment truncation order.
pub const DEFAULT_LMOMENT_ORDER: usize = 10;
/// Largest order accepted by [`shifted_legendre`].
pub const MAX_LEGENDRE_ORDER: usize = 60;

fn same_grid(a: &QuantileCurve, b: &QuantileCurve) -> Result<()> {
    if a.u_grid != b.u_grid {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `Q1 - Q0` on their common grid.
pub fn quantile_effect_curve(q1: &QuantileCurve, q0: &QuantileCurve) -> Result<QuantileCurve> {
    same_grid(q1, q0)?;
    Ok(QuantileCurve {
        u_grid: q1.u_grid.clone(),
        values: q1.values.iter().zip(&q0.values).map(|(a, b)| a - b).collect(),
        trim: q1.trim.max(q0.trim),
        role: CurveRole::Effect,
        saturated: q1.saturated + q0.saturated,
    })
}

/// `sqrt(int dq^2)`.
pub fn wasserstein_effect(dq: &QuantileCurve) -> f64 {
    dq.integrate_map(|v| v * v).max(0.0).sqrt()
}

/// `int dq`.
pub fn mean_effect(dq: &QuantileCurve) -> f64 {
    integrate(&dq.u_grid, &dq.values)
}

/// `1 - (tau / psi)^2`, clamped to `[0, 1]`.
pub fn heterogeneity_index(psi: f64, tau: f64) -> Result<f64> {
    if psi <= 0.0 {
        return Err(Error::DegenerateNull);
    }
    debug_assert!(tau.abs() <= psi * (1.0 + 1e-10) + 1e-10);
    Ok((1.0 - (tau / psi).powi(2)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dominance {
    /// `None` when both parts vanish.
    pub rho: Option<f64>,
    pub psi2_plus: f64,
    pub psi2_minus: f64,
}

pub fn dominance(dq: &QuantileCurve) -> Dominance {
    let psi2_plus = dq.integrate_map(|v| v.max(0.0).powi(2));
    let psi2_minus = dq.integrate_map(|v| (-v).max(0.0).powi(2));
    let total = psi2_plus + psi2_minus;
    let rho = (total > 0.0).then(|| ((psi2_plus - psi2_minus) / total).clamp(-1.0, 1.0));
    Dominance {
        rho,
        psi2_plus,
        psi2_minus,
    }
}

/// `u -> dq(u)^2 / psi^2`.
pub fn contribution_curve(dq: &QuantileCurve, psi: f64) -> Result<QuantileCurve> {
    if !(psi > 0.0) {
        return Err(Error::DegenerateNull);
    }
    let psi2 = psi * psi;
    Ok(QuantileCurve {
        values: dq.values.iter().map(|v| v * v / psi2).collect(),
        role: CurveRole::Contribution,
        ..dq.clone()
    })
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e as i32)
}

/// `u = m * 2^-s` with integer `m` and `s >= 0`.
fn dyadic(u: f64) -> (BigInt, u32) {
    if u == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = u.to_bits();
    let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    let m = BigInt::from(sign) * BigInt::from(mant);
    if exp >= 0 {
        (m << exp as usize, 0)
    } else {
        (m, (-exp) as u32)
    }
}

fn binomial(n: u64, k: u64) -> BigInt {
    let mut acc = BigInt::from(1u8);
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Shifted Legendre polynomial `P*_k(u) = (-1)^k sum_j C(k,j) C(k+j,j) (-u)^j`,
/// evaluated exactly in integer arithmetic and rounded once.
pub fn shifted_legendre(k: usize, u: f64) -> Result<f64> {
    if k > MAX_LEGENDRE_ORDER {
        return Err(Error::OrderTooLarge(k));
    }
    if !u.is_finite() {
        return Err(Error::InvalidConfig(format!("cannot evaluate at {u}")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let (m, s) = dyadic(u);
    // S = sum_j c_j m^j 2^{s (k - j)}, P = S 2^{-s k}
    let mut sum = BigInt::zero();
    let mut m_pow = BigInt::from(1u8);
    for j in 0..=k {
        let c = binomial(k as u64, j as u64) * binomial((k + j) as u64, j as u64);
        let term = c * &m_pow << (s as usize * (k - j));
        if (k + j) % 2 == 0 {
            sum += term;
        } else {
            sum -= term;
        }
        m_pow *= &m;
    }
    if sum.is_zero() {
        return Ok(0.0);
    }
    let bits = sum.abs().bits() as i64;
    let shift = (bits - 64).max(0);
    let top = (&sum >> shift as usize).to_f64().unwrap_or(0.0);
    Ok(ldexp(top, shift - s as i64 * k as i64))
}

/// `P*_0(u) .. P*_{kmax}(u)` by the three-term recurrence.
pub fn shifted_legendre_all(kmax: usize, u: f64) -> Vec<f64> {
    let x = 2.0 * u - 1.0;
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(1.0);
    if kmax >= 1 {
        out.push(x);
    }
    for k in 1..kmax {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * out[k] - kf * out[k - 1]) / (kf + 1.0);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LMomentVector {
    /// `lambda_1 .. lambda_K`.
    pub values: Vec<f64>,
}

impl LMomentVector {
    pub fn order(&self) -> usize {
        self.values.len()
    }

    /// `lambda_k` for 1-based `k`.
    pub fn get(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.values.get(i).copied())
    }
}

/// `lambda_k = int Q P*_{k-1}` for `k = 1..=order`.
pub fn l_moments(q: &QuantileCurve, order: usize) -> LMomentVector {
    let w = trapezoid_weights(&q.u_grid);
    let mut values = vec![0.0; order];
    for ((&u, &v), &wi) in q.u_grid.iter().zip(&q.values).zip(&w) {
        if order == 0 {
            break;
        }
        let p = shifted_legendre_all(order - 1, u);
        for (k, pk) in p.iter().enumerate() {
            values[k] += wi * v * pk;
        }
    }
    LMomentVector { values }
}

/// Shares `R^2_k = (2k - 1) (delta lambda_k)^2 / psi^2` and the remainder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LMomentDecomposition {
    /// `R^2_1 .. R^2_K`.
    pub r2: Vec<f64>,
    /// `1 - sum R^2_k`, floored at zero.
    pub tail: f64,
    pub psi2: f64,
    pub delta_lambda: Vec<f64>,
}

impl LMomentDecomposition {
    /// `(R^2_1, .., R^2_{m-1}, share of k >= m)` where the last bucket folds in the tail.
    pub fn bucketed(&self, m: usize) -> Vec<f64> {
        let m = m.max(1);
        let mut out: Vec<f64> = self.r2.iter().take(m - 1).copied().collect();
        while out.len() < m - 1 {
            out.push(0.0);
        }
        let rest: f64 = self.r2.iter().skip(m - 1).sum::<f64>() + self.tail;
        out.push(rest);
        out
    }
}

/// Decomposition of an effect curve directly.
pub fn l_moment_decomposition_of(dq: &QuantileCurve, order: usize) -> Result<LMomentDecomposition> {
    let psi2 = dq.integrate_map(|v| v * v);
    if !(psi2 > 0.0) {
        return Err(Error::DegenerateNull);
    }
    let delta = l_moments(dq, order).values;
    let r2: Vec<f64> = delta
        .iter()
        .enumerate()
        .map(|(i, d)| ((2 * i + 1) as f64 * d * d / psi2).clamp(0.0, 1.0))
        .collect();
    let tail = (1.0 - r2.iter().sum::<f64>()).max(0.0);
    Ok(LMomentDecomposition {
        r2,
        tail,
        psi2,
        delta_lambda: delta,
    })
}

pub fn l_moment_decomposition(
    q1: &QuantileCurve,
    q0: &QuantileCurve,
    order: usize,
) -> Result<LMomentDecomposition> {
    let dq = quantile_effect_curve(q1, q0)?;
    l_moment_decomposition_of(&dq, order)
}

/// Headline summary of an effect curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectSummary {
    pub psi: f64,
    pub tau: f64,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub psi2_plus: f64,
    pub psi2_minus: f64,
    /// `R^2_1 .. R^2_K`, absent when the effect is identically zero.
    pub r2: Option<Vec<f64>>,
    pub r2_tail: Option<f64>,
    /// `tau^2 / psi^2`, the plug-in counterpart of `R^2_1`.
    pub r2_first_plugin: Option<f64>,
    pub trim: f64,
    pub design: Option<Design>,
    pub saturated: usize,
}

pub fn summarize(dq: &QuantileCurve, order: usize, design: Option<Design>) -> EffectSummary {
    let psi = wasserstein_effect(dq);
    let tau = mean_effect(dq);
    let dom = dominance(dq);
    let decomposition = l_moment_decomposition_of(dq, order).ok();
    EffectSummary {
        psi,
        tau,
        gamma: heterogeneity_index(psi, tau).ok(),
        rho: dom.rho,
        psi2_plus: dom.psi2_plus,
        psi2_minus: dom.psi2_minus,
        r2: decomposition.as_ref().map(|d| d.r2.clone()),
        r2_tail: decomposition.as_ref().map(|d| d.tail),
        r2_first_plugin: (psi > 0.0).then(|| (tau / psi).powi(2)),
        trim: dq.trim,
        design,
        saturated: dq.saturated,
    }
}

/// Complier CDFs from the local Wald ratios, before monotone repair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplierCdfs {
    pub y_grid: Vec<f64>,
    pub treated: Vec<f64>,
    pub untreated: Vec<f64>,
    /// Jump in the treatment probability at the cutoff.
    pub first_stage: f64,
    /// Smallest and largest raw ratio over both curves.
    pub raw_range: (f64, f64),
}

/// `F_{a|C} = (G_a(y|x0+) - G_a(y|x0-)) / (pi_a(x0+) - pi_a(x0-))`, with
/// `pi_0 = 1 - pi_1` so the untreated denominator is the negated jump.
/// `pi_right`/`pi_left` are fits of the treatment indicator.
pub fn fuzzy_complier_cdfs(
    num1_right: &CdfFit,
    num1_left: &CdfFit,
    num0_right: &CdfFit,
    num0_left: &CdfFit,
    pi_right: &PolyFit,
    pi_left: &PolyFit,
    tolerance: f64,
) -> Result<ComplierCdfs> {
    let grid = &num1_right.y_grid;
    if [num1_left, num0_right, num0_left].iter().any(|f| &f.y_grid != grid) {
        return Err(Error::GridMismatch);
    }
    let jump = pi_right.value - pi_left.value;
    if !(jump.abs() >= tolerance) {
        return Err(Error::WeakFirstStage { jump, tolerance });
    }
    let ratio = |r: &CdfFit, l: &CdfFit, den: f64| -> Vec<f64> {
        r.value.iter().zip(&l.value).map(|(a, b)| (a - b) / den).collect()
    };
    let treated = ratio(num1_right, num1_left, jump);
    let untreated = ratio(num0_right, num0_left, -jump);
    let raw_range = treated
        .iter()
        .chain(&untreated)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ComplierCdfs {
        y_grid: grid.clone(),
        treated,
        untreated,
        first_stage: jump,
        raw_range,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KinkSlopeCurve {
    pub curve: QuantileCurve,
    /// Share of evaluated u points whose density sits at the floor.
    pub floored_fraction: f64,
    pub warnings: Vec<String>,
}

fn nearest_index(grid: &[f64], y: f64) -> usize {
    let k = grid.partition_point(|&g| g < y);
    if k == 0 {
        0
    } else if k == grid.len() {
        grid.len() - 1
    } else if (grid[k] - y) < (y - grid[k - 1]) {
        k
    } else {
        k - 1
    }
}

/// `dQ'(u) = -[(dF+/dx - dF-/dx) / first_stage](Q(u)) / f(Q(u) | x0)` with
/// slope and density read at the nearest y-grid point.
pub fn kink_quantile_slope_curve(
    cdf_right: &CdfFit,
    cdf_left: &CdfFit,
    density: &DensityFit,
    first_stage: f64,
    q_pooled: &QuantileCurve,
    tolerance: f64,
) -> Result<KinkSlopeCurve> {
    if !(first_stage.abs() >= tolerance) {
        return Err(Error::WeakFirstStage {
            jump: first_stage,
            tolerance,
        });
    }
    let grid = &cdf_right.y_grid;
    if &cdf_left.y_grid != grid || &density.y_grid != grid {
        return Err(Error::GridMismatch);
    }
    let (Some(sr), Some(sl)) = (&cdf_right.slope, &cdf_left.slope) else {
        return Err(Error::InvalidConfig("slope needs a fit of order at least 1".into()));
    };
    let mut at_floor = 0usize;
    let values: Vec<f64> = q_pooled
        .values
        .iter()
        .map(|&q| {
            let j = nearest_index(grid, q);
            let f = density.values[j].max(density.floor);
            if f <= density.floor {
                at_floor += 1;
            }
            -((sr[j] - sl[j]) / first_stage) / f
        })
        .collect();
    let floored_fraction = at_floor as f64 / values.len().max(1) as f64;
    let mut warnings = Vec::new();
    if floored_fraction > 0.1 {
        warnings.push(format!(
            "DensityFloorDominant: {:.1}% of quantile points use the density floor",
            100.0 * floored_fraction
        ));
    }
    Ok(KinkSlopeCurve {
        curve: QuantileCurve {
            u_grid: q_pooled.u_grid.clone(),
            values,
            trim: q_pooled.trim,
            role: CurveRole::EffectSlope,
            saturated: q_pooled.saturated,
        },
        floored_fraction,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KinkEffectSummary {
    pub psi_prime: f64,
    pub tau_prime: f64,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub psi2_plus: f64,
    pub psi2_minus: f64,
    /// `(2k - 1) (int dQ' P*_{k-1})^2 / psi'^2` for `k = 1..K`.
    pub shares: Option<Vec<f64>>,
    pub shares_tail: Option<f64>,
    pub first_stage: f64,
    pub trim: f64,
}

pub fn kink_effects(dq_prime: &QuantileCurve, first_stage: f64, order: usize) -> KinkEffectSummary {
    let s = summarize(dq_prime, order, None);
    KinkEffectSummary {
        psi_prime: s.psi,
        tau_prime: s.tau,
        gamma: s.gamma,
        rho: s.rho,
        psi2_plus: s.psi2_plus,
        psi2_minus: s.psi2_minus,
        shares: s.r2,
        shares_tail: s.r2_tail,
        first_stage,
        trim: s.trim,
    }
}
