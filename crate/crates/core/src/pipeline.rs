//! End-to-end estimation for the four designs.

use serde::Serialize;

use crate::data::{Dataset, Design, Observation, Side};
use crate::effects::{
    self, ComplierCdfs, EffectSummary, KinkEffectSummary, KinkSlopeCurve,
    DEFAULT_FIRST_STAGE_TOLERANCE, DEFAULT_KINK_TOLERANCE, DEFAULT_LMOMENT_ORDER,
};
use crate::error::{Error, Result};
use crate::locfit::{
    self, bias_correct, bias_correct_mean, default_bandwidth, default_density_bandwidth,
    default_density_floor, default_y_grid, fit_local_cdf, fit_local_mean, CdfFit, DensityFit,
    FitConfig, Kernel, PolyFit,
};
use crate::quantiles::{self, default_u_grid, invert_cdf, CurveRole, QuantileCurve};

/// Number of points in the default outcome grid.
pub const DEFAULT_Y_GRID_POINTS: usize = 401;
/// Default polynomial order for CDF fits.
pub const DEFAULT_CDF_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationOptions {
    pub fit: FitConfig,
    pub bias_correction: bool,
    pub lmoment_order: usize,
    pub first_stage_tolerance: f64,
    pub kink_tolerance: f64,
    /// Outcome bandwidth for density fits; default rule when absent.
    pub density_bandwidth: Option<f64>,
    pub density_floor: Option<f64>,
}

impl EstimationOptions {
    /// Defaults: triangular kernel, `p = 2`, `h = sd(x) n^(-1/5)`, 401-point
    /// y-grid, 1999-point u-grid, no trimming, bias correction on.
    pub fn for_dataset(d: &Dataset) -> Self {
        Self {
            fit: FitConfig {
                cutoff: d.cutoff(),
                bandwidth: default_bandwidth(d, 1.0),
                order: DEFAULT_CDF_ORDER,
                kernel: Kernel::Triangular,
                y_grid: default_y_grid(d, DEFAULT_Y_GRID_POINTS),
                u_grid: default_u_grid(),
                trim: 0.0,
            },
            bias_correction: true,
            lmoment_order: DEFAULT_LMOMENT_ORDER,
            first_stage_tolerance: DEFAULT_FIRST_STAGE_TOLERANCE,
            kink_tolerance: DEFAULT_KINK_TOLERANCE,
            density_bandwidth: None,
            density_floor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.lmoment_order == 0 || self.lmoment_order > effects::MAX_LEGENDRE_ORDER + 1 {
            return Err(Error::InvalidConfig(format!(
                "L-moment order {} out of range",
                self.lmoment_order
            )));
        }
        Ok(())
    }

    fn density_params(&self, d: &Dataset, side: Side) -> (f64, f64) {
        let h_y = self
            .density_bandwidth
            .unwrap_or_else(|| default_density_bandwidth(d, &self.fit, side));
        let floor = self.density_floor.unwrap_or_else(|| default_density_floor(d));
        (h_y, floor)
    }
}

fn one(_: &Observation) -> f64 {
    1.0
}

fn treated(o: &Observation) -> f64 {
    o.treated()
}

fn untreated(o: &Observation) -> f64 {
    1.0 - o.treated()
}

fn cdf_fit(
    d: &Dataset,
    side: Side,
    opts: &EstimationOptions,
    rule: &dyn Fn(&Observation) -> f64,
) -> Result<CdfFit> {
    let fit = fit_local_cdf(d, side, &opts.fit, rule)?;
    if opts.bias_correction {
        bias_correct(&fit, &opts.fit, d, rule)
    } else {
        Ok(fit)
    }
}

fn mean_fit(
    d: &Dataset,
    side: Side,
    opts: &EstimationOptions,
    rule: &dyn Fn(&Observation) -> f64,
) -> Result<PolyFit> {
    let fit = fit_local_mean(d, side, &opts.fit, rule)?;
    if opts.bias_correction {
        bias_correct_mean(&fit, &opts.fit, d, rule)
    } else {
        Ok(fit)
    }
}

fn quantile_curve(
    y_grid: &[f64],
    cdf: &[f64],
    opts: &EstimationOptions,
    role: CurveRole,
) -> Result<QuantileCurve> {
    let q = invert_cdf(y_grid, cdf, &opts.fit.u_grid, role)?;
    quantiles::trim(&q, opts.fit.trim)
}

/// Sharp discontinuity: treated law from the right, untreated from the left.
#[derive(Debug, Clone, Serialize)]
pub struct SharpEstimate {
    pub options: EstimationOptions,
    pub right: CdfFit,
    pub left: CdfFit,
    pub q1: QuantileCurve,
    pub q0: QuantileCurve,
    pub dq: QuantileCurve,
    pub summary: EffectSummary,
    pub density_right: DensityFit,
    pub density_left: DensityFit,
    pub n: usize,
}

pub fn estimate_sharp(d: &Dataset, opts: &EstimationOptions) -> Result<SharpEstimate> {
    opts.validate()?;
    let right = cdf_fit(d, Side::Right, opts, &one)?;
    let left = cdf_fit(d, Side::Left, opts, &one)?;
    let q1 = quantile_curve(&right.y_grid, &right.value, opts, CurveRole::Q1)?;
    let q0 = quantile_curve(&left.y_grid, &left.value, opts, CurveRole::Q0)?;
    let dq = effects::quantile_effect_curve(&q1, &q0)?;
    let summary = effects::summarize(&dq, opts.lmoment_order, Some(Design::SharpRdd));
    let (h_r, floor) = opts.density_params(d, Side::Right);
    let density_right =
        locfit::fit_conditional_density_with(d, &opts.fit, h_r, Side::Right, &one, floor)?;
    let (h_l, _) = opts.density_params(d, Side::Left);
    let density_left =
        locfit::fit_conditional_density_with(d, &opts.fit, h_l, Side::Left, &one, floor)?;
    Ok(SharpEstimate {
        options: opts.clone(),
        right,
        left,
        q1,
        q0,
        dq,
        summary,
        density_right,
        density_left,
        n: d.len(),
    })
}

/// Fuzzy discontinuity: complier distributions from local Wald ratios.
#[derive(Debug, Clone, Serialize)]
pub struct FuzzyEstimate {
    pub options: EstimationOptions,
    pub g1_right: CdfFit,
    pub g1_left: CdfFit,
    pub g0_right: CdfFit,
    pub g0_left: CdfFit,
    pub pi_right: PolyFit,
    pub pi_left: PolyFit,
    pub compliers: ComplierCdfs,
    pub q1: QuantileCurve,
    pub q0: QuantileCurve,
    pub dq: QuantileCurve,
    pub summary: EffectSummary,
    pub density_treated: DensityFit,
    pub density_untreated: DensityFit,
    pub n: usize,
}

pub fn estimate_fuzzy(d: &Dataset, opts: &EstimationOptions) -> Result<FuzzyEstimate> {
    opts.validate()?;
    if d.observations().iter().any(|o| o.a.is_none()) {
        return Err(Error::InvalidDataset("fuzzy design needs a treatment column".into()));
    }
    let pi_right = mean_fit(d, Side::Right, opts, &treated)?;
    let pi_left = mean_fit(d, Side::Left, opts, &treated)?;
    let jump = pi_right.value - pi_left.value;
    if !(jump.abs() >= opts.first_stage_tolerance) {
        return Err(Error::WeakFirstStage {
            jump,
            tolerance: opts.first_stage_tolerance,
        });
    }
    let g1_right = cdf_fit(d, Side::Right, opts, &treated)?;
    let g1_left = cdf_fit(d, Side::Left, opts, &treated)?;
    let g0_right = cdf_fit(d, Side::Right, opts, &untreated)?;
    let g0_left = cdf_fit(d, Side::Left, opts, &untreated)?;
    let compliers = effects::fuzzy_complier_cdfs(
        &g1_right,
        &g1_left,
        &g0_right,
        &g0_left,
        &pi_right,
        &pi_left,
        opts.first_stage_tolerance,
    )?;
    let q1 = quantile_curve(&compliers.y_grid, &compliers.treated, opts, CurveRole::ComplierQ1)?;
    let q0 = quantile_curve(&compliers.y_grid, &compliers.untreated, opts, CurveRole::ComplierQ0)?;
    let dq = effects::quantile_effect_curve(&q1, &q0)?;
    let summary = effects::summarize(&dq, opts.lmoment_order, Some(Design::FuzzyRdd));

    let (h_r, floor) = opts.density_params(d, Side::Right);
    let (h_l, _) = opts.density_params(d, Side::Left);
    let raw = |side, h, rule: &dyn Fn(&Observation) -> f64| {
        locfit::raw_conditional_density(d, &opts.fit, h, side, rule)
    };
    let d1r = raw(Side::Right, h_r, &treated)?;
    let d1l = raw(Side::Left, h_l, &treated)?;
    let d0r = raw(Side::Right, h_r, &untreated)?;
    let d0l = raw(Side::Left, h_l, &untreated)?;
    let ratio = |r: &[f64], l: &[f64], den: f64| -> Vec<f64> {
        r.iter().zip(l).map(|(a, b)| (a - b) / den).collect()
    };
    let h_y = 0.5 * (h_r + h_l);
    let density_treated = locfit::floor_density(
        Side::Both,
        opts.fit.y_grid.clone(),
        ratio(&d1r, &d1l, jump),
        h_y,
        floor,
    );
    let density_untreated = locfit::floor_density(
        Side::Both,
        opts.fit.y_grid.clone(),
        ratio(&d0r, &d0l, -jump),
        h_y,
        floor,
    );
    Ok(FuzzyEstimate {
        options: opts.clone(),
        g1_right,
        g1_left,
        g0_right,
        g0_left,
        pi_right,
        pi_left,
        compliers,
        q1,
        q0,
        dq,
        summary,
        density_treated,
        density_untreated,
        n: d.len(),
    })
}

/// Kink design: change in the quantile slope per unit of first-stage kink.
#[derive(Debug, Clone, Serialize)]
pub struct KinkEstimate {
    pub options: EstimationOptions,
    pub right: CdfFit,
    pub left: CdfFit,
    pub pooled: CdfFit,
    pub q_pooled: QuantileCurve,
    pub density: DensityFit,
    pub first_stage: f64,
    /// One-sided fits of the continuous treatment when the kink is estimated.
    pub first_stage_fits: Option<(PolyFit, PolyFit)>,
    pub slope_curve: KinkSlopeCurve,
    pub summary: KinkEffectSummary,
    pub n: usize,
}

fn continuous_treatment(o: &Observation) -> f64 {
    o.t.unwrap_or(f64::NAN)
}

pub fn estimate_kink(d: &Dataset, opts: &EstimationOptions) -> Result<KinkEstimate> {
    opts.validate()?;
    if opts.fit.order == 0 {
        return Err(Error::InvalidConfig("kink designs need order >= 1".into()));
    }
    let (first_stage, first_stage_fits) = match (d.design(), d.benefit_slopes()) {
        (Design::SharpKink, Some((left, right))) => (right - left, None),
        _ => {
            if d.observations().iter().any(|o| o.t.is_none()) {
                return Err(Error::InvalidDataset(
                    "kink design needs a treatment column or declared slopes".into(),
                ));
            }
            let r = fit_local_mean(d, Side::Right, &opts.fit, &continuous_treatment)?;
            let l = fit_local_mean(d, Side::Left, &opts.fit, &continuous_treatment)?;
            (r.slope.unwrap_or(0.0) - l.slope.unwrap_or(0.0), Some((r, l)))
        }
    };
    if !(first_stage.abs() >= opts.kink_tolerance) {
        return Err(Error::WeakFirstStage {
            jump: first_stage,
            tolerance: opts.kink_tolerance,
        });
    }
    let right = fit_local_cdf(d, Side::Right, &opts.fit, &one)?;
    let left = fit_local_cdf(d, Side::Left, &opts.fit, &one)?;
    let pooled = cdf_fit(d, Side::Both, opts, &one)?;
    let q_pooled = quantile_curve(&pooled.y_grid, &pooled.value, opts, CurveRole::Pooled)?;
    let (h_y, floor) = opts.density_params(d, Side::Both);
    let density = locfit::fit_conditional_density_with(d, &opts.fit, h_y, Side::Both, &one, floor)?;
    let slope_curve = effects::kink_quantile_slope_curve(
        &right,
        &left,
        &density,
        first_stage,
        &q_pooled,
        opts.kink_tolerance,
    )?;
    let summary = effects::kink_effects(&slope_curve.curve, first_stage, opts.lmoment_order);
    Ok(KinkEstimate {
        options: opts.clone(),
        right,
        left,
        pooled,
        q_pooled,
        density,
        first_stage,
        first_stage_fits,
        slope_curve,
        summary,
        n: d.len(),
    })
}

/// Outcome variance, the default constant in the conservative intervals.
pub fn outcome_variance(d: &Dataset) -> f64 {
    locfit::sample_sd(d.ys()).powi(2)
}
