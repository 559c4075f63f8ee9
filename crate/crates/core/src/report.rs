//! Estimation plus inference, assembled into one serializable report.

use std::str::FromStr;

use serde::Serialize;

use crate::data::{Dataset, Design};
use crate::effects::{self, EffectSummary, KinkEffectSummary};
use crate::error::{Error, Result};
use crate::inference::{
    band_interval_psi2, bootstrap_fuzzy, bootstrap_kink, bootstrap_psi2_sd, bootstrap_sharp,
    choose_truncation, conservative_interval, conservative_test, eigen_spectrum,
    eigenvalue_test, estimate_cov_kernel, kink_conservative_interval, sup_band_quantile,
    BootstrapEnsemble, IntervalResult, TestResult, DEFAULT_BETA, DEFAULT_MC_DRAWS,
    DEFAULT_REPLICATIONS,
};
use crate::pipeline::{estimate_fuzzy, estimate_kink, estimate_sharp, outcome_variance, EstimationOptions};
use crate::quantiles::{self, CurveRole, QuantileCurve};

/// Number of leading eigenvalues echoed in the report.
const SPECTRUM_HEAD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalChoice {
    Conservative,
    Band,
    Both,
}

impl FromStr for IntervalChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conservative" => Ok(IntervalChoice::Conservative),
            "band" => Ok(IntervalChoice::Band),
            "both" => Ok(IntervalChoice::Both),
            other => Err(Error::InvalidConfig(format!("unknown interval `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceOptions {
    pub alpha: f64,
    pub replications: usize,
    pub mc_draws: usize,
    pub seed: u64,
    pub interval: IntervalChoice,
    /// Constant `c` in the conservative interval; outcome variance when absent.
    pub c_const: Option<f64>,
    /// Eigenvalue decay exponent used to pick the truncation.
    pub beta: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            replications: DEFAULT_REPLICATIONS,
            mc_draws: DEFAULT_MC_DRAWS,
            seed: 0,
            interval: IntervalChoice::Conservative,
            c_const: None,
            beta: DEFAULT_BETA,
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if self.replications < 2 {
            return Err(Error::InvalidConfig("need at least two bootstrap replications".into()));
        }
        if self.mc_draws == 0 {
            return Err(Error::InvalidConfig("need at least one Monte Carlo draw".into()));
        }
        if !(self.beta > 1.0) {
            return Err(Error::BadDecayParam(self.beta));
        }
        if let Some(c) = self.c_const {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidConfig(format!("c must be nonnegative, got {c}")));
            }
        }
        Ok(())
    }
}

/// Stage of the analysis, used to label failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingestion,
    Fit,
    FirstStage,
    Inference,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingestion => "ingestion",
            Stage::Fit => "fit",
            Stage::FirstStage => "first-stage",
            Stage::Inference => "inference",
        }
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

fn at(stage: Stage) -> impl Fn(Error) -> StageError {
    move |error| {
        let stage = match error {
            Error::WeakFirstStage { .. } => Stage::FirstStage,
            _ => stage,
        };
        StageError { stage, error }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Summary {
    Level(EffectSummary),
    Kink(KinkEffectSummary),
}

impl Summary {
    pub fn psi(&self) -> f64 {
        match self {
            Summary::Level(s) => s.psi,
            Summary::Kink(s) => s.psi_prime,
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Summary::Level(s) => s.tau,
            Summary::Kink(s) => s.tau_prime,
        }
    }

    fn shares(&self) -> (Option<&Vec<f64>>, Option<f64>) {
        match self {
            Summary::Level(s) => (s.r2.as_ref(), s.r2_tail),
            Summary::Kink(s) => (s.shares.as_ref(), s.shares_tail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub design: Design,
    pub cutoff: f64,
    pub bandwidth: f64,
    pub order: usize,
    pub kernel: String,
    pub trim: f64,
    pub bias_correction: bool,
    pub y_grid_points: usize,
    pub u_grid_points: usize,
    pub lmoment_order: usize,
    pub alpha: f64,
    pub replications: usize,
    pub mc_draws: usize,
    pub interval: IntervalChoice,
    pub c_const: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowCounts {
    pub left: usize,
    pub right: usize,
}

/// Per-u curves for plotting; written as CSV rather than JSON.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveTable {
    pub u: Vec<f64>,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    pub effect: Vec<f64>,
    pub contribution: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LMomentRow {
    /// `"1"`, `"2"`, `"3"`, `">=4"`.
    pub k: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub version: String,
    pub seed: u64,
    pub n: usize,
    pub config: ConfigEcho,
    pub window: WindowCounts,
    pub summary: Summary,
    /// `Psi^2` (or `Psi'^2`) over the trimmed grid.
    pub psi2: f64,
    pub first_stage: Option<f64>,
    /// `nh` for discontinuities, `nh^3` for kinks.
    pub scaling: f64,
    pub band_critical_value: f64,
    pub psi2_bootstrap_sd: f64,
    pub intervals: Vec<IntervalResult>,
    pub tests: Vec<TestResult>,
    pub spectrum_head: Vec<f64>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub curves: CurveTable,
    #[serde(skip)]
    pub lmoments: Vec<LMomentRow>,
}

/// Shares for `k = 1, 2, 3` and `k >= 4`; empty when the effect is identically zero.
pub fn lmoment_rows(r2: Option<&Vec<f64>>, tail: Option<f64>) -> Vec<LMomentRow> {
    let (Some(r2), Some(tail)) = (r2, tail) else {
        return Vec::new();
    };
    let decomposition = effects::LMomentDecomposition {
        r2: r2.clone(),
        tail,
        psi2: 0.0,
        delta_lambda: Vec::new(),
    };
    let labels = ["1", "2", "3", ">=4"];
    decomposition
        .bucketed(4)
        .into_iter()
        .zip(labels)
        .map(|(share, k)| LMomentRow { k: k.to_string(), share })
        .collect()
}

struct Fitted {
    q0: QuantileCurve,
    q1: QuantileCurve,
    effect: QuantileCurve,
    summary: Summary,
    first_stage: Option<f64>,
    window: WindowCounts,
    ensemble: BootstrapEnsemble,
    warnings: Vec<String>,
}

fn fit_design(d: &Dataset, est: &EstimationOptions, inf: &InferenceOptions) -> std::result::Result<Fitted, StageError> {
    let b = inf.replications;
    let seed = inf.seed;
    Ok(match d.design() {
        Design::SharpRdd => {
            let e = estimate_sharp(d, est).map_err(at(Stage::Fit))?;
            let ensemble = bootstrap_sharp(d, &e, b, seed).map_err(at(Stage::Inference))?;
            Fitted {
                window: WindowCounts {
                    left: e.left.effective_n,
                    right: e.right.effective_n,
                },
                q0: e.q0,
                q1: e.q1,
                effect: e.dq,
                summary: Summary::Level(e.summary),
                first_stage: None,
                ensemble,
                warnings: Vec::new(),
            }
        }
        Design::FuzzyRdd => {
            let e = estimate_fuzzy(d, est).map_err(at(Stage::Fit))?;
            let ensemble = bootstrap_fuzzy(d, &e, b, seed).map_err(at(Stage::Inference))?;
            let mut warnings = Vec::new();
            let (lo, hi) = e.compliers.raw_range;
            if lo < -0.05 || hi > 1.05 {
                warnings.push(format!(
                    "complier distribution ratios range over [{lo:.3}, {hi:.3}] before clipping"
                ));
            }
            Fitted {
                window: WindowCounts {
                    left: e.g1_left.effective_n,
                    right: e.g1_right.effective_n,
                },
                q0: e.q0,
                q1: e.q1,
                effect: e.dq,
                summary: Summary::Level(e.summary),
                first_stage: Some(e.compliers.first_stage),
                ensemble,
                warnings,
            }
        }
        Design::SharpKink | Design::FuzzyKink => {
            let e = estimate_kink(d, est).map_err(at(Stage::Fit))?;
            let ensemble = bootstrap_kink(d, &e, b, seed).map_err(at(Stage::Inference))?;
            let side_q = |fit: &crate::locfit::CdfFit, role| {
                quantiles::invert_cdf(&fit.y_grid, &fit.value, &est.fit.u_grid, role)
                    .and_then(|q| quantiles::trim(&q, est.fit.trim))
            };
            let q0 = side_q(&e.left, CurveRole::Q0).map_err(at(Stage::Fit))?;
            let q1 = side_q(&e.right, CurveRole::Q1).map_err(at(Stage::Fit))?;
            Fitted {
                window: WindowCounts {
                    left: e.left.effective_n,
                    right: e.right.effective_n,
                },
                q0,
                q1,
                effect: e.slope_curve.curve,
                summary: Summary::Kink(e.summary),
                first_stage: Some(e.first_stage),
                ensemble,
                warnings: e.slope_curve.warnings,
            }
        }
    })
}

/// Full analysis: estimation, bootstrap, intervals and both tests of `Psi = 0`.
pub fn analyze(
    d: &Dataset,
    est: &EstimationOptions,
    inf: &InferenceOptions,
) -> std::result::Result<AnalysisReport, StageError> {
    est.validate().map_err(at(Stage::Fit))?;
    inf.validate().map_err(at(Stage::Inference))?;
    let fitted = fit_design(d, est, inf)?;
    let inference = at(Stage::Inference);
    let e = &fitted.ensemble;
    let dq = &fitted.effect;
    let scaling = e.scaling;
    let psi2 = dq.integrate_map(|v| v * v);
    let c_const = inf.c_const.unwrap_or_else(|| outcome_variance(d));
    let mut warnings = fitted.warnings.clone();
    warnings.extend(e.warnings.iter().cloned());
    if dq.saturated > 0 {
        warnings.push(format!("{} quantile points saturated at the outcome grid edge", dq.saturated));
    }

    let c_hat = sup_band_quantile(e, inf.alpha);
    let s_hat = bootstrap_psi2_sd(e, dq).map_err(&inference)?;
    let band = IntervalResult {
        alpha: Some(inf.alpha),
        ..band_interval_psi2(dq, c_hat, scaling)
    };
    let conservative = if d.design().is_kink() {
        let h = est.fit.bandwidth;
        kink_conservative_interval(psi2, s_hat, c_const, d.len() as f64, h, inf.alpha)
    } else {
        conservative_interval(psi2, s_hat, c_const, scaling, inf.alpha)
    };
    let intervals = match inf.interval {
        IntervalChoice::Conservative => vec![conservative],
        IntervalChoice::Band => vec![band],
        IntervalChoice::Both => vec![conservative, band],
    };

    let kernel = estimate_cov_kernel(e).map_err(&inference)?;
    let mut tests = vec![conservative_test(psi2, &kernel, inf.alpha, scaling)];
    let mut spectrum = eigen_spectrum(&kernel);
    let max_k = dq.len().saturating_sub(1).max(1);
    let k_n = choose_truncation(scaling.powf(-0.5).min(0.999), inf.beta, max_k).map_err(&inference)?;
    spectrum.retained = Some(k_n);
    match eigenvalue_test(psi2, &spectrum, k_n, inf.mc_draws, inf.alpha, inf.seed, scaling) {
        Ok(t) => tests.push(t),
        Err(Error::DegenerateSpectrum) => {
            warnings.push("estimated covariance kernel is zero; eigenvalue test skipped".into())
        }
        Err(err) => return Err(inference(err)),
    }
    for t in &tests {
        warnings.extend(t.warnings.iter().cloned());
    }

    let contribution = effects::contribution_curve(dq, psi2.sqrt())
        .map(|c| c.values)
        .unwrap_or_else(|_| vec![0.0; dq.len()]);
    let half = c_hat / scaling.sqrt();
    let curves = CurveTable {
        u: dq.u_grid.clone(),
        q0: fitted.q0.values.clone(),
        q1: fitted.q1.values.clone(),
        effect: dq.values.clone(),
        contribution,
        band_lo: dq.values.iter().map(|v| v - half).collect(),
        band_hi: dq.values.iter().map(|v| v + half).collect(),
    };
    let (r2, tail) = fitted.summary.shares();
    let lmoments = lmoment_rows(r2, tail);

    Ok(AnalysisReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: inf.seed,
        n: d.len(),
        config: ConfigEcho {
            design: d.design(),
            cutoff: est.fit.cutoff,
            bandwidth: est.fit.bandwidth,
            order: est.fit.order,
            kernel: est.fit.kernel.to_string(),
            trim: est.fit.trim,
            bias_correction: est.bias_correction,
            y_grid_points: est.fit.y_grid.len(),
            u_grid_points: est.fit.u_grid.len(),
            lmoment_order: est.lmoment_order,
            alpha: inf.alpha,
            replications: inf.replications,
            mc_draws: inf.mc_draws,
            interval: inf.interval,
            c_const,
            beta: inf.beta,
        },
        window: fitted.window,
        summary: fitted.summary,
        psi2,
        first_stage: fitted.first_stage,
        scaling,
        band_critical_value: c_hat,
        psi2_bootstrap_sd: s_hat,
        intervals,
        tests,
        spectrum_head: spectrum.eigenvalues.iter().take(SPECTRUM_HEAD).copied().collect(),
        warnings,
        curves,
        lmoments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::{dgp_sample, DgpId, DgpSpec};

    fn quick() -> InferenceOptions {
        InferenceOptions {
            replications: 200,
            mc_draws: 20_000,
            interval: IntervalChoice::Both,
            ..InferenceOptions::default()
        }
    }

    #[test]
    fn sharp_report_is_coherent() {
        let d = dgp_sample(&DgpSpec::new(DgpId::Additive, 20_000, 2)).unwrap();
        let est = EstimationOptions::for_dataset(&d);
        let r = analyze(&d, &est, &quick()).unwrap();
        assert!(r.summary.tau().abs() <= r.summary.psi() + 1e-12);
        for i in &r.intervals {
            assert!(i.lo <= r.psi2 && r.psi2 <= i.hi, "{i:?}");
        }
        assert_eq!(r.tests.len(), 2);
        assert_eq!(r.curves.u.len(), r.curves.band_hi.len());
        assert_eq!(r.lmoments.len(), 4);
        let total: f64 = r.lmoments.iter().map(|l| l.share).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn weak_kink_is_a_first_stage_failure() {
        let d = dgp_sample(&DgpSpec::new(DgpId::KinkLocation, 2000, 1)).unwrap();
        let d = Dataset::with_benefit_slopes(d.observations().to_vec(), 0.0, 0.0, 0.0).unwrap();
        let est = EstimationOptions::for_dataset(&d);
        let err = analyze(&d, &est, &quick()).unwrap_err();
        assert_eq!(err.stage, Stage::FirstStage);
        assert!(matches!(err.error, Error::WeakFirstStage { .. }));
    }

    #[test]
    fn bad_alpha_is_an_inference_failure() {
        let d = dgp_sample(&DgpSpec::new(DgpId::Additive, 2000, 1)).unwrap();
        let est = EstimationOptions::for_dataset(&d);
        let inf = InferenceOptions {
            alpha: 1.5,
            ..quick()
        };
        assert_eq!(analyze(&d, &est, &inf).unwrap_err().stage, Stage::Inference);
    }

    #[test]
    fn lmoment_rows_fold_the_tail() {
        let rows = lmoment_rows(Some(&vec![0.5, 0.2, 0.1, 0.05, 0.05]), Some(0.1));
        let shares: Vec<f64> = rows.iter().map(|r| r.share).collect();
        assert_eq!(shares.len(), 4);
        assert!((shares[3] - 0.2).abs() < 1e-15);
        assert_eq!(rows[3].k, ">=4");
        assert!(lmoment_rows(None, None).is_empty());
    }
}
