//! Simulation designs, their population truths, and a Monte Carlo harness for
//! interval coverage and test size.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{format_float, Dataset, Design, Observation};
use crate::error::{Error, Result};
use crate::inference::{
    band_interval_psi2, bootstrap_psi2_sd, bootstrap_sharp, conservative_critical_value_from_draws,
    conservative_interval, sup_band_quantile, BootstrapEnsemble,
};
use crate::locfit::{BandwidthRule, Kernel};
use crate::pipeline::{estimate_sharp, outcome_variance, EstimationOptions};
use crate::quantiles::{integrate, trim_grid, QuantileCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpId {
    /// `Y = m(X) + tau A + e`.
    Additive,
    /// `Y = m(X) + sigma(A) e`, `sigma(0) = 1`, `sigma(1) = 2`.
    ScaleShift,
    /// `Y = m(X) + tau A + (1 + 0.3|X|)(1 + 0.6 A)(exp(e) - exp(1/2))`.
    HeavyTail,
    /// `T = max(X, 0)`, `Y = max(X, 0) + e`.
    KinkLocation,
    /// `T = max(X, 0)`, `Y = (1 + 0.5 max(X, 0)) e`.
    KinkScale,
    /// Compliers (60%) take `A = 1(X >= 0)`, always/never takers 20% each.
    FuzzyCompliance,
}

impl DgpId {
    pub const ALL: [DgpId; 6] = [
        DgpId::Additive,
        DgpId::ScaleShift,
        DgpId::HeavyTail,
        DgpId::KinkLocation,
        DgpId::KinkScale,
        DgpId::FuzzyCompliance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpId::Additive => "additive",
            DgpId::ScaleShift => "scale_shift",
            DgpId::HeavyTail => "heavy_tail",
            DgpId::KinkLocation => "kink_location",
            DgpId::KinkScale => "kink_scale",
            DgpId::FuzzyCompliance => "fuzzy_compliance",
        }
    }

    pub fn design(self) -> Design {
        match self {
            DgpId::Additive | DgpId::ScaleShift | DgpId::HeavyTail => Design::SharpRdd,
            DgpId::KinkLocation | DgpId::KinkScale => Design::SharpKink,
            DgpId::FuzzyCompliance => Design::FuzzyRdd,
        }
    }
}

impl fmt::Display for DgpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DgpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        DgpId::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .or(match key.as_str() {
                "i" | "1" => Some(DgpId::Additive),
                "ii" | "2" => Some(DgpId::ScaleShift),
                "iii" | "3" => Some(DgpId::HeavyTail),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig(format!("unknown design `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DgpSpec {
    pub id: DgpId,
    pub n: usize,
    pub seed: u64,
    /// Treatment shift for the additive and heavy-tailed designs.
    pub tau: f64,
}

impl DgpSpec {
    pub fn new(id: DgpId, n: usize, seed: u64) -> Self {
        Self { id, n, seed, tau: 0.5 }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }

    fn check(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::InvalidConfig(format!("n = {} below 50", self.n)));
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidConfig("tau must be finite".into()));
        }
        Ok(())
    }
}

/// Conditional mean shared by the designs.
pub fn m(x: f64) -> f64 {
    0.5 * x + x * x
}

const HALF_EXP: f64 = 1.648_721_270_700_128_1;

pub fn dgp_sample(spec: &DgpSpec) -> Result<Dataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut obs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let e: f64 = rng.sample(StandardNormal);
        let side = u8::from(x >= 0.0);
        let a = f64::from(side);
        let o = match spec.id {
            DgpId::Additive => Observation::new(x, Some(side), m(x) + spec.tau * a + e, None),
            DgpId::ScaleShift => {
                Observation::new(x, Some(side), m(x) + (1.0 + a) * e, None)
            }
            DgpId::HeavyTail => {
                let y = m(x)
                    + spec.tau * a
                    + (1.0 + 0.3 * x.abs()) * (1.0 + 0.6 * a) * (e.exp() - HALF_EXP);
                Observation::new(x, Some(side), y, None)
            }
            DgpId::KinkLocation => {
                let t = x.max(0.0);
                Observation::new(x, None, t + e, Some(t))
            }
            DgpId::KinkScale => {
                let t = x.max(0.0);
                Observation::new(x, None, (1.0 + 0.5 * t) * e, Some(t))
            }
            DgpId::FuzzyCompliance => {
                let kind: f64 = rng.random();
                let (take, base) = if kind < 0.6 {
                    (side, 0.0)
                } else if kind < 0.8 {
                    (1, 1.0)
                } else {
                    (0, -1.0)
                };
                let y = m(x) + base + 0.5 * f64::from(take) + e;
                Observation::new(x, Some(take), y, None)
            }
        };
        obs.push(o);
    }
    match spec.id {
        DgpId::KinkLocation | DgpId::KinkScale => Dataset::with_benefit_slopes(obs, 0.0, 0.0, 1.0),
        id => Dataset::new(obs, 0.0, id.design()),
    }
}

fn probit(u: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(u)
}

/// Population effect curve at the cutoff (`dQ`, or `dQ'` for kinks).
pub fn true_effect_curve(spec: &DgpSpec) -> impl Fn(f64) -> f64 {
    let id = spec.id;
    let tau = spec.tau;
    move |u: f64| match id {
        DgpId::Additive => tau,
        DgpId::ScaleShift => probit(u),
        DgpId::HeavyTail => tau + 0.6 * (probit(u).exp() - HALF_EXP),
        DgpId::KinkLocation => 1.0,
        DgpId::KinkScale => 0.5 * probit(u),
        DgpId::FuzzyCompliance => 0.5,
    }
}

/// `(Psi, tau)` over the whole unit interval.
pub fn true_effects(spec: &DgpSpec) -> Result<(f64, f64)> {
    let e = std::f64::consts::E;
    Ok(match spec.id {
        DgpId::Additive => (spec.tau.abs(), spec.tau),
        DgpId::ScaleShift => (1.0, 0.0),
        // dQ = tau + 0.6 (exp(Z) - e^{1/2}) with Var(exp Z) = e^2 - e
        DgpId::HeavyTail => ((spec.tau * spec.tau + 0.36 * (e * e - e)).sqrt(), spec.tau),
        DgpId::KinkLocation => (1.0, 1.0),
        DgpId::KinkScale => (0.5, 0.0),
        DgpId::FuzzyCompliance => (0.5, 0.5),
    })
}

/// `Psi^2` restricted to a (trimmed) grid, with the estimator's quadrature.
pub fn true_psi2_on_grid(spec: &DgpSpec, u_grid: &[f64]) -> f64 {
    let f = true_effect_curve(spec);
    let g: Vec<f64> = u_grid.iter().map(|&u| f(u).powi(2)).collect();
    integrate(u_grid, &g)
}

/// Exact one-dimensional empirical 2-Wasserstein distance between equal-size samples.
pub fn empirical_wasserstein_oracle(sample0: &[f64], sample1: &[f64]) -> Result<f64> {
    if sample0.len() != sample1.len() {
        return Err(Error::SizeMismatch {
            left: sample0.len(),
            right: sample1.len(),
        });
    }
    if sample0.is_empty() {
        return Ok(0.0);
    }
    let mut a = sample0.to_vec();
    let mut b = sample1.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (y - x).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Draws from the two limiting outcome laws at the cutoff.
pub fn limiting_samples(spec: &DgpSpec, m_draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s0 = Vec::with_capacity(m_draws);
    let mut s1 = Vec::with_capacity(m_draws);
    for _ in 0..m_draws {
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let (y0, y1) = match spec.id {
            DgpId::Additive | DgpId::FuzzyCompliance => (e0, spec.tau + e1),
            DgpId::ScaleShift => (e0, 2.0 * e1),
            DgpId::HeavyTail => (e0.exp() - HALF_EXP, spec.tau + 1.6 * (e1.exp() - HALF_EXP)),
            DgpId::KinkLocation | DgpId::KinkScale => (e0, e1),
        };
        s0.push(y0);
        s1.push(y1);
    }
    (s0, s1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum McMethod {
    /// Interval from the uniform bootstrap band.
    Band,
    /// Symmetric conservative interval.
    Conservative,
    /// Cantelli test of `Psi = 0`; reports rejection frequency.
    ConservativeTest,
}

impl McMethod {
    pub fn name(self) -> &'static str {
        match self {
            McMethod::Band => "band",
            McMethod::Conservative => "conservative",
            McMethod::ConservativeTest => "conservative_test",
        }
    }
}

impl FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "band" => Ok(McMethod::Band),
            "conservative" => Ok(McMethod::Conservative),
            "conservative_test" | "test" => Ok(McMethod::ConservativeTest),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// `h = 1.5 n^(-1/5)`: one-sided windows of about 188, 1190 and 7500
/// observations at `n = 10^3, 10^4, 10^5` under the uniform running variable.
pub const STUDY_BANDWIDTH: BandwidthRule = BandwidthRule::Constant(1.5);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConfig {
    pub dgp: DgpId,
    pub tau: f64,
    pub n_list: Vec<usize>,
    pub gamma_list: Vec<f64>,
    pub methods: Vec<McMethod>,
    pub reps: usize,
    pub seed: u64,
    pub bootstrap_replications: usize,
    pub alpha: f64,
    pub bandwidth: BandwidthRule,
    pub order: usize,
    pub kernel: Kernel,
}

impl McConfig {
    pub fn new(dgp: DgpId) -> Self {
        Self {
            dgp,
            tau: 0.5,
            n_list: vec![1000],
            gamma_list: vec![0.1],
            methods: vec![McMethod::Band, McMethod::Conservative],
            reps: 500,
            seed: 0,
            bootstrap_replications: 1000,
            alpha: 0.05,
            bandwidth: STUDY_BANDWIDTH,
            order: 2,
            kernel: Kernel::Triangular,
        }
    }
}

/// One replicate's outcome for one `(gamma, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub rep: usize,
    pub gamma: f64,
    pub method: McMethod,
    pub psi2_hat: f64,
    pub truth_psi2: f64,
    pub lo: f64,
    pub hi: f64,
    /// Interval covers the truth, or the test rejects.
    pub hit: bool,
    pub window_left: usize,
    pub window_right: usize,
}

impl ReplicateRecord {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub dgp: DgpId,
    pub n: usize,
    pub gamma: f64,
    pub method: McMethod,
    /// Coverage for intervals, rejection frequency for tests.
    pub coverage: f64,
    /// Mean interval width, or mean critical value for tests.
    pub mean_width: f64,
    pub mean_psi: f64,
    pub reps: usize,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub records: Vec<ReplicateRecord>,
}

impl McReport {
    pub fn row(&self, n: usize, gamma: f64, method: McMethod) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.gamma == gamma && r.method == method)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("dgp,n,gamma,method,coverage,mean_width,reps,mc_se\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.dgp,
                r.n,
                format_float(r.gamma),
                r.method.name(),
                format_float(r.coverage),
                format_float(r.mean_width),
                r.reps,
                format_float(r.mc_se)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

fn replicate_seed(seed: u64, n: usize, rep: usize) -> u64 {
    // splitmix-style mixing of the cell coordinates
    let mut z = seed
        .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((rep as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn restrict(e: &BootstrapEnsemble, keep: &[usize]) -> BootstrapEnsemble {
    let n_u = e.n_u();
    let mut draws = Vec::with_capacity(e.replications * keep.len());
    for b in 0..e.replications {
        draws.extend(keep.iter().map(|&k| e.draws[b * n_u + k]));
    }
    BootstrapEnsemble {
        u_grid: keep.iter().map(|&k| e.u_grid[k]).collect(),
        draws,
        ..e.clone()
    }
}

fn run_replicate(cfg: &McConfig, n: usize, rep: usize) -> Result<Vec<ReplicateRecord>> {
    let spec = DgpSpec::new(cfg.dgp, n, replicate_seed(cfg.seed, n, rep)).with_tau(cfg.tau);
    let d = dgp_sample(&spec)?;
    let mut opts = EstimationOptions::for_dataset(&d);
    opts.fit.bandwidth = cfg.bandwidth.bandwidth(&d);
    opts.fit.order = cfg.order;
    opts.fit.kernel = cfg.kernel;
    let est = estimate_sharp(&d, &opts)?;
    let boot = bootstrap_sharp(&d, &est, cfg.bootstrap_replications, spec.seed)?;
    let nh = n as f64 * opts.fit.bandwidth;
    let c_const = outcome_variance(&d);
    let window_left = est.left.effective_n;
    let window_right = est.right.effective_n;

    let mut out = Vec::new();
    for &gamma in &cfg.gamma_list {
        let grid = trim_grid(&est.dq.u_grid, gamma)?;
        let keep: Vec<usize> = est
            .dq
            .u_grid
            .iter()
            .enumerate()
            .filter(|(_, u)| grid.binary_search_by(|g| g.total_cmp(u)).is_ok())
            .map(|(k, _)| k)
            .collect();
        let dq = QuantileCurve {
            u_grid: grid.clone(),
            values: keep.iter().map(|&k| est.dq.values[k]).collect(),
            trim: gamma,
            ..est.dq.clone()
        };
        let e = restrict(&boot, &keep);
        let psi2_hat = dq.integrate_map(|v| v * v);
        let truth = true_psi2_on_grid(&spec, &grid);
        for &method in &cfg.methods {
            let (lo, hi, hit) = match method {
                McMethod::Band => {
                    let c = sup_band_quantile(&e, cfg.alpha);
                    let r = band_interval_psi2(&dq, c, nh);
                    (r.lo, r.hi, r.contains(truth))
                }
                McMethod::Conservative => {
                    let s = bootstrap_psi2_sd(&e, &dq)?;
                    let r = conservative_interval(psi2_hat, s, c_const, nh, cfg.alpha);
                    (r.lo, r.hi, r.contains(truth))
                }
                McMethod::ConservativeTest => {
                    let crit = conservative_critical_value_from_draws(&e, cfg.alpha);
                    (0.0, crit, nh * psi2_hat > crit)
                }
            };
            out.push(ReplicateRecord {
                n,
                rep,
                gamma,
                method,
                psi2_hat,
                truth_psi2: truth,
                lo,
                hi,
                hit,
                window_left,
                window_right,
            });
        }
    }
    Ok(out)
}

/// Monte Carlo over sample sizes, trimming levels and interval methods.
/// Replicates run in parallel; results are reduced in replicate order.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidConfig("reps must be positive".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {} not in (0, 1)", cfg.alpha)));
    }
    if cfg.dgp.design() != Design::SharpRdd {
        return Err(Error::InvalidConfig(format!(
            "coverage study supports the sharp designs, not {}",
            cfg.dgp
        )));
    }
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let per_rep: Vec<Result<Vec<ReplicateRecord>>> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replicate(cfg, n, rep))
            .collect();
        let mut cell_records = Vec::new();
        for r in per_rep {
            cell_records.extend(r?);
        }
        for &gamma in &cfg.gamma_list {
            for &method in &cfg.methods {
                let cell: Vec<&ReplicateRecord> = cell_records
                    .iter()
                    .filter(|r| r.gamma == gamma && r.method == method)
                    .collect();
                let k = cell.len() as f64;
                let coverage = cell.iter().filter(|r| r.hit).count() as f64 / k;
                let mean_width = cell.iter().map(|r| r.width()).sum::<f64>() / k;
                let mean_psi = cell.iter().map(|r| r.psi2_hat.max(0.0).sqrt()).sum::<f64>() / k;
                rows.push(McRow {
                    dgp: cfg.dgp,
                    n,
                    gamma,
                    method,
                    coverage,
                    mean_width,
                    mean_psi,
                    reps: cell.len(),
                    mc_se: (coverage * (1.0 - coverage) / k).sqrt(),
                });
            }
        }
        records.extend(cell_records);
    }
    Ok(McReport { rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantiles::{closed_u_grid, default_u_grid};

    #[test]
    fn sharp_rule_holds() {
        let d = dgp_sample(&DgpSpec::new(DgpId::Additive, 2000, 3)).unwrap();
        assert!(d.observations().iter().all(|o| o.a == Some(u8::from(o.x >= 0.0))));
    }

    #[test]
    fn heavy_tail_noise_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 1_000_000;
        let v: Vec<f64> = (0..m)
            .map(|_| rng.sample::<f64, _>(StandardNormal).exp() - HALF_EXP)
            .collect();
        let mean = v.iter().sum::<f64>() / m as f64;
        let sd = crate::locfit::sample_sd(v.iter().copied());
        assert!(mean.abs() < 3.0 * sd / (m as f64).sqrt(), "{mean}");
    }

    #[test]
    fn scale_shift_doubles_spread() {
        let d = dgp_sample(&DgpSpec::new(DgpId::ScaleShift, 200_000, 4)).unwrap();
        let sd = |right: bool| {
            crate::locfit::sample_sd(
                d.observations()
                    .iter()
                    .filter(|o| o.x.abs() < 0.05 && (o.x >= 0.0) == right)
                    .map(|o| o.y),
            )
        };
        let ratio = sd(true) / sd(false);
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn deterministic_in_seed() {
        let a = dgp_sample(&DgpSpec::new(DgpId::HeavyTail, 500, 9)).unwrap();
        let b = dgp_sample(&DgpSpec::new(DgpId::HeavyTail, 500, 9)).unwrap();
        assert_eq!(a.observations(), b.observations());
    }

    #[test]
    fn small_n_rejected() {
        assert!(dgp_sample(&DgpSpec::new(DgpId::Additive, 10, 0)).is_err());
    }

    #[test]
    fn truths() {
        assert_eq!(true_effects(&DgpSpec::new(DgpId::Additive, 100, 0)).unwrap(), (0.5, 0.5));
        assert_eq!(true_effects(&DgpSpec::new(DgpId::ScaleShift, 100, 0)).unwrap(), (1.0, 0.0));
        let u = default_u_grid();
        let p2 = true_psi2_on_grid(&DgpSpec::new(DgpId::ScaleShift, 100, 0), &u);
        assert!((p2 - 1.0).abs() < 0.02);
        let c = closed_u_grid(11);
        let a = true_psi2_on_grid(&DgpSpec::new(DgpId::Additive, 100, 0), &c);
        assert!((a - 0.25).abs() < 1e-15);
    }

    #[test]
    fn oracle_examples() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(empirical_wasserstein_oracle(&s, &s).unwrap(), 0.0);
        let t: Vec<f64> = s.iter().map(|v| v + 0.5).collect();
        assert!((empirical_wasserstein_oracle(&s, &t).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            empirical_wasserstein_oracle(&s, &t[1..]),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn oracle_matches_heavy_tail_truth() {
        let spec = DgpSpec::new(DgpId::HeavyTail, 100, 0);
        let (s0, s1) = limiting_samples(&spec, 1_000_000, 17);
        let psi = empirical_wasserstein_oracle(&s0, &s1).unwrap();
        let (truth, _) = true_effects(&spec).unwrap();
        // heavy right tail of exp(Z): allow a few percent
        assert!((psi - truth).abs() < 0.05 * truth, "{psi} vs {truth}");
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(replicate_seed(0, 1000, 0), replicate_seed(0, 1000, 1));
        assert_ne!(replicate_seed(0, 1000, 0), replicate_seed(0, 10000, 0));
        assert_eq!(replicate_seed(5, 10, 2), replicate_seed(5, 10, 2));
    }

    #[test]
    fn names_round_trip() {
        for id in DgpId::ALL {
            assert_eq!(id.name().parse::<DgpId>().unwrap(), id);
        }
        assert_eq!("iii".parse::<DgpId>().unwrap(), DgpId::HeavyTail);
        assert_eq!("conservative-test".parse::<McMethod>().unwrap(), McMethod::ConservativeTest);
    }
}
