//! Monte Carlo studies: confidence-interval coverage of clustered,
//! non-clustered and nominal standard errors with equal household sizes, and
//! bias and spread of the unbiased, simple-difference and post-stratified
//! estimators of the individual-weighted effects with varying sizes.
//!
//! Randomness is split deterministically. Replicate `r` of grid cell `c`
//! draws from the ChaCha stream `(c << 32) | r` of the master seed, so
//! results do not depend on thread scheduling; a fixed table for cell `c`
//! comes from stream `(c << 32) | 0xFFFF_FFFF`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{post_stratified_point, simple_difference_point, unbiased_point, StrataSpec};
use crate::model::{
    observe, true_estimand, EffectKind, ExperimentDesign, PotentialOutcomeTable, PotentialOutcomes,
    WeightScheme,
};
use crate::randomize::{draw_assignment, SeededRng};
use crate::regress::{classical_covariance, hc2_cluster_robust, hc2_robust, individual_design, ols_fit};
use crate::variance::normal_quantile;

const TABLE_STREAM: u64 = 0xFFFF_FFFF;

fn stream(cell: usize, rep: usize) -> u64 {
    ((cell as u64) << 32) | rep as u64
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

/// Household means `Ȳ(0,0) ~ N(μ00, σc²)`, effects `τ^P ~ N(τ̄^P, σc²)` and
/// `τ^S ~ N(τ̄^S, σc²)`; members drawn independently around each of the three
/// household means with sd `σy`.
fn draw_household<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    mu00: f64,
    tau_p: f64,
    tau_s: f64,
    sigma_c: f64,
    sigma_y: f64,
) -> Vec<PotentialOutcomes> {
    let base = normal(rng, mu00, sigma_c);
    let primary = normal(rng, tau_p, sigma_c);
    let spillover = normal(rng, tau_s, sigma_c);
    (0..size)
        .map(|_| {
            let y11 = normal(rng, base + primary, sigma_y);
            let y10 = normal(rng, base + spillover, sigma_y);
            let y00 = normal(rng, base, sigma_y);
            PotentialOutcomes::new(y11, y10, y00)
        })
        .collect()
}

fn check_sd(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Structure(format!("{name} must be a finite non-negative number, got {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualSizeDgpConfig {
    pub mu00: f64,
    pub tau_p_bar: f64,
    pub tau_s_bar: f64,
    pub sigma_c: f64,
    pub sigma_y: f64,
    pub household_size: usize,
    pub num_households: usize,
    pub num_treated: usize,
}

impl EqualSizeDgpConfig {
    pub fn validate(&self) -> Result<()> {
        check_sd("sigma_c", self.sigma_c)?;
        check_sd("sigma_y", self.sigma_y)?;
        self.design().map(|_| ())
    }

    pub fn design(&self) -> Result<ExperimentDesign> {
        ExperimentDesign::new(vec![self.household_size; self.num_households], self.num_treated)
    }

    /// `σc² / (σc² + σy²)`, zero when both are zero.
    pub fn icc(&self) -> f64 {
        icc(self.sigma_c, self.sigma_y)
    }
}

fn icc(sigma_c: f64, sigma_y: f64) -> f64 {
    let total = sigma_c * sigma_c + sigma_y * sigma_y;
    if total > 0.0 {
        sigma_c * sigma_c / total
    } else {
        0.0
    }
}

pub fn generate_equal_size<R: Rng + ?Sized>(config: &EqualSizeDgpConfig, rng: &mut R) -> Result<PotentialOutcomeTable> {
    config.validate()?;
    let households = (0..config.num_households)
        .map(|_| {
            draw_household(
                rng,
                config.household_size,
                config.mu00,
                config.tau_p_bar,
                config.tau_s_bar,
                config.sigma_c,
                config.sigma_y,
            )
        })
        .collect();
    PotentialOutcomeTable::new(households)
}

/// Parameters for households of one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeParameters {
    pub size: usize,
    pub mu00: f64,
    pub tau_p_bar: f64,
    pub tau_s_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// Effects and baseline identical across household sizes.
    A,
    /// Effects and baseline shrink with household size.
    B,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            other => Err(Error::Structure(format!("unknown scenario '{other}', expected a or b"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::A => "a",
            Scenario::B => "b",
        })
    }
}

/// Households whose size is drawn uniformly from the listed sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VaryingSizeDgpConfig {
    pub sizes: Vec<SizeParameters>,
    pub sigma_c: f64,
    pub sigma_y: f64,
    pub num_households: usize,
    pub num_treated: usize,
}

impl VaryingSizeDgpConfig {
    /// `N = 200`, `N1 = 100`, `σc = σy = 0.3`, sizes 2, 3 and 4.
    pub fn scenario(scenario: Scenario) -> Self {
        let sizes = match scenario {
            Scenario::A => [2, 3, 4]
                .map(|size| SizeParameters {
                    size,
                    mu00: 2.0,
                    tau_p_bar: 1.5,
                    tau_s_bar: 0.7,
                })
                .to_vec(),
            Scenario::B => vec![
                SizeParameters { size: 2, mu00: 2.0, tau_p_bar: 1.5, tau_s_bar: 0.7 },
                SizeParameters { size: 3, mu00: 1.0, tau_p_bar: 0.75, tau_s_bar: 0.35 },
                SizeParameters { size: 4, mu00: 0.5, tau_p_bar: 0.37, tau_s_bar: 0.17 },
            ],
        };
        Self {
            sizes,
            sigma_c: 0.3,
            sigma_y: 0.3,
            num_households: 200,
            num_treated: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sd("sigma_c", self.sigma_c)?;
        check_sd("sigma_y", self.sigma_y)?;
        if self.sizes.is_empty() {
            return Err(Error::Structure("no household sizes configured".into()));
        }
        if let Some(p) = self.sizes.iter().find(|p| p.size < 2) {
            return Err(Error::Design(format!("household size {} is below 2", p.size)));
        }
        ExperimentDesign::new(vec![2; self.num_households], self.num_treated).map(|_| ())
    }
}

pub fn generate_varying_size<R: Rng + ?Sized>(
    config: &VaryingSizeDgpConfig,
    rng: &mut R,
) -> Result<PotentialOutcomeTable> {
    config.validate()?;
    let households = (0..config.num_households)
        .map(|_| {
            let p = config.sizes[rng.random_range(0..config.sizes.len())];
            draw_household(rng, p.size, p.mu00, p.tau_p_bar, p.tau_s_bar, config.sigma_c, config.sigma_y)
        })
        .collect();
    PotentialOutcomeTable::new(households)
}

/// One row of a study summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub condition: String,
    pub method: String,
    pub effect: EffectKind,
    pub coverage: Option<f64>,
    pub mean_bias: Option<f64>,
    pub abs_bias: Option<f64>,
    pub mc_sd: Option<f64>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StudyResult {
    pub fn find(&self, condition: &str, method: &str, effect: EffectKind) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.method == method && r.effect == effect)
    }

    /// Machine-readable CSV with shortest round-trip numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,method,effect,coverage,mean_bias,abs_bias,mc_sd,reps,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.condition,
                r.method,
                r.effect,
                opt(r.coverage),
                opt(r.mean_bias),
                opt(r.abs_bias),
                opt(r.mc_sd),
                r.reps,
                r.seed
            );
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let header = ["condition", "method", "effect", "coverage", "|bias|", "mc sd", "reps"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.condition.clone(),
                    r.method.clone(),
                    r.effect.to_string(),
                    fmt(r.coverage),
                    fmt(r.abs_bias),
                    fmt(r.mc_sd),
                    r.reps.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(k, (c, w))| if k < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CoverageMethod {
    ClusterHc2,
    NonClusterHc2,
    Nominal,
}

impl CoverageMethod {
    pub const ALL: [CoverageMethod; 3] = [CoverageMethod::ClusterHc2, CoverageMethod::NonClusterHc2, CoverageMethod::Nominal];

    pub fn label(self) -> &'static str {
        match self {
            CoverageMethod::ClusterHc2 => "cluster-hc2",
            CoverageMethod::NonClusterHc2 => "noncluster-hc2",
            CoverageMethod::Nominal => "nominal",
        }
    }
}

/// Grid and settings of the coverage study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageConfig {
    pub num_households: Vec<usize>,
    pub sigma_c: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub household_size: usize,
    pub mu00: f64,
    pub tau_p_bar: f64,
    pub tau_s_bar: f64,
    pub reps: usize,
    pub ci_level: f64,
    pub seed: u64,
    /// Draw one potential-outcome table per grid cell instead of one per
    /// replicate.
    pub fixed_table: bool,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        let sigmas = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        Self {
            num_households: vec![50, 100, 500, 1000],
            sigma_c: sigmas.clone(),
            sigma_y: sigmas,
            household_size: 4,
            mu00: 2.0,
            tau_p_bar: 1.5,
            tau_s_bar: 0.7,
            reps: 2000,
            ci_level: 0.95,
            seed: 20_190_601,
            fixed_table: false,
        }
    }
}

impl CoverageConfig {
    /// Grid cells in the order `N`, then `σc`, then `σy`. Half of the
    /// households are treated.
    pub fn cells(&self) -> Vec<EqualSizeDgpConfig> {
        let mut out = Vec::new();
        for &n in &self.num_households {
            for &sc in &self.sigma_c {
                for &sy in &self.sigma_y {
                    out.push(EqualSizeDgpConfig {
                        mu00: self.mu00,
                        tau_p_bar: self.tau_p_bar,
                        tau_s_bar: self.tau_s_bar,
                        sigma_c: sc,
                        sigma_y: sy,
                        household_size: self.household_size,
                        num_households: n,
                        num_treated: n / 2,
                    });
                }
            }
        }
        out
    }
}

/// Coverage counts for one grid cell, indexed `[method][effect]` with
/// methods in [`CoverageMethod::ALL`] order and effects primary, spillover.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCell {
    pub dgp: EqualSizeDgpConfig,
    pub reps: usize,
    pub covered: [[usize; 2]; 3],
}

impl CoverageCell {
    pub fn coverage(&self, method: CoverageMethod, effect: EffectKind) -> f64 {
        let m = CoverageMethod::ALL.iter().position(|&x| x == method).expect("listed method");
        let e = usize::from(effect != EffectKind::Primary);
        self.covered[m][e] as f64 / self.reps as f64
    }

    pub fn label(&self) -> String {
        format!("N={} sigma_c={} sigma_y={}", self.dgp.num_households, self.dgp.sigma_c, self.dgp.sigma_y)
    }
}

/// Coverage averaged over all grid cells sharing one intraclass correlation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IccPoint {
    pub icc: f64,
    pub method: CoverageMethod,
    pub effect: EffectKind,
    pub coverage: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStudy {
    pub config: CoverageConfig,
    pub cells: Vec<CoverageCell>,
}

const PAIRED: [EffectKind; 2] = [EffectKind::Primary, EffectKind::Spillover];

impl CoverageStudy {
    /// Coverage averaged over the whole grid.
    pub fn average_coverage(&self, method: CoverageMethod, effect: EffectKind) -> f64 {
        self.cells.iter().map(|c| c.coverage(method, effect)).sum::<f64>() / self.cells.len() as f64
    }

    /// Grid-average coverage per method and effect.
    pub fn summary(&self) -> StudyResult {
        let mut rows = Vec::new();
        for method in CoverageMethod::ALL {
            for effect in PAIRED {
                rows.push(StudyRow {
                    condition: "grid average".into(),
                    method: method.label().into(),
                    effect,
                    coverage: Some(self.average_coverage(method, effect)),
                    mean_bias: None,
                    abs_bias: None,
                    mc_sd: None,
                    reps: self.config.reps,
                    seed: self.config.seed,
                });
            }
        }
        StudyResult { rows }
    }

    /// Per-cell coverage rows.
    pub fn per_cell(&self) -> StudyResult {
        let mut rows = Vec::new();
        for cell in &self.cells {
            for method in CoverageMethod::ALL {
                for effect in PAIRED {
                    rows.push(StudyRow {
                        condition: cell.label(),
                        method: method.label().into(),
                        effect,
                        coverage: Some(cell.coverage(method, effect)),
                        mean_bias: None,
                        abs_bias: None,
                        mc_sd: None,
                        reps: cell.reps,
                        seed: self.config.seed,
                    });
                }
            }
        }
        StudyResult { rows }
    }

    /// Coverage against intraclass correlation, averaging cells with the
    /// same correlation; sorted by correlation.
    pub fn by_icc(&self) -> Vec<IccPoint> {
        let mut groups: BTreeMap<(u64, CoverageMethod, usize), (f64, f64, usize)> = BTreeMap::new();
        for cell in &self.cells {
            let icc = cell.dgp.icc();
            // cells share a correlation when their sd ratios agree
            let key = (icc * 1e9).round() as u64;
            for method in CoverageMethod::ALL {
                for (e, effect) in PAIRED.into_iter().enumerate() {
                    let g = groups.entry((key, method, e)).or_insert((icc, 0.0, 0));
                    g.1 += cell.coverage(method, effect);
                    g.2 += 1;
                }
            }
        }
        groups
            .into_iter()
            .map(|((_, method, e), (icc, sum, count))| IccPoint {
                icc,
                method,
                effect: PAIRED[e],
                coverage: sum / count as f64,
                cells: count,
            })
            .collect()
    }

    /// Per-correlation series as CSV.
    pub fn icc_csv(&self) -> String {
        let mut out = String::from("icc,method,effect,coverage,cells\n");
        for p in self.by_icc() {
            let _ = writeln!(out, "{},{},{},{},{}", p.icc, p.method.label(), p.effect, p.coverage, p.cells);
        }
        out
    }
}

/// Coverage indicators `[method][effect]` for one replicate.
fn coverage_replicate(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    rng: &mut SeededRng,
    z: f64,
) -> Result<[[bool; 2]; 3]> {
    let assignment = draw_assignment(design, rng);
    let data = observe(po, &assignment)?;
    let (y, x) = individual_design(&data)?;
    let fit = ols_fit(&x, &y)?;
    let covs = [
        hc2_cluster_robust(&fit, &x)?,
        hc2_robust(&fit, &x)?,
        classical_covariance(&fit, &x)?,
    ];
    let truth = [
        true_estimand(po, &WeightScheme::HouseholdWeighted, EffectKind::Primary)?,
        true_estimand(po, &WeightScheme::HouseholdWeighted, EffectKind::Spillover)?,
    ];
    let mut out = [[false; 2]; 3];
    for (m, cov) in covs.iter().enumerate() {
        for e in 0..2 {
            let k = e + 1;
            let half = z * cov[(k, k)].max(0.0).sqrt();
            out[m][e] = (fit.coefficients[k] - truth[e]).abs() <= half;
        }
    }
    Ok(out)
}

/// Coverage of Wald intervals from the individual-level regression with
/// clustered HC2, non-clustered HC2 and classical standard errors, against
/// the household-weighted estimand of each replicate's table.
pub fn coverage_study(config: &CoverageConfig) -> Result<CoverageStudy> {
    if config.reps == 0 || config.reps >= TABLE_STREAM as usize {
        return Err(Error::Structure(format!("reps must lie in 1..{TABLE_STREAM}, got {}", config.reps)));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::Structure(format!("confidence level must lie in (0, 1), got {}", config.ci_level)));
    }
    let z = normal_quantile(0.5 + config.ci_level / 2.0);
    let mut cells = Vec::new();
    for (c, dgp) in config.cells().into_iter().enumerate() {
        dgp.validate()?;
        let design = dgp.design()?;
        let fixed = if config.fixed_table {
            Some(generate_equal_size(&dgp, &mut SeededRng::new(config.seed, stream(c, TABLE_STREAM as usize)))?)
        } else {
            None
        };
        let outcomes: Vec<[[bool; 2]; 3]> = (0..config.reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = SeededRng::new(config.seed, stream(c, r));
                match &fixed {
                    Some(po) => coverage_replicate(po, &design, &mut rng, z),
                    None => {
                        let po = generate_equal_size(&dgp, &mut rng)?;
                        coverage_replicate(&po, &design, &mut rng, z)
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut covered = [[0usize; 2]; 3];
        for rep in &outcomes {
            for m in 0..3 {
                for e in 0..2 {
                    covered[m][e] += usize::from(rep[m][e]);
                }
            }
        }
        cells.push(CoverageCell {
            dgp,
            reps: config.reps,
            covered,
        });
    }
    Ok(CoverageStudy {
        config: config.clone(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IwEstimator {
    Unbiased,
    SimpleDifference,
    PostStratified,
}

impl IwEstimator {
    pub const ALL: [IwEstimator; 3] = [IwEstimator::Unbiased, IwEstimator::SimpleDifference, IwEstimator::PostStratified];

    pub fn label(self) -> &'static str {
        match self {
            IwEstimator::Unbiased => "unbiased",
            IwEstimator::SimpleDifference => "simple-difference",
            IwEstimator::PostStratified => "post-stratified",
        }
    }
}

/// Estimation errors `estimate - τ_IW` for each estimator (outer) and
/// effect (inner) on one replicate.
fn iw_replicate(config: &VaryingSizeDgpConfig, rng: &mut SeededRng) -> Result<[[f64; 2]; 3]> {
    let po = generate_varying_size(config, rng)?;
    let design = ExperimentDesign::new(po.sizes(), config.num_treated)?;
    let data = observe(&po, &draw_assignment(&design, rng))?;
    let strata = StrataSpec::each_size(design.household_sizes());
    let iw = WeightScheme::IndividualWeighted;
    let mut out = [[0.0; 2]; 3];
    for (e, effect) in PAIRED.into_iter().enumerate() {
        let truth = true_estimand(&po, &iw, effect)?;
        out[0][e] = unbiased_point(&data, &design, &iw, effect)? - truth;
        out[1][e] = simple_difference_point(&data, effect)? - truth;
        out[2][e] = post_stratified_point(&data, &design, &strata, &iw, effect)? - truth;
    }
    Ok(out)
}

/// Bias and Monte Carlo spread of the three estimators of the
/// individual-weighted effects. The reported bias is the mean estimation
/// error against each replicate's own estimand; the spread is the standard
/// deviation of that error.
pub fn iw_estimator_study(config: &VaryingSizeDgpConfig, reps: usize, seed: u64) -> Result<StudyResult> {
    config.validate()?;
    if reps == 0 {
        return Err(Error::Structure("reps must be at least 1".into()));
    }
    let errors: Vec<[[f64; 2]; 3]> = (0..reps)
        .into_par_iter()
        .map(|r| iw_replicate(config, &mut SeededRng::new(seed, stream(0, r))))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, estimator) in IwEstimator::ALL.into_iter().enumerate() {
        for (e, effect) in PAIRED.into_iter().enumerate() {
            let values: Vec<f64> = errors.iter().map(|rep| rep[k][e]).collect();
            let mean = values.iter().sum::<f64>() / reps as f64;
            let sd = if reps > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(StudyRow {
                condition: "iw".into(),
                method: estimator.label().into(),
                effect,
                coverage: None,
                mean_bias: Some(mean),
                abs_bias: Some(mean.abs()),
                mc_sd: Some(sd),
                reps,
                seed,
            });
        }
    }
    Ok(StudyResult { rows })
}
