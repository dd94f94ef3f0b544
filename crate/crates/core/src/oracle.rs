//! Exact randomization-distribution checks by exhaustive enumeration.
//!
//! Every identity the estimators rely on is evaluated here on a concrete
//! potential-outcome table: unbiasedness, the exact variance formula, the
//! conservativeness gap of the variance estimator, the simple-difference
//! bias decomposition, the equivalence of the regression and weighting
//! routes, and the expected excess of the non-clustered variance.

use rand::Rng;

use crate::error::Result;
use crate::estimate::{
    bias_simple_difference_oracle, simple_difference_bias_terms, unbiased_point,
};
use crate::model::{
    observe, true_estimand, EffectKind, ExperimentDesign, ObservedData, PotentialOutcomeTable,
    PotentialOutcomes, WeightScheme,
};
use crate::randomize::AssignmentSpace;
use crate::regress::{cluster_individual_path, naive_individual_path, weighted_regression_path};
use crate::variance::{
    estimated_variance, naive_variance_gap, theoretical_variance, variance_components,
};

/// Exact mean and variance of a statistic over the assignment distribution.
pub fn exact_moments(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    mut statistic: impl FnMut(&ObservedData) -> Result<f64>,
) -> Result<(f64, f64)> {
    let space = AssignmentSpace::with_cap(design, cap)?;
    let mut values = Vec::with_capacity(space.len() as usize);
    for (a, p) in space.iter() {
        values.push((p, statistic(&observe(po, &a)?)?));
    }
    let mean: f64 = values.iter().map(|(p, v)| p * v).sum();
    let var = values.iter().map(|(p, v)| p * (v - mean).powi(2)).sum();
    Ok((mean, var))
}

/// Custom estimand weights proportional to `(i + 1) / n_i`, normalized so
/// that `Σ w_i* n_i = 1`. Used to exercise a scheme that is neither
/// household- nor individual-weighted.
pub fn graded_custom_scheme(sizes: &[usize]) -> WeightScheme {
    let total: f64 = (1..=sizes.len()).map(|k| k as f64).sum();
    WeightScheme::Custom(
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (i + 1) as f64 / (n as f64 * total))
            .collect(),
    )
}

/// A potential-outcome table with household random effects, heterogeneous
/// effects and individual noise, all uniform on bounded ranges.
pub fn random_table<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> PotentialOutcomeTable {
    let households = sizes
        .iter()
        .map(|&n| {
            let base = rng.random_range(-2.0..2.0);
            let primary = rng.random_range(-1.0..3.0);
            let spillover = rng.random_range(-1.0..2.0);
            (0..n)
                .map(|_| {
                    let y00 = base + rng.random_range(-1.0..1.0);
                    PotentialOutcomes::new(
                        y00 + primary + rng.random_range(-0.5..0.5),
                        y00 + spillover + rng.random_range(-0.5..0.5),
                        y00,
                    )
                })
                .collect()
        })
        .collect();
    PotentialOutcomeTable::new(households).expect("bounded draws are finite")
}

/// Outcome of one identity check.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: String,
    /// Largest deviation seen, relative to `max(|reference|, 1)`.
    pub max_deviation: f64,
    pub passed: bool,
    /// Reason the check does not apply to this design, if any.
    pub skipped: Option<String>,
}

impl IdentityCheck {
    fn skip(name: &str, reason: &str) -> Self {
        Self {
            name: name.to_string(),
            max_deviation: 0.0,
            passed: true,
            skipped: Some(reason.to_string()),
        }
    }
}

/// `|got - reference| / max(|reference|, 1)`.
pub fn relative_deviation(got: f64, reference: f64) -> f64 {
    (got - reference).abs() / reference.abs().max(1.0)
}

struct Tracker {
    name: String,
    worst: f64,
    ok: bool,
    tolerance: f64,
}

impl Tracker {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            worst: 0.0,
            ok: true,
            tolerance,
        }
    }

    fn equal(&mut self, got: f64, reference: f64) {
        let d = relative_deviation(got, reference);
        self.worst = self.worst.max(d);
        self.ok &= d <= self.tolerance;
    }

    fn at_least(&mut self, got: f64, bound: f64) {
        self.ok &= got >= bound - self.tolerance * bound.abs().max(1.0);
    }

    fn finish(self) -> IdentityCheck {
        IdentityCheck {
            name: self.name,
            max_deviation: self.worst,
            passed: self.ok,
            skipped: None,
        }
    }
}

const PAIRED: [EffectKind; 2] = [EffectKind::Primary, EffectKind::Spillover];

fn schemes(design: &ExperimentDesign) -> [WeightScheme; 3] {
    [
        WeightScheme::HouseholdWeighted,
        WeightScheme::IndividualWeighted,
        graded_custom_scheme(design.household_sizes()),
    ]
}

/// Mean of the unbiased estimator equals the estimand for every scheme and
/// effect.
pub fn check_unbiasedness(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let mut t = Tracker::new("unbiasedness", tolerance);
    for scheme in schemes(design) {
        for effect in EffectKind::ALL {
            let (mean, _) = exact_moments(po, design, cap, |d| unbiased_point(d, design, &scheme, effect))?;
            t.equal(mean, true_estimand(po, &scheme, effect)?);
        }
    }
    Ok(t.finish())
}

/// Enumeration variance of the unbiased estimator equals the closed form.
pub fn check_variance_formula(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let mut t = Tracker::new("exact variance", tolerance);
    for scheme in schemes(design) {
        for effect in PAIRED {
            let (_, var) = exact_moments(po, design, cap, |d| unbiased_point(d, design, &scheme, effect))?;
            t.equal(var, theoretical_variance(po, design, &scheme, effect)?);
        }
    }
    Ok(t.finish())
}

fn variance_estimable(design: &ExperimentDesign) -> bool {
    design.num_treated() >= 2 && design.num_control() >= 2
}

/// The variance estimator is conservative on average, with excess exactly
/// `V_effect / N`.
pub fn check_conservative_variance(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    const NAME: &str = "conservative variance";
    if !variance_estimable(design) {
        return Ok(IdentityCheck::skip(NAME, "needs at least two treated and two control households"));
    }
    let mut t = Tracker::new(NAME, tolerance);
    let n = design.num_households() as f64;
    for scheme in schemes(design) {
        let c = variance_components(po, design, &scheme)?;
        for effect in PAIRED {
            let (mean, _) = exact_moments(po, design, cap, |d| estimated_variance(d, design, &scheme, effect))?;
            let var = theoretical_variance(po, design, &scheme, effect)?;
            let spread = if effect == EffectKind::Primary { c.v_wp } else { c.v_ws };
            t.at_least(mean, var);
            t.equal(mean - var, spread / n);
        }
    }
    Ok(t.finish())
}

/// Simple-difference bias by enumeration equals its decomposition.
pub fn check_simple_difference_bias(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let mut t = Tracker::new("simple-difference bias", tolerance);
    for effect in PAIRED {
        let oracle = bias_simple_difference_oracle(po, design, effect, cap)?;
        let terms = simple_difference_bias_terms(po, design, effect, cap)?;
        t.equal(terms.total(), oracle);
        if design.common_size().is_some() {
            t.equal(oracle, 0.0);
        }
    }
    Ok(t.finish())
}

/// Individual-level regression with cluster HC2 reproduces the household-
/// weighted estimates and variance estimates on every assignment. Equal
/// household sizes only.
pub fn check_cluster_regression(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    const NAME: &str = "cluster regression equivalence";
    if design.common_size().is_none() {
        return Ok(IdentityCheck::skip(NAME, "holds for equal household sizes only"));
    }
    if !variance_estimable(design) {
        return Ok(IdentityCheck::skip(NAME, "needs at least two treated and two control households"));
    }
    let mut t = Tracker::new(NAME, tolerance);
    let hw = WeightScheme::HouseholdWeighted;
    let space = AssignmentSpace::with_cap(design, cap)?;
    for (a, _) in space.iter() {
        let data = observe(po, &a)?;
        let pair = cluster_individual_path(&data, 0.95)?;
        for effect in PAIRED {
            let reg = pair.get(effect).expect("paired effect");
            t.equal(reg.point, unbiased_point(&data, design, &hw, effect)?);
            t.equal(reg.variance_hat, estimated_variance(&data, design, &hw, effect)?);
        }
    }
    Ok(t.finish())
}

/// Household-aggregate regression of transformed outcomes with HC2
/// reproduces the weighted estimates and variance estimates, for every
/// scheme and assignment.
pub fn check_weighted_regression(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    const NAME: &str = "weighted regression equivalence";
    if !variance_estimable(design) {
        return Ok(IdentityCheck::skip(NAME, "needs at least two treated and two control households"));
    }
    let mut t = Tracker::new(NAME, tolerance);
    let space = AssignmentSpace::with_cap(design, cap)?;
    for (a, _) in space.iter() {
        let data = observe(po, &a)?;
        for scheme in schemes(design) {
            let pair = weighted_regression_path(&data, design, &scheme, 0.95)?;
            for effect in PAIRED {
                let reg = pair.get(effect).expect("paired effect");
                t.equal(reg.point, unbiased_point(&data, design, &scheme, effect)?);
                t.equal(reg.variance_hat, estimated_variance(&data, design, &scheme, effect)?);
            }
        }
    }
    Ok(t.finish())
}

/// Expected non-clustered HC2 variance minus the exact variance equals the
/// closed-form gap. Equal household sizes only.
pub fn check_naive_gap(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<IdentityCheck> {
    const NAME: &str = "naive variance gap";
    if design.common_size().is_none() {
        return Ok(IdentityCheck::skip(NAME, "holds for equal household sizes only"));
    }
    if !variance_estimable(design) {
        return Ok(IdentityCheck::skip(NAME, "needs at least two treated and two control households"));
    }
    let mut t = Tracker::new(NAME, tolerance);
    let (mean, _) = exact_moments(po, design, cap, |d| {
        Ok(naive_individual_path(d, 0.95)?.robust.primary.variance_hat)
    })?;
    let var = theoretical_variance(po, design, &WeightScheme::HouseholdWeighted, EffectKind::Primary)?;
    t.equal(mean - var, naive_variance_gap(po, design)?.gap);
    Ok(t.finish())
}

/// Runs every identity check.
pub fn check_all(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    cap: u128,
    tolerance: f64,
) -> Result<Vec<IdentityCheck>> {
    // fail fast on capacity before doing any work
    AssignmentSpace::with_cap(design, cap)?;
    Ok(vec![
        check_unbiasedness(po, design, cap, tolerance)?,
        check_variance_formula(po, design, cap, tolerance)?,
        check_conservative_variance(po, design, cap, tolerance)?,
        check_simple_difference_bias(po, design, cap, tolerance)?,
        check_cluster_regression(po, design, cap, tolerance)?,
        check_weighted_regression(po, design, cap, tolerance)?,
        check_naive_gap(po, design, cap, tolerance)?,
    ])
}
