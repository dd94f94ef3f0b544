//! Point estimators for two-stage designs: the unbiased inverse-probability
//! weighted estimator, its Hájek ratio form, the simple difference in means,
//! post-stratification, and covariate residualization for model-assisted
//! estimation.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    observe, true_estimand, Cell, EffectEstimate, EffectKind, EstimatorFamily, ExperimentDesign,
    ObservedData, PotentialOutcomeTable, WeightScheme,
};
use crate::randomize::{inclusion_weights, AssignmentSpace};
use crate::regress::{hc2_cluster_robust, individual_design, ols_fit, DesignMatrix};
use crate::variance::estimated_variance;

/// Whether `cell` is on the treated side of `effect`.
fn treated_side(effect: EffectKind, cell: Cell) -> bool {
    match effect.treated_cell() {
        Some(c) => c == cell,
        None => cell != Cell::T00,
    }
}

/// The unbiased weighted point estimate
/// `Σ_{T_hz} w^(hz)_i w_i* Y - Σ_{T00} w^(00)_i w_i* Y`.
///
/// For the overall effect the treated side pools every member of a treated
/// household with weight `(N / N1) w_i*`.
pub fn unbiased_point(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<f64> {
    data.check_design(design)?;
    let w_star = scheme.estimand_weights(design.household_sizes())?;
    let inclusion = inclusion_weights(design);
    let overall = design.num_households() as f64 / design.num_treated() as f64;
    let mut treated = 0.0;
    let mut control = 0.0;
    let mut treated_count = 0usize;
    for ((hh, w), iw) in data.households().iter().zip(&w_star).zip(&inclusion) {
        for (j, &y) in hh.outcomes().iter().enumerate() {
            let cell = hh.cell(j);
            if cell == Cell::T00 {
                control += iw.control * w * y;
            } else if treated_side(effect, cell) {
                let weight = match cell {
                    _ if effect == EffectKind::Overall => overall,
                    Cell::T11 => iw.treated,
                    _ => iw.spillover,
                };
                treated += weight * w * y;
                treated_count += 1;
            }
        }
    }
    if treated_count == 0 {
        return Err(Error::Estimation(format!(
            "no observations in the treated cell for the {effect} effect"
        )));
    }
    Ok(treated - control)
}

/// Unbiased weighted estimate with its conservative variance estimate and
/// Wald interval.
pub fn estimate_unbiased(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
    level: f64,
) -> Result<EffectEstimate> {
    let point = unbiased_point(data, design, scheme, effect)?;
    let variance = estimated_variance(data, design, scheme, effect)?;
    EffectEstimate::new(effect, scheme.clone(), EstimatorFamily::Unbiased, point, variance, level)
}

/// Per-cell normalized means `Σ w Y / Σ w` on the treated side and in `T00`.
fn hajek_means(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<(f64, f64)> {
    data.check_design(design)?;
    let w_star = scheme.estimand_weights(design.household_sizes())?;
    let inclusion = inclusion_weights(design);
    let overall = design.num_households() as f64 / design.num_treated() as f64;
    let (mut tw, mut twy, mut cw, mut cwy) = (0.0, 0.0, 0.0, 0.0);
    for ((hh, w), iw) in data.households().iter().zip(&w_star).zip(&inclusion) {
        for (j, &y) in hh.outcomes().iter().enumerate() {
            let cell = hh.cell(j);
            if cell == Cell::T00 {
                cw += iw.control * w;
                cwy += iw.control * w * y;
            } else if treated_side(effect, cell) {
                let weight = match cell {
                    _ if effect == EffectKind::Overall => overall,
                    Cell::T11 => iw.treated,
                    _ => iw.spillover,
                } * w;
                tw += weight;
                twy += weight * y;
            }
        }
    }
    if tw <= 0.0 || cw <= 0.0 {
        let cell = if tw <= 0.0 { "treated" } else { "control" };
        return Err(Error::Estimation(format!(
            "{cell} cell for the {effect} effect has zero total weight"
        )));
    }
    Ok((twy / tw, cwy / cw))
}

pub fn hajek_point(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<f64> {
    let (t, c) = hajek_means(data, design, scheme, effect)?;
    Ok(t - c)
}

/// Hájek estimate. The variance is the conservative estimator applied to
/// outcomes centered at their cell's normalized mean (linearization).
pub fn estimate_hajek(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
    level: f64,
) -> Result<EffectEstimate> {
    let (t, c) = hajek_means(data, design, scheme, effect)?;
    let households = data.households();
    let centered = data.map_outcomes(|i, j, y| {
        let cell = households[i].cell(j);
        if cell == Cell::T00 {
            y - c
        } else if treated_side(effect, cell) {
            y - t
        } else {
            y
        }
    });
    let variance = estimated_variance(&centered, design, scheme, effect)?;
    EffectEstimate::new(effect, scheme.clone(), EstimatorFamily::Hajek, t - c, variance, level)
}

/// Difference of individual-level means between the effect's treated cell
/// and `T00`, ignoring households.
pub fn simple_difference_point(data: &ObservedData, effect: EffectKind) -> Result<f64> {
    let cell = effect.treated_cell().ok_or_else(|| {
        Error::Estimation("the simple difference is defined for primary and spillover effects".into())
    })?;
    let mean = |c: Cell| {
        let (sum, count) = data
            .households()
            .iter()
            .flat_map(|hh| hh.members_in(c))
            .fold((0.0, 0usize), |(s, k), (_, y)| (s + y, k + 1));
        if count == 0 {
            Err(Error::Estimation(format!("cell {c} is empty")))
        } else {
            Ok(sum / count as f64)
        }
    };
    Ok(mean(cell)? - mean(Cell::T00)?)
}

/// Simple difference with the cluster-robust HC2 variance of the matching
/// coefficient in the individual-level regression.
pub fn estimate_simple_difference(data: &ObservedData, effect: EffectKind, level: f64) -> Result<EffectEstimate> {
    let point = simple_difference_point(data, effect)?;
    let (y, x) = individual_design(data)?;
    let fit = ols_fit(&x, &y)?;
    let cov = hc2_cluster_robust(&fit, &x)?;
    let k = if effect == EffectKind::Primary { 1 } else { 2 };
    EffectEstimate::new(
        effect,
        WeightScheme::IndividualWeighted,
        EstimatorFamily::SimpleDifference,
        point,
        cov[(k, k)].max(0.0),
        level,
    )
}

/// Exact bias `E[τ̂_sd] - τ_IW` of the simple difference, by enumeration.
pub fn bias_simple_difference_oracle(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    effect: EffectKind,
    cap: u128,
) -> Result<f64> {
    po.check_design(design)?;
    let space = AssignmentSpace::with_cap(design, cap)?;
    let mut expectation = 0.0;
    for (a, p) in space.iter() {
        expectation += p * simple_difference_point(&observe(po, &a)?, effect)?;
    }
    Ok(expectation - true_estimand(po, &WeightScheme::IndividualWeighted, effect)?)
}

/// The two sources of simple-difference bias: unequal second-stage
/// probabilities (`size_term`) and random cell sizes (the covariance terms,
/// each already scaled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleDifferenceBias {
    pub size_term: f64,
    /// `cov(Ȳ00, n00⁺) / (N0 n̄)`.
    pub control_term: f64,
    /// `-cov(Ȳ10, n10⁺) / (N1 (n̄ - 1))`; zero for the primary effect, whose
    /// treated cell always has `N1` members.
    pub treated_term: f64,
}

impl SimpleDifferenceBias {
    pub fn total(&self) -> f64 {
        self.size_term + self.control_term + self.treated_term
    }
}

/// Closed-form bias decomposition. The covariances between cell means and
/// cell sizes have no closed form and are computed by enumeration.
pub fn simple_difference_bias_terms(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    effect: EffectKind,
    cap: u128,
) -> Result<SimpleDifferenceBias> {
    let cell = effect.treated_cell().ok_or_else(|| {
        Error::Estimation("the simple difference is defined for primary and spillover effects".into())
    })?;
    po.check_design(design)?;
    let n = design.num_households() as f64;
    let n1 = design.num_treated() as f64;
    let n0 = design.num_control() as f64;
    let nbar = design.mean_size();

    let size_term = po
        .households()
        .iter()
        .map(|hh| {
            let k = hh.len() as f64;
            let factor = match cell {
                Cell::T11 => nbar / k - 1.0,
                _ => (nbar / (nbar - 1.0)) / (k / (k - 1.0)) - 1.0,
            };
            factor * hh.iter().map(|p| p.get(cell)).sum::<f64>()
        })
        .sum::<f64>()
        / (n * nbar);

    // E[mean · count] - E[mean] E[count] for T00 and T10
    let space = AssignmentSpace::with_cap(design, cap)?;
    let mut moments = [[0.0f64; 3]; 2];
    for (a, p) in space.iter() {
        let data = observe(po, &a)?;
        for (slot, c) in [Cell::T00, Cell::T10].into_iter().enumerate() {
            let (sum, count) = data
                .households()
                .iter()
                .flat_map(|hh| hh.members_in(c))
                .fold((0.0, 0usize), |(s, k), (_, y)| (s + y, k + 1));
            let count = count as f64;
            let mean = sum / count;
            moments[slot][0] += p * mean * count;
            moments[slot][1] += p * mean;
            moments[slot][2] += p * count;
        }
    }
    let cov = |m: [f64; 3]| m[0] - m[1] * m[2];
    let control_term = cov(moments[0]) / (n0 * nbar);
    let treated_term = match cell {
        Cell::T10 => -cov(moments[1]) / (n1 * (nbar - 1.0)),
        _ => 0.0,
    };
    Ok(SimpleDifferenceBias {
        size_term,
        control_term,
        treated_term,
    })
}

/// Partition of households into post-strata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrataSpec {
    labels: Vec<String>,
    membership: Vec<usize>,
}

impl StrataSpec {
    /// Strata from one label per household; strata are ordered by first
    /// appearance.
    pub fn from_labels<S: AsRef<str>>(household_labels: &[S]) -> Self {
        let mut labels: Vec<String> = Vec::new();
        let membership = household_labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                match labels.iter().position(|x| x == l) {
                    Some(k) => k,
                    None => {
                        labels.push(l.to_string());
                        labels.len() - 1
                    }
                }
            })
            .collect();
        Self { labels, membership }
    }

    /// Strata by household size from cut points such as `"2,3,4-7"`. Every
    /// observed size must fall in exactly one range.
    pub fn by_size(sizes: &[usize], cuts: &str) -> Result<Self> {
        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for part in cuts.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = || Error::Structure(format!("invalid size range '{part}'"));
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (
                    a.trim().parse::<usize>().map_err(|_| bad())?,
                    b.trim().parse::<usize>().map_err(|_| bad())?,
                ),
                None => {
                    let k = part.parse::<usize>().map_err(|_| bad())?;
                    (k, k)
                }
            };
            if lo > hi {
                return Err(bad());
            }
            if let Some((a, b, _)) = ranges.iter().find(|(a, b, _)| lo <= *b && *a <= hi) {
                return Err(Error::Structure(format!(
                    "size range '{part}' overlaps {a}-{b}"
                )));
            }
            ranges.push((lo, hi, part.to_string()));
        }
        if ranges.is_empty() {
            return Err(Error::Structure("no size ranges given".into()));
        }
        let mut household_labels = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let range = ranges
                .iter()
                .find(|(a, b, _)| *a <= s && s <= *b)
                .ok_or_else(|| Error::Structure(format!("household size {s} is not covered by '{cuts}'")))?;
            household_labels.push(range.2.clone());
        }
        let mut spec = Self::from_labels(&household_labels);
        // report strata in the order the ranges were given
        let order: Vec<usize> = ranges
            .iter()
            .filter_map(|(_, _, l)| spec.labels.iter().position(|x| x == l))
            .collect();
        let remap: Vec<usize> = (0..spec.labels.len())
            .map(|k| order.iter().position(|&o| o == k).unwrap_or(k))
            .collect();
        spec.labels = order.iter().map(|&k| spec.labels[k].clone()).collect();
        for m in &mut spec.membership {
            *m = remap[*m];
        }
        Ok(spec)
    }

    /// One stratum per distinct household size.
    pub fn each_size(sizes: &[usize]) -> Self {
        let distinct: BTreeSet<usize> = sizes.iter().copied().collect();
        let cuts = distinct.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        Self::by_size(sizes, &cuts).expect("distinct sizes always form a valid partition")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_strata(&self) -> usize {
        self.labels.len()
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    /// Household indices in stratum `k`.
    pub fn households_in(&self, k: usize) -> Vec<usize> {
        self.membership
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == k).then_some(i))
            .collect()
    }
}

/// Stratum-level pieces of a post-stratified estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumEstimate {
    pub label: String,
    pub households: usize,
    pub treated_households: usize,
    pub individuals: usize,
    /// Pooling weight `Σ_{i in stratum} w_i* n_i`.
    pub weight: f64,
    pub estimate: EffectEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostStratifiedEstimate {
    pub pooled: EffectEstimate,
    pub strata: Vec<StratumEstimate>,
}

struct StratumPart {
    label: String,
    data: ObservedData,
    design: ExperimentDesign,
    scheme: WeightScheme,
    weight: f64,
}

/// Splits data into strata, each analysed as its own two-stage experiment
/// conditional on its realized number of treated households. The
/// within-stratum estimand weights are the overall ones renormalized to the
/// stratum, so that the pooled estimand is unchanged.
fn stratum_parts(
    data: &ObservedData,
    design: &ExperimentDesign,
    strata: &StrataSpec,
    scheme: &WeightScheme,
) -> Result<Vec<StratumPart>> {
    data.check_design(design)?;
    if strata.membership.len() != data.num_households() {
        return Err(Error::Structure(format!(
            "strata cover {} households, data has {}",
            strata.membership.len(),
            data.num_households()
        )));
    }
    let sizes = design.household_sizes();
    let w_star = scheme.estimand_weights(sizes)?;
    let mut parts = Vec::with_capacity(strata.num_strata());
    for (k, label) in strata.labels.iter().enumerate() {
        let idx = strata.households_in(k);
        let sub = data.subset(&idx);
        let treated = sub.num_treated_households();
        let control = sub.num_households() - treated;
        if treated == 0 || control == 0 {
            return Err(Error::Estimation(format!(
                "stratum '{label}' has {treated} treated and {control} control households; \
                 both are needed"
            )));
        }
        let sub_sizes: Vec<usize> = idx.iter().map(|&i| sizes[i]).collect();
        let weight: f64 = idx.iter().map(|&i| w_star[i] * sizes[i] as f64).sum();
        let sub_scheme = match scheme {
            WeightScheme::Custom(_) => {
                if weight <= 0.0 {
                    return Err(Error::Estimation(format!(
                        "stratum '{label}' has zero total custom weight"
                    )));
                }
                WeightScheme::Custom(idx.iter().map(|&i| w_star[i] / weight).collect())
            }
            other => other.clone(),
        };
        let sub_design = ExperimentDesign::new(sub_sizes, treated)
            .map_err(|e| Error::Estimation(format!("stratum '{label}': {e}")))?;
        parts.push(StratumPart {
            label: label.clone(),
            data: sub,
            design: sub_design,
            scheme: sub_scheme,
            weight,
        });
    }
    Ok(parts)
}

/// Post-stratified point estimate `Σ_k W_k τ̂_k`. Each stratum needs at least
/// one treated and one control household.
pub fn post_stratified_point(
    data: &ObservedData,
    design: &ExperimentDesign,
    strata: &StrataSpec,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<f64> {
    stratum_parts(data, design, strata, scheme)?
        .iter()
        .map(|p| Ok(p.weight * unbiased_point(&p.data, &p.design, &p.scheme, effect)?))
        .sum()
}

/// Post-stratified estimate with variance `Σ_k W_k² Var_k`. Each stratum
/// needs at least two treated and two control households.
pub fn estimate_post_stratified(
    data: &ObservedData,
    design: &ExperimentDesign,
    strata: &StrataSpec,
    scheme: &WeightScheme,
    effect: EffectKind,
    level: f64,
) -> Result<PostStratifiedEstimate> {
    let parts = stratum_parts(data, design, strata, scheme)?;
    let mut point = 0.0;
    let mut variance = 0.0;
    let mut out = Vec::with_capacity(parts.len());
    for p in parts {
        let est = estimate_unbiased(&p.data, &p.design, &p.scheme, effect, level)
            .map_err(|e| Error::Estimation(format!("stratum '{}': {e}", p.label)))?;
        point += p.weight * est.point;
        variance += p.weight * p.weight * est.variance_hat;
        let est = EffectEstimate {
            family: EstimatorFamily::PostStratified,
            ..est
        };
        out.push(StratumEstimate {
            label: p.label,
            households: p.design.num_households(),
            treated_households: p.design.num_treated(),
            individuals: p.design.total_individuals(),
            weight: p.weight,
            estimate: est,
        });
    }
    let pooled = EffectEstimate::new(
        effect,
        scheme.clone(),
        EstimatorFamily::PostStratified,
        point,
        variance,
        level,
    )?;
    Ok(PostStratifiedEstimate { pooled, strata: out })
}

/// Replaces each outcome by `Y - r(x)`, with `r(x) = γ0 + x'γ` when
/// `include_constant` is set (γ0 first) and `r(x) = x'γ` otherwise.
pub fn residualize(data: &ObservedData, gamma: &[f64], include_constant: bool) -> Result<ObservedData> {
    let k = data.covariate_names().len();
    let expected = k + usize::from(include_constant);
    if gamma.len() != expected {
        return Err(Error::Structure(format!(
            "coefficient vector has length {}, expected {expected} for {k} covariates",
            gamma.len()
        )));
    }
    if k == 0 && !include_constant {
        return Err(Error::Structure("data carries no covariates to residualize on".into()));
    }
    let (intercept, slopes) = if include_constant {
        (gamma[0], &gamma[1..])
    } else {
        (0.0, gamma)
    };
    let households = data.households();
    Ok(data.map_outcomes(|i, j, y| {
        let fitted = match households[i].covariates().get(j) {
            Some(x) => x.iter().zip(slopes).map(|(a, b)| a * b).sum::<f64>(),
            None => 0.0,
        };
        y - intercept - fitted
    }))
}

/// Least-squares coefficients of outcome on an intercept and the covariates,
/// intercept first. Assignment indicators are not included.
pub fn fit_gamma_holdout(holdout: &ObservedData) -> Result<Vec<f64>> {
    let k = holdout.covariate_names().len();
    let m = holdout.total_individuals();
    let mut x = DMatrix::zeros(m, k + 1);
    let mut y = DVector::zeros(m);
    let mut row = 0;
    for hh in holdout.households() {
        for (j, &v) in hh.outcomes().iter().enumerate() {
            x[(row, 0)] = 1.0;
            for (c, &xc) in hh.covariates().get(j).into_iter().flatten().enumerate() {
                x[(row, c + 1)] = xc;
            }
            y[row] = v;
            row += 1;
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(holdout.covariate_names().iter().cloned());
    let design = DesignMatrix::new(x, vec![0; m], names)?;
    Ok(ols_fit(&design, &y)?.coefficients.iter().copied().collect())
}

/// Unbiased estimator applied to covariate-residualized outcomes.
pub fn estimate_model_assisted(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
    gamma: &[f64],
    level: f64,
) -> Result<EffectEstimate> {
    let adjusted = residualize(data, gamma, true)?;
    let est = estimate_unbiased(&adjusted, design, scheme, effect, level)?;
    Ok(EffectEstimate {
        family: EstimatorFamily::ModelAssisted,
        ..est
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Household, PotentialOutcomes};
    use crate::randomize::DEFAULT_ENUMERATION_CAP;

    fn data(hhs: &[(Option<usize>, &[f64])]) -> ObservedData {
        ObservedData::new(
            hhs.iter()
                .enumerate()
                .map(|(i, (t, ys))| Household::new(i.to_string(), *t, ys.to_vec()).unwrap())
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn worked_example() -> (ObservedData, ExperimentDesign) {
        let d = data(&[(Some(0), &[5.0, 3.0]), (None, &[1.0, 2.0])]);
        let design = d.infer_design().unwrap();
        (d, design)
    }

    #[test]
    fn worked_example_points() {
        let (d, design) = worked_example();
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            let p = unbiased_point(&d, &design, &scheme, EffectKind::Primary).unwrap();
            let s = unbiased_point(&d, &design, &scheme, EffectKind::Spillover).unwrap();
            assert!((p - 3.5).abs() < 1e-14, "{scheme}: {p}");
            assert!((s - 1.5).abs() < 1e-14, "{scheme}: {s}");
        }
        // overall: mean of treated household (4) minus control mean (1.5)
        let o = unbiased_point(&d, &design, &WeightScheme::HouseholdWeighted, EffectKind::Overall).unwrap();
        assert!((o - 2.5).abs() < 1e-14);
        assert!((simple_difference_point(&d, EffectKind::Primary).unwrap() - 3.5).abs() < 1e-14);
        assert!(simple_difference_point(&d, EffectKind::Overall).is_err());
    }

    #[test]
    fn constant_outcomes() {
        let d = data(&[
            (Some(0), &[2.0, 2.0]),
            (Some(1), &[2.0, 2.0, 2.0, 2.0]),
            (None, &[2.0, 2.0, 2.0]),
            (None, &[2.0, 2.0]),
        ]);
        let design = d.infer_design().unwrap();
        for effect in [EffectKind::Primary, EffectKind::Spillover] {
            assert!(hajek_point(&d, &design, &WeightScheme::IndividualWeighted, effect).unwrap() == 0.0);
            assert_eq!(simple_difference_point(&d, effect).unwrap(), 0.0);
        }
        // HT with constant outcomes is only zero on average when sizes vary
        let equal = data(&[(Some(0), &[2.0, 2.0]), (Some(1), &[2.0, 2.0]), (None, &[2.0, 2.0]), (None, &[2.0, 2.0])]);
        let de = equal.infer_design().unwrap();
        for effect in EffectKind::ALL {
            let p = unbiased_point(&equal, &de, &WeightScheme::IndividualWeighted, effect).unwrap();
            assert!(p.abs() < 1e-14);
        }
    }

    #[test]
    fn hajek_matches_unbiased_for_equal_sizes() {
        let d = data(&[
            (Some(0), &[5.0, 3.0, 1.0]),
            (Some(2), &[1.0, 2.0, 7.0]),
            (None, &[1.0, 2.0, 0.5]),
            (None, &[4.0, 0.0, 1.0]),
            (None, &[2.0, 2.5, 3.0]),
        ]);
        let design = d.infer_design().unwrap();
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            for effect in EffectKind::ALL {
                let h = estimate_hajek(&d, &design, &scheme, effect, 0.95).unwrap();
                let u = estimate_unbiased(&d, &design, &scheme, effect, 0.95).unwrap();
                assert!((h.point - u.point).abs() < 1e-12);
                assert!((h.variance_hat - u.variance_hat).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hajek_ratio_by_hand() {
        // sizes (2, 4), N1 = 1, IW; T11 holds one member so its normalized
        // mean is that outcome, T00 averages household 1 with weight N/N0 / n⁺
        let d = data(&[(None, &[1.0, 3.0]), (Some(1), &[4.0, 8.0, 2.0, 0.0])]);
        let design = d.infer_design().unwrap();
        let p = hajek_point(&d, &design, &WeightScheme::IndividualWeighted, EffectKind::Primary).unwrap();
        assert!((p - (8.0 - 2.0)).abs() < 1e-14);
        let s = hajek_point(&d, &design, &WeightScheme::IndividualWeighted, EffectKind::Spillover).unwrap();
        assert!((s - (2.0 - 2.0)).abs() < 1e-14);
        // HT for comparison: primary = (2/1)(4)(8)/6 - 2 (1+3)/6
        let u = unbiased_point(&d, &design, &WeightScheme::IndividualWeighted, EffectKind::Primary).unwrap();
        assert!((u - (64.0 / 6.0 - 8.0 / 6.0)).abs() < 1e-13);
    }

    #[test]
    fn hajek_is_location_invariant() {
        let d = data(&[
            (Some(0), &[5.0, 3.0]),
            (Some(2), &[1.0, 2.0, 7.0]),
            (None, &[1.0, 2.0, 0.5, 4.0]),
            (None, &[4.0, 0.0]),
        ]);
        let design = d.infer_design().unwrap();
        let shifted = d.map_outcomes(|_, _, y| y + 10.0);
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            for effect in EffectKind::ALL {
                let a = hajek_point(&d, &design, &scheme, effect).unwrap();
                let b = hajek_point(&shifted, &design, &scheme, effect).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simple_difference_matches_household_weighted_for_size_two() {
        let d = data(&[
            (Some(0), &[5.0, 3.0]),
            (Some(1), &[1.0, 2.0]),
            (None, &[1.0, 2.0]),
            (None, &[4.0, 0.5]),
        ]);
        let design = d.infer_design().unwrap();
        for effect in [EffectKind::Primary, EffectKind::Spillover] {
            let sd = simple_difference_point(&d, effect).unwrap();
            let hw = unbiased_point(&d, &design, &WeightScheme::HouseholdWeighted, effect).unwrap();
            assert!((sd - hw).abs() < 1e-14);
        }
    }

    fn sized_table(sizes: &[usize], f: impl Fn(usize, usize, usize) -> (f64, f64, f64)) -> PotentialOutcomeTable {
        PotentialOutcomeTable::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    (0..n)
                        .map(|j| {
                            let (a, b, c) = f(i, j, n);
                            PotentialOutcomes::new(a, b, c)
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn simple_difference_bias_cases() {
        let cap = DEFAULT_ENUMERATION_CAP;
        let equal = sized_table(&[3, 3, 3, 3], |i, j, _| (i as f64 + j as f64 * 0.5, (i * j) as f64, j as f64));
        let design = ExperimentDesign::new(equal.sizes(), 2).unwrap();
        for effect in [EffectKind::Primary, EffectKind::Spillover] {
            assert!(bias_simple_difference_oracle(&equal, &design, effect, cap).unwrap().abs() < 1e-12);
        }

        let constant = sized_table(&[2, 2, 3, 3], |_, _, _| (1.0, 1.0, 1.0));
        let design = ExperimentDesign::new(constant.sizes(), 2).unwrap();
        for effect in [EffectKind::Primary, EffectKind::Spillover] {
            assert!(bias_simple_difference_oracle(&constant, &design, effect, cap).unwrap().abs() < 1e-12);
        }

        // y11 = n_i, y00 = 0: treated mean is the average size of a uniformly
        // drawn treated pair, N1 = 2 of (2,2,3,3) -> 2.5 on average; the IW
        // estimand is (4 + 4 + 9 + 9) / 10 = 2.6
        let po = sized_table(&[2, 2, 3, 3], |_, _, n| (n as f64, 0.0, 0.0));
        let bias = bias_simple_difference_oracle(&po, &design, EffectKind::Primary, cap).unwrap();
        assert!((bias - (2.5 - 2.6)).abs() < 1e-12);
        let terms = simple_difference_bias_terms(&po, &design, EffectKind::Primary, cap).unwrap();
        assert!((terms.total() - bias).abs() < 1e-12);
    }

    #[test]
    fn bias_decomposition_matches_enumeration() {
        let po = sized_table(&[2, 3, 4, 2, 3], |i, j, n| {
            let base = (i * 7 + j * 3) as f64 % 5.0;
            (base + n as f64, base + (n * n) as f64, base)
        });
        let design = ExperimentDesign::new(po.sizes(), 2).unwrap();
        for effect in [EffectKind::Primary, EffectKind::Spillover] {
            let oracle = bias_simple_difference_oracle(&po, &design, effect, DEFAULT_ENUMERATION_CAP).unwrap();
            let terms = simple_difference_bias_terms(&po, &design, effect, DEFAULT_ENUMERATION_CAP).unwrap();
            assert!((terms.total() - oracle).abs() < 1e-10, "{effect}: {} vs {oracle}", terms.total());
            assert!(oracle.abs() > 1e-3);
        }
    }

    #[test]
    fn strata_by_size_parsing() {
        let sizes = [2, 3, 5, 2, 7, 4];
        let s = StrataSpec::by_size(&sizes, "2,3,4-7").unwrap();
        assert_eq!(s.labels(), &["2", "3", "4-7"]);
        assert_eq!(s.membership(), &[0, 1, 2, 0, 2, 2]);
        assert!(StrataSpec::by_size(&sizes, "2,3,4-6").is_err());
        assert!(StrataSpec::by_size(&sizes, "2-3,3,4-7").is_err());
        assert!(StrataSpec::by_size(&sizes, "2,x").is_err());
        // ranges given out of order keep the given order
        let s = StrataSpec::by_size(&sizes, "4-7,2,3").unwrap();
        assert_eq!(s.labels(), &["4-7", "2", "3"]);
        assert_eq!(s.membership(), &[1, 2, 0, 1, 0, 0]);
        assert_eq!(StrataSpec::each_size(&[3, 2, 3]).labels(), &["2", "3"]);
    }

    fn mixed_data() -> ObservedData {
        data(&[
            (Some(0), &[5.0, 3.0]),
            (Some(1), &[4.0, 2.0]),
            (None, &[1.0, 2.0]),
            (None, &[0.0, 1.0]),
            (Some(2), &[6.0, 1.0, 3.0]),
            (Some(0), &[7.0, 2.0, 2.0]),
            (None, &[1.0, 1.0, 2.0]),
            (None, &[3.0, 0.0, 0.0]),
        ])
    }

    #[test]
    fn single_stratum_is_unbiased_estimator() {
        let d = mixed_data();
        let design = d.infer_design().unwrap();
        let strata = StrataSpec::from_labels(&vec!["all"; d.num_households()]);
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            for effect in EffectKind::ALL {
                let ps = estimate_post_stratified(&d, &design, &strata, &scheme, effect, 0.95).unwrap();
                let u = estimate_unbiased(&d, &design, &scheme, effect, 0.95).unwrap();
                assert!((ps.pooled.point - u.point).abs() < 1e-12);
                assert!((ps.pooled.variance_hat - u.variance_hat).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_size_strata_pool_by_individuals() {
        let d = mixed_data();
        let design = d.infer_design().unwrap();
        let strata = StrataSpec::by_size(&d.sizes(), "2,3").unwrap();
        let ps = estimate_post_stratified(&d, &design, &strata, &WeightScheme::IndividualWeighted, EffectKind::Primary, 0.95)
            .unwrap();
        // size-2 stratum: treated members 5, 2; control means 1.5, 0.5 -> 3.5 - 1 = 2.5
        // size-3 stratum: treated members 3, 7; control means 4/3, 1 -> 5 - 7/6
        let tau2 = 2.5;
        let tau3 = 5.0 - 7.0 / 6.0;
        let expected = (8.0 * tau2 + 12.0 * tau3) / 20.0;
        assert!((ps.pooled.point - expected).abs() < 1e-12);
        assert!((ps.strata[0].estimate.point - tau2).abs() < 1e-12);
        let hw = post_stratified_point(&d, &design, &strata, &WeightScheme::HouseholdWeighted, EffectKind::Primary).unwrap();
        assert!((hw - (tau2 + tau3) / 2.0).abs() < 1e-12);
        let var: f64 = ps.strata.iter().map(|s| s.weight.powi(2) * s.estimate.variance_hat).sum();
        assert!((ps.pooled.variance_hat - var).abs() < 1e-14);
    }

    #[test]
    fn stratum_missing_a_cell_is_named() {
        let d = data(&[
            (Some(0), &[5.0, 3.0]),
            (None, &[1.0, 2.0]),
            (Some(0), &[6.0, 1.0, 3.0]),
            (Some(1), &[7.0, 2.0, 2.0]),
        ]);
        let design = d.infer_design().unwrap();
        let strata = StrataSpec::by_size(&d.sizes(), "2,3").unwrap();
        let err = post_stratified_point(&d, &design, &strata, &WeightScheme::IndividualWeighted, EffectKind::Primary)
            .unwrap_err();
        assert!(err.to_string().contains("stratum '3'"), "{err}");
    }

    #[test]
    fn post_stratification_is_conditionally_unbiased() {
        // group assignments by realized treated count per stratum; within each
        // group the post-stratified estimator averages to the estimand
        let po = sized_table(&[2, 2, 2, 3, 3, 3], |i, j, n| {
            let b = ((i * 5 + j * 3) % 7) as f64;
            (b + 2.0 * n as f64, b + 0.5, b)
        });
        let design = ExperimentDesign::new(po.sizes(), 3).unwrap();
        let strata = StrataSpec::by_size(&po.sizes(), "2,3").unwrap();
        let space = AssignmentSpace::new(&design).unwrap();
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            for effect in EffectKind::ALL {
                let truth = true_estimand(&po, &scheme, effect).unwrap();
                let mut groups: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
                for (a, p) in space.iter() {
                    let k = (0..3).filter(|&i| a.household_treated(i)).count();
                    if k == 0 || k == 3 {
                        continue;
                    }
                    let d = observe(&po, &a).unwrap();
                    let est = post_stratified_point(&d, &design, &strata, &scheme, effect).unwrap();
                    let g = groups.entry(k).or_default();
                    g.0 += p * est;
                    g.1 += p;
                }
                assert_eq!(groups.len(), 2);
                for (k, (sum, mass)) in groups {
                    assert!((sum / mass - truth).abs() < 1e-10, "{scheme} {effect} k={k}");
                }
            }
        }
    }

    #[test]
    fn residualize_cases() {
        let hh = Household::new("a", Some(0), vec![5.0, 3.0])
            .unwrap()
            .with_covariates(vec![vec![1.0], vec![2.0]])
            .unwrap();
        let c = Household::new("b", None, vec![1.0, 2.0])
            .unwrap()
            .with_covariates(vec![vec![0.0], vec![4.0]])
            .unwrap();
        let d = ObservedData::new(vec![hh, c], vec!["x".into()]).unwrap();
        assert_eq!(residualize(&d, &[0.0], false).unwrap(), d);
        let r = residualize(&d, &[1.0, 2.0], true).unwrap();
        assert_eq!(r.households()[0].outcomes(), &[2.0, -2.0]);
        assert_eq!(r.households()[1].outcomes(), &[0.0, -7.0]);
        assert!(residualize(&d, &[1.0], true).is_err());
        let bare = data(&[(Some(0), &[1.0, 2.0]), (None, &[1.0, 2.0])]);
        assert!(residualize(&bare, &[], false).is_err());
    }

    #[test]
    fn holdout_fits() {
        let hh = |id: &str, ys: Vec<f64>, xs: Vec<f64>| {
            Household::new(id, None, ys.clone())
                .unwrap()
                .with_covariates(xs.into_iter().map(|x| vec![x]).collect())
                .unwrap()
        };
        let d = ObservedData::new(
            vec![hh("a", vec![1.0, 4.0], vec![1.0, 4.0]), hh("b", vec![2.5, 7.0], vec![2.5, 7.0])],
            vec!["x".into()],
        )
        .unwrap();
        let g = fit_gamma_holdout(&d).unwrap();
        assert!(g[0].abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);

        let bare = data(&[(None, &[1.0, 2.0]), (None, &[3.0, 6.0])]);
        let g = fit_gamma_holdout(&bare).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g[0] - 3.0).abs() < 1e-12);

        let dup = ObservedData::new(
            vec![
                Household::new("a", None, vec![1.0, 2.0])
                    .unwrap()
                    .with_covariates(vec![vec![1.0, 2.0], vec![2.0, 4.0]])
                    .unwrap(),
                Household::new("b", None, vec![1.0, 3.0])
                    .unwrap()
                    .with_covariates(vec![vec![3.0, 6.0], vec![0.5, 1.0]])
                    .unwrap(),
            ],
            vec!["x1".into(), "x2".into()],
        )
        .unwrap();
        match fit_gamma_holdout(&dup) {
            Err(Error::LinearAlgebra(msg)) => assert!(msg.contains("x2"), "{msg}"),
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }
}
