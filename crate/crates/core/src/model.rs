//! Domain types for two-stage designs: households, assignments, potential
//! outcomes, observed data and estimand weights.
//!
//! Households are indexed `0..N` and individuals within household `i` are
//! indexed `0..n_i`. Under partial and stratified interference every
//! individual has exactly three potential outcomes, indexed by the pair
//! (household treated, individual treated): `(1,1)`, `(1,0)` and `(0,0)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variance::wald_ci;

/// Sizes of the households and the number of households treated in the
/// first stage. Exactly one individual is treated in each treated household.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentDesign {
    household_sizes: Vec<usize>,
    num_treated: usize,
}

impl ExperimentDesign {
    pub fn new(household_sizes: Vec<usize>, num_treated: usize) -> Result<Self> {
        let n = household_sizes.len();
        if n < 2 {
            return Err(Error::Design(format!(
                "need at least two households, got {n}"
            )));
        }
        if num_treated == 0 || num_treated >= n {
            return Err(Error::Design(format!(
                "number of treated households must lie in 1..={}, got {num_treated}",
                n - 1
            )));
        }
        if let Some(i) = household_sizes.iter().position(|&s| s < 2) {
            return Err(Error::Design(format!(
                "household {i} has size {}; every household needs at least two members \
                 so the spillover cell is non-empty",
                household_sizes[i]
            )));
        }
        Ok(Self {
            household_sizes,
            num_treated,
        })
    }

    pub fn household_sizes(&self) -> &[usize] {
        &self.household_sizes
    }

    pub fn num_households(&self) -> usize {
        self.household_sizes.len()
    }

    pub fn num_treated(&self) -> usize {
        self.num_treated
    }

    pub fn num_control(&self) -> usize {
        self.household_sizes.len() - self.num_treated
    }

    /// n⁺, the total number of individuals.
    pub fn total_individuals(&self) -> usize {
        self.household_sizes.iter().sum()
    }

    /// n̄ = n⁺ / N.
    pub fn mean_size(&self) -> f64 {
        self.total_individuals() as f64 / self.num_households() as f64
    }

    /// The household size if all households have the same size.
    pub fn common_size(&self) -> Option<usize> {
        let first = self.household_sizes[0];
        self.household_sizes
            .iter()
            .all(|&s| s == first)
            .then_some(first)
    }
}

/// A realized two-stage assignment.
///
/// Stored as the index of the treated member of each household (`None` for
/// control households), which makes the one-treated-per-household rule hold
/// by construction. The number of treated households is checked against a
/// design with [`Assignment::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    treated_member: Vec<Option<usize>>,
}

impl Assignment {
    pub fn new(treated_member: Vec<Option<usize>>) -> Self {
        Self { treated_member }
    }

    /// Builds an assignment from the household vector `H` and the ragged
    /// individual matrix `Z`.
    pub fn from_indicators(household: &[bool], individual: &[Vec<bool>]) -> Result<Self> {
        if household.len() != individual.len() {
            return Err(Error::Structure(format!(
                "H has {} entries but Z has {} rows",
                household.len(),
                individual.len()
            )));
        }
        let mut treated_member = Vec::with_capacity(household.len());
        for (i, (&h, z)) in household.iter().zip(individual).enumerate() {
            let treated: Vec<usize> = z
                .iter()
                .enumerate()
                .filter_map(|(j, &t)| t.then_some(j))
                .collect();
            match (h, treated.as_slice()) {
                (true, [j]) => treated_member.push(Some(*j)),
                (false, []) => treated_member.push(None),
                (true, _) => {
                    return Err(Error::Structure(format!(
                        "treated household {i} has {} treated members, expected exactly one",
                        treated.len()
                    )))
                }
                (false, _) => {
                    return Err(Error::Structure(format!(
                        "control household {i} has treated members"
                    )))
                }
            }
        }
        Ok(Self { treated_member })
    }

    pub fn validate(&self, design: &ExperimentDesign) -> Result<()> {
        let sizes = design.household_sizes();
        if self.treated_member.len() != sizes.len() {
            return Err(Error::Structure(format!(
                "assignment covers {} households, design has {}",
                self.treated_member.len(),
                sizes.len()
            )));
        }
        for (i, (&t, &n)) in self.treated_member.iter().zip(sizes).enumerate() {
            if let Some(j) = t {
                if j >= n {
                    return Err(Error::Structure(format!(
                        "household {i} treats member {j} but has only {n} members"
                    )));
                }
            }
        }
        if self.num_treated_households() != design.num_treated() {
            return Err(Error::Structure(format!(
                "assignment treats {} households, design requires {}",
                self.num_treated_households(),
                design.num_treated()
            )));
        }
        Ok(())
    }

    pub fn num_households(&self) -> usize {
        self.treated_member.len()
    }

    pub fn household_treated(&self, i: usize) -> bool {
        self.treated_member[i].is_some()
    }

    pub fn treated_member(&self, i: usize) -> Option<usize> {
        self.treated_member[i]
    }

    pub fn individual_treated(&self, i: usize, j: usize) -> bool {
        self.treated_member[i] == Some(j)
    }

    pub fn num_treated_households(&self) -> usize {
        self.treated_member.iter().filter(|t| t.is_some()).count()
    }

    /// The household vector `H`.
    pub fn household_indicators(&self) -> Vec<bool> {
        self.treated_member.iter().map(Option::is_some).collect()
    }

    /// The ragged individual matrix `Z`.
    pub fn individual_indicators(&self, sizes: &[usize]) -> Vec<Vec<bool>> {
        self.treated_member
            .iter()
            .zip(sizes)
            .map(|(&t, &n)| (0..n).map(|j| t == Some(j)).collect())
            .collect()
    }
}

/// The three assignment cells `T11`, `T10` and `T00`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    /// Treated individual in a treated household.
    T11,
    /// Untreated individual in a treated household.
    T10,
    /// Individual in a control household.
    T00,
}

impl Cell {
    pub fn from_indicators(h: bool, z: bool) -> Result<Self> {
        match (h, z) {
            (true, true) => Ok(Cell::T11),
            (true, false) => Ok(Cell::T10),
            (false, false) => Ok(Cell::T00),
            (false, true) => Err(Error::Structure(
                "(H, Z) = (0, 1) is not a valid assignment cell".into(),
            )),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cell::T11 => "T11",
            Cell::T10 => "T10",
            Cell::T00 => "T00",
        })
    }
}

/// Potential outcomes `Y(1,1)`, `Y(1,0)` and `Y(0,0)` of one individual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub y11: f64,
    pub y10: f64,
    pub y00: f64,
}

impl PotentialOutcomes {
    pub fn new(y11: f64, y10: f64, y00: f64) -> Self {
        Self { y11, y10, y00 }
    }

    pub fn get(&self, cell: Cell) -> f64 {
        match cell {
            Cell::T11 => self.y11,
            Cell::T10 => self.y10,
            Cell::T00 => self.y00,
        }
    }

    /// Individual-level contrast for `effect` in a household of size `n`.
    /// The overall contrast averages over the second-stage draw, which treats
    /// each member with probability `1/n`.
    pub fn contrast(&self, effect: EffectKind, n: usize) -> f64 {
        match effect {
            EffectKind::Primary => self.y11 - self.y00,
            EffectKind::Spillover => self.y10 - self.y00,
            EffectKind::Overall => {
                let p = 1.0 / n as f64;
                p * self.y11 + (1.0 - p) * self.y10 - self.y00
            }
        }
    }
}

/// The full science table, one row of potential outcomes per individual.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeTable {
    households: Vec<Vec<PotentialOutcomes>>,
}

impl PotentialOutcomeTable {
    pub fn new(households: Vec<Vec<PotentialOutcomes>>) -> Result<Self> {
        for (i, hh) in households.iter().enumerate() {
            if hh.is_empty() {
                return Err(Error::Structure(format!("household {i} is empty")));
            }
            for (j, po) in hh.iter().enumerate() {
                if !(po.y11.is_finite() && po.y10.is_finite() && po.y00.is_finite()) {
                    return Err(Error::Structure(format!(
                        "potential outcomes of individual ({i}, {j}) are not finite"
                    )));
                }
            }
        }
        Ok(Self { households })
    }

    pub fn households(&self) -> &[Vec<PotentialOutcomes>] {
        &self.households
    }

    pub fn household(&self, i: usize) -> &[PotentialOutcomes] {
        &self.households[i]
    }

    pub fn num_households(&self) -> usize {
        self.households.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.households.iter().map(Vec::len).collect()
    }

    pub fn check_design(&self, design: &ExperimentDesign) -> Result<()> {
        if self.sizes() != design.household_sizes() {
            return Err(Error::Structure(
                "potential outcome table does not match the design's household sizes".into(),
            ));
        }
        Ok(())
    }

    /// Applies `f` to every potential outcome.
    pub fn map(&self, mut f: impl FnMut(usize, usize, PotentialOutcomes) -> PotentialOutcomes) -> Self {
        let households = self
            .households
            .iter()
            .enumerate()
            .map(|(i, hh)| hh.iter().enumerate().map(|(j, &po)| f(i, j, po)).collect())
            .collect();
        Self { households }
    }
}

/// Observed outcomes of one household.
#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    id: String,
    treated_member: Option<usize>,
    outcomes: Vec<f64>,
    covariates: Vec<Vec<f64>>,
}

impl Household {
    pub fn new(id: impl Into<String>, treated_member: Option<usize>, outcomes: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if outcomes.is_empty() {
            return Err(Error::Structure(format!("household {id} has no members")));
        }
        if let Some(j) = treated_member {
            if j >= outcomes.len() {
                return Err(Error::Structure(format!(
                    "household {id} treats member {j} but has {} members",
                    outcomes.len()
                )));
            }
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Structure(format!(
                "household {id} has a non-finite outcome"
            )));
        }
        Ok(Self {
            id,
            treated_member,
            outcomes,
            covariates: Vec::new(),
        })
    }

    /// Attaches one covariate row per member.
    pub fn with_covariates(mut self, covariates: Vec<Vec<f64>>) -> Result<Self> {
        if covariates.len() != self.outcomes.len() {
            return Err(Error::Structure(format!(
                "household {} has {} members but {} covariate rows",
                self.id,
                self.outcomes.len(),
                covariates.len()
            )));
        }
        self.covariates = covariates;
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn size(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_treated(&self) -> bool {
        self.treated_member.is_some()
    }

    pub fn treated_member(&self) -> Option<usize> {
        self.treated_member
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Per-member covariate rows; empty when the data carries no covariates.
    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn cell(&self, j: usize) -> Cell {
        match self.treated_member {
            Some(t) if t == j => Cell::T11,
            Some(_) => Cell::T10,
            None => Cell::T00,
        }
    }

    /// Members of this household that fall in `cell`.
    pub fn members_in(&self, cell: Cell) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.outcomes
            .iter()
            .copied()
            .enumerate()
            .filter(move |&(j, _)| self.cell(j) == cell)
    }

    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.outcomes.len() {
            return Err(Error::Structure(format!(
                "household {} has {} members, got {} replacement outcomes",
                self.id,
                self.outcomes.len(),
                outcomes.len()
            )));
        }
        Ok(Self {
            outcomes,
            ..self.clone()
        })
    }
}

/// Analyst-facing data: observed outcomes and assignment labels, grouped by
/// household, with optional named covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    households: Vec<Household>,
    covariate_names: Vec<String>,
}

impl ObservedData {
    pub fn new(households: Vec<Household>, covariate_names: Vec<String>) -> Result<Self> {
        let k = covariate_names.len();
        for hh in &households {
            let ok = if k == 0 {
                hh.covariates.is_empty()
            } else {
                hh.covariates.len() == hh.size() && hh.covariates.iter().all(|x| x.len() == k)
            };
            if !ok {
                return Err(Error::Structure(format!(
                    "household {} does not carry exactly {k} covariates per member",
                    hh.id
                )));
            }
        }
        Ok(Self {
            households,
            covariate_names,
        })
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    pub fn num_households(&self) -> usize {
        self.households.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.households.iter().map(Household::size).collect()
    }

    pub fn num_treated_households(&self) -> usize {
        self.households.iter().filter(|h| h.is_treated()).count()
    }

    pub fn total_individuals(&self) -> usize {
        self.households.iter().map(Household::size).sum()
    }

    pub fn assignment(&self) -> Assignment {
        Assignment::new(self.households.iter().map(|h| h.treated_member).collect())
    }

    /// The design implied by the household sizes and realized first stage.
    pub fn infer_design(&self) -> Result<ExperimentDesign> {
        ExperimentDesign::new(self.sizes(), self.num_treated_households())
    }

    pub fn check_design(&self, design: &ExperimentDesign) -> Result<()> {
        if self.sizes() != design.household_sizes() {
            return Err(Error::Structure(
                "observed household sizes do not match the design".into(),
            ));
        }
        if self.num_treated_households() != design.num_treated() {
            return Err(Error::Structure(format!(
                "data has {} treated households, design has {}",
                self.num_treated_households(),
                design.num_treated()
            )));
        }
        Ok(())
    }

    /// The households at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            households: indices.iter().map(|&i| self.households[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Replaces every outcome by `f(household, member, outcome)`.
    pub fn map_outcomes(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let households = self
            .households
            .iter()
            .enumerate()
            .map(|(i, hh)| Household {
                outcomes: hh.outcomes.iter().enumerate().map(|(j, &y)| f(i, j, y)).collect(),
                ..hh.clone()
            })
            .collect();
        Self {
            households,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Maps potential outcomes to observed data under assignment `a`.
pub fn observe(po: &PotentialOutcomeTable, a: &Assignment) -> Result<ObservedData> {
    if a.num_households() != po.num_households() {
        return Err(Error::Structure(format!(
            "assignment covers {} households, table has {}",
            a.num_households(),
            po.num_households()
        )));
    }
    let households = po
        .households()
        .iter()
        .enumerate()
        .map(|(i, hh)| {
            let t = a.treated_member(i);
            let outcomes = hh
                .iter()
                .enumerate()
                .map(|(j, p)| match t {
                    Some(k) if k == j => p.y11,
                    Some(_) => p.y10,
                    None => p.y00,
                })
                .collect();
            Household::new(i.to_string(), t, outcomes)
        })
        .collect::<Result<Vec<_>>>()?;
    ObservedData::new(households, Vec::new())
}

/// Estimand weights `w_i*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `w_i* = 1 / (N n_i)`: every household counts equally.
    HouseholdWeighted,
    /// `w_i* = 1 / n⁺`: every individual counts equally.
    IndividualWeighted,
    /// User-supplied household weights with `Σ w_i* n_i = 1`.
    Custom(Vec<f64>),
}

const CUSTOM_WEIGHT_TOLERANCE: f64 = 1e-9;

impl WeightScheme {
    pub fn label(&self) -> &'static str {
        match self {
            WeightScheme::HouseholdWeighted => "HW",
            WeightScheme::IndividualWeighted => "IW",
            WeightScheme::Custom(_) => "custom",
        }
    }

    /// Resolves the scheme to per-household weights `w_i*`.
    ///
    /// Custom weights must be non-negative and satisfy `Σ w_i* n_i = 1`;
    /// they are rejected, never renormalized.
    pub fn estimand_weights(&self, sizes: &[usize]) -> Result<Vec<f64>> {
        let n = sizes.len() as f64;
        match self {
            WeightScheme::HouseholdWeighted => {
                Ok(sizes.iter().map(|&s| 1.0 / (n * s as f64)).collect())
            }
            WeightScheme::IndividualWeighted => {
                let total = sizes.iter().sum::<usize>() as f64;
                Ok(vec![1.0 / total; sizes.len()])
            }
            WeightScheme::Custom(w) => {
                if w.len() != sizes.len() {
                    return Err(Error::Structure(format!(
                        "{} custom weights for {} households",
                        w.len(),
                        sizes.len()
                    )));
                }
                if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                    return Err(Error::Structure(
                        "custom weights must be finite and non-negative".into(),
                    ));
                }
                let total: f64 = w.iter().zip(sizes).map(|(&x, &s)| x * s as f64).sum();
                if (total - 1.0).abs() > CUSTOM_WEIGHT_TOLERANCE {
                    return Err(Error::Structure(format!(
                        "custom weights give sum of w_i* n_i = {total}, expected 1"
                    )));
                }
                Ok(w.clone())
            }
        }
    }

    /// Factors `N n_i w_i*` that map outcomes to transformed outcomes.
    /// All ones for household weights.
    pub fn transform_factors(&self, sizes: &[usize]) -> Result<Vec<f64>> {
        let n = sizes.len() as f64;
        Ok(self
            .estimand_weights(sizes)?
            .into_iter()
            .zip(sizes)
            .map(|(w, &s)| n * s as f64 * w)
            .collect())
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectKind {
    Primary,
    Spillover,
    Overall,
}

impl EffectKind {
    pub const ALL: [EffectKind; 3] = [EffectKind::Primary, EffectKind::Spillover, EffectKind::Overall];

    pub fn label(self) -> &'static str {
        match self {
            EffectKind::Primary => "primary",
            EffectKind::Spillover => "spillover",
            EffectKind::Overall => "overall",
        }
    }

    /// The treated-side cell compared against `T00`, if the effect has one.
    pub fn treated_cell(self) -> Option<Cell> {
        match self {
            EffectKind::Primary => Some(Cell::T11),
            EffectKind::Spillover => Some(Cell::T10),
            EffectKind::Overall => None,
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "primary" | "p" => Ok(EffectKind::Primary),
            "spillover" | "s" => Ok(EffectKind::Spillover),
            "overall" | "o" => Ok(EffectKind::Overall),
            other => Err(Error::Structure(format!("unknown effect '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorFamily {
    Unbiased,
    Hajek,
    SimpleDifference,
    PostStratified,
    ModelAssisted,
    Regression,
}

impl EstimatorFamily {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorFamily::Unbiased => "unbiased",
            EstimatorFamily::Hajek => "hajek",
            EstimatorFamily::SimpleDifference => "simple-difference",
            EstimatorFamily::PostStratified => "post-stratified",
            EstimatorFamily::ModelAssisted => "model-assisted",
            EstimatorFamily::Regression => "regression",
        }
    }
}

impl fmt::Display for EstimatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unbiased" | "ht" => Ok(EstimatorFamily::Unbiased),
            "hajek" => Ok(EstimatorFamily::Hajek),
            "simple-difference" | "sd" => Ok(EstimatorFamily::SimpleDifference),
            "post-stratified" | "ps" => Ok(EstimatorFamily::PostStratified),
            "model-assisted" | "ma" => Ok(EstimatorFamily::ModelAssisted),
            "regression" => Ok(EstimatorFamily::Regression),
            other => Err(Error::Structure(format!("unknown estimator '{other}'"))),
        }
    }
}

/// A point estimate with its estimated variance and Wald interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub effect: EffectKind,
    pub scheme: WeightScheme,
    pub family: EstimatorFamily,
    pub point: f64,
    pub variance_hat: f64,
    pub ci_level: f64,
    pub ci: (f64, f64),
}

impl EffectEstimate {
    pub fn new(
        effect: EffectKind,
        scheme: WeightScheme,
        family: EstimatorFamily,
        point: f64,
        variance_hat: f64,
        ci_level: f64,
    ) -> Result<Self> {
        let ci = wald_ci(point, variance_hat, ci_level)?;
        Ok(Self {
            effect,
            scheme,
            family,
            point,
            variance_hat,
            ci_level,
            ci,
        })
    }

    pub fn std_error(&self) -> f64 {
        self.variance_hat.sqrt()
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci.0 <= value && value <= self.ci.1
    }
}

/// The finite-population estimand `Σ_i w_i* Σ_j contrast_ij`.
pub fn true_estimand(po: &PotentialOutcomeTable, scheme: &WeightScheme, effect: EffectKind) -> Result<f64> {
    let sizes = po.sizes();
    let weights = scheme.estimand_weights(&sizes)?;
    Ok(po
        .households()
        .iter()
        .zip(&weights)
        .map(|(hh, &w)| {
            let n = hh.len();
            w * hh.iter().map(|p| p.contrast(effect, n)).sum::<f64>()
        })
        .sum())
}
