//! Randomization variance of the weighted estimators, its conservative
//! estimate, Wald intervals, and the expected bias of a variance that ignores
//! household clustering.
//!
//! Everything is expressed on transformed outcomes `Y^w_ij = N n_i w_i* Y_ij`,
//! under which every weighted estimator becomes a difference of averages of
//! household-level means.

use crate::error::{Error, Result};
use crate::model::{
    Cell, EffectKind, ExperimentDesign, ObservedData, PotentialOutcomeTable, WeightScheme,
};

/// Within- and between-household variance components of the transformed
/// potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    /// Mean within-household variance of `Y^w(1,1)`.
    pub sigma2_w11: f64,
    /// Mean within-household variance of `Y^w(1,0)`, each household rescaled
    /// by `1 / (n_i - 1)^2`.
    pub sigma2_w10: f64,
    /// Mean within-household variance of `Y^w(0,0)`.
    pub sigma2_w00: f64,
    /// Between-household variances of household means (denominator `N - 1`).
    pub v_w11: f64,
    pub v_w10: f64,
    pub v_w00: f64,
    /// Between-household variance of household-level primary effects.
    pub v_wp: f64,
    /// Between-household variance of household-level spillover effects.
    pub v_ws: f64,
    /// Intraclass correlation of control outcomes, `V00 / (Σ00 + V00)`;
    /// zero when both are zero.
    pub rho00: f64,
}

/// Unbiased (denominator `len - 1`) sample variance, two-pass.
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn mean_and_spread(ys: impl Iterator<Item = f64> + Clone, scale: f64) -> (f64, f64) {
    let n = ys.clone().count() as f64;
    let mean = ys.clone().sum::<f64>() / n;
    let var = ys.map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    (scale * mean, scale * scale * var)
}

pub fn variance_components(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
) -> Result<VarianceComponents> {
    po.check_design(design)?;
    let sizes = design.household_sizes();
    let factors = scheme.transform_factors(sizes)?;
    let n = sizes.len() as f64;

    let mut sigma11 = 0.0;
    let mut sigma10 = 0.0;
    let mut sigma00 = 0.0;
    let mut m11 = Vec::with_capacity(sizes.len());
    let mut m10 = Vec::with_capacity(sizes.len());
    let mut m00 = Vec::with_capacity(sizes.len());
    for (hh, &f) in po.households().iter().zip(&factors) {
        let size = hh.len() as f64;
        let (a, s11) = mean_and_spread(hh.iter().map(|p| p.y11), f);
        let (b, s10) = mean_and_spread(hh.iter().map(|p| p.y10), f);
        let (c, s00) = mean_and_spread(hh.iter().map(|p| p.y00), f);
        sigma11 += s11;
        sigma10 += s10 / (size - 1.0).powi(2);
        sigma00 += s00;
        m11.push(a);
        m10.push(b);
        m00.push(c);
    }
    let primary: Vec<f64> = m11.iter().zip(&m00).map(|(a, c)| a - c).collect();
    let spillover: Vec<f64> = m10.iter().zip(&m00).map(|(b, c)| b - c).collect();

    let sigma2_w00 = sigma00 / n;
    let v_w00 = sample_variance(&m00);
    let total00 = sigma2_w00 + v_w00;
    Ok(VarianceComponents {
        sigma2_w11: sigma11 / n,
        sigma2_w10: sigma10 / n,
        sigma2_w00,
        v_w11: sample_variance(&m11),
        v_w10: sample_variance(&m10),
        v_w00,
        v_wp: sample_variance(&primary),
        v_ws: sample_variance(&spillover),
        rho00: if total00 > 0.0 { v_w00 / total00 } else { 0.0 },
    })
}

/// Exact randomization variance of the unbiased weighted estimator,
/// `(Σ_hz + V_hz) / N1 + V_00 / N0 - V_effect / N`.
///
/// Defined for the primary and spillover effects only.
pub fn theoretical_variance(
    po: &PotentialOutcomeTable,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<f64> {
    let c = variance_components(po, design, scheme)?;
    let n = design.num_households() as f64;
    let n1 = design.num_treated() as f64;
    let n0 = design.num_control() as f64;
    match effect {
        EffectKind::Primary => Ok((c.sigma2_w11 + c.v_w11) / n1 + c.v_w00 / n0 - c.v_wp / n),
        EffectKind::Spillover => Ok((c.sigma2_w10 + c.v_w10) / n1 + c.v_w00 / n0 - c.v_ws / n),
        EffectKind::Overall => Err(Error::Estimation(
            "theoretical variance is available for primary and spillover effects only".into(),
        )),
    }
}

/// Household-level means of transformed observed outcomes for the treated
/// side of `effect` (one per treated household) and for the control cell
/// (one per control household).
///
/// The treated side averages the `T11` member for the primary effect, the
/// `T10` members for the spillover effect, and all members for the overall
/// effect.
pub(crate) fn household_means(
    data: &ObservedData,
    factors: &[f64],
    effect: EffectKind,
) -> (Vec<f64>, Vec<f64>) {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for (hh, &f) in data.households().iter().zip(factors) {
        let mean_of = |cell: Option<Cell>| {
            let (sum, count) = hh
                .outcomes()
                .iter()
                .enumerate()
                .filter(|&(j, _)| cell.is_none_or(|c| hh.cell(j) == c))
                .fold((0.0, 0usize), |(s, k), (_, &y)| (s + y, k + 1));
            f * sum / count as f64
        };
        if hh.is_treated() {
            treated.push(mean_of(effect.treated_cell()));
        } else {
            control.push(mean_of(None));
        }
    }
    (treated, control)
}

/// Conservative variance estimate `s²_hz / N1 + s²_00 / N0` from the
/// between-household sample variances of transformed household means.
///
/// For the overall effect the treated side pools all members of each treated
/// household.
pub fn estimated_variance(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    effect: EffectKind,
) -> Result<f64> {
    data.check_design(design)?;
    let factors = scheme.transform_factors(design.household_sizes())?;
    let (treated, control) = household_means(data, &factors, effect);
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::Estimation(format!(
            "variance estimation needs at least two treated and two control households, \
             got {} and {}",
            treated.len(),
            control.len()
        )));
    }
    Ok(sample_variance(&treated) / treated.len() as f64
        + sample_variance(&control) / control.len() as f64)
}

/// Standard normal quantile function.
///
/// Wichura's algorithm AS 241 (PPND16): rational approximations on three
/// ranges of `p`, relative accuracy about 1e-16.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2_509.080_928_730_122_7 + 33_430.575_583_588_13) * r
            + 67_265.770_927_008_7)
            * r
            + 45_921.953_931_549_87)
            * r
            + 13_731.693_765_509_46)
            * r
            + 1_971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((r * 5_226.495_278_852_546 + 28_729.085_735_721_943) * r
            + 39_307.895_800_092_71)
            * r
            + 21_213.794_301_586_597)
            * r
            + 5_394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_87)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_887_9)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Two-sided Wald interval `point ± z_{1-γ/2} sqrt(variance_hat)` at
/// confidence `level = 1 - γ`.
pub fn wald_ci(point: f64, variance_hat: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Structure(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if !(variance_hat >= 0.0 && variance_hat.is_finite()) {
        return Err(Error::Estimation(format!(
            "variance estimate must be finite and non-negative, got {variance_hat}"
        )));
    }
    let half = normal_quantile(0.5 + level / 2.0) * variance_hat.sqrt();
    Ok((point - half, point + half))
}

/// Expected excess of the individual-level, non-clustered HC2 variance of the
/// primary-effect estimator over its randomization variance, for households
/// of equal size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveVarianceGap {
    /// `E[V_het] - Var`; negative means anti-conservative on average.
    pub gap: f64,
    pub rho00: f64,
    /// The gap is negative exactly when `rho00` exceeds this value.
    pub rho00_threshold: f64,
}

/// Closed form for the naive (non-clustered) variance bias with equal sizes:
///
/// `E[V_het] - Var = (Σ00 + V00) (1 - n ρ00) / (n N0 - 1) + V_P / N`
///
/// so the naive variance is anti-conservative iff
/// `ρ00 > 1/n + ((n N0 - 1) / (n N)) V_P / (Σ00 + V00)`.
pub fn naive_variance_gap(po: &PotentialOutcomeTable, design: &ExperimentDesign) -> Result<NaiveVarianceGap> {
    let size = design.common_size().ok_or_else(|| {
        Error::Design("the naive variance gap requires households of equal size".into())
    })?;
    let c = variance_components(po, design, &WeightScheme::HouseholdWeighted)?;
    let n = size as f64;
    let households = design.num_households() as f64;
    let n0 = design.num_control() as f64;
    let total = c.sigma2_w00 + c.v_w00;
    let gap = (c.sigma2_w00 - (n - 1.0) * c.v_w00) / (n * n0 - 1.0) + c.v_wp / households;
    let rho00_threshold = if total > 0.0 {
        1.0 / n + (n * n0 - 1.0) / (n * households) * c.v_wp / total
    } else {
        f64::INFINITY
    };
    Ok(NaiveVarianceGap {
        gap,
        rho00: c.rho00,
        rho00_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PotentialOutcomes;

    /// Φ(x) by the Maclaurin series of erf, summed until terms vanish.
    fn normal_cdf_series(x: f64) -> f64 {
        let z = x / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut sum = z;
        let mut k = 0.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            k += 1.0;
            term *= -z * z / k;
            sum += term / (2.0 * k + 1.0);
            if k > 500.0 {
                break;
            }
        }
        0.5 + sum / std::f64::consts::PI.sqrt()
    }

    fn quantile_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-8.0f64, 8.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf_series(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_series_inversion() {
        for &p in &[0.5, 0.6, 0.8, 0.9, 0.95, 0.975, 0.99, 0.995, 0.999, 0.9999, 0.2, 0.025, 1e-3] {
            let oracle = quantile_by_bisection(p);
            let got = normal_quantile(p);
            assert!((got - oracle).abs() < 1e-9, "p = {p}: {got} vs {oracle}");
        }
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        // far tail, beyond the reach of the series oracle
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn wald_interval_cases() {
        assert_eq!(wald_ci(1.5, 0.0, 0.95).unwrap(), (1.5, 1.5));
        let (lo, hi) = wald_ci(0.0, 1.0, 0.95).unwrap();
        assert!((hi - 1.959_963_984_540_054).abs() < 1e-9 && (lo + hi).abs() < 1e-15);
        let (lo99, hi99) = wald_ci(0.0, 1.0, 0.99).unwrap();
        assert!(lo99 < lo && hi < hi99);
        assert!(wald_ci(0.0, 1.0, 1.0).is_err());
        assert!(wald_ci(0.0, -1.0, 0.9).is_err());
    }

    fn table(rows: Vec<Vec<(f64, f64, f64)>>) -> PotentialOutcomeTable {
        PotentialOutcomeTable::new(
            rows.into_iter()
                .map(|hh| hh.into_iter().map(|(a, b, c)| PotentialOutcomes::new(a, b, c)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_outcomes_have_no_variance() {
        let po = table(vec![vec![(3.0, 3.0, 3.0); 2], vec![(3.0, 3.0, 3.0); 3], vec![(3.0, 3.0, 3.0); 2]]);
        let d = ExperimentDesign::new(po.sizes(), 1).unwrap();
        let c = variance_components(&po, &d, &WeightScheme::HouseholdWeighted).unwrap();
        assert_eq!(c.sigma2_w11 + c.sigma2_w10 + c.v_w11 + c.v_w10 + c.v_w00 + c.v_wp + c.v_ws, 0.0);
        assert_eq!(c.rho00, 0.0);
        let v = theoretical_variance(&po, &d, &WeightScheme::HouseholdWeighted, EffectKind::Primary).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn constant_additive_effects_have_no_effect_variation() {
        let base = [[1.0, 4.0], [2.0, -1.0], [0.5, 3.0]];
        let rows = base
            .iter()
            .map(|hh| hh.iter().map(|&y| (y + 2.0, y + 0.5, y)).collect())
            .collect();
        let po = table(rows);
        let d = ExperimentDesign::new(po.sizes(), 1).unwrap();
        let c = variance_components(&po, &d, &WeightScheme::HouseholdWeighted).unwrap();
        assert!(c.v_wp.abs() < 1e-15 && c.v_ws.abs() < 1e-15);
    }

    #[test]
    fn components_on_hand_table() {
        // N = 3, sizes 2; spreadsheet-style evaluation written out longhand.
        let po = table(vec![
            vec![(5.0, 2.0, 1.0), (3.0, 4.0, 0.0)],
            vec![(1.0, 0.0, 2.0), (2.0, 1.0, 4.0)],
            vec![(0.0, 6.0, 1.0), (4.0, 2.0, 1.0)],
        ]);
        let d = ExperimentDesign::new(po.sizes(), 1).unwrap();
        let c = variance_components(&po, &d, &WeightScheme::HouseholdWeighted).unwrap();
        // within-household variances (1/n denominator): y11 -> 1, 0.25, 4
        assert!((c.sigma2_w11 - (1.0 + 0.25 + 4.0) / 3.0).abs() < 1e-14);
        // y10 -> 1, 0.25, 4 each over (2-1)^2
        assert!((c.sigma2_w10 - (1.0 + 0.25 + 4.0) / 3.0).abs() < 1e-14);
        // y00 -> 0.25, 1, 0
        assert!((c.sigma2_w00 - 1.25 / 3.0).abs() < 1e-14);
        // means y11: 4, 1.5, 2 -> mean 2.5, SS = 2.25+1+0.25 = 3.5 -> /2
        assert!((c.v_w11 - 1.75).abs() < 1e-14);
        // means y10: 3, 0.5, 4 -> mean 2.5, SS = 0.25+4+2.25 = 6.5
        assert!((c.v_w10 - 3.25).abs() < 1e-14);
        // means y00: 0.5, 3, 1 -> mean 1.5, SS = 1+2.25+0.25 = 3.5
        assert!((c.v_w00 - 1.75).abs() < 1e-14);
        // primary: 3.5, -1.5, 1 -> mean 1, SS = 6.25+6.25+0 = 12.5
        assert!((c.v_wp - 6.25).abs() < 1e-14);
        // spillover: 2.5, -2.5, 3 -> mean 1, SS = 2.25+12.25+4 = 18.5
        assert!((c.v_ws - 9.25).abs() < 1e-14);
        assert!((c.rho00 - 1.75 / (1.75 + 1.25 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn variance_scales_quadratically() {
        let po = table(vec![
            vec![(5.0, 2.0, 1.0), (3.0, 4.0, 0.0)],
            vec![(1.0, 0.0, 2.0), (2.0, 1.0, 4.0), (7.0, 1.0, 0.0)],
            vec![(0.0, 6.0, 1.0), (4.0, 2.0, 1.0)],
            vec![(2.0, 3.0, 1.0), (1.0, 2.0, 5.0)],
        ]);
        let d = ExperimentDesign::new(po.sizes(), 2).unwrap();
        let doubled = po.map(|_, _, p| PotentialOutcomes::new(2.0 * p.y11, 2.0 * p.y10, 2.0 * p.y00));
        for scheme in [WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted] {
            for effect in [EffectKind::Primary, EffectKind::Spillover] {
                let v = theoretical_variance(&po, &d, &scheme, effect).unwrap();
                let v2 = theoretical_variance(&doubled, &d, &scheme, effect).unwrap();
                assert!((v2 - 4.0 * v).abs() < 1e-12 * v.abs().max(1.0));
            }
        }
        assert!(theoretical_variance(&po, &d, &WeightScheme::HouseholdWeighted, EffectKind::Overall).is_err());
    }

    #[test]
    fn naive_gap_special_cases() {
        // rho00 = 0 and V_P = 0: household means of y00 identical, constant effect
        let po = table(vec![
            vec![(2.0, 1.0, 0.0), (4.0, 3.0, 2.0)],
            vec![(4.0, 3.0, 2.0), (2.0, 1.0, 0.0)],
            vec![(3.0, 2.0, 1.0), (3.0, 2.0, 1.0)],
            vec![(2.0, 1.0, 0.0), (4.0, 3.0, 2.0)],
        ]);
        let d = ExperimentDesign::new(po.sizes(), 2).unwrap();
        let g = naive_variance_gap(&po, &d).unwrap();
        let c = variance_components(&po, &d, &WeightScheme::HouseholdWeighted).unwrap();
        assert_eq!(g.rho00, 0.0);
        assert!(c.v_wp.abs() < 1e-15);
        assert!((g.gap - c.sigma2_w00 / (2.0 * 2.0 - 1.0)).abs() < 1e-14);
        assert!(g.gap > 0.0);

        let unequal = ExperimentDesign::new(vec![2, 3, 2, 2], 2).unwrap();
        let po3 = table(vec![
            vec![(0.0, 0.0, 0.0); 2],
            vec![(0.0, 0.0, 0.0); 3],
            vec![(0.0, 0.0, 0.0); 2],
            vec![(0.0, 0.0, 0.0); 2],
        ]);
        assert!(matches!(naive_variance_gap(&po3, &unequal), Err(Error::Design(_))));
    }

    #[test]
    fn naive_gap_negative_above_one_over_n_without_effect_variation() {
        // pure between-household control variation, constant effect: rho00 = 1 > 1/n
        let po = table(vec![
            vec![(2.0, 1.0, 0.0); 2],
            vec![(5.0, 4.0, 3.0); 2],
            vec![(3.0, 2.0, 1.0); 2],
            vec![(8.0, 7.0, 6.0); 2],
        ]);
        let d = ExperimentDesign::new(po.sizes(), 2).unwrap();
        let g = naive_variance_gap(&po, &d).unwrap();
        assert!((g.rho00 - 1.0).abs() < 1e-15);
        assert!((g.rho00_threshold - 0.5).abs() < 1e-15);
        assert!(g.gap < 0.0);
    }
}
