//! Analysis report rows and their table, CSV and JSON-lines renderings.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use twostage::{EffectEstimate, EffectKind, Error, EstimatorFamily, Result, WeightScheme};

use crate::io::csv_error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Table => "txt",
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Structure(format!(
                "unknown format '{other}', expected table, csv or jsonl"
            ))),
        }
    }
}

/// One estimate with the sample it was computed on. `stratum` is `all` for
/// whole-sample rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub effect: String,
    pub scheme: String,
    pub estimator: String,
    pub stratum: String,
    pub point: f64,
    /// Variance columns are empty when the sample is too small to estimate
    /// them.
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub variance: Option<f64>,
    pub ci_level: f64,
    pub households: usize,
    pub treated_households: usize,
    pub control_households: usize,
    pub individuals: usize,
}

pub const CSV_HEADER: [&str; 14] = [
    "effect",
    "scheme",
    "estimator",
    "stratum",
    "point",
    "se",
    "ci_lower",
    "ci_upper",
    "variance",
    "ci_level",
    "households",
    "treated_households",
    "control_households",
    "individuals",
];

/// Sample counts attached to a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub households: usize,
    pub treated: usize,
    pub individuals: usize,
}

impl ReportRow {
    pub fn new(est: &EffectEstimate, stratum: &str, counts: Counts) -> Self {
        Self {
            effect: est.effect.label().into(),
            scheme: est.scheme.label().into(),
            estimator: est.family.label().into(),
            stratum: stratum.into(),
            point: est.point,
            se: Some(est.std_error()),
            ci_lower: Some(est.ci.0),
            ci_upper: Some(est.ci.1),
            variance: Some(est.variance_hat),
            ci_level: est.ci_level,
            households: counts.households,
            treated_households: counts.treated,
            control_households: counts.households - counts.treated,
            individuals: counts.individuals,
        }
    }

    /// A row without variance, standard error or interval.
    pub fn point_only(
        effect: EffectKind,
        scheme: &WeightScheme,
        family: EstimatorFamily,
        point: f64,
        ci_level: f64,
        stratum: &str,
        counts: Counts,
    ) -> Self {
        Self {
            effect: effect.label().into(),
            scheme: scheme.label().into(),
            estimator: family.label().into(),
            stratum: stratum.into(),
            point,
            se: None,
            ci_lower: None,
            ci_upper: None,
            variance: None,
            ci_level,
            households: counts.households,
            treated_households: counts.treated,
            control_households: counts.households - counts.treated,
            individuals: counts.individuals,
        }
    }
}

/// Shortest decimal that parses back to the same `f64`. Plain notation in
/// the usual range, exponent notation outside it.
pub fn format_number(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-6..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in rows {
        let n = |x: f64| format_number(x);
        let o = |x: Option<f64>| x.map(format_number).unwrap_or_default();
        w.write_record([
            r.effect.clone(),
            r.scheme.clone(),
            r.estimator.clone(),
            r.stratum.clone(),
            n(r.point),
            o(r.se),
            o(r.ci_lower),
            o(r.ci_upper),
            o(r.variance),
            n(r.ci_level),
            r.households.to_string(),
            r.treated_households.to_string(),
            r.control_households.to_string(),
            r.individuals.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

pub fn write_jsonl<W: Write>(rows: &[ReportRow], mut out: W) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.into()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    serde_json::Deserializer::from_reader(input)
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            r.map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Human-readable table: a metadata block followed by aligned rows.
pub fn render_table(rows: &[ReportRow], metadata: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in metadata {
        let _ = writeln!(out, "{k}: {v}");
    }
    if !metadata.is_empty() {
        out.push('\n');
    }
    let header = ["effect", "scheme", "estimator", "stratum", "point", "se", "ci", "N", "N1", "n+"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.effect.clone(),
                r.scheme.clone(),
                r.estimator.clone(),
                r.stratum.clone(),
                format!("{:.4}", r.point),
                r.se.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                match (r.ci_lower, r.ci_upper) {
                    (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
                    _ => "-".into(),
                },
                r.households.to_string(),
                r.treated_households.to_string(),
                r.individuals.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut push = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, &w))| if k < 4 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    push(&header.map(String::from));
    for row in &body {
        push(row);
    }
    out
}
