//! CSV ingestion of observed experiment data.
//!
//! Expected columns (names case-insensitive, any order): `household_id`,
//! `individual_id`, `h`, `z`, `y`, plus optional covariate columns. Only the
//! covariates named by the caller are kept.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use twostage::{Error, ExperimentDesign, Household, ObservedData, Result};

pub(crate) fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line() as usize).unwrap_or_default();
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

struct Columns {
    household: usize,
    individual: usize,
    h: Option<usize>,
    z: Option<usize>,
    y: usize,
    covariates: Vec<usize>,
}

fn locate(headers: &csv::StringRecord, covariates: &[String], need_assignment: bool) -> Result<Columns> {
    let lower: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let find = |name: &str| lower.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing required column '{name}'"),
        })
    };
    let (h, z) = if need_assignment {
        (Some(require("h")?), Some(require("z")?))
    } else {
        (find("h"), find("z"))
    };
    let covariates = covariates
        .iter()
        .map(|c| require(&c.trim().to_ascii_lowercase()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Columns {
        household: require("household_id")?,
        individual: require("individual_id")?,
        h,
        z,
        y: require("y")?,
        covariates,
    })
}

fn field<'a>(record: &'a csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<&'a str> {
    match record.get(idx).map(str::trim) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("missing value for '{name}'"),
        }),
    }
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<f64> {
    let raw = field(record, idx, name, line)?;
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            message: format!("'{name}' must be a finite number, got '{raw}'"),
        }),
    }
}

fn indicator(record: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<bool> {
    match field(record, idx, name, line)? {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            message: format!("'{name}' must be 0 or 1, got '{other}'"),
        }),
    }
}

#[derive(Default)]
struct Group {
    id: String,
    first_line: usize,
    h: Option<bool>,
    treated: Vec<usize>,
    outcomes: Vec<f64>,
    covariates: Vec<Vec<f64>>,
}

fn read_groups<R: Read>(reader: R, covariates: &[String], need_assignment: bool) -> Result<Vec<Group>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let cols = locate(&headers, covariates, need_assignment)?;
    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or_default();
        let hid = field(&record, cols.household, "household_id", line)?.to_string();
        let iid = field(&record, cols.individual, "individual_id", line)?.to_string();
        if !seen.insert((hid.clone(), iid.clone())) {
            return Err(Error::Structure(format!(
                "line {line}: duplicate individual '{iid}' in household '{hid}'"
            )));
        }
        let y = number(&record, cols.y, "y", line)?;
        let x = cols
            .covariates
            .iter()
            .zip(covariates)
            .map(|(&c, name)| number(&record, c, name, line))
            .collect::<Result<Vec<_>>>()?;
        let k = *index.entry(hid.clone()).or_insert_with(|| {
            groups.push(Group {
                id: hid.clone(),
                first_line: line,
                ..Group::default()
            });
            groups.len() - 1
        });
        let g = &mut groups[k];
        if need_assignment {
            let h = indicator(&record, cols.h.expect("required"), "h", line)?;
            let z = indicator(&record, cols.z.expect("required"), "z", line)?;
            if z && !h {
                return Err(Error::Structure(format!(
                    "line {line}: household '{hid}' has z = 1 but h = 0"
                )));
            }
            match g.h {
                Some(prev) if prev != h => {
                    return Err(Error::Structure(format!(
                        "line {line}: household '{hid}' mixes h = 0 and h = 1"
                    )))
                }
                _ => g.h = Some(h),
            }
            if z {
                g.treated.push(g.outcomes.len());
            }
        }
        g.outcomes.push(y);
        g.covariates.push(x);
    }
    if groups.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    Ok(groups)
}

fn build(groups: Vec<Group>, covariates: &[String], check_cells: bool) -> Result<ObservedData> {
    let mut households = Vec::with_capacity(groups.len());
    for g in groups {
        let treated_member = if check_cells {
            match (g.h, g.treated.as_slice()) {
                (Some(true), [j]) => Some(*j),
                (Some(true), t) => {
                    return Err(Error::Structure(format!(
                        "treated household '{}' has {} members with z = 1, expected exactly one",
                        g.id,
                        t.len()
                    )))
                }
                _ => None,
            }
        } else {
            None
        };
        if check_cells && g.outcomes.len() < 2 {
            return Err(Error::Structure(format!(
                "household '{}' (line {}) has a single member; every household needs at least \
                 two so the spillover cell of a treated household is non-empty",
                g.id, g.first_line
            )));
        }
        let hh = Household::new(g.id, treated_member, g.outcomes)?;
        let hh = if covariates.is_empty() {
            hh
        } else {
            hh.with_covariates(g.covariates)?
        };
        households.push(hh);
    }
    ObservedData::new(households, covariates.to_vec())
}

/// Parses analysis data and infers the design (household sizes and number
/// of treated households).
pub fn ingest_reader<R: Read>(reader: R, covariates: &[String]) -> Result<(ObservedData, ExperimentDesign)> {
    let groups = read_groups(reader, covariates, true)?;
    let data = build(groups, covariates, true)?;
    let design = data.infer_design()?;
    Ok((data, design))
}

pub fn ingest(path: &Path, covariates: &[String]) -> Result<(ObservedData, ExperimentDesign)> {
    ingest_reader(open(path)?, covariates)
}

/// Parses a holdout sample used only to fit covariate coefficients.
/// Assignment columns are optional and ignored; singleton households are
/// allowed.
pub fn ingest_holdout_reader<R: Read>(reader: R, covariates: &[String]) -> Result<ObservedData> {
    let groups = read_groups(reader, covariates, false)?;
    build(groups, covariates, false)
}

pub fn ingest_holdout(path: &Path, covariates: &[String]) -> Result<ObservedData> {
    ingest_holdout_reader(open(path)?, covariates)
}
