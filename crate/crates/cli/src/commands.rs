//! The `analyze`, `simulate` and `check` commands, independent of argument
//! parsing so they can be driven from tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use twostage::estimate::{
    estimate_hajek, estimate_model_assisted, estimate_post_stratified, estimate_simple_difference,
    estimate_unbiased, fit_gamma_holdout, hajek_point, post_stratified_point, residualize,
    simple_difference_point, unbiased_point, StrataSpec,
};
use twostage::oracle::{check_all, random_table, IdentityCheck};
use twostage::randomize::{SeededRng, DEFAULT_ENUMERATION_CAP};
use twostage::regress::weighted_regression_path;
use twostage::simulate::{coverage_study, iw_estimator_study, CoverageConfig, Scenario, StudyResult, VaryingSizeDgpConfig};
use twostage::{EffectKind, Error, EstimatorFamily, ExperimentDesign, ObservedData, Result, WeightScheme};

use crate::config::Config;
use crate::io::{ingest, ingest_holdout};
use crate::report::{render_table, write_csv, write_jsonl, Counts, Format, ReportRow};

/// Everything `analyze` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub input: PathBuf,
    pub schemes: Vec<WeightScheme>,
    pub effects: Vec<EffectKind>,
    /// Empty means the default set, which adds post-stratified and
    /// model-assisted rows when a stratification or holdout is given.
    pub estimators: Vec<EstimatorFamily>,
    pub ci_level: f64,
    pub post_stratify: Option<String>,
    pub holdout: Option<PathBuf>,
    pub covariates: Vec<String>,
    pub format: Format,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl AnalysisConfig {
    pub fn new(input: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            schemes: vec![WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted],
            effects: vec![EffectKind::Primary, EffectKind::Spillover],
            estimators: Vec::new(),
            ci_level: 0.95,
            post_stratify: None,
            holdout: None,
            covariates: Vec::new(),
            format: Format::Table,
            seed: None,
            out_dir: None,
        }
    }

    pub const KEYS: [&'static str; 11] = [
        "input",
        "scheme",
        "effects",
        "estimators",
        "ci_level",
        "post_stratify",
        "holdout",
        "covariates",
        "format",
        "seed",
        "out_dir",
    ];

    /// Applies values from a config file on top of `self`.
    pub fn apply(&mut self, cfg: &Config) -> Result<()> {
        if let Some(v) = cfg.raw("input") {
            self.input = v.into();
        }
        if let Some(v) = cfg.raw("scheme") {
            self.schemes = parse_schemes(v)?;
        }
        if let Some(v) = cfg.get_list("effects")? {
            self.effects = v;
        }
        if let Some(v) = cfg.get_list("estimators")? {
            self.estimators = v;
        }
        if let Some(v) = cfg.get("ci_level")? {
            self.ci_level = v;
        }
        if let Some(v) = cfg.raw("post_stratify") {
            self.post_stratify = Some(v.to_string());
        }
        if let Some(v) = cfg.raw("holdout") {
            self.holdout = Some(v.into());
        }
        if let Some(v) = cfg.get_list("covariates")? {
            self.covariates = v;
        }
        if let Some(v) = cfg.get("format")? {
            self.format = v;
        }
        if let Some(v) = cfg.get("seed")? {
            self.seed = Some(v);
        }
        if let Some(v) = cfg.raw("out_dir") {
            self.out_dir = Some(v.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Structure(format!("ci level {} is not in (0, 1)", self.ci_level)));
        }
        if self.schemes.is_empty() || self.effects.is_empty() {
            return Err(Error::Structure("no schemes or effects requested".into()));
        }
        if self.estimators.contains(&EstimatorFamily::ModelAssisted) && self.holdout.is_none() {
            return Err(Error::Structure("model-assisted estimation needs a holdout file".into()));
        }
        if self.holdout.is_some() && self.covariates.is_empty() {
            return Err(Error::Structure("a holdout file needs at least one covariate column".into()));
        }
        Ok(())
    }

    fn families(&self) -> Vec<EstimatorFamily> {
        if !self.estimators.is_empty() {
            return self.estimators.clone();
        }
        let mut out = vec![
            EstimatorFamily::Unbiased,
            EstimatorFamily::Hajek,
            EstimatorFamily::SimpleDifference,
            EstimatorFamily::Regression,
        ];
        if self.post_stratify.is_some() {
            out.push(EstimatorFamily::PostStratified);
        }
        if self.holdout.is_some() {
            out.push(EstimatorFamily::ModelAssisted);
        }
        out
    }
}

/// `hw`, `iw` or `both`.
pub fn parse_schemes(s: &str) -> Result<Vec<WeightScheme>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "hw" => Ok(vec![WeightScheme::HouseholdWeighted]),
        "iw" => Ok(vec![WeightScheme::IndividualWeighted]),
        "both" => Ok(vec![WeightScheme::HouseholdWeighted, WeightScheme::IndividualWeighted]),
        other => Err(Error::Structure(format!("unknown scheme '{other}', expected hw, iw or both"))),
    }
}

fn counts_of(data: &ObservedData) -> Counts {
    Counts {
        households: data.num_households(),
        treated: data.num_treated_households(),
        individuals: data.total_individuals(),
    }
}

/// The analysis result: rows plus a metadata block for the table view.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub rows: Vec<ReportRow>,
    pub metadata: Vec<(String, String)>,
}

impl Analysis {
    pub fn render(&self, format: Format, out: &mut dyn Write) -> Result<()> {
        match format {
            Format::Table => out.write_all(render_table(&self.rows, &self.metadata).as_bytes())?,
            Format::Csv => write_csv(&self.rows, out)?,
            Format::Jsonl => write_jsonl(&self.rows, out)?,
        }
        Ok(())
    }
}

/// Estimates every requested effect, scheme and estimator on already
/// ingested data.
pub fn analyze_data(
    data: &ObservedData,
    design: &ExperimentDesign,
    config: &AnalysisConfig,
    holdout: Option<&ObservedData>,
) -> Result<Analysis> {
    config.validate()?;
    let families = config.families();
    let strata = if families.contains(&EstimatorFamily::PostStratified) {
        Some(match &config.post_stratify {
            Some(cuts) => StrataSpec::by_size(design.household_sizes(), cuts)?,
            None => StrataSpec::each_size(design.household_sizes()),
        })
    } else {
        None
    };
    let gamma = match holdout {
        Some(h) if families.contains(&EstimatorFamily::ModelAssisted) => Some(fit_gamma_holdout(h)?),
        None if families.contains(&EstimatorFamily::ModelAssisted) => {
            return Err(Error::Structure("model-assisted estimation needs a holdout sample".into()))
        }
        _ => None,
    };
    let all = counts_of(data);
    let level = config.ci_level;
    // variances need two treated and two control households
    let with_variance = design.num_treated() >= 2 && design.num_control() >= 2;
    let mut rows = Vec::new();
    for scheme in &config.schemes {
        let regression = if with_variance && families.contains(&EstimatorFamily::Regression) {
            Some(weighted_regression_path(data, design, scheme, level)?)
        } else {
            None
        };
        for &effect in &config.effects {
            for &family in &families {
                let point_row = |point: f64| ReportRow::point_only(effect, scheme, family, point, level, "all", all);
                let paired = effect != EffectKind::Overall;
                match family {
                    EstimatorFamily::Unbiased if with_variance => {
                        let est = estimate_unbiased(data, design, scheme, effect, level)?;
                        rows.push(ReportRow::new(&est, "all", all));
                    }
                    EstimatorFamily::Unbiased => {
                        rows.push(point_row(unbiased_point(data, design, scheme, effect)?));
                    }
                    EstimatorFamily::Hajek if with_variance => {
                        let est = estimate_hajek(data, design, scheme, effect, level)?;
                        rows.push(ReportRow::new(&est, "all", all));
                    }
                    EstimatorFamily::Hajek => {
                        rows.push(point_row(hajek_point(data, design, scheme, effect)?));
                    }
                    // the simple difference targets the individual-weighted effect
                    EstimatorFamily::SimpleDifference => {
                        if paired && *scheme == WeightScheme::IndividualWeighted {
                            if with_variance {
                                let est = estimate_simple_difference(data, effect, level)?;
                                rows.push(ReportRow::new(&est, "all", all));
                            } else {
                                rows.push(point_row(simple_difference_point(data, effect)?));
                            }
                        }
                    }
                    EstimatorFamily::Regression => {
                        if let Some(est) = regression.as_ref().and_then(|r| r.get(effect)) {
                            rows.push(ReportRow::new(est, "all", all));
                        }
                    }
                    EstimatorFamily::PostStratified => {
                        let spec = strata.as_ref().expect("strata built when requested");
                        if !with_variance {
                            rows.push(point_row(post_stratified_point(data, design, spec, scheme, effect)?));
                            continue;
                        }
                        let ps = estimate_post_stratified(data, design, spec, scheme, effect, level)?;
                        rows.push(ReportRow::new(&ps.pooled, "all", all));
                        for s in &ps.strata {
                            let counts = Counts {
                                households: s.households,
                                treated: s.treated_households,
                                individuals: s.individuals,
                            };
                            rows.push(ReportRow::new(&s.estimate, &s.label, counts));
                        }
                    }
                    EstimatorFamily::ModelAssisted => {
                        let g = gamma.as_ref().expect("gamma fitted when requested");
                        if with_variance {
                            let est = estimate_model_assisted(data, design, scheme, effect, g, level)?;
                            rows.push(ReportRow::new(&est, "all", all));
                        } else {
                            let adjusted = residualize(data, g, true)?;
                            rows.push(point_row(unbiased_point(&adjusted, design, scheme, effect)?));
                        }
                    }
                }
            }
        }
    }
    let mut metadata = vec![
        ("households (N)".to_string(), all.households.to_string()),
        ("treated households (N1)".to_string(), all.treated.to_string()),
        ("control households (N0)".to_string(), (all.households - all.treated).to_string()),
        ("individuals (n+)".to_string(), all.individuals.to_string()),
        ("ci level".to_string(), level.to_string()),
    ];
    if let Some(spec) = &strata {
        let summary: Vec<String> = (0..spec.num_strata())
            .map(|k| format!("{} ({} households)", spec.labels()[k], spec.households_in(k).len()))
            .collect();
        metadata.push(("strata".to_string(), summary.join(", ")));
    }
    if !with_variance {
        metadata.push((
            "variance".to_string(),
            "not estimable with fewer than two treated or two control households; regression rows omitted".to_string(),
        ));
    }
    if let Some(seed) = config.seed {
        metadata.push(("seed".to_string(), seed.to_string()));
    }
    Ok(Analysis { rows, metadata })
}

/// Ingests the configured files, analyzes them and writes the report to
/// `out` (and to `analysis.<ext>` in the output directory, if set).
pub fn run_analyze(config: &AnalysisConfig, out: &mut dyn Write) -> Result<Analysis> {
    config.validate()?;
    let (data, design) = ingest(&config.input, &config.covariates)?;
    let holdout = match &config.holdout {
        Some(path) => Some(ingest_holdout(path, &config.covariates)?),
        None => None,
    };
    let analysis = analyze_data(&data, &design, config, holdout.as_ref())?;
    analysis.render(config.format, out)?;
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("analysis.{}", config.format.extension()));
        let mut file = fs::File::create(path)?;
        analysis.render(config.format, &mut file)?;
        file.flush()?;
    }
    Ok(analysis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulationKind {
    Coverage,
    IwStudy,
}

impl std::str::FromStr for SimulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coverage" => Ok(SimulationKind::Coverage),
            "iw-study" | "iw_study" => Ok(SimulationKind::IwStudy),
            other => Err(Error::Structure(format!(
                "unknown simulation '{other}', expected coverage or iw-study"
            ))),
        }
    }
}

/// Overrides taken from the command line; they win over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub scenarios: Vec<Scenario>,
    pub out_dir: PathBuf,
}

pub const COVERAGE_KEYS: [&str; 11] = [
    "num_households",
    "sigma_c",
    "sigma_y",
    "household_size",
    "mu00",
    "tau_p_bar",
    "tau_s_bar",
    "reps",
    "ci_level",
    "seed",
    "fixed_table",
];

pub const IW_STUDY_KEYS: [&str; 7] = [
    "scenario",
    "reps",
    "seed",
    "num_households",
    "num_treated",
    "sigma_c",
    "sigma_y",
];

pub fn coverage_config(cfg: &Config, opts: &SimulationOptions) -> Result<CoverageConfig> {
    let mut c = CoverageConfig::default();
    if let Some(v) = cfg.get_list("num_households")? {
        c.num_households = v;
    }
    if let Some(v) = cfg.get_list("sigma_c")? {
        c.sigma_c = v;
    }
    if let Some(v) = cfg.get_list("sigma_y")? {
        c.sigma_y = v;
    }
    if let Some(v) = cfg.get("household_size")? {
        c.household_size = v;
    }
    if let Some(v) = cfg.get("mu00")? {
        c.mu00 = v;
    }
    if let Some(v) = cfg.get("tau_p_bar")? {
        c.tau_p_bar = v;
    }
    if let Some(v) = cfg.get("tau_s_bar")? {
        c.tau_s_bar = v;
    }
    if let Some(v) = cfg.get("reps")? {
        c.reps = v;
    }
    if let Some(v) = cfg.get("ci_level")? {
        c.ci_level = v;
    }
    if let Some(v) = cfg.get("seed")? {
        c.seed = v;
    }
    if let Some(v) = cfg.get("fixed_table")? {
        c.fixed_table = v;
    }
    if let Some(v) = opts.reps {
        c.reps = v;
    }
    if let Some(v) = opts.seed {
        c.seed = v;
    }
    Ok(c)
}

/// Default seed of the individual-weighted estimator study.
pub const IW_STUDY_SEED: u64 = 20_190_602;
pub const IW_STUDY_REPS: usize = 2000;

/// Scenario configurations and replication settings of an iw-study run.
#[derive(Debug, Clone, PartialEq)]
pub struct IwStudyPlan {
    pub runs: Vec<(Scenario, VaryingSizeDgpConfig)>,
    pub reps: usize,
    pub seed: u64,
}

pub fn iw_study_plan(cfg: &Config, opts: &SimulationOptions) -> Result<IwStudyPlan> {
    let scenarios = if !opts.scenarios.is_empty() {
        opts.scenarios.clone()
    } else {
        cfg.get_list("scenario")?.unwrap_or_else(|| vec![Scenario::A, Scenario::B])
    };
    let mut out = Vec::new();
    for s in scenarios {
        let mut c = VaryingSizeDgpConfig::scenario(s);
        if let Some(v) = cfg.get("num_households")? {
            c.num_households = v;
        }
        if let Some(v) = cfg.get("num_treated")? {
            c.num_treated = v;
        }
        if let Some(v) = cfg.get("sigma_c")? {
            c.sigma_c = v;
        }
        if let Some(v) = cfg.get("sigma_y")? {
            c.sigma_y = v;
        }
        out.push((s, c));
    }
    Ok(IwStudyPlan {
        runs: out,
        reps: opts.reps.or(cfg.get("reps")?).unwrap_or(IW_STUDY_REPS),
        seed: opts.seed.or(cfg.get("seed")?).unwrap_or(IW_STUDY_SEED),
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let mut file = fs::File::create(dir.join(name))?;
    file.write_all(contents.as_bytes())?;
    file.sync_all()?;
    Ok(())
}

/// Runs a simulation study, writes its CSV files to the output directory
/// and prints the aggregate table to `out`. Returns the aggregate result.
pub fn run_simulate(kind: SimulationKind, opts: &SimulationOptions, out: &mut dyn Write) -> Result<StudyResult> {
    let keys: &[&str] = match kind {
        SimulationKind::Coverage => &COVERAGE_KEYS,
        SimulationKind::IwStudy => &IW_STUDY_KEYS,
    };
    let cfg = match &opts.config {
        Some(path) => Config::load(path, keys)?,
        None => Config::default(),
    };
    fs::create_dir_all(&opts.out_dir)?;
    let summary = match kind {
        SimulationKind::Coverage => {
            let config = coverage_config(&cfg, opts)?;
            let study = coverage_study(&config)?;
            let summary = study.summary();
            write_file(&opts.out_dir, "coverage_summary.csv", &summary.to_csv())?;
            write_file(&opts.out_dir, "coverage_cells.csv", &study.per_cell().to_csv())?;
            write_file(&opts.out_dir, "coverage_icc.csv", &study.icc_csv())?;
            summary
        }
        SimulationKind::IwStudy => {
            let plan = iw_study_plan(&cfg, opts)?;
            let mut rows = Vec::new();
            for (scenario, config) in &plan.runs {
                let result = iw_estimator_study(config, plan.reps, plan.seed)?;
                rows.extend(result.rows.into_iter().map(|mut r| {
                    r.condition = format!("scenario-{scenario}");
                    r
                }));
            }
            let summary = StudyResult { rows };
            write_file(&opts.out_dir, "iw_study.csv", &summary.to_csv())?;
            summary
        }
    };
    out.write_all(summary.to_table().as_bytes())?;
    Ok(summary)
}

/// Settings of the enumeration self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub sizes: Vec<usize>,
    pub num_treated: usize,
    pub cap: u128,
    pub tolerance: f64,
    pub seed: u64,
}

impl CheckConfig {
    pub fn new(sizes: Vec<usize>, num_treated: usize) -> Self {
        Self {
            sizes,
            num_treated,
            cap: DEFAULT_ENUMERATION_CAP,
            tolerance: 1e-10,
            seed: 1,
        }
    }
}

/// Runs every enumeration identity on a random potential-outcome table for
/// the given design and prints one line per identity.
pub fn run_check(config: &CheckConfig, out: &mut dyn Write) -> Result<Vec<IdentityCheck>> {
    let design = ExperimentDesign::new(config.sizes.clone(), config.num_treated)?;
    let po = random_table(&config.sizes, &mut SeededRng::new(config.seed, 0));
    let checks = check_all(&po, &design, config.cap, config.tolerance)?;
    for c in &checks {
        let line = match &c.skipped {
            Some(reason) => format!("SKIP  {}: {reason}", c.name),
            None => format!(
                "{}  {}: max deviation {:.3e} (tolerance {:e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_deviation,
                config.tolerance
            ),
        };
        writeln!(out, "{line}")?;
    }
    Ok(checks)
}
