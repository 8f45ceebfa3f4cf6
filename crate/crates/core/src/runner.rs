//! Executes configured plans and writes one report directory per plan plus a
//! run manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data_model::{build_dynamic_inputs, SiteRecord};
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate, climatology_baseline, compare_to_baseline, default_feature_groups, importance_report, site_metrics,
    temporal_breakdown, Category, CategorySummary, ComparisonResult, ImportanceReport, SiteMetrics, SiteSeries,
    Summary, TestInputs,
};
use crate::experiments::{run_plan, ExperimentData, ExperimentPlan, GroupSummary, PlanModel, PlanOutcome};
use crate::gbrt::{attribute_error_analysis, AttributeErrorReport, FeatureMatrix};
use crate::ingest::{ingest, IngestReport};
use crate::numerics::{format_sig6, Rng};
use crate::thermal_regime::{analyze_site, regime_error_report, RegimeRow, SiteRegime};
use crate::trainer::TrainingLog;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coverage {
    pub n_test_sites: usize,
    pub n_predicted: usize,
    pub unpredicted: Vec<String>,
}

/// Everything that goes into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub label: String,
    pub approach: String,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub training_pool: String,
    pub ensemble_size: usize,
    pub n_training_sites: usize,
    pub coverage: Coverage,
    pub groups: Vec<GroupSummary>,
    pub summary: Summary,
    pub climatology: Summary,
    pub comparison_baseline: String,
    pub comparison: BTreeMap<Category, CategorySummary>,
    pub importance: Option<ImportanceReport>,
    pub regime: Option<Vec<RegimeRow>>,
    pub attribute_selection: Option<Vec<String>>,
    /// Analyses that were skipped and why.
    pub notes: Vec<String>,
    #[serde(skip)]
    pub site_metrics: Vec<SiteMetrics>,
    #[serde(skip)]
    pub comparison_sites: ComparisonResult,
    #[serde(skip)]
    pub regimes: Vec<SiteRegime>,
    #[serde(skip)]
    pub attribute_analysis: Option<AttributeErrorReport>,
}

/// Round every float in a JSON tree to six significant digits.
fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x: f64 = format_sig6(n.as_f64().unwrap_or(f64::NAN)).parse().unwrap_or(f64::NAN);
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, round: bool) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if round {
        v = round_json(v);
    }
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn test_inputs(sites: &[&SiteRecord], model: &crate::trainer::EnsembleModel) -> Result<Vec<TestInputs>> {
    sites
        .iter()
        .map(|s| {
            Ok(TestInputs {
                site_id: s.site_id.clone(),
                rows: build_dynamic_inputs(s, &model.feature_spec)?,
                observations: s.water_temp.clone(),
            })
        })
        .collect()
}

/// Metrics, comparisons and diagnostics of one finished plan.
pub fn evaluate_outcome(
    outcome: &PlanOutcome,
    data: &ExperimentData,
    baseline: Option<&PlanOutcome>,
    config: &RunConfig,
    seed: u64,
) -> Result<PlanReport> {
    let plan = &outcome.plan;
    if outcome.series.is_empty() {
        return Err(Error::Empty(format!("plan {} predicted no test sites", plan.label)));
    }
    let mut notes = Vec::new();
    let metrics = outcome.series.iter().map(site_metrics).collect::<Result<Vec<_>>>()?;
    let records: BTreeMap<&str, &SiteRecord> = data.test_sites().into_iter().map(|s| (s.site_id.as_str(), s)).collect();
    let climatology: Vec<SiteSeries> = outcome
        .series
        .iter()
        .map(|s| {
            let r = records[s.site_id.as_str()];
            Ok(SiteSeries::from_site(r, climatology_baseline(r)?))
        })
        .collect::<Result<_>>()?;
    let clim_metrics = climatology.iter().map(site_metrics).collect::<Result<Vec<_>>>()?;

    let (comparison_baseline, comparison_sites) = match baseline {
        Some(b) => {
            let ids: std::collections::BTreeSet<&str> = b.series.iter().map(|s| s.site_id.as_str()).collect();
            let common: Vec<SiteSeries> =
                outcome.series.iter().filter(|s| ids.contains(s.site_id.as_str())).cloned().collect();
            (b.plan.label.clone(), compare_to_baseline(&common, &b.series, config.alpha)?)
        }
        None => ("climatology".to_string(), compare_to_baseline(&outcome.series, &climatology, config.alpha)?),
    };

    let root = Rng::new(seed);
    let mut importance = None;
    let mut attribute_analysis = None;
    if let PlanModel::Single(model) = &outcome.model {
        let sites = data.sites_for(&plan.feature_spec)?;
        let predicted: Vec<&SiteRecord> = outcome
            .series
            .iter()
            .filter_map(|s| sites.iter().find(|r| r.site_id == s.site_id))
            .collect();
        if config.analysis.importance {
            let tests = test_inputs(&predicted, model)?;
            let groups = default_feature_groups(&model.feature_names());
            importance = Some(importance_report(
                model,
                &tests,
                &groups,
                config.analysis.importance_repeats,
                &mut root.child_labeled("importance"),
            )?);
        }
        if config.analysis.error_analysis {
            let rows: Vec<Vec<f64>> = outcome
                .series
                .iter()
                .map(|s| data.attribute_names.iter().map(|a| records[s.site_id.as_str()].attributes[a]).collect())
                .collect();
            let target = metrics.iter().map(|m| m.rmse).collect();
            let matrix = FeatureMatrix::from_rows(data.attribute_names.clone(), &rows, target)?;
            match attribute_error_analysis(
                &matrix,
                &config.analysis.error_analysis_config(),
                &mut root.child_labeled("error-analysis"),
            ) {
                Ok(r) => attribute_analysis = Some(r),
                Err(e @ (Error::Insufficient(_) | Error::ZeroVariance(_))) => {
                    notes.push(format!("attribute error analysis skipped: {e}"))
                }
                Err(e) => return Err(e),
            }
        }
    } else {
        notes.push("permutation importance and attribute error analysis apply to single top-down models only".into());
    }

    let mut regimes = Vec::new();
    for s in &outcome.series {
        match analyze_site(records[s.site_id.as_str()], config.regime.as_ref()) {
            Ok(r) => regimes.push(r),
            Err(e) => notes.push(format!("regime fit skipped for {}: {e}", s.site_id)),
        }
    }
    let regime = match &config.regime {
        Some(_) => {
            let classes: BTreeMap<String, _> =
                regimes.iter().filter_map(|r| r.class.map(|c| (r.site_id.clone(), c))).collect();
            let classified: Vec<SiteMetrics> =
                metrics.iter().filter(|m| classes.contains_key(&m.site_id)).cloned().collect();
            Some(regime_error_report(&classes, &classified)?)
        }
        None => {
            notes.push("regime thresholds not configured; only dammed sites are classified".into());
            None
        }
    };

    Ok(PlanReport {
        label: plan.label.clone(),
        approach: plan.approach.as_str().into(),
        seed,
        feature_names: plan.feature_spec.feature_names(),
        training_pool: format!("{:?}", plan.training_pool).to_lowercase(),
        ensemble_size: plan.ensemble_size,
        n_training_sites: outcome.training_sites.len(),
        coverage: Coverage {
            n_test_sites: outcome.series.len() + outcome.unpredicted.len(),
            n_predicted: outcome.series.len(),
            unpredicted: outcome.unpredicted.clone(),
        },
        groups: outcome.groups.clone(),
        summary: aggregate(&metrics)?,
        climatology: aggregate(&clim_metrics)?,
        comparison_baseline,
        comparison: comparison_sites.categories.clone(),
        importance,
        regime,
        attribute_selection: attribute_analysis.as_ref().map(|a| a.selection.selected.clone()),
        notes,
        site_metrics: metrics,
        comparison_sites,
        regimes,
        attribute_analysis,
    })
}

fn write_logs(dir: &Path, prefix: &str, logs: impl Iterator<Item = (usize, TrainingLog)>) -> Result<()> {
    for (k, log) in logs {
        log.write_csv(BufWriter::new(File::create(dir.join(format!("{prefix}member_{k}.csv")))?))?;
    }
    Ok(())
}

/// Write `summary.json` and the CSV tables of one plan.
pub fn write_plan_report(dir: &Path, outcome: &PlanOutcome, report: &PlanReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("summary.json"), report, true)?;

    let mut w = csv_writer(&dir.join("site_metrics.csv"))?;
    w.write_record(["site_id", "n_obs", "rmse", "mean_bias", "rmse_warm10"])?;
    for m in &report.site_metrics {
        w.write_record([
            m.site_id.clone(),
            m.n_obs.to_string(),
            format_sig6(m.rmse),
            format_sig6(m.mean_bias),
            format_sig6(m.rmse_warm10),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("comparison.csv"))?;
    w.write_record(["site_id", "baseline", "p_value", "category", "delta_rmse"])?;
    for c in &report.comparison_sites.sites {
        w.write_record([
            c.site_id.clone(),
            report.comparison_baseline.clone(),
            c.p_value.map(format_sig6).unwrap_or_default(),
            c.category.as_str().to_string(),
            format_sig6(c.delta_rmse),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("importance.csv"))?;
    w.write_record(["group", "delta_rmse", "above_threshold"])?;
    if let Some(imp) = &report.importance {
        for e in &imp.entries {
            w.write_record([e.group.clone(), format_sig6(e.delta_rmse), e.above_threshold.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("predictions.csv"))?;
    w.write_record(["site_id", "date", "observed", "predicted"])?;
    for s in &outcome.series {
        for (i, d) in s.dates.iter().enumerate() {
            w.write_record([
                s.site_id.clone(),
                d.to_string(),
                s.observations[i].map(format_sig6).unwrap_or_default(),
                format_sig6(s.predictions[i]),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("regime.csv"))?;
    w.write_record(["class", "n_sites", "fraction", "median_rmse", "mean_bias"])?;
    for r in report.regime.iter().flatten() {
        w.write_record([
            r.class.as_str().to_string(),
            r.n_sites.to_string(),
            format_sig6(r.fraction),
            r.median_rmse.map(format_sig6).unwrap_or_default(),
            r.mean_bias.map(format_sig6).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("regime_sites.csv"))?;
    w.write_record(["site_id", "amplitude_ratio", "phase_lag_days", "class"])?;
    for r in &report.regimes {
        w.write_record([
            r.site_id.clone(),
            format_sig6(r.amplitude_ratio),
            format_sig6(r.phase_lag_days),
            r.class.map(|c| c.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let temporal = temporal_breakdown(&outcome.series)?;
    let mut w = csv_writer(&dir.join("doy.csv"))?;
    w.write_record(["day_of_year", "median_rmse"])?;
    for (d, v) in &temporal.doy_median_rmse {
        w.write_record([d.to_string(), format_sig6(*v)])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("site_year.csv"))?;
    w.write_record(["site_id", "year", "rmse"])?;
    for (s, y, v) in &temporal.site_year_rmse {
        w.write_record([s.clone(), y.to_string(), format_sig6(*v)])?;
    }
    w.flush()?;

    if let Some(a) = &report.attribute_analysis {
        a.write_csv(BufWriter::new(File::create(dir.join("attribute_importance.csv"))?))?;
    }

    let logs = dir.join("training_logs");
    std::fs::create_dir_all(&logs)?;
    match &outcome.model {
        PlanModel::Single(m) => write_logs(&logs, "", m.members.iter().map(|x| x.log.clone()).enumerate())?,
        PlanModel::Grouped(ms) => {
            for (g, m) in ms {
                write_logs(&logs, &format!("group_{g}_"), m.members.iter().map(|x| x.log.clone()).enumerate())?;
            }
        }
        PlanModel::Mtl(m) => {
            m.matrix.write_csv(BufWriter::new(File::create(dir.join("transfer_matrix.csv"))?))?;
            let mut w = csv_writer(&dir.join("metamodel_features.csv"))?;
            w.write_record(["feature"])?;
            for &j in &m.metamodel.selected {
                w.write_record([m.metamodel.all_features[j].as_str()])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanStatus {
    pub label: String,
    pub status: String,
    pub error: Option<String>,
    pub directory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub rng: String,
    pub config_sha256: String,
    pub input_sha256: BTreeMap<String, String>,
    pub ingest: IngestReport,
    pub plans: Vec<PlanStatus>,
}

impl Manifest {
    pub fn failures(&self) -> usize {
        self.plans.iter().filter(|p| p.status == "failed").count()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse the inputs and load the experiment universe.
pub fn load_data(config: &RunConfig) -> Result<(ExperimentData, IngestReport)> {
    config.check_files()?;
    let ds = ingest(&config.data, &config.dam_attributes)?;
    let report = ds.report.clone();
    Ok((
        ExperimentData::new(ds.sites, ds.attribute_names, ds.category_map, ds.expert_attributes, config.threshold_dates),
        report,
    ))
}

/// Run the named plans (the config's `run` list when empty). Plans train in
/// parallel; a failing plan is recorded and the others continue. With no
/// sites loaded every plan is skipped.
pub fn run(config: &RunConfig, plan_names: &[String], out: &Path) -> Result<Manifest> {
    let (data, ingest_report) = load_data(config)?;
    let mut statuses = Vec::new();
    let mut plans: Vec<ExperimentPlan> = Vec::new();
    let names: Vec<String> = if plan_names.is_empty() { config.run.clone() } else { plan_names.to_vec() };
    if names.is_empty() {
        return Err(Error::Config("no plans selected".into()));
    }
    for name in &names {
        match config.resolve_plans(std::slice::from_ref(name), &data) {
            Ok(ps) => {
                for p in ps {
                    if !plans.iter().any(|q| q.label == p.label) {
                        plans.push(p);
                    }
                }
            }
            Err(e) => statuses.push(PlanStatus { label: name.clone(), status: "failed".into(), error: Some(e.to_string()), directory: None }),
        }
    }

    if data.sites.is_empty() {
        log::warn!("no sites loaded; nothing to run");
        for p in plans.drain(..) {
            statuses.push(PlanStatus { label: p.label, status: "skipped".into(), error: Some("no sites loaded".into()), directory: None });
        }
    }
    let root = Rng::new(config.seed);
    let settings = config.run_settings();
    let seeds: Vec<u64> = plans.iter().map(|p| root.child_labeled(&p.label).seed()).collect();
    let outcomes: Vec<Result<PlanOutcome>> = plans
        .par_iter()
        .zip(&seeds)
        .map(|(p, &seed)| {
            log::info!("running plan {}", p.label);
            run_plan(p, &data, &settings, seed)
        })
        .collect();

    std::fs::create_dir_all(out)?;
    let mut done: BTreeMap<String, PlanOutcome> = BTreeMap::new();
    for ((plan, seed), outcome) in plans.iter().zip(&seeds).zip(outcomes) {
        let result = outcome.and_then(|o| {
            let baseline = match &plan.baseline {
                Some(b) => Some(
                    done.get(b).ok_or_else(|| Error::MissingInput(format!("baseline plan {b} did not complete")))?,
                ),
                None => None,
            };
            let report = evaluate_outcome(&o, &data, baseline, config, *seed)?;
            let dir = out.join(&plan.label);
            write_plan_report(&dir, &o, &report)?;
            Ok(o)
        });
        statuses.push(match result {
            Ok(o) => {
                done.insert(plan.label.clone(), o);
                PlanStatus { label: plan.label.clone(), status: "ok".into(), error: None, directory: Some(plan.label.clone()) }
            }
            Err(e) => {
                log::error!("plan {} failed: {e}", plan.label);
                PlanStatus { label: plan.label.clone(), status: "failed".into(), error: Some(e.to_string()), directory: None }
            }
        });
    }

    let mut input_sha256 = BTreeMap::new();
    let d = &config.data;
    for p in [Some(&d.observations), Some(&d.drivers), Some(&d.sites), d.attributes.as_ref(), d.categories.as_ref(), d.expert_attributes.as_ref()]
        .into_iter()
        .flatten()
    {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        input_sha256.insert(name, sha256_hex(&std::fs::read(p)?));
    }
    let manifest = Manifest {
        seed: config.seed,
        rng: Rng::ALGORITHM.into(),
        config_sha256: sha256_hex(&serde_json::to_vec(&config_for_hash(config))?),
        input_sha256,
        ingest: ingest_report,
        plans: statuses,
    };
    write_json(&out.join("manifest.json"), &manifest, false)?;
    Ok(manifest)
}

/// The effective config with data paths reduced to file names, so the hash
/// does not depend on where the inputs live.
fn config_for_hash(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    let strip = |p: &PathBuf| PathBuf::from(p.file_name().unwrap_or_default());
    c.data.observations = strip(&c.data.observations);
    c.data.drivers = strip(&c.data.drivers);
    c.data.sites = strip(&c.data.sites);
    c.data.attributes = c.data.attributes.as_ref().map(strip);
    c.data.categories = c.data.categories.as_ref().map(strip);
    c.data.expert_attributes = c.data.expert_attributes.as_ref().map(strip);
    c.output_dir = PathBuf::new();
    c.threads = 0;
    c
}
