//! Experiment assembly: top-down, grouped and bottom-up approaches, the
//! input-availability matrix and the attribute-representation variants.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data_model::{
    aggregate_zscore_categories, apply_category_scores, availability_group, split_train_test, AttributeMode,
    AttributeTable, DataSplit, FeatureSpec, SiteRecord,
};
use crate::error::{Error, Result};
use crate::evaluate::SiteSeries;
use crate::mtl::{fit_mtl, MtlModel, MtlSettings, UnmonitoredSite};
use crate::numerics::Rng;
use crate::trainer::{train_ensemble, EnsembleModel, TrainingSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Topdown,
    GroupedRegional,
    GroupedCluster,
    Mtl,
}

impl Approach {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Topdown => "topdown",
            Self::GroupedRegional => "grouped_regional",
            Self::GroupedCluster => "grouped_cluster",
            Self::Mtl => "mtl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPool {
    /// Training sites that carry every input block.
    #[default]
    Default,
    /// Every training-eligible site that carries the blocks this plan uses.
    Extended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub label: String,
    pub approach: Approach,
    pub feature_spec: FeatureSpec,
    pub training_pool: TrainingPool,
    pub ensemble_size: usize,
    /// Label of the plan this one is compared against; the climatology
    /// baseline when absent.
    pub baseline: Option<String>,
}

/// Settings shared by every plan of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSettings {
    pub training: TrainingSettings,
    /// Training settings of the single-site source models.
    pub source_training: TrainingSettings,
    pub mtl: MtlSettings,
}

/// The site universe with its fixed training/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub sites: Vec<SiteRecord>,
    pub attribute_names: Vec<String>,
    pub category_map: Option<BTreeMap<String, String>>,
    pub expert_attributes: Option<Vec<String>>,
    pub split: DataSplit,
}

impl ExperimentData {
    pub fn new(
        mut sites: Vec<SiteRecord>,
        attribute_names: Vec<String>,
        category_map: Option<BTreeMap<String, String>>,
        expert_attributes: Option<Vec<String>>,
        threshold_dates: usize,
    ) -> Self {
        sites.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        let split = split_train_test(&sites, threshold_dates);
        Self { sites, attribute_names, category_map, expert_attributes, split }
    }

    /// Discharge series and every attribute column present.
    pub fn is_complete(&self, site: &SiteRecord) -> bool {
        site.has_discharge() && site.has_attributes(&self.attribute_names)
    }

    /// Test sites with complete inputs; identical for every plan.
    pub fn test_sites(&self) -> Vec<&SiteRecord> {
        self.sites
            .iter()
            .filter(|s| self.split.test_sites.contains(&s.site_id) && self.is_complete(s))
            .collect()
    }

    pub fn default_pool(&self) -> Vec<&SiteRecord> {
        self.sites
            .iter()
            .filter(|s| self.split.training_sites.contains(&s.site_id) && self.is_complete(s))
            .collect()
    }

    /// Training-eligible sites of `sites` carrying what `spec` needs.
    fn extended_from<'a>(&self, sites: &'a [SiteRecord], spec: &FeatureSpec) -> Vec<&'a SiteRecord> {
        availability_group(sites, spec)
            .into_iter()
            .filter(|s| self.split.training_sites.contains(&s.site_id))
            .collect()
    }

    pub fn extended_pool(&self, spec: &FeatureSpec) -> Vec<&SiteRecord> {
        self.extended_from(&self.sites, spec)
    }

    /// Full attribute list, the expert subset or the category map as a
    /// feature spec attribute block.
    pub fn attribute_spec(&self, base: FeatureSpec, mode: AttributeMode) -> Result<FeatureSpec> {
        Ok(match mode {
            AttributeMode::None => base,
            AttributeMode::Full => base.with_attributes(AttributeMode::Full, self.attribute_names.clone()),
            AttributeMode::Expert => {
                let expert = self
                    .expert_attributes
                    .as_ref()
                    .ok_or_else(|| Error::Config("expert attribute list not provided".into()))?;
                if let Some(missing) = expert.iter().find(|a| !self.attribute_names.contains(a)) {
                    return Err(Error::MissingInput(format!("expert attribute {missing} not in attribute table")));
                }
                base.with_attributes(AttributeMode::Expert, expert.clone())
            }
            AttributeMode::ZscoreCategories => {
                let map = self
                    .category_map
                    .as_ref()
                    .ok_or_else(|| Error::Config("category map not provided".into()))?;
                base.with_categories(map.clone())
            }
        })
    }

    /// Sites with category scores substituted for raw attributes when the
    /// spec asks for them. Scores are standardized over every site that has
    /// all mapped attributes.
    pub fn sites_for(&self, spec: &FeatureSpec) -> Result<Cow<'_, [SiteRecord]>> {
        if spec.attribute_mode != AttributeMode::ZscoreCategories {
            return Ok(Cow::Borrowed(&self.sites));
        }
        let map = spec
            .category_map
            .as_ref()
            .ok_or_else(|| Error::Config("category map not provided".into()))?;
        let mapped: Vec<String> = map.keys().cloned().collect();
        let scored: Vec<&SiteRecord> = self.sites.iter().filter(|s| s.has_attributes(&mapped)).collect();
        let table = AttributeTable::from_sites(&scored, &mapped)?;
        let scores = aggregate_zscore_categories(&table, map)?;
        Ok(Cow::Owned(apply_category_scores(&self.sites, &scores.table)))
    }
}

/// What a plan's model is made of.
#[derive(Debug, Clone)]
pub enum PlanModel {
    Single(EnsembleModel),
    Grouped(BTreeMap<String, EnsembleModel>),
    Mtl(Box<MtlModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_train: usize,
    pub n_test: usize,
    pub trained: bool,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: ExperimentPlan,
    pub training_sites: Vec<String>,
    /// Predicted test sites, ordered by id.
    pub series: Vec<SiteSeries>,
    /// Test sites whose group had no model.
    pub unpredicted: Vec<String>,
    pub groups: Vec<GroupSummary>,
    pub model: PlanModel,
}

fn pool_for<'a>(data: &ExperimentData, sites: &'a [SiteRecord], plan: &ExperimentPlan) -> Vec<&'a SiteRecord> {
    match plan.training_pool {
        TrainingPool::Default => {
            let ids: BTreeSet<&String> = data.default_pool().into_iter().map(|s| &s.site_id).collect();
            sites.iter().filter(|s| ids.contains(&s.site_id)).collect()
        }
        TrainingPool::Extended => data.extended_from(sites, &plan.feature_spec),
    }
}

fn tests_for<'a>(data: &ExperimentData, sites: &'a [SiteRecord]) -> Vec<&'a SiteRecord> {
    let ids: BTreeSet<&String> = data.test_sites().into_iter().map(|s| &s.site_id).collect();
    sites.iter().filter(|s| ids.contains(&s.site_id)).collect()
}

fn predict_tests(model: &EnsembleModel, tests: &[&SiteRecord]) -> Result<Vec<SiteSeries>> {
    tests
        .iter()
        .map(|s| Ok(SiteSeries::from_site(s, model.predict_site(s)?)))
        .collect()
}

/// One ensemble over the whole training pool, applied to every test site.
pub fn run_topdown(plan: &ExperimentPlan, data: &ExperimentData, settings: &RunSettings, seed: u64) -> Result<PlanOutcome> {
    if plan.approach != Approach::Topdown {
        return Err(Error::Config(format!("plan {} is not top-down", plan.label)));
    }
    let sites = data.sites_for(&plan.feature_spec)?;
    let pool = pool_for(data, &sites, plan);
    if pool.is_empty() {
        return Err(Error::Empty(format!("plan {} has an empty training pool", plan.label)));
    }
    let tests = tests_for(data, &sites);
    let model = train_ensemble(&pool, &plan.feature_spec, &settings.training, plan.ensemble_size, seed)?;
    Ok(PlanOutcome {
        plan: plan.clone(),
        training_sites: pool.iter().map(|s| s.site_id.clone()).collect(),
        series: predict_tests(&model, &tests)?,
        unpredicted: Vec::new(),
        groups: Vec::new(),
        model: PlanModel::Single(model),
    })
}

fn group_label(site: &SiteRecord, approach: Approach) -> Option<String> {
    match approach {
        Approach::GroupedRegional => Some(site.region_code.clone()).filter(|r| !r.is_empty()),
        Approach::GroupedCluster => site.cluster_id.map(|c| c.to_string()),
        _ => None,
    }
}

/// One ensemble per region or cluster; each test site is predicted only by
/// its own group's model.
pub fn run_grouped(plan: &ExperimentPlan, data: &ExperimentData, settings: &RunSettings, seed: u64) -> Result<PlanOutcome> {
    if !matches!(plan.approach, Approach::GroupedRegional | Approach::GroupedCluster) {
        return Err(Error::Config(format!("plan {} is not grouped", plan.label)));
    }
    let sites = data.sites_for(&plan.feature_spec)?;
    let pool = pool_for(data, &sites, plan);
    if pool.is_empty() {
        return Err(Error::Empty(format!("plan {} has an empty training pool", plan.label)));
    }
    let tests = tests_for(data, &sites);
    let label = |s: &SiteRecord| {
        group_label(s, plan.approach)
            .ok_or_else(|| Error::MissingInput(format!("site {} has no {} label", s.site_id, plan.approach.as_str())))
    };
    let mut train_groups: BTreeMap<String, Vec<&SiteRecord>> = BTreeMap::new();
    for s in &pool {
        train_groups.entry(label(s)?).or_default().push(s);
    }
    let mut test_groups: BTreeMap<String, Vec<&SiteRecord>> = BTreeMap::new();
    for s in &tests {
        test_groups.entry(label(s)?).or_default().push(s);
    }
    let root = Rng::new(seed);
    let mut models = BTreeMap::new();
    for (g, members) in &train_groups {
        let m = train_ensemble(members, &plan.feature_spec, &settings.training, plan.ensemble_size, root.child_labeled(g).seed())?;
        models.insert(g.clone(), m);
    }
    let all_groups: BTreeSet<&String> = train_groups.keys().chain(test_groups.keys()).collect();
    let groups = all_groups
        .into_iter()
        .map(|g| GroupSummary {
            group: g.clone(),
            n_train: train_groups.get(g).map_or(0, Vec::len),
            n_test: test_groups.get(g).map_or(0, Vec::len),
            trained: models.contains_key(g),
        })
        .collect();
    let mut series = Vec::new();
    let mut unpredicted = Vec::new();
    for s in &tests {
        match models.get(&label(s)?) {
            Some(m) => series.push(SiteSeries::from_site(s, m.predict_site(s)?)),
            None => unpredicted.push(s.site_id.clone()),
        }
    }
    Ok(PlanOutcome {
        plan: plan.clone(),
        training_sites: pool.iter().map(|s| s.site_id.clone()).collect(),
        series,
        unpredicted,
        groups,
        model: PlanModel::Grouped(models),
    })
}

/// Bottom-up transfer: per-site sources from the training pool, metamodel
/// ranking and top-k averaging at each test site.
pub fn run_mtl(plan: &ExperimentPlan, data: &ExperimentData, settings: &RunSettings, seed: u64) -> Result<PlanOutcome> {
    if plan.approach != Approach::Mtl {
        return Err(Error::Config(format!("plan {} is not mtl", plan.label)));
    }
    let pool: Vec<&SiteRecord> = match plan.training_pool {
        TrainingPool::Default => data.default_pool(),
        TrainingPool::Extended => data.extended_pool(&plan.feature_spec),
    };
    let mtl_settings = MtlSettings { ensemble_size: plan.ensemble_size, ..settings.mtl.clone() };
    let model = fit_mtl(&pool, data.attribute_names.clone(), &settings.source_training, &mtl_settings, seed)?;
    let series = data
        .test_sites()
        .into_iter()
        .map(|s| Ok(SiteSeries::from_site(s, model.predict(&UnmonitoredSite::from_site(s))?.predictions)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlanOutcome {
        plan: plan.clone(),
        training_sites: model.sources.keys().cloned().collect(),
        series,
        unpredicted: Vec::new(),
        groups: Vec::new(),
        model: PlanModel::Mtl(Box::new(model)),
    })
}

pub fn run_plan(plan: &ExperimentPlan, data: &ExperimentData, settings: &RunSettings, seed: u64) -> Result<PlanOutcome> {
    plan.feature_spec.validate()?;
    if plan.ensemble_size == 0 {
        return Err(Error::Config(format!("plan {} has ensemble size 0", plan.label)));
    }
    match plan.approach {
        Approach::Topdown => run_topdown(plan, data, settings, seed),
        Approach::GroupedRegional | Approach::GroupedCluster => run_grouped(plan, data, settings, seed),
        Approach::Mtl => run_mtl(plan, data, settings, seed),
    }
}

/// Meteorology, location, discharge and the full attribute set.
pub fn full_inputs(data: &ExperimentData) -> FeatureSpec {
    FeatureSpec::meteorology()
        .with_location()
        .with_discharge()
        .with_attributes(AttributeMode::Full, data.attribute_names.clone())
}

pub const REFERENCE_LABEL: &str = "exp1-topdown";

/// Top-down, regional, cluster and bottom-up plans on identical inputs.
pub fn experiment1_plans(data: &ExperimentData, ensemble_size: usize) -> Vec<ExperimentPlan> {
    let spec = full_inputs(data);
    let plan = |label: &str, approach, feature_spec: FeatureSpec, baseline: Option<&str>| ExperimentPlan {
        label: label.into(),
        approach,
        feature_spec,
        training_pool: TrainingPool::Default,
        ensemble_size,
        baseline: baseline.map(str::to_string),
    };
    vec![
        plan(REFERENCE_LABEL, Approach::Topdown, spec.clone(), None),
        plan("exp1-grouped_regional", Approach::GroupedRegional, spec.clone(), Some(REFERENCE_LABEL)),
        plan("exp1-grouped_cluster", Approach::GroupedCluster, spec, Some(REFERENCE_LABEL)),
        plan("exp1-mtl", Approach::Mtl, crate::mtl::source_feature_spec(), Some(REFERENCE_LABEL)),
    ]
}

/// Four input sets, each on the default and the extended pool.
pub fn experiment2_plans(data: &ExperimentData, ensemble_size: usize) -> Vec<ExperimentPlan> {
    let meteo = FeatureSpec::meteorology();
    let specs = [
        ("meteo", meteo.clone()),
        ("meteo_loc", meteo.clone().with_location()),
        ("meteo_loc_flow", meteo.clone().with_location().with_discharge()),
        (
            "meteo_loc_attr",
            meteo.with_location().with_attributes(AttributeMode::Full, data.attribute_names.clone()),
        ),
    ];
    let mut plans = Vec::new();
    for (name, spec) in specs {
        for pool in [TrainingPool::Default, TrainingPool::Extended] {
            let suffix = match pool {
                TrainingPool::Default => "default",
                TrainingPool::Extended => "extended",
            };
            plans.push(ExperimentPlan {
                label: format!("exp2-{name}-{suffix}"),
                approach: Approach::Topdown,
                feature_spec: spec.clone(),
                training_pool: pool,
                ensemble_size,
                baseline: Some(REFERENCE_LABEL.into()),
            });
        }
    }
    plans
}

/// Full attributes, the expert subset and the category scores.
pub fn experiment3_plans(data: &ExperimentData, ensemble_size: usize) -> Result<Vec<ExperimentPlan>> {
    let base = FeatureSpec::meteorology().with_location().with_discharge();
    [("full", AttributeMode::Full), ("expert", AttributeMode::Expert), ("categories", AttributeMode::ZscoreCategories)]
        .into_iter()
        .map(|(name, mode)| {
            Ok(ExperimentPlan {
                label: format!("exp3-{name}"),
                approach: Approach::Topdown,
                feature_spec: data.attribute_spec(base.clone(), mode)?,
                training_pool: TrainingPool::Default,
                ensemble_size,
                baseline: Some(REFERENCE_LABEL.into()),
            })
        })
        .collect()
}

/// The eight availability-group models; failures stay attached to their plan.
pub fn run_experiment2_matrix(
    data: &ExperimentData,
    settings: &RunSettings,
    ensemble_size: usize,
    seed: u64,
) -> Vec<(ExperimentPlan, Result<PlanOutcome>)> {
    let root = Rng::new(seed);
    experiment2_plans(data, ensemble_size)
        .into_iter()
        .map(|p| {
            let r = run_plan(&p, data, settings, root.child_labeled(&p.label).seed());
            (p, r)
        })
        .collect()
}

pub fn run_experiment3_variants(
    data: &ExperimentData,
    settings: &RunSettings,
    ensemble_size: usize,
    seed: u64,
) -> Result<Vec<PlanOutcome>> {
    let root = Rng::new(seed);
    experiment3_plans(data, ensemble_size)?
        .iter()
        .map(|p| run_plan(p, data, settings, root.child_labeled(&p.label).seed()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{generate, FixtureConfig, FIXTURE_THRESHOLD_DATES};
    use crate::trainer::HyperPreset;

    fn data() -> ExperimentData {
        let f = generate(&FixtureConfig {
            n_days: 1100,
            training_per_region: vec![2, 2, 0],
            test_per_region: vec![1, 1, 1],
            n_extra: 3,
            ..Default::default()
        });
        let names = crate::fixture::ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect();
        ExperimentData::new(f.sites, names, Some(f.category_map), Some(f.expert_attributes), FIXTURE_THRESHOLD_DATES)
    }

    fn quick() -> RunSettings {
        let training = TrainingSettings {
            presets: vec![HyperPreset { batch_size: 8, hidden_size: 4, num_layers: 1, weight_decay: 0.0, dropout: 0.0 }],
            learning_rate: 0.01,
            patience: 2,
            max_epochs: 2,
            ..Default::default()
        };
        RunSettings { training: training.clone(), source_training: training, mtl: MtlSettings::default() }
    }

    #[test]
    fn pools_are_monotone() {
        let d = data();
        let meteo = FeatureSpec::meteorology();
        let default: BTreeSet<String> = d.default_pool().iter().map(|s| s.site_id.clone()).collect();
        let ext: BTreeSet<String> = d.extended_pool(&meteo).iter().map(|s| s.site_id.clone()).collect();
        let flow: BTreeSet<String> =
            d.extended_pool(&meteo.clone().with_discharge()).iter().map(|s| s.site_id.clone()).collect();
        assert!(default.is_subset(&ext));
        assert!(flow.is_subset(&ext));
        assert_eq!(default.len(), 4);
        assert_eq!(ext.len(), 7);
        let test: BTreeSet<String> = d.test_sites().iter().map(|s| s.site_id.clone()).collect();
        assert!(test.is_disjoint(&ext));
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn experiment2_has_eight_plans() {
        let d = data();
        let plans = experiment2_plans(&d, 1);
        assert_eq!(plans.len(), 8);
        assert_eq!(plans[0].feature_spec.input_size(), 9);
    }

    #[test]
    fn experiment3_widths() {
        let d = data();
        let plans = experiment3_plans(&d, 1).unwrap();
        let widths: Vec<usize> = plans.iter().map(|p| p.feature_spec.attribute_features().len()).collect();
        assert_eq!(widths, vec![12, 6, 5]);
    }

    #[test]
    fn missing_expert_attribute_is_error() {
        let mut d = data();
        d.expert_attributes = Some(vec!["NOT_AN_ATTRIBUTE".into()]);
        assert!(matches!(experiment3_plans(&d, 1), Err(Error::MissingInput(_))));
    }

    #[test]
    fn grouped_routes_and_flags_empty_groups() {
        let d = data();
        let plan = ExperimentPlan {
            label: "g".into(),
            approach: Approach::GroupedRegional,
            feature_spec: FeatureSpec::meteorology(),
            training_pool: TrainingPool::Default,
            ensemble_size: 1,
            baseline: None,
        };
        let out = run_grouped(&plan, &d, &quick(), 1).unwrap();
        let PlanModel::Grouped(models) = &out.model else { panic!() };
        assert_eq!(models.len(), 2);
        assert_eq!(out.series.len(), 2);
        assert_eq!(out.unpredicted.len(), 1);
        let empty = out.groups.iter().find(|g| g.n_train == 0).unwrap();
        assert!(!empty.trained && empty.n_test == 1);
        let union: usize = out.groups.iter().map(|g| g.n_train).sum();
        assert_eq!(union, d.default_pool().len());
    }

    #[test]
    fn topdown_predicts_every_test_site() {
        let d = data();
        let plan = ExperimentPlan {
            label: "t".into(),
            approach: Approach::Topdown,
            feature_spec: d.attribute_spec(FeatureSpec::meteorology(), AttributeMode::ZscoreCategories).unwrap(),
            training_pool: TrainingPool::Default,
            ensemble_size: 1,
            baseline: None,
        };
        let out = run_plan(&plan, &d, &quick(), 3).unwrap();
        assert_eq!(out.series.len(), 3);
        assert!(out.series.iter().all(|s| s.predictions.iter().all(|p| p.is_finite())));
        let again = run_plan(&plan, &d, &quick(), 3).unwrap();
        assert_eq!(out.series, again.series);
    }
}
