//! TOML run configuration and plan resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_model::{AttributeMode, FeatureSpec, DEFAULT_THRESHOLD_DATES};
use crate::error::{Error, Result};
use crate::experiments::{
    experiment1_plans, experiment2_plans, experiment3_plans, Approach, ExperimentData, ExperimentPlan, RunSettings,
    TrainingPool,
};
use crate::gbrt::ErrorAnalysisConfig;
use crate::ingest::DataPaths;
use crate::mtl::{MetamodelConfig, MtlSettings, DEFAULT_TOP_K};
use crate::thermal_regime::RegimeThresholds;
use crate::trainer::TrainingSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Paths relative to the config file's directory.
    pub data: DataPaths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold_dates: usize,
    /// Attributes holding a distance to the nearest dam, transformed on ingest.
    #[serde(default)]
    pub dam_attributes: Vec<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub mtl: MtlSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    pub regime: Option<RegimeThresholds>,
    /// Plans run when none are named on the command line.
    #[serde(default)]
    pub run: Vec<String>,
    #[serde(default)]
    pub plans: Vec<PlanConfig>,
}

fn one() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("reports")
}
fn default_threshold() -> usize {
    DEFAULT_THRESHOLD_DATES
}
fn default_alpha() -> f64 {
    0.05
}
fn default_ensemble() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtlSection {
    pub top_k: usize,
    pub feature_selection: bool,
    /// Source-model training; the main training block when absent.
    pub training: Option<TrainingSettings>,
}

impl Default for MtlSection {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, feature_selection: true, training: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub importance: bool,
    pub importance_repeats: usize,
    pub error_analysis: bool,
    pub error_analysis_realizations: usize,
    pub shapley_samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            importance: true,
            importance_repeats: 1,
            error_analysis: true,
            error_analysis_realizations: 100,
            shapley_samples: 64,
        }
    }
}

impl AnalysisSection {
    pub fn error_analysis_config(&self) -> ErrorAnalysisConfig {
        ErrorAnalysisConfig {
            realizations: self.error_analysis_realizations,
            shapley_samples: self.shapley_samples,
            ..Default::default()
        }
    }
}

/// Input blocks of a custom plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSetConfig {
    pub meteorology: bool,
    pub location: bool,
    pub discharge: bool,
    pub attributes: AttributeMode,
}

impl Default for FeatureSetConfig {
    fn default() -> Self {
        Self { meteorology: true, location: false, discharge: false, attributes: AttributeMode::None }
    }
}

impl FeatureSetConfig {
    pub fn resolve(&self, data: &ExperimentData) -> Result<FeatureSpec> {
        let mut spec = FeatureSpec::meteorology();
        spec.use_meteorology = self.meteorology;
        spec.use_location = self.location;
        spec.use_discharge = self.discharge;
        data.attribute_spec(spec, self.attributes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub name: String,
    pub approach: Approach,
    #[serde(default)]
    pub features: FeatureSetConfig,
    #[serde(default)]
    pub pool: TrainingPool,
    pub ensemble_size: Option<usize>,
    pub baseline: Option<String>,
}

/// Names of the built-in plan groups.
pub const BUILTIN_PLANS: [&str; 3] = ["exp1", "exp2", "exp3"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Read a config file; data paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.data = c.data.resolved(base);
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        self.training.validate()?;
        if let Some(t) = &self.mtl.training {
            t.validate()?;
        }
        if let Some(r) = &self.regime {
            r.validate()?;
        }
        for (i, p) in self.plans.iter().enumerate() {
            if BUILTIN_PLANS.contains(&p.name.as_str()) || self.plans[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("plan name {} is reserved or repeated", p.name)));
            }
        }
        Ok(())
    }

    /// Check every referenced input file exists.
    pub fn check_files(&self) -> Result<()> {
        let d = &self.data;
        let required = [Some(&d.observations), Some(&d.drivers), Some(&d.sites)];
        let optional = [d.attributes.as_ref(), d.categories.as_ref(), d.expert_attributes.as_ref()];
        for p in required.into_iter().chain(optional).flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            training: self.training.clone(),
            source_training: self.mtl.training.clone().unwrap_or_else(|| self.training.clone()),
            mtl: MtlSettings {
                ensemble_size: self.ensemble_size,
                top_k: self.mtl.top_k,
                metamodel: MetamodelConfig { feature_selection: self.mtl.feature_selection, ..Default::default() },
            },
        }
    }

    /// Expand plan names (built-in groups or custom plan names) into plans,
    /// prepending any comparison baseline that was not requested.
    pub fn resolve_plans(&self, names: &[String], data: &ExperimentData) -> Result<Vec<ExperimentPlan>> {
        let names: Vec<String> = if names.is_empty() { self.run.clone() } else { names.to_vec() };
        if names.is_empty() {
            return Err(Error::Config("no plans selected".into()));
        }
        let mut plans: Vec<ExperimentPlan> = Vec::new();
        for name in &names {
            let expanded = match name.as_str() {
                "exp1" => experiment1_plans(data, self.ensemble_size),
                "exp2" => experiment2_plans(data, self.ensemble_size),
                "exp3" => experiment3_plans(data, self.ensemble_size)?,
                other => {
                    let p = self
                        .plans
                        .iter()
                        .find(|p| p.name == other)
                        .ok_or_else(|| Error::Config(format!("unknown plan {other}")))?;
                    vec![self.custom_plan(p, data)?]
                }
            };
            for p in expanded {
                if !plans.iter().any(|q| q.label == p.label) {
                    plans.push(p);
                }
            }
        }
        let mut ordered: Vec<ExperimentPlan> = Vec::new();
        for p in &plans {
            if let Some(b) = &p.baseline {
                if !ordered.iter().any(|q| &q.label == b) {
                    let base = plans
                        .iter()
                        .find(|q| &q.label == b)
                        .cloned()
                        .or_else(|| self.baseline_plan(b, data))
                        .ok_or_else(|| Error::Config(format!("baseline plan {b} is undefined")))?;
                    ordered.push(base);
                }
            }
            if !ordered.iter().any(|q| q.label == p.label) {
                ordered.push(p.clone());
            }
        }
        Ok(ordered)
    }

    fn baseline_plan(&self, label: &str, data: &ExperimentData) -> Option<ExperimentPlan> {
        experiment1_plans(data, self.ensemble_size)
            .into_iter()
            .find(|p| p.label == label)
            .or_else(|| self.plans.iter().find(|p| p.name == label).and_then(|p| self.custom_plan(p, data).ok()))
    }

    fn custom_plan(&self, p: &PlanConfig, data: &ExperimentData) -> Result<ExperimentPlan> {
        Ok(ExperimentPlan {
            label: p.name.clone(),
            approach: p.approach,
            feature_spec: p.features.resolve(data)?,
            training_pool: p.pool,
            ensemble_size: p.ensemble_size.unwrap_or(self.ensemble_size),
            baseline: p.baseline.clone(),
        })
    }
}
