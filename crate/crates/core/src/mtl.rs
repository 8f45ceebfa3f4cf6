//! Bottom-up meta transfer learning: per-site source ensembles, the pairwise
//! transfer matrix, the RMSE metamodel and top-k source selection.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{build_dynamic_inputs, FeatureSpec, SiteRecord};
use crate::error::{Error, Result};
use crate::gbrt::{fit_gbrt, rfe_cv, FeatureMatrix, GbrtConfig, GbrtModel, RfeConfig, RfeResult};
use crate::numerics::{
    excess_kurtosis, format_sig6, mean, population_std, quantile_linear, skewness, Rng,
};
use crate::trainer::{mean_of_members, train_ensemble, EnsembleModel, TrainingSettings};

/// Number of source sites averaged for an unmonitored prediction.
pub const DEFAULT_TOP_K: usize = 10;

/// Source models see meteorology and streamflow only.
pub fn source_feature_spec() -> FeatureSpec {
    FeatureSpec::meteorology().with_discharge()
}

/// A site record whose water temperatures have been removed. Anything that
/// predicts for an unmonitored site takes this type, so target observations
/// cannot leak in.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmonitoredSite(SiteRecord);

impl UnmonitoredSite {
    pub fn from_site(site: &SiteRecord) -> Self {
        let mut r = site.clone();
        r.water_temp = vec![None; r.dates.len()];
        Self(r)
    }

    pub fn record(&self) -> &SiteRecord {
        &self.0
    }

    pub fn site_id(&self) -> &str {
        &self.0.site_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

/// Astronomical seasons with fixed boundaries: spring from 20 March, summer
/// from 21 June, autumn from 22 September, winter from 21 December.
pub fn season_of(date: NaiveDate) -> Season {
    let md = (date.month(), date.day());
    if md >= (12, 21) || md < (3, 20) {
        Season::Winter
    } else if md < (6, 21) {
        Season::Spring
    } else if md < (9, 22) {
        Season::Summer
    } else {
        Season::Autumn
    }
}

pub const OBSERVATION_STAT_NAMES: [&str; 16] = [
    "src_total_temperature_obs",
    "src_total_sampling_dates",
    "src_winter_obs",
    "src_spring_obs",
    "src_summer_obs",
    "src_autumn_obs",
    "src_mean",
    "src_q05",
    "src_q25",
    "src_q75",
    "src_q95",
    "src_min",
    "src_max",
    "src_std",
    "src_skew",
    "src_kurtosis",
];

/// Summary statistics of a site's observed water temperatures.
pub fn observation_stats(site: &SiteRecord) -> Result<[f64; 16]> {
    let obs: Vec<(NaiveDate, f64)> = site.observations().map(|(i, v)| (site.dates[i], v)).collect();
    if obs.is_empty() {
        return Err(Error::Empty(format!("site {} has no observations", site.site_id)));
    }
    let v: Vec<f64> = obs.iter().map(|o| o.1).collect();
    let count = |s: Season| obs.iter().filter(|o| season_of(o.0) == s).count() as f64;
    let dates: std::collections::BTreeSet<NaiveDate> = obs.iter().map(|o| o.0).collect();
    Ok([
        v.len() as f64,
        dates.len() as f64,
        count(Season::Winter),
        count(Season::Spring),
        count(Season::Summer),
        count(Season::Autumn),
        mean(&v),
        quantile_linear(&v, 0.05),
        quantile_linear(&v, 0.25),
        quantile_linear(&v, 0.75),
        quantile_linear(&v, 0.95),
        v.iter().copied().fold(f64::INFINITY, f64::min),
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        population_std(&v),
        skewness(&v),
        excess_kurtosis(&v),
    ])
}

/// Everything about a site that enters the meta features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: String,
    pub location: [f64; 3],
    pub attributes: Vec<f64>,
    pub driver_means: Vec<f64>,
    pub driver_stds: Vec<f64>,
}

/// Ordered meta-feature layout: location differences, attribute
/// differences, source observation statistics, driver mean and std
/// differences. All differences are source − target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureBuilder {
    pub attribute_names: Vec<String>,
    pub driver_spec: FeatureSpec,
}

impl MetaFeatureBuilder {
    pub fn new(attribute_names: Vec<String>) -> Self {
        Self { attribute_names, driver_spec: source_feature_spec() }
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = ["diff_lat", "diff_lon", "diff_elev"].iter().map(|s| s.to_string()).collect();
        n.extend(self.attribute_names.iter().map(|a| format!("diff_{a}")));
        n.extend(OBSERVATION_STAT_NAMES.iter().map(|s| s.to_string()));
        let drivers = self.driver_spec.feature_names();
        n.extend(drivers.iter().map(|d| format!("diff_mean_{d}")));
        n.extend(drivers.iter().map(|d| format!("diff_std_{d}")));
        n
    }

    pub fn len(&self) -> usize {
        3 + self.attribute_names.len() + OBSERVATION_STAT_NAMES.len() + 2 * self.driver_spec.input_size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Static and driver summary of a site; needs no water temperatures.
    pub fn summarize(&self, site: &SiteRecord) -> Result<SiteSummary> {
        let attributes = self
            .attribute_names
            .iter()
            .map(|a| {
                site.attributes.get(a).copied().ok_or_else(|| Error::InvalidAttribute {
                    name: a.clone(),
                    reason: format!("missing at site {}", site.site_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = build_dynamic_inputs(site, &self.driver_spec)?;
        let d = self.driver_spec.input_size();
        let cols: Vec<Vec<f64>> = (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Ok(SiteSummary {
            site_id: site.site_id.clone(),
            location: [site.latitude, site.longitude, site.elevation],
            attributes,
            driver_means: cols.iter().map(|c| mean(c)).collect(),
            driver_stds: cols.iter().map(|c| population_std(c)).collect(),
        })
    }

    pub fn build(&self, source: &SiteSummary, source_obs: &[f64; 16], target: &SiteSummary) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend((0..3).map(|k| source.location[k] - target.location[k]));
        v.extend(source.attributes.iter().zip(&target.attributes).map(|(s, t)| s - t));
        v.extend_from_slice(source_obs);
        v.extend(source.driver_means.iter().zip(&target.driver_means).map(|(s, t)| s - t));
        v.extend(source.driver_stds.iter().zip(&target.driver_stds).map(|(s, t)| s - t));
        v
    }
}

/// Meta features of one (source, target) pair.
pub fn build_meta_features(
    builder: &MetaFeatureBuilder,
    source: &SiteRecord,
    target: &UnmonitoredSite,
) -> Result<Vec<f64>> {
    Ok(builder.build(
        &builder.summarize(source)?,
        &observation_stats(source)?,
        &builder.summarize(target.record())?,
    ))
}

/// A trained per-site ensemble together with what the metamodel needs to
/// know about its site.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub ensemble: EnsembleModel,
    pub summary: SiteSummary,
    pub observation_stats: [f64; 16],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub site_id: String,
    pub reason: String,
}

/// One ensemble per site trained on that site's own data. Sites whose
/// training fails are reported and left out.
pub fn train_source_models(
    sites: &[&SiteRecord],
    builder: &MetaFeatureBuilder,
    settings: &TrainingSettings,
    n_members: usize,
    seed: u64,
) -> (BTreeMap<String, SourceModel>, Vec<SourceFailure>) {
    let root = Rng::new(seed);
    let results: Vec<(String, Result<SourceModel>)> = sites
        .par_iter()
        .map(|s| {
            let r = (|| {
                let site_seed = root.child_labeled(&s.site_id).seed();
                Ok(SourceModel {
                    ensemble: train_ensemble(&[*s], &builder.driver_spec, settings, n_members, site_seed)?,
                    summary: builder.summarize(s)?,
                    observation_stats: observation_stats(s)?,
                })
            })();
            (s.site_id.clone(), r)
        })
        .collect();
    let mut models = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(m) => {
                models.insert(id, m);
            }
            Err(e) => {
                log::warn!("source model for {id} failed: {e}");
                failures.push(SourceFailure { site_id: id, reason: e.to_string() });
            }
        }
    }
    (models, failures)
}

/// Pairwise RMSE (°C) of each source applied to each other site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferMatrix {
    pub entries: BTreeMap<(String, String), f64>,
}

impl TransferMatrix {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source: &str, target: &str) -> Option<f64> {
        self.entries.get(&(source.to_string(), target.to_string())).copied()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["source_id", "target_id", "rmse"])?;
        for ((s, t), v) in &self.entries {
            out.write_record([s.as_str(), t.as_str(), &format_sig6(*v)])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut entries = BTreeMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |detail: String| Error::Parse {
                file: "transfer matrix".into(),
                line: line as u64 + 2,
                detail,
            };
            if rec.len() != 3 {
                return Err(parse_err("expected 3 fields".into()));
            }
            let v: f64 = rec[2].parse().map_err(|e| parse_err(format!("{e}")))?;
            entries.insert((rec[0].to_string(), rec[1].to_string()), v);
        }
        Ok(Self { entries })
    }
}

fn series_rmse(pred: &[f64], obs: &[Option<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, o) in pred.iter().zip(obs) {
        if let Some(o) = o {
            s += (p - o).powi(2);
            n += 1;
        }
    }
    (s / n as f64).sqrt()
}

/// Score every source on every other site's observations. Inputs are
/// normalized with the source's own statistics.
pub fn build_transfer_matrix(sources: &BTreeMap<String, SourceModel>, sites: &[&SiteRecord]) -> Result<TransferMatrix> {
    let pairs: Vec<(&String, &SourceModel, &SiteRecord)> = sources
        .iter()
        .flat_map(|(id, m)| sites.iter().filter(move |t| &t.site_id != id).map(move |t| (id, m, *t)))
        .collect();
    let rows: Vec<Result<((String, String), f64)>> = pairs
        .par_iter()
        .map(|(id, m, t)| {
            let pred = m.ensemble.predict_site(t)?;
            Ok((((*id).clone(), t.site_id.clone()), series_rmse(&pred, &t.water_temp)))
        })
        .collect();
    Ok(TransferMatrix { entries: rows.into_iter().collect::<Result<_>>()? })
}

/// Metamodel training rows, one per transfer-matrix entry, in matrix order.
pub fn meta_training_data(
    matrix: &TransferMatrix,
    sources: &BTreeMap<String, SourceModel>,
    targets: &BTreeMap<String, SiteSummary>,
    builder: &MetaFeatureBuilder,
) -> Result<FeatureMatrix> {
    let mut rows = Vec::with_capacity(matrix.len());
    let mut y = Vec::with_capacity(matrix.len());
    for ((s, t), v) in &matrix.entries {
        let src = sources.get(s).ok_or_else(|| Error::MissingInput(format!("no source model {s}")))?;
        let tgt = targets.get(t).ok_or_else(|| Error::MissingInput(format!("no summary of site {t}")))?;
        rows.push(builder.build(&src.summary, &src.observation_stats, tgt));
        y.push(*v);
    }
    FeatureMatrix::from_rows(builder.names(), &rows, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetamodelConfig {
    pub model: GbrtConfig,
    pub selection_model: GbrtConfig,
    pub rfe: RfeConfig,
    pub feature_selection: bool,
}

impl Default for MetamodelConfig {
    fn default() -> Self {
        Self {
            model: GbrtConfig::METAMODEL,
            selection_model: GbrtConfig::SELECTION,
            rfe: RfeConfig::default(),
            feature_selection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metamodel {
    pub model: GbrtModel,
    /// Full meta-feature layout the selection was made from.
    pub all_features: Vec<String>,
    pub selected: Vec<usize>,
    pub selection: Option<RfeResult>,
}

impl Metamodel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let x: Vec<f64> = self.selected.iter().map(|&j| features[j]).collect();
        self.model.predict_row(&x)
    }
}

/// Fit the transfer-RMSE regressor, optionally after RFE feature selection.
pub fn train_metamodel(data: &FeatureMatrix, config: &MetamodelConfig, rng: &mut Rng) -> Result<Metamodel> {
    let (selected, selection) = if config.feature_selection && data.n_rows() >= config.rfe.folds {
        let r = rfe_cv(data, &config.selection_model, &config.rfe, &mut rng.child(0))?;
        let idx = r
            .selected
            .iter()
            .map(|n| data.feature_index(n).expect("selected from data"))
            .collect();
        (idx, Some(r))
    } else {
        ((0..data.n_features()).collect::<Vec<_>>(), None)
    };
    let model = fit_gbrt(&data.select_features(&selected), &config.model, &mut rng.child(1))?;
    Ok(Metamodel { model, all_features: data.names.clone(), selected, selection })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenSource {
    pub site_id: String,
    pub predicted_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlPrediction {
    pub predictions: Vec<f64>,
    pub chosen: Vec<ChosenSource>,
}

/// Sources ordered by predicted transfer RMSE (ties by site id).
pub fn rank_sources(
    target: &UnmonitoredSite,
    metamodel: &Metamodel,
    sources: &BTreeMap<String, SourceModel>,
    builder: &MetaFeatureBuilder,
) -> Result<Vec<ChosenSource>> {
    let t = builder.summarize(target.record())?;
    let mut ranked: Vec<ChosenSource> = sources
        .iter()
        .filter(|(id, _)| id.as_str() != target.site_id())
        .map(|(id, m)| ChosenSource {
            site_id: id.clone(),
            predicted_rmse: metamodel.predict(&builder.build(&m.summary, &m.observation_stats, &t)),
        })
        .collect();
    ranked.sort_by(|a, b| a.predicted_rmse.total_cmp(&b.predicted_rmse).then_with(|| a.site_id.cmp(&b.site_id)));
    Ok(ranked)
}

/// Average the full ensembles of the `k` sources with the lowest predicted
/// transfer RMSE.
pub fn predict_unmonitored(
    target: &UnmonitoredSite,
    metamodel: &Metamodel,
    sources: &BTreeMap<String, SourceModel>,
    builder: &MetaFeatureBuilder,
    k: usize,
) -> Result<MtlPrediction> {
    if sources.is_empty() {
        return Err(Error::Empty("no trained source models".into()));
    }
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let mut chosen = rank_sources(target, metamodel, sources, builder)?;
    chosen.truncate(k);
    let per: Vec<Vec<f64>> = chosen
        .iter()
        .map(|c| sources[&c.site_id].ensemble.predict_site(target.record()))
        .collect::<Result<_>>()?;
    Ok(MtlPrediction { predictions: mean_of_members(&per), chosen })
}

/// Everything needed to predict unmonitored sites bottom-up.
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub builder: MetaFeatureBuilder,
    pub sources: BTreeMap<String, SourceModel>,
    pub metamodel: Metamodel,
    pub matrix: TransferMatrix,
    pub failures: Vec<SourceFailure>,
    pub top_k: usize,
}

impl MtlModel {
    pub fn predict(&self, target: &UnmonitoredSite) -> Result<MtlPrediction> {
        predict_unmonitored(target, &self.metamodel, &self.sources, &self.builder, self.top_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlSettings {
    pub ensemble_size: usize,
    pub top_k: usize,
    pub metamodel: MetamodelConfig,
}

impl Default for MtlSettings {
    fn default() -> Self {
        Self { ensemble_size: 5, top_k: DEFAULT_TOP_K, metamodel: MetamodelConfig::default() }
    }
}

/// Source models, transfer matrix and metamodel from the training sites.
pub fn fit_mtl(
    sites: &[&SiteRecord],
    attribute_names: Vec<String>,
    training: &TrainingSettings,
    settings: &MtlSettings,
    seed: u64,
) -> Result<MtlModel> {
    let builder = MetaFeatureBuilder::new(attribute_names);
    let root = Rng::new(seed);
    let (sources, failures) = train_source_models(sites, &builder, training, settings.ensemble_size, root.child(0).seed());
    if sources.len() < 2 {
        return Err(Error::Insufficient(format!("{} usable source models; need ≥ 2", sources.len())));
    }
    let usable: Vec<&SiteRecord> = sites.iter().copied().filter(|s| sources.contains_key(&s.site_id)).collect();
    let matrix = build_transfer_matrix(&sources, &usable)?;
    let targets: BTreeMap<String, SiteSummary> =
        sources.iter().map(|(id, m)| (id.clone(), m.summary.clone())).collect();
    let data = meta_training_data(&matrix, &sources, &targets, &builder)?;
    let metamodel = train_metamodel(&data, &settings.metamodel, &mut root.child(1))?;
    Ok(MtlModel { builder, sources, metamodel, matrix, failures, top_k: settings.top_k })
}
