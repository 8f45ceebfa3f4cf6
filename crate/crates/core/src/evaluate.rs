//! Per-site metrics, aggregation, Wilcoxon signed-rank comparisons,
//! permutation importance and day-of-year error breakdowns.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data_model::{SiteRecord, DISCHARGE_FEATURES, LOCATION_FEATURES, METEO_FEATURES};
use crate::error::{Error, Result};
use crate::numerics::{fractional_ranks, lower_median, mean, population_std, Rng};
use crate::trainer::EnsembleModel;

/// Predictions of one model at one site, aligned with its dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSeries {
    pub site_id: String,
    pub dates: Vec<NaiveDate>,
    pub observations: Vec<Option<f64>>,
    pub predictions: Vec<f64>,
}

impl SiteSeries {
    pub fn from_site(site: &SiteRecord, predictions: Vec<f64>) -> Self {
        Self {
            site_id: site.site_id.clone(),
            dates: site.dates.clone(),
            observations: site.water_temp.clone(),
            predictions,
        }
    }

    /// (date index, observation, prediction) for observed dates.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.observations
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|o| (i, o, self.predictions[i])))
    }

    fn check(&self) -> Result<()> {
        if self.dates.len() != self.observations.len() || self.dates.len() != self.predictions.len() {
            return Err(Error::Dimension(format!(
                "site {} predictions not aligned with dates",
                self.site_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub site_id: String,
    pub rmse: f64,
    pub mean_bias: f64,
    pub rmse_warm10: f64,
    pub n_obs: usize,
    pub per_year_rmse: BTreeMap<i32, f64>,
}

fn rmse_of(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (o, p) in pairs {
        s += (p - o).powi(2);
        n += 1;
    }
    (s / n as f64).sqrt()
}

/// RMSE, signed bias and warmest-decile RMSE over observed dates.
pub fn site_metrics(series: &SiteSeries) -> Result<SiteMetrics> {
    series.check()?;
    let pairs: Vec<(usize, f64, f64)> = series.pairs().collect();
    if pairs.is_empty() {
        return Err(Error::Empty(format!("site {} has no observations", series.site_id)));
    }
    let n = pairs.len();
    let rmse = rmse_of(pairs.iter().map(|&(_, o, p)| (o, p)));
    let mean_bias = pairs.iter().map(|&(_, o, p)| p - o).sum::<f64>() / n as f64;
    // warmest ceil(n/10) observations; the stable sort keeps date order on ties
    let mut by_temp = pairs.clone();
    by_temp.sort_by(|a, b| b.1.total_cmp(&a.1));
    let k = n.div_ceil(10);
    let rmse_warm10 = rmse_of(by_temp[..k].iter().map(|&(_, o, p)| (o, p)));
    let mut years: BTreeMap<i32, Vec<(f64, f64)>> = BTreeMap::new();
    for &(i, o, p) in &pairs {
        years.entry(series.dates[i].year()).or_default().push((o, p));
    }
    Ok(SiteMetrics {
        site_id: series.site_id.clone(),
        rmse,
        mean_bias,
        rmse_warm10,
        n_obs: n,
        per_year_rmse: years
            .into_iter()
            .map(|(y, v)| (y, rmse_of(v.into_iter())))
            .collect(),
    })
}

/// Cross-site summary: lower medians, population standard deviations and means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_sites: usize,
    pub median_rmse: f64,
    pub std_rmse: f64,
    pub median_bias: f64,
    pub std_bias: f64,
    pub median_rmse_warm10: f64,
    pub std_rmse_warm10: f64,
    pub mean_rmse: f64,
    pub mean_bias: f64,
    pub mean_rmse_warm10: f64,
    /// Sites with RMSE strictly below 2 °C.
    pub n_sites_rmse_below_2: usize,
}

pub fn aggregate(metrics: &[SiteMetrics]) -> Result<Summary> {
    if metrics.is_empty() {
        return Err(Error::Empty("no site metrics to aggregate".into()));
    }
    let rmse: Vec<f64> = metrics.iter().map(|m| m.rmse).collect();
    let bias: Vec<f64> = metrics.iter().map(|m| m.mean_bias).collect();
    let warm: Vec<f64> = metrics.iter().map(|m| m.rmse_warm10).collect();
    Ok(Summary {
        n_sites: metrics.len(),
        median_rmse: lower_median(&rmse),
        std_rmse: population_std(&rmse),
        median_bias: lower_median(&bias),
        std_bias: population_std(&bias),
        median_rmse_warm10: lower_median(&warm),
        std_rmse_warm10: population_std(&warm),
        mean_rmse: mean(&rmse),
        mean_bias: mean(&bias),
        mean_rmse_warm10: mean(&warm),
        n_sites_rmse_below_2: rmse.iter().filter(|r| **r < 2.0).count(),
    })
}

/// Largest sample size evaluated with the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WilcoxonOutcome {
    Decision {
        /// Sum of ranks of positive differences.
        statistic: f64,
        p_value: f64,
        n: usize,
        exact: bool,
    },
    /// Every paired difference was zero.
    NoDecision,
}

impl WilcoxonOutcome {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            Self::Decision { p_value, .. } => Some(*p_value),
            Self::NoDecision => None,
        }
    }
}

/// Two-sided Wilcoxon signed-rank test on `a − b`. Zero differences are
/// dropped; ties receive average ranks.
pub fn wilcoxon_two_sided(a: &[f64], b: &[f64]) -> Result<WilcoxonOutcome> {
    if a.len() != b.len() {
        return Err(Error::Dimension("paired samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonOutcome::NoDecision);
    }
    let ranks = fractional_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (p, exact) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_p(&ranks, w), true)
    } else {
        (normal_p(&ranks, w), false)
    };
    Ok(WilcoxonOutcome::Decision {
        statistic: w,
        p_value: p.min(1.0),
        n,
        exact,
    })
}

/// Exact null distribution by counting sign assignments over doubled
/// (integer) ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    2.0 * lower.min(upper)
}

/// Normal approximation with tie-corrected variance, no continuity correction.
fn normal_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mu) / var.sqrt();
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SignificantBetter,
    NoSignificance,
    SignificantWorse,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SignificantBetter => "significant_better",
            Self::NoSignificance => "no_significance",
            Self::SignificantWorse => "significant_worse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteComparison {
    pub site_id: String,
    pub p_value: Option<f64>,
    pub category: Category,
    /// Model RMSE − baseline RMSE.
    pub delta_rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub count: usize,
    pub mean_delta_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub sites: Vec<SiteComparison>,
    pub categories: BTreeMap<Category, CategorySummary>,
}

/// Per-site significance of a model against a baseline using paired absolute
/// errors; direction from the sign of the RMSE difference.
pub fn compare_to_baseline(model: &[SiteSeries], baseline: &[SiteSeries], alpha: f64) -> Result<ComparisonResult> {
    let base: BTreeMap<&str, &SiteSeries> = baseline.iter().map(|s| (s.site_id.as_str(), s)).collect();
    let mut sites = Vec::with_capacity(model.len());
    for m in model {
        let b = base
            .get(m.site_id.as_str())
            .ok_or_else(|| Error::MissingInput(format!("baseline lacks site {}", m.site_id)))?;
        if b.dates != m.dates || b.observations != m.observations {
            return Err(Error::Dimension(format!(
                "site {} differs between model and baseline",
                m.site_id
            )));
        }
        let (ea, eb): (Vec<f64>, Vec<f64>) = m
            .pairs()
            .map(|(i, o, p)| ((p - o).abs(), (b.predictions[i] - o).abs()))
            .unzip();
        let p = wilcoxon_two_sided(&ea, &eb)?.p_value();
        let delta = site_metrics(m)?.rmse - site_metrics(b)?.rmse;
        let category = match p {
            Some(p) if p < alpha && delta < 0.0 => Category::SignificantBetter,
            Some(p) if p < alpha && delta > 0.0 => Category::SignificantWorse,
            _ => Category::NoSignificance,
        };
        sites.push(SiteComparison {
            site_id: m.site_id.clone(),
            p_value: p,
            category,
            delta_rmse: delta,
        });
    }
    let mut categories = BTreeMap::new();
    for c in [Category::SignificantBetter, Category::NoSignificance, Category::SignificantWorse] {
        let d: Vec<f64> = sites.iter().filter(|s| s.category == c).map(|s| s.delta_rmse).collect();
        categories.insert(
            c,
            CategorySummary {
                count: d.len(),
                mean_delta_rmse: (!d.is_empty()).then(|| mean(&d)),
            },
        );
    }
    Ok(ComparisonResult { sites, categories })
}

/// Anything that maps per-date raw input rows of one site to per-date °C
/// predictions.
pub trait SequencePredictor {
    fn feature_names(&self) -> Vec<String>;
    fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>>;
    /// Per-member predictions; a single model is its own only member.
    fn member_predictions(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.predict_rows(rows)?])
    }
}

impl SequencePredictor for EnsembleModel {
    fn feature_names(&self) -> Vec<String> {
        EnsembleModel::feature_names(self)
    }

    fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.predict_raw(rows)
    }

    fn member_predictions(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        EnsembleModel::member_predictions(self, rows)
    }
}

/// Raw inputs and observations of one test site.
#[derive(Debug, Clone, PartialEq)]
pub struct TestInputs {
    pub site_id: String,
    pub rows: Vec<Vec<f64>>,
    pub observations: Vec<Option<f64>>,
}

/// Features permuted together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub features: Vec<String>,
}

/// Grouping used for importance reports: air temperatures, discharge,
/// precipitation and static attributes are combined; every other input
/// stands alone.
pub fn default_feature_groups(feature_names: &[String]) -> Vec<FeatureGroup> {
    let combined: [(&str, &[&str]); 3] = [
        ("combined_air_temp", &["tmax", "tmean", "tmin"]),
        ("combined_discharge", &DISCHARGE_FEATURES),
        ("combined_precipitation", &["prcp", "log_prcp"]),
    ];
    let mut groups = Vec::new();
    let mut used: Vec<&str> = Vec::new();
    for (name, members) in combined {
        let present: Vec<String> = members
            .iter()
            .filter(|m| feature_names.iter().any(|f| f == *m))
            .map(|m| m.to_string())
            .collect();
        if !present.is_empty() {
            used.extend(members.iter());
            groups.push(FeatureGroup { name: name.into(), features: present });
        }
    }
    let dynamic: Vec<&str> = METEO_FEATURES
        .iter()
        .chain(&LOCATION_FEATURES)
        .chain(&DISCHARGE_FEATURES)
        .copied()
        .collect();
    let attributes: Vec<String> = feature_names
        .iter()
        .filter(|f| !dynamic.contains(&f.as_str()))
        .cloned()
        .collect();
    for f in feature_names {
        if dynamic.contains(&f.as_str()) && !used.contains(&f.as_str()) {
            groups.push(FeatureGroup { name: f.clone(), features: vec![f.clone()] });
        }
    }
    if !attributes.is_empty() {
        groups.push(FeatureGroup { name: "combined_attributes".into(), features: attributes });
    }
    groups
}

fn pooled_rmse(per_site: &[Vec<f64>], tests: &[TestInputs]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (pred, t) in per_site.iter().zip(tests) {
        for (p, o) in pred.iter().zip(&t.observations) {
            if let Some(o) = o {
                s += (p - o).powi(2);
                n += 1;
            }
        }
    }
    (s / n as f64).sqrt()
}

fn predict_all<P: SequencePredictor + ?Sized>(model: &P, tests: &[TestInputs]) -> Result<Vec<Vec<f64>>> {
    tests.iter().map(|t| model.predict_rows(&t.rows)).collect()
}

/// RMSE over all pooled test observations.
pub fn pooled_test_rmse<P: SequencePredictor + ?Sized>(model: &P, tests: &[TestInputs]) -> Result<f64> {
    Ok(pooled_rmse(&predict_all(model, tests)?, tests))
}

/// Increase of pooled test RMSE when the group's columns are shuffled across
/// all pooled test timesteps (one shared permutation per repeat), averaged
/// over repeats.
pub fn permutation_importance<P: SequencePredictor + ?Sized>(
    model: &P,
    tests: &[TestInputs],
    group: &FeatureGroup,
    repeats: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let names = model.feature_names();
    let cols = group
        .features
        .iter()
        .map(|f| names.iter().position(|n| n == f).ok_or_else(|| Error::UnknownFeature(f.clone())))
        .collect::<Result<Vec<_>>>()?;
    if repeats == 0 {
        return Err(Error::Config("permutation importance needs at least one repeat".into()));
    }
    if tests.iter().all(|t| t.observations.iter().all(Option::is_none)) {
        return Err(Error::Empty("no test observations".into()));
    }
    let baseline = pooled_test_rmse(model, tests)?;
    let pooled: Vec<(usize, usize)> = tests
        .iter()
        .enumerate()
        .flat_map(|(s, t)| (0..t.rows.len()).map(move |i| (s, i)))
        .collect();
    let mut total = 0.0;
    for _ in 0..repeats {
        let perm = rng.permutation(pooled.len());
        let mut shuffled: Vec<TestInputs> = tests.to_vec();
        for (dst, &src) in pooled.iter().zip(&perm) {
            let (ss, si) = pooled[src];
            for &c in &cols {
                shuffled[dst.0].rows[dst.1][c] = tests[ss].rows[si][c];
            }
        }
        total += pooled_test_rmse(model, &shuffled)? - baseline;
    }
    Ok(total / repeats as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub group: String,
    pub delta_rmse: f64,
    pub above_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub baseline_rmse: f64,
    /// Standard deviation of the pooled RMSE of individual ensemble members.
    pub threshold: f64,
    /// Sorted by decreasing importance, ties by name.
    pub entries: Vec<ImportanceEntry>,
}

pub fn importance_report<P: SequencePredictor + ?Sized>(
    model: &P,
    tests: &[TestInputs],
    groups: &[FeatureGroup],
    repeats: usize,
    rng: &mut Rng,
) -> Result<ImportanceReport> {
    let mut per_member: Vec<Vec<Vec<f64>>> = Vec::new();
    for t in tests {
        per_member.push(model.member_predictions(&t.rows)?);
    }
    let n_members = per_member.first().map_or(0, Vec::len);
    let member_rmse: Vec<f64> = (0..n_members)
        .map(|k| {
            let preds: Vec<Vec<f64>> = per_member.iter().map(|m| m[k].clone()).collect();
            pooled_rmse(&preds, tests)
        })
        .collect();
    let threshold = population_std(&member_rmse);
    let mut entries = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let d = permutation_importance(model, tests, group, repeats, &mut rng.child(g as u64))?;
        entries.push(ImportanceEntry {
            group: group.name.clone(),
            delta_rmse: d,
            above_threshold: d > threshold,
        });
    }
    entries.sort_by(|a, b| b.delta_rmse.total_cmp(&a.delta_rmse).then_with(|| a.group.cmp(&b.group)));
    Ok(ImportanceReport {
        baseline_rmse: pooled_test_rmse(model, tests)?,
        threshold,
        entries,
    })
}

/// Day of year in 1..=366 with 29 February mapped to 366 and every other
/// date numbered as in a non-leap year.
pub fn day_of_year(date: NaiveDate) -> u32 {
    if date.month() == 2 && date.day() == 29 {
        return 366;
    }
    NaiveDate::from_ymd_opt(2001, date.month(), date.day())
        .expect("valid non-leap date")
        .ordinal()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalBreakdown {
    /// Median over sites of each site's RMSE on that day of year.
    pub doy_median_rmse: BTreeMap<u32, f64>,
    /// (site, calendar year, RMSE)
    pub site_year_rmse: Vec<(String, i32, f64)>,
}

pub fn temporal_breakdown(series: &[SiteSeries]) -> Result<TemporalBreakdown> {
    let mut doy: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut site_year_rmse = Vec::new();
    for s in series {
        s.check()?;
        let mut per_doy: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
        let mut per_year: BTreeMap<i32, Vec<(f64, f64)>> = BTreeMap::new();
        for (i, o, p) in s.pairs() {
            per_doy.entry(day_of_year(s.dates[i])).or_default().push((o, p));
            per_year.entry(s.dates[i].year()).or_default().push((o, p));
        }
        for (d, v) in per_doy {
            doy.entry(d).or_default().push(rmse_of(v.into_iter()));
        }
        for (y, v) in per_year {
            site_year_rmse.push((s.site_id.clone(), y, rmse_of(v.into_iter())));
        }
    }
    Ok(TemporalBreakdown {
        doy_median_rmse: doy.into_iter().map(|(d, v)| (d, lower_median(&v))).collect(),
        site_year_rmse,
    })
}

/// Half-width in days of the smoothing window of the climatology baseline.
pub const CLIMATOLOGY_WINDOW: u32 = 7;

fn circular_doy_distance(a: u32, b: u32) -> u32 {
    // leap day sits next to 28 February
    let pos = |d: u32| if d == 366 { 59 } else { d };
    let d = pos(a).abs_diff(pos(b));
    d.min(365 - d)
}

/// Day-of-year climatology of a site's own observations: each date gets the
/// mean of observations from the *other* calendar years within ±7 days of
/// its day of year. Falls back to the mean of the other years, then to the
/// site mean.
pub fn climatology_baseline(site: &SiteRecord) -> Result<Vec<f64>> {
    let obs: Vec<(u32, i32, f64)> = site
        .observations()
        .map(|(i, v)| (day_of_year(site.dates[i]), site.dates[i].year(), v))
        .collect();
    if obs.is_empty() {
        return Err(Error::Empty(format!("site {} has no observations", site.site_id)));
    }
    let site_mean = mean(&obs.iter().map(|o| o.2).collect::<Vec<_>>());
    Ok(site
        .dates
        .iter()
        .map(|date| {
            let (d, y) = (day_of_year(*date), date.year());
            let window: Vec<f64> = obs
                .iter()
                .filter(|o| o.1 != y && circular_doy_distance(o.0, d) <= CLIMATOLOGY_WINDOW)
                .map(|o| o.2)
                .collect();
            if !window.is_empty() {
                return mean(&window);
            }
            let other: Vec<f64> = obs.iter().filter(|o| o.1 != y).map(|o| o.2).collect();
            if other.is_empty() {
                site_mean
            } else {
                mean(&other)
            }
        })
        .collect())
}
