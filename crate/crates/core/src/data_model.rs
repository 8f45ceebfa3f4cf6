//! Site records, observation filters, input construction and the
//! train/test and availability splits.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean, population_std, Matrix};

/// Lowest accepted water temperature (°C).
pub const MIN_WATER_TEMP: f64 = -1.0;
/// Highest accepted water temperature (°C).
pub const MAX_WATER_TEMP: f64 = 40.0;
/// Minimum number of observations for a site to be kept at all.
pub const MIN_OBSERVATIONS: usize = 365;
/// Default observation count separating training from test sites.
pub const DEFAULT_THRESHOLD_DATES: usize = 1825;

/// Raw meteorological driver order inside [`SiteRecord::meteo`].
pub const METEO_DRIVERS: [&str; 7] = ["dayl", "tmax", "tmean", "tmin", "swe", "vp", "srad"];
pub const METEO_FEATURES: [&str; 9] = [
    "dayl", "tmax", "tmean", "tmin", "swe", "vp", "srad", "prcp", "log_prcp",
];
pub const LOCATION_FEATURES: [&str; 3] = ["lat", "lon", "elev"];
pub const DISCHARGE_FEATURES: [&str; 2] = ["discharge", "log_discharge"];

/// One monitoring site on a contiguous daily date axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    pub region_code: String,
    pub cluster_id: Option<u32>,
    pub dam_distance_km: Option<f64>,
    pub dates: Vec<NaiveDate>,
    pub water_temp: Vec<Option<f64>>,
    /// Per date: day length (s), tmax, tmean, tmin (°C), swe (kg/m²), vp (Pa), srad (W/m²).
    pub meteo: Vec<[f64; 7]>,
    /// mm/day
    pub precip: Vec<f64>,
    /// cubic feet per second; `None` when the site has no discharge series.
    pub discharge: Option<Vec<Option<f64>>>,
    pub attributes: BTreeMap<String, f64>,
}

impl SiteRecord {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.water_temp.iter().filter(|v| v.is_some()).count()
    }

    /// `(date index, temperature)` for every observed date.
    pub fn observations(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.water_temp
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|t| (i, t)))
    }

    /// True when a discharge value exists on every modeled date.
    pub fn has_discharge(&self) -> bool {
        self.discharge
            .as_ref()
            .is_some_and(|q| !q.is_empty() && q.iter().all(Option::is_some))
    }

    pub fn has_attributes<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> bool {
        names.into_iter().all(|n| self.attributes.contains_key(n))
    }

    pub fn tmean(&self, idx: usize) -> f64 {
        self.meteo[idx][2]
    }
}

/// Why a site was removed by [`filter_observations`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rejection {
    OutOfRange { date: NaiveDate, value: f64 },
    TooFewObservations { count: usize },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::OutOfRange { date, value } => {
                write!(f, "out-of-range water temperature {value} on {date}")
            }
            Rejection::TooFewObservations { count } => {
                write!(f, "too few observations ({count} < {MIN_OBSERVATIONS})")
            }
        }
    }
}

/// Site-level quality filter: any reading outside [-1, 40] °C or fewer than
/// 365 observations rejects the whole site. Accepted sites pass unchanged.
pub fn filter_observations(raw: SiteRecord) -> std::result::Result<SiteRecord, Rejection> {
    for (i, t) in raw.observations() {
        if !(MIN_WATER_TEMP..=MAX_WATER_TEMP).contains(&t) {
            return Err(Rejection::OutOfRange {
                date: raw.dates[i],
                value: t,
            });
        }
    }
    let count = raw.observed_count();
    if count < MIN_OBSERVATIONS {
        return Err(Rejection::TooFewObservations { count });
    }
    Ok(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    #[default]
    None,
    Full,
    Expert,
    ZscoreCategories,
}

/// Which input blocks a model consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub use_meteorology: bool,
    pub use_location: bool,
    pub use_discharge: bool,
    pub attribute_mode: AttributeMode,
    pub attribute_names: Vec<String>,
    pub category_map: Option<BTreeMap<String, String>>,
}

impl FeatureSpec {
    pub fn meteorology() -> Self {
        Self {
            use_meteorology: true,
            use_location: false,
            use_discharge: false,
            attribute_mode: AttributeMode::None,
            attribute_names: Vec::new(),
            category_map: None,
        }
    }

    pub fn with_location(mut self) -> Self {
        self.use_location = true;
        self
    }

    pub fn with_discharge(mut self) -> Self {
        self.use_discharge = true;
        self
    }

    pub fn with_attributes(mut self, mode: AttributeMode, names: Vec<String>) -> Self {
        self.attribute_mode = mode;
        self.attribute_names = names;
        self
    }

    pub fn with_categories(mut self, map: BTreeMap<String, String>) -> Self {
        let cats: BTreeSet<String> = map.values().cloned().collect();
        self.attribute_mode = AttributeMode::ZscoreCategories;
        self.attribute_names = cats.into_iter().collect();
        self.category_map = Some(map);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.attribute_mode == AttributeMode::ZscoreCategories && self.category_map.is_none() {
            return Err(Error::Config(
                "z-score category mode requires a category map".into(),
            ));
        }
        if self.attribute_mode == AttributeMode::None && !self.attribute_names.is_empty() {
            return Err(Error::Config(
                "attribute names given with attribute mode `none`".into(),
            ));
        }
        Ok(())
    }

    /// Attribute names in lexicographic order; empty when attributes are unused.
    pub fn sorted_attributes(&self) -> Vec<String> {
        if self.attribute_mode == AttributeMode::None {
            return Vec::new();
        }
        let set: BTreeSet<&String> = self.attribute_names.iter().collect();
        set.into_iter().cloned().collect()
    }

    /// Ordered feature names of one per-date input vector.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.use_meteorology {
            names.extend(METEO_FEATURES.iter().map(|s| s.to_string()));
        }
        if self.use_location {
            names.extend(LOCATION_FEATURES.iter().map(|s| s.to_string()));
        }
        if self.use_discharge {
            names.extend(DISCHARGE_FEATURES.iter().map(|s| s.to_string()));
        }
        names.extend(self.sorted_attributes());
        names
    }

    pub fn input_size(&self) -> usize {
        self.feature_names().len()
    }

    /// Names of features that come from static attributes.
    pub fn attribute_features(&self) -> Vec<String> {
        self.sorted_attributes()
    }
}

/// ln(1 + x) of a nonnegative raw value.
pub fn log_transform(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// Per-date input vectors in [`FeatureSpec::feature_names`] order.
pub fn build_dynamic_inputs(site: &SiteRecord, spec: &FeatureSpec) -> Result<Vec<Vec<f64>>> {
    let attrs = spec.sorted_attributes();
    let mut static_values = Vec::with_capacity(attrs.len());
    for name in &attrs {
        let v = site.attributes.get(name).ok_or_else(|| {
            Error::MissingInput(format!("site {} lacks attribute {name}", site.site_id))
        })?;
        static_values.push(*v);
    }
    let discharge = if spec.use_discharge {
        Some(site.discharge.as_ref().ok_or_else(|| {
            Error::MissingInput(format!("site {} has no discharge series", site.site_id))
        })?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(site.len());
    for i in 0..site.len() {
        let mut row = Vec::with_capacity(spec.input_size());
        if spec.use_meteorology {
            row.extend_from_slice(&site.meteo[i]);
            let p = site.precip[i];
            row.push(p);
            row.push(log_transform(p));
        }
        if spec.use_location {
            row.extend_from_slice(&[site.latitude, site.longitude, site.elevation]);
        }
        if let Some(q) = discharge {
            let v = q.get(i).copied().flatten().ok_or_else(|| {
                Error::MissingInput(format!(
                    "site {} lacks discharge on {}",
                    site.site_id, site.dates[i]
                ))
            })?;
            row.push(v);
            row.push(log_transform(v));
        }
        row.extend_from_slice(&static_values);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingInput(format!(
                "non-finite driver at site {} on {}",
                site.site_id, site.dates[i]
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Dam-distance transform: −999 (no dam) → 0, d > 0 → 1/d, 0 → 0. Only the
/// configured names are touched.
pub fn transform_dam_distances(
    attributes: &BTreeMap<String, f64>,
    dam_names: &[String],
) -> Result<BTreeMap<String, f64>> {
    let mut out = attributes.clone();
    for name in dam_names {
        if let Some(v) = out.get_mut(name) {
            *v = if *v == -999.0 {
                0.0
            } else if *v > 0.0 {
                1.0 / *v
            } else if *v == 0.0 {
                0.0
            } else {
                return Err(Error::InvalidAttribute {
                    name: name.clone(),
                    reason: format!("negative distance {v}"),
                });
            };
        }
    }
    Ok(out)
}

/// Training/test partition by observation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataSplit {
    pub training_sites: BTreeSet<String>,
    pub test_sites: BTreeSet<String>,
    pub threshold_dates: usize,
}

pub fn split_train_test(sites: &[SiteRecord], threshold_dates: usize) -> DataSplit {
    let mut split = DataSplit {
        threshold_dates,
        ..Default::default()
    };
    for s in sites {
        let n = s.observed_count();
        if n >= threshold_dates {
            split.training_sites.insert(s.site_id.clone());
        } else if n >= MIN_OBSERVATIONS {
            split.test_sites.insert(s.site_id.clone());
        }
    }
    split
}

/// Sites that carry every input block the feature set requires.
pub fn availability_group<'a>(sites: &'a [SiteRecord], spec: &FeatureSpec) -> Vec<&'a SiteRecord> {
    let attrs = spec.sorted_attributes();
    sites
        .iter()
        .filter(|s| !spec.use_discharge || s.has_discharge())
        .filter(|s| {
            if spec.attribute_mode == AttributeMode::ZscoreCategories {
                // Category scores are derived from the mapped raw attributes.
                spec.category_map
                    .as_ref()
                    .is_some_and(|m| s.has_attributes(m.keys()) || s.has_attributes(&attrs))
            } else {
                s.has_attributes(&attrs)
            }
        })
        .collect()
}

/// Site × attribute table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub site_ids: Vec<String>,
    pub names: Vec<String>,
    pub values: Matrix,
}

impl AttributeTable {
    pub fn from_sites(sites: &[&SiteRecord], names: &[String]) -> Result<Self> {
        let mut rows = Vec::with_capacity(sites.len());
        for s in sites {
            let mut row = Vec::with_capacity(names.len());
            for n in names {
                row.push(*s.attributes.get(n).ok_or_else(|| {
                    Error::MissingInput(format!("site {} lacks attribute {n}", s.site_id))
                })?);
            }
            rows.push(row);
        }
        let values = if rows.is_empty() {
            Matrix::zeros(0, names.len())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(Self {
            site_ids: sites.iter().map(|s| s.site_id.clone()).collect(),
            names: names.to_vec(),
            values,
        })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.values.rows()).map(|i| self.values.get(i, j)).collect()
    }
}

/// Output of [`aggregate_zscore_categories`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScores {
    pub table: AttributeTable,
    /// Zero-variance attributes left out of their category average.
    pub excluded: Vec<String>,
}

/// Z-score each mapped attribute across sites, then average within category.
/// Categories are emitted in lexicographic order.
pub fn aggregate_zscore_categories(
    table: &AttributeTable,
    category_map: &BTreeMap<String, String>,
) -> Result<CategoryScores> {
    let n_sites = table.site_ids.len();
    let mut members: BTreeMap<&String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for (attr, cat) in category_map {
        let j = table
            .names
            .iter()
            .position(|n| n == attr)
            .ok_or_else(|| Error::MissingInput(format!("mapped attribute {attr} not in table")))?;
        let col = table.column(j);
        let m = mean(&col);
        let sd = population_std(&col);
        if !(sd > 0.0) {
            log::warn!("attribute {attr} has zero variance; excluded from category {cat}");
            excluded.push(attr.clone());
            continue;
        }
        members
            .entry(cat)
            .or_default()
            .push(col.iter().map(|v| (v - m) / sd).collect());
    }
    let names: Vec<String> = members.keys().map(|c| (*c).clone()).collect();
    let mut values = Matrix::zeros(n_sites, names.len());
    for (k, cols) in members.values().enumerate() {
        for i in 0..n_sites {
            let s: f64 = cols.iter().map(|c| c[i]).sum();
            values.set(i, k, s / cols.len() as f64);
        }
    }
    Ok(CategoryScores {
        table: AttributeTable {
            site_ids: table.site_ids.clone(),
            names,
            values,
        },
        excluded,
    })
}

/// Replace each site's attributes by its category scores (keyed by category name).
pub fn apply_category_scores(sites: &[SiteRecord], scores: &AttributeTable) -> Vec<SiteRecord> {
    let index: BTreeMap<&String, usize> = scores
        .site_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    sites
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.attributes = match index.get(&s.site_id) {
                Some(&i) => scores
                    .names
                    .iter()
                    .enumerate()
                    .map(|(k, n)| (n.clone(), scores.values.get(i, k)))
                    .collect(),
                None => BTreeMap::new(),
            };
            out
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn site_with_obs(id: &str, n_days: usize, observed: usize) -> SiteRecord {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..n_days)
            .map(|i| start + chrono::Duration::days(i as i64))
            .collect();
        let water_temp = (0..n_days)
            .map(|i| (i < observed).then_some(10.0 + (i % 20) as f64))
            .collect();
        SiteRecord {
            site_id: id.into(),
            latitude: 40.0,
            longitude: -100.0,
            elevation: 300.0,
            region_code: "10".into(),
            cluster_id: None,
            dam_distance_km: None,
            meteo: vec![[40000.0, 20.0, 15.0, 10.0, 0.0, 900.0, 250.0]; n_days],
            precip: vec![0.0; n_days],
            discharge: None,
            attributes: BTreeMap::new(),
            dates,
            water_temp,
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let mut s = site_with_obs("a", 400, 400);
        s.water_temp[17] = Some(41.2);
        assert!(matches!(
            filter_observations(s),
            Err(Rejection::OutOfRange { value, .. }) if value == 41.2
        ));
    }

    #[test]
    fn observation_count_boundary() {
        assert!(filter_observations(site_with_obs("a", 400, 365)).is_ok());
        assert_eq!(
            filter_observations(site_with_obs("a", 400, 364)),
            Err(Rejection::TooFewObservations { count: 364 })
        );
    }

    #[test]
    fn filter_idempotent() {
        let s = site_with_obs("a", 400, 380);
        let once = filter_observations(s).unwrap();
        assert_eq!(filter_observations(once.clone()).unwrap(), once);
    }

    #[test]
    fn log_features() {
        let mut s = site_with_obs("a", 3, 3);
        s.discharge = Some(vec![Some(std::f64::consts::E - 1.0); 3]);
        let spec = FeatureSpec::meteorology().with_discharge();
        let rows = build_dynamic_inputs(&s, &spec).unwrap();
        assert_eq!(rows[0][8], 0.0);
        assert!((rows[0][10] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_feature_count() {
        let mut s = site_with_obs("a", 3, 3);
        s.discharge = Some(vec![Some(2.0); 3]);
        for (i, n) in ["B", "A", "C", "D"].iter().enumerate() {
            s.attributes.insert(n.to_string(), i as f64);
        }
        let names: Vec<String> = ["D", "B", "A", "C"].iter().map(|s| s.to_string()).collect();
        let spec = FeatureSpec::meteorology()
            .with_location()
            .with_discharge()
            .with_attributes(AttributeMode::Full, names);
        let rows = build_dynamic_inputs(&s, &spec).unwrap();
        assert_eq!(rows[0].len(), 9 + 3 + 2 + 4);
        let fnames = spec.feature_names();
        assert_eq!(&fnames[14..], &["A", "B", "C", "D"]);
        // attribute A = 1.0 sits at position 14
        assert_eq!(rows[2][14], 1.0);
    }

    #[test]
    fn missing_discharge_errors() {
        let mut s = site_with_obs("a", 3, 3);
        s.discharge = Some(vec![Some(1.0), None, Some(1.0)]);
        let spec = FeatureSpec::meteorology().with_discharge();
        assert!(matches!(
            build_dynamic_inputs(&s, &spec),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn dam_distance_rules() {
        let names = vec!["dam".to_string()];
        let mut m = BTreeMap::new();
        m.insert("dam".to_string(), -999.0);
        m.insert("other".to_string(), -999.0);
        let out = transform_dam_distances(&m, &names).unwrap();
        assert_eq!(out["dam"], 0.0);
        assert_eq!(out["other"], -999.0);
        m.insert("dam".into(), 100.0);
        assert_eq!(transform_dam_distances(&m, &names).unwrap()["dam"], 0.01);
        m.insert("dam".into(), 0.0);
        assert_eq!(transform_dam_distances(&m, &names).unwrap()["dam"], 0.0);
        m.insert("dam".into(), -5.0);
        assert!(transform_dam_distances(&m, &names).is_err());
    }

    #[test]
    fn split_boundaries() {
        let sites = vec![
            site_with_obs("train", 1900, 1825),
            site_with_obs("test", 1900, 1824),
            site_with_obs("short", 400, 300),
        ];
        let split = split_train_test(&sites, DEFAULT_THRESHOLD_DATES);
        assert!(split.training_sites.contains("train"));
        assert!(split.test_sites.contains("test"));
        assert!(!split.test_sites.contains("short"));
        assert_eq!(split_train_test(&[], 1825), DataSplit {
            threshold_dates: 1825,
            ..Default::default()
        });
    }

    #[test]
    fn availability_filters() {
        let mut sites: Vec<SiteRecord> = (0..5).map(|i| site_with_obs(&i.to_string(), 10, 10)).collect();
        sites[1].attributes.insert("X".into(), 1.0);
        sites[3].attributes.insert("X".into(), 2.0);
        sites[2].discharge = Some(vec![Some(1.0); 10]);
        let meteo = FeatureSpec::meteorology();
        assert_eq!(availability_group(&sites, &meteo).len(), 5);
        let flow = FeatureSpec::meteorology().with_discharge();
        let ids: Vec<&str> = availability_group(&sites, &flow)
            .iter()
            .map(|s| s.site_id.as_str())
            .collect();
        assert_eq!(ids, vec!["2"]);
        let attr = FeatureSpec::meteorology().with_attributes(AttributeMode::Full, vec!["X".into()]);
        let expected: Vec<&str> = sites
            .iter()
            .filter(|s| s.attributes.contains_key("X"))
            .map(|s| s.site_id.as_str())
            .collect();
        let got: Vec<&str> = availability_group(&sites, &attr)
            .iter()
            .map(|s| s.site_id.as_str())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 2);
    }

    fn table(values: Vec<Vec<f64>>, names: &[&str]) -> AttributeTable {
        AttributeTable {
            site_ids: (0..values.len()).map(|i| i.to_string()).collect(),
            names: names.iter().map(|s| s.to_string()).collect(),
            values: Matrix::from_rows(&values).unwrap(),
        }
    }

    #[test]
    fn zscore_singleton_and_correlated() {
        let t = table(
            vec![vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0]],
            &["a", "b"],
        );
        let z = [-1.5f64.sqrt(), 0.0, 1.5f64.sqrt()];
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), "only".to_string());
        let out = aggregate_zscore_categories(&t, &map).unwrap();
        for i in 0..3 {
            assert!((out.table.values.get(i, 0) - z[i]).abs() < 1e-12);
        }
        map.insert("b".to_string(), "only".to_string());
        let out = aggregate_zscore_categories(&t, &map).unwrap();
        for i in 0..3 {
            assert!((out.table.values.get(i, 0) - z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_two_pass_oracle() {
        let raw = vec![
            vec![1.0, 5.0, -2.0, 7.0],
            vec![4.0, 3.0, 0.5, 8.0],
            vec![2.0, 9.0, 1.0, 1.0],
        ];
        let t = table(raw.clone(), &["a", "b", "c", "d"]);
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), "X".to_string());
        map.insert("c".to_string(), "X".to_string());
        map.insert("b".to_string(), "Y".to_string());
        map.insert("d".to_string(), "Y".to_string());
        let out = aggregate_zscore_categories(&t, &map).unwrap();
        assert_eq!(out.table.names, vec!["X", "Y"]);
        // oracle: explicit two-pass mean/std per column
        let z = |j: usize, i: usize| {
            let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
            let m = (col[0] + col[1] + col[2]) / 3.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
            (col[i] - m) / v.sqrt()
        };
        for i in 0..3 {
            let x = (z(0, i) + z(2, i)) / 2.0;
            let y = (z(1, i) + z(3, i)) / 2.0;
            assert!((out.table.values.get(i, 0) - x).abs() < 1e-12);
            assert!((out.table.values.get(i, 1) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_zero_variance_excluded() {
        let t = table(vec![vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 4.0]], &["a", "b"]);
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), "X".to_string());
        map.insert("b".to_string(), "X".to_string());
        let out = aggregate_zscore_categories(&t, &map).unwrap();
        assert_eq!(out.excluded, vec!["a"]);
        assert_eq!(out.table.names, vec!["X"]);
    }

    proptest! {
        #[test]
        fn dam_inversion_reverses_order(d1 in 0.001f64..1e6, d2 in 0.001f64..1e6) {
            prop_assume!(d1 < d2);
            let names = vec!["a".to_string(), "b".to_string()];
            let m: BTreeMap<String, f64> = [("a".to_string(), d1), ("b".to_string(), d2)].into();
            let out = transform_dam_distances(&m, &names).unwrap();
            prop_assert!(out["a"] > out["b"]);
        }

        #[test]
        fn split_is_partition(counts in proptest::collection::vec(0usize..60, 0..12), thr in 1usize..60) {
            let sites: Vec<SiteRecord> = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| site_with_obs(&i.to_string(), 60, c))
                .collect();
            let split = split_train_test(&sites, thr);
            prop_assert!(split.training_sites.is_disjoint(&split.test_sites));
            let ids: BTreeSet<String> = sites.iter().map(|s| s.site_id.clone()).collect();
            prop_assert!(split.training_sites.is_subset(&ids));
            prop_assert!(split.test_sites.is_subset(&ids));
        }

        #[test]
        fn singleton_categories_have_zero_mean(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 3..10)
        ) {
            let t = table(rows, &["a", "b", "c"]);
            let map: BTreeMap<String, String> = ["a", "b", "c"]
                .iter()
                .map(|n| (n.to_string(), format!("cat_{n}")))
                .collect();
            let out = aggregate_zscore_categories(&t, &map).unwrap();
            for k in 0..out.table.names.len() {
                prop_assert!(mean(&out.table.column(k)).abs() < 1e-9);
            }
        }
    }
}
