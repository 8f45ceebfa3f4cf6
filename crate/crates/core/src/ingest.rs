//! CSV ingestion into validated site records.
//!
//! Schemas (headers required, dates ISO-8601):
//! - observations: `site_id,date,water_temp_c`
//! - drivers: `site_id,date,dayl_s,tmax_c,tmean_c,tmin_c,swe_kgm2,vp_pa,srad_wm2,prcp_mm[,discharge_cfs]`
//! - attributes: `site_id,<attribute>...`
//! - sites: `site_id,lat,lon,elev_m,huc2[,cluster_id][,dam_distance_km]`
//! - categories: `attribute,category`

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data_model::{filter_observations, transform_dam_distances, SiteRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub observations: PathBuf,
    pub drivers: PathBuf,
    pub sites: PathBuf,
    pub attributes: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    /// One attribute name per line.
    pub expert_attributes: Option<PathBuf>,
}

impl DataPaths {
    /// Resolve relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            observations: r(&self.observations),
            drivers: r(&self.drivers),
            sites: r(&self.sites),
            attributes: self.attributes.as_ref().map(r),
            categories: self.categories.as_ref().map(r),
            expert_attributes: self.expert_attributes.as_ref().map(r),
        }
    }
}

/// A malformed row that was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseIssue {
    pub file: String,
    pub line: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteExclusion {
    pub site_id: String,
    pub reason: String,
}

/// Everything ingestion skipped or rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IngestReport {
    pub parse_issues: Vec<ParseIssue>,
    pub excluded_sites: Vec<SiteExclusion>,
    /// Observations on dates without drivers, per site.
    pub orphan_observations: BTreeMap<String, usize>,
    pub sites_loaded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Accepted sites, ordered by id.
    pub sites: Vec<SiteRecord>,
    /// Attribute columns of the attributes file, in lexicographic order.
    pub attribute_names: Vec<String>,
    pub category_map: Option<BTreeMap<String, String>>,
    pub expert_attributes: Option<Vec<String>>,
    pub report: IngestReport,
}

impl Dataset {
    pub fn site(&self, id: &str) -> Option<&SiteRecord> {
        self.sites.iter().find(|s| s.site_id == id)
    }
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
}

struct Table {
    label: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, required: &[&str]) -> Result<Self> {
        let label = file_label(path);
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        for r in required {
            if !headers.iter().any(|h| h == r) {
                return Err(Error::Parse { file: label, line: 1, detail: format!("missing column `{r}`") });
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { label, headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize) -> std::result::Result<&'a str, String> {
    rec.get(idx).ok_or_else(|| format!("missing field {}", idx + 1))
}

fn parse_f64(s: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{what}: `{s}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{what}: non-finite value"));
    }
    Ok(v)
}

fn parse_opt_f64(s: &str, what: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("`{s}` is not an ISO date"))
}

struct SiteMeta {
    lat: f64,
    lon: f64,
    elev: f64,
    huc2: String,
    cluster: Option<u32>,
    dam_km: Option<f64>,
}

struct DriverRow {
    meteo: [f64; 7],
    prcp: f64,
    discharge: Option<f64>,
}

const DRIVER_COLUMNS: [&str; 8] = [
    "dayl_s", "tmax_c", "tmean_c", "tmin_c", "swe_kgm2", "vp_pa", "srad_wm2", "prcp_mm",
];

/// Read every file, assemble contiguous daily site records, apply the dam
/// distance transform and the observation filters. Malformed rows are
/// skipped and listed; duplicate (site, date) keys are fatal.
pub fn ingest(paths: &DataPaths, dam_attribute_names: &[String]) -> Result<Dataset> {
    let mut report = IngestReport::default();

    let sites_t = Table::read(&paths.sites, &["site_id", "lat", "lon", "elev_m", "huc2"])?;
    let (c_lat, c_lon, c_elev, c_huc) = (
        sites_t.col("lat").unwrap(),
        sites_t.col("lon").unwrap(),
        sites_t.col("elev_m").unwrap(),
        sites_t.col("huc2").unwrap(),
    );
    let c_cluster = sites_t.col("cluster_id");
    let c_dam = sites_t.col("dam_distance_km");
    let mut meta: BTreeMap<String, SiteMeta> = BTreeMap::new();
    for (line, rec) in &sites_t.rows {
        let parsed = (|| -> std::result::Result<(String, SiteMeta), String> {
            let id = field(rec, 0)?.to_string();
            let cluster = match c_cluster.map(|c| field(rec, c)).transpose()? {
                Some(s) if !s.is_empty() => Some(s.parse::<u32>().map_err(|_| format!("cluster_id `{s}`"))?),
                _ => None,
            };
            let dam_km = match c_dam.map(|c| field(rec, c)).transpose()? {
                Some(s) => parse_opt_f64(s, "dam_distance_km")?,
                None => None,
            };
            Ok((
                id,
                SiteMeta {
                    lat: parse_f64(field(rec, c_lat)?, "lat")?,
                    lon: parse_f64(field(rec, c_lon)?, "lon")?,
                    elev: parse_f64(field(rec, c_elev)?, "elev_m")?,
                    huc2: field(rec, c_huc)?.to_string(),
                    cluster,
                    dam_km,
                },
            ))
        })();
        match parsed {
            Ok((id, m)) => {
                if meta.insert(id.clone(), m).is_some() {
                    return Err(Error::Parse { file: sites_t.label.clone(), line: *line, detail: format!("duplicate site {id}") });
                }
            }
            Err(detail) => report.parse_issues.push(ParseIssue { file: sites_t.label.clone(), line: *line, detail }),
        }
    }

    let mut required = vec!["site_id", "date"];
    required.extend(DRIVER_COLUMNS);
    let drv_t = Table::read(&paths.drivers, &required)?;
    let idx: Vec<usize> = DRIVER_COLUMNS.iter().map(|c| drv_t.col(c).unwrap()).collect();
    let c_date = drv_t.col("date").unwrap();
    let c_q = drv_t.col("discharge_cfs");
    let mut drivers: BTreeMap<String, BTreeMap<NaiveDate, DriverRow>> = BTreeMap::new();
    for (line, rec) in &drv_t.rows {
        let parsed = (|| -> std::result::Result<(String, NaiveDate, DriverRow), String> {
            let id = field(rec, 0)?.to_string();
            let date = parse_date(field(rec, c_date)?)?;
            let mut meteo = [0.0; 7];
            for k in 0..7 {
                meteo[k] = parse_f64(field(rec, idx[k])?, DRIVER_COLUMNS[k])?;
            }
            let prcp = parse_f64(field(rec, idx[7])?, "prcp_mm")?;
            let discharge = match c_q {
                Some(c) => parse_opt_f64(field(rec, c)?, "discharge_cfs")?,
                None => None,
            };
            if prcp < 0.0 || discharge.is_some_and(|q| q < 0.0) {
                return Err("negative precipitation or discharge".into());
            }
            Ok((id, date, DriverRow { meteo, prcp, discharge }))
        })();
        match parsed {
            Ok((id, date, row)) => {
                if drivers.entry(id.clone()).or_default().insert(date, row).is_some() {
                    return Err(Error::Parse {
                        file: drv_t.label.clone(),
                        line: *line,
                        detail: format!("duplicate key ({id}, {date})"),
                    });
                }
            }
            Err(detail) => report.parse_issues.push(ParseIssue { file: drv_t.label.clone(), line: *line, detail }),
        }
    }

    let obs_t = Table::read(&paths.observations, &["site_id", "date", "water_temp_c"])?;
    let (c_odate, c_temp) = (obs_t.col("date").unwrap(), obs_t.col("water_temp_c").unwrap());
    let mut observations: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for (line, rec) in &obs_t.rows {
        let parsed = (|| -> std::result::Result<(String, NaiveDate, f64), String> {
            Ok((
                field(rec, 0)?.to_string(),
                parse_date(field(rec, c_odate)?)?,
                parse_f64(field(rec, c_temp)?, "water_temp_c")?,
            ))
        })();
        match parsed {
            Ok((id, date, v)) => {
                if observations.entry(id.clone()).or_default().insert(date, v).is_some() {
                    return Err(Error::Parse {
                        file: obs_t.label.clone(),
                        line: *line,
                        detail: format!("duplicate key ({id}, {date})"),
                    });
                }
            }
            Err(detail) => report.parse_issues.push(ParseIssue { file: obs_t.label.clone(), line: *line, detail }),
        }
    }

    let mut attributes: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut attribute_names = Vec::new();
    if let Some(p) = &paths.attributes {
        let t = Table::read(p, &["site_id"])?;
        attribute_names = t.headers.iter().skip(1).cloned().collect();
        for (line, rec) in &t.rows {
            let parsed = (|| -> std::result::Result<(String, BTreeMap<String, f64>), String> {
                let mut m = BTreeMap::new();
                for (k, name) in attribute_names.iter().enumerate() {
                    if let Some(v) = parse_opt_f64(field(rec, k + 1)?, name)? {
                        m.insert(name.clone(), v);
                    }
                }
                Ok((field(rec, 0)?.to_string(), m))
            })();
            match parsed {
                Ok((id, m)) => {
                    if attributes.insert(id.clone(), m).is_some() {
                        return Err(Error::Parse { file: t.label.clone(), line: *line, detail: format!("duplicate site {id}") });
                    }
                }
                Err(detail) => report.parse_issues.push(ParseIssue { file: t.label.clone(), line: *line, detail }),
            }
        }
        attribute_names.sort();
    }

    let category_map = match &paths.categories {
        Some(p) => {
            let t = Table::read(p, &["attribute", "category"])?;
            let (ca, cc) = (t.col("attribute").unwrap(), t.col("category").unwrap());
            let mut m = BTreeMap::new();
            for (line, rec) in &t.rows {
                match (rec.get(ca), rec.get(cc)) {
                    (Some(a), Some(c)) if !a.is_empty() && !c.is_empty() => {
                        m.insert(a.to_string(), c.to_string());
                    }
                    _ => report.parse_issues.push(ParseIssue { file: t.label.clone(), line: *line, detail: "incomplete row".into() }),
                }
            }
            Some(m)
        }
        None => None,
    };
    let expert_attributes = match &paths.expert_attributes {
        Some(p) => Some(
            std::fs::read_to_string(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        ),
        None => None,
    };

    let mut sites = Vec::new();
    let ids: BTreeSet<&String> = meta.keys().chain(drivers.keys()).collect();
    for id in ids {
        let exclude = |reason: String| SiteExclusion { site_id: id.clone(), reason };
        let (Some(m), Some(drv)) = (meta.get(id), drivers.get(id)) else {
            let reason = if meta.contains_key(id) { "no driver rows" } else { "no site metadata" };
            report.excluded_sites.push(exclude(reason.into()));
            continue;
        };
        let dates: Vec<NaiveDate> = drv.keys().copied().collect();
        if dates.windows(2).any(|w| (w[1] - w[0]).num_days() != 1) {
            report.excluded_sites.push(exclude("driver dates are not contiguous daily".into()));
            continue;
        }
        let obs = observations.get(id);
        let orphans = obs.map_or(0, |o| o.keys().filter(|d| !drv.contains_key(d)).count());
        if orphans > 0 {
            report.orphan_observations.insert(id.clone(), orphans);
        }
        let any_q = drv.values().any(|r| r.discharge.is_some());
        let attrs = match attributes.get(id) {
            Some(a) => match transform_dam_distances(a, dam_attribute_names) {
                Ok(t) => t,
                Err(e) => {
                    report.excluded_sites.push(exclude(e.to_string()));
                    continue;
                }
            },
            None => BTreeMap::new(),
        };
        let record = SiteRecord {
            site_id: id.clone(),
            latitude: m.lat,
            longitude: m.lon,
            elevation: m.elev,
            region_code: m.huc2.clone(),
            cluster_id: m.cluster,
            dam_distance_km: m.dam_km,
            water_temp: dates.iter().map(|d| obs.and_then(|o| o.get(d).copied())).collect(),
            meteo: drv.values().map(|r| r.meteo).collect(),
            precip: drv.values().map(|r| r.prcp).collect(),
            discharge: any_q.then(|| drv.values().map(|r| r.discharge).collect()),
            attributes: attrs,
            dates,
        };
        match filter_observations(record) {
            Ok(s) => sites.push(s),
            Err(r) => report.excluded_sites.push(exclude(r.to_string())),
        }
    }
    for id in observations.keys() {
        if !meta.contains_key(id) && !drivers.contains_key(id) {
            report.excluded_sites.push(SiteExclusion { site_id: id.clone(), reason: "observations for unknown site".into() });
        }
    }
    report.sites_loaded = sites.len();
    Ok(Dataset { sites, attribute_names, category_map, expert_attributes, report })
}
