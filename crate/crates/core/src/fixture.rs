//! Deterministic synthetic stream-temperature dataset.
//!
//! Water temperature is an affine, lagged response to air temperature with a
//! discharge term, mixed with groundwater in proportion to baseflow index and
//! damped downstream of dams. Sites share regional weather anomalies, a few
//! training sites are near-twins of each other, and some extra sites lack
//! discharge or attributes so the availability pools differ.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data_model::SiteRecord;
use crate::error::Result;
use crate::ingest::DataPaths;
use crate::numerics::{format_sig6, Rng};

/// Attribute columns, in file order.
pub const ATTRIBUTE_NAMES: [&str; 12] = [
    "BFI_AVE",
    "DRAIN_SQKM",
    "ELEV_MEAN_M_BASIN",
    "FORESTNLCD06",
    "NDAMS_2009",
    "PLANTNLCD06",
    "PPTAVG_BASIN",
    "RAW_DIS_NEAREST_MAJ_DAM",
    "RH_BASIN",
    "SLOPE_PCT",
    "STOR_NID_2009",
    "T_AVG_BASIN",
];

pub const DAM_ATTRIBUTE: &str = "RAW_DIS_NEAREST_MAJ_DAM";

pub const EXPERT_ATTRIBUTES: [&str; 6] = [
    "BFI_AVE",
    "DRAIN_SQKM",
    "ELEV_MEAN_M_BASIN",
    "FORESTNLCD06",
    "RAW_DIS_NEAREST_MAJ_DAM",
    "T_AVG_BASIN",
];

pub const CATEGORIES: [(&str, &str); 12] = [
    ("BFI_AVE", "hydrology"),
    ("DRAIN_SQKM", "hydrology"),
    ("ELEV_MEAN_M_BASIN", "topography"),
    ("FORESTNLCD06", "landcover"),
    ("NDAMS_2009", "dams"),
    ("PLANTNLCD06", "landcover"),
    ("PPTAVG_BASIN", "climate"),
    ("RAW_DIS_NEAREST_MAJ_DAM", "dams"),
    ("RH_BASIN", "climate"),
    ("SLOPE_PCT", "topography"),
    ("STOR_NID_2009", "dams"),
    ("T_AVG_BASIN", "climate"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Long record, complete inputs.
    Training,
    /// Short contiguous record, complete inputs.
    Test,
    /// Long record but missing discharge and/or attributes.
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub seed: u64,
    pub start: NaiveDate,
    pub n_days: usize,
    /// Training sites per region; region `k` gets `training_per_region[k]`.
    pub training_per_region: Vec<usize>,
    /// Test sites per region.
    pub test_per_region: Vec<usize>,
    pub n_extra: usize,
    pub noise_sd: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_917,
            start: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
            n_days: 1461,
            training_per_region: vec![3, 3, 3, 3, 2, 2, 2, 2],
            test_per_region: vec![2, 2, 1, 1, 1, 1, 1, 1],
            n_extra: 6,
            noise_sd: 0.02,
        }
    }
}

/// Generating parameters kept alongside each site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site_id: String,
    pub role: Role,
    pub groundwater_fraction: f64,
    pub dam_distance_km: Option<f64>,
    pub twin_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    /// All sites, ordered by id, with values rounded to six significant
    /// digits exactly as written to disk.
    pub sites: Vec<SiteRecord>,
    pub truth: Vec<SiteTruth>,
    pub category_map: BTreeMap<String, String>,
    pub expert_attributes: Vec<String>,
}

/// Threshold separating training from test sites in the default fixture.
pub const FIXTURE_THRESHOLD_DATES: usize = 800;

const REGION_CENTERS: [(f64, f64); 8] = [
    (44.5, -72.5),
    (40.5, -77.0),
    (35.5, -84.0),
    (45.0, -93.5),
    (39.0, -90.5),
    (38.5, -105.5),
    (46.0, -116.0),
    (37.0, -120.0),
];

fn round6(x: f64) -> f64 {
    format_sig6(x).parse().unwrap_or(x)
}

#[derive(Clone)]
struct Params {
    lat: f64,
    lon: f64,
    elev: f64,
    bfi: f64,
    drain: f64,
    forest: f64,
    slope: f64,
    plant: f64,
    rh: f64,
    dam_km: Option<f64>,
    ndams: f64,
    stor: f64,
    wet_bias: f64,
}

impl Params {
    fn draw(rng: &mut Rng, region: usize) -> Self {
        let (clat, clon) = REGION_CENTERS[region % REGION_CENTERS.len()];
        let dam_roll = rng.uniform();
        let dam_km = if dam_roll < 0.18 {
            Some(3.0 + 20.0 * rng.uniform())
        } else if dam_roll < 0.45 {
            Some(40.0 + 150.0 * rng.uniform())
        } else {
            None
        };
        Self {
            lat: clat + (rng.uniform() - 0.5) * 2.0,
            lon: clon + (rng.uniform() - 0.5) * 2.5,
            elev: 100.0 + 1200.0 * rng.uniform(),
            bfi: 20.0 + 60.0 * rng.uniform(),
            drain: (20f64.ln() + (3000f64.ln() - 20f64.ln()) * rng.uniform()).exp(),
            forest: 90.0 * rng.uniform(),
            slope: 1.0 + 14.0 * rng.uniform(),
            plant: 60.0 * rng.uniform(),
            rh: 50.0 + 30.0 * rng.uniform(),
            ndams: if dam_km.is_some() { 1.0 + rng.below(9) as f64 } else { rng.below(2) as f64 },
            stor: if dam_km.is_some() { 50.0 + 500.0 * rng.uniform() } else { 5.0 * rng.uniform() },
            dam_km,
            wet_bias: 0.1 * (rng.uniform() - 0.5),
        }
    }

    fn near_twin(&self, rng: &mut Rng) -> Self {
        let mut jitter = |x: f64| x * (1.0 + 0.01 * (rng.uniform() - 0.5));
        let mut p = self.clone();
        p.lat = self.lat + 0.05;
        p.lon = self.lon + 0.05;
        p.elev = jitter(self.elev);
        p.bfi = jitter(self.bfi);
        p.drain = jitter(self.drain);
        p.forest = jitter(self.forest);
        p.slope = jitter(self.slope);
        p.plant = jitter(self.plant);
        p.rh = jitter(self.rh);
        p.stor = jitter(self.stor);
        p.dam_km = self.dam_km.map(jitter);
        p
    }

    fn mean_air(&self) -> f64 {
        26.0 - 0.5 * (self.lat - 30.0) - 0.003 * self.elev
    }

    fn groundwater_fraction(&self) -> f64 {
        ((self.bfi - 30.0) / 100.0).clamp(0.0, 0.5)
    }
}

struct Weather {
    fast: Vec<f64>,
    slow: Vec<f64>,
    wet: Vec<f64>,
}

fn regional_weather(rng: &mut Rng, n: usize) -> Weather {
    let (mut f, mut s) = (0.0, 0.0);
    let mut w = Weather { fast: Vec::with_capacity(n), slow: Vec::with_capacity(n), wet: Vec::with_capacity(n) };
    for _ in 0..n {
        f = 0.85 * f + 1.6 * rng.normal();
        s = 0.98 * s + 0.35 * rng.normal();
        w.fast.push(f);
        w.slow.push(s);
        w.wet.push(rng.uniform());
    }
    w
}

fn day_length_s(lat_deg: f64, doy: u32) -> f64 {
    let decl = 23.44f64.to_radians() * (2.0 * std::f64::consts::PI * (284.0 + f64::from(doy)) / 365.0).sin();
    let x = (-lat_deg.to_radians().tan() * decl.tan()).clamp(-1.0, 1.0);
    x.acos() * 86_400.0 / std::f64::consts::PI
}

/// Days simulated before the first written date so reservoirs, snowpack and
/// thermal memory start from a settled state.
const SPIN_UP_DAYS: usize = 365;

fn simulate(
    id: &str,
    p: &Params,
    weather: &Weather,
    dates: &[NaiveDate],
    observed: &[bool],
    noise_sd: f64,
    with_discharge: bool,
    rng: &mut Rng,
) -> SiteRecord {
    let n = dates.len();
    let total = n + SPIN_UP_DAYS;
    let mean_air = p.mean_air();
    let amp_air = 7.0 + 0.25 * (p.lat - 36.0);
    let tau = 1.5 + 0.6 * p.drain.ln();
    let g = p.groundwater_fraction();
    let t_gw = mean_air + 1.5;
    let b = 0.95 - 0.002 * p.forest;
    let a = 0.5 + 0.08 * p.slope;
    let k_res = 5.0 + 0.2 * p.bfi;
    let cfs_per_mm = p.drain * 0.4087;

    let mut meteo = Vec::with_capacity(total);
    let mut precip = Vec::with_capacity(total);
    let mut discharge = Vec::with_capacity(total);
    let mut local = 0.0;
    let (mut swe, mut store) = (0.0f64, 30.0 * k_res / 10.0);
    let mut air_series = Vec::with_capacity(total);
    for i in 0..total {
        let d = dates[0] + chrono::Duration::days(i as i64 - SPIN_UP_DAYS as i64);
        let doy = d.ordinal();
        let phase = 2.0 * std::f64::consts::PI * (f64::from(doy) - 109.0) / 365.25;
        local = 0.5 * local + 0.5 * rng.normal();
        let tmean = mean_air + amp_air * phase.sin() + weather.fast[i] + weather.slow[i] + local;
        let spread = 5.5 + 1.5 * phase.sin() + 0.5 * rng.normal().abs();
        let wet = weather.wet[i] < 0.3 + p.wet_bias;
        let prcp = if wet { -7.0 * (1.0 - rng.uniform()).ln() } else { 0.0 };
        let dayl = day_length_s(p.lat, doy);
        let srad = (90.0 + 300.0 * (dayl - 30_000.0) / 30_000.0).max(20.0) * if wet { 0.6 } else { 1.0 };
        let tmin = tmean - spread;
        let vp = 610.8 * (17.27 * tmin / (tmin + 237.3)).exp();
        let (rain, melt) = if tmean < 0.0 {
            swe += prcp;
            (0.0, 0.0)
        } else {
            let m = swe.min(3.0 * tmean);
            swe -= m;
            (prcp, m)
        };
        store += rain + melt + 0.02 * p.bfi;
        let q = store / k_res;
        store -= q;
        meteo.push([dayl, tmean + spread, tmean, tmin, swe, vp, srad]);
        precip.push(prcp);
        discharge.push(q * cfs_per_mm);
        air_series.push(tmean);
    }

    let log_q: Vec<f64> = discharge.iter().map(|q| q.ln_1p()).collect();
    let mean_log_q = log_q.iter().sum::<f64>() / total as f64;
    let mut ema = air_series[0];
    let mut dam_ema = None;
    let mut water = Vec::with_capacity(n);
    for i in 0..total {
        ema += (air_series[i] - ema) / tau;
        let stream = a + b * ema - 0.4 * (log_q[i] - mean_log_q);
        let mut mixed = (1.0 - g) * stream + g * t_gw;
        if p.dam_km.is_some_and(|km| km <= 25.0) {
            let e = dam_ema.get_or_insert(mixed);
            *e += (mixed - *e) / 30.0;
            mixed = 0.4 * mixed + 0.6 * *e;
        }
        // Smooth floor near freezing.
        let floored = if mixed > 20.0 { mixed } else { mixed.exp().ln_1p() };
        let value = (floored + noise_sd * rng.normal()).clamp(0.0, 35.0);
        if i >= SPIN_UP_DAYS {
            water.push(observed[i - SPIN_UP_DAYS].then(|| round6(value)));
        }
    }
    meteo.drain(..SPIN_UP_DAYS);
    precip.drain(..SPIN_UP_DAYS);
    discharge.drain(..SPIN_UP_DAYS);

    let mut attributes = BTreeMap::new();
    let mean_prcp = precip.iter().sum::<f64>() / n as f64;
    let values = [
        p.bfi,
        p.drain,
        p.elev + 80.0,
        p.forest,
        p.ndams,
        p.plant,
        mean_prcp * 36.525,
        p.dam_km.unwrap_or(-999.0),
        p.rh,
        p.slope,
        p.stor,
        mean_air + 0.3,
    ];
    for (name, v) in ATTRIBUTE_NAMES.iter().zip(values) {
        attributes.insert((*name).to_string(), round6(v));
    }

    SiteRecord {
        site_id: id.to_string(),
        latitude: round6(p.lat),
        longitude: round6(p.lon),
        elevation: round6(p.elev),
        region_code: String::new(),
        cluster_id: None,
        dam_distance_km: p.dam_km.map(round6),
        dates: dates.to_vec(),
        water_temp: water,
        meteo: meteo.into_iter().map(|m| m.map(round6)).collect(),
        precip: precip.into_iter().map(round6).collect(),
        discharge: with_discharge.then(|| discharge.into_iter().map(|q| Some(round6(q))).collect()),
        attributes,
    }
}

/// Observations begin this many days after the driver record, as when
/// gridded meteorology predates a gauge.
pub const UNOBSERVED_LEAD_DAYS: usize = 120;

fn training_mask(rng: &mut Rng, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|i| i >= UNOBSERVED_LEAD_DAYS).collect();
    for _ in 0..rng.below(4) {
        let len = 10 + rng.below(21);
        let start = UNOBSERVED_LEAD_DAYS + rng.below(n - len - UNOBSERVED_LEAD_DAYS);
        mask[start..start + len].iter_mut().for_each(|m| *m = false);
    }
    mask
}

fn test_mask(rng: &mut Rng, n: usize) -> Vec<bool> {
    let room = n - UNOBSERVED_LEAD_DAYS;
    let len = 400 + rng.below(301).min(room.saturating_sub(400));
    let start = UNOBSERVED_LEAD_DAYS + rng.below(room - len + 1);
    (0..n).map(|i| i >= start && i < start + len).collect()
}

fn cluster_of(p: &Params) -> u32 {
    u32::from(p.bfi >= 50.0) * 2 + u32::from(p.mean_air() >= 14.0) + 1
}

/// Build the dataset described by `config`.
pub fn generate(config: &FixtureConfig) -> Fixture {
    let root = Rng::new(config.seed);
    let dates: Vec<NaiveDate> = (0..config.n_days)
        .map(|i| config.start + chrono::Duration::days(i as i64))
        .collect();
    let n_regions = config.training_per_region.len().max(config.test_per_region.len());
    let weathers: Vec<Weather> = (0..n_regions)
        .map(|r| regional_weather(&mut root.child_labeled(&format!("weather-{r}")), config.n_days + SPIN_UP_DAYS))
        .collect();

    let mut sites = Vec::new();
    let mut truth = Vec::new();
    let mut counter = 0usize;
    let mut next_id = || {
        counter += 1;
        format!("S{counter:03}")
    };
    let mut add = |id: String, region: usize, role: Role, p: &Params, twin_of: Option<String>, drop: (bool, bool)| {
        let mut rng = root.child_labeled(&id);
        let mask = match role {
            Role::Test => test_mask(&mut rng, config.n_days),
            Role::Training | Role::Extra => training_mask(&mut rng, config.n_days),
        };
        let mut site = simulate(&id, p, &weathers[region], &dates, &mask, config.noise_sd, !drop.0, &mut rng);
        site.region_code = format!("{:02}", region + 1);
        site.cluster_id = Some(cluster_of(p));
        if drop.1 {
            site.attributes.remove("FORESTNLCD06");
            site.attributes.remove("SLOPE_PCT");
        }
        truth.push(SiteTruth {
            site_id: id,
            role,
            groundwater_fraction: p.groundwater_fraction(),
            dam_distance_km: site.dam_distance_km,
            twin_of,
        });
        sites.push(site);
    };

    for region in 0..n_regions {
        let mut prng = root.child_labeled(&format!("params-{region}"));
        let n_train = config.training_per_region.get(region).copied().unwrap_or(0);
        let mut first: Option<(String, Params)> = None;
        for k in 0..n_train {
            let id = next_id();
            match (&first, k) {
                (Some((base_id, base)), 1) if n_train >= 3 => {
                    let p = base.near_twin(&mut prng);
                    add(id, region, Role::Training, &p, Some(base_id.clone()), (false, false));
                }
                _ => {
                    let p = Params::draw(&mut prng, region);
                    if first.is_none() {
                        first = Some((id.clone(), p.clone()));
                    }
                    add(id, region, Role::Training, &p, None, (false, false));
                }
            }
        }
        for _ in 0..config.test_per_region.get(region).copied().unwrap_or(0) {
            let p = Params::draw(&mut prng, region);
            add(next_id(), region, Role::Test, &p, None, (false, false));
        }
    }
    let mut xrng = root.child_labeled("extra");
    for k in 0..config.n_extra {
        let region = k % n_regions;
        let p = Params::draw(&mut xrng, region);
        let drop = match k % 3 {
            0 => (true, false),
            1 => (false, true),
            _ => (true, true),
        };
        add(next_id(), region, Role::Extra, &p, None, drop);
    }

    Fixture {
        sites,
        truth,
        category_map: CATEGORIES.iter().map(|(a, c)| ((*a).to_string(), (*c).to_string())).collect(),
        expert_attributes: EXPERT_ATTRIBUTES.iter().map(|s| (*s).to_string()).collect(),
    }
}

impl Fixture {
    pub fn truth_of(&self, id: &str) -> Option<&SiteTruth> {
        self.truth.iter().find(|t| t.site_id == id)
    }

    /// Write the CSV files and return their paths.
    pub fn write(&self, dir: &Path) -> Result<DataPaths> {
        std::fs::create_dir_all(dir)?;
        let mut obs = String::from("site_id,date,water_temp_c\n");
        let mut drv = String::from(
            "site_id,date,dayl_s,tmax_c,tmean_c,tmin_c,swe_kgm2,vp_pa,srad_wm2,prcp_mm,discharge_cfs\n",
        );
        let mut attrs = format!("site_id,{}\n", ATTRIBUTE_NAMES.join(","));
        let mut meta = String::from("site_id,lat,lon,elev_m,huc2,cluster_id,dam_distance_km\n");
        for s in &self.sites {
            for (i, d) in s.dates.iter().enumerate() {
                if let Some(t) = s.water_temp[i] {
                    writeln!(obs, "{},{d},{}", s.site_id, format_sig6(t)).unwrap();
                }
                write!(drv, "{},{d}", s.site_id).unwrap();
                for v in s.meteo[i].iter().chain(std::iter::once(&s.precip[i])) {
                    write!(drv, ",{}", format_sig6(*v)).unwrap();
                }
                let q = s.discharge.as_ref().and_then(|q| q[i]);
                writeln!(drv, ",{}", q.map(format_sig6).unwrap_or_default()).unwrap();
            }
            write!(attrs, "{}", s.site_id).unwrap();
            for name in ATTRIBUTE_NAMES {
                write!(attrs, ",{}", s.attributes.get(name).map(|v| format_sig6(*v)).unwrap_or_default()).unwrap();
            }
            attrs.push('\n');
            writeln!(
                meta,
                "{},{},{},{},{},{},{}",
                s.site_id,
                format_sig6(s.latitude),
                format_sig6(s.longitude),
                format_sig6(s.elevation),
                s.region_code,
                s.cluster_id.map(|c| c.to_string()).unwrap_or_default(),
                s.dam_distance_km.map(format_sig6).unwrap_or_default()
            )
            .unwrap();
        }
        let mut cats = String::from("attribute,category\n");
        for (a, c) in &self.category_map {
            writeln!(cats, "{a},{c}").unwrap();
        }
        let expert: String = self.expert_attributes.iter().map(|a| format!("{a}\n")).collect();
        let truth = serde_json::to_string_pretty(&self.truth)? + "\n";

        let files = [
            ("observations.csv", obs),
            ("drivers.csv", drv),
            ("attributes.csv", attrs),
            ("sites.csv", meta),
            ("categories.csv", cats),
            ("expert_attributes.txt", expert),
            ("truth.json", truth),
        ];
        for (name, body) in &files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(DataPaths {
            observations: dir.join("observations.csv"),
            drivers: dir.join("drivers.csv"),
            sites: dir.join("sites.csv"),
            attributes: Some(dir.join("attributes.csv")),
            categories: Some(dir.join("categories.csv")),
            expert_attributes: Some(dir.join("expert_attributes.txt")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::split_train_test;

    fn small() -> FixtureConfig {
        FixtureConfig {
            n_days: 900,
            training_per_region: vec![3, 1],
            test_per_region: vec![1, 1],
            n_extra: 3,
            ..Default::default()
        }
    }

    #[test]
    fn roles_match_split() {
        let f = generate(&FixtureConfig { n_days: 1095, ..small() });
        let split = split_train_test(&f.sites, FIXTURE_THRESHOLD_DATES);
        for t in &f.truth {
            match t.role {
                Role::Training | Role::Extra => assert!(split.training_sites.contains(&t.site_id), "{}", t.site_id),
                Role::Test => assert!(split.test_sites.contains(&t.site_id), "{}", t.site_id),
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()), generate(&small()));
    }

    #[test]
    fn values_within_filter_range() {
        let f = generate(&small());
        for s in &f.sites {
            assert!(s.observations().all(|(_, t)| (0.0..=35.0).contains(&t)));
            assert!(s.meteo.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn extras_lack_inputs() {
        let f = generate(&small());
        for (s, t) in f.sites.iter().zip(&f.truth) {
            let complete = s.has_discharge() && s.attributes.len() == ATTRIBUTE_NAMES.len();
            assert_eq!(complete, t.role != Role::Extra, "{}", s.site_id);
        }
    }

    #[test]
    fn twin_is_close() {
        let f = generate(&small());
        let twin = f.truth.iter().find(|t| t.twin_of.is_some()).unwrap();
        let a = f.sites.iter().find(|s| s.site_id == twin.site_id).unwrap();
        let b = f.sites.iter().find(|s| Some(&s.site_id) == twin.twin_of.as_ref()).unwrap();
        let diffs: Vec<f64> = a
            .water_temp
            .iter()
            .zip(&b.water_temp)
            .filter_map(|(x, y)| Some(x.as_ref()? - y.as_ref()?))
            .collect();
        let rmse = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(rmse < 1.0, "twin rmse {rmse}");
    }

    #[test]
    fn written_files_roundtrip_through_ingest() {
        let f = generate(&small());
        let dir = tempfile::tempdir().unwrap();
        let paths = f.write(dir.path()).unwrap();
        let ds = crate::ingest::ingest(&paths, &[DAM_ATTRIBUTE.to_string()]).unwrap();
        assert!(ds.report.parse_issues.is_empty());
        assert_eq!(ds.sites.len(), f.sites.len());
        for (a, b) in ds.sites.iter().zip(&f.sites) {
            assert_eq!(a.water_temp, b.water_temp);
            assert_eq!(a.meteo, b.meteo);
            assert_eq!(a.discharge, b.discharge);
            assert_eq!(a.region_code, b.region_code);
        }
    }
}
