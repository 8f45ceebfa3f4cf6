//! Annual sinusoid fits of paired air and stream temperature, amplitude
//! ratio and phase lag, and regime classification.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data_model::SiteRecord;
use crate::error::{Error, Result};
use crate::evaluate::SiteMetrics;
use crate::numerics::{lower_median, mean, solve_dense};

pub const PERIOD_DAYS: f64 = 365.25;
/// Sites at most this far from a major dam are classed as dammed.
pub const DAM_DISTANCE_KM: f64 = 25.0;

/// `T(t) = mean_level + amplitude·sin(2πt/period + phase)`, `t` in days
/// since 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineFit {
    pub mean_level: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub period: f64,
    pub residual_rmse: f64,
}

impl SineFit {
    pub fn value(&self, t: f64) -> f64 {
        self.mean_level + self.amplitude * (TAU * t / self.period + self.phase).sin()
    }
}

pub fn days_since_epoch(date: NaiveDate) -> f64 {
    (date - NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")).num_days() as f64
}

/// Ordinary least squares of `a0 + a1·sin(ωt) + a2·cos(ωt)` on raw daily
/// values through the 3×3 normal equations.
pub fn fit_sine(dates: &[NaiveDate], values: &[f64]) -> Result<SineFit> {
    if dates.len() != values.len() {
        return Err(Error::Dimension("dates and values differ in length".into()));
    }
    if dates.len() < 365 {
        return Err(Error::Insufficient(format!(
            "sine fit needs ≥ 365 observations, got {}",
            dates.len()
        )));
    }
    let t: Vec<f64> = dates.iter().map(|d| days_since_epoch(*d)).collect();
    let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi - lo + 1.0 < 365.0 {
        return Err(Error::Insufficient("sine fit needs observations spanning one year".into()));
    }
    let w = TAU / PERIOD_DAYS;
    let basis: Vec<[f64; 3]> = t.iter().map(|&t| [1.0, (w * t).sin(), (w * t).cos()]).collect();
    let mut xtx = vec![0.0; 9];
    let mut xty = vec![0.0; 3];
    for (b, &y) in basis.iter().zip(values) {
        for i in 0..3 {
            xty[i] += b[i] * y;
            for j in 0..3 {
                xtx[i * 3 + j] += b[i] * b[j];
            }
        }
    }
    let a = solve_dense(xtx, xty)?;
    let amplitude = a[1].hypot(a[2]);
    let phase = if amplitude == 0.0 { 0.0 } else { a[2].atan2(a[1]).rem_euclid(TAU) };
    let sse: f64 = basis
        .iter()
        .zip(values)
        .map(|(b, y)| (y - (a[0] + a[1] * b[1] + a[2] * b[2])).powi(2))
        .sum();
    Ok(SineFit {
        mean_level: a[0],
        amplitude,
        phase,
        period: PERIOD_DAYS,
        residual_rmse: (sse / values.len() as f64).sqrt(),
    })
}

/// Water/air amplitude ratio and the lag (days, in [0, period)) by which
/// the water signal trails the air signal.
pub fn amplitude_ratio_phase_lag(air: &SineFit, water: &SineFit) -> Result<(f64, f64)> {
    if !(air.amplitude > 0.0) {
        return Err(Error::ZeroVariance("air temperature amplitude".into()));
    }
    let lag = (air.phase - water.phase).rem_euclid(TAU) * PERIOD_DAYS / TAU;
    Ok((water.amplitude / air.amplitude, if lag >= PERIOD_DAYS { 0.0 } else { lag }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeClass {
    Atmospheric,
    ShallowGroundwater,
    DeepGroundwater,
    Dammed,
}

impl RegimeClass {
    pub const ALL: [RegimeClass; 4] = [
        Self::Atmospheric,
        Self::ShallowGroundwater,
        Self::DeepGroundwater,
        Self::Dammed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Atmospheric => "atmospheric",
            Self::ShallowGroundwater => "shallow_groundwater",
            Self::DeepGroundwater => "deep_groundwater",
            Self::Dammed => "dammed",
        }
    }
}

/// Axis-aligned (ratio, lag) rectangle, lower bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub lag_min: f64,
    pub lag_max: f64,
}

impl RegionBox {
    fn area(&self) -> f64 {
        (self.ratio_max - self.ratio_min) * (self.lag_max - self.lag_min)
    }

    fn overlaps(&self, o: &Self) -> bool {
        self.ratio_min < o.ratio_max && o.ratio_min < self.ratio_max && self.lag_min < o.lag_max && o.lag_min < self.lag_max
    }

    fn within(&self, o: &Self) -> bool {
        self.ratio_min >= o.ratio_min && self.ratio_max <= o.ratio_max && self.lag_min >= o.lag_min && self.lag_max <= o.lag_max
    }

    /// Half-open membership, closed on the domain's upper edges.
    fn contains(&self, ratio: f64, lag: f64, domain: &Self) -> bool {
        let in_axis = |v: f64, lo: f64, hi: f64, dom_hi: f64| v >= lo && (v < hi || (hi == dom_hi && v <= hi));
        in_axis(ratio, self.ratio_min, self.ratio_max, domain.ratio_max) && in_axis(lag, self.lag_min, self.lag_max, domain.lag_max)
    }
}

/// User-supplied decision regions; each class may own several boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub domain: RegionBox,
    pub atmospheric: Vec<RegionBox>,
    pub shallow_groundwater: Vec<RegionBox>,
    pub deep_groundwater: Vec<RegionBox>,
}

impl RegimeThresholds {
    fn boxes(&self) -> impl Iterator<Item = (RegimeClass, &RegionBox)> {
        self.atmospheric
            .iter()
            .map(|b| (RegimeClass::Atmospheric, b))
            .chain(self.shallow_groundwater.iter().map(|b| (RegimeClass::ShallowGroundwater, b)))
            .chain(self.deep_groundwater.iter().map(|b| (RegimeClass::DeepGroundwater, b)))
    }

    /// Boxes must be non-degenerate, lie inside the domain, not overlap and
    /// cover it.
    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if !(d.area() > 0.0) {
            return Err(Error::Config("regime domain must have positive extent".into()));
        }
        let boxes: Vec<&RegionBox> = self.boxes().map(|(_, b)| b).collect();
        for (i, b) in boxes.iter().enumerate() {
            if !(b.area() > 0.0) || !b.within(d) {
                return Err(Error::Config(format!("regime region {i} is empty or leaves the domain")));
            }
            if boxes[..i].iter().any(|o| o.overlaps(b)) {
                return Err(Error::Config(format!("regime region {i} overlaps another region")));
            }
        }
        let covered: f64 = boxes.iter().map(|b| b.area()).sum();
        if (covered - d.area()).abs() > 1e-9 * d.area() {
            return Err(Error::Config("regime regions do not cover the domain".into()));
        }
        Ok(())
    }

    pub fn classify(&self, ratio: f64, lag: f64) -> Result<RegimeClass> {
        let d = &self.domain;
        let r = ratio.clamp(d.ratio_min, d.ratio_max);
        let l = lag.clamp(d.lag_min, d.lag_max);
        self.boxes()
            .find(|(_, b)| b.contains(r, l, d))
            .map(|(c, _)| c)
            .ok_or_else(|| Error::Config(format!("no regime region contains ratio {r}, lag {l}")))
    }
}

/// Dammed when within 25 km (inclusive) of a major dam; otherwise by region.
pub fn classify_site(
    ratio: f64,
    lag: f64,
    dam_distance_km: Option<f64>,
    thresholds: Option<&RegimeThresholds>,
) -> Result<RegimeClass> {
    if dam_distance_km.is_some_and(|d| d <= DAM_DISTANCE_KM) {
        return Ok(RegimeClass::Dammed);
    }
    thresholds
        .ok_or_else(|| Error::Config("regime thresholds are not configured".into()))?
        .classify(ratio, lag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRegime {
    pub site_id: String,
    pub air: SineFit,
    pub water: SineFit,
    pub amplitude_ratio: f64,
    pub phase_lag_days: f64,
    /// Absent when the site is undammed and no thresholds are configured.
    pub class: Option<RegimeClass>,
}

/// Fit both sinusoids over the dates with water observations and classify.
pub fn analyze_site(site: &SiteRecord, thresholds: Option<&RegimeThresholds>) -> Result<SiteRegime> {
    let (idx, water): (Vec<usize>, Vec<f64>) = site.observations().unzip();
    let dates: Vec<NaiveDate> = idx.iter().map(|&i| site.dates[i]).collect();
    let air: Vec<f64> = idx.iter().map(|&i| site.tmean(i)).collect();
    let air_fit = fit_sine(&dates, &air)?;
    let water_fit = fit_sine(&dates, &water)?;
    let (ratio, lag) = amplitude_ratio_phase_lag(&air_fit, &water_fit)?;
    Ok(SiteRegime {
        site_id: site.site_id.clone(),
        air: air_fit,
        water: water_fit,
        amplitude_ratio: ratio,
        phase_lag_days: lag,
        class: if thresholds.is_some() || site.dam_distance_km.is_some_and(|d| d <= DAM_DISTANCE_KM) {
            Some(classify_site(ratio, lag, site.dam_distance_km, thresholds)?)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub class: RegimeClass,
    pub n_sites: usize,
    pub fraction: f64,
    /// Absent for classes without sites.
    pub median_rmse: Option<f64>,
    pub mean_bias: Option<f64>,
}

/// Median RMSE, mean bias and share of sites per regime class.
pub fn regime_error_report(classes: &BTreeMap<String, RegimeClass>, metrics: &[SiteMetrics]) -> Result<Vec<RegimeRow>> {
    let mut per: BTreeMap<RegimeClass, Vec<&SiteMetrics>> = BTreeMap::new();
    for m in metrics {
        let c = classes
            .get(&m.site_id)
            .ok_or_else(|| Error::MissingInput(format!("site {} has no regime class", m.site_id)))?;
        per.entry(*c).or_default().push(m);
    }
    let total = metrics.len();
    Ok(RegimeClass::ALL
        .iter()
        .map(|c| {
            let ms = per.get(c).cloned().unwrap_or_default();
            let rmse: Vec<f64> = ms.iter().map(|m| m.rmse).collect();
            let bias: Vec<f64> = ms.iter().map(|m| m.mean_bias).collect();
            RegimeRow {
                class: *c,
                n_sites: ms.len(),
                fraction: if total == 0 { 0.0 } else { ms.len() as f64 / total as f64 },
                median_rmse: (!ms.is_empty()).then(|| lower_median(&rmse)),
                mean_bias: (!ms.is_empty()).then(|| mean(&bias)),
            }
        })
        .collect())
}
