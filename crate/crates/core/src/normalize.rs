//! Global z-score normalization fitted on the training pool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std(&self) -> f64 {
        (self.m2 / self.n as f64).max(0.0).sqrt()
    }
}

/// Per-feature and target statistics. Features with zero variance are
/// dropped from the transformed vectors and listed in `dropped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<String>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalizer {
    /// Population mean/std of every feature over `rows`, and of `targets`.
    pub fn fit<'a, I>(feature_names: &[String], rows: I, targets: &[f64]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let d = feature_names.len();
        let mut acc = vec![Welford::default(); d];
        for row in rows {
            if row.len() != d {
                return Err(Error::Dimension(format!(
                    "row of {} values for {d} features",
                    row.len()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(row) {
                a.push(x);
            }
        }
        if acc.first().is_some_and(|a| a.n < 2) {
            return Err(Error::Insufficient(
                "normalizer needs at least 2 observations per feature".into(),
            ));
        }
        if targets.len() < 2 {
            return Err(Error::Insufficient(
                "normalizer needs at least 2 target observations".into(),
            ));
        }
        let mut tgt = Welford::default();
        for &t in targets {
            tgt.push(t);
        }
        if !(tgt.std() > 0.0) {
            return Err(Error::ZeroVariance("target".into()));
        }
        let means: Vec<f64> = acc.iter().map(|a| a.mean).collect();
        let stds: Vec<f64> = acc.iter().map(Welford::std).collect();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for (j, &s) in stds.iter().enumerate() {
            // Relative guard: a constant column can pick up rounding noise.
            if s > 1e-12 * means[j].abs().max(1.0) {
                kept.push(j);
            } else {
                log::warn!("feature {} has zero variance; dropped", feature_names[j]);
                dropped.push(feature_names[j].clone());
            }
        }
        Ok(Self {
            feature_names: feature_names.to_vec(),
            means,
            stds,
            kept,
            dropped,
            target_mean: tgt.mean,
            target_std: tgt.std(),
        })
    }

    fn index(&self, feature: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == feature)
            .ok_or_else(|| Error::UnknownFeature(feature.to_string()))
    }

    pub fn is_dropped(&self, feature: &str) -> bool {
        self.dropped.iter().any(|d| d == feature)
    }

    pub fn transform(&self, x: f64, feature: &str) -> Result<f64> {
        let j = self.index(feature)?;
        if self.is_dropped(feature) {
            return Err(Error::ZeroVariance(feature.to_string()));
        }
        Ok((x - self.means[j]) / self.stds[j])
    }

    pub fn inverse_transform(&self, z: f64, feature: &str) -> Result<f64> {
        let j = self.index(feature)?;
        if self.is_dropped(feature) {
            return Err(Error::ZeroVariance(feature.to_string()));
        }
        Ok(z * self.stds[j] + self.means[j])
    }

    /// Number of features surviving the zero-variance drop.
    pub fn output_size(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_names(&self) -> Vec<String> {
        self.kept.iter().map(|&j| self.feature_names[j].clone()).collect()
    }

    /// Normalize one raw input vector, keeping only retained features.
    pub fn transform_row_into(&self, raw: &[f64], out: &mut Vec<f64>) {
        out.extend(
            self.kept
                .iter()
                .map(|&j| (raw[j] - self.means[j]) / self.stds[j]),
        );
    }

    pub fn transform_row(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.kept.len());
        self.transform_row_into(raw, &mut out);
        out
    }

    pub fn transform_target(&self, t: f64) -> f64 {
        (t - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
