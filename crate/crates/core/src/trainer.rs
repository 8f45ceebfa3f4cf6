//! Sequence windows, masked loss, AdamW, validation-based early stopping and
//! realization ensembles.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{build_dynamic_inputs, FeatureSpec, SiteRecord};
use crate::error::{Error, Result};
use crate::lstm::{DropoutMasks, LstmConfig, LstmParams, DEFAULT_SEQUENCE_LENGTH, DEFAULT_WINDOW_SHIFT};
use crate::normalize::Normalizer;
use crate::numerics::Rng;

/// One row of the LSTM hyperparameter preset table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPreset {
    pub batch_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub weight_decay: f64,
    pub dropout: f64,
}

/// Default hyperparameter presets, cycled over ensemble members.
pub const DEFAULT_PRESETS: [HyperPreset; 5] = [
    HyperPreset { batch_size: 496, hidden_size: 570, num_layers: 4, weight_decay: 4.128e-06, dropout: 2.216e-05 },
    HyperPreset { batch_size: 236, hidden_size: 594, num_layers: 3, weight_decay: 4.753e-07, dropout: 0.0138 },
    HyperPreset { batch_size: 521, hidden_size: 699, num_layers: 5, weight_decay: 2.974e-07, dropout: 0.0883 },
    HyperPreset { batch_size: 201, hidden_size: 760, num_layers: 3, weight_decay: 9.684e-06, dropout: 0.0518 },
    HyperPreset { batch_size: 489, hidden_size: 764, num_layers: 5, weight_decay: 2.005e-04, dropout: 0.0145 },
];

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_PATIENCE: usize = 300;
pub const DEFAULT_MAX_EPOCHS: usize = 1000;
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Placement of one training window inside a site's date axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    /// Index of the first real day.
    pub start: usize,
    /// Leading padding steps (only for series shorter than the window).
    pub pad: usize,
    /// Total steps, padding included.
    pub steps: usize,
    /// The first window of a site may predict every real day.
    pub first: bool,
    pub shift: usize,
}

impl Window {
    /// Whether step `k` of the window may contribute predictions.
    pub fn maskable(&self, k: usize) -> bool {
        k >= self.pad && (self.first || k >= self.shift)
    }

    /// Series index of step `k`, if it is a real day.
    pub fn day(&self, k: usize) -> Option<usize> {
        (k >= self.pad).then(|| self.start + k - self.pad)
    }
}

/// Windows at offsets 0, shift, 2·shift, …, plus a final window snapped to
/// the last day when the stride does not land there.
pub fn make_windows(n_days: usize, sequence_length: usize, shift: usize) -> Result<Vec<Window>> {
    if n_days == 0 {
        return Err(Error::Empty("series has no days".into()));
    }
    if shift == 0 || shift > sequence_length {
        return Err(Error::Config(format!(
            "window shift {shift} must be in 1..={sequence_length}"
        )));
    }
    if n_days < sequence_length {
        return Ok(vec![Window {
            start: 0,
            pad: sequence_length - n_days,
            steps: sequence_length,
            first: true,
            shift,
        }]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + sequence_length <= n_days {
        out.push(Window {
            start,
            pad: 0,
            steps: sequence_length,
            first: start == 0,
            shift,
        });
        start += shift;
    }
    let last_end = out.last().map_or(0, |w| w.start + sequence_length);
    if last_end < n_days {
        out.push(Window {
            start: n_days - sequence_length,
            pad: 0,
            steps: sequence_length,
            first: false,
            shift,
        });
    }
    Ok(out)
}

/// Windowed, normalized training rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceBatch {
    pub steps: usize,
    pub input_size: usize,
    /// batch × steps × input_size
    pub inputs: Vec<f64>,
    /// batch × steps; NaN where absent
    pub targets: Vec<f64>,
    pub prediction_mask: Vec<bool>,
    pub site_ids: Vec<String>,
}

impl SequenceBatch {
    pub fn new(steps: usize, input_size: usize) -> Self {
        Self {
            steps,
            input_size,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.site_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.site_ids.is_empty()
    }

    pub fn row_inputs(&self, b: usize) -> &[f64] {
        let n = self.steps * self.input_size;
        &self.inputs[b * n..(b + 1) * n]
    }

    pub fn row_targets(&self, b: usize) -> &[f64] {
        &self.targets[b * self.steps..(b + 1) * self.steps]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.prediction_mask[b * self.steps..(b + 1) * self.steps]
    }

    pub fn masked_count(&self) -> usize {
        self.prediction_mask.iter().filter(|m| **m).count()
    }

    pub fn push_row(&mut self, site_id: &str, inputs: &[f64], targets: &[f64], mask: &[bool]) -> Result<()> {
        if inputs.len() != self.steps * self.input_size || targets.len() != self.steps || mask.len() != self.steps {
            return Err(Error::Dimension("batch row shape mismatch".into()));
        }
        if mask.iter().zip(targets).any(|(m, t)| *m && t.is_nan()) {
            return Err(Error::Dimension("mask set on an absent target".into()));
        }
        self.inputs.extend_from_slice(inputs);
        self.targets.extend_from_slice(targets);
        self.prediction_mask.extend_from_slice(mask);
        self.site_ids.push(site_id.to_string());
        Ok(())
    }

    /// Window one site. `inputs` is the normalized `days × input_size` series;
    /// `targets` holds normalized targets, `None` where unobserved or excluded.
    /// Windows without any maskable target are skipped.
    pub fn push_site(
        &mut self,
        site_id: &str,
        inputs: &[f64],
        targets: &[Option<f64>],
        shift: usize,
    ) -> Result<()> {
        let d = self.input_size;
        let days = targets.len();
        if inputs.len() != days * d {
            return Err(Error::Dimension("site inputs do not match target count".into()));
        }
        for w in make_windows(days, self.steps, shift)? {
            let mut x = vec![0.0; self.steps * d];
            let mut y = vec![f64::NAN; self.steps];
            let mut m = vec![false; self.steps];
            for k in 0..w.steps {
                if let Some(i) = w.day(k) {
                    x[k * d..(k + 1) * d].copy_from_slice(&inputs[i * d..(i + 1) * d]);
                    if let Some(t) = targets[i] {
                        y[k] = t;
                        m[k] = w.maskable(k);
                    }
                }
            }
            if m.iter().any(|v| *v) {
                self.push_row(site_id, &x, &y, &m)?;
            }
        }
        Ok(())
    }
}

/// Mean squared error over mask-true cells; 0 (with a warning) for an empty mask.
pub fn masked_mse(predictions: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64> {
    if predictions.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Dimension("masked_mse shape mismatch".into()));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for i in 0..mask.len() {
        if mask[i] {
            sse += (predictions[i] - targets[i]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("masked_mse called with an empty mask");
        return Ok(0.0);
    }
    Ok(sse / n as f64)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p` for every parameter tensor.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let old = p[i];
                p[i] = old - self.lr * m_hat / (v_hat.sqrt() + self.eps) - self.lr * self.weight_decay * old;
            }
        }
    }
}

/// Earliest-dates validation slice of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSplit {
    pub training: Vec<usize>,
    pub validation: Vec<usize>,
}

/// The earliest 20 % of a site's observed dates (floor, at least one) go to
/// validation; the rest stay in training.
pub fn split_validation(site: &SiteRecord) -> ValidationSplit {
    let observed: Vec<usize> = site.observations().map(|(i, _)| i).collect();
    let n_val = ((observed.len() as f64 * VALIDATION_FRACTION).floor() as usize)
        .max(1)
        .min(observed.len());
    ValidationSplit {
        validation: observed[..n_val].to_vec(),
        training: observed[n_val..].to_vec(),
    }
}

/// Per-run optimizer and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub hyper_preset: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch size and max epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Patience-based early stopping on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Record an epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_loss"])?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                format!("{:.6e}", r.train_loss),
                format!("{:.6e}", r.val_loss),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Training and validation windows of one job.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: SequenceBatch,
    pub validation: SequenceBatch,
}

/// Summed SSE, masked count and summed SSE gradient over the given rows of a
/// batch. Rows are processed in parallel and reduced in index order.
pub fn batch_gradient(
    params: &LstmParams,
    batch: &SequenceBatch,
    rows: &[usize],
    dropout_rate: f64,
    rng: &Rng,
) -> Result<(f64, usize, LstmParams)> {
    let parts: Vec<Result<(f64, usize, LstmParams)>> = rows
        .par_iter()
        .map(|&b| {
            let mut r = rng.child(b as u64);
            let masks = DropoutMasks::sample(params, batch.steps, dropout_rate, &mut r);
            params.sse_gradient(
                batch.row_inputs(b),
                batch.steps,
                batch.row_targets(b),
                batch.row_mask(b),
                masks.as_ref(),
            )
        })
        .collect();
    let mut sse = 0.0;
    let mut count = 0;
    let mut grad = params.zeros_like();
    for p in parts {
        let (s, c, g) = p?;
        sse += s;
        count += c;
        grad.add_assign(&g);
    }
    Ok((sse, count, grad))
}

/// Masked MSE of the whole batch without dropout.
pub fn batch_loss(params: &LstmParams, batch: &SequenceBatch) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let pred = params.forward(batch.row_inputs(b), batch.steps)?;
            let mut s = 0.0;
            let mut n = 0;
            for ((p, t), m) in pred.iter().zip(batch.row_targets(b)).zip(batch.row_mask(b)) {
                if *m {
                    s += (p - t).powi(2);
                    n += 1;
                }
            }
            Ok((s, n))
        })
        .collect();
    let mut sse = 0.0;
    let mut n = 0;
    for p in parts {
        let (s, c) = p?;
        sse += s;
        n += c;
    }
    if n == 0 {
        log::warn!("loss requested on a batch without masked targets");
        return Ok(0.0);
    }
    Ok(sse / n as f64)
}

/// Train one LSTM realization. Returns the parameters of the epoch with the
/// lowest validation loss.
pub fn train(
    config: &LstmConfig,
    data: &TrainingData,
    tc: &TrainConfig,
) -> Result<(LstmParams, TrainingLog)> {
    config.validate()?;
    tc.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    let root = Rng::new(tc.seed);
    let mut params = LstmParams::xavier(data.train.input_size, config, 1, &mut root.child(0));
    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = params.clone();
    let mut log = TrainingLog::default();
    let has_validation = data.validation.masked_count() > 0;

    for epoch in 1..=tc.max_epochs {
        let erng = root.child(epoch as u64);
        let mut shuffle_rng = erng.child(u64::MAX);
        shuffle_rng.shuffle(&mut order);
        let mut sse = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let brng = erng.child(bi as u64);
            let (s, c, mut g) = batch_gradient(&params, &data.train, chunk, config.dropout_rate, &brng)?;
            if c == 0 {
                continue;
            }
            if !s.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite batch loss {s}"),
                });
            }
            sse += s;
            count += c;
            g.scale(1.0 / c as f64);
            let grads = g.tensors();
            opt.step(params.tensors_mut(), grads);
        }
        let train_loss = if count > 0 { sse / count as f64 } else { 0.0 };
        let val_loss = if has_validation {
            batch_loss(&params, &data.validation)?
        } else {
            train_loss
        };
        if !train_loss.is_finite() || !val_loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("train loss {train_loss}, validation loss {val_loss}"),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = params.clone();
        }
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val) = stopper.best();
    log.best_epoch = best_epoch;
    log.best_val_loss = best_val;
    Ok((best, log))
}

/// Ensemble-level settings shared by every member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub presets: Vec<HyperPreset>,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub sequence_length: usize,
    pub window_shift: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            presets: DEFAULT_PRESETS.to_vec(),
            learning_rate: DEFAULT_LEARNING_RATE,
            patience: DEFAULT_PATIENCE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            window_shift: DEFAULT_WINDOW_SHIFT,
        }
    }
}

impl TrainingSettings {
    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() {
            return Err(Error::Config("at least one hyperparameter preset is required".into()));
        }
        if self.window_shift == 0 || self.window_shift > self.sequence_length {
            return Err(Error::Config("window shift must be in 1..=sequence length".into()));
        }
        Ok(())
    }

    /// Preset index of ensemble member `k`.
    pub fn preset_for(&self, k: usize) -> usize {
        k % self.presets.len()
    }
}

/// Preset indices assigned to an ensemble of `n` members.
pub fn preset_cycle(n: usize, n_presets: usize) -> Vec<usize> {
    (0..n).map(|k| k % n_presets).collect()
}

/// Seed of ensemble member `k` under `base_seed`.
pub fn member_seed(base_seed: u64, k: usize) -> u64 {
    Rng::new(base_seed).child(k as u64).seed()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub params: LstmParams,
    pub normalizer: Normalizer,
    pub preset_index: usize,
    pub seed: u64,
    pub log: TrainingLog,
}

/// Realization ensemble; predictions are member means in °C.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub feature_spec: FeatureSpec,
    pub sequence_length: usize,
    pub window_shift: usize,
}

/// Raw inputs and normalized targets for a collection of sites.
struct PreparedSite {
    id: String,
    raw: Vec<Vec<f64>>,
    targets: Vec<Option<f64>>,
    validation: BTreeSet<usize>,
}

/// Fit the shared normalizer and window every site into training and
/// validation batches. Validation dates are masked out of the training
/// windows in place.
pub fn prepare_training_data(
    sites: &[&SiteRecord],
    spec: &FeatureSpec,
    settings: &TrainingSettings,
) -> Result<(Normalizer, TrainingData)> {
    if sites.is_empty() {
        return Err(Error::Empty("no training sites".into()));
    }
    let names = spec.feature_names();
    let mut prepared = Vec::with_capacity(sites.len());
    for s in sites {
        let split = split_validation(s);
        prepared.push(PreparedSite {
            id: s.site_id.clone(),
            raw: build_dynamic_inputs(s, spec)?,
            targets: s.water_temp.clone(),
            validation: split.validation.into_iter().collect(),
        });
    }
    let train_targets: Vec<f64> = prepared
        .iter()
        .flat_map(|p| {
            p.targets
                .iter()
                .enumerate()
                .filter(|(i, t)| t.is_some() && !p.validation.contains(i))
                .map(|(_, t)| t.unwrap())
        })
        .collect();
    let normalizer = Normalizer::fit(
        &names,
        prepared.iter().flat_map(|p| p.raw.iter().map(Vec::as_slice)),
        &train_targets,
    )?;
    let d = normalizer.output_size();
    let mut train = SequenceBatch::new(settings.sequence_length, d);
    let mut validation = SequenceBatch::new(settings.sequence_length, d);
    for p in &prepared {
        let mut x = Vec::with_capacity(p.raw.len() * d);
        for row in &p.raw {
            normalizer.transform_row_into(row, &mut x);
        }
        let norm = |keep_val: bool| -> Vec<Option<f64>> {
            p.targets
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    t.filter(|_| p.validation.contains(&i) == keep_val)
                        .map(|v| normalizer.transform_target(v))
                })
                .collect()
        };
        train.push_site(&p.id, &x, &norm(false), settings.window_shift)?;
        validation.push_site(&p.id, &x, &norm(true), settings.window_shift)?;
    }
    Ok((normalizer, TrainingData { train, validation }))
}

/// Train `n_members` realizations; member `k` uses preset `k mod presets`
/// and a seed derived from `(base_seed, k)`.
pub fn train_ensemble(
    sites: &[&SiteRecord],
    spec: &FeatureSpec,
    settings: &TrainingSettings,
    n_members: usize,
    base_seed: u64,
) -> Result<EnsembleModel> {
    if n_members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    settings.validate()?;
    spec.validate()?;
    let (normalizer, data) = prepare_training_data(sites, spec, settings)?;
    let members: Vec<Result<EnsembleMember>> = (0..n_members)
        .into_par_iter()
        .map(|k| {
            let preset_index = settings.preset_for(k);
            let preset = settings.presets[preset_index];
            let config = LstmConfig {
                hidden_size: preset.hidden_size,
                num_layers: preset.num_layers,
                dropout_rate: preset.dropout,
                sequence_length: settings.sequence_length,
                window_shift: settings.window_shift,
            };
            let seed = member_seed(base_seed, k);
            let tc = TrainConfig {
                learning_rate: settings.learning_rate,
                batch_size: preset.batch_size,
                weight_decay: preset.weight_decay,
                patience: settings.patience,
                max_epochs: settings.max_epochs,
                seed,
                hyper_preset: preset_index,
            };
            let (params, log) = train(&config, &data, &tc)?;
            Ok(EnsembleMember {
                params,
                normalizer: normalizer.clone(),
                preset_index,
                seed,
                log,
            })
        })
        .collect();
    Ok(EnsembleModel {
        members: members.into_iter().collect::<Result<_>>()?,
        feature_spec: spec.clone(),
        sequence_length: settings.sequence_length,
        window_shift: settings.window_shift,
    })
}

/// Predict a full normalized series with one parameter set: every day takes
/// the output of the last window whose prediction region covers it.
pub fn predict_series(
    params: &LstmParams,
    inputs: &[f64],
    days: usize,
    sequence_length: usize,
    shift: usize,
) -> Result<Vec<f64>> {
    let d = params.input_size;
    if inputs.len() != days * d {
        return Err(Error::Dimension("series inputs do not match day count".into()));
    }
    let mut out = vec![f64::NAN; days];
    let mut x = vec![0.0; sequence_length * d];
    for w in make_windows(days, sequence_length, shift)? {
        x.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..w.steps {
            if let Some(i) = w.day(k) {
                x[k * d..(k + 1) * d].copy_from_slice(&inputs[i * d..(i + 1) * d]);
            }
        }
        let y = params.forward(&x, w.steps)?;
        for k in 0..w.steps {
            if let (true, Some(i)) = (w.maskable(k), w.day(k)) {
                out[i] = y[k];
            }
        }
    }
    Ok(out)
}

impl EnsembleModel {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_spec.feature_names()
    }

    pub fn input_size(&self) -> usize {
        self.members.first().map_or(0, |m| m.params.input_size)
    }

    /// Per-member predictions (°C) from raw per-date input rows.
    pub fn member_predictions(&self, raw_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let days = raw_rows.len();
        self.members
            .iter()
            .map(|m| {
                let mut x = Vec::with_capacity(days * m.normalizer.output_size());
                for r in raw_rows {
                    m.normalizer.transform_row_into(r, &mut x);
                }
                let z = predict_series(&m.params, &x, days, self.sequence_length, self.window_shift)?;
                Ok(z.into_iter().map(|v| m.normalizer.inverse_target(v)).collect())
            })
            .collect()
    }

    /// Ensemble mean (°C) from raw per-date input rows.
    pub fn predict_raw(&self, raw_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let per = self.member_predictions(raw_rows)?;
        Ok(mean_of_members(&per))
    }

    pub fn predict_site(&self, site: &SiteRecord) -> Result<Vec<f64>> {
        self.predict_raw(&build_dynamic_inputs(site, &self.feature_spec)?)
    }
}

/// Element-wise arithmetic mean of equally long member series.
pub fn mean_of_members(per: &[Vec<f64>]) -> Vec<f64> {
    let n = per.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| per.iter().map(|p| p[i]).sum::<f64>() / per.len() as f64)
        .collect()
}
