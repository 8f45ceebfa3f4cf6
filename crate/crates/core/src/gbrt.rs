//! Least-squares gradient boosting with exact greedy regression trees,
//! recursive feature elimination and permutation-sampling Shapley values.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{format_sig6, mean, spearman, Rng};

/// Named feature columns plus a regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>], target: Vec<f64>) -> Result<Self> {
        if rows.len() != target.len() {
            return Err(Error::Dimension(format!(
                "{} rows for {} targets",
                rows.len(),
                target.len()
            )));
        }
        let mut columns = vec![Vec::with_capacity(rows.len()); names.len()];
        for r in rows {
            if r.len() != names.len() {
                return Err(Error::Dimension("row width differs from feature count".into()));
            }
            for (c, &v) in columns.iter_mut().zip(r) {
                c.push(v);
            }
        }
        Self::from_columns(names, columns, target)
    }

    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension("column count differs from name count".into()));
        }
        if columns.iter().any(|c| c.len() != target.len()) {
            return Err(Error::Dimension("column length differs from target length".into()));
        }
        if columns.iter().flatten().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::MissingInput("feature matrix contains non-finite values".into()));
        }
        Ok(Self { names, columns, target })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows()).map(|i| self.row(i)).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_features(&self, idx: &[usize]) -> Self {
        Self {
            names: idx.iter().map(|&j| self.names[j].clone()).collect(),
            columns: idx.iter().map(|&j| self.columns[j].clone()).collect(),
            target: self.target.clone(),
        }
    }

    pub fn select_named(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.feature_index(n).ok_or_else(|| Error::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_features(&idx))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Axis-aligned binary tree; rows with `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
}

impl GbrtConfig {
    /// Metamodel predicting pairwise transfer RMSE.
    pub const METAMODEL: Self = Self { n_estimators: 152, learning_rate: 0.183, max_depth: 6, subsample: 1.0 };
    /// Library defaults used while eliminating features.
    pub const SELECTION: Self = Self { n_estimators: 100, learning_rate: 0.3, max_depth: 6, subsample: 1.0 };
    /// Attribute error-analysis regressor. Row subsampling makes the
    /// realizations differ from one another.
    pub const ERROR_ANALYSIS: Self = Self { n_estimators: 200, learning_rate: 0.015, max_depth: 3, subsample: 0.8 };

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config("learning rate must be ≥ 0 and subsample in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub base_prediction: f64,
    pub max_depth: usize,
    /// Total squared-error reduction attributed to each feature.
    pub importance: Vec<f64>,
    /// Training MSE after each stage.
    pub stage_mse: Vec<f64>,
}

impl GbrtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base_prediction + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, data: &FeatureMatrix) -> Vec<f64> {
        (0..data.n_rows()).map(|i| self.predict_row(&data.row(i))).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    residual: &'a [f64],
    max_depth: usize,
    nodes: Vec<Node>,
    gain: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.residual[i]).sum::<f64>() / rows.len() as f64
    }

    fn best_split(&self, rows: &[usize], sorted: &[Vec<usize>]) -> Option<SplitChoice> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let sum_sq: f64 = rows.iter().map(|&i| self.residual[i].powi(2)).sum();
        let parent = total * total / n as f64;
        let node_sse = sum_sq - parent;
        if !(node_sse > 0.0) {
            return None;
        }
        let mut best: Option<SplitChoice> = None;
        for (f, order) in sorted.iter().enumerate() {
            let col = &self.columns[f];
            let mut sl = 0.0;
            for k in 0..n - 1 {
                sl += self.residual[order[k]];
                let (a, b) = (col[order[k]], col[order[k + 1]]);
                if a >= b {
                    continue;
                }
                let nl = (k + 1) as f64;
                let sr = total - sl;
                let gain = sl * sl / nl + sr * sr / (n as f64 - nl) - parent;
                if gain > 1e-12 * node_sse && best.is_none_or(|c| gain > c.gain) {
                    let mut threshold = 0.5 * (a + b);
                    if threshold <= a {
                        threshold = b;
                    }
                    best = Some(SplitChoice { feature: f, threshold, gain });
                }
            }
        }
        best
    }

    /// `rows` ascending; `sorted[f]` the same rows ordered by feature f.
    fn build(&mut self, rows: Vec<usize>, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let choice = if depth < self.max_depth && rows.len() >= 2 {
            self.best_split(&rows, &sorted)
        } else {
            None
        };
        let Some(c) = choice else {
            self.nodes[id] = Node::Leaf { value: self.leaf_value(&rows) };
            return id;
        };
        self.gain[c.feature] += c.gain;
        let col = &self.columns[c.feature];
        let goes_left = |i: &usize| col[*i] < c.threshold;
        let (lr, rr): (Vec<usize>, Vec<usize>) = rows.iter().partition(|i| goes_left(i));
        let mut ls = Vec::with_capacity(sorted.len());
        let mut rs = Vec::with_capacity(sorted.len());
        for order in sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|i| goes_left(i));
            ls.push(l);
            rs.push(r);
        }
        let left = self.build(lr, ls, depth + 1);
        let right = self.build(rr, rs, depth + 1);
        self.nodes[id] = Node::Split { feature: c.feature, threshold: c.threshold, left, right };
        id
    }
}

/// Fit one squared-error regression tree to `residual` over `rows`.
/// Returns the tree and per-feature gain.
pub fn fit_tree(
    data: &FeatureMatrix,
    residual: &[f64],
    rows: &[usize],
    max_depth: usize,
) -> (RegressionTree, Vec<f64>) {
    fit_tree_presorted(data, residual, rows, &presort(data), max_depth)
}

/// Every row index ordered by each feature column.
fn presort(data: &FeatureMatrix) -> Vec<Vec<usize>> {
    data.columns
        .iter()
        .map(|col| {
            let mut o: Vec<usize> = (0..col.len()).collect();
            o.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            o
        })
        .collect()
}

fn fit_tree_presorted(
    data: &FeatureMatrix,
    residual: &[f64],
    rows: &[usize],
    orders: &[Vec<usize>],
    max_depth: usize,
) -> (RegressionTree, Vec<f64>) {
    let mut member = vec![false; data.n_rows()];
    for &i in rows {
        member[i] = true;
    }
    let sorted = orders
        .iter()
        .map(|o| o.iter().copied().filter(|&i| member[i]).collect())
        .collect();
    let mut rows = rows.to_vec();
    rows.sort_unstable();
    let mut b = TreeBuilder {
        columns: &data.columns,
        residual,
        max_depth,
        nodes: Vec::new(),
        gain: vec![0.0; data.n_features()],
    };
    b.build(rows, sorted, 0);
    (RegressionTree { nodes: b.nodes }, b.gain)
}

/// Stage-wise least-squares boosting: each tree fits the residuals of the
/// current ensemble.
pub fn fit_gbrt(data: &FeatureMatrix, config: &GbrtConfig, rng: &mut Rng) -> Result<GbrtModel> {
    config.validate()?;
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::Insufficient("boosting needs at least 2 rows".into()));
    }
    let base = mean(&data.target);
    let mut fitted = vec![base; n];
    let mut residual: Vec<f64> = data.target.iter().map(|y| y - base).collect();
    let mut importance = vec![0.0; data.n_features()];
    let mut trees = Vec::with_capacity(config.n_estimators);
    let mut stage_mse = Vec::with_capacity(config.n_estimators);
    let all: Vec<usize> = (0..n).collect();
    let n_sub = ((config.subsample * n as f64).round() as usize).clamp(2.min(n), n);
    let data_rows = data.rows();
    let orders = presort(data);
    for _ in 0..config.n_estimators {
        let rows = if n_sub < n {
            let mut p = rng.permutation(n);
            p.truncate(n_sub);
            p
        } else {
            all.clone()
        };
        let (tree, gain) = fit_tree_presorted(data, &residual, &rows, &orders, config.max_depth);
        for (acc, g) in importance.iter_mut().zip(gain) {
            *acc += g;
        }
        for i in 0..n {
            fitted[i] += config.learning_rate * tree.predict(&data_rows[i]);
            residual[i] = data.target[i] - fitted[i];
        }
        stage_mse.push(residual.iter().map(|r| r * r).sum::<f64>() / n as f64);
        trees.push(tree);
    }
    Ok(GbrtModel {
        feature_names: data.names.clone(),
        trees,
        learning_rate: config.learning_rate,
        base_prediction: base,
        max_depth: config.max_depth,
        importance,
        stage_mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfeConfig {
    /// Fraction of the remaining features removed per round (at least one).
    pub step_fraction: f64,
    pub folds: usize,
}

impl Default for RfeConfig {
    fn default() -> Self {
        Self { step_fraction: 0.1, folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeResult {
    pub selected: Vec<String>,
    pub best_cv_rmse: f64,
    /// (feature count, CV RMSE) for every evaluated set, largest first.
    pub trace: Vec<(usize, f64)>,
}

/// Number of features dropped from a set of `remaining`.
pub fn rfe_step(remaining: usize, step_fraction: f64) -> usize {
    ((remaining as f64 * step_fraction).floor() as usize)
        .max(1)
        .min(remaining.saturating_sub(1))
}

/// k-fold cross-validated RMSE with a fixed fold assignment.
pub fn cv_rmse(data: &FeatureMatrix, config: &GbrtConfig, folds: &[usize], k: usize, rng: &Rng) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.n_rows()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..data.n_rows()).filter(|&i| folds[i] == f).collect();
            let model = fit_gbrt(&data.select_rows(&train), config, &mut rng.child(f as u64))?;
            let sse = test
                .iter()
                .map(|&i| (model.predict_row(&data.row(i)) - data.target[i]).powi(2))
                .sum::<f64>();
            Ok((sse, test.len()))
        })
        .collect();
    let mut sse = 0.0;
    let mut n = 0;
    for p in parts {
        let (s, c) = p?;
        sse += s;
        n += c;
    }
    Ok((sse / n as f64).sqrt())
}

/// Recursive feature elimination scored by k-fold CV RMSE. Returns the
/// feature set with the lowest CV RMSE; ties favour the smaller set.
pub fn rfe_cv(data: &FeatureMatrix, config: &GbrtConfig, rfe: &RfeConfig, rng: &mut Rng) -> Result<RfeResult> {
    if rfe.folds < 2 {
        return Err(Error::Config("cross validation needs at least 2 folds".into()));
    }
    if data.n_rows() < rfe.folds {
        return Err(Error::Insufficient(format!(
            "{} rows for {} folds",
            data.n_rows(),
            rfe.folds
        )));
    }
    if data.n_features() == 0 {
        return Err(Error::Empty("no features to select from".into()));
    }
    let mut folds = vec![0; data.n_rows()];
    for (pos, i) in rng.permutation(data.n_rows()).into_iter().enumerate() {
        folds[i] = pos % rfe.folds;
    }
    let cv_rng = rng.child(0);
    let mut current: Vec<usize> = (0..data.n_features()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut round = 1u64;
    loop {
        let sub = data.select_features(&current);
        let score = cv_rmse(&sub, config, &folds, rfe.folds, &cv_rng)?;
        trace.push((current.len(), score));
        if best.as_ref().is_none_or(|(b, _)| score <= *b) {
            best = Some((score, current.clone()));
        }
        if current.len() == 1 {
            break;
        }
        let model = fit_gbrt(&sub, config, &mut rng.child(round))?;
        round += 1;
        let step = rfe_step(current.len(), rfe.step_fraction);
        let mut order: Vec<usize> = (0..current.len()).collect();
        order.sort_by(|&a, &b| model.importance[a].total_cmp(&model.importance[b]).then(a.cmp(&b)));
        let drop: Vec<usize> = order[..step].to_vec();
        current = current
            .iter()
            .enumerate()
            .filter(|(pos, _)| !drop.contains(pos))
            .map(|(_, &j)| j)
            .collect();
    }
    let (best_cv_rmse, idx) = best.expect("at least one evaluation");
    Ok(RfeResult {
        selected: idx.iter().map(|&j| data.names[j].clone()).collect(),
        best_cv_rmse,
        trace,
    })
}

/// Shapley contributions for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub prediction: f64,
    /// Mean model output over the whole background set.
    pub expected: f64,
    /// Monte-Carlo standard error of `Σ values`; zero for exhaustive runs.
    pub sum_std_error: f64,
}

impl ShapleyEstimate {
    /// `prediction − (Σ values + expected)`.
    pub fn efficiency_gap(&self) -> f64 {
        self.prediction - (self.values.iter().sum::<f64>() + self.expected)
    }
}

fn check_shapley_inputs(model: &GbrtModel, instance: &[f64], background: &[Vec<f64>]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::Empty("Shapley background set".into()));
    }
    let p = model.feature_names.len();
    if instance.len() != p || background.iter().any(|b| b.len() != p) {
        return Err(Error::Dimension("instance width differs from model features".into()));
    }
    Ok(())
}

/// Add the marginal contributions along one ordering starting from `base`.
fn walk_ordering(model: &GbrtModel, instance: &[f64], base: &[f64], order: &[usize], acc: &mut [f64]) {
    let mut z = base.to_vec();
    let mut prev = model.predict_row(&z);
    for &j in order {
        z[j] = instance[j];
        let cur = model.predict_row(&z);
        acc[j] += cur - prev;
        prev = cur;
    }
}

/// Monte-Carlo permutation-sampling Shapley values: each sample draws a
/// random feature ordering and a random background row for absent features.
pub fn shapley_values(
    model: &GbrtModel,
    instance: &[f64],
    background: &[Vec<f64>],
    samples: usize,
    rng: &mut Rng,
) -> Result<ShapleyEstimate> {
    check_shapley_inputs(model, instance, background)?;
    if samples == 0 {
        return Err(Error::Config("Shapley needs at least one sample".into()));
    }
    let p = instance.len();
    let mut acc = vec![0.0; p];
    let mut base_preds = Vec::with_capacity(samples);
    for _ in 0..samples {
        let order = rng.permutation(p);
        let b = &background[rng.below(background.len())];
        base_preds.push(model.predict_row(b));
        walk_ordering(model, instance, b, &order, &mut acc);
    }
    let values = acc.iter().map(|a| a / samples as f64).collect();
    let se = if samples > 1 {
        let m = mean(&base_preds);
        let var = base_preds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
        (var / samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(ShapleyEstimate {
        values,
        prediction: model.predict_row(instance),
        expected: mean(&background.iter().map(|b| model.predict_row(b)).collect::<Vec<_>>()),
        sum_std_error: se,
    })
}

fn all_orderings(p: usize) -> Vec<Vec<usize>> {
    if p == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in all_orderings(p - 1) {
        for pos in 0..=rest.len() {
            let mut o = rest.clone();
            o.insert(pos, p - 1);
            out.push(o);
        }
    }
    out
}

/// Permutation Shapley with every ordering and every background row
/// enumerated; exact for the interventional value function. At most 8
/// features.
pub fn shapley_exhaustive(model: &GbrtModel, instance: &[f64], background: &[Vec<f64>]) -> Result<ShapleyEstimate> {
    check_shapley_inputs(model, instance, background)?;
    let p = instance.len();
    if p > 8 {
        return Err(Error::Config("exhaustive Shapley limited to 8 features".into()));
    }
    let orders = all_orderings(p);
    let mut acc = vec![0.0; p];
    for b in background {
        for o in &orders {
            walk_ordering(model, instance, b, o, &mut acc);
        }
    }
    let total = (orders.len() * background.len()) as f64;
    Ok(ShapleyEstimate {
        values: acc.iter().map(|a| a / total).collect(),
        prediction: model.predict_row(instance),
        expected: mean(&background.iter().map(|b| model.predict_row(b)).collect::<Vec<_>>()),
        sum_std_error: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysisConfig {
    pub realizations: usize,
    pub model: GbrtConfig,
    pub selection_model: GbrtConfig,
    pub rfe: RfeConfig,
    pub shapley_samples: usize,
}

impl Default for ErrorAnalysisConfig {
    fn default() -> Self {
        Self {
            realizations: 100,
            model: GbrtConfig::ERROR_ANALYSIS,
            selection_model: GbrtConfig::SELECTION,
            rfe: RfeConfig::default(),
            shapley_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeImportance {
    pub attribute: String,
    pub mean_abs_shapley: f64,
    /// Spearman correlation of per-site signed Shapley values (averaged over
    /// realizations) with per-site RMSE; NaN when the Shapley values are
    /// constant.
    pub shapley_rmse_spearman: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeErrorReport {
    pub selection: RfeResult,
    pub attributes: Vec<AttributeImportance>,
}

impl AttributeErrorReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["attribute", "mean_abs_shapley", "shapley_rmse_spearman", "rank"])?;
        for a in &self.attributes {
            out.write_record([
                a.attribute.clone(),
                format_sig6(a.mean_abs_shapley),
                format_sig6(a.shapley_rmse_spearman),
                a.rank.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Explain per-site RMSE from site attributes: select features by RFE, fit
/// boosted realizations with distinct seeds and rank attributes by mean
/// absolute Shapley value.
pub fn attribute_error_analysis(
    attributes: &FeatureMatrix,
    config: &ErrorAnalysisConfig,
    rng: &mut Rng,
) -> Result<AttributeErrorReport> {
    let n = attributes.n_rows();
    if n < 10 {
        return Err(Error::Insufficient(format!("error analysis needs ≥ 10 sites, got {n}")));
    }
    if !(crate::numerics::population_std(&attributes.target) > 0.0) {
        return Err(Error::ZeroVariance("per-site RMSE".into()));
    }
    if config.realizations == 0 {
        return Err(Error::Config("at least one realization is required".into()));
    }
    let selection = rfe_cv(attributes, &config.selection_model, &config.rfe, &mut rng.child(0))?;
    let data = attributes.select_named(&selection.selected)?;
    let rows = data.rows();
    let p = data.n_features();
    let root = rng.child(1);
    let per_real: Vec<Result<Vec<Vec<f64>>>> = (0..config.realizations)
        .into_par_iter()
        .map(|r| {
            let mut rr = root.child(r as u64);
            let model = fit_gbrt(&data, &config.model, &mut rr)?;
            rows.iter()
                .map(|x| Ok(shapley_values(&model, x, &rows, config.shapley_samples, &mut rr)?.values))
                .collect()
        })
        .collect();
    // signed[site][feature], summed over realizations
    let mut signed = vec![vec![0.0; p]; n];
    let mut abs = vec![0.0; p];
    for real in per_real {
        for (i, phi) in real?.into_iter().enumerate() {
            for j in 0..p {
                signed[i][j] += phi[j];
                abs[j] += phi[j].abs();
            }
        }
    }
    let scale = 1.0 / config.realizations as f64;
    let mut attributes_out: Vec<AttributeImportance> = (0..p)
        .map(|j| {
            let col: Vec<f64> = signed.iter().map(|s| s[j] * scale).collect();
            AttributeImportance {
                attribute: data.names[j].clone(),
                mean_abs_shapley: abs[j] * scale / n as f64,
                shapley_rmse_spearman: spearman(&col, &data.target).unwrap_or(f64::NAN),
                rank: 0,
            }
        })
        .collect();
    attributes_out.sort_by(|a, b| {
        b.mean_abs_shapley
            .total_cmp(&a.mean_abs_shapley)
            .then_with(|| a.attribute.cmp(&b.attribute))
    });
    for (k, a) in attributes_out.iter_mut().enumerate() {
        a.rank = k + 1;
    }
    Ok(AttributeErrorReport { selection, attributes: attributes_out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn random_data(rng: &mut Rng, n: usize, p: usize, f: impl Fn(&[f64]) -> f64) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.uniform()).collect()).collect();
        let y = rows.iter().map(|r| f(r)).collect();
        FeatureMatrix::from_rows(names(p), &rows, y).unwrap()
    }

    /// Direct search over every feature and midpoint: minimum SSE split.
    fn exhaustive_stump(data: &FeatureMatrix) -> (usize, f64, f64, f64) {
        let y = &data.target;
        let base = mean(y);
        let r: Vec<f64> = y.iter().map(|v| v - base).collect();
        let mut best = (usize::MAX, 0.0, 0.0, 0.0, f64::INFINITY);
        for (f, col) in data.columns.iter().enumerate() {
            let mut vals = col.clone();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = 0.5 * (w[0] + w[1]);
                let left: Vec<usize> = (0..y.len()).filter(|&i| col[i] < t).collect();
                let right: Vec<usize> = (0..y.len()).filter(|&i| col[i] >= t).collect();
                let ml = left.iter().map(|&i| r[i]).sum::<f64>() / left.len() as f64;
                let mr = right.iter().map(|&i| r[i]).sum::<f64>() / right.len() as f64;
                let sse = left.iter().map(|&i| (r[i] - ml).powi(2)).sum::<f64>()
                    + right.iter().map(|&i| (r[i] - mr).powi(2)).sum::<f64>();
                if sse < best.4 {
                    best = (f, t, ml, mr, sse);
                }
            }
        }
        (best.0, best.1, best.2, best.3)
    }

    #[test]
    fn stump_matches_exhaustive_search() {
        let mut rng = Rng::new(1);
        for trial in 0..20 {
            let data = random_data(&mut rng, 40, 3, |x| {
                (if x[1] > 0.37 { 2.0 } else { 0.0 }) + 0.3 * x[0] + 0.1 * x[2] * (trial as f64 % 3.0)
            });
            let m = fit_gbrt(&data, &GbrtConfig { n_estimators: 1, learning_rate: 1.0, max_depth: 1, subsample: 1.0 }, &mut rng).unwrap();
            let (f, t, l, r) = exhaustive_stump(&data);
            match m.trees[0].nodes[0] {
                Node::Split { feature, threshold, left, right } => {
                    assert_eq!(feature, f);
                    assert_eq!(threshold, t);
                    let lv = match m.trees[0].nodes[left] { Node::Leaf { value } => value, _ => panic!() };
                    let rv = match m.trees[0].nodes[right] { Node::Leaf { value } => value, _ => panic!() };
                    assert_eq!(lv, l);
                    assert_eq!(rv, r);
                }
                _ => panic!("expected a split"),
            }
        }
    }

    #[test]
    fn separable_stump_leaves_are_group_means() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0], vec![10.0], vec![11.0]];
        let y = vec![0.0, 0.0, 0.0, 5.0, 5.0];
        let data = FeatureMatrix::from_rows(names(1), &rows, y).unwrap();
        let m = fit_gbrt(&data, &GbrtConfig { n_estimators: 1, learning_rate: 1.0, max_depth: 1, subsample: 1.0 }, &mut Rng::new(0)).unwrap();
        assert!(matches!(m.trees[0].nodes[0], Node::Split { threshold, .. } if threshold == 6.5));
        assert!((m.predict_row(&[2.0]) - 0.0).abs() < 1e-12);
        assert!((m.predict_row(&[10.5]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_predicts_base() {
        let mut rng = Rng::new(2);
        let data = random_data(&mut rng, 30, 2, |x| x[0] * 3.0);
        let m = fit_gbrt(&data, &GbrtConfig { learning_rate: 0.0, ..GbrtConfig::METAMODEL }, &mut rng).unwrap();
        let base = mean(&data.target);
        assert!(m.predict(&data).iter().all(|p| *p == base));
    }

    #[test]
    fn constant_target_is_base_only() {
        let mut rng = Rng::new(2);
        let mut data = random_data(&mut rng, 30, 2, |_| 4.0);
        data.target = vec![4.0; 30];
        let m = fit_gbrt(&data, &GbrtConfig::METAMODEL, &mut rng).unwrap();
        assert_eq!(m.trees.len(), 152);
        assert!(m.predict(&data).iter().all(|p| *p == 4.0));
    }

    #[test]
    fn stage_mse_non_increasing() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let data = random_data(&mut rng, 100, 4, |x| (6.0 * x[0]).sin() + x[1] * x[2]);
            let m = fit_gbrt(&data, &GbrtConfig { n_estimators: 200, learning_rate: 0.015, max_depth: 3, subsample: 1.0 }, &mut rng).unwrap();
            for w in m.stage_mse.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn depth_is_bounded() {
        let mut rng = Rng::new(4);
        let data = random_data(&mut rng, 80, 3, |x| x[0] * x[1] + x[2]);
        let m = fit_gbrt(&data, &GbrtConfig { n_estimators: 5, learning_rate: 0.5, max_depth: 3, subsample: 1.0 }, &mut rng).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn single_row_is_rejected() {
        let data = FeatureMatrix::from_rows(names(1), &[vec![1.0]], vec![1.0]).unwrap();
        assert!(matches!(fit_gbrt(&data, &GbrtConfig::METAMODEL, &mut Rng::new(0)), Err(Error::Insufficient(_))));
    }

    #[test]
    fn rfe_recovers_signal_feature() {
        let mut rng = Rng::new(5);
        let data = random_data(&mut rng, 120, 10, |x| 4.0 * x[0] + (8.0 * x[0]).sin());
        let res = rfe_cv(&data, &GbrtConfig::SELECTION, &RfeConfig::default(), &mut rng).unwrap();
        assert!(res.selected.contains(&"x0".to_string()), "{:?}", res.selected);
        assert_eq!(res.trace[0].0, 10);
    }

    #[test]
    fn rfe_single_feature_unchanged() {
        let mut rng = Rng::new(6);
        let data = random_data(&mut rng, 30, 1, |x| x[0]);
        let res = rfe_cv(&data, &GbrtConfig::SELECTION, &RfeConfig::default(), &mut rng).unwrap();
        assert_eq!(res.selected, vec!["x0"]);
    }

    #[test]
    fn rfe_is_deterministic() {
        let data = random_data(&mut Rng::new(7), 60, 6, |x| x[0] + x[3]);
        let a = rfe_cv(&data, &GbrtConfig::SELECTION, &RfeConfig::default(), &mut Rng::new(9)).unwrap();
        let b = rfe_cv(&data, &GbrtConfig::SELECTION, &RfeConfig::default(), &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rfe_step_sizes() {
        assert_eq!(rfe_step(300, 0.1), 30);
        assert_eq!(rfe_step(9, 0.1), 1);
        assert_eq!(rfe_step(2, 0.5), 1);
        assert_eq!(rfe_step(1, 0.1), 0);
    }

    /// Shapley by the subset-weight formula with an independently computed
    /// value function v(S) = mean over background of f(x_S, b_rest).
    fn subset_shapley(model: &GbrtModel, x: &[f64], bg: &[Vec<f64>]) -> Vec<f64> {
        let p = x.len();
        let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
        let v = |mask: usize| {
            bg.iter()
                .map(|b| {
                    let z: Vec<f64> = (0..p).map(|j| if mask >> j & 1 == 1 { x[j] } else { b[j] }).collect();
                    model.predict_row(&z)
                })
                .sum::<f64>()
                / bg.len() as f64
        };
        (0..p)
            .map(|j| {
                (0..1usize << p)
                    .filter(|m| m >> j & 1 == 0)
                    .map(|m| {
                        let s = m.count_ones() as usize;
                        fact(s) * fact(p - s - 1) / fact(p) * (v(m | 1 << j) - v(m))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn exhaustive_matches_subset_formula() {
        let mut rng = Rng::new(10);
        for p in [2, 3] {
            let data = random_data(&mut rng, 60, p, |x| x[0] * x[1] + (3.0 * x[p - 1]).cos());
            let model = fit_gbrt(&data, &GbrtConfig { n_estimators: 30, learning_rate: 0.3, max_depth: 3, subsample: 1.0 }, &mut rng).unwrap();
            let bg: Vec<Vec<f64>> = data.rows().into_iter().take(8).collect();
            for i in 10..15 {
                let x = data.row(i);
                let ex = shapley_exhaustive(&model, &x, &bg).unwrap();
                let oracle = subset_shapley(&model, &x, &bg);
                for j in 0..p {
                    assert!((ex.values[j] - oracle[j]).abs() < 1e-9);
                }
                assert!(ex.efficiency_gap().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ignored_feature_has_zero_shapley() {
        let mut rng = Rng::new(11);
        let data = random_data(&mut rng, 50, 3, |x| x[0] + 2.0 * x[2]);
        let mut model = fit_gbrt(&data, &GbrtConfig::SELECTION, &mut rng).unwrap();
        // rebuild a model that cannot route on feature 1
        model.trees.retain(|t| !t.nodes.iter().any(|n| matches!(n, Node::Split { feature: 1, .. })));
        let bg = data.rows();
        let s = shapley_values(&model, &data.row(0), &bg, 64, &mut rng).unwrap();
        assert_eq!(s.values[1], 0.0);
    }

    #[test]
    fn additive_model_background_zero() {
        // f(x) = x0 + x1 on a grid fine enough for exact stumps
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                rows.push(vec![a as f64, b as f64]);
                y.push(a as f64 + b as f64);
            }
        }
        let data = FeatureMatrix::from_rows(names(2), &rows, y).unwrap();
        let model = fit_gbrt(&data, &GbrtConfig { n_estimators: 1, learning_rate: 1.0, max_depth: 2, subsample: 1.0 }, &mut Rng::new(0)).unwrap();
        let s = shapley_exhaustive(&model, &[1.0, 1.0], &[vec![0.0, 0.0]]).unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-12);
        assert!((s.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_efficiency_within_three_standard_errors() {
        let mut rng = Rng::new(12);
        let data = random_data(&mut rng, 80, 4, |x| x[0] * 2.0 + x[1] * x[2]);
        let model = fit_gbrt(&data, &GbrtConfig::SELECTION, &mut rng).unwrap();
        let bg = data.rows();
        for i in 0..10 {
            let s = shapley_values(&model, &data.row(i), &bg, 64, &mut rng).unwrap();
            assert!(s.efficiency_gap().abs() <= 3.0 * s.sum_std_error + 1e-12);
        }
    }

    #[test]
    fn empty_background_is_an_error() {
        let data = random_data(&mut Rng::new(1), 10, 2, |x| x[0]);
        let model = fit_gbrt(&data, &GbrtConfig::SELECTION, &mut Rng::new(1)).unwrap();
        assert!(matches!(shapley_values(&model, &[0.0, 0.0], &[], 4, &mut Rng::new(1)), Err(Error::Empty(_))));
    }
}
