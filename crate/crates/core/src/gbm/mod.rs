//! Least-squares gradient-boosted regression trees.
//!
//! Training starts from the target mean and adds depth-limited trees fit to
//! the current residuals. Split search is exact: every midpoint between
//! consecutive distinct sorted feature values is scored by variance
//! reduction. Training is deterministic for a fixed configuration and does
//! not depend on the number of worker threads.

mod tree;

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureConfig, FeatureVector};

pub use tree::{Node, RegressionTree};

/// Version tag written into every model file.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("row {row}: feature `{feature}` is not finite")]
    NonFiniteFeature { row: usize, feature: String },
    #[error("row {0}: target is not finite")]
    NonFiniteTarget(usize),
    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("feature `{feature}` has non-finite value {value}")]
    NonFiniteInput { feature: String, value: f64 },
    #[error("feature set mismatch: model expects {expected:?}, data has {found:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("cannot compute an error metric over zero samples")]
    Empty,
    #[error("incompatible model format version {found:?}, this build reads version {expected}")]
    IncompatibleVersion { found: Option<u64>, expected: u32 },
    #[error("model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, GbmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
    pub seed: u64,
    pub feature_names: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 500,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 20,
            subsample: 1.0,
            seed: 0,
            feature_names: FeatureConfig::default().model_inputs(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GbmError::InvalidConfig(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            ));
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!(
                "subsample must be in (0, 1], got {}",
                self.subsample
            ));
        }
        if self.feature_names.is_empty() {
            return bad("feature_names is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.feature_names.iter().find(|n| !seen.insert(n.as_str())) {
            return bad(format!("duplicate feature `{dup}`"));
        }
        Ok(())
    }
}

/// Anything that can supply named feature values.
pub trait FeatureSource {
    fn feature(&self, name: &str) -> Option<f64>;
}

impl FeatureSource for FeatureVector {
    fn feature(&self, name: &str) -> Option<f64> {
        self.get(name)
    }
}

impl FeatureSource for HashMap<String, f64> {
    fn feature(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl FeatureSource for BTreeMap<String, f64> {
    fn feature(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

/// Column-major training matrix with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    feature_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl TrainingData {
    pub fn new(
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if columns.len() != feature_names.len() {
            return Err(GbmError::InvalidConfig(format!(
                "{} columns for {} feature names",
                columns.len(),
                feature_names.len()
            )));
        }
        for (name, col) in feature_names.iter().zip(&columns) {
            if col.len() != targets.len() {
                return Err(GbmError::LengthMismatch(col.len(), targets.len()));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(GbmError::NonFiniteFeature {
                    row,
                    feature: name.clone(),
                });
            }
        }
        if let Some(row) = targets.iter().position(|v| !v.is_finite()) {
            return Err(GbmError::NonFiniteTarget(row));
        }
        Ok(TrainingData {
            feature_names,
            columns,
            targets,
        })
    }

    /// Extracts `feature_names` from each `(features, target)` row.
    pub fn from_sources<S: FeatureSource>(
        feature_names: &[String],
        rows: &[(S, f64)],
    ) -> Result<Self> {
        let mut columns = vec![Vec::with_capacity(rows.len()); feature_names.len()];
        for (src, _) in rows {
            for (col, name) in columns.iter_mut().zip(feature_names) {
                col.push(
                    src.feature(name)
                        .ok_or_else(|| GbmError::MissingFeature(name.clone()))?,
                );
            }
        }
        let targets = rows.iter().map(|(_, t)| *t).collect();
        TrainingData::new(feature_names.to_vec(), columns, targets)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Applies `f` to one feature column.
    pub fn map_column(&mut self, feature: usize, f: impl Fn(f64) -> f64) {
        for v in self.columns[feature].iter_mut() {
            *v = f(*v);
        }
    }
}

/// An additive tree ensemble: `init + learning_rate * sum(tree outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub version: u32,
    pub init: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
}

impl GbmModel {
    /// Prediction for a row of feature values in `feature_names` order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        self.init + self.learning_rate * sum
    }

    pub fn predict_data(&self, data: &TrainingData) -> Result<Vec<f64>> {
        if data.feature_names != self.feature_names {
            return Err(GbmError::FeatureMismatch {
                expected: self.feature_names.clone(),
                found: data.feature_names.clone(),
            });
        }
        Ok((0..data.n_rows())
            .map(|i| self.predict_row(&data.row(i)))
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if !self.init.is_finite() || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbmError::InvalidModel("bad init or learning rate".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.feature_names.len())
                .map_err(|e| GbmError::InvalidModel(format!("tree {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Trains a model on rows of named features.
pub fn fit<S: FeatureSource>(rows: &[(S, f64)], config: &TrainConfig) -> Result<GbmModel> {
    config.validate()?;
    let data = TrainingData::from_sources(&config.feature_names, rows)?;
    fit_data(&data, config)
}

pub fn fit_data(data: &TrainingData, config: &TrainConfig) -> Result<GbmModel> {
    fit_traced(data, config).map(|(m, _)| m)
}

/// Trains and also returns the training MSE after the initial constant and
/// after each tree (`n_trees + 1` values).
pub fn fit_traced(data: &TrainingData, config: &TrainConfig) -> Result<(GbmModel, Vec<f64>)> {
    config.validate()?;
    if data.feature_names != config.feature_names {
        return Err(GbmError::FeatureMismatch {
            expected: config.feature_names.clone(),
            found: data.feature_names.clone(),
        });
    }
    let n = data.n_rows();
    if n < 2 {
        return Err(GbmError::TooFewRows(n));
    }

    let init = data.targets.iter().sum::<f64>() / n as f64;
    let mut pred = vec![init; n];
    let mut residual: Vec<f64> = data.targets.iter().map(|t| t - init).collect();
    let mut trace = Vec::with_capacity(config.n_trees + 1);
    trace.push(mse_of(&residual));

    let presorted: Vec<Vec<usize>> = data
        .columns
        .iter()
        .map(|col| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            order
        })
        .collect();

    let sample_size = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = tree::GrowParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
    };
    let all_rows: Vec<usize> = (0..n).collect();

    let mut trees = Vec::with_capacity(config.n_trees);
    let mut row_buf = vec![0.0; data.columns.len()];
    for _ in 0..config.n_trees {
        let (sample, sorted) = if sample_size == n {
            (all_rows.clone(), presorted.clone())
        } else {
            let mut sample = index::sample(&mut rng, n, sample_size).into_vec();
            sample.sort_unstable();
            let mut member = vec![false; n];
            for &r in &sample {
                member[r] = true;
            }
            let sorted = presorted
                .iter()
                .map(|o| o.iter().copied().filter(|&r| member[r]).collect())
                .collect();
            (sample, sorted)
        };

        let tree = tree::grow_tree(&data.columns, &residual, &sample, sorted, &params);
        for i in 0..n {
            for (v, col) in row_buf.iter_mut().zip(&data.columns) {
                *v = col[i];
            }
            pred[i] += config.learning_rate * tree.predict(&row_buf);
            residual[i] = data.targets[i] - pred[i];
        }
        trace.push(mse_of(&residual));
        trees.push(tree);
    }

    Ok((
        GbmModel {
            version: MODEL_FORMAT_VERSION,
            init,
            learning_rate: config.learning_rate,
            feature_names: config.feature_names.clone(),
            trees,
        },
        trace,
    ))
}

fn mse_of(residual: &[f64]) -> f64 {
    residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64
}

/// Predicts from named features; every model feature must be present and
/// finite.
pub fn predict<S: FeatureSource + ?Sized>(model: &GbmModel, features: &S) -> Result<f64> {
    let row = model
        .feature_names
        .iter()
        .map(|name| match features.feature(name) {
            None => Err(GbmError::MissingFeature(name.clone())),
            Some(v) if !v.is_finite() => Err(GbmError::NonFiniteInput {
                feature: name.clone(),
                value: v,
            }),
            Some(v) => Ok(v),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(model.predict_row(&row))
}

/// Mean absolute error.
pub fn mae(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(GbmError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(GbmError::Empty);
    }
    Ok(predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p).abs())
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Serializes a model to JSON.
pub fn save_model(model: &GbmModel) -> String {
    serde_json::to_string(model).expect("model serialization is infallible")
}

pub fn load_model(text: &str) -> Result<GbmModel> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(MODEL_FORMAT_VERSION)) {
        return Err(GbmError::IncompatibleVersion {
            found,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let model: GbmModel = serde_json::from_value(value)?;
    model.validate()?;
    Ok(model)
}
