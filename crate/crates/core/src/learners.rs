//! Local objectives: synthetic least-squares fleets, a time-series
//! preprocessing pipeline for user CSVs, mini-batch SGD and FLOP estimates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

/// Multiply-adds per weight per sample: 2 forward, 4 backward.
pub const FLOPS_PER_WEIGHT_SAMPLE: u64 = 6;

pub fn flops_estimate(dim: usize, samples: usize) -> u64 {
    FLOPS_PER_WEIGHT_SAMPLE * dim as u64 * samples as u64
}

/// Row-major design matrix with targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl LocalDataset {
    pub fn new(dim: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dimension must be positive".into()));
        }
        if features.len() != dim * targets.len() {
            return Err(Error::Dimension {
                expected: dim * targets.len(),
                got: features.len(),
            });
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(LocalDataset { dim, features, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: bad.len() });
        }
        Self::new(dim, rows.concat(), targets)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn target(&self, k: usize) -> f64 {
        self.targets[k]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn predict(&self, x: &[f64], k: usize) -> f64 {
        dot(self.row(k), x)
    }

    /// Sum of squared residuals.
    pub fn sse(&self, x: &[f64]) -> f64 {
        (0..self.len()).map(|k| (self.predict(x, k) - self.targets[k]).powi(2)).sum()
    }

    pub fn mse(&self, x: &[f64]) -> f64 {
        self.sse(x) / self.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Mean squared error over `samples` and its gradient `2 (y^ - y) a / |batch|`.
pub fn mse_and_gradient(x: &[f64], data: &LocalDataset, samples: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; data.dim()];
    let mut loss = 0.0;
    if samples.is_empty() {
        return (0.0, grad);
    }
    let m = samples.len() as f64;
    for &k in samples {
        let r = data.predict(x, k) - data.target(k);
        loss += r * r;
        for (g, a) in grad.iter_mut().zip(data.row(k)) {
            *g += 2.0 * r * a / m;
        }
    }
    (loss / m, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.02, batch_size: 32 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundWork {
    pub flops: u64,
    pub steps: u64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub x: Vec<f64>,
    /// Sample-weighted mean of the pre-step batch losses.
    pub loss: f64,
    pub work: RoundWork,
}

/// One shuffled pass of mini-batch SGD, stopping early after `max_steps`.
pub fn local_epoch<R: Rng>(
    x: &[f64],
    data: &LocalDataset,
    sgd: &SgdConfig,
    rng: &mut R,
    max_steps: Option<u64>,
) -> Result<EpochResult> {
    if data.is_empty() {
        return Err(Error::Data("empty local dataset".into()));
    }
    if x.len() != data.dim() {
        return Err(Error::Dimension { expected: data.dim(), got: x.len() });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut x = x.to_vec();
    let mut sse = 0.0;
    let mut seen = 0usize;
    let mut steps = 0u64;
    for batch in order.chunks(sgd.batch_size) {
        if max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let (loss, grad) = mse_and_gradient(&x, data, batch);
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi -= sgd.lr * g;
        }
        sse += loss * batch.len() as f64;
        seen += batch.len();
        steps += 1;
    }
    let loss = if seen == 0 { data.mse(&x) } else { sse / seen as f64 };
    Ok(EpochResult {
        x,
        loss,
        work: RoundWork {
            flops: flops_estimate(data.dim(), seen),
            steps,
            batch: sgd.batch_size,
        },
    })
}

/// Train/test datasets for every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub train: Vec<LocalDataset>,
    pub test: Vec<LocalDataset>,
}

impl Fleet {
    pub fn new(train: Vec<LocalDataset>, test: Vec<LocalDataset>) -> Result<Self> {
        if train.is_empty() || train.len() != test.len() {
            return Err(Error::InvalidArgument("fleet needs one train and one test set per node".into()));
        }
        let dim = train[0].dim();
        if let Some(d) = train.iter().chain(&test).find(|d| d.dim() != dim) {
            return Err(Error::Dimension { expected: dim, got: d.dim() });
        }
        Ok(Fleet { train, test })
    }

    pub fn n_nodes(&self) -> usize {
        self.train.len()
    }

    pub fn dim(&self) -> usize {
        self.train[0].dim()
    }

    /// FLOPs of one full local epoch per node.
    pub fn epoch_flops(&self) -> Vec<u64> {
        self.train.iter().map(|d| flops_estimate(d.dim(), d.len())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// Pooled MSE, RMSE and R² of `x` across `sets`.
pub fn evaluate(x: &[f64], sets: &[LocalDataset]) -> EvalMetrics {
    let n: usize = sets.iter().map(|d| d.len()).sum();
    let sse: f64 = sets.iter().map(|d| d.sse(x)).sum();
    let mean = sets.iter().flat_map(|d| d.targets()).sum::<f64>() / n as f64;
    let sst: f64 = sets.iter().flat_map(|d| d.targets()).map(|y| (y - mean).powi(2)).sum();
    let mse = sse / n as f64;
    EvalMetrics {
        mse,
        rmse: mse.sqrt(),
        r2: if sst > 0.0 { 1.0 - sse / sst } else { 0.0 },
    }
}

/// One local update as seen by the data plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub x: Vec<f64>,
    pub loss: f64,
    pub steps: u64,
    pub flops: u64,
}

/// Produces `x~` for an active node during a round.
pub trait LocalTrainer {
    fn train(&mut self, node: usize, x: &[f64]) -> Result<LocalUpdate>;
}

/// Performs no local steps; useful for consensus-only checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenTrainer;

impl LocalTrainer for FrozenTrainer {
    fn train(&mut self, _node: usize, x: &[f64]) -> Result<LocalUpdate> {
        Ok(LocalUpdate { x: x.to_vec(), loss: 0.0, steps: 0, flops: 0 })
    }
}

/// One epoch per call on the node's training split, drawing the shuffle from
/// `(seed, node, round)` and sharing a step allowance across the round.
#[derive(Debug)]
pub struct EpochTrainer<'a> {
    pub fleet: &'a Fleet,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub round: u64,
    /// Remaining local steps in this round; `None` is unlimited.
    pub step_allowance: Option<u64>,
}

impl LocalTrainer for EpochTrainer<'_> {
    fn train(&mut self, node: usize, x: &[f64]) -> Result<LocalUpdate> {
        let data = self
            .fleet
            .train
            .get(node)
            .ok_or_else(|| Error::InvalidArgument(format!("no dataset for node {node}")))?;
        let mut rng = keyed_rng(self.seed, Stream::LocalTraining, &[node as u64, self.round]);
        let r = local_epoch(x, data, &self.sgd, &mut rng, self.step_allowance)?;
        if let Some(a) = self.step_allowance.as_mut() {
            *a -= r.work.steps;
        }
        Ok(LocalUpdate { x: r.x, loss: r.loss, steps: r.work.steps, flops: r.work.flops })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub dim: usize,
    pub samples_per_node: usize,
    pub test_samples_per_node: usize,
    pub hetero_alpha: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            dim: 64,
            samples_per_node: 512,
            test_samples_per_node: 128,
            hetero_alpha: 0.1,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.samples_per_node == 0 || self.test_samples_per_node == 0 {
            return Err(Error::config("samples_per_node", "must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be nonnegative"));
        }
        if !(self.hetero_alpha >= 0.0) {
            return Err(Error::config("hetero_alpha", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFleet {
    pub fleet: Fleet,
    pub w_star: Vec<f64>,
    /// Per-node generating weights `w* + alpha u_i`.
    pub node_weights: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample_dataset<R: Rng>(rng: &mut R, w: &[f64], samples: usize, noise: &Normal<f64>) -> Result<LocalDataset> {
    let dim = w.len();
    let features = gaussian_vec(rng, samples * dim);
    let targets = features
        .chunks(dim)
        .map(|a| dot(a, w) + noise.sample(rng))
        .collect();
    LocalDataset::new(dim, features, targets)
}

/// Heterogeneous linear-regression fleet: node `i` has targets
/// `a . (w* + alpha u_i) + noise` with unit-norm `u_i`.
pub fn make_synthetic_fleet(spec: &SyntheticTaskSpec, n_nodes: usize) -> Result<SyntheticFleet> {
    spec.validate()?;
    if n_nodes == 0 {
        return Err(Error::config("n_nodes", "must be at least 1"));
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let w_star = gaussian_vec(&mut keyed_rng(spec.seed, Stream::Fleet, &[0]), spec.dim);
    let mut train = Vec::with_capacity(n_nodes);
    let mut test = Vec::with_capacity(n_nodes);
    let mut node_weights = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes as u64 {
        let mut u = gaussian_vec(&mut keyed_rng(spec.seed, Stream::Fleet, &[1, i]), spec.dim);
        let norm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let w: Vec<f64> = w_star.iter().zip(&u).map(|(a, b)| a + spec.hetero_alpha * b).collect();
        let mut rng = keyed_rng(spec.seed, Stream::Fleet, &[2, i]);
        train.push(sample_dataset(&mut rng, &w, spec.samples_per_node, &noise)?);
        let mut rng = keyed_rng(spec.seed, Stream::Fleet, &[3, i]);
        test.push(sample_dataset(&mut rng, &w, spec.test_samples_per_node, &noise)?);
        node_weights.push(w);
    }
    Ok(SyntheticFleet {
        fleet: Fleet::new(train, test)?,
        w_star,
        node_weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub weights: Vec<f64>,
    /// Pooled MSE of `weights` on the fitted data.
    pub mse: f64,
}

/// Closed-form `(A^T A + ridge I)^{-1} A^T y` on the pooled datasets.
pub fn centralized_oracle(sets: &[LocalDataset], ridge: f64) -> Result<OracleSolution> {
    if !(ridge >= 0.0) {
        return Err(Error::config("ridge", "must be nonnegative"));
    }
    let dim = sets.first().map(|d| d.dim()).ok_or_else(|| Error::Data("no datasets".into()))?;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for d in sets {
        if d.dim() != dim {
            return Err(Error::Dimension { expected: dim, got: d.dim() });
        }
        for k in 0..d.len() {
            let a = DVector::from_row_slice(d.row(k));
            gram.ger(1.0, &a, &a, 1.0);
            rhs.axpy(d.target(k), &a, 1.0);
        }
    }
    for i in 0..dim {
        gram[(i, i)] += ridge;
    }
    let singular = || Error::Singular("pooled normal equations are not positive definite".into());
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    // Rank-deficient Gram matrices can factor with round-off pivots.
    let pivots = chol.l_dirty().diagonal();
    let max_diag = gram.diagonal().max();
    if pivots.iter().any(|p| p * p <= 1e-12 * max_diag) {
        return Err(singular());
    }
    let weights: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
    let n: usize = sets.iter().map(|d| d.len()).sum();
    let mse = sets.iter().map(|d| d.sse(&weights)).sum::<f64>() / n as f64;
    Ok(OracleSolution { weights, mse })
}

/// Column-oriented numeric table; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl TimeSeriesTable {
    pub fn new(columns: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if columns.len() != values.len() {
            return Err(Error::Dimension { expected: columns.len(), got: values.len() });
        }
        let rows = values.first().map_or(0, |c| c.len());
        if values.iter().any(|c| c.len() != rows) {
            return Err(Error::Data("ragged columns".into()));
        }
        Ok(TimeSeriesTable { columns, values })
    }

    pub fn n_rows(&self) -> usize {
        self.values.first().map_or(0, |c| c.len())
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::config("target", format!("column {name:?} not found")))
    }

    fn slice_rows(&self, lo: usize, hi: usize) -> TimeSeriesTable {
        TimeSeriesTable {
            columns: self.columns.clone(),
            values: self.values.iter().map(|c| c[lo..hi].to_vec()).collect(),
        }
    }

    /// Reads a headered CSV. Empty cells are missing; unparsable cells are
    /// missing too, except in `target`, where they are an error.
    pub fn read_csv(path: &Path, target: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let columns: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut values = vec![Vec::new(); columns.len()];
        let t = columns
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| Error::config("target", format!("column {target:?} not found")))?;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            for (j, col) in values.iter_mut().enumerate() {
                let cell = rec.get(j).unwrap_or("").trim();
                let v = if cell.is_empty() {
                    None
                } else {
                    match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => Some(v),
                        _ if j == t => {
                            return Err(Error::Data(format!(
                                "non-numeric target {cell:?} on data row {}",
                                line + 1
                            )))
                        }
                        _ => None,
                    }
                };
                col.push(v);
            }
        }
        Self::new(columns, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window_len: usize,
    pub horizon: usize,
    pub top_features: usize,
    pub rolling_len: usize,
    pub split_ratio: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_len: 30,
            horizon: 1,
            top_features: 9,
            rolling_len: 12,
            split_ratio: 0.8,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::config("window_len", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.rolling_len == 0 {
            return Err(Error::config("rolling_len", "must be at least 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("split_ratio", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub train: LocalDataset,
    pub test: LocalDataset,
    /// Selected predictor columns, strongest first.
    pub selected: Vec<String>,
    /// Names of the per-timestep features inside each window.
    pub row_features: Vec<String>,
}

fn forward_backward_fill(col: &mut [Option<f64>]) {
    let mut last = None;
    for v in col.iter_mut() {
        match v {
            Some(x) => last = Some(*x),
            None => *v = last,
        }
    }
    let mut next = None;
    for v in col.iter_mut().rev() {
        match v {
            Some(x) => next = Some(*x),
            None => *v = next,
        }
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Indices of the `k` columns with largest `|corr(x_j, y)|`; undefined
/// correlations score 0 and ties keep column order.
pub fn rank_features(columns: &[Vec<f64>], target: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| (j, pearson(c, target).map_or(0.0, f64::abs)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(j, _)| j).collect()
}

/// Imputed split with missing-target rows removed: `(predictor columns, target)`.
fn clean_split(table: &TimeSeriesTable, t: usize) -> (Vec<Vec<Option<f64>>>, Vec<f64>) {
    let mut cols = table.values.clone();
    for (j, c) in cols.iter_mut().enumerate() {
        if j != t {
            forward_backward_fill(c);
        }
    }
    let keep: Vec<usize> = (0..table.n_rows()).filter(|&r| cols[t][r].is_some()).collect();
    let target = keep.iter().map(|&r| cols[t][r].unwrap()).collect();
    let preds = cols
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, c)| keep.iter().map(|&r| c[r]).collect())
        .collect();
    (preds, target)
}

/// Per-timestep rows `[x_j.., dx_j.., mean12(x_j).., y_{t-1}, t]`, dropping
/// the leading rows where the lag, difference or rolling mean is undefined.
fn augment(selected: &[Vec<f64>], target: &[f64], rolling: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = target.len();
    let first = rolling.saturating_sub(1).max(1);
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for r in first..n {
        let mut row = Vec::with_capacity(3 * selected.len() + 2);
        row.extend(selected.iter().map(|c| c[r]));
        row.extend(selected.iter().map(|c| c[r] - c[r - 1]));
        row.extend(
            selected
                .iter()
                .map(|c| c[r + 1 - rolling..=r].iter().sum::<f64>() / rolling as f64),
        );
        row.push(target[r - 1]);
        row.push(r as f64);
        rows.push(row);
        ys.push(target[r]);
    }
    (rows, ys)
}

#[derive(Debug, Clone, PartialEq)]
struct Scaler {
    mean: f64,
    std: f64,
}

impl Scaler {
    fn fit(v: impl Iterator<Item = f64> + Clone) -> Self {
        let n = v.clone().count().max(1) as f64;
        let mean = v.clone().sum::<f64>() / n;
        let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Scaler { mean, std: if std > 0.0 { std } else { 1.0 } }
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Sliding windows: sample `t` flattens rows `t..t+W` and targets row `t+W+H-1`.
pub fn make_windows(rows: &[Vec<f64>], targets: &[f64], window: usize, horizon: usize) -> Result<LocalDataset> {
    let span = window + horizon - 1;
    if rows.len() != targets.len() || rows.len() <= span {
        return Err(Error::Data(format!(
            "need more than {span} rows for window {window} and horizon {horizon}, have {}",
            rows.len()
        )));
    }
    let n = rows.len() - span;
    let mut features = Vec::new();
    let mut ys = Vec::with_capacity(n);
    for t in 0..n {
        for r in &rows[t..t + window] {
            features.extend_from_slice(r);
        }
        ys.push(targets[t + span]);
    }
    LocalDataset::new(window * rows[0].len(), features, ys)
}

/// Split, impute, drop missing targets, rank on train, augment, standardize
/// with train-fitted scalers and window each split.
pub fn preprocess_timeseries(table: &TimeSeriesTable, target: &str, config: &PreprocessConfig) -> Result<Preprocessed> {
    config.validate()?;
    let t = table.column_index(target)?;
    let split = (table.n_rows() as f64 * config.split_ratio).floor() as usize;
    let (train_raw, test_raw) = (table.slice_rows(0, split), table.slice_rows(split, table.n_rows()));
    let (train_preds, train_y) = clean_split(&train_raw, t);
    let (test_preds, test_y) = clean_split(&test_raw, t);

    let names: Vec<&String> = table.columns.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, c)| c).collect();
    // Columns still missing after imputation carry no information on this split.
    let usable: Vec<usize> = (0..train_preds.len())
        .filter(|&j| train_preds[j].iter().all(Option::is_some) && test_preds[j].iter().all(Option::is_some))
        .collect();
    let dense = |preds: &[Vec<Option<f64>>], j: usize| preds[j].iter().map(|v| v.unwrap()).collect::<Vec<f64>>();
    let train_cols: Vec<Vec<f64>> = usable.iter().map(|&j| dense(&train_preds, j)).collect();
    let picked = rank_features(&train_cols, &train_y, config.top_features);
    let selected: Vec<usize> = picked.iter().map(|&k| usable[k]).collect();

    let pick = |preds: &[Vec<Option<f64>>]| selected.iter().map(|&j| dense(preds, j)).collect::<Vec<_>>();
    let (train_rows, train_ys) = augment(&pick(&train_preds), &train_y, config.rolling_len);
    let (test_rows, test_ys) = augment(&pick(&test_preds), &test_y, config.rolling_len);
    if train_rows.is_empty() {
        return Err(Error::Data("no training rows left after augmentation".into()));
    }

    let width = train_rows[0].len();
    let scalers: Vec<Scaler> = (0..width).map(|c| Scaler::fit(train_rows.iter().map(move |r| r[c]))).collect();
    let y_scaler = Scaler::fit(train_ys.iter().copied());
    let scale_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&scalers).map(|(v, s)| s.apply(*v)).collect())
            .collect()
    };
    let scale_y = |ys: &[f64]| -> Vec<f64> { ys.iter().map(|&y| y_scaler.apply(y)).collect() };

    let train = make_windows(&scale_rows(&train_rows), &scale_y(&train_ys), config.window_len, config.horizon)?;
    let test = make_windows(&scale_rows(&test_rows), &scale_y(&test_ys), config.window_len, config.horizon)?;

    let sel_names: Vec<String> = selected.iter().map(|&j| names[j].clone()).collect();
    let mut row_features: Vec<String> = sel_names.clone();
    row_features.extend(sel_names.iter().map(|s| format!("diff_{s}")));
    row_features.extend(sel_names.iter().map(|s| format!("mean{}_{s}", config.rolling_len)));
    row_features.push(format!("lag1_{target}"));
    row_features.push("time_index".into());
    Ok(Preprocessed { train, test, selected: sel_names, row_features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flops_examples() {
        assert_eq!(flops_estimate(64, 512), 196_608);
        assert_eq!(flops_estimate(64, 0), 0);
        assert_eq!(flops_estimate(128, 512), 2 * flops_estimate(64, 512));
    }

    #[test]
    fn single_sample_sgd_step() {
        let d = LocalDataset::new(1, vec![1.0], vec![2.0]).unwrap();
        let sgd = SgdConfig { lr: 0.1, batch_size: 1 };
        let r = local_epoch(&[0.0], &d, &sgd, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert!((r.x[0] - 0.4).abs() < 1e-15);
        assert_eq!(r.loss, 4.0);
        assert_eq!(r.work, RoundWork { flops: 6, steps: 1, batch: 1 });
    }

    #[test]
    fn zero_lr_keeps_model_and_reports_mse() {
        let f = make_synthetic_fleet(&SyntheticTaskSpec { dim: 4, samples_per_node: 50, ..Default::default() }, 1).unwrap();
        let d = &f.fleet.train[0];
        let x = vec![0.3; 4];
        let sgd = SgdConfig { lr: 0.0, batch_size: 7 };
        let r = local_epoch(&x, d, &sgd, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        assert_eq!(r.x, x);
        assert!((r.loss - d.mse(&x)).abs() < 1e-12 * d.mse(&x));
        assert_eq!(r.work.steps, 8);
        let empty = LocalDataset::new(4, vec![], vec![]).unwrap();
        assert!(local_epoch(&x, &empty, &sgd, &mut ChaCha8Rng::seed_from_u64(1), None).is_err());
    }

    #[test]
    fn step_cap_truncates_epoch() {
        let f = make_synthetic_fleet(&SyntheticTaskSpec { dim: 3, samples_per_node: 100, ..Default::default() }, 1).unwrap();
        let sgd = SgdConfig { lr: 0.01, batch_size: 10 };
        let r = local_epoch(&[0.0; 3], &f.fleet.train[0], &sgd, &mut ChaCha8Rng::seed_from_u64(1), Some(3)).unwrap();
        assert_eq!(r.work.steps, 3);
        assert_eq!(r.work.flops, flops_estimate(3, 30));
    }

    #[test]
    fn full_batch_descent_is_monotone_toward_oracle() {
        let spec = SyntheticTaskSpec { dim: 8, samples_per_node: 200, hetero_alpha: 0.0, ..Default::default() };
        let f = make_synthetic_fleet(&spec, 1).unwrap();
        let d = &f.fleet.train[0];
        let oracle = centralized_oracle(std::slice::from_ref(d), 0.0).unwrap();
        let sgd = SgdConfig { lr: 0.05, batch_size: 200 };
        let mut x = vec![0.0; 8];
        let mut prev = d.mse(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            x = local_epoch(&x, d, &sgd, &mut rng, None).unwrap().x;
            let now = d.mse(&x);
            assert!(now <= prev + 1e-12);
            prev = now;
        }
        assert!((prev - oracle.mse) / oracle.mse < 1e-6);
    }

    #[test]
    fn homogeneous_noiseless_fleet_recovers_truth() {
        let spec = SyntheticTaskSpec { dim: 16, samples_per_node: 64, hetero_alpha: 0.0, noise_std: 0.0, ..Default::default() };
        let f = make_synthetic_fleet(&spec, 3).unwrap();
        for d in &f.fleet.train {
            let o = centralized_oracle(std::slice::from_ref(d), 0.0).unwrap();
            for (a, b) in o.weights.iter().zip(&f.w_star) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        let o = centralized_oracle(&f.fleet.train, 0.0).unwrap();
        assert!(o.mse < 1e-16);
        assert_eq!(f, make_synthetic_fleet(&spec, 3).unwrap());
    }

    #[test]
    fn heterogeneous_nodes_differ_and_pooled_solution_tracks_mean_perturbation() {
        let spec = SyntheticTaskSpec { dim: 8, samples_per_node: 400, hetero_alpha: 0.5, noise_std: 0.0, ..Default::default() };
        let f = make_synthetic_fleet(&spec, 4).unwrap();
        let locals: Vec<Vec<f64>> = f
            .fleet
            .train
            .iter()
            .map(|d| centralized_oracle(std::slice::from_ref(d), 0.0).unwrap().weights)
            .collect();
        assert!(locals[0].iter().zip(&locals[1]).any(|(a, b)| (a - b).abs() > 1e-3));
        let pooled = centralized_oracle(&f.fleet.train, 0.0).unwrap();
        let mean_w: Vec<f64> = (0..8).map(|k| f.node_weights.iter().map(|w| w[k]).sum::<f64>() / 4.0).collect();
        let dist = pooled.weights.iter().zip(&mean_w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 0.1, "{dist}");
        for w in &locals {
            let sse: f64 = f.fleet.train.iter().map(|d| d.sse(w)).sum();
            assert!(pooled.mse <= sse / 1600.0 + 1e-12);
        }
    }

    #[test]
    fn ridge_limit_shrinks_to_zero() {
        let f = make_synthetic_fleet(&SyntheticTaskSpec { dim: 5, samples_per_node: 30, ..Default::default() }, 2).unwrap();
        let o = centralized_oracle(&f.fleet.train, 1e6).unwrap();
        assert!(o.weights.iter().all(|w| w.abs() < 1e-2));
        let tall = LocalDataset::new(5, vec![1.0; 10], vec![0.0; 2]).unwrap();
        assert!(matches!(centralized_oracle(&[tall], 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn windows_follow_index_arithmetic() {
        let rows: Vec<Vec<f64>> = (0..4).map(|r| vec![r as f64, 10.0 + r as f64]).collect();
        let ys = [100.0, 101.0, 102.0, 103.0];
        let d = make_windows(&rows, &ys, 2, 1).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.row(0), &[0.0, 10.0, 1.0, 11.0]);
        assert_eq!(d.row(1), &[1.0, 11.0, 2.0, 12.0]);
        assert_eq!(d.targets(), &[102.0, 103.0]);
        assert!(make_windows(&rows, &ys, 4, 1).is_err());
    }

    #[test]
    fn constant_column_scores_zero() {
        let y: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let cols = vec![vec![1.0; 20], y.iter().map(|v| -v).collect()];
        assert_eq!(pearson(&cols[0], &y), None);
        assert_eq!(rank_features(&cols, &y, 2), vec![1, 0]);
    }

    fn ar1_table(n: usize, seed: u64) -> TimeSeriesTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drive = vec![0.0; n];
        let mut y = vec![0.0; n];
        for t in 1..n {
            drive[t] = 0.8 * drive[t - 1] + rng.sample::<f64, _>(StandardNormal);
            y[t] = 0.5 * y[t - 1] + 2.0 * drive[t] + 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut columns = vec!["egt".to_string()];
        let mut values = vec![y.into_iter().map(Some).collect::<Vec<_>>()];
        for k in 0..5 {
            columns.push(format!("noise{k}"));
            values.push((0..n).map(|_| Some(rng.random::<f64>())).collect());
        }
        columns.insert(3, "drive".into());
        values.insert(3, drive.into_iter().map(Some).collect());
        TimeSeriesTable::new(columns, values).unwrap()
    }

    #[test]
    fn informative_feature_ranks_first() {
        let table = ar1_table(400, 3);
        let cfg = PreprocessConfig { window_len: 5, top_features: 3, ..Default::default() };
        let p = preprocess_timeseries(&table, "egt", &cfg).unwrap();
        assert_eq!(p.selected[0], "drive");
        assert_eq!(p.train.dim(), 5 * (3 * 3 + 2));
        assert_eq!(p.row_features.len(), 11);
    }

    #[test]
    fn imputation_fills_both_directions_and_drops_missing_targets() {
        let mut c = vec![None, Some(1.0), None, Some(3.0), None];
        forward_backward_fill(&mut c);
        assert_eq!(c, vec![Some(1.0), Some(1.0), Some(1.0), Some(3.0), Some(3.0)]);
        let table = TimeSeriesTable::new(
            vec!["y".into(), "a".into()],
            vec![vec![Some(1.0), None, Some(3.0)], vec![None, Some(2.0), None]],
        )
        .unwrap();
        let (preds, y) = clean_split(&table, 0);
        assert_eq!(y, vec![1.0, 3.0]);
        assert_eq!(preds[0], vec![Some(2.0); 2]);
    }

    #[test]
    fn train_outputs_ignore_test_split() {
        let table = ar1_table(300, 9);
        let cfg = PreprocessConfig { window_len: 4, top_features: 2, ..Default::default() };
        let a = preprocess_timeseries(&table, "egt", &cfg).unwrap();
        let mut altered = table.clone();
        let split = (300.0 * cfg.split_ratio) as usize;
        for col in altered.values.iter_mut() {
            for v in col[split..].iter_mut() {
                *v = v.map(|x| 1e3 * x + 7.0);
            }
        }
        let b = preprocess_timeseries(&altered, "egt", &cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn csv_ingestion_rejects_non_numeric_target() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "y,a\n1,2\n,x\n3,4\n").unwrap();
        let t = TimeSeriesTable::read_csv(&path, "y").unwrap();
        assert_eq!(t.values[0], vec![Some(1.0), None, Some(3.0)]);
        assert_eq!(t.values[1], vec![Some(2.0), None, Some(4.0)]);
        std::fs::write(&path, "y,a\n1,2\nhot,3\n").unwrap();
        assert!(TimeSeriesTable::read_csv(&path, "y").is_err());
        assert!(TimeSeriesTable::read_csv(&path, "z").is_err());
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            dim in 1usize..6,
            m in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = gaussian_vec(&mut rng, dim * m);
            let ys = gaussian_vec(&mut rng, m);
            let x = gaussian_vec(&mut rng, dim);
            let d = LocalDataset::new(dim, feats, ys).unwrap();
            let idx: Vec<usize> = (0..m).collect();
            let (_, g) = mse_and_gradient(&x, &d, &idx);
            for k in 0..dim {
                let h = 1e-5 * (1.0 + x[k].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (mse_and_gradient(&xp, &d, &idx).0 - mse_and_gradient(&xm, &d, &idx).0) / (2.0 * h);
                let scale = g[k].abs().max(fd.abs()).max(1e-8);
                prop_assert!((g[k] - fd).abs() / scale <= 1e-5 || (g[k] - fd).abs() < 1e-9);
            }
        }
    }
}
