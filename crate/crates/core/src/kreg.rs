//! Kernel regression with averaged empirical NTKs or limit kernels as the
//! kernel, on CSV or synthetic Gaussian-class data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::limit_gram;
use crate::net::ArchKind;
use crate::ntk::{avg_ntk_gram, GramMatrix};
use crate::numerics::{norm_sq, spd_solve, standard_normal, Matrix, RngStream};
use crate::variance::ArchFamily;

/// Unit-norm feature rows with dense class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Original label of each class id, when loaded from a file.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{class_count}")));
        }
        for i in 0..features.rows() {
            if (norm_sq(features.row(i)).sqrt() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("row {i} is not unit norm")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            label_names: (0..class_count).map(|c| c.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.features.to_rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: Matrix::from_fn(idx.len(), self.dim(), |i, j| self.features[(idx[i], j)]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            label_names: self.label_names.clone(),
        }
    }
}

fn normalize(row: &mut [f64]) -> bool {
    let s = norm_sq(row).sqrt();
    if s == 0.0 {
        return false;
    }
    row.iter_mut().for_each(|v| *v /= s);
    true
}

/// Parses a headed CSV; every column other than `label_column` must be numeric.
/// Labels map to ids in order of first appearance.
pub fn parse_csv_dataset<R: Read>(reader: R, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            column: 0,
            message: format!("no column named {label_column:?}"),
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            column: 0,
            message: "no feature columns".into(),
        });
    }
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                column: rec.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for (col, field) in rec.iter().enumerate() {
            if col == label_at {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                column: col + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    column: col + 1,
                    message: format!("non-finite value {field:?}"),
                });
            }
            row.push(v);
        }
        if !normalize(&mut row) {
            return Err(Error::ZeroRow { line });
        }
        let name = rec[label_at].trim().to_string();
        let next = ids.len();
        let id = *ids.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            next
        });
        labels.push(id);
        data.extend(row);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let features = Matrix::from_vec(labels.len(), dim, data)?;
    Ok(Dataset {
        features,
        labels,
        class_count: names.len(),
        label_names: names,
    })
}

pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    parse_csv_dataset(std::fs::File::open(path)?, label_column)
}

/// `per_class` rows per class from `N(μ_c, I)`, with `μ_c = s·√(dim/2)·e_c`
/// so class means sit at pairwise distance `s·√dim`; rows are then normalized.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    stream: &RngStream,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if dim < classes {
        return Err(Error::InvalidArgument(format!(
            "dim {dim} cannot hold {classes} orthogonal class means"
        )));
    }
    if per_class == 0 || !(separation >= 0.0) {
        return Err(Error::InvalidArgument("per_class must be positive and separation non-negative".into()));
    }
    let shift = separation * (dim as f64 / 2.0).sqrt();
    let mut rng = stream.generator();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut done = 0;
        while done < per_class {
            let mut row: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            row[c] += shift;
            if normalize(&mut row) {
                data.extend(row);
                labels.push(c);
                done += 1;
            }
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, classes)
}

/// Seeded permutation split; `train_fraction` of the rows (rounded) go to training.
pub fn split(ds: &Dataset, train_fraction: f64, stream: &RngStream) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument("split fraction must lie in (0, 1)".into()));
    }
    let n_train = (train_fraction * ds.len() as f64).round() as usize;
    if n_train == 0 || n_train == ds.len() {
        return Err(Error::InvalidArgument(format!(
            "split of {} rows at {train_fraction} leaves a side empty",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream.generator());
    Ok((ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..])))
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Matrix<f64> {
    Matrix::from_fn(labels.len(), class_count, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(scores: &Matrix<f64>) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    /// `(H + jitter·I)⁻¹ Y`, one row per training point.
    pub dual_weights: Matrix<f64>,
    pub class_count: usize,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
    pub kernel_source: Option<KernelSource>,
}

impl RegressionModel {
    pub fn with_source(self, source: KernelSource) -> Self {
        RegressionModel {
            kernel_source: Some(source),
            ..self
        }
    }

    pub fn train_size(&self) -> usize {
        self.dual_weights.rows()
    }
}

pub fn fit(gram: &GramMatrix<f64>, labels: &[usize], class_count: usize, jitter: f64) -> Result<RegressionModel> {
    if gram.size() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "gram of size {} for {} labels",
            gram.size(),
            labels.len()
        )));
    }
    let y = one_hot(labels, class_count);
    let dual_weights = spd_solve(gram.matrix(), &y, jitter)?;
    Ok(RegressionModel {
        dual_weights,
        class_count,
        jitter,
        kernel_source: None,
    })
}

pub fn scores(model: &RegressionModel, gram_cross: &Matrix<f64>) -> Result<Matrix<f64>> {
    if gram_cross.cols() != model.train_size() {
        return Err(Error::ShapeMismatch(format!(
            "cross gram has {} columns, model was fit on {} points",
            gram_cross.cols(),
            model.train_size()
        )));
    }
    gram_cross.matmul(&model.dual_weights)
}

pub fn predict(model: &RegressionModel, gram_cross: &Matrix<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&scores(model, gram_cross)?))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// `rel · trace(H) / m`.
pub fn relative_jitter(gram: &GramMatrix<f64>, rel: f64) -> f64 {
    rel * gram.matrix().trace() / gram.size() as f64
}

/// Where a Gram matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    Empirical { width: usize, draws: usize, seed: u64 },
    Limit(ArchKind),
}

/// Fits on the leading `n_train` rows of a joint Gram over train ++ test and
/// returns test accuracy.
pub fn evaluate_joint(gram: &GramMatrix<f64>, train: &Dataset, test: &Dataset, rel_jitter: f64) -> Result<f64> {
    let m = train.len();
    let tr: Vec<usize> = (0..m).collect();
    let te: Vec<usize> = (m..m + test.len()).collect();
    let h = gram.principal(&tr);
    let model = fit(&h, &train.labels, train.class_count.max(test.class_count), relative_jitter(&h, rel_jitter))?;
    let pred = predict(&model, &gram.block(&te, &tr))?;
    Ok(accuracy(&pred, &test.labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_classes() -> usize {
    2
}
fn default_dim() -> usize {
    32
}
fn default_per_class() -> usize {
    100
}
fn default_separation() -> f64 {
    1.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            separation: default_separation(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Path {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    Synthetic(SyntheticConfig),
}

fn default_label_column() -> String {
    "label".into()
}

/// One family over a depth × width grid; `limit` adds an infinite-width cell per depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGrid {
    #[serde(flatten)]
    pub family: ArchFamily,
    pub depths: Vec<usize>,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub limit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub archs: Vec<ArchGrid>,
    #[serde(rename = "T", default = "default_t")]
    pub draws: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Relative to `trace(H)/m`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_t() -> usize {
    1
}
fn default_repeats() -> usize {
    20
}
fn default_jitter() -> f64 {
    1e-8
}
fn default_split() -> f64 {
    0.7
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic(SyntheticConfig::default()),
            archs: Vec::new(),
            draws: default_t(),
            repeats: default_repeats(),
            jitter: default_jitter(),
            split: default_split(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::InvalidArgument("no architectures given".into()));
        }
        if self.draws == 0 || self.repeats == 0 {
            return Err(Error::InvalidArgument("T and repeats must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidArgument("jitter must be non-negative".into()));
        }
        for g in &self.archs {
            if g.depths.is_empty() || (g.widths.is_empty() && !g.limit) {
                return Err(Error::InvalidArgument(format!("empty grid for {}", g.family.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub kind: ArchKind,
    /// `None` for the limit kernel.
    pub n: Option<usize>,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "T")]
    pub draws: Option<usize>,
    pub repeat_count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub train_size: usize,
    pub test_size: usize,
    pub class_count: usize,
    pub jitter_policy: String,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn cell(&self, kind: ArchKind, n: Option<usize>, depth: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.n == n && c.depth == depth)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn load_dataset(cfg: &DatasetConfig, stream: &RngStream) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Path { path, label_column } => load_csv_dataset(path, label_column),
        DatasetConfig::Synthetic(s) => gen_synthetic(s.classes, s.dim, s.per_class, s.separation, stream),
    }
}

/// Runs every cell. Streams: dataset `seed.derive(1)`, split `seed.derive(2)`,
/// weights of repeat `r` in cell `c` `seed.derive(3).derive(c).derive(r)`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let master = RngStream::new(cfg.seed, 0);
    let data = load_dataset(&cfg.dataset, &master.derive(1))?;
    let (train, test) = split(&data, cfg.split, &master.derive(2))?;
    let mut xs = train.rows();
    xs.extend(test.rows());
    let mut cells = Vec::new();
    let mut cell_id = 0u64;
    for grid in &cfg.archs {
        for &depth in &grid.depths {
            if grid.limit {
                let spec = grid.family.spec(data.dim(), depth, 1)?;
                let g = limit_gram(&spec, &xs)?;
                let acc = evaluate_joint(&g, &train, &test, cfg.jitter)?;
                cells.push(CellResult {
                    kind: spec.kind,
                    n: None,
                    depth,
                    draws: None,
                    repeat_count: 1,
                    mean_accuracy: acc,
                    std_accuracy: 0.0,
                    accuracies: vec![acc],
                });
            }
            for &width in &grid.widths {
                let spec = grid.family.spec(data.dim(), depth, width)?;
                let base = master.derive(3).derive(cell_id);
                cell_id += 1;
                let accs = (0..cfg.repeats as u64)
                    .map(|r| {
                        let g = avg_ntk_gram(&spec, &xs, base.derive(r), cfg.draws)?;
                        evaluate_joint(&g, &train, &test, cfg.jitter)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, std) = mean_std(&accs);
                cells.push(CellResult {
                    kind: spec.kind,
                    n: Some(width),
                    depth,
                    draws: Some(cfg.draws),
                    repeat_count: cfg.repeats,
                    mean_accuracy: mean,
                    std_accuracy: std,
                    accuracies: accs,
                });
            }
        }
    }
    Ok(ExperimentReport {
        train_size: train.len(),
        test_size: test.len(),
        class_count: data.class_count,
        jitter_policy: format!("{:e} * trace(H) / m", cfg.jitter),
        cells,
    })
}

/// Flat record behind the CSV and JSON-lines outputs; limit cells show
/// `n = "inf"` and `T = "-"`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub kind: ArchKind,
    pub n: String,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "T")]
    pub draws: String,
    pub repeat_count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl From<&CellResult> for AccuracyRow {
    fn from(c: &CellResult) -> Self {
        AccuracyRow {
            kind: c.kind,
            n: c.n.map_or("inf".into(), |n| n.to_string()),
            depth: c.depth,
            draws: c.draws.map_or("-".into(), |t| t.to_string()),
            repeat_count: c.repeat_count,
            mean_accuracy: c.mean_accuracy,
            std_accuracy: c.std_accuracy,
        }
    }
}

pub fn write_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    // explicit header so an empty report still gets one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["kind", "n", "L", "T", "repeat_count", "mean_accuracy", "std_accuracy"])?;
    for c in &report.cells {
        w.serialize(AccuracyRow::from(c))?;
    }
    w.flush()?;
    Ok(())
}
