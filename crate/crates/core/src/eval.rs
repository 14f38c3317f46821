//! RMSE and the benchmark runner comparing every regressor on both tasks
//! and both feature pipelines.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    holdout_split, impute_column_means, load_training_csv, split_by_keypoint_coverage, to_matrices, Dataset, GrayImage, Task,
};
use crate::error::{Error, Result};
use crate::lbp::{LbpConfig, Variant};
use crate::pipeline::FeaturePipeline;
use crate::matrix::{FeatureMatrix, TargetMatrix};
use crate::pca::{fit_pca, transform, ComponentSelector};
use crate::regressors::{fit_any, predict_any, Hyperparameters, Optimizer, RegressorKind, RegressorSpec};

/// `sqrt(sum of squared errors / (n * m))`, in the targets' units.
pub fn rmse(pred: &TargetMatrix, truth: &TargetMatrix) -> Result<f64> {
    if pred.0.shape() != truth.0.shape() {
        return Err(Error::shape(
            format!("{:?} prediction", truth.0.shape()),
            pred.nrows() * pred.ncols(),
        ));
    }
    if pred.0.is_empty() {
        return Err(Error::invalid("RMSE of an empty prediction"));
    }
    Ok(((&pred.0 - &truth.0).norm_squared() / pred.0.len() as f64).sqrt())
}

/// Predicts each output's training mean for every query.
pub fn mean_predictor(train: &TargetMatrix, n_query: usize) -> TargetMatrix {
    let mean = train.0.row_mean();
    TargetMatrix(DMatrix::from_fn(n_query, train.ncols(), |_, j| mean[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Pixels divided by 255.
    Raw,
    /// LBP code image, then PCA fitted on the training rows.
    LbpPca,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Raw => "raw",
            Pipeline::LbpPca => "lbp_pca",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Pipeline::Raw),
            "lbp_pca" | "lbp+pca" | "lbp-pca" | "optimized" => Ok(Pipeline::LbpPca),
            other => Err(Error::Config(format!("unknown pipeline `{other}`"))),
        }
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s.trim().to_ascii_lowercase().as_str() {
        "eleven" | "11" | "rmse1" => Ok(Task::Eleven),
        "four" | "4" | "rmse2" => Ok(Task::Four),
        other => Err(Error::Config(format!("unknown task `{other}` (expected eleven or four)"))),
    }
}

/// Name used for the mean-predictor baseline row.
pub const BASELINE: &str = "mean";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub training_csv: Option<PathBuf>,
    pub models: Vec<RegressorKind>,
    pub pipelines: Vec<Pipeline>,
    pub tasks: Vec<Task>,
    pub seed: u64,
    pub train_fraction: f64,
    /// Adds a mean-predictor row per task and pipeline.
    pub baseline: bool,
    pub knn_k: usize,
    pub ridge_lambda: f64,
    pub lasso_alpha: f64,
    pub elastic_alpha: f64,
    pub elastic_rho: f64,
    pub cd_max_iter: usize,
    pub cd_tol: f64,
    pub tree_max_depth: Option<usize>,
    pub tree_min_samples_leaf: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub mlp_optimizer: Optimizer,
    pub mlp_dropout: f64,
    pub cnn_epochs: usize,
    pub cnn_batch_size: usize,
    pub cnn_optimizer: Optimizer,
    pub lbp: LbpConfig,
    pub pca_components: usize,
    /// Training rows used to fit PCA; `None` uses all of them.
    pub pca_fit_rows: Option<usize>,
    pub max_train_rows: Option<usize>,
    pub max_test_rows: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BenchmarkConfig {
    /// Full-scale settings: every row, full epoch counts.
    pub fn full() -> Self {
        let mlp = Hyperparameters::default_for(RegressorKind::Mlp);
        let cnn = Hyperparameters::default_for(RegressorKind::Cnn);
        let (Hyperparameters::Mlp(mlp), Hyperparameters::Cnn(cnn)) = (mlp, cnn) else {
            unreachable!()
        };
        Self {
            training_csv: None,
            models: RegressorKind::ALL.to_vec(),
            pipelines: vec![Pipeline::Raw, Pipeline::LbpPca],
            tasks: vec![Task::Eleven, Task::Four],
            seed: 42,
            train_fraction: 0.9,
            baseline: true,
            knn_k: 5,
            ridge_lambda: 1.0,
            lasso_alpha: 0.1,
            elastic_alpha: 0.1,
            elastic_rho: 0.5,
            cd_max_iter: 1000,
            cd_tol: 1e-4,
            tree_max_depth: Some(5),
            tree_min_samples_leaf: 1,
            mlp_hidden: mlp.hidden,
            mlp_epochs: mlp.epochs,
            mlp_batch_size: mlp.batch_size,
            mlp_optimizer: mlp.optimizer,
            mlp_dropout: mlp.dropout,
            cnn_epochs: cnn.epochs,
            cnn_batch_size: cnn.batch_size,
            cnn_optimizer: cnn.optimizer,
            lbp: LbpConfig::default(),
            pca_components: 256,
            pca_fit_rows: None,
            max_train_rows: None,
            max_test_rows: None,
        }
    }

    /// Capped rows and epochs so a run finishes in minutes on one core.
    pub fn desk() -> Self {
        Self {
            cd_max_iter: 200,
            mlp_epochs: 20,
            cnn_epochs: 5,
            pca_fit_rows: Some(1500),
            max_train_rows: Some(1500),
            ..Self::full()
        }
    }

    pub fn spec_for(&self, kind: RegressorKind) -> RegressorSpec {
        let h = match kind {
            RegressorKind::Knn => Hyperparameters::Knn { k: self.knn_k },
            RegressorKind::Ols => Hyperparameters::Ols,
            RegressorKind::Ridge => Hyperparameters::Ridge {
                lambda: self.ridge_lambda,
            },
            RegressorKind::Lasso => Hyperparameters::Lasso {
                alpha: self.lasso_alpha,
                max_iter: self.cd_max_iter,
                tol: self.cd_tol,
            },
            RegressorKind::Elastic => Hyperparameters::Elastic {
                alpha: self.elastic_alpha,
                rho: self.elastic_rho,
                max_iter: self.cd_max_iter,
                tol: self.cd_tol,
            },
            RegressorKind::Tree => Hyperparameters::Tree {
                max_depth: self.tree_max_depth,
                min_samples_leaf: self.tree_min_samples_leaf,
            },
            RegressorKind::Mlp => {
                let Hyperparameters::Mlp(mut p) = Hyperparameters::default_for(kind) else {
                    unreachable!()
                };
                p.hidden = self.mlp_hidden.clone();
                p.epochs = self.mlp_epochs;
                p.batch_size = self.mlp_batch_size;
                p.optimizer = self.mlp_optimizer;
                p.dropout = self.mlp_dropout;
                Hyperparameters::Mlp(p)
            }
            RegressorKind::Cnn => {
                let Hyperparameters::Cnn(mut p) = Hyperparameters::default_for(kind) else {
                    unreachable!()
                };
                p.epochs = self.cnn_epochs;
                p.batch_size = self.cnn_batch_size;
                p.optimizer = self.cnn_optimizer;
                Hyperparameters::Cnn(p)
            }
        };
        RegressorSpec::new(h, self.seed)
    }

    /// Parses `key = value` lines over the desk defaults (or the full ones
    /// when the text contains `scale = full`). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            pairs.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let full = pairs
            .iter()
            .filter(|(k, _)| k == "scale")
            .map(|(_, v)| v.to_ascii_lowercase())
            .next_back();
        let mut cfg = match full.as_deref() {
            None | Some("desk") => Self::desk(),
            Some("full") => Self::full(),
            Some(other) => return Err(Error::Config(format!("unknown scale `{other}`"))),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
            match v.to_ascii_lowercase().as_str() {
                "none" | "all" | "unlimited" | "" => Ok(None),
                _ => num(key, v).map(Some),
            }
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
            }
        }
        fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
        }
        fn optimizer(key: &str, v: &str) -> Result<Optimizer> {
            match v.to_ascii_lowercase().as_str() {
                "sgd" => Ok(Optimizer::sgd()),
                "rmsprop" => Ok(Optimizer::rmsprop()),
                _ => Err(Error::Config(format!("`{key}`: unknown optimizer `{v}`"))),
            }
        }
        match key {
            "scale" => {}
            "training_csv" | "dataset" => self.training_csv = Some(PathBuf::from(value)),
            "models" => self.models = list(value, |s| s.parse())?,
            "pipelines" => self.pipelines = list(value, |s| s.parse())?,
            "tasks" => self.tasks = list(value, parse_task)?,
            "seed" => self.seed = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "baseline" => self.baseline = boolean(key, value)?,
            "knn_k" | "k" => self.knn_k = num(key, value)?,
            "ridge_lambda" | "lambda" => self.ridge_lambda = num(key, value)?,
            "lasso_alpha" => self.lasso_alpha = num(key, value)?,
            "elastic_alpha" => self.elastic_alpha = num(key, value)?,
            "elastic_rho" | "rho" => self.elastic_rho = num(key, value)?,
            "alpha" => {
                self.lasso_alpha = num(key, value)?;
                self.elastic_alpha = self.lasso_alpha;
            }
            "cd_max_iter" => self.cd_max_iter = num(key, value)?,
            "cd_tol" => self.cd_tol = num(key, value)?,
            "tree_max_depth" => self.tree_max_depth = opt_usize(key, value)?,
            "tree_min_samples_leaf" => self.tree_min_samples_leaf = num(key, value)?,
            "mlp_hidden" => self.mlp_hidden = list(value, |s| num(key, s))?,
            "mlp_epochs" => self.mlp_epochs = num(key, value)?,
            "mlp_batch_size" => self.mlp_batch_size = num(key, value)?,
            "mlp_optimizer" => self.mlp_optimizer = optimizer(key, value)?,
            "mlp_dropout" => self.mlp_dropout = num(key, value)?,
            "cnn_epochs" => self.cnn_epochs = num(key, value)?,
            "cnn_batch_size" => self.cnn_batch_size = num(key, value)?,
            "cnn_optimizer" => self.cnn_optimizer = optimizer(key, value)?,
            "epochs" => {
                self.mlp_epochs = num(key, value)?;
                self.cnn_epochs = self.mlp_epochs;
            }
            "lbp_variant" => {
                self.lbp.variant = match value.to_ascii_lowercase().as_str() {
                    "basic" => Variant::Basic,
                    "circular" => Variant::Circular,
                    _ => return Err(Error::Config(format!("unknown LBP variant `{value}`"))),
                }
            }
            "lbp_neighbors" => self.lbp.neighbors = num(key, value)?,
            "lbp_radius" => self.lbp.radius = num(key, value)?,
            "lbp_rotation_invariant" => self.lbp.rotation_invariant = boolean(key, value)?,
            "pca_components" => self.pca_components = num(key, value)?,
            "pca_fit_rows" => self.pca_fit_rows = opt_usize(key, value)?,
            "max_train_rows" | "max_rows" => self.max_train_rows = opt_usize(key, value)?,
            "max_test_rows" => self.max_test_rows = opt_usize(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.pca_components == 0 {
            return Err(Error::Config("pca_components must be positive".into()));
        }
        if self.pipelines.contains(&Pipeline::LbpPca) {
            self.lbp.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for kind in &self.models {
            self.spec_for(*kind).hyperparameters.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub pipeline: Pipeline,
    pub task: Task,
    pub rmse: Option<f64>,
    pub error: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub seconds: f64,
    /// JSON of the hyperparameters the row was fitted with.
    pub hyperparameters: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, model: &str, pipeline: Pipeline, task: Task) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.pipeline == pipeline && r.task == task)
    }

    pub fn rmse(&self, model: &str, pipeline: Pipeline, task: Task) -> Option<f64> {
        self.get(model, pipeline, task).and_then(|r| r.rmse)
    }

    /// One line per (model, pipeline) in first-appearance order, with the
    /// eleven-keypoint task as RMSE1 and the four-keypoint task as RMSE2.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for r in &self.rows {
            let pos = match out.iter().position(|s| s.model == r.model && s.pipeline == r.pipeline.name()) {
                Some(p) => p,
                None => {
                    out.push(SummaryRow {
                        model: r.model.clone(),
                        pipeline: r.pipeline.name().to_string(),
                        seed: r.seed,
                        hyperparameters: r.hyperparameters.clone(),
                        ..SummaryRow::default()
                    });
                    out.len() - 1
                }
            };
            let s = &mut out[pos];
            let (rmse, n_train, n_test) = match r.task {
                Task::Eleven => (&mut s.rmse1, &mut s.n_train1, &mut s.n_test1),
                _ => (&mut s.rmse2, &mut s.n_train2, &mut s.n_test2),
            };
            *rmse = r.rmse;
            *n_train = Some(r.n_train);
            *n_test = Some(r.n_test);
            if let Some(e) = &r.error {
                if !s.error.is_empty() {
                    s.error.push_str("; ");
                }
                let _ = write!(s.error, "{}: {e}", r.task);
            }
        }
        out
    }
}

/// Wide report line as written to CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub pipeline: String,
    pub rmse1: Option<f64>,
    pub rmse2: Option<f64>,
    pub n_train1: Option<usize>,
    pub n_test1: Option<usize>,
    pub n_train2: Option<usize>,
    pub n_test2: Option<usize>,
    pub seed: u64,
    pub error: String,
    pub hyperparameters: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Markdown,
    Csv,
}

impl FromStr for ReportStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportStyle::Markdown),
            "csv" => Ok(ReportStyle::Csv),
            other => Err(Error::Config(format!("unknown report style `{other}`"))),
        }
    }
}

pub fn format_report(r: &EvalReport, style: ReportStyle) -> String {
    match style {
        ReportStyle::Csv => summary_to_csv(&r.summary()),
        ReportStyle::Markdown => markdown(r),
    }
}

fn markdown(r: &EvalReport) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let mut out = String::new();
    let _ = writeln!(out, "Seed: {}", r.seed);
    let _ = writeln!(out);
    let _ = writeln!(out, "| Model | Pipeline | RMSE1 | RMSE2 | Train rows (1/2) | Test rows (1/2) | Seconds |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for s in r.summary() {
        let secs: f64 = r
            .rows
            .iter()
            .filter(|row| row.model == s.model && row.pipeline.name() == s.pipeline)
            .map(|row| row.seconds)
            .sum();
        let n = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {}/{} | {}/{} | {:.1} |",
            s.model,
            s.pipeline,
            cell(s.rmse1),
            cell(s.rmse2),
            n(s.n_train1),
            n(s.n_train2),
            n(s.n_test1),
            n(s.n_test2),
            secs
        );
    }
    let errors: Vec<_> = r.rows.iter().filter(|row| row.error.is_some()).collect();
    if !errors.is_empty() {
        let _ = writeln!(out);
        for row in errors {
            let _ = writeln!(
                out,
                "- {} / {} / {}: {}",
                row.model,
                row.pipeline,
                row.task,
                row.error.as_deref().unwrap_or("")
            );
        }
    }
    out
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "pipeline",
        "rmse1",
        "rmse2",
        "n_train1",
        "n_test1",
        "n_train2",
        "n_test2",
        "seed",
        "error",
        "hyperparameters",
    ])
    .expect("in-memory write");
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    let u = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.pipeline.clone(),
            f(r.rmse1),
            f(r.rmse2),
            u(r.n_train1),
            u(r.n_test1),
            u(r.n_train2),
            u(r.n_test2),
            r.seed.to_string(),
            r.error.clone(),
            r.hyperparameters.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn parse_csv_report(text: &str) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != 11 {
            return Err(Error::Parse {
                row: i,
                column: String::new(),
                message: format!("expected 11 fields, found {}", rec.len()),
            });
        }
        let parse_err = |col: &str, v: &str| Error::Parse {
            row: i,
            column: col.to_string(),
            message: format!("cannot parse `{v}`"),
        };
        let of = |idx: usize, col: &str| -> Result<Option<f64>> {
            let v = &rec[idx];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| parse_err(col, v))
            }
        };
        let ou = |idx: usize, col: &str| -> Result<Option<usize>> {
            let v = &rec[idx];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| parse_err(col, v))
            }
        };
        out.push(SummaryRow {
            model: rec[0].to_string(),
            pipeline: rec[1].to_string(),
            rmse1: of(2, "rmse1")?,
            rmse2: of(3, "rmse2")?,
            n_train1: ou(4, "n_train1")?,
            n_test1: ou(5, "n_test1")?,
            n_train2: ou(6, "n_train2")?,
            n_test2: ou(7, "n_test2")?,
            seed: rec[8].parse().map_err(|_| parse_err("seed", &rec[8]))?,
            error: rec[9].to_string(),
            hyperparameters: rec[10].to_string(),
        });
    }
    Ok(out)
}

/// LBP code images scaled into [0, 1], one row per image.
pub fn lbp_features(d: &Dataset, cfg: &LbpConfig) -> Result<FeatureMatrix> {
    let images: Vec<&GrayImage> = d.samples().iter().map(|s| &s.image).collect();
    FeaturePipeline {
        lbp: Some(*cfg),
        pca: None,
    }
    .base_features(&images)
}

/// Fits PCA on (at most `fit_rows` of) `train` and projects both sides.
fn reduce(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    components: usize,
    fit_rows: Option<usize>,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n_fit = fit_rows.map_or(train.nrows(), |c| c.min(train.nrows()));
    let fit_on = if n_fit < train.nrows() {
        train.select_rows(&(0..n_fit).collect::<Vec<_>>())
    } else {
        train.clone()
    };
    let k = components.min(n_fit.saturating_sub(1)).min(train.ncols());
    if k == 0 {
        return Err(Error::invalid("too few training rows for PCA"));
    }
    let model = fit_pca(&fit_on, ComponentSelector::Count(k))?;
    Ok((transform(&model, train)?, transform(&model, test)?))
}

struct Split {
    x_train: FeatureMatrix,
    x_test: FeatureMatrix,
}

fn task_rows(d: &Dataset, cfg: &BenchmarkConfig) -> Result<(Dataset, Dataset)> {
    let imputed = impute_column_means(d)?;
    let (train, test) = holdout_split(&imputed, cfg.train_fraction, cfg.seed)?;
    let train = match cfg.max_train_rows {
        Some(n) if n < train.len() => train.truncated(n),
        _ => train,
    };
    let test = match cfg.max_test_rows {
        Some(n) if n < test.len() => test.truncated(n),
        _ => test,
    };
    Ok((train, test))
}

/// Runs the benchmark on a dataset loaded from `cfg.training_csv`.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<EvalReport> {
    let path = cfg
        .training_csv
        .as_ref()
        .ok_or_else(|| Error::Config("no training_csv configured".into()))?;
    let d = load_training_csv(path)?;
    run_benchmark_on(&d, cfg)
}

/// Per task: impute, hold out, build each pipeline's features, then fit and
/// score every model. Model failures become rows with an error message.
pub fn run_benchmark_on(full: &Dataset, cfg: &BenchmarkConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport {
        seed: cfg.seed,
        rows: Vec::new(),
    };
    if cfg.models.is_empty() && !cfg.baseline {
        return Ok(report);
    }
    let (four, eleven) = split_by_keypoint_coverage(full)?;
    for &task in &cfg.tasks {
        let d = match task {
            Task::Eleven => &eleven,
            _ => &four,
        };
        let prepared = task_rows(d, cfg);
        for &pipeline in &cfg.pipelines {
            let mut record = |model: String, hyper: String, outcome: Result<f64>, n: (usize, usize), secs: f64| {
                let (rmse, error) = match outcome {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                report.rows.push(EvalRow {
                    model,
                    pipeline,
                    task,
                    rmse,
                    error,
                    n_train: n.0,
                    n_test: n.1,
                    seed: cfg.seed,
                    seconds: secs,
                    hyperparameters: hyper,
                });
            };
            let names: Vec<(String, String)> = cfg
                .models
                .iter()
                .map(|k| {
                    let h = serde_json::to_string(&cfg.spec_for(*k).hyperparameters).unwrap_or_default();
                    (k.name().to_string(), h)
                })
                .chain(cfg.baseline.then(|| (BASELINE.to_string(), "{}".to_string())))
                .collect();
            let (train, test) = match &prepared {
                Ok(p) => p,
                Err(e) => {
                    for (name, h) in names {
                        record(name, h, Err(Error::invalid(e.to_string())), (0, 0), 0.0);
                    }
                    continue;
                }
            };
            let sizes = (train.len(), test.len());
            let features = build_features(train, test, pipeline, cfg);
            let (_, y_train) = to_matrices(train, true)?;
            let (_, y_test) = to_matrices(test, true)?;
            let mut grids: Option<Result<Split>> = None;
            for (name, h) in names {
                let start = Instant::now();
                let outcome = match &features {
                    Err(e) => Err(Error::invalid(e.to_string())),
                    Ok(_) if name == BASELINE => rmse(&mean_predictor(&y_train, y_test.nrows()), &y_test),
                    Ok(f) => {
                        let kind: RegressorKind = name.parse()?;
                        let spec = cfg.spec_for(kind);
                        let split = if kind == RegressorKind::Cnn {
                            let g = grids.get_or_insert_with(|| cnn_grids(train, test, f, pipeline, cfg));
                            match g {
                                Ok(s) => Ok(&*s),
                                Err(e) => Err(Error::invalid(e.to_string())),
                            }
                        } else {
                            Ok(f)
                        };
                        split.and_then(|s| {
                            let model = fit_any(&spec, &s.x_train, &y_train)?;
                            rmse(&predict_any(&model, &s.x_test)?, &y_test)
                        })
                    }
                };
                record(name, h, outcome, sizes, start.elapsed().as_secs_f64());
            }
        }
    }
    Ok(report)
}

fn build_features(train: &Dataset, test: &Dataset, pipeline: Pipeline, cfg: &BenchmarkConfig) -> Result<Split> {
    match pipeline {
        Pipeline::Raw => Ok(Split {
            x_train: to_matrices(train, true)?.0,
            x_test: to_matrices(test, true)?.0,
        }),
        Pipeline::LbpPca => {
            let a = lbp_features(train, &cfg.lbp)?;
            let b = lbp_features(test, &cfg.lbp)?;
            let (x_train, x_test) = reduce(&a, &b, cfg.pca_components, cfg.pca_fit_rows)?;
            Ok(Split { x_train, x_test })
        }
    }
}

/// The CNN always reads square PCA grids: the LBP pipeline's projection
/// directly, or a projection of the raw pixels for the raw pipeline.
fn cnn_grids(train: &Dataset, test: &Dataset, f: &Split, pipeline: Pipeline, cfg: &BenchmarkConfig) -> Result<Split> {
    let s = match pipeline {
        Pipeline::LbpPca => Split {
            x_train: f.x_train.clone(),
            x_test: f.x_test.clone(),
        },
        Pipeline::Raw => {
            let (x_train, x_test) = reduce(
                &to_matrices(train, true)?.0,
                &to_matrices(test, true)?.0,
                cfg.pca_components,
                cfg.pca_fit_rows,
            )?;
            Split { x_train, x_test }
        }
    };
    let k = s.x_train.ncols();
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k || !side.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "{k} PCA components do not form a square grid with side divisible by 4"
        )));
    }
    Ok(s)
}

/// One CSV row per prediction, one column per target name.
pub fn write_predictions_csv<W: std::io::Write>(names: &[String], preds: &TargetMatrix, w: W) -> Result<()> {
    if names.len() != preds.ncols() {
        return Err(Error::shape(format!("{} target names", preds.ncols()), names.len()));
    }
    let io = |e: csv::Error| Error::io("<predictions output>", std::io::Error::other(e.to_string()));
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(names).map_err(io)?;
    for row in preds.0.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io("<predictions output>", e))
}
