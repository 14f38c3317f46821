use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use fkp_core::dataset::{
    holdout_split, impute_column_means, load_images_csv, load_split_pair, load_training_csv,
    split_by_keypoint_coverage, to_matrices, write_images_csv, write_keypoints_csv, write_to_path, Dataset, GrayImage,
    Task,
};
use fkp_core::eval::{format_report, run_benchmark_on, write_predictions_csv, BenchmarkConfig, ReportStyle};
use fkp_core::lbp::{lbp_histogram_features, lbp_transform, LbpConfig, Variant};
use fkp_core::pca::{fit_pca_with, ComponentSelector, PcaOptions};
use fkp_core::pipeline::TrainedModel;
use fkp_core::regressors::{Hyperparameters, Optimizer, RegressorKind, RegressorSpec};
use fkp_core::synth::{synthetic_faces, SynthConfig};
use fkp_core::viz::{render_keypoints, render_lbp, scatter_keypoint_distribution};
use fkp_core::{Error, Result};

const DATASET_ENV: &str = "FKP_TRAINING_CSV";
const DEFAULT_SEED: u64 = 42;
const DESK_ROWS: usize = 1500;
const DESK_MLP_EPOCHS: usize = 20;
const DESK_CNN_EPOCHS: usize = 5;

#[derive(Parser)]
#[command(name = "fkp", version, about = "Facial keypoint regression with LBP, PCA and eight regressors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the training table into the four- and eleven-keypoint files and their 90/10 holdouts
    Split(SplitArgs),
    /// Fit one regressor and save it with its feature pipeline
    Train(TrainArgs),
    /// Predict keypoints for the images in a CSV with a saved model
    Predict(PredictArgs),
    /// Run the model comparison and print the RMSE table
    Benchmark(BenchmarkArgs),
    /// Write the LBP image of one face as a PGM
    Lbp(LbpArgs),
    /// Fit PCA on face features and save the projection
    Pca(PcaArgs),
    /// Draw keypoints on a face, or the spread of one keypoint over the dataset
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Training CSV (coordinate columns plus Image)
    #[arg(long, env = DATASET_ENV)]
    input: PathBuf,
    /// Directory for the derived CSV files
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Fraction of rows kept for training
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
}

#[derive(Args, Clone)]
struct LbpFlags {
    /// Sample P neighbours on a circle instead of the 3x3 square
    #[arg(long)]
    circular: bool,
    /// Neighbour count P for circular LBP
    #[arg(long, default_value_t = 8)]
    neighbors: usize,
    /// Circle radius R for circular LBP
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Replace each code by its minimum over bit rotations
    #[arg(long)]
    rotation_invariant: bool,
    /// Cell side for histogram features
    #[arg(long, default_value_t = 16)]
    cell_size: usize,
}

impl LbpFlags {
    fn config(&self) -> LbpConfig {
        LbpConfig {
            variant: if self.circular { Variant::Circular } else { Variant::Basic },
            neighbors: self.neighbors,
            radius: self.radius,
            rotation_invariant: self.rotation_invariant,
            cell_size: self.cell_size,
            ..LbpConfig::default()
        }
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").args(["input", "keypoints"])))]
struct TrainArgs {
    /// Training CSV; the task picks its keypoint subset
    #[arg(long, env = DATASET_ENV)]
    input: Option<PathBuf>,
    /// Keypoint CSV of a split pair (use with --images)
    #[arg(long, requires = "images")]
    keypoints: Option<PathBuf>,
    /// Image CSV of a split pair
    #[arg(long, requires = "keypoints")]
    images: Option<PathBuf>,
    /// Task when reading the full training table: four or eleven
    #[arg(long, default_value = "four")]
    task: String,
    /// knn, ols, ridge, lasso, elastic, tree, mlp or cnn
    #[arg(long)]
    model: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Coordinate-descent sweep cap
    #[arg(long)]
    max_iter: Option<usize>,
    /// Coordinate-descent tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Tree depth cap
    #[arg(long, conflicts_with = "unlimited_depth")]
    max_depth: Option<usize>,
    /// Grow the tree until leaves are pure
    #[arg(long)]
    unlimited_depth: bool,
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Hidden widths, comma separated
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd or rmsprop
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Use LBP code images instead of raw pixels
    #[arg(long)]
    lbp: bool,
    #[command(flatten)]
    lbp_flags: LbpFlags,
    #[command(flatten)]
    reduce: ReduceFlags,
    /// Cap on training rows (defaults to a desk-scale cap unless --full)
    #[arg(long)]
    max_rows: Option<usize>,
    /// Full-scale run: every row and the full epoch counts
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
#[group(multiple = false)]
struct ReduceFlags {
    /// Keep this many principal components
    #[arg(long)]
    pca: Option<usize>,
    /// Keep the fewest components reaching this explained-variance ratio
    #[arg(long)]
    variance: Option<f64>,
}

impl ReduceFlags {
    fn selector(&self) -> Option<ComponentSelector> {
        match (self.pca, self.variance) {
            (Some(k), _) => Some(ComponentSelector::Count(k)),
            (_, Some(t)) => Some(ComponentSelector::VarianceTarget(t)),
            _ => None,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,
    /// CSV with an Image column
    #[arg(long)]
    input: PathBuf,
    /// Predictions CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training CSV
    #[arg(long, env = DATASET_ENV)]
    input: Option<PathBuf>,
    /// Run on generated faces instead of a dataset file
    #[arg(long)]
    synthetic: bool,
    /// Comma-separated model kinds
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated pipelines: raw, lbp_pca
    #[arg(long, value_delimiter = ',')]
    pipelines: Option<Vec<String>>,
    /// Comma-separated tasks: eleven, four
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full-scale run: every row and the full epoch counts
    #[arg(long)]
    full: bool,
    /// Cap on training rows per task
    #[arg(long)]
    max_rows: Option<usize>,
    /// Epochs for both networks
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the markdown report to a file
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct LbpArgs {
    /// CSV with an Image column
    #[arg(long, env = DATASET_ENV)]
    input: PathBuf,
    /// Zero-based image row
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// PGM file to write
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    lbp_flags: LbpFlags,
    /// Also write the per-cell histogram features, one value per line
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("selector").required(true).args(["components", "variance"])))]
struct PcaArgs {
    /// CSV with an Image column
    #[arg(long, env = DATASET_ENV)]
    input: PathBuf,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    variance: Option<f64>,
    /// Fit on LBP code images instead of raw pixels
    #[arg(long)]
    lbp: bool,
    #[command(flatten)]
    lbp_flags: LbpFlags,
    /// Standardize each feature before fitting
    #[arg(long)]
    zscore: bool,
    /// Cap on rows used for fitting
    #[arg(long)]
    max_rows: Option<usize>,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Training CSV
    #[arg(long, env = DATASET_ENV)]
    input: PathBuf,
    /// Row whose keypoints are drawn
    #[arg(long, default_value_t = 0, conflicts_with = "scatter")]
    row: usize,
    /// Keypoint name whose positions are scattered over a blank canvas
    #[arg(long)]
    scatter: Option<String>,
    /// PPM file to write
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Lbp(a) => cmd_lbp(a),
        Command::Pca(a) => cmd_pca(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fkp: {e}");
            ExitCode::FAILURE
        }
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s.to_ascii_lowercase().as_str() {
        "four" | "4" => Ok(Task::Four),
        "eleven" | "11" => Ok(Task::Eleven),
        other => Err(Error::Config(format!("unknown task `{other}` (expected four or eleven)"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let full = load_training_csv(&a.input)?;
    if full.is_empty() {
        return Err(Error::Config(format!("{} has no data rows", a.input.display())));
    }
    let (four, eleven) = split_by_keypoint_coverage(&full)?;
    create_dir(&a.out_dir)?;
    let write_pair = |d: &Dataset, stem: &str| -> Result<()> {
        write_to_path(a.out_dir.join(format!("keypoint{stem}.csv")), |w| write_keypoints_csv(d, w))?;
        write_to_path(a.out_dir.join(format!("im{stem}.csv")), |w| write_images_csv(d, w))
    };
    write_pair(&full, "")?;
    for d in [&four, &eleven] {
        let suffix = d.task().file_suffix();
        write_pair(d, &format!("_{suffix}"))?;
        let (train, test) = holdout_split(d, a.train_fraction, a.seed)?;
        write_pair(&train, &format!("_train_{suffix}"))?;
        write_pair(&test, &format!("_test_{suffix}"))?;
        println!(
            "{}: {} rows -> {} train, {} test",
            d.task(),
            d.len(),
            train.len(),
            test.len()
        );
    }
    Ok(())
}

fn optimizer(name: &str) -> Result<Optimizer> {
    match name.to_ascii_lowercase().as_str() {
        "sgd" => Ok(Optimizer::sgd()),
        "rmsprop" => Ok(Optimizer::rmsprop()),
        other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
    }
}

fn train_spec(a: &TrainArgs) -> Result<RegressorSpec> {
    let kind: RegressorKind = a.model.parse()?;
    let mut h = Hyperparameters::default_for(kind);
    match &mut h {
        Hyperparameters::Knn { k } => *k = a.k.unwrap_or(*k),
        Hyperparameters::Ols => {}
        Hyperparameters::Ridge { lambda } => *lambda = a.lambda.unwrap_or(*lambda),
        Hyperparameters::Lasso { alpha, max_iter, tol } => {
            *alpha = a.alpha.unwrap_or(*alpha);
            *max_iter = a.max_iter.unwrap_or(*max_iter);
            *tol = a.tol.unwrap_or(*tol);
        }
        Hyperparameters::Elastic {
            alpha,
            rho,
            max_iter,
            tol,
        } => {
            *alpha = a.alpha.unwrap_or(*alpha);
            *rho = a.rho.unwrap_or(*rho);
            *max_iter = a.max_iter.unwrap_or(*max_iter);
            *tol = a.tol.unwrap_or(*tol);
        }
        Hyperparameters::Tree {
            max_depth,
            min_samples_leaf,
        } => {
            if a.unlimited_depth {
                *max_depth = None;
            } else if let Some(d) = a.max_depth {
                *max_depth = Some(d);
            }
            *min_samples_leaf = a.min_leaf.unwrap_or(*min_samples_leaf);
        }
        Hyperparameters::Mlp(p) => {
            if let Some(hidden) = &a.hidden {
                p.hidden = hidden.clone();
            }
            p.epochs = a.epochs.unwrap_or(if a.full { p.epochs } else { DESK_MLP_EPOCHS });
            p.batch_size = a.batch_size.unwrap_or(p.batch_size);
            p.dropout = a.dropout.unwrap_or(p.dropout);
            if let Some(o) = &a.optimizer {
                p.optimizer = optimizer(o)?;
            }
        }
        Hyperparameters::Cnn(p) => {
            p.epochs = a.epochs.unwrap_or(if a.full { p.epochs } else { DESK_CNN_EPOCHS });
            p.batch_size = a.batch_size.unwrap_or(p.batch_size);
            if let Some(o) = &a.optimizer {
                p.optimizer = optimizer(o)?;
            }
        }
    }
    h.validate()?;
    Ok(RegressorSpec::new(h, a.seed))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let spec = train_spec(&a)?;
    let d = match (&a.keypoints, &a.images, &a.input) {
        (Some(k), Some(i), _) => load_split_pair(k, i)?,
        (_, _, Some(input)) => {
            let task = parse_task(&a.task)?;
            let (four, eleven) = split_by_keypoint_coverage(&load_training_csv(input)?)?;
            if task == Task::Four {
                four
            } else {
                eleven
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "no training data: pass --input, set {DATASET_ENV}, or give --keypoints with --images"
            )))
        }
    };
    let d = if d.is_imputed() { d } else { impute_column_means(&d)? };
    let cap = a.max_rows.or((!a.full).then_some(DESK_ROWS));
    let d = match cap {
        Some(n) if n < d.len() => d.truncated(n),
        _ => d,
    };
    let (_, y) = to_matrices(&d, true)?;
    let images: Vec<&GrayImage> = d.samples().iter().map(|s| &s.image).collect();
    let lbp = a.lbp.then(|| a.lbp_flags.config());
    let fit_rows = (!a.full).then_some(DESK_ROWS);
    let trained = TrainedModel::fit(&spec, &images, &y, d.target_names(), lbp, a.reduce.selector(), fit_rows)?;
    trained.save(&a.out)?;
    println!(
        "trained {} on {} rows ({} outputs) -> {}",
        spec.kind(),
        d.len(),
        y.ncols(),
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let images = load_images_csv(&a.input)?;
    let refs: Vec<&GrayImage> = images.iter().collect();
    let preds = model.predict(&refs)?;
    match &a.out {
        Some(path) => write_to_path(path, |w| write_predictions_csv(&model.targets, &preds, w)),
        None => write_predictions_csv(&model.targets, &preds, io::stdout().lock()),
    }
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    if a.full {
        text.push_str("\nscale = full\n");
    }
    let mut cfg = BenchmarkConfig::parse(&text)?;
    if let Some(p) = &a.input {
        cfg.training_csv = Some(p.clone());
    }
    let join = |v: &Vec<String>| v.join(",");
    if let Some(m) = &a.models {
        cfg.set("models", &join(m))?;
    }
    if let Some(p) = &a.pipelines {
        cfg.set("pipelines", &join(p))?;
    }
    if let Some(t) = &a.tasks {
        cfg.set("tasks", &join(t))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_rows {
        cfg.max_train_rows = Some(n);
    }
    if let Some(e) = a.epochs {
        cfg.mlp_epochs = e;
        cfg.cnn_epochs = e;
    }
    let data = if a.synthetic {
        synthetic_faces(&SynthConfig {
            seed: cfg.seed,
            ..SynthConfig::default()
        })
    } else {
        let path = cfg.training_csv.clone().ok_or_else(|| {
            Error::Config(format!(
                "no dataset: pass --input, set {DATASET_ENV}, add training_csv to the config, or use --synthetic"
            ))
        })?;
        load_training_csv(path)?
    };
    let report = run_benchmark_on(&data, &cfg)?;
    let md = format_report(&report, ReportStyle::Markdown);
    print!("{md}");
    if let Some(p) = &a.markdown {
        write_file(p, md.as_bytes())?;
    }
    if let Some(p) = &a.csv {
        write_file(p, format_report(&report, ReportStyle::Csv).as_bytes())?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(io_err)
}

fn pick_image(path: &Path, row: usize) -> Result<GrayImage> {
    let mut images = load_images_csv(path)?;
    let n = images.len();
    if row >= n {
        return Err(Error::Config(format!("row {row} out of range: {} has {n} images", path.display())));
    }
    Ok(images.swap_remove(row))
}

fn cmd_lbp(a: LbpArgs) -> Result<()> {
    let img = pick_image(&a.input, a.row)?;
    let cfg = a.lbp_flags.config();
    let lbp = lbp_transform(&img, &cfg)?;
    render_lbp(&lbp, &a.out)?;
    if let Some(h) = &a.histogram {
        let feats = lbp_histogram_features(&lbp, &cfg)?;
        let text: String = feats.iter().map(|v| format!("{v}\n")).collect();
        write_file(h, text.as_bytes())?;
    }
    println!("wrote {}x{} LBP image to {}", lbp.width(), lbp.height(), a.out.display());
    Ok(())
}

fn cmd_pca(a: PcaArgs) -> Result<()> {
    let images = load_images_csv(&a.input)?;
    let n = a.max_rows.map_or(images.len(), |m| m.min(images.len()));
    let refs: Vec<&GrayImage> = images[..n].iter().collect();
    let pipeline = fkp_core::pipeline::FeaturePipeline {
        lbp: a.lbp.then(|| a.lbp_flags.config()),
        pca: None,
    };
    let x = pipeline.base_features(&refs)?;
    let selector = match (a.components, a.variance) {
        (Some(k), _) => ComponentSelector::Count(k),
        (_, Some(t)) => ComponentSelector::VarianceTarget(t),
        _ => unreachable!("clap requires one selector"),
    };
    let model = fit_pca_with(&x, selector, PcaOptions { zscore: a.zscore })?;
    model.save(&a.out)?;
    println!(
        "{} components of {} features from {} rows explain {:.4} of the variance -> {}",
        model.n_components(),
        model.n_features(),
        n,
        model.cumulative_ratio(),
        a.out.display()
    );
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let d = load_training_csv(&a.input)?;
    match &a.scatter {
        Some(slot) => scatter_keypoint_distribution(&d, slot, &a.out)?,
        None => {
            let s = d.samples().get(a.row).ok_or_else(|| {
                Error::Config(format!("row {} out of range: {} rows", a.row, d.len()))
            })?;
            render_keypoints(&s.image, &s.keypoints, &a.out)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
