use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use wsol_eval::eval::{
    evaluate, EvalError, EvalOptions, GroundTruth, MaskSource, Normalization, PackFile, PrPooling,
    StageOrder, Task,
};
use wsol_eval::io::annotations::{
    mask_path, read_boxes, read_manifest, AnnotationError, BoxAnnotationSet, SplitManifest,
    SplitName,
};
use wsol_eval::io::scorepack::{ScorepackError, ScorepackWriter};
use wsol_eval::io::splits::{validate_splits, AnnotationCoverage};
use wsol_eval::report::MetricReport;
use wsol_eval::scoremap::{center_gaussian, ScoreMapError};
use wsol_eval::search::{
    kendall_tau, proxy_manifest, run_search, DatasetEvaluator, HyperparameterSpace, SearchConfig,
    SearchError, SearchReport, TrialOutcome,
};
use wsol_eval::thresholds::ThresholdGrid;

pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        if e.is_io() {
            CliError::io(e.to_string())
        } else {
            CliError::invalid(e.to_string())
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        EvalError::from(e).into()
    }
}

impl From<ScorepackError> for CliError {
    fn from(e: ScorepackError) -> Self {
        EvalError::from(e).into()
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Evaluation { source, trial_id } => {
                let inner = CliError::from(source);
                CliError {
                    code: inner.code,
                    message: format!("trial {trial_id}: {}", inner.message),
                }
            }
            SearchError::TrainerSpawnFailure { .. }
            | SearchError::MissingScorepack { .. }
            | SearchError::Io { .. } => CliError::io(e.to_string()),
            other => CliError::invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wsol-eval", version, about = "Evaluate and tune weakly-supervised object localization")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a scorepack against boxes or masks and write a JSON report.
    Evaluate {
        #[command(flatten)]
        input: EvalInput,
        #[command(flatten)]
        options: OptionArgs,
        /// Free-form text recorded in the report (e.g. a date or run name).
        #[arg(long)]
        stamp: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-threshold BoxAcc or precision/recall as CSV.
    Curve {
        #[command(flatten)]
        input: EvalInput,
        #[command(flatten)]
        options: OptionArgs,
        /// Masks only: restrict the curve to one category.
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a center-Gaussian scorepack with one map per manifest image.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test-fullsup")]
        split: SplitName,
        /// Standard deviation in units of half the shorter image side.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random hyperparameter search around an external trainer.
    Search(SearchArgs),
    /// Kendall's tau between the scores of two report collections.
    RankCompare {
        /// A directory of metric reports, or a search report.
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that the three splits are disjoint and annotated.
    Validate {
        #[arg(long)]
        train_weaksup: PathBuf,
        #[arg(long)]
        train_fullsup: PathBuf,
        #[arg(long)]
        test_fullsup: PathBuf,
        /// Ground-truth kind for the `--*-gt` paths.
        #[arg(long, value_enum, default_value = "boxes")]
        task: TaskArg,
        #[arg(long)]
        train_fullsup_gt: Option<PathBuf>,
        #[arg(long)]
        test_fullsup_gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a class-stratified subset of a manifest.
    Proxy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train-fullsup")]
        split: SplitName,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct EvalInput {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Scorepack (.wsep) with one map per manifest image.
    #[arg(long)]
    scoremaps: PathBuf,
    /// Box file (boxes) or mask directory (masks).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test-fullsup")]
    split: SplitName,
}

#[derive(Debug, Clone, Args)]
struct OptionArgs {
    #[arg(long = "norm", value_enum, default_value = "minmax")]
    norm: NormArg,
    /// Number of uniform thresholds, or `exact` for every distinct score.
    #[arg(long, default_value = "1000", value_parser = parse_grid)]
    taus: ThresholdGrid,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    deltas: Vec<f64>,
    #[arg(long, value_enum, default_value = "normalize-first")]
    stage_order: StageArg,
    /// Gaussian blur sigma (pixels) applied after resizing.
    #[arg(long, allow_negative_numbers = true)]
    blur: Option<f64>,
    #[arg(long, value_enum, default_value = "category")]
    pooling: PoolArg,
    #[arg(long, default_value_t = 0.5)]
    px_acc_tau: f64,
    /// Worker threads.
    #[arg(long, env = "WSOL_EVAL_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Built-in search space: cam, has, acol, spg, adl, cutmix or gcnet.
    #[arg(long, conflicts_with = "space", required_unless_present = "space")]
    method: Option<String>,
    /// JSON list of dimensions.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Trainer command; `{trial_dir}` and `{hparams_file}` are substituted.
    #[arg(long)]
    trainer: String,
    #[arg(long, default_value_t = 30)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    work_dir: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    val_manifest: PathBuf,
    #[arg(long)]
    val_gt: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    test_gt: PathBuf,
    #[command(flatten)]
    options: OptionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Boxes,
    Masks,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Minmax,
    Max,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    NormalizeFirst,
    ResizeFirst,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolArg {
    Category,
    Image,
}

fn parse_grid(s: &str) -> Result<ThresholdGrid, String> {
    if s == "exact" {
        return Ok(ThresholdGrid::Exact);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(ThresholdGrid::Uniform(n)),
        _ => Err(format!("expected a positive integer or `exact`, got {s:?}")),
    }
}

impl OptionArgs {
    fn to_options(&self) -> EvalOptions {
        EvalOptions {
            normalization: match self.norm {
                NormArg::Minmax => Normalization::Minmax,
                NormArg::Max => Normalization::Max,
                NormArg::None => Normalization::None,
            },
            grid: self.taus,
            deltas: self.deltas.clone(),
            stage_order: match self.stage_order {
                StageArg::NormalizeFirst => StageOrder::NormalizeThenResize,
                StageArg::ResizeFirst => StageOrder::ResizeThenNormalize,
            },
            blur_sigma: self.blur,
            pr_pooling: match self.pooling {
                PoolArg::Category => PrPooling::Category,
                PoolArg::Image => PrPooling::Image,
            },
            px_acc_tau: self.px_acc_tau,
            ..EvalOptions::default()
        }
    }

    fn init_threads(&self) {
        if let Some(n) = self.jobs {
            // fails only if the pool already exists
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// Loaded ground truth; masks stay on disk and are read per image.
enum LoadedGt {
    Boxes(BoxAnnotationSet),
    Masks(PathBuf),
}

impl LoadedGt {
    fn load(task: TaskArg, path: &Path, manifest: &SplitManifest) -> Result<Self, CliError> {
        match task {
            TaskArg::Boxes => Ok(LoadedGt::Boxes(read_boxes(path, manifest)?)),
            TaskArg::Masks => {
                if !path.is_dir() {
                    return Err(CliError::io(format!(
                        "{}: mask directory not found",
                        path.display()
                    )));
                }
                Ok(LoadedGt::Masks(path.to_owned()))
            }
        }
    }

    fn as_gt(&self) -> GroundTruth<'_> {
        match self {
            LoadedGt::Boxes(b) => GroundTruth::Boxes(b),
            LoadedGt::Masks(root) => GroundTruth::Masks(MaskSource::Dir(root)),
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)
                    .map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
            }
            fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io(format!("stdout: {e}")))
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evaluate {
            input,
            options,
            stamp,
            out,
        } => {
            options.init_threads();
            let manifest = read_manifest(&input.manifest, input.split)?;
            let gt = LoadedGt::load(input.task, &input.gt, &manifest)?;
            let eval = evaluate(
                &PackFile(input.scoremaps.clone()),
                gt.as_gt(),
                &manifest,
                &options.to_options(),
            )?;
            let mut report = eval.report()?;
            if let Some(s) = stamp {
                report = report.with_stamp(s);
            }
            write_output(out.as_deref(), &(report.to_json() + "\n"))
        }
        Command::Curve {
            input,
            options,
            category,
            out,
        } => {
            options.init_threads();
            let manifest = read_manifest(&input.manifest, input.split)?;
            let gt = LoadedGt::load(input.task, &input.gt, &manifest)?;
            let mut opts = options.to_options();
            opts.pr_pooling = PrPooling::Category;
            opts.pool_all_categories = category.is_none();
            let eval = evaluate(&PackFile(input.scoremaps.clone()), gt.as_gt(), &manifest, &opts)?;
            write_output(out.as_deref(), &curve_csv(&eval, category.as_deref())?)
        }
        Command::Baseline {
            manifest,
            split,
            sigma,
            out,
        } => baseline(&manifest, split, sigma, &out),
        Command::Search(args) => search(args),
        Command::RankCompare { a, b, out } => {
            let sa = load_scores(&a)?;
            let sb = load_scores(&b)?;
            let keys: Vec<&String> = sa.keys().filter(|k| sb.contains_key(*k)).collect();
            let xa: Vec<f64> = keys.iter().map(|k| sa[*k]).collect();
            let xb: Vec<f64> = keys.iter().map(|k| sb[*k]).collect();
            let tau = kendall_tau(&xa, &xb).map_err(|e| CliError::invalid(e.to_string()))?;
            let unmatched = sa.len() + sb.len() - 2 * keys.len();
            let json = serde_json::json!({
                "kendall_tau": tau,
                "n": keys.len(),
                "n_unmatched": unmatched,
            });
            write_output(
                out.as_deref(),
                &(serde_json::to_string_pretty(&json).expect("json value") + "\n"),
            )
        }
        Command::Validate {
            train_weaksup,
            train_fullsup,
            test_fullsup,
            task,
            train_fullsup_gt,
            test_fullsup_gt,
            out,
        } => {
            let weak = read_manifest(&train_weaksup, SplitName::TrainWeaksup)?;
            let val = read_manifest(&train_fullsup, SplitName::TrainFullsup)?;
            let test = read_manifest(&test_fullsup, SplitName::TestFullsup)?;
            let mut coverage = AnnotationCoverage::new();
            for (split, manifest, gt) in [
                (SplitName::TrainFullsup, &val, &train_fullsup_gt),
                (SplitName::TestFullsup, &test, &test_fullsup_gt),
            ] {
                if let Some(path) = gt {
                    coverage.insert(split, annotated_ids(task, path, manifest)?);
                }
            }
            let report = validate_splits([&weak, &val, &test], &coverage);
            let json = serde_json::to_string_pretty(&report).expect("validation report") + "\n";
            write_output(out.as_deref(), &json)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if report.is_clean() {
                Ok(())
            } else {
                Err(CliError::invalid(format!(
                    "split validation failed:\n  {}",
                    report.violations().join("\n  ")
                )))
            }
        }
        Command::Proxy {
            manifest,
            split,
            fraction,
            seed,
            out,
        } => {
            let m = read_manifest(&manifest, split)?;
            let p = proxy_manifest(&m, fraction, seed).map_err(|e| CliError::invalid(e.to_string()))?;
            write_output(Some(&out), &p.to_text())
        }
    }
}

fn curve_csv(eval: &wsol_eval::eval::Evaluation, category: Option<&str>) -> Result<String, CliError> {
    let mut csv = String::new();
    match eval.task {
        Task::Boxes => {
            let curve = eval.box_curve().expect("box task");
            csv.push_str("tau");
            for d in &curve.per_delta {
                write!(csv, ",boxacc@{}", d.delta).unwrap();
            }
            csv.push('\n');
            for (k, tau) in curve.taus.iter().enumerate() {
                write!(csv, "{tau}").unwrap();
                for d in &curve.per_delta {
                    write!(csv, ",{}", d.accuracy[k]).unwrap();
                }
                csv.push('\n');
            }
        }
        Task::Masks => {
            let key = category.unwrap_or("all");
            let curve = eval
                .pr_curve(key)
                .ok_or_else(|| CliError::invalid(format!("no images of category {key:?}")))??;
            csv.push_str("tau,precision,recall\n");
            for k in 0..curve.taus.len() {
                writeln!(csv, "{},{},{}", curve.taus[k], curve.precision[k], curve.recall[k]).unwrap();
            }
        }
    }
    Ok(csv)
}

fn baseline(manifest: &Path, split: SplitName, sigma: f64, out: &Path) -> Result<(), CliError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CliError::invalid(ScoreMapError::InvalidSigma(sigma).to_string()));
    }
    let m = read_manifest(manifest, split)?;
    let file = File::create(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let mut writer = ScorepackWriter::new(BufWriter::new(file), m.len() as u64)?;
    for e in m.entries() {
        let map = center_gaussian(&e.image_id, e.height as usize, e.width as usize, sigma)
            .map_err(|err| CliError::invalid(format!("{}: {err}", e.image_id)))?;
        writer.push(&map)?;
    }
    writer
        .finish()?
        .flush()
        .map_err(|e| CliError::io(format!("{}: {e}", out.display())))
}

fn search(args: SearchArgs) -> Result<(), CliError> {
    args.options.init_threads();
    let space = match (&args.method, &args.space) {
        (Some(method), _) => {
            HyperparameterSpace::preset(method).map_err(|e| CliError::invalid(e.to_string()))?
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        }
        (None, None) => unreachable!("clap requires --method or --space"),
    };
    let val_manifest = read_manifest(&args.val_manifest, SplitName::TrainFullsup)?;
    let test_manifest = read_manifest(&args.test_manifest, SplitName::TestFullsup)?;
    let val_gt = LoadedGt::load(args.task, &args.val_gt, &val_manifest)?;
    let test_gt = LoadedGt::load(args.task, &args.test_gt, &test_manifest)?;
    let evaluator = DatasetEvaluator::new(
        args.options.to_options(),
        (&val_manifest, val_gt.as_gt()),
        (&test_manifest, test_gt.as_gt()),
    );
    let mut config = SearchConfig::new(space, args.trainer, args.work_dir);
    config.n_trials = args.trials;
    config.seed = args.seed;
    config.jobs = args.options.jobs.unwrap_or(1);

    match run_search(&config, &evaluator) {
        Ok(report) => write_output(args.out.as_deref(), &(report.to_json() + "\n")),
        Err(SearchError::AllTrialsNonConvergent { report, .. }) => {
            write_output(args.out.as_deref(), &(report.to_json() + "\n"))?;
            Err(CliError::invalid(format!(
                "none of {} trials converged (failure ratio {})",
                report.n_trials, report.failure_ratio
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn annotated_ids(task: TaskArg, path: &Path, manifest: &SplitManifest) -> Result<HashSet<String>, CliError> {
    match task {
        TaskArg::Boxes => Ok(read_boxes(path, manifest)?.into_keys().collect()),
        TaskArg::Masks => Ok(manifest
            .entries()
            .iter()
            .filter(|e| mask_path(path, &e.image_id).is_some())
            .map(|e| e.image_id.clone())
            .collect()),
    }
}

/// Scores keyed by report file stem (directory of metric reports) or by
/// trial id (search report, converged trials only).
fn load_scores(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut scores = BTreeMap::new();
        for f in files {
            let report: MetricReport = serde_json::from_str(&read(&f)?)
                .map_err(|e| CliError::invalid(format!("{}: {e}", f.display())))?;
            let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            scores.insert(stem, report.score);
        }
        Ok(scores)
    } else {
        let report: SearchReport = serde_json::from_str(&read(path)?)
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        Ok(report
            .trials
            .iter()
            .filter(|t| t.outcome == TrialOutcome::Converged)
            .filter_map(|t| Some((format!("{:06}", t.trial_id), t.validation_score?)))
            .collect())
    }
}
