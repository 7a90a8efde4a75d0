//! Fixed-budget random search around an external trainer process.
//!
//! Each trial gets its own directory holding `hparams.txt`. The trainer is
//! started from a command template (split like a shell would, but never run
//! through one) and must leave `train-fullsup.wsep` and `test-fullsup.wsep`
//! in the trial directory, or a `NONCONVERGENT` file, or exit nonzero.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, EvalOptions, GroundTruth, PackFile};
use crate::io::annotations::{SplitManifest, SplitName};
use crate::report::{MetricReport, SCHEMA_VERSION, TOOLKIT_VERSION};

use super::space::{hparams_text, trial_rng, trial_seed, HyperparameterSpace, SpaceError, Value};

pub const HPARAMS_FILE: &str = "hparams.txt";
pub const SENTINEL_FILE: &str = "NONCONVERGENT";
pub const TRAINER_LOG: &str = "trainer.log";

pub fn pack_file_name(split: SplitName) -> String {
    format!("{split}.wsep")
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid trainer command template: {0}")]
    InvalidTemplate(String),
    #[error("trial {trial_id}: could not start trainer {program:?}: {source}")]
    TrainerSpawnFailure {
        trial_id: u64,
        program: String,
        source: io::Error,
    },
    #[error("trial {trial_id}: trainer exited cleanly but left no {file}")]
    MissingScorepack { trial_id: u64, file: String },
    #[error("none of {n_trials} trials converged (failure ratio {failure_ratio})")]
    AllTrialsNonConvergent {
        n_trials: u64,
        failure_ratio: f64,
        report: Box<SearchReport>,
    },
    #[error("trial {trial_id}: {source}")]
    Evaluation { trial_id: u64, source: EvalError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

impl SearchError {
    fn io(path: &Path, source: io::Error) -> Self {
        SearchError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// Scores a trainer's scorepack on one of the fully supervised splits.
pub trait SplitEvaluator: Sync {
    fn evaluate(&self, split: SplitName, pack: &Path) -> Result<MetricReport, EvalError>;
}

/// Ground truth for train-fullsup and test-fullsup, with a counter of how
/// often each split has been scored.
pub struct DatasetEvaluator<'a> {
    pub options: EvalOptions,
    validation: (&'a SplitManifest, GroundTruth<'a>),
    test: (&'a SplitManifest, GroundTruth<'a>),
    validation_calls: AtomicU64,
    test_calls: AtomicU64,
}

impl<'a> DatasetEvaluator<'a> {
    pub fn new(
        options: EvalOptions,
        validation: (&'a SplitManifest, GroundTruth<'a>),
        test: (&'a SplitManifest, GroundTruth<'a>),
    ) -> Self {
        Self {
            options,
            validation,
            test,
            validation_calls: AtomicU64::new(0),
            test_calls: AtomicU64::new(0),
        }
    }

    pub fn validation_calls(&self) -> u64 {
        self.validation_calls.load(Ordering::SeqCst)
    }

    pub fn test_calls(&self) -> u64 {
        self.test_calls.load(Ordering::SeqCst)
    }
}

impl SplitEvaluator for DatasetEvaluator<'_> {
    fn evaluate(&self, split: SplitName, pack: &Path) -> Result<MetricReport, EvalError> {
        let (manifest, gt) = match split {
            SplitName::TestFullsup => {
                self.test_calls.fetch_add(1, Ordering::SeqCst);
                self.test
            }
            _ => {
                self.validation_calls.fetch_add(1, Ordering::SeqCst);
                self.validation
            }
        };
        evaluate(&PackFile(pack.to_owned()), gt, manifest, &self.options)?.report()
    }
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub space: HyperparameterSpace,
    pub n_trials: u64,
    /// Program and arguments; `{trial_dir}`, `{hparams_file}`, `{trial_id}`
    /// and `{seed}` are substituted in each argument.
    pub trainer: String,
    pub seed: u64,
    /// Trials run concurrently.
    pub jobs: usize,
    pub work_dir: PathBuf,
}

impl SearchConfig {
    pub fn new(space: HyperparameterSpace, trainer: impl Into<String>, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            space,
            n_trials: 30,
            trainer: trainer.into(),
            seed: 0,
            jobs: 1,
            work_dir: work_dir.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Converged,
    NonConvergent,
    /// The trainer produced a scorepack that could not be scored.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterValue {
    pub name: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u64,
    pub seed: u64,
    pub hyperparameters: Vec<HyperparameterValue>,
    pub outcome: TrialOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub seed: u64,
    pub n_trials: u64,
    pub trials: Vec<Trial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_trial: Option<u64>,
    pub n_non_convergent: u64,
    pub n_failed: u64,
    pub non_convergence_ratio: f64,
    /// Non-convergent and failed trials over all trials.
    pub failure_ratio: f64,
    /// Full test-fullsup report of the selected trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_report: Option<MetricReport>,
}

impl SearchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

fn trial_dir(work_dir: &Path, trial_id: u64) -> PathBuf {
    work_dir.join(format!("trial-{trial_id:03}"))
}

fn substitute(template: &[String], dir: &Path, hparams: &Path, trial_id: u64, seed: u64) -> Vec<String> {
    template
        .iter()
        .map(|arg| {
            arg.replace("{trial_dir}", &dir.to_string_lossy())
                .replace("{hparams_file}", &hparams.to_string_lossy())
                .replace("{trial_id}", &trial_id.to_string())
                .replace("{seed}", &seed.to_string())
        })
        .collect()
}

fn run_trial(
    config: &SearchConfig,
    template: &[String],
    evaluator: &dyn SplitEvaluator,
    trial_id: u64,
) -> Result<Trial, SearchError> {
    let seed = trial_seed(config.seed, trial_id);
    let sample = config.space.sample(&mut trial_rng(config.seed, trial_id))?;
    let dir = trial_dir(&config.work_dir, trial_id);
    fs::create_dir_all(&dir).map_err(|e| SearchError::io(&dir, e))?;
    let hparams = dir.join(HPARAMS_FILE);
    fs::write(&hparams, hparams_text(&sample)).map_err(|e| SearchError::io(&hparams, e))?;
    let sentinel = dir.join(SENTINEL_FILE);
    if sentinel.exists() {
        fs::remove_file(&sentinel).map_err(|e| SearchError::io(&sentinel, e))?;
    }

    let args = substitute(template, &dir, &hparams, trial_id, seed);
    let log_path = dir.join(TRAINER_LOG);
    let log = File::create(&log_path).map_err(|e| SearchError::io(&log_path, e))?;
    let log_err = log.try_clone().map_err(|e| SearchError::io(&log_path, e))?;
    let status = Command::new(&args[0])
        .args(&args[1..])
        .env("WSOL_TRIAL_ID", trial_id.to_string())
        .env("WSOL_TRIAL_SEED", seed.to_string())
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(log_err)
        .status()
        .map_err(|source| SearchError::TrainerSpawnFailure {
            trial_id,
            program: args[0].clone(),
            source,
        })?;

    let mut trial = Trial {
        trial_id,
        seed,
        hyperparameters: sample
            .into_iter()
            .map(|(name, value)| HyperparameterValue { name, value })
            .collect(),
        outcome: TrialOutcome::NonConvergent,
        exit_code: status.code(),
        validation_score: None,
        test_score: None,
        failure: None,
    };
    if !status.success() || sentinel.exists() {
        return Ok(trial);
    }

    let file = pack_file_name(SplitName::TrainFullsup);
    let pack = dir.join(&file);
    if !pack.is_file() {
        return Err(SearchError::MissingScorepack { trial_id, file });
    }
    match evaluator.evaluate(SplitName::TrainFullsup, &pack) {
        Ok(report) => {
            trial.outcome = TrialOutcome::Converged;
            trial.validation_score = Some(report.score);
        }
        Err(e) => {
            trial.outcome = TrialOutcome::Failed;
            trial.failure = Some(e.to_string());
        }
    }
    Ok(trial)
}

/// Highest validation score; ties go to the lower trial id.
pub fn select_trial(trials: &[Trial]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let (TrialOutcome::Converged, Some(score)) = (t.outcome, t.validation_score) {
            match best {
                Some((j, s)) if score > s || (score == s && t.trial_id < trials[j].trial_id) => {
                    best = Some((i, score))
                }
                None => best = Some((i, score)),
                _ => {}
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Runs `config.n_trials` trials and scores the selected one on
/// test-fullsup. The test split is touched exactly once per search.
pub fn run_search(
    config: &SearchConfig,
    evaluator: &dyn SplitEvaluator,
) -> Result<SearchReport, SearchError> {
    let template = shell_words::split(&config.trainer)
        .map_err(|e| SearchError::InvalidTemplate(e.to_string()))?;
    if template.is_empty() {
        return Err(SearchError::InvalidTemplate("empty command".into()));
    }
    if !template.iter().any(|a| a.contains("{trial_dir}") || a.contains("{hparams_file}")) {
        return Err(SearchError::InvalidTemplate(
            "command must mention {trial_dir} or {hparams_file}".into(),
        ));
    }
    fs::create_dir_all(&config.work_dir).map_err(|e| SearchError::io(&config.work_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| SearchError::Pool(e.to_string()))?;
    let mut trials: Vec<Trial> = pool.install(|| {
        (0..config.n_trials)
            .into_par_iter()
            .map(|id| run_trial(config, &template, evaluator, id))
            .collect::<Result<_, _>>()
    })?;

    let n = config.n_trials.max(1) as f64;
    let n_non_convergent = trials
        .iter()
        .filter(|t| t.outcome == TrialOutcome::NonConvergent)
        .count() as u64;
    let n_failed = trials
        .iter()
        .filter(|t| t.outcome == TrialOutcome::Failed)
        .count() as u64;
    let mut report = SearchReport {
        schema_version: SCHEMA_VERSION,
        toolkit_version: TOOLKIT_VERSION.to_owned(),
        seed: config.seed,
        n_trials: config.n_trials,
        trials: Vec::new(),
        selected_trial: None,
        n_non_convergent,
        n_failed,
        non_convergence_ratio: n_non_convergent as f64 / n,
        failure_ratio: (n_non_convergent + n_failed) as f64 / n,
        test_report: None,
    };

    let Some(best) = select_trial(&trials) else {
        report.trials = trials;
        return Err(SearchError::AllTrialsNonConvergent {
            n_trials: config.n_trials,
            failure_ratio: report.failure_ratio,
            report: Box::new(report),
        });
    };
    let trial_id = trials[best].trial_id;
    let file = pack_file_name(SplitName::TestFullsup);
    let pack = trial_dir(&config.work_dir, trial_id).join(&file);
    if !pack.is_file() {
        return Err(SearchError::MissingScorepack { trial_id, file });
    }
    let test = pool
        .install(|| evaluator.evaluate(SplitName::TestFullsup, &pack))
        .map_err(|source| SearchError::Evaluation { trial_id, source })?;
    trials[best].test_score = Some(test.score);
    report.selected_trial = Some(trial_id);
    report.test_report = Some(test);
    report.trials = trials;
    Ok(report)
}
