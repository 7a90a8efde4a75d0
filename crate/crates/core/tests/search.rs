use std::fs;
use std::path::Path;

use wsol_eval::eval::{EvalOptions, GroundTruth};
use wsol_eval::io::annotations::{BoxAnnotationSet, ManifestEntry, SplitManifest, SplitName};
use wsol_eval::io::scorepack::write_scorepack;
use wsol_eval::search::harness::{pack_file_name, HPARAMS_FILE};
use wsol_eval::search::{
    run_search, DatasetEvaluator, Distribution, Dimension, HyperparameterSpace, SearchConfig,
    SearchError, TrialOutcome,
};
use wsol_eval::{Bbox, ScoreMap};

fn split(name: SplitName, prefix: &str) -> (SplitManifest, BoxAnnotationSet) {
    let entries: Vec<ManifestEntry> = (0..4)
        .map(|i| ManifestEntry {
            image_id: format!("{prefix}{i}"),
            category_id: "c".into(),
            width: 8,
            height: 8,
        })
        .collect();
    let boxes = entries
        .iter()
        .map(|e| (e.image_id.clone(), vec![Bbox::new(1, 1, 5, 5).unwrap()]))
        .collect();
    (SplitManifest::new(name, entries).unwrap(), boxes)
}

/// Maps whose box matches the ground truth only for the first `good` images.
fn pack(manifest: &SplitManifest, good: usize) -> Vec<ScoreMap> {
    manifest
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (lo, hi) = if i < good { (1, 5) } else { (4, 8) };
            ScoreMap::from_fn(&e.image_id, 8, 8, |r, c| {
                if (lo..hi).contains(&r) && (lo..hi).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap()
        })
        .collect()
}

fn space() -> HyperparameterSpace {
    HyperparameterSpace::new(vec![Dimension::new(
        "lr",
        Distribution::LogUniform { lo: 1e-4, hi: 1.0 },
    )])
    .unwrap()
}

/// Writes `packs/trial-NNN/{train,test}-fullsup.wsep` with `quality(t)`
/// correctly localized images per split.
fn prepare_packs(root: &Path, n: u64, quality: impl Fn(u64) -> usize, val: &SplitManifest, test: &SplitManifest) {
    for t in 0..n {
        let dir = root.join(format!("trial-{t:03}"));
        fs::create_dir_all(&dir).unwrap();
        let q = quality(t);
        write_scorepack(&pack(val, q), dir.join(pack_file_name(SplitName::TrainFullsup))).unwrap();
        write_scorepack(&pack(test, q), dir.join(pack_file_name(SplitName::TestFullsup))).unwrap();
    }
}

fn copy_trainer(packs: &Path) -> String {
    format!(
        "sh -c 'cp \"$0\"/$(basename \"$1\")/*.wsep \"$1\"/' {} {{trial_dir}}",
        packs.display()
    )
}

#[test]
fn rigged_trial_wins_and_test_is_scored_once() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let packs = dir.path().join("packs");
    prepare_packs(&packs, 8, |t| if t == 5 { 4 } else { (t % 3) as usize }, &val, &test);

    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), copy_trainer(&packs), dir.path().join("work"));
    config.n_trials = 8;
    config.jobs = 3;
    let report = run_search(&config, &evaluator).unwrap();

    assert_eq!(report.selected_trial, Some(5));
    assert_eq!(evaluator.test_calls(), 1);
    assert_eq!(evaluator.validation_calls(), 8);
    assert_eq!(report.test_report.as_ref().unwrap().score, 1.0);
    for t in &report.trials {
        assert_eq!(t.test_score.is_some(), t.trial_id == 5);
        assert_eq!(t.outcome, TrialOutcome::Converged);
    }
    let hparams = fs::read_to_string(dir.path().join("work/trial-005").join(HPARAMS_FILE)).unwrap();
    assert!(hparams.starts_with("lr="));
}

#[test]
fn ties_select_lower_trial() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let packs = dir.path().join("packs");
    prepare_packs(&packs, 6, |t| if t == 2 || t == 4 { 3 } else { 1 }, &val, &test);
    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), copy_trainer(&packs), dir.path().join("work"));
    config.n_trials = 6;
    config.jobs = 6;
    assert_eq!(run_search(&config, &evaluator).unwrap().selected_trial, Some(2));
}

#[test]
fn all_failing_trainers() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), "sh -c 'exit 3' {trial_dir}", dir.path().join("work"));
    config.n_trials = 5;
    match run_search(&config, &evaluator) {
        Err(SearchError::AllTrialsNonConvergent { failure_ratio, report, .. }) => {
            assert_eq!(failure_ratio, 1.0);
            assert_eq!(report.non_convergence_ratio, 1.0);
            assert!(report.trials.iter().all(|t| t.exit_code == Some(3)));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(evaluator.test_calls(), 0);
}

#[test]
fn sentinel_marks_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let packs = dir.path().join("packs");
    prepare_packs(&packs, 4, |t| if t == 1 { 4 } else { 2 }, &val, &test);
    // trial 1 has the best maps but declares divergence
    let trainer = format!(
        "sh -c 'cp \"$0\"/$(basename \"$1\")/*.wsep \"$1\"/; [ \"$2\" = 1 ] && touch \"$1\"/NONCONVERGENT; exit 0' {} {{trial_dir}} {{trial_id}}",
        packs.display()
    );
    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), trainer, dir.path().join("work"));
    config.n_trials = 4;
    let report = run_search(&config, &evaluator).unwrap();
    assert_eq!(report.trials[1].outcome, TrialOutcome::NonConvergent);
    assert_eq!(report.selected_trial, Some(0));
    assert_eq!(report.non_convergence_ratio, 0.25);
}

#[test]
fn missing_pack_and_spawn_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), "true {trial_dir}", dir.path().join("w1"));
    config.n_trials = 2;
    assert!(matches!(
        run_search(&config, &evaluator),
        Err(SearchError::MissingScorepack { trial_id: 0, .. })
    ));

    config.trainer = "/nonexistent/trainer {hparams_file}".into();
    config.work_dir = dir.path().join("w2");
    assert!(matches!(
        run_search(&config, &evaluator),
        Err(SearchError::TrainerSpawnFailure { .. })
    ));

    config.trainer = "train --fast".into();
    assert!(matches!(
        run_search(&config, &evaluator),
        Err(SearchError::InvalidTemplate(_))
    ));
}

#[test]
fn unreadable_pack_marks_trial_failed() {
    let dir = tempfile::tempdir().unwrap();
    let (val, val_boxes) = split(SplitName::TrainFullsup, "v");
    let (test, test_boxes) = split(SplitName::TestFullsup, "t");
    let packs = dir.path().join("packs");
    prepare_packs(&packs, 3, |_| 2, &val, &test);
    fs::write(packs.join("trial-000").join("train-fullsup.wsep"), b"garbage").unwrap();
    let evaluator = DatasetEvaluator::new(
        EvalOptions::default(),
        (&val, GroundTruth::Boxes(&val_boxes)),
        (&test, GroundTruth::Boxes(&test_boxes)),
    );
    let mut config = SearchConfig::new(space(), copy_trainer(&packs), dir.path().join("work"));
    config.n_trials = 3;
    let report = run_search(&config, &evaluator).unwrap();
    assert_eq!(report.trials[0].outcome, TrialOutcome::Failed);
    assert!(report.trials[0].failure.is_some());
    assert_eq!(report.n_failed, 1);
    assert_eq!(report.selected_trial, Some(1));
}
