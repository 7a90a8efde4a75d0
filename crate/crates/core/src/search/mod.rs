//! Random hyperparameter search, proxy subsets and ranking agreement.

pub mod harness;
pub mod kendall;
pub mod proxy;
pub mod space;

pub use harness::{
    run_search, select_trial, DatasetEvaluator, SearchConfig, SearchError, SearchReport,
    SplitEvaluator, Trial, TrialOutcome,
};
pub use kendall::{kendall_tau, KendallError};
pub use proxy::{proxy_manifest, ProxyError};
pub use space::{Dimension, Distribution, HyperparameterSpace, Sample, SpaceError, Value};
