//! Hyperparameter search spaces and seeded sampling.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("dimension {0}: lower bound must be below upper bound")]
    InvalidBounds(String),
    #[error("dimension {0}: log-uniform bounds must be positive")]
    NonPositiveLogBounds(String),
    #[error("dimension {0}: categorical needs at least one value")]
    EmptyCategorical(String),
    #[error("dimension {name} refers to unknown dimension {parent}")]
    UnknownParent { name: String, parent: String },
    #[error("duplicate dimension {0}")]
    DuplicateName(String),
    #[error("cyclic dependency among conditional dimensions: {0:?}")]
    CyclicDependency(Vec<String>),
    #[error("dimension {name}: parent value {value} is not a real in (-inf, {hi}]")]
    InvalidParentValue { name: String, value: String, hi: f64 },
    #[error("unknown method preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Text(String),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Text(_) => None,
        }
    }
}

impl fmt::Display for Value {
    /// Reals print with 17 significant digits so they parse back exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v:.16e}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// `exp(U[ln lo, ln hi])`.
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `U[value of lower, hi]`.
    UniformConditional { lower: String, hi: f64 },
    Categorical { values: Vec<Value> },
    /// `1 / U(0, 2] - 1/2`, supported on `[0, inf)`.
    ReciprocalShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub distribution: Distribution,
}

impl Dimension {
    pub fn new(name: impl Into<String>, distribution: Distribution) -> Self {
        Self {
            name: name.into(),
            distribution,
        }
    }
}

/// Sampled values in declaration order.
pub type Sample = Vec<(String, Value)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dimension>", into = "Vec<Dimension>")]
pub struct HyperparameterSpace {
    dimensions: Vec<Dimension>,
    /// Indices into `dimensions`, parents before children.
    order: Vec<usize>,
}

impl TryFrom<Vec<Dimension>> for HyperparameterSpace {
    type Error = SpaceError;

    fn try_from(dimensions: Vec<Dimension>) -> Result<Self, Self::Error> {
        Self::new(dimensions)
    }
}

impl From<HyperparameterSpace> for Vec<Dimension> {
    fn from(space: HyperparameterSpace) -> Self {
        space.dimensions
    }
}

impl HyperparameterSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, SpaceError> {
        let mut index = HashMap::new();
        for (i, d) in dimensions.iter().enumerate() {
            if index.insert(d.name.as_str(), i).is_some() {
                return Err(SpaceError::DuplicateName(d.name.clone()));
            }
        }
        let mut parent = vec![None; dimensions.len()];
        for (i, d) in dimensions.iter().enumerate() {
            let bad = |ok: bool| if ok { Ok(()) } else { Err(SpaceError::InvalidBounds(d.name.clone())) };
            match &d.distribution {
                Distribution::LogUniform { lo, hi } => {
                    bad(lo < hi)?;
                    if !(*lo > 0.0) {
                        return Err(SpaceError::NonPositiveLogBounds(d.name.clone()));
                    }
                }
                Distribution::Uniform { lo, hi } => bad(lo < hi && lo.is_finite() && hi.is_finite())?,
                Distribution::UniformConditional { lower, hi } => {
                    bad(hi.is_finite())?;
                    let p = *index.get(lower.as_str()).ok_or_else(|| SpaceError::UnknownParent {
                        name: d.name.clone(),
                        parent: lower.clone(),
                    })?;
                    parent[i] = Some(p);
                }
                Distribution::Categorical { values } => {
                    if values.is_empty() {
                        return Err(SpaceError::EmptyCategorical(d.name.clone()));
                    }
                }
                Distribution::ReciprocalShift => {}
            }
        }
        let order = topological_order(&dimensions, &parent)?;
        Ok(Self { dimensions, order })
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    /// Draws one value per dimension. Output follows declaration order.
    pub fn sample<R: RngCore>(&self, rng: &mut R) -> Result<Sample, SpaceError> {
        let mut drawn: Vec<Option<Value>> = vec![None; self.dimensions.len()];
        let index: HashMap<&str, usize> = self
            .dimensions
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.as_str(), i))
            .collect();
        for &i in &self.order {
            let d = &self.dimensions[i];
            let value = match &d.distribution {
                Distribution::LogUniform { lo, hi } => {
                    let (a, b) = (lo.ln(), hi.ln());
                    Value::Real((a + rng.random::<f64>() * (b - a)).exp().clamp(*lo, *hi))
                }
                Distribution::Uniform { lo, hi } => {
                    Value::Real(lo + rng.random::<f64>() * (hi - lo))
                }
                Distribution::UniformConditional { lower, hi } => {
                    let parent = drawn[index[lower.as_str()]].as_ref().expect("topological order");
                    let lo = parent
                        .as_real()
                        .filter(|lo| lo <= hi)
                        .ok_or_else(|| SpaceError::InvalidParentValue {
                            name: d.name.clone(),
                            value: parent.to_string(),
                            hi: *hi,
                        })?;
                    Value::Real((lo + rng.random::<f64>() * (hi - lo)).clamp(lo, *hi))
                }
                Distribution::Categorical { values } => {
                    values[rng.random_range(0..values.len())].clone()
                }
                Distribution::ReciprocalShift => {
                    // 1 - U[0, 1) lies in (0, 1]
                    let u = 2.0 * (1.0 - rng.random::<f64>());
                    Value::Real(reciprocal_shift(u))
                }
            };
            drawn[i] = Some(value);
        }
        Ok(self
            .dimensions
            .iter()
            .zip(drawn)
            .map(|(d, v)| (d.name.clone(), v.expect("every dimension drawn")))
            .collect())
    }

    /// The search spaces of the benchmarked WSOL methods. Every method
    /// shares the learning rate and score-map resolution.
    pub fn preset(method: &str) -> Result<Self, SpaceError> {
        use Distribution::*;
        let unit = || Uniform { lo: 0.0, hi: 1.0 };
        let mut dims = vec![
            Dimension::new("learning_rate", LogUniform { lo: 1e-5, hi: 1.0 }),
            Dimension::new(
                "score_map_resolution",
                Categorical {
                    values: vec![Value::Real(14.0), Value::Real(28.0)],
                },
            ),
        ];
        match method {
            "cam" => {}
            "has" => {
                dims.push(Dimension::new("drop_rate", unit()));
                dims.push(Dimension::new("drop_area", unit()));
            }
            "acol" => dims.push(Dimension::new("erasing_threshold", unit())),
            "spg" => {
                for branch in ["b1", "b2", "c"] {
                    let low = format!("threshold_low_{branch}");
                    dims.push(Dimension::new(low.clone(), unit()));
                    dims.push(Dimension::new(
                        format!("threshold_high_{branch}"),
                        UniformConditional { lower: low, hi: 1.0 },
                    ));
                }
            }
            "adl" => {
                dims.push(Dimension::new("drop_rate", unit()));
                dims.push(Dimension::new("erasing_threshold", unit()));
            }
            "cutmix" => {
                dims.push(Dimension::new("size_prior", ReciprocalShift));
                dims.push(Dimension::new("mix_rate", unit()));
            }
            "gcnet" => {
                let yes_no = || Categorical {
                    values: vec![Value::Text("yes".into()), Value::Text("no".into())],
                };
                dims.push(Dimension::new("loss_area", yes_no()));
                dims.push(Dimension::new("loss_background", yes_no()));
            }
            other => return Err(SpaceError::UnknownPreset(other.to_owned())),
        }
        Self::new(dims)
    }
}

pub const PRESETS: [&str; 7] = ["cam", "has", "acol", "spg", "adl", "cutmix", "gcnet"];

/// Maps a draw `u` in `(0, 2]` to `1/u - 1/2`.
pub fn reciprocal_shift(u: f64) -> f64 {
    1.0 / u - 0.5
}

fn topological_order(
    dimensions: &[Dimension],
    parent: &[Option<usize>],
) -> Result<Vec<usize>, SpaceError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; dimensions.len()];
    let mut order = Vec::with_capacity(dimensions.len());
    for start in 0..dimensions.len() {
        let mut chain: Vec<usize> = Vec::new();
        let mut cur = Some(start);
        while let Some(i) = cur {
            match state[i] {
                2 => break,
                1 => {
                    let at = chain.iter().position(|&c| c == i).unwrap_or(0);
                    return Err(SpaceError::CyclicDependency(
                        chain[at..].iter().map(|&c| dimensions[c].name.clone()).collect(),
                    ));
                }
                _ => {
                    state[i] = 1;
                    chain.push(i);
                    cur = parent[i];
                }
            }
        }
        for &i in chain.iter().rev() {
            state[i] = 2;
            order.push(i);
        }
    }
    Ok(order)
}

/// SplitMix64 finalizer; decorrelates nearby `(seed, trial)` pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trial seed derived from the search seed and trial id only, so the
/// draws of a trial never depend on scheduling.
pub fn trial_seed(seed: u64, trial_id: u64) -> u64 {
    mix(mix(seed) ^ trial_id)
}

pub fn trial_rng(seed: u64, trial_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(seed, trial_id))
}

/// `name=value` lines, one per dimension.
pub fn hparams_text(sample: &Sample) -> String {
    sample
        .iter()
        .map(|(name, value)| format!("{name}={value}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_never_below_parent() {
        let space = HyperparameterSpace::preset("spg").unwrap();
        let mut rng = trial_rng(3, 0);
        for _ in 0..2000 {
            let s = space.sample(&mut rng).unwrap();
            let get = |n: &str| s.iter().find(|(k, _)| k == n).unwrap().1.as_real().unwrap();
            for b in ["b1", "b2", "c"] {
                let lo = get(&format!("threshold_low_{b}"));
                let hi = get(&format!("threshold_high_{b}"));
                assert!(lo <= hi && hi <= 1.0);
            }
        }
    }

    #[test]
    fn reciprocal_shift_endpoint() {
        assert_eq!(reciprocal_shift(2.0), 0.0);
        assert_eq!(reciprocal_shift(1.0), 0.5);
    }

    #[test]
    fn sampling_is_seeded() {
        let space = HyperparameterSpace::preset("cutmix").unwrap();
        let a = space.sample(&mut trial_rng(7, 4)).unwrap();
        let b = space.sample(&mut trial_rng(7, 4)).unwrap();
        let c = space.sample(&mut trial_rng(7, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cycles_and_unknown_parents_rejected() {
        let cyc = vec![
            Dimension::new("a", Distribution::UniformConditional { lower: "b".into(), hi: 1.0 }),
            Dimension::new("b", Distribution::UniformConditional { lower: "a".into(), hi: 1.0 }),
        ];
        assert!(matches!(
            HyperparameterSpace::new(cyc),
            Err(SpaceError::CyclicDependency(_))
        ));
        let selfref = vec![Dimension::new(
            "a",
            Distribution::UniformConditional { lower: "a".into(), hi: 1.0 },
        )];
        assert!(matches!(
            HyperparameterSpace::new(selfref),
            Err(SpaceError::CyclicDependency(_))
        ));
        let unknown = vec![Dimension::new(
            "a",
            Distribution::UniformConditional { lower: "zz".into(), hi: 1.0 },
        )];
        assert!(matches!(
            HyperparameterSpace::new(unknown),
            Err(SpaceError::UnknownParent { .. })
        ));
        assert!(matches!(
            HyperparameterSpace::new(vec![Dimension::new(
                "x",
                Distribution::Uniform { lo: 1.0, hi: 1.0 }
            )]),
            Err(SpaceError::InvalidBounds(_))
        ));
        assert!(matches!(
            HyperparameterSpace::new(vec![Dimension::new(
                "x",
                Distribution::Categorical { values: vec![] }
            )]),
            Err(SpaceError::EmptyCategorical(_))
        ));
    }

    #[test]
    fn child_declared_before_parent_still_samples() {
        let space = HyperparameterSpace::new(vec![
            Dimension::new("hi", Distribution::UniformConditional { lower: "lo".into(), hi: 1.0 }),
            Dimension::new("lo", Distribution::Uniform { lo: 0.0, hi: 1.0 }),
        ])
        .unwrap();
        let s = space.sample(&mut trial_rng(1, 1)).unwrap();
        assert_eq!(s[0].0, "hi");
        assert!(s[0].1.as_real().unwrap() >= s[1].1.as_real().unwrap());
    }

    #[test]
    fn hparams_file_format() {
        let s: Sample = vec![
            ("learning_rate".into(), Value::Real(1e-5)),
            ("loss_area".into(), Value::Text("yes".into())),
        ];
        assert_eq!(
            hparams_text(&s),
            "learning_rate=1.0000000000000001e-5\nloss_area=yes\n"
        );
        let v: f64 = "1.0000000000000001e-5".parse().unwrap();
        assert_eq!(v, 1e-5);
    }

    #[test]
    fn space_json_round_trip() {
        let space = HyperparameterSpace::preset("spg").unwrap();
        let json = serde_json::to_string(&space).unwrap();
        let back: HyperparameterSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, space);
        assert!(serde_json::from_str::<HyperparameterSpace>(
            r#"[{"name":"a","kind":"uniform_conditional","lower":"b","hi":1.0}]"#
        )
        .is_err());
    }
}
