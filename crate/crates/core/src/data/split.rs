use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    SubjectDependent,
    Loso,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject-dependent" => Ok(SplitMode::SubjectDependent),
            "loso" => Ok(SplitMode::Loso),
            other => Err(Error::Config(format!("unknown split {other:?}, expected subject-dependent or loso"))),
        }
    }
}

/// Sample indices of one train/test partition, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// The test subject in leave-one-subject-out mode.
    pub held_out_subject: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub folds: Vec<Fold>,
}

fn by_subject(samples: &[Sample]) -> BTreeMap<u32, Vec<usize>> {
    let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        m.entry(s.subject).or_default().push(i);
    }
    m
}

/// Number of training samples out of `n` for a train `ratio`: `ceil(ratio·n)`, leaving at least one test sample.
pub fn train_count(n: usize, ratio: f64) -> usize {
    (((ratio * n as f64) - 1e-9).ceil() as usize).clamp(1, n - 1)
}

/// Per-subject seeded shuffle; `ceil(ratio·n)` of each subject's samples train.
///
/// ```
/// use helo::data::{generate_synthetic, split_subject_dependent, DatasetSchema};
/// let samples = generate_synthetic(&DatasetSchema::wesad(), 1, 32, 0).unwrap();
/// let plan = split_subject_dependent(&samples, 0.8, 1).unwrap();
/// assert_eq!((plan.folds[0].train.len(), plan.folds[0].test.len()), (26, 6));
/// ```
pub fn split_subject_dependent(samples: &[Sample], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio must lie in (0, 1), got {ratio}")));
    }
    if samples.is_empty() {
        return Err(Error::Split("no samples to split".into()));
    }
    let mut rng = seeded_rng(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (subject, mut idx) in by_subject(samples) {
        if idx.len() < 2 {
            return Err(Error::Split(format!("subject {subject} has a single sample")));
        }
        idx.shuffle(&mut rng);
        let k = train_count(idx.len(), ratio);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        mode: SplitMode::SubjectDependent,
        folds: vec![Fold {
            train,
            test,
            held_out_subject: None,
        }],
    })
}

/// One fold per subject, in ascending subject order.
pub fn split_loso(samples: &[Sample]) -> Result<SplitPlan> {
    let groups = by_subject(samples);
    if groups.len() < 2 {
        return Err(Error::Split(format!(
            "leave-one-subject-out needs at least two subjects, found {}",
            groups.len()
        )));
    }
    let folds = groups
        .iter()
        .map(|(&subject, test)| Fold {
            train: (0..samples.len()).filter(|&i| samples[i].subject != subject).collect(),
            test: test.clone(),
            held_out_subject: Some(subject),
        })
        .collect();
    Ok(SplitPlan {
        mode: SplitMode::Loso,
        folds,
    })
}
