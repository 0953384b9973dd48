//! Dataset schemas, synthetic generation, JSON-lines ingestion, PANAS label
//! conversion and the two evaluation split protocols.

mod io;
mod schema;
mod split;
mod synthetic;

pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset, Sample};
pub use schema::{DatasetSchema, ModalityGroup, ModalitySpec, PANAS_LABELS, SCHEMA_FORMAT_VERSION};
pub use split::{split_loso, split_subject_dependent, train_count, Fold, SplitMode, SplitPlan};
pub use synthetic::{
    fear_cluster, generate_synthetic, generate_synthetic_with, planted_correlation, SyntheticConfig, SyntheticData,
};

use crate::error::{Error, Result};
use crate::labels::EmotionDistribution;

/// How 1–5 PANAS scores become a distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PanasTransform {
    /// `score / Σ scores`.
    #[default]
    Normalize,
    /// `softmax(scores)`.
    Softmax,
}

/// ```
/// use helo::data::{panas_to_distribution, PanasTransform};
/// let d = panas_to_distribution(&[5, 1, 1, 1, 1, 1, 1, 1, 1, 1], PanasTransform::Normalize).unwrap();
/// assert!((d.probs()[0] - 5.0 / 14.0).abs() < 1e-15);
/// ```
pub fn panas_to_distribution(scores: &[u8], transform: PanasTransform) -> Result<EmotionDistribution> {
    if scores.is_empty() {
        return Err(Error::Validation("no PANAS scores".into()));
    }
    if let Some((i, s)) = scores.iter().enumerate().find(|(_, s)| !(1..=5).contains(*s)) {
        return Err(Error::Validation(format!("PANAS score {s} at position {i} is outside 1..=5")));
    }
    let weights: Vec<f64> = match transform {
        PanasTransform::Normalize => scores.iter().map(|&s| s as f64).collect(),
        PanasTransform::Softmax => {
            let mx = *scores.iter().max().expect("nonempty") as f64;
            scores.iter().map(|&s| (s as f64 - mx).exp()).collect()
        }
    };
    EmotionDistribution::from_weights(&weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panas_cases() {
        let u = panas_to_distribution(&[3; 10], PanasTransform::Normalize).unwrap();
        assert!(u.probs().iter().all(|p| (p - 0.1).abs() < 1e-15));
        let u = panas_to_distribution(&[2; 4], PanasTransform::Softmax).unwrap();
        assert!(u.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let d = panas_to_distribution(&[5, 1, 1, 1, 1, 1, 1, 1, 1, 1], PanasTransform::Normalize).unwrap();
        assert!((d.probs()[0] - 0.3571).abs() < 1e-4);
        let s = panas_to_distribution(&[1, 2, 3, 4, 5], PanasTransform::Softmax).unwrap();
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(panas_to_distribution(&[0, 3], PanasTransform::Normalize).is_err());
        assert!(panas_to_distribution(&[6, 3], PanasTransform::Normalize).is_err());
    }
}
