use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSchema, ModalityGroup};
use crate::error::{Error, Result};
use crate::ot::SinkhornConfig;

/// Hyperparameters of the model and the optimization loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub encoder_depth: usize,
    /// Tokens per physiological modality after projection.
    pub tokens: usize,
    /// Hidden widths of the prediction head.
    pub head_hidden: [usize; 2],
    pub sinkhorn: SinkhornConfig,
    /// Multiply transported tokens by the token count so that rows keep unit mass.
    pub rescale_transport: bool,
    pub lambda_cc: f64,
    /// Use the label correlation of the whole training set instead of each batch.
    pub dataset_correlation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 300,
            heads: 4,
            embed_dim: 128,
            ffn_dim: 64,
            encoder_depth: 1,
            tokens: 4,
            head_hidden: [128, 64],
            sinkhorn: SinkhornConfig::default(),
            rescale_transport: true,
            lambda_cc: 1.0,
            dataset_correlation: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A narrow model for finite-difference checks.
    pub fn gradcheck() -> Self {
        TrainConfig {
            embed_dim: 8,
            ffn_dim: 6,
            tokens: 2,
            head_hidden: [8, 6],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("encoder_depth", self.encoder_depth),
            ("tokens", self.tokens),
            ("head_hidden[0]", self.head_hidden[0]),
            ("head_hidden[1]", self.head_hidden[1]),
            ("sinkhorn.max_iter", self.sinkhorn.max_iter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be nonnegative, got {}", self.learning_rate)));
        }
        if !(self.lambda_cc >= 0.0 && self.lambda_cc.is_finite()) {
            return Err(Error::Config(format!("lambda_cc must be nonnegative, got {}", self.lambda_cc)));
        }
        if !(self.sinkhorn.epsilon > 0.0) || !(self.sinkhorn.tol > 0.0) {
            return Err(Error::Config("sinkhorn epsilon and tol must be positive".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Which components and modalities a model variant drops.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Concatenate projected physiological tokens instead of cross-attending.
    pub disable_capf: bool,
    /// Concatenate physiological and behavioral tokens without transport or encoders.
    pub disable_othm: bool,
    /// Mean-pool fused tokens into the head and drop the correlation loss.
    pub disable_lcdca: bool,
    pub excluded_modalities: BTreeSet<String>,
}

impl AblationSpec {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn without(modality: &str) -> Self {
        AblationSpec {
            excluded_modalities: [modality.to_string()].into(),
            ..Default::default()
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        for m in &self.excluded_modalities {
            if schema.modality(m).is_none() {
                return Err(Error::Config(format!("cannot exclude unknown modality {m:?}")));
            }
        }
        let remaining_phy = schema
            .modalities
            .iter()
            .filter(|m| m.group == ModalityGroup::Physiological && !self.excluded_modalities.contains(&m.name))
            .count();
        if remaining_phy == 0 {
            return Err(Error::Config("at least one physiological modality must remain".into()));
        }
        Ok(())
    }

    /// Short label such as `full`, `w/o CAPF` or `w/o EEG`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_capf {
            parts.push("CAPF".to_string());
        }
        if self.disable_othm {
            parts.push("OTHM".to_string());
        }
        if self.disable_lcdca {
            parts.push("LCDCA".to_string());
        }
        parts.extend(self.excluded_modalities.iter().map(|m| m.to_uppercase()));
        if parts.is_empty() {
            "full".to_string()
        } else {
            format!("w/o {}", parts.join("+"))
        }
    }
}

/// The component removals followed by each single-modality removal.
pub fn ablation_grid(schema: &DatasetSchema) -> Vec<AblationSpec> {
    let mut grid = vec![
        AblationSpec {
            disable_capf: true,
            ..Default::default()
        },
        AblationSpec {
            disable_othm: true,
            ..Default::default()
        },
        AblationSpec {
            disable_lcdca: true,
            ..Default::default()
        },
    ];
    grid.extend(schema.modalities.iter().map(|m| AblationSpec::without(&m.name)));
    grid.push(AblationSpec::full());
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 300);
        assert_eq!(c.heads, 4);
        assert_eq!((c.embed_dim, c.ffn_dim), (128, 64));
        assert_eq!(c.lambda_cc, 1.0);
        c.validate().unwrap();
        TrainConfig::gradcheck().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lambda_cc: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_overrides_and_hash() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "seed": 3}"#).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
        assert_eq!(c.hash(), c.clone().hash());
        assert_eq!(c.hash().len(), 16);
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn ablation_validation_and_labels() {
        let s = DatasetSchema::dmer();
        AblationSpec::without("eeg").validate(&s).unwrap();
        AblationSpec::without("video").validate(&s).unwrap();
        assert!(AblationSpec::without("ecg").validate(&s).is_err());
        let all_phy = AblationSpec {
            excluded_modalities: ["eeg", "gsr", "ppg"].iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        assert!(all_phy.validate(&s).is_err());
        assert_eq!(AblationSpec::full().label(), "full");
        assert_eq!(AblationSpec::without("eeg").label(), "w/o EEG");
        let grid = ablation_grid(&s);
        let labels: Vec<String> = grid.iter().map(|a| a.label()).collect();
        assert_eq!(
            labels,
            ["w/o CAPF", "w/o OTHM", "w/o LCDCA", "w/o EEG", "w/o GSR", "w/o PPG", "w/o VIDEO", "full"]
        );
    }
}
